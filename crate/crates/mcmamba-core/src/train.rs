//! Toy-scale training: Adam with per-epoch exponential learning-rate decay,
//! an L1 loss over the complex planes plus magnitudes, SI-SDR evaluation,
//! and a deterministic in-memory train/val loop.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::dataset::{simulate_multichannel, synth_vowel, white_noise, SimSpec};
use crate::model::{McMambaModel, ModelError};
use crate::rng::Rng;
use crate::stft::{istft, stft, StftConfig, StftError};
use crate::tensor::{GradientTape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("reference signal is all zeros")]
    ZeroReference,
    #[error("length mismatch: estimate {est} vs reference {reference}")]
    LengthMismatch { est: usize, reference: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stft(#[from] StftError),
    #[error(transparent)]
    Sim(#[from] crate::dataset::SimError),
}

/// Optimizer and schedule settings. Defaults follow the published recipe:
/// initial learning rate 1e-3 decayed by 0.992 each epoch under Adam.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub alpha_ri: f64,
    pub alpha_mag: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            decay: 0.992,
            max_epochs: 10,
            batch_size: 1,
            seed: 0,
            alpha_ri: 0.5,
            alpha_mag: 0.5,
        }
    }
}

impl TrainConfig {
    /// lr(epoch) = lr0 * decay^epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powf(epoch as f64)
    }
}

/// Bias-corrected Adam moments, keyed by parameter name so updates are
/// deterministic regardless of traversal details.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

/// One Adam update over named (parameter, gradient) pairs.
pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, param) in params.iter_mut() {
        let Some(grad) = grads.get(name) else {
            continue;
        };
        if grad.shape() != param.shape() {
            return Err(TrainError::Tensor(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: grad.shape().to_vec(),
                rhs: param.shape().to_vec(),
            }));
        }
        let n = param.numel();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let data = param.data_mut();
        for i in 0..n {
            let g = grad.data()[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// L1 over the (Re, Im) planes plus L1 over magnitudes:
/// alpha_ri * mean|pred - target| + alpha_mag * mean||pred| - |target||.
/// Both tensors are `[.., 2]` with the trailing axis holding (Re, Im).
pub fn spectral_loss(
    pred: &Tensor,
    target: &Tensor,
    alpha_ri: f64,
    alpha_mag: f64,
) -> Result<Tensor, TensorError> {
    if pred.shape() != target.shape() || pred.shape().last() != Some(&2) {
        return Err(TensorError::ShapeMismatch {
            op: "spectral_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let ri = pred.sub(target)?.abs().mean();
    let pred_mag = Tensor::magnitude(&pred.slice_last(0, 1)?, &pred.slice_last(1, 1)?)?;
    let target_mag = Tensor::magnitude(&target.slice_last(0, 1)?, &target.slice_last(1, 1)?)?;
    let mag = pred_mag.sub(&target_mag)?.abs().mean();
    ri.scale(alpha_ri).add(&mag.scale(alpha_mag))
}

/// Scale-invariant SDR in dB, capped at +60 when the residual is numerically
/// zero.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64, TrainError> {
    if estimate.len() != reference.len() {
        return Err(TrainError::LengthMismatch {
            est: estimate.len(),
            reference: reference.len(),
        });
    }
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(TrainError::ZeroReference);
    }
    let dot: f64 = estimate.iter().zip(reference).map(|(e, r)| e * r).sum();
    let alpha = dot / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let resid: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| {
            let d = e - alpha * r;
            d * d
        })
        .sum();
    if resid <= target_energy * 1e-6 {
        return Ok(60.0);
    }
    Ok((10.0 * (target_energy / resid).log10()).min(60.0))
}

/// One simulated utterance: the multichannel mixture and the mono target.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub noisy: AudioBuffer,
    pub target: Tensor,
}

#[derive(Debug, Clone)]
pub struct ToyData {
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
}

/// Recipe for an in-memory toy corpus.
#[derive(Debug, Clone)]
pub struct ToyDataSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub dur_s: f64,
    pub n_channels: usize,
    pub snr_db: (f64, f64),
    pub seed: u64,
}

pub fn make_toy_data(spec: &ToyDataSpec) -> Result<ToyData, TrainError> {
    let sr = 16_000u32;
    let n = (spec.dur_s * sr as f64) as usize;
    let mut rng = Rng::new(spec.seed);
    let gen = |count: usize, rng: &mut Rng| -> Result<Vec<Utterance>, TrainError> {
        (0..count)
            .map(|_| {
                let clean = synth_vowel(rng, n, sr);
                let noise = white_noise(rng, spec.n_channels, n);
                let sim = SimSpec {
                    n_channels: spec.n_channels,
                    delays: (0..spec.n_channels).map(|m| 1.7 * m as f64).collect(),
                    snr_db: spec.snr_db,
                    reference_channel: 4.min(spec.n_channels - 1),
                    sample_rate: sr,
                    seed: rng.next_u64(),
                };
                let (noisy, target) = simulate_multichannel(&clean, &noise, &sim)?;
                Ok(Utterance { noisy, target })
            })
            .collect()
    };
    Ok(ToyData {
        train: gen(spec.n_train, &mut rng)?,
        val: gen(spec.n_val, &mut rng)?,
    })
}

/// One step/epoch record of the training log.
#[derive(Debug, Clone)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_sisdr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<LogRecord>,
    pub loss_curve: Vec<f64>,
    pub best_val_sisdr: f64,
    pub final_val_sisdr: f64,
    pub noisy_val_sisdr: f64,
    pub best_weights: BTreeMap<String, Tensor>,
}

impl TrainReport {
    /// Line-delimited log: `epoch step lr loss val_sisdr` per record
    /// (`na` when no validation ran at that step).
    pub fn log_text(&self) -> String {
        let mut out = String::from("# epoch step lr loss val_sisdr\n");
        for r in &self.records {
            let val = r
                .val_sisdr
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "na".to_string());
            out.push_str(&format!(
                "{} {} {:.8} {:.8} {}\n",
                r.epoch, r.step, r.lr, r.loss, val
            ));
        }
        out
    }
}

fn target_spectrum_normalized(
    target: &Tensor,
    stft_cfg: &StftConfig,
    norms: &[f64],
    sample_rate: u32,
) -> Result<Tensor, TrainError> {
    let spec = stft(target, stft_cfg, sample_rate)?;
    let (t_frames, bins) = (spec.frames(), spec.bins());
    let mut out = vec![0.0; t_frames * bins * 2];
    for t in 0..t_frames {
        for f in 0..bins {
            let (re, im) = spec.at(0, t, f);
            out[(t * bins + f) * 2] = re / norms[t];
            out[(t * bins + f) * 2 + 1] = im / norms[t];
        }
    }
    Ok(Tensor::from_vec(out, &[t_frames, bins, 2])?)
}

/// Evaluate mean SI-SDR of the model on a set, measured on iSTFT output over
/// the overlap-complete interior.
pub fn eval_si_sdr(
    model: &McMambaModel,
    set: &[Utterance],
    stft_cfg: &StftConfig,
) -> Result<f64, TrainError> {
    let mut acc = 0.0;
    for utt in set {
        let spec = stft(&utt.noisy.samples, stft_cfg, utt.noisy.sample_rate)?;
        let enhanced = model.enhance_offline(&spec)?;
        let wave = istft(&enhanced, stft_cfg)?;
        let lo = stft_cfg.window_len;
        let hi = wave.numel() - stft_cfg.window_len;
        acc += si_sdr(&wave.data()[lo..hi], &utt.target.data()[lo..hi])?;
    }
    Ok(acc / set.len() as f64)
}

/// Mean SI-SDR of the unprocessed reference channel (the "do nothing"
/// baseline).
pub fn noisy_si_sdr(set: &[Utterance], reference_channel: usize, stft_cfg: &StftConfig) -> Result<f64, TrainError> {
    let mut acc = 0.0;
    for utt in set {
        let lo = stft_cfg.window_len;
        let hi = utt.target.numel() - stft_cfg.window_len;
        acc += si_sdr(
            &utt.noisy.channel(reference_channel)[lo..hi],
            &utt.target.data()[lo..hi],
        )?;
    }
    Ok(acc / set.len() as f64)
}

/// Run one gradient step on a single utterance; returns the loss.
pub fn train_step(
    model: &mut McMambaModel,
    utt: &Utterance,
    stft_cfg: &StftConfig,
    adam: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let spec = stft(&utt.noisy.samples, stft_cfg, utt.noisy.sample_rate)?;
    let norms = model.frame_norms(&spec);
    let target = target_spectrum_normalized(&utt.target, stft_cfg, &norms, utt.noisy.sample_rate)?;

    let tape = GradientTape::new()?;
    for (_, p) in model.named_tensors_mut() {
        tape.watch(p);
    }
    let (pred, _info) = model.forward_normalized(&spec)?;
    let loss = spectral_loss(&pred, &target, cfg.alpha_ri, cfg.alpha_mag)?;
    let loss_val = loss.item();
    let grads = tape.backward(&loss)?;

    let mut named_grads = BTreeMap::new();
    {
        let named = model.named_tensors_mut();
        for (name, p) in &named {
            if let Some(g) = grads.get(p) {
                named_grads.insert(name.clone(), g.clone());
            }
        }
    }
    let mut params = model.named_tensors_mut();
    adam_step(&mut params, &named_grads, adam, lr)?;
    Ok(loss_val)
}

/// Toy training loop: per-epoch LR decay, validation SI-SDR each epoch,
/// best-checkpoint tracking, NaN divergence detection. Deterministic under
/// the config seed.
pub fn train_toy(
    model: &mut McMambaModel,
    data: &ToyData,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let stft_cfg = StftConfig::default();
    let mut adam = AdamState::new();
    let mut records = Vec::new();
    let mut loss_curve = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_weights: BTreeMap<String, Tensor> =
        model.named_tensors().into_iter().collect();
    let mut step = 0usize;
    let mut last_val = None;

    let noisy_baseline = noisy_si_sdr(&data.val, model.cfg.reference_channel, &stft_cfg)?;

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        for utt in &data.train {
            let loss = train_step(model, utt, &stft_cfg, &mut adam, lr, cfg)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            loss_curve.push(loss);
            records.push(LogRecord {
                epoch,
                step,
                lr,
                loss,
                val_sisdr: None,
            });
            step += 1;
        }
        let val = eval_si_sdr(model, &data.val, &stft_cfg)?;
        last_val = Some(val);
        if let Some(r) = records.last_mut() {
            r.val_sisdr = last_val;
        }
        if val > best_val {
            best_val = val;
            best_weights = model.named_tensors().into_iter().collect();
        }
    }

    Ok(TrainReport {
        records,
        loss_curve,
        best_val_sisdr: best_val,
        final_val_sisdr: last_val.unwrap_or(f64::NEG_INFINITY),
        noisy_val_sisdr: noisy_baseline,
        best_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::{gradcheck, oracle};

    #[test]
    fn loss_zero_when_equal() {
        let t = Tensor::from_fn(&[3, 4, 2], |i| i as f64 * 0.1);
        let l = spectral_loss(&t, &t, 0.5, 0.5).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn loss_closed_form_case() {
        // pred = 0, target all (1 + 0i): RI mean = 0.5, magnitude term = 1,
        // loss = 0.5*0.5 + 0.5*1 = 0.75.
        let pred = Tensor::zeros(&[2, 3, 2]);
        let target = Tensor::from_fn(&[2, 3, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let l = spectral_loss(&pred, &target, 0.5, 0.5).unwrap();
        assert!((l.item() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn loss_gradient_passes_finite_differences() {
        let mut rng = Rng::new(5);
        let target = Tensor::from_fn(&[2, 3, 2], |_| rng.range(-1.0, 1.0));
        let pred0 = Tensor::from_fn(&[2, 3, 2], |_| rng.range(-1.0, 1.0));
        let entries = gradcheck(&["pred"], &[pred0], 8, 17, |params| {
            spectral_loss(&params[0], &target, 0.5, 0.5)
        })
        .unwrap();
        assert!(entries[0].max_rel_err < 1e-4, "{}", entries[0].max_rel_err);
    }

    #[test]
    fn adam_zero_gradient_is_a_noop() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0], &[2]).unwrap();
        let before = p.to_vec();
        let mut adam = AdamState::new();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::zeros(&[2]));
        {
            let mut params = vec![("p".to_string(), &mut p)];
            adam_step(&mut params, &grads, &mut adam, 0.001).unwrap();
        }
        assert_eq!(p.to_vec(), before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // Bias corrections cancel at t=1: update = -lr * g / (|g| + eps).
        let mut p = Tensor::scalar(0.0);
        let mut adam = AdamState::new();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::scalar(1.0));
        {
            let mut params = vec![("p".to_string(), &mut p)];
            adam_step(&mut params, &grads, &mut adam, 0.001).unwrap();
        }
        let want = -0.001 / (1.0 + 1e-8);
        assert!((p.item() - want).abs() < 1e-15, "{} vs {want}", p.item());
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        // f(x) = 0.5 * sum (x - c)^2, gradient x - c, with a per-step
        // exponential learning-rate decay.
        let c = [0.3, -0.7, 1.1];
        let mut p = Tensor::zeros(&[3]);
        let mut adam = AdamState::new();
        for t in 0..100 {
            let g: Vec<f64> = p.data().iter().zip(&c).map(|(x, c)| x - c).collect();
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), Tensor::from_vec(g, &[3]).unwrap());
            let mut params = vec![("p".to_string(), &mut p)];
            let lr = 0.3 * 0.98f64.powi(t);
            adam_step(&mut params, &grads, &mut adam, lr).unwrap();
        }
        for (x, c) in p.data().iter().zip(&c) {
            assert!((x - c).abs() < 1e-3, "{x} vs {c}");
        }
    }

    #[test]
    fn lr_schedule_matches_extended_precision_oracle() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.001);
        assert!((cfg.lr_at(1) - 0.000992).abs() < 1e-15);
        for &epoch in &[0usize, 1, 7, 100, 500] {
            let got = cfg.lr_at(epoch);
            let want = 0.001 * oracle::pow_dd(0.992, epoch as u32);
            let rel = (got - want).abs() / want;
            assert!(rel < 1e-15, "epoch {epoch}: {got} vs {want} ({rel})");
        }
    }

    #[test]
    fn si_sdr_caps_and_scale_invariance() {
        let mut rng = Rng::new(6);
        let s: Vec<f64> = (0..500).map(|_| rng.range(-1.0, 1.0)).collect();
        assert_eq!(si_sdr(&s, &s).unwrap(), 60.0);
        let doubled: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&doubled, &s).unwrap(), 60.0);
    }

    #[test]
    fn si_sdr_constructed_orthogonal_noise() {
        let mut rng = Rng::new(7);
        let n = 2000;
        let s: Vec<f64> = (0..n).map(|_| rng.range(-1.0, 1.0)).collect();
        // Gram-Schmidt a random vector against s, then scale to 1/100 energy.
        let mut z: Vec<f64> = (0..n).map(|_| rng.range(-1.0, 1.0)).collect();
        let es: f64 = s.iter().map(|v| v * v).sum();
        let dot: f64 = z.iter().zip(&s).map(|(a, b)| a * b).sum();
        for (zi, si) in z.iter_mut().zip(&s) {
            *zi -= dot / es * si;
        }
        let ez: f64 = z.iter().map(|v| v * v).sum();
        let scale = (es / 100.0 / ez).sqrt();
        let est: Vec<f64> = s.iter().zip(&z).map(|(si, zi)| si + scale * zi).collect();
        let got = si_sdr(&est, &s).unwrap();
        assert!((got - 20.0).abs() < 0.01, "{got}");
    }

    #[test]
    fn si_sdr_rejects_zero_reference() {
        assert!(matches!(
            si_sdr(&[0.1, 0.2], &[0.0, 0.0]),
            Err(TrainError::ZeroReference)
        ));
        assert!(matches!(
            si_sdr(&[0.1], &[0.0, 0.0]),
            Err(TrainError::LengthMismatch { .. })
        ));
    }
}
