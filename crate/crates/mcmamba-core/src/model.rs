//! The four-stage cascade: full-band spatial → narrow-band spatial →
//! sub-band spectral → full-band spectral.
//!
//! Stages 1 and 4 run a Bi-Mamba along the frequency axis inside each frame
//! (valid in both modes; frequency is not time). Stages 2 and 3 run along
//! time per frequency lane with shared weights — Uni-Mamba when causal,
//! Bi-Mamba otherwise. Each stage ends in an FC layer (ReLU for 1–3, linear
//! for the signed (Re, Im) output of stage 4).
//!
//! Normalization: the spectrogram is divided per frame by a reference-channel
//! mean-magnitude scalar and multiplied back on the way out. Causal models
//! use a running (past-only) mean so the whole pipeline stays causal and
//! frame-by-frame streaming is bit-exact with the offline pass; non-causal
//! models use the utterance mean.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use thiserror::Error;

use crate::blocks::{DirectionalMamba, Linear, MambaBlockConfig, MambaBlockState};
use crate::rng::Rng;
use crate::stft::ComplexSpectrogram;
use crate::tensor::serialize::{self, ContainerError};
use crate::tensor::{Tensor, TensorError};

// Magnitude floor for the normalizer: near-silent opening frames must not
// blow the feature scale up (audio is unit-scale, so 1e-3 is far below any
// speech frame but far above numeric noise).
const NORM_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has {got} channels, model wants {want}")]
    ChannelMismatch { got: usize, want: usize },
    #[error("input has {got} bins, model wants {want}")]
    BinMismatch { got: usize, want: usize },
    #[error("mode mismatch: weights are {weights} but config is {config}")]
    ModeMismatch { weights: String, config: String },
    #[error("weight container is missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name} has shape {got:?}, model wants {want:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("weight container has unexpected parameter {0}")]
    UnexpectedParam(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("streaming requires a causal model")]
    NotCausal,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Topology of the cascade.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McMambaConfig {
    pub n_channels: usize,
    pub n_bins: usize,
    /// 0-based reference channel index.
    pub reference_channel: usize,
    pub causal: bool,
    /// Per-stage FC output widths; the last must be 2 (Re, Im).
    pub stage_out: [usize; 4],
    /// Per-stage wrapper widths (the width the directional blocks run at).
    pub hidden: [usize; 4],
    /// Frequency neighbors on each side for the sub-band features (2N+1 bins).
    pub n_neighbors: usize,
    /// Past context frames for the full-band spectral features (C+1 frames).
    pub n_context: usize,
    pub expand: usize,
    pub d_conv: usize,
    pub d_state: usize,
}

impl McMambaConfig {
    /// The published configuration: six channels, 257 bins, widths
    /// 64/64/64/2, hidden 128/256/384/128, N = 3, C = 5, reference channel 5
    /// (index 4).
    pub fn full(causal: bool) -> McMambaConfig {
        McMambaConfig {
            n_channels: 6,
            n_bins: 257,
            reference_channel: 4,
            causal,
            stage_out: [64, 64, 64, 2],
            hidden: [128, 256, 384, 128],
            n_neighbors: 3,
            n_context: 5,
            expand: 2,
            d_conv: 4,
            d_state: 16,
        }
    }

    /// Desk-scale configuration for tests and toy training.
    pub fn tiny(causal: bool, n_channels: usize, n_bins: usize) -> McMambaConfig {
        McMambaConfig {
            n_channels,
            n_bins,
            reference_channel: 4.min(n_channels - 1),
            causal,
            stage_out: [8, 8, 8, 2],
            hidden: [16, 16, 16, 16],
            n_neighbors: 3,
            n_context: 5,
            expand: 2,
            d_conv: 4,
            d_state: 8,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.reference_channel >= self.n_channels {
            return Err(ModelError::BadConfig(format!(
                "reference channel {} out of range for {} channels",
                self.reference_channel, self.n_channels
            )));
        }
        if self.stage_out[3] != 2 {
            return Err(ModelError::BadConfig(format!(
                "stage 4 must emit 2 planes, got {}",
                self.stage_out[3]
            )));
        }
        let positive = self
            .stage_out
            .iter()
            .chain(self.hidden.iter())
            .chain([&self.n_channels, &self.n_bins, &self.expand, &self.d_conv, &self.d_state]);
        for &v in positive {
            if v == 0 {
                return Err(ModelError::BadConfig("zero-sized dimension".into()));
            }
        }
        Ok(())
    }

    /// Per-stage input feature widths.
    pub fn stage_inputs(&self) -> [usize; 4] {
        [
            2 * self.n_channels,
            2 * self.n_channels + self.stage_out[0],
            (2 * self.n_neighbors + 1) + self.stage_out[1],
            (self.n_context + 1) + self.stage_out[2],
        ]
    }

    fn block_cfg(&self, stage: usize) -> MambaBlockConfig {
        MambaBlockConfig {
            d_model: self.hidden[stage],
            expand: self.expand,
            d_conv: self.d_conv,
            d_state: self.d_state,
        }
    }

    pub fn to_config_text(&self) -> String {
        format!(
            "# mcmamba model config v1\n\
             channels = {}\n\
             bins = {}\n\
             reference_channel = {}\n\
             causal = {}\n\
             n_neighbors = {}\n\
             n_context = {}\n\
             stage_out = {},{},{},{}\n\
             hidden = {},{},{},{}\n\
             expand = {}\n\
             d_conv = {}\n\
             d_state = {}\n",
            self.n_channels,
            self.n_bins,
            self.reference_channel,
            self.causal,
            self.n_neighbors,
            self.n_context,
            self.stage_out[0],
            self.stage_out[1],
            self.stage_out[2],
            self.stage_out[3],
            self.hidden[0],
            self.hidden[1],
            self.hidden[2],
            self.hidden[3],
            self.expand,
            self.d_conv,
            self.d_state,
        )
    }

    pub fn from_config_text(text: &str) -> Result<McMambaConfig, ModelError> {
        let mut map = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ModelError::BadConfig(format!("line {}: expected key = value", ln + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| ModelError::BadConfig(format!("missing key {k}")))
        };
        let parse_usize = |k: &str| -> Result<usize, ModelError> {
            get(k)?
                .parse()
                .map_err(|e| ModelError::BadConfig(format!("{k}: {e}")))
        };
        let parse4 = |k: &str| -> Result<[usize; 4], ModelError> {
            let parts: Vec<usize> = get(k)?
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|e| ModelError::BadConfig(format!("{k}: {e}")))?;
            parts
                .try_into()
                .map_err(|_| ModelError::BadConfig(format!("{k}: want 4 values")))
        };
        let cfg = McMambaConfig {
            n_channels: parse_usize("channels")?,
            n_bins: parse_usize("bins")?,
            reference_channel: parse_usize("reference_channel")?,
            causal: match get("causal")?.as_str() {
                "true" => true,
                "false" => false,
                other => {
                    return Err(ModelError::BadConfig(format!("causal: {other}")));
                }
            },
            n_neighbors: parse_usize("n_neighbors")?,
            n_context: parse_usize("n_context")?,
            stage_out: parse4("stage_out")?,
            hidden: parse4("hidden")?,
            expand: parse_usize("expand")?,
            d_conv: parse_usize("d_conv")?,
            d_state: parse_usize("d_state")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One cascade stage: directional wrapper then FC (ReLU except stage 4).
#[derive(Debug, Clone)]
pub struct Stage {
    pub wrapper: DirectionalMamba,
    pub fc: Linear,
    pub relu: bool,
}

impl Stage {
    fn forward(
        &self,
        x: &Tensor,
        state: Option<&mut MambaBlockState>,
    ) -> Result<Tensor, TensorError> {
        let y = self.wrapper.forward(x, state)?;
        let y = self.fc.forward(&y)?;
        Ok(if self.relu { y.relu() } else { y })
    }

    fn named_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.wrapper.named_tensors(prefix, out);
        out.push((format!("{prefix}.fc.w"), self.fc.w.clone()));
        out.push((format!("{prefix}.fc.b"), self.fc.b.clone().unwrap()));
    }

    fn named_tensors_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        self.wrapper.named_tensors_mut(prefix, out);
        out.push((format!("{prefix}.fc.w"), &mut self.fc.w));
        out.push((format!("{prefix}.fc.b"), self.fc.b.as_mut().unwrap()));
    }
}

/// The full cascade with its learned weights.
#[derive(Debug, Clone)]
pub struct McMambaModel {
    pub cfg: McMambaConfig,
    pub stage1: Stage,
    pub stage2: Stage,
    pub stage3: Stage,
    pub stage4: Stage,
}

/// Per-frame normalizers and stage output shapes from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardInfo {
    pub frame_norm: Vec<f64>,
    pub stage_shapes: [Vec<usize>; 4],
}

impl McMambaModel {
    pub fn init(cfg: McMambaConfig, seed: u64) -> Result<McMambaModel, ModelError> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let d_in = cfg.stage_inputs();
        let mk_stage = |rng: &mut Rng, idx: usize, time_axis: bool| -> Stage {
            // Stages along the frequency axis are always bidirectional.
            let causal_here = cfg.causal && time_axis;
            let wrapper = DirectionalMamba::init_cfg(rng, causal_here, d_in[idx], cfg.block_cfg(idx));
            Stage {
                wrapper,
                fc: Linear::init(rng, cfg.hidden[idx], cfg.stage_out[idx], true),
                relu: idx < 3,
            }
        };
        Ok(McMambaModel {
            stage1: mk_stage(&mut rng, 0, false),
            stage2: mk_stage(&mut rng, 1, true),
            stage3: mk_stage(&mut rng, 2, true),
            stage4: mk_stage(&mut rng, 3, false),
            cfg,
        })
    }

    fn check_input(&self, spec: &ComplexSpectrogram) -> Result<(), ModelError> {
        if spec.channels() != self.cfg.n_channels {
            return Err(ModelError::ChannelMismatch {
                got: spec.channels(),
                want: self.cfg.n_channels,
            });
        }
        if spec.bins() != self.cfg.n_bins {
            return Err(ModelError::BinMismatch {
                got: spec.bins(),
                want: self.cfg.n_bins,
            });
        }
        Ok(())
    }

    /// Per-frame normalization scalars over the reference-channel magnitude:
    /// running mean of all magnitudes seen so far (causal) or the utterance
    /// mean replicated (non-causal).
    pub fn frame_norms(&self, spec: &ComplexSpectrogram) -> Vec<f64> {
        let (t_frames, bins) = (spec.frames(), spec.bins());
        let r = self.cfg.reference_channel;
        let mut norms = Vec::with_capacity(t_frames);
        let mut total = 0.0;
        for t in 0..t_frames {
            let mut frame_sum = 0.0;
            for f in 0..bins {
                let (re, im) = spec.at(r, t, f);
                frame_sum += re.hypot(im);
            }
            total += frame_sum;
            norms.push((total / ((t + 1) * bins) as f64).max(NORM_FLOOR));
        }
        if !self.cfg.causal {
            let g = *norms.last().unwrap_or(&NORM_FLOOR);
            norms = vec![g; t_frames];
        }
        norms
    }

    /// Divide every channel of frame t by norms[t].
    fn normalize(spec: &ComplexSpectrogram, norms: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (m_ch, t_frames, bins) = (spec.channels(), spec.frames(), spec.bins());
        let mut re = spec.re.to_vec();
        let mut im = spec.im.to_vec();
        for m in 0..m_ch {
            for t in 0..t_frames {
                let g = norms[t];
                let base = (m * t_frames + t) * bins;
                for f in 0..bins {
                    re[base + f] /= g;
                    im[base + f] /= g;
                }
            }
        }
        (re, im)
    }

    /// Full cascade over a (normalized) spectrogram. Returns the stage-4
    /// output `[T, F, 2]` still in the normalized domain, plus per-frame
    /// normalizers and stage output shapes.
    pub fn forward_normalized(
        &self,
        spec: &ComplexSpectrogram,
    ) -> Result<(Tensor, ForwardInfo), ModelError> {
        self.check_input(spec)?;
        let (m_ch, t_frames, bins) = (spec.channels(), spec.frames(), spec.bins());
        let norms = self.frame_norms(spec);
        let (re_n, im_n) = Self::normalize(spec, &norms);

        // Eq-style feature planes, all plain constants on the tape.
        let x1 = assemble_fullband_spatial_raw(&re_n, &im_n, m_ch, t_frames, bins)?;
        let s1 = self.stage1.forward(&x1, None)?; // [T, F, out1]

        let x1_lanes = x1.swap_axes01()?; // [F, T, 2M]
        let s1_lanes = s1.swap_axes01()?;
        let x2 = Tensor::concat_last(&[&x1_lanes, &s1_lanes])?;
        let s2 = self.stage2.forward(&x2, None)?; // [F, T, out2]

        let mags = assemble_subband_raw(
            &re_n,
            &im_n,
            m_ch,
            t_frames,
            bins,
            self.cfg.reference_channel,
            self.cfg.n_neighbors,
        )?;
        let x3 = Tensor::concat_last(&[&mags, &s2])?;
        let s3 = self.stage3.forward(&x3, None)?; // [F, T, out3]

        let ctx = assemble_context_raw(
            &re_n,
            &im_n,
            m_ch,
            t_frames,
            bins,
            self.cfg.reference_channel,
            self.cfg.n_context,
        )?;
        let s3_frames = s3.swap_axes01()?; // [T, F, out3]
        let x4 = Tensor::concat_last(&[&ctx, &s3_frames])?;
        let s4 = self.stage4.forward(&x4, None)?; // [T, F, 2]

        let info = ForwardInfo {
            frame_norm: norms,
            stage_shapes: [
                s1.shape().to_vec(),
                s2.shape().to_vec(),
                s3.shape().to_vec(),
                s4.shape().to_vec(),
            ],
        };
        Ok((s4, info))
    }

    /// Offline enhancement: full cascade, then the stage-4 (Re, Im) planes
    /// scaled back by the per-frame normalizers. `[M, T, F]` in,
    /// `[1, T, F]` out.
    pub fn enhance_offline(
        &self,
        spec: &ComplexSpectrogram,
    ) -> Result<ComplexSpectrogram, ModelError> {
        let (s4, info) = self.forward_normalized(spec)?;
        let (t_frames, bins) = (spec.frames(), spec.bins());
        let mut re = vec![0.0; t_frames * bins];
        let mut im = vec![0.0; t_frames * bins];
        for t in 0..t_frames {
            let g = info.frame_norm[t];
            for f in 0..bins {
                re[t * bins + f] = s4.data()[(t * bins + f) * 2] * g;
                im[t * bins + f] = s4.data()[(t * bins + f) * 2 + 1] * g;
            }
        }
        Ok(ComplexSpectrogram {
            re: Tensor::from_vec(re, &[1, t_frames, bins])?,
            im: Tensor::from_vec(im, &[1, t_frames, bins])?,
            sample_rate: spec.sample_rate,
            hop: spec.hop,
            window_len: spec.window_len,
        })
    }

    /// Everything a causal model carries between frames.
    pub fn stream_context(&self) -> Result<StreamContext, ModelError> {
        if !self.cfg.causal {
            return Err(ModelError::NotCausal);
        }
        let f = self.cfg.n_bins;
        let s2 = match &self.stage2.wrapper {
            DirectionalMamba::Uni(u) => u.fresh_state(f),
            DirectionalMamba::Bi(_) => unreachable!("causal config builds Uni stages"),
        };
        let s3 = match &self.stage3.wrapper {
            DirectionalMamba::Uni(u) => u.fresh_state(f),
            DirectionalMamba::Bi(_) => unreachable!("causal config builds Uni stages"),
        };
        Ok(StreamContext {
            stage2_state: s2,
            stage3_state: s3,
            mag_ring: VecDeque::new(),
            mag_total: 0.0,
            frames_seen: 0,
        })
    }

    /// Process one STFT frame (`re`, `im` of shape `[M, F]`) and emit the
    /// enhanced frame as (re, im) vectors of length F. Frame t of a stream
    /// equals frame t of [`Self::enhance_offline`] bit-exactly.
    pub fn enhance_frame(
        &self,
        re: &Tensor,
        im: &Tensor,
        ctx: &mut StreamContext,
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let (m_ch, bins) = (self.cfg.n_channels, self.cfg.n_bins);
        if re.shape() != [m_ch, bins] || im.shape() != [m_ch, bins] {
            return Err(ModelError::ChannelMismatch {
                got: re.shape().first().copied().unwrap_or(0),
                want: m_ch,
            });
        }
        let r = self.cfg.reference_channel;

        // Running normalizer: identical accumulation order to frame_norms.
        let mut frame_sum = 0.0;
        for f in 0..bins {
            frame_sum += re.data()[r * bins + f].hypot(im.data()[r * bins + f]);
        }
        ctx.mag_total += frame_sum;
        ctx.frames_seen += 1;
        let g = (ctx.mag_total / (ctx.frames_seen * bins) as f64).max(NORM_FLOOR);

        let re_n: Vec<f64> = re.data().iter().map(|v| v / g).collect();
        let im_n: Vec<f64> = im.data().iter().map(|v| v / g).collect();

        // Stage 1 on this frame: [1, F, 2M].
        let x1 = assemble_fullband_spatial_raw(&re_n, &im_n, m_ch, 1, bins)?;
        let s1 = self.stage1.forward(&x1, None)?;
        let out1 = self.cfg.stage_out[0];

        // Stage 2: lanes along frequency, one time step: [F, 1, 2M + out1].
        let x1_lanes = x1.swap_axes01()?;
        let s1_lanes = s1.swap_axes01()?;
        let x2 = Tensor::concat_last(&[&x1_lanes, &s1_lanes])?;
        let s2 = self.stage2.forward(&x2, Some(&mut ctx.stage2_state))?;
        let _ = out1;

        // Stage 3: sub-band magnitudes of this frame plus stage-2 features.
        let mags = assemble_subband_raw(&re_n, &im_n, m_ch, 1, bins, r, self.cfg.n_neighbors)?;
        let x3 = Tensor::concat_last(&[&mags, &s2])?;
        let s3 = self.stage3.forward(&x3, Some(&mut ctx.stage3_state))?;

        // Stage 4: past-context magnitudes from the ring, then this frame.
        let c_ctx = self.cfg.n_context;
        let cur_mags: Vec<f64> = (0..bins)
            .map(|f| re_n[r * bins + f].hypot(im_n[r * bins + f]))
            .collect();
        let mut ctx_feat = vec![0.0; bins * (c_ctx + 1)];
        for f in 0..bins {
            for (j, past) in ctx.mag_ring.iter().enumerate() {
                // ring holds the last <=C frames, oldest first
                let slot = c_ctx - ctx.mag_ring.len() + j;
                ctx_feat[f * (c_ctx + 1) + slot] = past[f];
            }
            ctx_feat[f * (c_ctx + 1) + c_ctx] = cur_mags[f];
        }
        let ctx_t = Tensor::from_vec(ctx_feat, &[1, bins, c_ctx + 1])?;
        let s3_frames = s3.swap_axes01()?; // [1, F, out3]
        let x4 = Tensor::concat_last(&[&ctx_t, &s3_frames])?;
        let s4 = self.stage4.forward(&x4, None)?; // [1, F, 2]

        ctx.mag_ring.push_back(cur_mags);
        while ctx.mag_ring.len() > c_ctx {
            ctx.mag_ring.pop_front();
        }

        let mut out_re = vec![0.0; bins];
        let mut out_im = vec![0.0; bins];
        for f in 0..bins {
            out_re[f] = s4.data()[f * 2] * g;
            out_im[f] = s4.data()[f * 2 + 1] * g;
        }
        Ok((out_re, out_im))
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.stage1.named_tensors("stage1", &mut out);
        self.stage2.named_tensors("stage2", &mut out);
        self.stage3.named_tensors("stage3", &mut out);
        self.stage4.named_tensors("stage4", &mut out);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.stage1.named_tensors_mut("stage1", &mut out);
        self.stage2.named_tensors_mut("stage2", &mut out);
        self.stage3.named_tensors_mut("stage3", &mut out);
        self.stage4.named_tensors_mut("stage4", &mut out);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn save_weights(&self, path: &Path) -> Result<(), ModelError> {
        let mut map: BTreeMap<String, Tensor> = self.named_tensors().into_iter().collect();
        map.insert(
            "meta.causal".to_string(),
            Tensor::scalar(if self.cfg.causal { 1.0 } else { 0.0 }),
        );
        serialize::write_container_file(path, &map)?;
        Ok(())
    }

    /// Build a model from a config and a weight container. The container must
    /// hold exactly the parameter set the config implies (a causal config
    /// against non-causal weights is reported as a mode mismatch).
    pub fn load_weights(cfg: McMambaConfig, path: &Path) -> Result<McMambaModel, ModelError> {
        let mut map = serialize::read_container_file(path)?;
        if let Some(meta) = map.remove("meta.causal") {
            let weights_causal = meta.data()[0] != 0.0;
            if weights_causal != cfg.causal {
                let word = |c: bool| if c { "causal" } else { "non-causal" };
                return Err(ModelError::ModeMismatch {
                    weights: word(weights_causal).to_string(),
                    config: word(cfg.causal).to_string(),
                });
            }
        }
        let mut model = McMambaModel::init(cfg, 0)?;
        for (name, slot) in model.named_tensors_mut() {
            let value = map
                .remove(&name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if value.shape() != slot.shape() {
                return Err(ModelError::ParamShape {
                    name,
                    got: value.shape().to_vec(),
                    want: slot.shape().to_vec(),
                });
            }
            *slot = value;
        }
        if let Some((name, _)) = map.into_iter().next() {
            return Err(ModelError::UnexpectedParam(name));
        }
        Ok(model)
    }
}

/// Eq.-(1)-style features: per (t, f), interleaved
/// [Re X₁, Im X₁, …, Re X_M, Im X_M] as a `[T, F, 2M]` tensor.
pub fn assemble_fullband_spatial(spec: &ComplexSpectrogram) -> Result<Tensor, TensorError> {
    assemble_fullband_spatial_raw(
        spec.re.data(),
        spec.im.data(),
        spec.channels(),
        spec.frames(),
        spec.bins(),
    )
}

fn assemble_fullband_spatial_raw(
    re: &[f64],
    im: &[f64],
    m_ch: usize,
    t_frames: usize,
    bins: usize,
) -> Result<Tensor, TensorError> {
    let mut out = vec![0.0; t_frames * bins * 2 * m_ch];
    for t in 0..t_frames {
        for f in 0..bins {
            let base = (t * bins + f) * 2 * m_ch;
            for m in 0..m_ch {
                let idx = (m * t_frames + t) * bins + f;
                out[base + 2 * m] = re[idx];
                out[base + 2 * m + 1] = im[idx];
            }
        }
    }
    Tensor::from_vec(out, &[t_frames, bins, 2 * m_ch])
}

/// Eq.-(3)-style sub-band magnitudes: per (f, t), the reference-channel
/// magnitudes of bins f-N..=f+N (zeros beyond the band edges), laid out as
/// `[F, T, 2N+1]` lanes along time.
pub fn assemble_subband(
    spec: &ComplexSpectrogram,
    reference_channel: usize,
    n_neighbors: usize,
) -> Result<Tensor, TensorError> {
    assemble_subband_raw(
        spec.re.data(),
        spec.im.data(),
        spec.channels(),
        spec.frames(),
        spec.bins(),
        reference_channel,
        n_neighbors,
    )
}

fn assemble_subband_raw(
    re: &[f64],
    im: &[f64],
    _m_ch: usize,
    t_frames: usize,
    bins: usize,
    r: usize,
    n_nb: usize,
) -> Result<Tensor, TensorError> {
    let width = 2 * n_nb + 1;
    let mut out = vec![0.0; bins * t_frames * width];
    for f in 0..bins {
        for t in 0..t_frames {
            let base = (f * t_frames + t) * width;
            for (slot, off) in (-(n_nb as isize)..=n_nb as isize).enumerate() {
                let fb = f as isize + off;
                if fb >= 0 && (fb as usize) < bins {
                    let idx = (r * t_frames + t) * bins + fb as usize;
                    out[base + slot] = re[idx].hypot(im[idx]);
                }
            }
        }
    }
    Tensor::from_vec(out, &[bins, t_frames, width])
}

/// Eq.-(4)-style context magnitudes: per (t, f), the reference-channel
/// magnitudes of frames t-C..=t (zeros before the start — strictly past-only),
/// laid out as `[T, F, C+1]` sequences along frequency per frame.
pub fn assemble_fullband_spectral(
    spec: &ComplexSpectrogram,
    reference_channel: usize,
    n_context: usize,
) -> Result<Tensor, TensorError> {
    assemble_context_raw(
        spec.re.data(),
        spec.im.data(),
        spec.channels(),
        spec.frames(),
        spec.bins(),
        reference_channel,
        n_context,
    )
}

fn assemble_context_raw(
    re: &[f64],
    im: &[f64],
    _m_ch: usize,
    t_frames: usize,
    bins: usize,
    r: usize,
    c_ctx: usize,
) -> Result<Tensor, TensorError> {
    let width = c_ctx + 1;
    let mut out = vec![0.0; t_frames * bins * width];
    for t in 0..t_frames {
        for f in 0..bins {
            let base = (t * bins + f) * width;
            for (slot, back) in (0..width).zip((0..=c_ctx).rev()) {
                let tb = t as isize - back as isize;
                if tb >= 0 {
                    let idx = (r * t_frames + tb as usize) * bins + f;
                    out[base + slot] = re[idx].hypot(im[idx]);
                }
            }
        }
    }
    Tensor::from_vec(out, &[t_frames, bins, width])
}

/// Everything a causal model must carry between frames: per-lane SSM states
/// and conv tails for stages 2–3, the past-context magnitude ring for
/// stage 4, and the running normalizer. Size is O(F), independent of how
/// much audio has been processed.
#[derive(Debug, Clone)]
pub struct StreamContext {
    pub stage2_state: MambaBlockState,
    pub stage3_state: MambaBlockState,
    mag_ring: VecDeque<Vec<f64>>,
    mag_total: f64,
    frames_seen: usize,
}

impl StreamContext {
    /// Total f64 slots held, for the bounded-memory accounting check.
    pub fn state_elems(&self) -> usize {
        self.stage2_state.len_elems()
            + self.stage3_state.len_elems()
            + self.mag_ring.iter().map(|v| v.len()).sum::<usize>()
            + 2
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }
}
