//! Analysis/synthesis filterbank: periodic-Hann STFT and weighted overlap-add
//! iSTFT with a from-scratch radix-2 FFT, plus streaming variants that carry
//! a hop-sized tail so frame-by-frame processing is bit-exact with the batch
//! transforms.

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum StftError {
    #[error("audio too short: {got} samples < window of {want}")]
    TooShort { got: usize, want: usize },
    #[error("bin count mismatch: spectrogram has {got}, config wants {want}")]
    BinMismatch { got: usize, want: usize },
    #[error("expected a single-channel spectrogram, got {0} channels")]
    NotMono(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Framing parameters. The defaults (512-sample periodic Hann, 256-sample
/// hop) give exact constant overlap-add: w[n] + w[n + hop] == 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window_len: 512,
            hop: 256,
        }
    }
}

impl StftConfig {
    pub fn n_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Periodic (DFT-even) Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_len;
        (0..n)
            .map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / n as f64).cos()))
            .collect()
    }

    /// Number of frames for a signal of the given length: frame 0 starts at
    /// sample 0, no centering.
    pub fn n_frames(&self, samples: usize) -> usize {
        (samples - self.window_len) / self.hop + 1
    }

    /// Output length of the inverse transform for `t` frames.
    pub fn output_len(&self, t: usize) -> usize {
        (t - 1) * self.hop + self.window_len
    }
}

/// Multichannel complex STFT coefficients stored as separate real and
/// imaginary planes of shape `[channels, frames, bins]`.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub re: Tensor,
    pub im: Tensor,
    pub sample_rate: u32,
    pub hop: usize,
    pub window_len: usize,
}

impl ComplexSpectrogram {
    pub fn zeros(channels: usize, frames: usize, bins: usize) -> Self {
        ComplexSpectrogram {
            re: Tensor::zeros(&[channels, frames, bins]),
            im: Tensor::zeros(&[channels, frames, bins]),
            sample_rate: 16_000,
            hop: 256,
            window_len: 512,
        }
    }

    pub fn channels(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.re.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.re.shape()[2]
    }

    pub fn at(&self, m: usize, t: usize, f: usize) -> (f64, f64) {
        let idx = (m * self.frames() + t) * self.bins() + f;
        (self.re.data()[idx], self.im.data()[idx])
    }
}

/// In-place iterative radix-2 FFT over split real/imaginary storage.
/// `inverse` conjugates the twiddles and applies the 1/N scale.
pub fn fft_inplace(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    assert_eq!(n, im.len());
    assert!(n.is_power_of_two(), "fft size {n} must be a power of two");

    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i as u32).reverse_bits() >> (32 - bits);
        let j = j as usize;
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }

    let sign = if inverse { 1.0 } else { -1.0 };
    let mut half = 1;
    while half < n {
        let step = std::f64::consts::PI / half as f64 * sign;
        for start in (0..n).step_by(half * 2) {
            for k in 0..half {
                let ang = step * k as f64;
                let (wr, wi) = (ang.cos(), ang.sin());
                let (i, j) = (start + k, start + k + half);
                let tr = wr * re[j] - wi * im[j];
                let ti = wr * im[j] + wi * re[j];
                re[j] = re[i] - tr;
                im[j] = im[i] - ti;
                re[i] += tr;
                im[i] += ti;
            }
        }
        half *= 2;
    }

    if inverse {
        let scale = 1.0 / n as f64;
        for v in re.iter_mut() {
            *v *= scale;
        }
        for v in im.iter_mut() {
            *v *= scale;
        }
    }
}

/// One-sided DFT of a single windowed frame; fills bins 0..=N/2.
fn frame_forward(frame: &[f64], re_out: &mut [f64], im_out: &mut [f64]) {
    let n = frame.len();
    let mut re: Vec<f64> = frame.to_vec();
    let mut im = vec![0.0; n];
    fft_inplace(&mut re, &mut im, false);
    re_out.copy_from_slice(&re[..n / 2 + 1]);
    im_out.copy_from_slice(&im[..n / 2 + 1]);
}

/// Inverse one-sided DFT: reconstruct the full conjugate-symmetric spectrum
/// and return the real time-domain frame.
fn frame_inverse(re_bins: &[f64], im_bins: &[f64], n: usize) -> Vec<f64> {
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    let bins = n / 2 + 1;
    re[..bins].copy_from_slice(re_bins);
    im[..bins].copy_from_slice(im_bins);
    for k in 1..n / 2 {
        re[n - k] = re_bins[k];
        im[n - k] = -im_bins[k];
    }
    fft_inplace(&mut re, &mut im, true);
    re
}

/// STFT of `[channels, samples]` (or `[samples]`) audio.
pub fn stft(audio: &Tensor, cfg: &StftConfig, sample_rate: u32) -> Result<ComplexSpectrogram, StftError> {
    let (channels, samples) = match audio.rank() {
        1 => (1, audio.shape()[0]),
        2 => (audio.shape()[0], audio.shape()[1]),
        r => {
            return Err(StftError::Tensor(TensorError::InvalidShape {
                op: "stft",
                detail: format!("rank {r} audio"),
            }))
        }
    };
    if samples < cfg.window_len {
        return Err(StftError::TooShort {
            got: samples,
            want: cfg.window_len,
        });
    }
    let t_frames = cfg.n_frames(samples);
    let bins = cfg.n_bins();
    let window = cfg.window();
    let mut re = vec![0.0; channels * t_frames * bins];
    let mut im = vec![0.0; channels * t_frames * bins];
    let mut frame = vec![0.0; cfg.window_len];
    for m in 0..channels {
        let ch = &audio.data()[m * samples..(m + 1) * samples];
        for t in 0..t_frames {
            let start = t * cfg.hop;
            for (i, f) in frame.iter_mut().enumerate() {
                *f = ch[start + i] * window[i];
            }
            let base = (m * t_frames + t) * bins;
            frame_forward(&frame, &mut re[base..base + bins], &mut im[base..base + bins]);
        }
    }
    Ok(ComplexSpectrogram {
        re: Tensor::from_vec(re, &[channels, t_frames, bins])?,
        im: Tensor::from_vec(im, &[channels, t_frames, bins])?,
        sample_rate,
        hop: cfg.hop,
        window_len: cfg.window_len,
    })
}

/// Weighted overlap-add inverse STFT of a mono spectrogram. The synthesis
/// window equals the analysis window; each output sample is normalized by the
/// accumulated squared-window weight, which reconstructs interior samples
/// exactly and fades only where the overlap is incomplete.
pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig) -> Result<Tensor, StftError> {
    if spec.channels() != 1 {
        return Err(StftError::NotMono(spec.channels()));
    }
    if spec.bins() != cfg.n_bins() {
        return Err(StftError::BinMismatch {
            got: spec.bins(),
            want: cfg.n_bins(),
        });
    }
    let t_frames = spec.frames();
    let bins = spec.bins();
    let window = cfg.window();
    let out_len = cfg.output_len(t_frames);
    let mut num = vec![0.0; out_len];
    let mut den = vec![0.0; out_len];
    for t in 0..t_frames {
        let base = t * bins;
        let frame = frame_inverse(
            &spec.re.data()[base..base + bins],
            &spec.im.data()[base..base + bins],
            cfg.window_len,
        );
        let start = t * cfg.hop;
        for (i, &v) in frame.iter().enumerate() {
            num[start + i] += v * window[i];
            den[start + i] += window[i] * window[i];
        }
    }
    let out: Vec<f64> = num
        .iter()
        .zip(&den)
        .map(|(&n, &d)| if d > 1e-12 { n / d } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(out, &[out_len])?)
}

/// Streaming analysis: push hop-sized (or arbitrary) sample blocks per
/// channel and receive complete frames. Keeps a window-minus-hop tail per
/// channel; frame boundaries match the batch [`stft`] exactly.
pub struct StreamingStft {
    cfg: StftConfig,
    window: Vec<f64>,
    bufs: Vec<Vec<f64>>,
}

impl StreamingStft {
    pub fn new(cfg: StftConfig, channels: usize) -> Self {
        StreamingStft {
            window: cfg.window(),
            cfg,
            bufs: vec![Vec::new(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.bufs.len()
    }

    /// Bytes of state carried between pushes (for the O(1)-memory check).
    pub fn state_len(&self) -> usize {
        self.bufs.iter().map(|b| b.len()).sum()
    }

    /// Feed `block` of shape `[channels, k]`; returns one (re, im) pair of
    /// shape `[channels, bins]` per completed frame.
    pub fn push(&mut self, block: &Tensor) -> Result<Vec<(Tensor, Tensor)>, StftError> {
        let channels = self.bufs.len();
        let k = match block.rank() {
            1 if channels == 1 => block.shape()[0],
            2 if block.shape()[0] == channels => block.shape()[1],
            _ => {
                return Err(StftError::Tensor(TensorError::InvalidShape {
                    op: "streaming_stft_push",
                    detail: format!("block {:?} for {channels} channels", block.shape()),
                }))
            }
        };
        for (m, buf) in self.bufs.iter_mut().enumerate() {
            buf.extend_from_slice(&block.data()[m * k..(m + 1) * k]);
        }
        let mut frames = Vec::new();
        let bins = self.cfg.n_bins();
        while self.bufs[0].len() >= self.cfg.window_len {
            let mut re = vec![0.0; channels * bins];
            let mut im = vec![0.0; channels * bins];
            let mut frame = vec![0.0; self.cfg.window_len];
            for (m, buf) in self.bufs.iter().enumerate() {
                for (i, f) in frame.iter_mut().enumerate() {
                    *f = buf[i] * self.window[i];
                }
                frame_forward(
                    &frame,
                    &mut re[m * bins..(m + 1) * bins],
                    &mut im[m * bins..(m + 1) * bins],
                );
            }
            for buf in self.bufs.iter_mut() {
                buf.drain(..self.cfg.hop);
            }
            frames.push((
                Tensor::from_vec(re, &[channels, bins])?,
                Tensor::from_vec(im, &[channels, bins])?,
            ));
        }
        Ok(frames)
    }
}

/// Streaming synthesis: push one enhanced mono frame at a time, receive
/// hop-sized sample blocks. Uses the same squared-window normalization as the
/// batch [`istft`], so concatenated output is bit-exact with it.
pub struct StreamingIstft {
    cfg: StftConfig,
    window: Vec<f64>,
    num: Vec<f64>,
    den: Vec<f64>,
}

impl StreamingIstft {
    pub fn new(cfg: StftConfig) -> Self {
        StreamingIstft {
            window: cfg.window(),
            num: vec![0.0; cfg.window_len],
            den: vec![0.0; cfg.window_len],
            cfg,
        }
    }

    pub fn state_len(&self) -> usize {
        self.num.len() + self.den.len()
    }

    fn emit(&mut self, n: usize) -> Vec<f64> {
        let out: Vec<f64> = self.num[..n]
            .iter()
            .zip(&self.den[..n])
            .map(|(&v, &d)| if d > 1e-12 { v / d } else { 0.0 })
            .collect();
        self.num.drain(..n);
        self.den.drain(..n);
        self.num.resize(self.cfg.window_len, 0.0);
        self.den.resize(self.cfg.window_len, 0.0);
        out
    }

    /// Add one frame (bins 0..=N/2); returns the hop of samples that became
    /// final.
    pub fn push(&mut self, re_bins: &[f64], im_bins: &[f64]) -> Result<Vec<f64>, StftError> {
        if re_bins.len() != self.cfg.n_bins() {
            return Err(StftError::BinMismatch {
                got: re_bins.len(),
                want: self.cfg.n_bins(),
            });
        }
        let frame = frame_inverse(re_bins, im_bins, self.cfg.window_len);
        for (i, &v) in frame.iter().enumerate() {
            self.num[i] += v * self.window[i];
            self.den[i] += self.window[i] * self.window[i];
        }
        Ok(self.emit(self.cfg.hop))
    }

    /// Flush the remaining window-minus-hop tail after the last frame.
    pub fn finish(&mut self) -> Vec<f64> {
        self.emit(self.cfg.window_len - self.cfg.hop)
    }
}
