//! Multichannel speech enhancement built from scratch around selective
//! state-space (Mamba) blocks.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense f64 arrays with reverse-mode autodiff on a thread-local
//!   gradient tape, plus the binary weight container.
//! - [`ssm`] — the selective state-space core: input-dependent (Δ, B, C),
//!   discretization, and sequential / parallel / chunked scan kernels.
//! - [`blocks`] — the Mamba block and its causal (Uni) and non-causal (Bi)
//!   directional wrappers with learnable linear residual paths.
//! - [`model`] — the four-stage cascade (full-band spatial, narrow-band
//!   spatial, sub-band spectral, full-band spectral) with offline and
//!   streaming inference.
//! - [`stft`] — Hann-window STFT / weighted overlap-add iSTFT, streaming
//!   variants, and a from-scratch radix-2 FFT.
//! - [`audio`] / [`dataset`] — WAV I/O and deterministic multichannel mixture
//!   simulation.
//! - [`train`] — Adam, the spectral L1 loss, SI-SDR, and the toy training
//!   loop.
//! - [`checks`] — the runtime verification suite shared by the CLI and the
//!   acceptance tests, including the independent oracle implementations.

pub mod audio;
pub mod blocks;
pub mod checks;
pub mod dataset;
pub mod model;
pub mod rng;
pub mod ssm;
pub mod stft;
pub mod tensor;
pub mod train;

pub use tensor::{GradientTape, Tensor, TensorError};
