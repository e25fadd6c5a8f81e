//! Multichannel WAV (RIFF) reading and writing. Supports PCM16 and IEEE
//! float32; samples live in memory as channel-major f64 in [-1, 1).

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum WavError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a RIFF/WAVE file")]
    NotRiff,
    #[error("missing {0} chunk")]
    MissingChunk(&'static str),
    #[error("unsupported codec: format tag {tag} ({bits} bits/sample)")]
    UnsupportedCodec { tag: u16, bits: u16 },
    #[error("malformed WAV: {0}")]
    Malformed(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Sample encoding on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

/// In-memory multichannel audio: `samples` is `[channels, n]`.
#[derive(Debug, Clone)]
pub struct AudioBuffer {
    pub samples: Tensor,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Tensor, sample_rate: u32) -> Self {
        assert!(sample_rate > 0);
        assert!(samples.rank() == 2, "AudioBuffer wants [channels, n]");
        AudioBuffer {
            samples,
            sample_rate,
        }
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, m: usize) -> &[f64] {
        let n = self.len();
        &self.samples.data()[m * n..(m + 1) * n]
    }
}

pub fn read_wav(path: &Path) -> Result<AudioBuffer, WavError> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    parse_wav(&bytes)
}

pub fn parse_wav(bytes: &[u8]) -> Result<AudioBuffer, WavError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::NotRiff);
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (tag, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(WavError::Malformed("fmt chunk too small".into()));
                }
                let mut tag = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                // WAVE_FORMAT_EXTENSIBLE: the real tag leads the SubFormat GUID.
                if tag == 0xFFFE {
                    if body.len() < 26 {
                        return Err(WavError::Malformed("extensible fmt truncated".into()));
                    }
                    tag = u16::from_le_bytes(body[24..26].try_into().unwrap());
                }
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1); // chunks are word-aligned
    }
    let (tag, channels, rate, bits) = fmt.ok_or(WavError::MissingChunk("fmt "))?;
    let data = data.ok_or(WavError::MissingChunk("data"))?;
    let channels = channels as usize;
    if channels == 0 {
        return Err(WavError::Malformed("zero channels".into()));
    }

    let interleaved: Vec<f64> = match (tag, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64 / 32768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        (tag, bits) => return Err(WavError::UnsupportedCodec { tag, bits }),
    };
    let n = interleaved.len() / channels;
    let mut planar = vec![0.0; channels * n];
    for (i, &v) in interleaved.iter().enumerate().take(channels * n) {
        let (frame, ch) = (i / channels, i % channels);
        planar[ch * n + frame] = v;
    }
    Ok(AudioBuffer {
        samples: Tensor::from_vec(planar, &[channels, n])?,
        sample_rate: rate,
    })
}

pub fn write_wav(path: &Path, audio: &AudioBuffer, format: SampleFormat) -> Result<(), WavError> {
    let file = std::fs::File::create(path)?;
    let mut w = io::BufWriter::new(file);
    write_wav_to(&mut w, audio, format)
}

pub fn write_wav_to<W: Write>(
    w: &mut W,
    audio: &AudioBuffer,
    format: SampleFormat,
) -> Result<(), WavError> {
    let channels = audio.channels() as u16;
    let n = audio.len() as u32;
    let (tag, bits): (u16, u16) = match format {
        SampleFormat::Pcm16 => (1, 16),
        SampleFormat::Float32 => (3, 32),
    };
    let block_align = channels * bits / 8;
    let data_size = n * block_align as u32;
    let byte_rate = audio.sample_rate * block_align as u32;

    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_size).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&tag.to_le_bytes())?;
    w.write_all(&channels.to_le_bytes())?;
    w.write_all(&audio.sample_rate.to_le_bytes())?;
    w.write_all(&byte_rate.to_le_bytes())?;
    w.write_all(&block_align.to_le_bytes())?;
    w.write_all(&bits.to_le_bytes())?;
    w.write_all(b"data")?;
    w.write_all(&data_size.to_le_bytes())?;

    let len = audio.len();
    match format {
        SampleFormat::Pcm16 => {
            for frame in 0..len {
                for ch in 0..audio.channels() {
                    let v = audio.samples.data()[ch * len + frame];
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    w.write_all(&q.to_le_bytes())?;
                }
            }
        }
        SampleFormat::Float32 => {
            for frame in 0..len {
                for ch in 0..audio.channels() {
                    let v = audio.samples.data()[ch * len + frame] as f32;
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}
