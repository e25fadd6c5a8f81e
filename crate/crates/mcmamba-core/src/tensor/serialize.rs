//! Flat binary weight container.
//!
//! Layout: magic `MCMB`, version `u32` LE, then parameter records until EOF.
//! Each record: name length `u32` LE, UTF-8 name bytes, dtype tag `u8`
//! (0 = f64, 1 = f32), rank `u32` LE, dims as `u64` LE, then the raw values
//! little-endian. f64 round-trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"MCMB";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes (expected MCMB)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Write named tensors as a container. Iteration order of the map fixes the
/// record order, so identical inputs produce identical bytes.
pub fn write_container<W: Write>(
    mut w: W,
    params: &BTreeMap<String, Tensor>,
) -> Result<(), ContainerError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in params {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[0u8])?; // dtype: f64
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a container until EOF. f32 records are promoted to f64 values.
pub fn read_container<R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor>, ContainerError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(ContainerError::BadVersion(version));
    }

    let mut out = BTreeMap::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read_exact(&mut len4) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| ContainerError::Malformed(format!("name not UTF-8: {e}")))?;

        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let mut rank4 = [0u8; 4];
        r.read_exact(&mut rank4)?;
        let rank = u32::from_le_bytes(rank4) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d8 = [0u8; 8];
            r.read_exact(&mut d8)?;
            shape.push(u64::from_le_bytes(d8) as usize);
        }
        let numel: usize = shape.iter().product();
        let data = match tag[0] {
            0 => {
                let mut buf = vec![0u8; numel * 8];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect::<Vec<f64>>()
            }
            1 => {
                let mut buf = vec![0u8; numel * 4];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect::<Vec<f64>>()
            }
            t => return Err(ContainerError::BadDtype(t)),
        };
        out.insert(name, Tensor::from_vec(data, &shape)?);
    }
    Ok(out)
}

pub fn write_container_file(
    path: &Path,
    params: &BTreeMap<String, Tensor>,
) -> Result<(), ContainerError> {
    let file = std::fs::File::create(path)?;
    write_container(io::BufWriter::new(file), params)
}

pub fn read_container_file(path: &Path) -> Result<BTreeMap<String, Tensor>, ContainerError> {
    let file = std::fs::File::open(path)?;
    read_container(io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn roundtrip(params: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
        let mut buf = Vec::new();
        write_container(&mut buf, params).unwrap();
        read_container(buf.as_slice()).unwrap()
    }

    #[test]
    fn bit_exact_roundtrip() {
        let mut rng = Rng::new(11);
        let mut params = BTreeMap::new();
        params.insert("a.weight".to_string(), Tensor::randn(&mut rng, &[3, 5], 1.0));
        params.insert(
            "b.bias".to_string(),
            Tensor::from_vec(vec![-0.0, 1e-308, f64::MAX, -f64::MIN_POSITIVE], &[4]).unwrap(),
        );
        params.insert("scalar".to_string(), Tensor::scalar(0.25));
        let back = roundtrip(&params);
        assert_eq!(back.len(), params.len());
        for (name, t) in &params {
            let r = &back[name];
            assert_eq!(r.shape(), t.shape());
            for (a, b) in t.data().iter().zip(r.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let err = read_container(&b"NOPE\x01\x00\x00\x00"[..]).unwrap_err();
        assert!(matches!(err, ContainerError::BadMagic));
    }

    #[test]
    fn rejects_bad_version() {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&9u32.to_le_bytes());
        let err = read_container(buf.as_slice()).unwrap_err();
        assert!(matches!(err, ContainerError::BadVersion(9)));
    }

    #[test]
    fn reads_f32_records() {
        // Hand-assembled record with dtype tag 1.
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let name = b"w";
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(1u8);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&2u64.to_le_bytes());
        buf.extend_from_slice(&0.5f32.to_le_bytes());
        buf.extend_from_slice(&(-3.25f32).to_le_bytes());
        let back = read_container(buf.as_slice()).unwrap();
        assert_eq!(back["w"].data(), &[0.5, -3.25]);
    }

    #[test]
    fn unknown_dtype_is_an_error() {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.push(b'x');
        buf.push(7u8);
        buf.extend_from_slice(&0u32.to_le_bytes());
        let err = read_container(buf.as_slice()).unwrap_err();
        assert!(matches!(err, ContainerError::BadDtype(7)));
    }
}
