//! Binary weights container.
//!
//! Layout (little-endian): magic `DANW`, `u32` version (= 1), `u32` tensor
//! count, then per tensor a `u16` name length, the UTF-8 name, a `u8` rank,
//! `rank` × `u32` dims and the `f32` payload.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{DanError, Result};
use crate::io::atomic_write;

const MAGIC: &[u8; 4] = b"DANW";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

pub fn write_container_to<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| DanError::Container(format!("name too long: {}", t.name)))?;
        let rank = u8::try_from(t.tensor.rank()).map_err(|_| DanError::Container(format!("rank too high: {}", t.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[rank])?;
        for &d in t.tensor.shape() {
            let d = u32::try_from(d).map_err(|_| DanError::Container(format!("extent too large: {}", t.name)))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.tensor.len() * 4);
        for v in t.tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => DanError::Container("truncated file".into()),
        _ => DanError::Io(e),
    })?;
    Ok(buf)
}

pub fn read_container_from<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(DanError::Container("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(DanError::Container(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| DanError::Container("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| DanError::Container("name is not UTF-8".into()))?;
        let [rank] = read_exact::<_, 1>(&mut r)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload)
            .map_err(|_| DanError::Container(format!("truncated payload for {name}")))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(NamedTensor {
            name,
            tensor: Tensor::new(&shape, data)?,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(DanError::Container("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn write_container(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut buf = Vec::new();
    write_container_to(&mut buf, tensors)?;
    atomic_write(path, &buf)
}

pub fn read_container(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = fs::read(path)?;
    read_container_from(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor {
                name: "conv.w".into(),
                tensor: Tensor::new(&[2, 1, 1, 1], vec![1.5, -0.0]).unwrap(),
            },
            NamedTensor {
                name: "scalar".into(),
                tensor: Tensor::scalar(f32::MIN_POSITIVE),
            },
        ]
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_container_to(&mut buf, &sample()).unwrap();
        assert_eq!(&buf[..4], b"DANW");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..14], &6u16.to_le_bytes());
        assert_eq!(&buf[14..20], b"conv.w");
        assert_eq!(buf[20], 4);
    }

    #[test]
    fn bit_exact_round_trip() {
        let mut buf = Vec::new();
        write_container_to(&mut buf, &sample()).unwrap();
        let back = read_container_from(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in sample().iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            let bits_a: Vec<u32> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        let mut again = Vec::new();
        write_container_to(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut buf = Vec::new();
        write_container_to(&mut buf, &sample()).unwrap();
        buf[4] = 2;
        let err = read_container_from(buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn truncation_is_rejected() {
        let mut buf = Vec::new();
        write_container_to(&mut buf, &sample()).unwrap();
        buf.pop();
        assert!(read_container_from(buf.as_slice()).is_err());
    }
}
