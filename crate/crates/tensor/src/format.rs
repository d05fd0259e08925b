//! Binary tensor files: `"PTNS"`, `u8` version, `u8` rank, `rank × u32`
//! little-endian dims, then the fp64 little-endian row-major payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PTNS";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(mut bytes: &[u8]) -> Result<Tensor> {
    let mut header = [0u8; 6];
    bytes
        .read_exact(&mut header)
        .map_err(|_| TensorError::Format("truncated header".into()))?;
    if &header[..4] != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    if header[4] != VERSION {
        return Err(TensorError::Format(format!("unsupported version {}", header[4])));
    }
    let rank = header[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        bytes
            .read_exact(&mut d)
            .map_err(|_| TensorError::Format("truncated dims".into()))?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let n: usize = shape.iter().product();
    if bytes.len() != 8 * n {
        return Err(TensorError::Format(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            bytes.len(),
            8 * n
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"PTNS");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..22], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 14 + 16);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::vector(vec![1.0, 2.0]);
        let mut b = encode(&t);
        assert!(decode(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode(&b).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| (seed.wrapping_add(i as u64) % 1000) as f64 * 0.37 - 100.0).collect();
            let t = Tensor::new(&dims, data).unwrap();
            prop_assert_eq!(decode(&encode(&t)).unwrap(), t);
        }
    }
}
