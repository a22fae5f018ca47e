//! ADTF tensor files.
//!
//! ```text
//! "ADTF" | u32 version = 1 | u8 dtype (0 = f32) | u8 ndim | ndim × u32 dims | payload
//! ```
//! The payload is row-major little-endian IEEE-754 binary32.

use std::path::Path;

use super::{read_bytes, write_bytes, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ADTF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode(tensor: &Tensor<f32>) -> Vec<u8> {
    let shape = tensor.shape();
    let mut out = Vec::with_capacity(10 + 4 * shape.len() + 4 * tensor.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err("bad magic, expected ADTF".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(format!("unsupported dtype {dtype}"));
    }
    let ndim = r.u8()? as usize;
    let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("dimension overflow")?;
    let data = r.f32s(n)?;
    if !r.finished() {
        return Err("trailing bytes after payload".into());
    }
    Tensor::from_vec(&shape, data).map_err(|e| e.to_string())
}

pub fn write(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    write_bytes(path, &encode(tensor))
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    let bytes = read_bytes(path)?;
    decode(&bytes).map_err(|reason| Error::format(path, reason))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::from_vec(&[1, 2], vec![1.0f32, -2.5]).unwrap();
        let b = encode(&t);
        let mut want = vec![0x41, 0x44, 0x54, 0x46, 1, 0, 0, 0, 0, 2, 1, 0, 0, 0, 2, 0, 0, 0];
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::from_vec(&[3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let b = encode(&t);
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
        let mut ver = b.clone();
        ver[4] = 2;
        assert!(decode(&ver).is_err());
        let mut dt = b;
        dt[8] = 1;
        assert!(decode(&dt).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(shape in prop::collection::vec(1usize..5, 0..5), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let mut rng = crate::rng::seeded(seed);
            let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rand::Rng::random::<u32>(&mut rng))).collect();
            let t = Tensor::from_vec(&shape, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&t));
        }
    }
}
