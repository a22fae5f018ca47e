//! 8-bit grayscale previews for looking at images, not for reloading them.

use std::path::Path;

use super::write_bytes;
use crate::error::Result;
use crate::tensor::Tensor;

/// Maps [-1, 1] to 0..=255, clamping outside values.
pub fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Tiles the items of a `[B, 1, H, W]` tensor left to right and encodes
/// them as a binary PGM (P5).
pub fn encode_pgm(images: &Tensor<f32>) -> Result<Vec<u8>> {
    let (b, c, h, w) = images.dims4()?;
    let width = b * c * w;
    let mut out = format!("P5\n{width} {h}\n255\n").into_bytes();
    for y in 0..h {
        for plane in 0..b * c {
            let row = &images.data()[plane * h * w + y * w..][..w];
            out.extend(row.iter().map(|&v| to_u8(v)));
        }
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, images: &Tensor<f32>) -> Result<()> {
    write_bytes(path, &encode_pgm(images)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_items() {
        let t = Tensor::from_vec(&[2, 1, 1, 2], vec![-1.0, 1.0, 0.0, 5.0]).unwrap();
        let pgm = encode_pgm(&t).unwrap();
        let header = b"P5\n4 1\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(&pgm[header.len()..], &[0, 255, 128, 255]);
    }
}
