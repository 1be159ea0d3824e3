//! KITTI-convention disparity codec: 16-bit grayscale PNG storing
//! disparity * 256, with 0 as the invalid-pixel sentinel.

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};
use std::io::Cursor;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decode stored 16-bit samples: disparity = stored / 256, stored 0 = invalid.
pub fn decode_kitti_disparity(pixels: &[u16], h: usize, w: usize) -> Result<(Tensor<f32>, Vec<bool>)> {
    if pixels.len() != h * w {
        return Err(Error::invalid(format!(
            "{} samples for a {h}x{w} map",
            pixels.len()
        )));
    }
    let mut gt = vec![0.0f32; h * w];
    let mut valid = vec![false; h * w];
    for (i, &p) in pixels.iter().enumerate() {
        if p != 0 {
            gt[i] = p as f32 / 256.0;
            valid[i] = true;
        }
    }
    Ok((Tensor::new(&[h, w], gt)?, valid))
}

/// Encode to stored units, rounding to the nearest; valid pixels are clamped
/// away from the 0 sentinel so validity survives the round trip.
pub fn encode_kitti_disparity(gt: &Tensor<f32>, valid: &[bool]) -> Result<Vec<u16>> {
    if gt.rank() != 2 || valid.len() != gt.numel() {
        return Err(Error::invalid(format!(
            "disparity map {:?} with {} mask entries",
            gt.shape(),
            valid.len()
        )));
    }
    Ok(gt
        .data()
        .iter()
        .zip(valid)
        .map(|(&d, &v)| {
            if !v {
                0
            } else {
                let stored = (d.max(0.0) as f64 * 256.0).round();
                (stored as u64).clamp(1, u16::MAX as u64) as u16
            }
        })
        .collect())
}

/// Decode a PNG byte stream; anything but single-channel 16-bit is rejected.
pub fn read_kitti_png(bytes: &[u8]) -> Result<(Tensor<f32>, Vec<bool>)> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    match img {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            decode_kitti_disparity(buf.as_raw(), h, w)
        }
        other => Err(Error::PngNot16Bit(format!("{:?}", other.color()))),
    }
}

/// Encode a disparity map and validity mask as 16-bit grayscale PNG bytes.
pub fn write_kitti_png(gt: &Tensor<f32>, valid: &[bool]) -> Result<Vec<u8>> {
    let (h, w) = (gt.shape()[0], gt.shape()[1]);
    let stored = encode_kitti_disparity(gt, valid)?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, stored)
            .ok_or_else(|| Error::invalid("disparity buffer size mismatch"))?;
    let mut bytes = Vec::new();
    DynamicImage::ImageLuma16(buf).write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?;
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stated_encoding_arithmetic() {
        let (gt, valid) = decode_kitti_disparity(&[512, 0], 1, 2).unwrap();
        assert_eq!(gt.data()[0], 2.0);
        assert!(valid[0]);
        assert_eq!(gt.data()[1], 0.0);
        assert!(!valid[1]);
    }

    #[test]
    fn encode_two_pixels() {
        let gt = Tensor::new(&[1, 2], vec![2.0f32, 7.25]).unwrap();
        let stored = encode_kitti_disparity(&gt, &[true, true]).unwrap();
        assert_eq!(stored, vec![512, 1856]);
    }

    #[test]
    fn quantization_round_trip_within_half_unit() {
        let vals = [0.5f32, 1.0, 3.14159, 77.7, 191.996];
        let gt = Tensor::new(&[1, 5], vals.to_vec()).unwrap();
        let valid = vec![true; 5];
        let stored = encode_kitti_disparity(&gt, &valid).unwrap();
        let (back, back_valid) = decode_kitti_disparity(&stored, 1, 5).unwrap();
        assert_eq!(back_valid, valid);
        for (a, b) in gt.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 512.0, "{a} vs {b}");
        }
    }

    #[test]
    fn png_round_trip_preserves_sentinel() {
        let gt = Tensor::new(&[2, 2], vec![1.5f32, 0.0, 64.25, 10.0]).unwrap();
        let valid = vec![true, false, true, true];
        let bytes = write_kitti_png(&gt, &valid).unwrap();
        let (back, back_valid) = read_kitti_png(&bytes).unwrap();
        assert_eq!(back_valid, valid);
        for (i, (&a, &b)) in gt.data().iter().zip(back.data()).enumerate() {
            if valid[i] {
                assert!((a - b).abs() <= 1.0 / 512.0);
            } else {
                assert_eq!(b, 0.0);
            }
        }
    }

    #[test]
    fn eight_bit_png_rejected() {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(2, 2, vec![0u8; 4]).unwrap();
        let mut bytes = Vec::new();
        DynamicImage::ImageLuma8(buf)
            .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
            .unwrap();
        assert!(matches!(read_kitti_png(&bytes), Err(Error::PngNot16Bit(_))));
    }
}
