//! Disparity visualization: a fixed blue -> green -> red ramp.

use image::{ImageFormat, RgbImage};
use std::io::Cursor;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Map one disparity to RGB along the ramp (0 = blue, half = green,
/// max = red); values are clamped into [0, max].
pub fn ramp_color(d: f64, max_disparity: usize) -> [u8; 3] {
    let t = (d / max_disparity as f64).clamp(0.0, 1.0);
    if t <= 0.5 {
        let s = t / 0.5;
        [0, (255.0 * s).round() as u8, (255.0 * (1.0 - s)).round() as u8]
    } else {
        let s = (t - 0.5) / 0.5;
        [(255.0 * s).round() as u8, (255.0 * (1.0 - s)).round() as u8, 0]
    }
}

/// Render an (h, w) disparity map as interleaved RGB; invalid pixels black.
pub fn render_colormap(
    disparity: &Tensor<f32>,
    valid: Option<&[bool]>,
    max_disparity: usize,
) -> Result<Vec<u8>> {
    if disparity.rank() != 2 {
        return Err(Error::invalid(format!(
            "colormap expects an (h, w) map, got {:?}",
            disparity.shape()
        )));
    }
    if max_disparity == 0 {
        return Err(Error::invalid("max disparity must be positive"));
    }
    let mut rgb = Vec::with_capacity(disparity.numel() * 3);
    for (i, &d) in disparity.data().iter().enumerate() {
        if valid.map_or(false, |m| !m[i]) {
            rgb.extend_from_slice(&[0, 0, 0]);
        } else {
            rgb.extend_from_slice(&ramp_color(d as f64, max_disparity));
        }
    }
    Ok(rgb)
}

/// Render straight to PNG bytes.
pub fn render_colormap_png(
    disparity: &Tensor<f32>,
    valid: Option<&[bool]>,
    max_disparity: usize,
) -> Result<Vec<u8>> {
    let (h, w) = (disparity.shape()[0], disparity.shape()[1]);
    let rgb = render_colormap(disparity, valid, max_disparity)?;
    let img: RgbImage = RgbImage::from_raw(w as u32, h as u32, rgb)
        .ok_or_else(|| Error::invalid("colormap buffer size mismatch"))?;
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb8(img).write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?;
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp_color(0.0, 64), [0, 0, 255]);
        assert_eq!(ramp_color(64.0, 64), [255, 0, 0]);
        assert_eq!(ramp_color(32.0, 64), [0, 255, 0]);
        // Clamped beyond the ramp.
        assert_eq!(ramp_color(99.0, 64), [255, 0, 0]);
    }

    #[test]
    fn invalid_pixels_are_black() {
        let d = Tensor::new(&[1, 2], vec![0.0f32, 10.0]).unwrap();
        let rgb = render_colormap(&d, Some(&[false, true]), 20).unwrap();
        assert_eq!(&rgb[0..3], &[0, 0, 0]);
        assert_ne!(&rgb[3..6], &[0, 0, 0]);
    }
}
