//! Dataset types, codecs, preprocessing, and the synthetic generator.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! <root>/left/NNNN.png    8-bit RGB
//! <root>/right/NNNN.png   8-bit RGB
//! <root>/disp/NNNN.pfm    ground-truth disparity (0 = unlabeled)
//! ```
//!
//! with zero-padded 4-digit indices.

mod kitti;
mod pfm;
mod synth;

pub use kitti::{decode_kitti_disparity, encode_kitti_disparity, read_kitti_png, write_kitti_png};
pub use pfm::{read_pfm, write_pfm};
pub use synth::{generate_synthetic_pair, Block, SynthSpec};

use image::{ImageFormat, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One rectified stereo training/evaluation sample.
///
/// Invariants: all shapes consistent; gt >= 0; `valid` is false wherever
/// gt = 0 (enforced on construction).
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    /// (3, h, w) intensities in [0, 1].
    pub left: Tensor<f32>,
    /// (3, h, w) intensities in [0, 1].
    pub right: Tensor<f32>,
    /// (h, w) disparities, 0 at unlabeled pixels.
    pub gt: Tensor<f32>,
    /// Row-major (h, w) validity mask.
    pub valid: Vec<bool>,
}

impl StereoSample {
    pub fn new(left: Tensor<f32>, right: Tensor<f32>, gt: Tensor<f32>, mut valid: Vec<bool>) -> Result<Self> {
        if left.rank() != 3 || left.shape()[0] != 3 {
            return Err(Error::invalid(format!(
                "left image must be (3, h, w), got {:?}",
                left.shape()
            )));
        }
        if left.shape() != right.shape() {
            return Err(Error::shape("stereo images", left.shape(), right.shape()));
        }
        if gt.shape() != &left.shape()[1..] {
            return Err(Error::shape("ground truth vs image", gt.shape(), &left.shape()[1..]));
        }
        if valid.len() != gt.numel() {
            return Err(Error::invalid(format!(
                "validity mask has {} entries for {} pixels",
                valid.len(),
                gt.numel()
            )));
        }
        if gt.data().iter().any(|&d| d < 0.0) {
            return Err(Error::invalid("negative ground-truth disparity"));
        }
        for (v, &d) in valid.iter_mut().zip(gt.data()) {
            if d == 0.0 {
                *v = false;
            }
        }
        Ok(StereoSample { left, right, gt, valid })
    }

    pub fn height(&self) -> usize {
        self.gt.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.gt.shape()[1]
    }
}

/// Map 8-bit RGB (interleaved, row-major) to a (3, h, w) tensor in [0, 1].
pub fn normalize_image(rgb: &[u8], h: usize, w: usize) -> Result<Tensor<f32>> {
    if rgb.len() != 3 * h * w {
        return Err(Error::invalid(format!(
            "{} bytes for a {h}x{w} rgb image",
            rgb.len()
        )));
    }
    let mut t = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                t.data_mut()[(c * h + y) * w + x] = rgb[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Ok(t)
}

/// Inverse of [`normalize_image`]: round back to 8-bit interleaved RGB.
pub fn denormalize_image(t: &Tensor<f32>) -> Result<Vec<u8>> {
    if t.rank() != 3 || t.shape()[0] != 3 {
        return Err(Error::invalid(format!("expected (3, h, w), got {:?}", t.shape())));
    }
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut rgb = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (t.data()[(c * h + y) * w + x] * 255.0).round().clamp(0.0, 255.0);
                rgb[(y * w + x) * 3 + c] = v as u8;
            }
        }
    }
    Ok(rgb)
}

/// Crop an identical seeded window out of every field of a sample.
pub fn random_crop(sample: &StereoSample, crop_h: usize, crop_w: usize, seed: u64) -> Result<StereoSample> {
    let (h, w) = (sample.height(), sample.width());
    if crop_h > h || crop_w > w || crop_h == 0 || crop_w == 0 {
        return Err(Error::invalid(format!(
            "crop {crop_h}x{crop_w} does not fit inside {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oy = rng.random_range(0..=h - crop_h);
    let ox = rng.random_range(0..=w - crop_w);

    let crop_plane = |src: &[f32], plane: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(crop_h * crop_w);
        for y in 0..crop_h {
            let base = plane * h * w + (oy + y) * w + ox;
            out.extend_from_slice(&src[base..base + crop_w]);
        }
        out
    };
    let mut left = Vec::with_capacity(3 * crop_h * crop_w);
    let mut right = Vec::with_capacity(3 * crop_h * crop_w);
    for c in 0..3 {
        left.extend(crop_plane(sample.left.data(), c));
        right.extend(crop_plane(sample.right.data(), c));
    }
    let gt = crop_plane(sample.gt.data(), 0);
    let mut valid = Vec::with_capacity(crop_h * crop_w);
    for y in 0..crop_h {
        let base = (oy + y) * w + ox;
        valid.extend_from_slice(&sample.valid[base..base + crop_w]);
    }
    StereoSample::new(
        Tensor::new(&[3, crop_h, crop_w], left)?,
        Tensor::new(&[3, crop_h, crop_w], right)?,
        Tensor::new(&[crop_h, crop_w], gt)?,
        valid,
    )
}

/// In-memory dataset with a deterministic per-epoch iteration order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<StereoSample>,
}

impl Dataset {
    pub fn new(samples: Vec<StereoSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        let shape = samples[0].left.shape().to_vec();
        for s in &samples {
            if s.left.shape() != shape {
                return Err(Error::shape("dataset sample shapes", &shape, s.left.shape()));
            }
        }
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample order for one epoch: a pure function of (shuffle seed, epoch).
    pub fn epoch_order(&self, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        rng.set_stream(epoch.wrapping_add(1));
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut rng);
        order
    }
}

/// Stack equal-shaped samples into batch tensors; gt keeps 0 at unlabeled
/// pixels, so the loss mask is implied.
pub fn stack_batch(samples: &[&StereoSample]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>, Vec<bool>)> {
    let first = samples.first().ok_or_else(|| Error::Dataset("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let b = samples.len();
    let mut left = Vec::with_capacity(b * 3 * h * w);
    let mut right = Vec::with_capacity(b * 3 * h * w);
    let mut gt = Vec::with_capacity(b * h * w);
    let mut valid = Vec::with_capacity(b * h * w);
    for s in samples {
        if s.height() != h || s.width() != w {
            return Err(Error::shape("batch sample shapes", first.left.shape(), s.left.shape()));
        }
        left.extend_from_slice(s.left.data());
        right.extend_from_slice(s.right.data());
        gt.extend_from_slice(s.gt.data());
        valid.extend_from_slice(&s.valid);
    }
    Ok((
        Tensor::new(&[b, 3, h, w], left)?,
        Tensor::new(&[b, 3, h, w], right)?,
        Tensor::new(&[b, h, w], gt)?,
        valid,
    ))
}

fn sample_paths(root: &Path, index: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        root.join("left").join(format!("{index:04}.png")),
        root.join("right").join(format!("{index:04}.png")),
        root.join("disp").join(format!("{index:04}.pfm")),
    )
}

fn image_to_png_bytes(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let rgb = denormalize_image(t)?;
    let img: RgbImage = RgbImage::from_raw(w as u32, h as u32, rgb)
        .ok_or_else(|| Error::invalid("rgb buffer size mismatch"))?;
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb8(img).write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?;
    Ok(bytes)
}

fn png_bytes_to_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    normalize_image(img.as_raw(), h, w)
}

/// Write one sample under the standard directory layout.
pub fn save_sample(root: &Path, index: usize, sample: &StereoSample) -> Result<()> {
    let (lp, rp, dp) = sample_paths(root, index);
    for p in [&lp, &rp, &dp] {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(&lp, image_to_png_bytes(&sample.left)?)?;
    std::fs::write(&rp, image_to_png_bytes(&sample.right)?)?;
    std::fs::write(&dp, write_pfm(&sample.gt)?)?;
    Ok(())
}

/// Load one sample; the validity mask is recovered from gt > 0. A missing
/// disparity file yields an all-invalid ground truth (prediction-only data).
pub fn load_sample(root: &Path, index: usize) -> Result<StereoSample> {
    let (lp, rp, dp) = sample_paths(root, index);
    let left = png_bytes_to_image(&std::fs::read(&lp)?)?;
    let right = png_bytes_to_image(&std::fs::read(&rp)?)?;
    let (h, w) = (left.shape()[1], left.shape()[2]);
    let gt = if dp.exists() {
        read_pfm(&std::fs::read(&dp)?)?
    } else {
        Tensor::zeros(&[h, w])
    };
    let valid = gt.data().iter().map(|&d| d > 0.0).collect();
    StereoSample::new(left, right, gt, valid)
}

/// Indices present in a dataset directory, sorted.
pub fn list_indices(root: &Path) -> Result<Vec<usize>> {
    let left_dir = root.join("left");
    let mut indices = Vec::new();
    for entry in std::fs::read_dir(&left_dir).map_err(|e| {
        Error::Dataset(format!("cannot read {}: {e}", left_dir.display()))
    })? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".png") {
            if let Ok(i) = stem.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(Error::Dataset(format!(
            "no samples under {}",
            root.display()
        )));
    }
    Ok(indices)
}

/// Load a whole dataset directory.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let samples = list_indices(root)?
        .into_iter()
        .map(|i| load_sample(root, i))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let t = normalize_image(&[255, 0, 128], 1, 1).unwrap();
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
        assert!((t.data()[2] - 128.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn crop_is_deterministic_and_identity_at_full_size() {
        let spec = SynthSpec {
            height: 24,
            width: 40,
            background_disparity: 3,
            blocks: vec![Block { x: 10, y: 6, w: 12, h: 10, disparity: 8 }],
            seed: 5,
        };
        let s = generate_synthetic_pair(&spec).unwrap();
        let a = random_crop(&s, 16, 24, 99).unwrap();
        let b = random_crop(&s, 16, 24, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.left.shape(), &[3, 16, 24]);
        assert_eq!(a.gt.shape(), &[16, 24]);

        let full = random_crop(&s, 24, 40, 1).unwrap();
        assert_eq!(full, s);

        assert!(random_crop(&s, 25, 40, 1).is_err());
    }

    #[test]
    fn epoch_order_is_reproducible_and_epoch_dependent() {
        let spec = SynthSpec {
            height: 8,
            width: 16,
            background_disparity: 2,
            blocks: vec![],
            seed: 0,
        };
        let samples: Vec<StereoSample> = (0..6)
            .map(|i| {
                generate_synthetic_pair(&SynthSpec { seed: i, ..spec.clone() }).unwrap()
            })
            .collect();
        let ds = Dataset::new(samples).unwrap();
        assert_eq!(ds.epoch_order(1, 0), ds.epoch_order(1, 0));
        assert_ne!(ds.epoch_order(1, 0), ds.epoch_order(1, 1));
        let mut sorted = ds.epoch_order(1, 3);
        sorted.sort_unstable();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn save_load_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            height: 10,
            width: 18,
            background_disparity: 3,
            blocks: vec![Block { x: 4, y: 2, w: 8, h: 6, disparity: 7 }],
            seed: 11,
        };
        let s = generate_synthetic_pair(&spec).unwrap();
        save_sample(dir.path(), 0, &s).unwrap();
        let back = load_sample(dir.path(), 0).unwrap();
        // Disparities round-trip bit-exact through PFM; images through
        // 8-bit quantization (values are exact 8-bit multiples already only
        // after one save/load cycle, so compare against a re-saved copy).
        assert_eq!(back.gt, s.gt);
        assert_eq!(back.valid, s.valid);
        save_sample(dir.path(), 1, &back).unwrap();
        let twice = load_sample(dir.path(), 1).unwrap();
        assert_eq!(twice.left, back.left);
        assert_eq!(twice.right, back.right);
    }

    #[test]
    fn stack_batch_shapes() {
        let spec = SynthSpec {
            height: 8,
            width: 12,
            background_disparity: 2,
            blocks: vec![],
            seed: 3,
        };
        let a = generate_synthetic_pair(&spec).unwrap();
        let b = generate_synthetic_pair(&SynthSpec { seed: 4, ..spec }).unwrap();
        let (l, r, g, v) = stack_batch(&[&a, &b]).unwrap();
        assert_eq!(l.shape(), &[2, 3, 8, 12]);
        assert_eq!(r.shape(), &[2, 3, 8, 12]);
        assert_eq!(g.shape(), &[2, 8, 12]);
        assert_eq!(v.len(), 2 * 8 * 12);
    }
}
