//! Synthetic random-dot stereo pairs with exact integer ground truth.
//!
//! The right image is seeded uniform noise; the left image is the right
//! image warped by the disparity map, so `left(x, y) = right(x - d, y)`
//! holds exactly at every valid pixel. Pixels whose source column falls off
//! the image are unlabeled (gt 0, invalid) and filled with fresh noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::StereoSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned foreground rectangle at a constant disparity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub disparity: usize,
}

/// Recipe for one synthetic stereo pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub background_disparity: usize,
    /// Foreground rectangles; earlier entries are stacked on top.
    pub blocks: Vec<Block>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("synthetic image must be non-empty"));
        }
        if self.background_disparity >= self.width {
            return Err(Error::invalid(format!(
                "background disparity {} must be smaller than width {}",
                self.background_disparity, self.width
            )));
        }
        for b in &self.blocks {
            if b.disparity >= self.width {
                return Err(Error::invalid(format!(
                    "block disparity {} must be smaller than width {}",
                    b.disparity, self.width
                )));
            }
            if b.x + b.w > self.width || b.y + b.h > self.height || b.w == 0 || b.h == 0 {
                return Err(Error::invalid(format!(
                    "block {b:?} exceeds the {}x{} image",
                    self.height, self.width
                )));
            }
        }
        Ok(())
    }

    /// Disparity at a pixel: topmost covering block wins, else background.
    pub fn disparity_at(&self, x: usize, y: usize) -> usize {
        for b in &self.blocks {
            if x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h {
                return b.disparity;
            }
        }
        self.background_disparity
    }

    /// Desk-scale recipe: a shallow background (3..=6 px) plus one large
    /// foreground rectangle at 8..=14 px, both seed-derived.
    pub fn two_level(height: usize, width: usize, seed: u64) -> SynthSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xB10C);
        let background = rng.random_range(3..=6usize);
        let disparity = rng.random_range(8..=14usize);
        let w = rng.random_range(width * 2 / 5..=width * 7 / 10);
        let h = rng.random_range(height * 2 / 5..=height * 7 / 10);
        let x = rng.random_range(0..=width - w);
        let y = rng.random_range(0..=height - h);
        SynthSpec {
            height,
            width,
            background_disparity: background,
            blocks: vec![Block { x, y, w, h, disparity }],
            seed,
        }
    }
}

/// Build the stereo pair described by `spec`.
pub fn generate_synthetic_pair(spec: &SynthSpec) -> Result<StereoSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let right = Tensor::from_fn(&[3, h, w], |_| rng.random::<f32>());

    let mut gt = vec![0.0f32; h * w];
    let mut valid = vec![false; h * w];
    let mut left = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let d = spec.disparity_at(x, y);
            if x >= d && d > 0 {
                gt[y * w + x] = d as f32;
                valid[y * w + x] = true;
                for c in 0..3 {
                    let src = right.data()[(c * h + y) * w + (x - d)];
                    left.data_mut()[(c * h + y) * w + x] = src;
                }
            }
        }
    }
    // Fresh noise where the warp has no source (and wherever disparity is 0),
    // drawn after the right image in channel-scanline order.
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                if !valid[y * w + x] {
                    left.data_mut()[(c * h + y) * w + x] = rng.random::<f32>();
                }
            }
        }
    }
    StereoSample::new(left, right, Tensor::new(&[h, w], gt)?, valid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            height: 12,
            width: 20,
            background_disparity: 4,
            blocks: vec![Block {
                x: 6,
                y: 3,
                w: 8,
                h: 6,
                disparity: 10,
            }],
            seed: 7,
        }
    }

    #[test]
    fn histogram_has_exactly_the_two_levels() {
        let s = generate_synthetic_pair(&spec()).unwrap();
        let mut levels: Vec<f32> = s
            .gt
            .data()
            .iter()
            .zip(&s.valid)
            .filter(|(_, &v)| v)
            .map(|(&d, _)| d)
            .collect();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup();
        assert_eq!(levels, vec![4.0, 10.0]);
    }

    #[test]
    fn warping_identity_holds_exactly() {
        let s = generate_synthetic_pair(&spec()).unwrap();
        let (h, w) = (12, 20);
        for y in 0..h {
            for x in 0..w {
                if s.valid[y * w + x] {
                    let d = s.gt.data()[y * w + x] as usize;
                    for c in 0..3 {
                        assert_eq!(
                            s.left.data()[(c * h + y) * w + x],
                            s.right.data()[(c * h + y) * w + (x - d)]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_left_border_matches_direct_scan() {
        let sp = spec();
        let s = generate_synthetic_pair(&sp).unwrap();
        let (h, w) = (12, 20);
        let mut expected_invalid = 0usize;
        for y in 0..h {
            for x in 0..w {
                if x < sp.disparity_at(x, y) {
                    expected_invalid += 1;
                }
            }
        }
        let actual_invalid = s.valid.iter().filter(|&&v| !v).count();
        assert_eq!(actual_invalid, expected_invalid);
        // The first background_disparity columns can never have a source.
        for y in 0..h {
            for x in 0..4 {
                assert!(!s.valid[y * w + x]);
            }
        }
    }

    #[test]
    fn topmost_block_wins() {
        let sp = SynthSpec {
            height: 4,
            width: 16,
            background_disparity: 2,
            blocks: vec![
                Block { x: 4, y: 0, w: 4, h: 4, disparity: 6 },
                Block { x: 4, y: 0, w: 8, h: 4, disparity: 9 },
            ],
            seed: 1,
        };
        assert_eq!(sp.disparity_at(5, 1), 6);
        assert_eq!(sp.disparity_at(10, 1), 9);
        assert_eq!(sp.disparity_at(1, 1), 2);
    }

    #[test]
    fn oversized_disparity_rejected() {
        let mut sp = spec();
        sp.blocks[0].disparity = 20;
        assert!(generate_synthetic_pair(&sp).is_err());
        let mut sp = spec();
        sp.background_disparity = 25;
        assert!(generate_synthetic_pair(&sp).is_err());
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let a = generate_synthetic_pair(&spec()).unwrap();
        let b = generate_synthetic_pair(&spec()).unwrap();
        assert_eq!(a.left, b.left);
        assert_eq!(a.right, b.right);
        assert_eq!(a.gt, b.gt);
    }
}
