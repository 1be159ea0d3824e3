use crate::error::{Error, Result};

/// Which parts of the architecture run multi-scale (the ablation switch).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Multi-scale 2D fusion and multi-scale residual 3D matching.
    Full,
    /// Single-scale 2D feature extraction, multi-scale 3D matching.
    SingleScale2d,
    /// Multi-scale 2D feature extraction, single-scale 3D matching.
    SingleScale3d,
    /// Single-scale everywhere.
    SingleScaleBoth,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "full" => Ok(Variant::Full),
            "2d" | "single_scale_2d" => Ok(Variant::SingleScale2d),
            "3d" | "single_scale_3d" => Ok(Variant::SingleScale3d),
            "both" | "single_scale_both" => Ok(Variant::SingleScaleBoth),
            other => Err(Error::invalid(format!(
                "unknown variant `{other}` (expected full, 2d, 3d, or both)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SingleScale2d => "2d",
            Variant::SingleScale3d => "3d",
            Variant::SingleScaleBoth => "both",
        }
    }

    pub fn multi_scale_2d(&self) -> bool {
        matches!(self, Variant::Full | Variant::SingleScale3d)
    }

    pub fn multi_scale_3d(&self) -> bool {
        matches!(self, Variant::Full | Variant::SingleScale2d)
    }

    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::SingleScale2d,
        Variant::SingleScale3d,
        Variant::SingleScaleBoth,
    ];
}

/// Architecture hyperparameters.
///
/// Defaults reproduce the reference scale: 32 base channels, 192 disparities,
/// 16-layer dense blocks as four groups of four, 128 fusion channels
/// (4 x base), and a 4-level 3D pyramid (three stride-2 subsamplings with
/// channel doubling).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Base feature count F.
    pub base_channels: usize,
    /// Maximum disparity D; must be a multiple of 4.
    pub max_disparity: usize,
    /// Densely connected 3x3 layers per group.
    pub dense_block_depth: usize,
    /// Groups per dense block.
    pub dense_groups: usize,
    /// Width of the fusion dense block.
    pub fusion_channels: usize,
    /// Pyramid levels in the 3D matcher (levels - 1 subsamplings).
    pub levels_3d: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(32, 192)
    }
}

impl ModelConfig {
    pub fn new(base_channels: usize, max_disparity: usize) -> Self {
        ModelConfig {
            base_channels,
            max_disparity,
            dense_block_depth: 4,
            dense_groups: 4,
            fusion_channels: 4 * base_channels,
            levels_3d: 4,
            variant: Variant::Full,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_levels_3d(mut self, levels: usize) -> Self {
        self.levels_3d = levels;
        self
    }

    /// Dense-layer growth rate (F / 2).
    pub fn growth(&self) -> usize {
        self.base_channels / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::invalid(format!(
                "base_channels must be even and >= 2, got {}",
                self.base_channels
            )));
        }
        if self.max_disparity == 0 || self.max_disparity % 4 != 0 {
            return Err(Error::invalid(format!(
                "max_disparity must be a positive multiple of 4, got {}",
                self.max_disparity
            )));
        }
        if self.dense_block_depth == 0 || self.dense_groups == 0 {
            return Err(Error::invalid("dense block depth/groups must be positive"));
        }
        if self.fusion_channels == 0 {
            return Err(Error::invalid("fusion_channels must be positive"));
        }
        if self.levels_3d == 0 {
            return Err(Error::invalid("levels_3d must be positive"));
        }
        if self.variant.multi_scale_3d() {
            let need = 1usize << (self.levels_3d - 1);
            if (self.max_disparity / 4) % need != 0 {
                return Err(Error::invalid(format!(
                    "max_disparity / 4 = {} must be divisible by {} for a {}-level 3D pyramid",
                    self.max_disparity / 4,
                    need,
                    self.levels_3d
                )));
            }
        }
        Ok(())
    }

    /// Required divisor of the input height and width.
    pub fn spatial_divisor(&self) -> usize {
        let two_d = if self.variant.multi_scale_2d() { 8 } else { 4 };
        let three_d = if self.variant.multi_scale_3d() {
            4 << (self.levels_3d - 1)
        } else {
            4
        };
        two_d.max(three_d)
    }

    /// Check an input image shape (batch, 3, h, w) against the divisibility
    /// requirements, naming the required divisor on failure.
    pub fn validate_input_shape(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::invalid(format!(
                "expected image shape (batch, 3, h, w), got {:?}",
                shape
            )));
        }
        let div = self.spatial_divisor();
        for (name, n) in [("height", shape[2]), ("width", shape[3])] {
            if n % div != 0 {
                return Err(Error::invalid(format!(
                    "input {name} {n} must be divisible by {div}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matches_reference_scale() {
        let c = ModelConfig::default();
        assert_eq!(c.base_channels, 32);
        assert_eq!(c.max_disparity, 192);
        assert_eq!(c.fusion_channels, 128);
        assert_eq!(c.dense_groups * c.dense_block_depth, 16);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn disparity_must_be_multiple_of_four() {
        let mut c = ModelConfig::new(8, 30);
        assert!(c.validate().is_err());
        c.max_disparity = 32;
        c.levels_3d = 4;
        assert!(c.validate().is_ok()); // 32/4 = 8 divisible by 2^3
        c.max_disparity = 16;
        assert!(c.validate().is_err()); // 16/4 = 4 not divisible by 8
    }

    #[test]
    fn spatial_divisor_by_variant() {
        let c = ModelConfig::new(8, 32); // levels 4 -> 3 subsamplings below quarter scale
        assert_eq!(c.spatial_divisor(), 32);
        let c = c.with_variant(Variant::SingleScale3d);
        assert_eq!(c.spatial_divisor(), 8);
        let c = c.with_variant(Variant::SingleScaleBoth);
        assert_eq!(c.spatial_divisor(), 4);
    }
}
