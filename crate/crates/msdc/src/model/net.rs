//! The stereo network: siamese multi-scale 2D feature extraction and fusion,
//! cost-volume assembly, multi-scale residual 3D matching, and learned scale
//! recovery. Layers are descriptors carrying parameter indices; the tensors
//! themselves live in a [`ParamSet`].

use super::config::ModelConfig;
use super::params::{Bound, Init, ParamSet, ParamSpec, StatsSpec};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var, BN_EPS};

/// Whether a forward pass uses batch statistics (and updates the running
/// estimates) or frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train {
        /// Fold batch statistics into the running estimates. Disabled by the
        /// gradient-check harness, which needs a side-effect-free forward.
        update_running: bool,
    },
    Infer,
}

impl Phase {
    pub const TRAIN: Phase = Phase::Train { update_running: true };
}

#[derive(Clone, Copy, Debug)]
struct BnIds {
    gamma: usize,
    beta: usize,
    stats: usize,
}

/// Convolution layer descriptor (optionally batch-normalized and rectified).
#[derive(Clone, Debug)]
struct ConvLayer {
    w: usize,
    bn: Option<BnIds>,
    relu: bool,
    rank: usize,
    stride: usize,
    pad: usize,
}

/// Transposed-convolution layer descriptor (fixed exact-doubling geometry).
#[derive(Clone, Debug)]
struct TConvLayer {
    w: usize,
    bn: Option<BnIds>,
    relu: bool,
    rank: usize,
}

#[derive(Clone, Debug)]
struct DenseGroup {
    layers: Vec<ConvLayer>,
    transition: ConvLayer,
}

#[derive(Clone, Debug)]
struct DenseBlock {
    groups: Vec<DenseGroup>,
}

#[derive(Clone, Debug)]
struct Dsfe {
    stem: ConvLayer,
    blocks: Vec<DenseBlock>,
    downs: Vec<ConvLayer>,
}

#[derive(Clone, Debug)]
struct Msff {
    stem: ConvLayer,
    block: DenseBlock,
    reduce: ConvLayer,
}

#[derive(Clone, Debug)]
struct ResPair {
    first: ConvLayer,
    second: ConvLayer,
}

#[derive(Clone, Debug)]
struct Matcher {
    entry: ConvLayer,
    pairs: Vec<ResPair>,
    downs: Vec<ConvLayer>,
    ups: Vec<TConvLayer>,
    exit: ConvLayer,
}

#[derive(Clone, Debug)]
struct Recovery {
    up1: TConvLayer,
    up2: TConvLayer,
}

/// Registers parameter blueprints while the layer tree is being built.
struct Builder {
    specs: Vec<ParamSpec>,
    stats: Vec<StatsSpec>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            specs: Vec::new(),
            stats: Vec::new(),
        }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn bn(&mut self, name: &str, channels: usize) -> BnIds {
        let gamma = self.push(format!("{name}.bn.gamma"), vec![channels], Init::One);
        let beta = self.push(format!("{name}.bn.beta"), vec![channels], Init::Zero);
        self.stats.push(StatsSpec {
            name: format!("{name}.bn.stats"),
            channels,
        });
        BnIds {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        rank: usize,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bn: bool,
        relu: bool,
    ) -> ConvLayer {
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat(k).take(rank));
        let fan_in = cin * k.pow(rank as u32);
        let w = self.push(format!("{name}.weight"), shape, Init::HeNormal { fan_in });
        ConvLayer {
            w,
            bn: bn.then(|| self.bn(name, cout)),
            relu,
            rank,
            stride,
            pad,
        }
    }

    fn tconv(&mut self, name: &str, rank: usize, cin: usize, cout: usize, bn: bool, relu: bool) -> TConvLayer {
        let mut shape = vec![cin, cout];
        shape.extend(std::iter::repeat(3).take(rank));
        let fan_in = cin * 3usize.pow(rank as u32);
        let w = self.push(format!("{name}.weight"), shape, Init::HeNormal { fan_in });
        TConvLayer {
            w,
            bn: bn.then(|| self.bn(name, cout)),
            relu,
            rank,
        }
    }

    /// A group of densely connected 3x3 layers followed by a 1x1 transition
    /// back to the group's input width.
    fn dense_group(&mut self, name: &str, rank: usize, width: usize, growth: usize, depth: usize) -> DenseGroup {
        let layers = (0..depth)
            .map(|i| {
                self.conv(
                    &format!("{name}.layer{}", i + 1),
                    rank,
                    width + i * growth,
                    growth,
                    3,
                    1,
                    1,
                    true,
                    true,
                )
            })
            .collect();
        let transition = self.conv(
            &format!("{name}.transition"),
            rank,
            width + depth * growth,
            width,
            1,
            1,
            0,
            true,
            true,
        );
        DenseGroup { layers, transition }
    }

    fn dense_block(&mut self, name: &str, width: usize, cfg: &ModelConfig) -> DenseBlock {
        DenseBlock {
            groups: (0..cfg.dense_groups)
                .map(|g| self.dense_group(&format!("{name}.group{}", g + 1), 2, width, cfg.growth(), cfg.dense_block_depth))
                .collect(),
        }
    }
}

/// Full model output, staged.
pub struct ForwardOutput {
    /// Unary features of the left and right image, (batch, F, H/4, W/4).
    pub unary: (Var, Var),
    /// Concatenation cost volume, (batch, 2F, D/4, H/4, W/4).
    pub volume: Var,
    /// Regularized volume, same shape as `volume`.
    pub matched: Var,
    /// Recovered full-resolution matching cost, (batch, D, H, W).
    pub cost: Var,
    /// Regressed disparity, (batch, H, W), values in [0, D-1].
    pub disparity: Var,
}

/// The network: layer tree plus the parameter blueprints it was built from.
pub struct MsdcNet {
    config: ModelConfig,
    dsfe: Dsfe,
    msff: Msff,
    matcher: Matcher,
    recovery: Recovery,
    specs: Vec<ParamSpec>,
    stats_specs: Vec<StatsSpec>,
}

impl MsdcNet {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let f = config.base_channels;
        let mut b = Builder::new();

        // Different-scale feature extraction: 5x5 stride-2 stem, then a dense
        // block per scale with 5x5 stride-2 transitions between scales. The
        // single-scale variant keeps the same layers with unit strides.
        let scale_stride = if config.variant.multi_scale_2d() { 2 } else { 1 };
        let stem = b.conv("dsfe.stem", 2, 3, f, 5, 2, 2, true, true);
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for i in 0..3 {
            blocks.push(b.dense_block(&format!("dsfe.block{}", i + 1), f, config));
            if i < 2 {
                downs.push(b.conv(
                    &format!("dsfe.down{}", i + 1),
                    2,
                    f,
                    f,
                    5,
                    scale_stride,
                    2,
                    true,
                    true,
                ));
            }
        }
        let dsfe = Dsfe { stem, blocks, downs };

        // Multi-scale feature fusion: 128-filter 5x5 stride-2 subsampling of
        // the aggregated volume, a dense block, and a 3x3 reduction to F.
        let fusion = config.fusion_channels;
        let msff = Msff {
            stem: b.conv("msff.stem", 2, 3 * f, fusion, 5, 2, 2, true, true),
            block: b.dense_block("msff.block", fusion, config),
            reduce: b.conv("msff.reduce", 2, fusion, f, 3, 1, 1, true, true),
        };

        // 3D matcher. Entry reduces the 2F-channel cost volume to the module
        // width F; levels double channels at each stride-2 subsampling
        // (levels - 1 of them); the decoder halves channels back with
        // transposed convolutions and same-level additive skips.
        let levels = if config.variant.multi_scale_3d() {
            config.levels_3d
        } else {
            config.levels_3d // equal-depth single-scale stack
        };
        let entry = b.conv("matcher.entry", 3, 2 * f, f, 3, 1, 1, true, true);
        let mut pairs = Vec::new();
        let mut m_downs = Vec::new();
        let mut m_ups = Vec::new();
        for l in 0..levels {
            let ch = if config.variant.multi_scale_3d() { f << l } else { f };
            pairs.push(ResPair {
                first: b.conv(&format!("matcher.level{}.conv1", l + 1), 3, ch, ch, 3, 1, 1, true, true),
                second: b.conv(&format!("matcher.level{}.conv2", l + 1), 3, ch, ch, 3, 1, 1, true, false),
            });
        }
        if config.variant.multi_scale_3d() {
            for l in 0..levels - 1 {
                let ch = f << l;
                m_downs.push(b.conv(
                    &format!("matcher.down{}", l + 1),
                    3,
                    ch,
                    ch * 2,
                    3,
                    2,
                    1,
                    true,
                    true,
                ));
            }
            for l in (0..levels - 1).rev() {
                let ch = f << l;
                m_ups.push(b.tconv(&format!("matcher.up{}", l + 1), 3, ch * 2, ch, true, false));
            }
            m_ups.reverse(); // ups[l] restores level l
        }
        let exit = b.conv("matcher.exit", 3, f, 2 * f, 3, 1, 1, true, true);
        let matcher = Matcher {
            entry,
            pairs,
            downs: m_downs,
            ups: m_ups,
            exit,
        };

        // Scale recovery: two stride-2 transposed 3D convolutions take the
        // quarter-scale matched volume to a single-channel (D, H, W) cost.
        let recovery = Recovery {
            up1: b.tconv("recover.up1", 3, 2 * f, f, true, true),
            up2: b.tconv("recover.up2", 3, f, 1, false, false),
        };

        Ok(MsdcNet {
            config: config.clone(),
            dsfe,
            msff,
            matcher,
            recovery,
            specs: b.specs,
            stats_specs: b.stats,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn stats_specs(&self) -> &[StatsSpec] {
        &self.stats_specs
    }

    /// Allocate a freshly initialized parameter set for this network.
    pub fn init_params<E: Element>(&self, seed: u64) -> Result<ParamSet<E>> {
        ParamSet::initialize(&self.specs, &self.stats_specs, seed)
    }

    /// Exact count of scalar learnables this configuration induces.
    pub fn param_count(&self) -> usize {
        self.specs.iter().map(|s| s.numel()).sum()
    }

    fn apply_conv<E: Element>(
        &self,
        tape: &mut Tape<E>,
        params: &mut ParamSet<E>,
        bound: &Bound,
        layer: &ConvLayer,
        x: Var,
        phase: Phase,
    ) -> Result<Var> {
        let mut y = tape.convolve(x, bound.var(layer.w), None, layer.rank, layer.stride, layer.pad)?;
        if let Some(bn) = layer.bn {
            y = self.apply_bn(tape, params, bound, bn, y, phase)?;
        }
        if layer.relu {
            y = tape.relu(y);
        }
        Ok(y)
    }

    fn apply_tconv<E: Element>(
        &self,
        tape: &mut Tape<E>,
        params: &mut ParamSet<E>,
        bound: &Bound,
        layer: &TConvLayer,
        x: Var,
        phase: Phase,
    ) -> Result<Var> {
        let mut y = tape.transposed_convolve(x, bound.var(layer.w), layer.rank)?;
        if let Some(bn) = layer.bn {
            y = self.apply_bn(tape, params, bound, bn, y, phase)?;
        }
        if layer.relu {
            y = tape.relu(y);
        }
        Ok(y)
    }

    fn apply_bn<E: Element>(
        &self,
        tape: &mut Tape<E>,
        params: &mut ParamSet<E>,
        bound: &Bound,
        bn: BnIds,
        x: Var,
        phase: Phase,
    ) -> Result<Var> {
        let eps = E::from_f64(BN_EPS);
        let (gamma, beta) = (bound.var(bn.gamma), bound.var(bn.beta));
        match phase {
            Phase::Train { update_running } => {
                let stats = update_running.then(|| params.stats_mut(bn.stats));
                tape.batch_norm_train(x, gamma, beta, eps, stats)
            }
            Phase::Infer => tape.batch_norm_infer(x, gamma, beta, eps, params.stats_ref(bn.stats)),
        }
    }

    fn apply_group<E: Element>(
        &self,
        tape: &mut Tape<E>,
        params: &mut ParamSet<E>,
        bound: &Bound,
        group: &DenseGroup,
        x: Var,
        phase: Phase,
    ) -> Result<Var> {
        let mut feats = vec![x];
        for layer in &group.layers {
            let cat = if feats.len() == 1 {
                feats[0]
            } else {
                tape.concat(&feats, 1)?
            };
            feats.push(self.apply_conv(tape, params, bound, layer, cat, phase)?);
        }
        let cat = tape.concat(&feats, 1)?;
        self.apply_conv(tape, params, bound, &group.transition, cat, phase)
    }

    fn apply_block<E: Element>(
        &self,
        tape: &mut Tape<E>,
        params: &mut ParamSet<E>,
        bound: &Bound,
        block: &DenseBlock,
        mut x: Var,
        phase: Phase,
    ) -> Result<Var> {
        for group in &block.groups {
            x = self.apply_group(tape, params, bound, group, x, phase)?;
        }
        Ok(x)
    }

    /// Unary features of a single image: (batch, F, H/4, W/4).
    fn extract_one<E: Element>(
        &self,
        tape: &mut Tape<E>,
        params: &mut ParamSet<E>,
        bound: &Bound,
        image: Var,
        phase: Phase,
    ) -> Result<Var> {
        let multi = self.config.variant.multi_scale_2d();
        let mut x = self.apply_conv(tape, params, bound, &self.dsfe.stem, image, phase)?;
        let mut scale_feats = Vec::with_capacity(3);
        for (i, block) in self.dsfe.blocks.iter().enumerate() {
            x = self.apply_block(tape, params, bound, block, x, phase)?;
            scale_feats.push(x);
            if i < self.dsfe.downs.len() {
                x = self.apply_conv(tape, params, bound, &self.dsfe.downs[i], x, phase)?;
            }
        }
        // Resize the smaller scales back to half resolution and aggregate.
        let aggregated = if multi {
            let up_quarter = tape.upsample_bilinear(scale_feats[1], 2)?;
            let up_eighth = tape.upsample_bilinear(scale_feats[2], 4)?;
            tape.concat(&[scale_feats[0], up_quarter, up_eighth], 1)?
        } else {
            tape.concat(&scale_feats, 1)?
        };
        let x = self.apply_conv(tape, params, bound, &self.msff.stem, aggregated, phase)?;
        let x = self.apply_block(tape, params, bound, &self.msff.block, x, phase)?;
        self.apply_conv(tape, params, bound, &self.msff.reduce, x, phase)
    }

    /// Siamese unary features: both images through identical weights.
    pub fn extract_features<E: Element>(
        &self,
        tape: &mut Tape<E>,
        params: &mut ParamSet<E>,
        bound: &Bound,
        left: Var,
        right: Var,
        phase: Phase,
    ) -> Result<(Var, Var)> {
        self.config.validate_input_shape(tape.value(left).shape())?;
        if tape.value(left).shape() != tape.value(right).shape() {
            return Err(Error::shape(
                "stereo pair",
                tape.value(left).shape(),
                tape.value(right).shape(),
            ));
        }
        let lf = self.extract_one(tape, params, bound, left, phase)?;
        let rf = self.extract_one(tape, params, bound, right, phase)?;
        Ok((lf, rf))
    }

    /// Multi-scale residual 3D matching; shape-preserving.
    pub fn match_features<E: Element>(
        &self,
        tape: &mut Tape<E>,
        params: &mut ParamSet<E>,
        bound: &Bound,
        volume: Var,
        phase: Phase,
    ) -> Result<Var> {
        let shape = tape.value(volume).shape().to_vec();
        if self.config.variant.multi_scale_3d() {
            let need = 1usize << (self.config.levels_3d - 1);
            for &n in &shape[2..] {
                if n % need != 0 {
                    return Err(Error::invalid(format!(
                        "cost volume extent {n} must be divisible by {need} for a {}-level pyramid",
                        self.config.levels_3d
                    )));
                }
            }
        }
        let mut x = self.apply_conv(tape, params, bound, &self.matcher.entry, volume, phase)?;
        let mut skips = Vec::new();
        let levels = self.matcher.pairs.len();
        for (l, pair) in self.matcher.pairs.iter().enumerate() {
            let branch = self.apply_conv(tape, params, bound, &pair.first, x, phase)?;
            let branch = self.apply_conv(tape, params, bound, &pair.second, branch, phase)?;
            x = tape.add(branch, x)?;
            if self.config.variant.multi_scale_3d() && l + 1 < levels {
                skips.push(x);
                x = self.apply_conv(tape, params, bound, &self.matcher.downs[l], x, phase)?;
            }
        }
        if self.config.variant.multi_scale_3d() {
            for l in (0..levels - 1).rev() {
                let up = self.apply_tconv(tape, params, bound, &self.matcher.ups[l], x, phase)?;
                let joined = tape.add(up, skips[l])?;
                x = tape.relu(joined);
            }
        }
        let out = self.apply_conv(tape, params, bound, &self.matcher.exit, x, phase)?;
        debug_assert_eq!(tape.value(out).shape(), &shape[..]);
        Ok(out)
    }

    /// Two stride-2 transposed 3D convolutions (2F -> F -> 1) recover the
    /// full-resolution matching cost (batch, D, H, W).
    pub fn recover_scale<E: Element>(
        &self,
        tape: &mut Tape<E>,
        params: &mut ParamSet<E>,
        bound: &Bound,
        matched: Var,
        phase: Phase,
    ) -> Result<Var> {
        let x = self.apply_tconv(tape, params, bound, &self.recovery.up1, matched, phase)?;
        let x = self.apply_tconv(tape, params, bound, &self.recovery.up2, x, phase)?;
        // (batch, 1, D, H, W) -> (batch, D, H, W)
        let shape = tape.value(x).shape().to_vec();
        tape.reshape(x, &[shape[0], shape[2], shape[3], shape[4]])
    }

    /// The full pipeline: features, cost volume, matching, scale recovery,
    /// soft-argmin readout.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        params: &mut ParamSet<E>,
        bound: &Bound,
        left: Var,
        right: Var,
        phase: Phase,
    ) -> Result<ForwardOutput> {
        let (lf, rf) = self.extract_features(tape, params, bound, left, right, phase)?;
        let volume = build_cost_volume(tape, lf, rf, self.config.max_disparity)?;
        let matched = self.match_features(tape, params, bound, volume, phase)?;
        let cost = self.recover_scale(tape, params, bound, matched, phase)?;
        let disparity = soft_argmin(tape, cost)?;
        Ok(ForwardOutput {
            unary: (lf, rf),
            volume,
            matched,
            cost,
            disparity,
        })
    }

    /// One line per layer: name, kind, shape, parameter count.
    pub fn layer_summary(&self) -> Vec<String> {
        self.specs
            .iter()
            .map(|s| format!("{:<40} {:>12} {:>10}", s.name, format!("{:?}", s.shape), s.numel()))
            .collect()
    }
}

/// Quarter-resolution concatenation cost volume over D/4 disparity levels.
pub fn build_cost_volume<E: Element>(
    tape: &mut Tape<E>,
    left_feat: Var,
    right_feat: Var,
    max_disparity: usize,
) -> Result<Var> {
    if max_disparity == 0 || max_disparity % 4 != 0 {
        return Err(Error::invalid(format!(
            "max disparity must be a positive multiple of 4, got {max_disparity}"
        )));
    }
    tape.cost_volume(left_feat, right_feat, max_disparity / 4)
}

/// Soft-argmin readout: d_hat = sum_d d * softmax(-cost)_d along the
/// disparity axis of a (batch, D, H, W) cost tensor.
pub fn soft_argmin<E: Element>(tape: &mut Tape<E>, cost: Var) -> Result<Var> {
    let shape = tape.value(cost).shape();
    if shape.len() != 4 {
        return Err(Error::invalid(format!(
            "soft_argmin expects (batch, D, h, w) costs, got {:?}",
            shape
        )));
    }
    let d = shape[1];
    let neg = tape.neg(cost);
    let probs = tape.softmax_along(neg, 1)?;
    let ramp: Vec<E> = (0..d).map(|i| E::from_f64(i as f64)).collect();
    tape.weighted_sum_along(probs, 1, ramp)
}
