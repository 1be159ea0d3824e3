//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding the forward value plus the
//! information its backward rule needs. The tape order is topological by
//! construction, so `backward` is a single reverse sweep with gradient
//! accumulation at fan-out points (shared parameters, skip connections).

use super::conv::{
    conv_backward, conv_forward, conv_transpose_backward, conv_transpose_forward, ConvGeom,
};
use super::ops;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Batch-norm epsilon (variance floor).
pub const BN_EPS: f64 = 1e-5;
/// Exponential-moving-average weight of the current batch statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Per-layer running mean/variance used by inference-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

impl<E: Element> RunningStats<E> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![E::zero(); channels],
            var: vec![E::one(); channels],
        }
    }

    fn update(&mut self, batch_mean: &[E], batch_var: &[E], momentum: E) {
        let keep = E::one() - momentum;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = keep * *r + momentum * b;
        }
    }
}

/// Which statistics batch norm consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnPhase {
    /// Normalize by the current batch statistics.
    Train,
    /// Normalize by stored running statistics.
    Infer,
}

pub(crate) enum Op<E: Element> {
    Leaf,
    Relu {
        x: Var,
    },
    Scale {
        x: Var,
        factor: E,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Conv {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        geom: ConvGeom,
        out_pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        phase: BnPhase,
        mean: Vec<E>,
        inv_std: Vec<E>,
    },
    Upsample2d {
        x: Var,
        factor: usize,
    },
    CostVolume {
        left: Var,
        right: Var,
        levels: usize,
    },
    WeightedSum {
        x: Var,
        axis: usize,
        weights: Vec<E>,
    },
    Inner {
        x: Var,
        weights: Tensor<E>,
    },
    SmoothL1 {
        pred: Var,
        target: Tensor<E>,
        inv_n: E,
    },
    Reshape {
        x: Var,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the root with respect to `v`, if `v` influenced the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// The recording tape. All operations live here as methods.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[cfg(test)]
    pub(crate) fn push_raw(&mut self, value: Tensor<E>, op: Op<E>) -> Var {
        self.push(value, op)
    }

    /// Insert an input or parameter value.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu_forward(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn scale(&mut self, x: Var, factor: E) -> Var {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale { x, factor })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -E::one())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "mul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let y = Tensor::from_fn(self.value(a).shape(), |i| {
            self.value(a).data()[i] * self.value(b).data()[i]
        });
        Ok(self.push(y, Op::Mul { a, b }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<E>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_forward(&tensors, axis)?;
        Ok(self.push(
            y,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    pub fn softmax_along(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::softmax_forward(self.value(x), axis)?;
        Ok(self.push(y, Op::Softmax { x, axis }))
    }

    /// Strided cross-correlation with optional bias.
    pub fn convolve(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        spatial_rank: usize,
        stride: usize,
        zero_pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(spatial_rank, stride, zero_pad)?;
        let y = conv_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        Ok(self.push(y, Op::Conv { x, w, bias, geom }))
    }

    /// Transposed convolution with the fixed exact-doubling configuration
    /// (kernel 3, stride 2, pad 1, output pad 1).
    pub fn transposed_convolve(&mut self, x: Var, w: Var, spatial_rank: usize) -> Result<Var> {
        let geom = ConvGeom::new(spatial_rank, 2, 1)?;
        let y = conv_transpose_forward(self.value(x), self.value(w), geom, 1)?;
        Ok(self.push(
            y,
            Op::ConvTranspose {
                x,
                w,
                geom,
                out_pad: 1,
            },
        ))
    }

    fn check_bn_args(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let xs = self.value(x).shape();
        if xs.len() < 3 {
            return Err(Error::invalid(format!(
                "batch norm expects (batch, channels, spatial...), got {:?}",
                xs
            )));
        }
        if xs[0] == 0 {
            return Err(Error::invalid("batch norm over a zero batch"));
        }
        let c = xs[1];
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                "batch norm gamma/beta vs channels",
                self.value(gamma).shape(),
                &[c],
            ));
        }
        Ok(c)
    }

    /// Training-mode batch norm. Normalizes by batch statistics; when
    /// `running` is given, folds them into the running estimates
    /// (momentum [`BN_MOMENTUM`]).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: E,
        running: Option<&mut RunningStats<E>>,
    ) -> Result<Var> {
        self.check_bn_args(x, gamma, beta)?;
        let (mean, var) = ops::batch_stats(self.value(x));
        if let Some(stats) = running {
            stats.update(&mean, &var, E::from_f64(BN_MOMENTUM));
        }
        let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let y = ops::bn_apply(self.value(x), &mean, &inv_std, self.value(gamma), self.value(beta));
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                phase: BnPhase::Train,
                mean,
                inv_std,
            },
        ))
    }

    /// Inference-mode batch norm using stored running statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: E,
        running: &RunningStats<E>,
    ) -> Result<Var> {
        let c = self.check_bn_args(x, gamma, beta)?;
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::invalid(format!(
                "running stats length {} vs {} channels",
                running.mean.len(),
                c
            )));
        }
        let inv_std: Vec<E> = running
            .var
            .iter()
            .map(|&v| E::one() / (v + eps).sqrt())
            .collect();
        let y = ops::bn_apply(
            self.value(x),
            &running.mean,
            &inv_std,
            self.value(gamma),
            self.value(beta),
        );
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                phase: BnPhase::Infer,
                mean: running.mean.clone(),
                inv_std,
            },
        ))
    }

    /// Bilinear upsampling of (batch, channels, h, w) by an integer factor.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = ops::upsample2d_forward(self.value(x), factor)?;
        Ok(self.push(y, Op::Upsample2d { x, factor }))
    }

    /// Concatenation cost volume over `levels` disparity shifts.
    pub fn cost_volume(&mut self, left: Var, right: Var, levels: usize) -> Result<Var> {
        let y = ops::cost_volume_forward(self.value(left), self.value(right), levels)?;
        Ok(self.push(y, Op::CostVolume { left, right, levels }))
    }

    /// Fixed weighted reduction along `axis`.
    pub fn weighted_sum_along(&mut self, x: Var, axis: usize, weights: Vec<E>) -> Result<Var> {
        let y = ops::weighted_sum_axis_forward(self.value(x), axis, &weights)?;
        Ok(self.push(y, Op::WeightedSum { x, axis, weights }))
    }

    /// Scalar inner product with a fixed tensor (the gradient-check reduction).
    pub fn inner(&mut self, x: Var, weights: Tensor<E>) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(Error::shape("inner", self.value(x).shape(), weights.shape()));
        }
        let mut acc = E::zero();
        for (&a, &b) in self.value(x).data().iter().zip(weights.data()) {
            acc = acc + a * b;
        }
        Ok(self.push(Tensor::scalar(acc), Op::Inner { x, weights }))
    }

    /// Plain sum of all elements.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ones = Tensor::full(self.value(x).shape(), E::one());
        self.inner(x, ones)
    }

    /// Masked mean smooth-L1 loss against `target`; pixels with target 0 are
    /// unlabeled and contribute neither value nor gradient.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<E>) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::shape(
                "smooth_l1 pred vs target",
                self.value(pred).shape(),
                target.shape(),
            ));
        }
        let n = target.data().iter().filter(|&&t| t != E::zero()).count();
        if n == 0 {
            return Err(Error::NoValidPixels);
        }
        let inv_n = E::one() / E::from_f64(n as f64);
        let mut acc = E::zero();
        for (&t, &p) in target.data().iter().zip(self.value(pred).data()) {
            if t != E::zero() {
                acc = acc + ops::smooth_l1_value(t - p);
            }
        }
        let loss = Tensor::scalar(acc * inv_n);
        Ok(self.push(
            loss,
            Op::SmoothL1 {
                pred,
                target: target.clone(),
                inv_n,
            },
        ))
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }))
    }

    /// Reverse sweep from a scalar root; returns gradients for every node
    /// that influenced it (interior gradients are dropped as they are
    /// consumed, leaves keep theirs).
    pub fn backward(&mut self, root: Var) -> Result<Gradients<E>> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), E::one()));

        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let mut out: Vec<(Var, Tensor<E>)> = Vec::with_capacity(2);
            match &self.nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Relu { x } => {
                    out.push((*x, ops::relu_backward(&self.nodes[x.0].value, &g)));
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    out.push((*x, g.map(|v| v * f)));
                }
                Op::Add { a, b } => {
                    out.push((*a, g.clone()));
                    out.push((*b, g));
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = Tensor::from_fn(g.shape(), |k| g.data()[k] * self.nodes[b.0].value.data()[k]);
                    let db = Tensor::from_fn(g.shape(), |k| g.data()[k] * self.nodes[a.0].value.data()[k]);
                    out.push((a, da));
                    out.push((b, db));
                }
                Op::Concat { xs, axis } => {
                    let shapes: Vec<Vec<usize>> = xs
                        .iter()
                        .map(|v| self.nodes[v.0].value.shape().to_vec())
                        .collect();
                    let parts = ops::concat_backward(&shapes, *axis, &g);
                    for (&v, part) in xs.iter().zip(parts) {
                        out.push((v, part));
                    }
                }
                Op::Softmax { x, axis } => {
                    out.push((*x, ops::softmax_backward(&self.nodes[i].value, *axis, &g)));
                }
                Op::Conv { x, w, bias, geom } => {
                    let (dx, dw, db) = conv_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        *geom,
                        &g,
                        bias.is_some(),
                    )?;
                    out.push((*x, dx));
                    out.push((*w, dw));
                    if let (Some(b), Some(db)) = (bias, db) {
                        out.push((*b, db));
                    }
                }
                Op::ConvTranspose { x, w, geom, out_pad } => {
                    let (dx, dw) = conv_transpose_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        *geom,
                        *out_pad,
                        &g,
                    )?;
                    out.push((*x, dx));
                    out.push((*w, dw));
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    phase,
                    mean,
                    inv_std,
                } => {
                    let (dx, dgamma, dbeta) = match phase {
                        BnPhase::Train => ops::bn_train_backward(
                            &self.nodes[x.0].value,
                            &self.nodes[gamma.0].value,
                            mean,
                            inv_std,
                            &g,
                        ),
                        BnPhase::Infer => ops::bn_infer_backward(
                            &self.nodes[x.0].value,
                            &self.nodes[gamma.0].value,
                            mean,
                            inv_std,
                            &g,
                        ),
                    };
                    out.push((*x, dx));
                    out.push((*gamma, dgamma));
                    out.push((*beta, dbeta));
                }
                Op::Upsample2d { x, factor } => {
                    let dx = ops::upsample2d_backward(self.nodes[x.0].value.shape(), *factor, &g);
                    out.push((*x, dx));
                }
                Op::CostVolume { left, right, levels } => {
                    let (dl, dr) = ops::cost_volume_backward(
                        self.nodes[left.0].value.shape(),
                        *levels,
                        &g,
                    );
                    out.push((*left, dl));
                    out.push((*right, dr));
                }
                Op::WeightedSum { x, axis, weights } => {
                    let dx = ops::weighted_sum_axis_backward(
                        self.nodes[x.0].value.shape(),
                        *axis,
                        weights,
                        &g,
                    );
                    out.push((*x, dx));
                }
                Op::Inner { x, weights } => {
                    let g0 = g.data()[0];
                    out.push((*x, weights.map(|w| w * g0)));
                }
                Op::SmoothL1 { pred, target, inv_n } => {
                    let g0 = g.data()[0];
                    let scale = g0 * *inv_n;
                    let p = &self.nodes[pred.0].value;
                    let dpred = Tensor::from_fn(target.shape(), |k| {
                        let t = target.data()[k];
                        if t == E::zero() {
                            E::zero()
                        } else {
                            // d/dpred S(t - p) = -S'(t - p)
                            -ops::smooth_l1_slope(t - p.data()[k]) * scale
                        }
                    });
                    out.push((*pred, dpred));
                }
                Op::Reshape { x } => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    out.push((*x, g.reshape(&shape)?));
                }
            }
            for (v, contrib) in out {
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_through_shared_leaf_accumulates() {
        // loss = sum(x + x) => dloss/dx = 2.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn mul_backward_product_rule() {
        // loss = sum(x * x) => grad = 2x.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![3.0, -4.0]).unwrap());
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0, -8.0]);
    }

    #[test]
    fn softmax_slices_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 7, 2], |i| ((i * 37) % 11) as f64 * 0.3 - 1.0));
        let y = tape.softmax_along(x, 1).unwrap();
        let v = tape.value(y);
        for o in 0..3 {
            for i in 0..2 {
                let s: f64 = (0..7).map(|d| v.at(&[o, d, i])).sum();
                assert!((s - 1.0).abs() < 1e-6);
                for d in 0..7 {
                    let p = v.at(&[o, d, i]);
                    assert!(p > 0.0 && p <= 1.0);
                }
            }
        }
    }

    #[test]
    fn bn_running_stats_ema() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let gamma = tape.leaf(Tensor::scalar(1.0));
        let beta = tape.leaf(Tensor::scalar(0.0));
        let mut stats = RunningStats::new(1);
        tape.batch_norm_train(x, gamma, beta, 1e-5, Some(&mut stats)).unwrap();
        // batch mean 2.5, biased var 1.25; EMA from (0, 1) with momentum 0.1.
        assert!((stats.mean[0] - 0.25).abs() < 1e-12);
        assert!((stats.var[0] - (0.9 + 0.125)).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_hand_example() {
        // gt = [4, 0], pred = [6, 99]: only pixel 0 labeled, x = -2, S = 4/3.
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::new(&[2], vec![6.0, 99.0]).unwrap());
        let target = Tensor::new(&[2], vec![4.0, 0.0]).unwrap();
        let loss = tape.smooth_l1(pred, &target).unwrap();
        assert!((tape.value(loss).data()[0] - 4.0 / 3.0).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        let d = grads.get(pred).unwrap();
        // dL/dpred0 = -S'(-2) = -(2/3)(-2) = 4/3; unlabeled pixel gets 0.
        assert!((d.data()[0] - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(d.data()[1], 0.0);
    }

    #[test]
    fn smooth_l1_all_invalid_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let target = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            tape.smooth_l1(pred, &target),
            Err(Error::NoValidPixels)
        ));
    }

    #[test]
    fn smooth_l1_symmetric_in_residual_sign() {
        let gt = Tensor::new(&[4], vec![5.0, 7.0, 2.0, 9.0]).unwrap();
        let r = [0.5, 2.0, 3.5, 1.0];
        let loss_of = |pred: Vec<f64>| {
            let mut tape = Tape::<f64>::new();
            let p = tape.leaf(Tensor::new(&[4], pred).unwrap());
            let l = tape.smooth_l1(p, &gt).unwrap();
            tape.value(l).data()[0]
        };
        let plus: Vec<f64> = gt.data().iter().zip(&r).map(|(g, d)| g + d).collect();
        let minus: Vec<f64> = gt.data().iter().zip(&r).map(|(g, d)| g - d).collect();
        assert!((loss_of(plus) - loss_of(minus)).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }
}
