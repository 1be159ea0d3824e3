//! The stereo matching network and its staged operations.

mod config;
mod net;
mod params;

pub use config::{ModelConfig, Variant};
pub use net::{build_cost_volume, soft_argmin, ForwardOutput, MsdcNet, Phase};
pub use params::{Bound, Init, ParamSet, Parameter, ParamSpec, StatsSpec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{GradCheckEntry, GradCheckReport, Tape, Tensor, FD_STEP};

/// Exact number of scalar learnables a configuration induces.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    Ok(MsdcNet::new(config)?.param_count())
}

/// Reference parameter count of the original full-scale MSDC-Net, for
/// side-by-side reporting.
pub const REFERENCE_PARAM_COUNT: &str = "4.6M";

fn tiny_pair(seed: u64, h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let left = Tensor::from_fn(&[1, 3, h, w], |_| rng.random::<f64>());
    let right = Tensor::from_fn(&[1, 3, h, w], |_| rng.random::<f64>());
    // Two disparity plateaus plus an unlabeled left border.
    let gt = Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = (i / w % h, i % w);
        if x < 2 {
            0.0
        } else if (h / 4..3 * h / 4).contains(&y) && (w / 4..3 * w / 4).contains(&x) {
            5.0
        } else {
            2.0
        }
    });
    (left, right, gt)
}

fn loss_value(
    net: &MsdcNet,
    params: &mut ParamSet<f64>,
    left: &Tensor<f64>,
    right: &Tensor<f64>,
    gt: &Tensor<f64>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let l = tape.leaf(left.clone());
    let r = tape.leaf(right.clone());
    let out = net.forward(
        &mut tape,
        params,
        &bound,
        l,
        r,
        Phase::Train { update_running: false },
    )?;
    let loss = tape.smooth_l1(out.disparity, gt)?;
    Ok(tape.value(loss).data()[0])
}

/// Finite-difference check of the training loss gradient through the whole
/// pipeline on a 16x32 / D=8 / F=4 configuration (two 3D pyramid levels so
/// the tiny extents stay divisible).
///
/// Probes a seeded subset of elements in every parameter tensor and in both
/// input images; the analytic gradient comes from one backward pass.
pub fn end_to_end_grad_check(
    probes_per_tensor: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    end_to_end_grad_check_with_step(probes_per_tensor, tolerance, seed, FD_STEP)
}

/// [`end_to_end_grad_check`] with an explicit initial finite-difference step.
///
/// Depth matters here: each probe shifts every downstream activation, and any
/// rectifier whose input sits within the step of zero contributes a kink to
/// the difference quotient. Such nonsmoothness noise shrinks with the step
/// while a wrong backward rule does not, so a probe that misses at the given
/// step is retried at step/10 and step/100 and keeps its best agreement;
/// 64-bit round-off stays orders of magnitude below the tolerance throughout.
pub fn end_to_end_grad_check_with_step(
    probes_per_tensor: usize,
    tolerance: f64,
    seed: u64,
    step: f64,
) -> Result<GradCheckReport> {
    let config = ModelConfig::new(4, 8).with_levels_3d(2);
    let net = MsdcNet::new(&config)?;
    let mut params: ParamSet<f64> = net.init_params(seed)?;
    let (left, right, gt) = tiny_pair(seed ^ 0xD15EA5E, 16, 32);

    // Analytic pass.
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let l = tape.leaf(left.clone());
    let r = tape.leaf(right.clone());
    let out = net.forward(
        &mut tape,
        &mut params,
        &bound,
        l,
        r,
        Phase::Train { update_running: false },
    )?;
    let loss = tape.smooth_l1(out.disparity, &gt)?;
    let grads = tape.backward(loss)?;
    let analytic_inputs = [
        grads.get(l).cloned().unwrap_or_else(|| Tensor::zeros(left.shape())),
        grads.get(r).cloned().unwrap_or_else(|| Tensor::zeros(right.shape())),
    ];
    params.absorb_gradients(&grads, &bound)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0FF5E7);
    let mut entries = Vec::new();

    // Parameter probes.
    for i in 0..params.len() {
        let numel = params.params()[i].value.numel();
        let probes = probes_per_tensor.min(numel);
        let mut entry = GradCheckEntry {
            label: params.params()[i].name.clone(),
            checked: probes,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for _ in 0..probes {
            let k = rng.random_range(0..numel);
            let analytic = params.params()[i].grad.data()[k];
            let orig = params.params()[i].value.data()[k];
            let mut best: Option<(f64, f64)> = None; // (err, numeric)
            for attempt in 0..3 {
                let h = step / 10f64.powi(attempt);
                params.params_mut()[i].value.data_mut()[k] = orig + h;
                let fp = loss_value(&net, &mut params, &left, &right, &gt)?;
                params.params_mut()[i].value.data_mut()[k] = orig - h;
                let fm = loss_value(&net, &mut params, &left, &right, &gt)?;
                params.params_mut()[i].value.data_mut()[k] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
                if best.map_or(true, |(e, _)| err < e) {
                    best = Some((err, numeric));
                }
                if err < tolerance / 10.0 {
                    break;
                }
            }
            let (err, numeric) = best.expect("at least one attempt");
            if err > entry.max_rel_err {
                entry.max_rel_err = err;
                entry.worst_index = k;
                entry.analytic_at_worst = analytic;
                entry.numeric_at_worst = numeric;
            }
        }
        entries.push(entry);
    }

    // Input image probes.
    for which in 0..2 {
        let tensor = if which == 0 { &left } else { &right };
        let numel = tensor.numel();
        let probes = probes_per_tensor.min(numel);
        let mut entry = GradCheckEntry {
            label: if which == 0 { "input.left" } else { "input.right" }.to_string(),
            checked: probes,
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for _ in 0..probes {
            let k = rng.random_range(0..numel);
            let analytic = analytic_inputs[which].data()[k];
            let mut best: Option<(f64, f64)> = None;
            for attempt in 0..3 {
                let h = step / 10f64.powi(attempt);
                let eval = |delta: f64, params: &mut ParamSet<f64>| -> Result<f64> {
                    let mut perturbed = tensor.clone();
                    perturbed.data_mut()[k] += delta;
                    if which == 0 {
                        loss_value(&net, params, &perturbed, &right, &gt)
                    } else {
                        loss_value(&net, params, &left, &perturbed, &gt)
                    }
                };
                let fp = eval(h, &mut params)?;
                let fm = eval(-h, &mut params)?;
                let numeric = (fp - fm) / (2.0 * h);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
                if best.map_or(true, |(e, _)| err < e) {
                    best = Some((err, numeric));
                }
                if err < tolerance / 10.0 {
                    break;
                }
            }
            let (err, numeric) = best.expect("at least one attempt");
            if err > entry.max_rel_err {
                entry.max_rel_err = err;
                entry.worst_index = k;
                entry.analytic_at_worst = analytic;
                entry.numeric_at_worst = numeric;
            }
        }
        entries.push(entry);
    }

    Ok(GradCheckReport { tolerance, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 3, h, w], |_| rng.random::<f32>())
    }

    #[test]
    fn shape_contracts_64x128() {
        // F=32, D=32: unary (1,32,16,32); volume (1,64,8,16,32);
        // recovered (1,32,64,128); disparity (1,64,128) in [0,31].
        let config = ModelConfig::new(32, 32);
        let net = MsdcNet::new(&config).unwrap();
        let mut params: ParamSet<f32> = net.init_params(3).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let l = tape.leaf(image(1, 64, 128));
        let r = tape.leaf(image(2, 64, 128));
        let out = net
            .forward(&mut tape, &mut params, &bound, l, r, Phase::TRAIN)
            .unwrap();
        assert_eq!(tape.value(out.unary.0).shape(), &[1, 32, 16, 32]);
        assert_eq!(tape.value(out.volume).shape(), &[1, 64, 8, 16, 32]);
        assert_eq!(tape.value(out.matched).shape(), &[1, 64, 8, 16, 32]);
        assert_eq!(tape.value(out.cost).shape(), &[1, 32, 64, 128]);
        assert_eq!(tape.value(out.disparity).shape(), &[1, 64, 128]);
        for &v in tape.value(out.disparity).data() {
            assert!((0.0..=31.0).contains(&v), "disparity {v} out of range");
        }
    }

    #[test]
    fn siamese_identical_inputs_identical_features() {
        let config = ModelConfig::new(4, 8).with_levels_3d(2);
        let net = MsdcNet::new(&config).unwrap();
        let mut params: ParamSet<f32> = net.init_params(11).unwrap();
        let img = image(5, 16, 32);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let l = tape.leaf(img.clone());
        let r = tape.leaf(img);
        let (lf, rf) = net
            .extract_features(&mut tape, &mut params, &bound, l, r, Phase::TRAIN)
            .unwrap();
        assert_eq!(tape.value(lf), tape.value(rf));
    }

    #[test]
    fn indivisible_extent_rejected_with_divisor() {
        let config = ModelConfig::new(8, 32); // divisor 32
        let net = MsdcNet::new(&config).unwrap();
        let mut params: ParamSet<f32> = net.init_params(0).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let l = tape.leaf(image(1, 48, 64));
        let r = tape.leaf(image(2, 48, 64));
        let err = net
            .extract_features(&mut tape, &mut params, &bound, l, r, Phase::TRAIN)
            .unwrap_err();
        assert!(err.to_string().contains("divisible by 32"), "{err}");
    }

    #[test]
    fn all_variants_run_and_report_counts() {
        for variant in Variant::ALL {
            let config = ModelConfig::new(8, 32).with_variant(variant);
            let net = MsdcNet::new(&config).unwrap();
            assert!(net.param_count() > 0);
            let mut params: ParamSet<f32> = net.init_params(1).unwrap();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let l = tape.leaf(image(1, 64, 128));
            let r = tape.leaf(image(2, 64, 128));
            let out = net
                .forward(&mut tape, &mut params, &bound, l, r, Phase::TRAIN)
                .unwrap();
            assert_eq!(tape.value(out.disparity).shape(), &[1, 64, 128]);
        }
    }

    #[test]
    fn count_examples() {
        // A single 3x3 convolution, 1 -> 2 channels, with bias: 2*9 + 2 = 20.
        let specs = [
            ParamSpec {
                name: "conv.weight".into(),
                shape: vec![2, 1, 3, 3],
                init: Init::HeNormal { fan_in: 9 },
            },
            ParamSpec {
                name: "conv.bias".into(),
                shape: vec![2],
                init: Init::Zero,
            },
        ];
        let total: usize = specs.iter().map(|s| s.numel()).sum();
        assert_eq!(total, 20);

        // Counts depend only on the configuration, never on image size.
        let config = ModelConfig::new(8, 32);
        let c1 = count_params(&config).unwrap();
        let c2 = count_params(&config).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn residual_pair_identity_when_final_conv_zeroed() {
        // conv -> bn -> relu -> zeroed conv -> bn, added to the input: the
        // branch is BN(0) = 0 exactly, so the pair passes its trunk through
        // bit for bit.
        use crate::tensor::RunningStats;
        let mut tape = Tape::<f32>::new();
        let x_val = Tensor::from_fn(&[1, 4, 2, 4, 4], |i| (i as f32 * 0.37).sin());
        let x = tape.leaf(x_val.clone());
        let w1 = tape.leaf(Tensor::from_fn(&[4, 4, 3, 3, 3], |i| (i as f32 * 0.11).cos() * 0.1));
        let w2 = tape.leaf(Tensor::zeros(&[4, 4, 3, 3, 3]));
        let gamma = tape.leaf(Tensor::full(&[4], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[4]));
        let mut s1 = RunningStats::new(4);
        let mut s2 = RunningStats::new(4);
        let y = tape.convolve(x, w1, None, 3, 1, 1).unwrap();
        let y = tape
            .batch_norm_train(y, gamma, beta, 1e-5, Some(&mut s1))
            .unwrap();
        let y = tape.relu(y);
        let y = tape.convolve(y, w2, None, 3, 1, 1).unwrap();
        let y = tape
            .batch_norm_train(y, gamma, beta, 1e-5, Some(&mut s2))
            .unwrap();
        let out = tape.add(y, x).unwrap();
        assert_eq!(tape.value(out), &x_val);
    }

    #[test]
    fn soft_argmin_contracts() {
        // Uniform cost over D = 4: exactly (D-1)/2 everywhere.
        let mut tape = Tape::<f64>::new();
        let cost = tape.leaf(Tensor::full(&[1, 4, 2, 2], 0.7));
        let d = soft_argmin(&mut tape, cost).unwrap();
        for &v in tape.value(d).data() {
            assert_eq!(v, 1.5);
        }

        // Near-one-hot at index 2 with margin 40: within 1e-6 of 2.
        let mut tape = Tape::<f64>::new();
        let c = Tensor::from_fn(&[1, 4, 1, 1], |i| if i == 2 { -20.0 } else { 20.0 });
        let cost = tape.leaf(c);
        let d = soft_argmin(&mut tape, cost).unwrap();
        assert!((tape.value(d).data()[0] - 2.0).abs() < 1e-6);

        // D = 2, c = [0, -ln 3]: probabilities [0.25, 0.75], expectation 0.75.
        let mut tape = Tape::<f64>::new();
        let cost = tape.leaf(Tensor::new(&[1, 2, 1, 1], vec![0.0, -(3.0f64.ln())]).unwrap());
        let d = soft_argmin(&mut tape, cost).unwrap();
        assert!((tape.value(d).data()[0] - 0.75).abs() < 1e-12);

        // Constant shift of every cost leaves the readout unchanged (1e-9).
        let mut tape = Tape::<f64>::new();
        let base = Tensor::from_fn(&[1, 6, 3, 2], |i| ((i * 29) % 13) as f64 * 0.21 - 1.0);
        let shifted = base.map(|v| v + 123.456);
        let c0 = tape.leaf(base);
        let c1 = tape.leaf(shifted);
        let d0 = soft_argmin(&mut tape, c0).unwrap();
        let d1 = soft_argmin(&mut tape, c1).unwrap();
        for (a, b) in tape.value(d0).data().iter().zip(tape.value(d1).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cost_volume_d_not_multiple_of_four_rejected() {
        let mut tape = Tape::<f32>::new();
        let l = tape.leaf(Tensor::zeros(&[1, 2, 4, 8]));
        let r = tape.leaf(Tensor::zeros(&[1, 2, 4, 8]));
        assert!(build_cost_volume(&mut tape, l, r, 30).is_err());
        assert!(build_cost_volume(&mut tape, l, r, 32).is_ok());
    }
}
