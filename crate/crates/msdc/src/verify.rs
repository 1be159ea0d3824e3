//! The gradient-check verification suite: every differentiable operation the
//! network uses, checked element-by-element against central finite
//! differences at 64-bit, plus the end-to-end loss-through-forward check.

use crate::error::Result;
use crate::model::{end_to_end_grad_check_with_step, soft_argmin};
use crate::tensor::{grad_check, RunningStats, Tensor};

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl SuiteEntry {
    fn from_report(name: &str, report: &crate::tensor::GradCheckReport) -> Self {
        SuiteEntry {
            name: name.to_string(),
            max_rel_err: report.max_rel_err(),
            tolerance: report.tolerance,
            passed: report.passed(),
        }
    }
}

/// Deterministic filler kept away from rectifier kinks (|v| >= 0.1).
fn kink_safe(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
    Tensor::from_fn(shape, |_| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let u = (state >> 33) as f64 / (1u64 << 31) as f64; // [0, 1)
        let sign = if state & 1 == 0 { 1.0 } else { -1.0 };
        sign * (0.1 + 0.9 * u)
    })
}

/// Per-operation gradient checks on randomized small tensors.
pub fn op_gradient_suite(tolerance: f64) -> Result<Vec<SuiteEntry>> {
    let mut entries = Vec::new();
    let mut push = |name: &str, report: crate::tensor::GradCheckReport| {
        entries.push(SuiteEntry::from_report(name, &report));
    };

    push(
        "convolve 2d",
        grad_check(
            |t, v| t.convolve(v[0], v[1], None, 2, 2, 1),
            &[kink_safe(&[2, 2, 6, 5], 1), kink_safe(&[3, 2, 3, 3], 2)],
            &["input", "kernel"],
            tolerance,
        )?,
    );
    push(
        "convolve 2d with bias",
        grad_check(
            |t, v| t.convolve(v[0], v[1], Some(v[2]), 2, 1, 2),
            &[
                kink_safe(&[1, 2, 5, 5], 3),
                kink_safe(&[2, 2, 5, 5], 4),
                kink_safe(&[2], 5),
            ],
            &["input", "kernel", "bias"],
            tolerance,
        )?,
    );
    push(
        "convolve 3d",
        grad_check(
            |t, v| t.convolve(v[0], v[1], None, 3, 1, 1),
            &[kink_safe(&[1, 2, 3, 4, 4], 6), kink_safe(&[2, 2, 3, 3, 3], 7)],
            &["input", "kernel"],
            tolerance,
        )?,
    );
    push(
        "transposed convolve 2d",
        grad_check(
            |t, v| t.transposed_convolve(v[0], v[1], 2),
            &[kink_safe(&[1, 3, 3, 4], 8), kink_safe(&[3, 2, 3, 3], 9)],
            &["input", "kernel"],
            tolerance,
        )?,
    );
    push(
        "transposed convolve 3d",
        grad_check(
            |t, v| t.transposed_convolve(v[0], v[1], 3),
            &[kink_safe(&[1, 2, 2, 3, 3], 10), kink_safe(&[2, 2, 3, 3, 3], 11)],
            &["input", "kernel"],
            tolerance,
        )?,
    );
    push(
        "batch norm (train)",
        grad_check(
            |t, v| {
                let mut stats = RunningStats::new(3);
                t.batch_norm_train(v[0], v[1], v[2], 1e-5, Some(&mut stats))
            },
            &[
                kink_safe(&[2, 3, 4, 3], 12),
                kink_safe(&[3], 13),
                kink_safe(&[3], 14),
            ],
            &["input", "gamma", "beta"],
            tolerance,
        )?,
    );
    push(
        "batch norm (infer)",
        grad_check(
            |t, v| {
                let stats = RunningStats {
                    mean: vec![0.2, -0.4],
                    var: vec![1.3, 0.6],
                };
                t.batch_norm_infer(v[0], v[1], v[2], 1e-5, &stats)
            },
            &[
                kink_safe(&[2, 2, 3, 3], 15),
                kink_safe(&[2], 16),
                kink_safe(&[2], 17),
            ],
            &["input", "gamma", "beta"],
            tolerance,
        )?,
    );
    push(
        "relu",
        grad_check(
            |t, v| Ok(t.relu(v[0])),
            &[kink_safe(&[3, 4, 5], 18)],
            &["input"],
            tolerance,
        )?,
    );
    push(
        "softmax along axis",
        grad_check(
            |t, v| t.softmax_along(v[0], 1),
            &[kink_safe(&[2, 6, 3], 19)],
            &["input"],
            tolerance,
        )?,
    );
    push(
        "concat",
        grad_check(
            |t, v| t.concat(&[v[0], v[1], v[0]], 1),
            &[kink_safe(&[2, 2, 3], 20), kink_safe(&[2, 4, 3], 21)],
            &["a", "b"],
            tolerance,
        )?,
    );
    push(
        "bilinear upsample",
        grad_check(
            |t, v| t.upsample_bilinear(v[0], 2),
            &[kink_safe(&[1, 2, 3, 4], 22)],
            &["input"],
            tolerance,
        )?,
    );
    push(
        "cost volume",
        grad_check(
            |t, v| t.cost_volume(v[0], v[1], 3),
            &[kink_safe(&[1, 2, 3, 6], 23), kink_safe(&[1, 2, 3, 6], 24)],
            &["left", "right"],
            tolerance,
        )?,
    );
    push(
        "soft argmin",
        grad_check(
            |t, v| soft_argmin(t, v[0]),
            &[kink_safe(&[1, 5, 3, 4], 25)],
            &["cost"],
            tolerance,
        )?,
    );
    // Residuals on both sides of the 3 px critical point, none at it.
    let gt = Tensor::new(
        &[2, 4],
        vec![5.0, 8.0, 0.0, 6.0, 12.0, 3.5, 9.0, 0.0],
    )?;
    let pred0: Vec<f64> = vec![4.5, 11.2, 7.0, 8.9, 7.8, 3.55, 9.01, 1.0];
    push(
        "smooth l1 loss",
        grad_check(
            |t, v| t.smooth_l1(v[0], &gt),
            &[Tensor::new(&[2, 4], pred0)?],
            &["pred"],
            tolerance,
        )?,
    );
    Ok(entries)
}

/// The complete verification suite: per-operation checks at `tolerance` and
/// the end-to-end loss-through-forward check at 10x that.
pub fn full_gradient_suite(tolerance: f64) -> Result<Vec<SuiteEntry>> {
    let mut entries = op_gradient_suite(tolerance)?;
    let e2e = end_to_end_grad_check_with_step(3, tolerance * 10.0, 17, 1e-6)?;
    let worst = e2e
        .entries
        .iter()
        .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap());
    entries.push(SuiteEntry {
        name: "end-to-end loss gradient".into(),
        max_rel_err: worst.map_or(0.0, |e| e.max_rel_err),
        tolerance: e2e.tolerance,
        passed: e2e.passed(),
    });
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes_at_default_tolerance() {
        let entries = op_gradient_suite(1e-4).unwrap();
        assert_eq!(entries.len(), 14);
        for e in &entries {
            assert!(e.passed, "{}: {:.3e}", e.name, e.max_rel_err);
        }
    }
}
