//! Central-finite-difference verification of backward rules.
//!
//! Runs at 64-bit only: with step h = 1e-5 the truncation error of the
//! central difference sits well below the 1e-4 acceptance tolerance, which
//! 32-bit arithmetic cannot honor.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Worst-case comparison for one checked input tensor.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub label: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl GradCheckEntry {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Result of one [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passes(self.tolerance))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely instead of amplifying round-off noise.
pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Fixed pseudo-random reduction weights, kept away from zero so no output
/// element is masked.
fn reduction_weights(shape: &[usize]) -> Tensor<f64> {
    let mut state = 0x9E37_79B9_7F4A_7C15u64 ^ (shape.len() as u64);
    for &e in shape {
        state = state.wrapping_mul(0x100000001B3).wrapping_add(e as u64);
    }
    Tensor::from_fn(shape, |_| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        0.3 + ((state >> 33) as f64 / (1u64 << 31) as f64) // in [0.3, 1.3)
    })
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, Option<Tape<f64>>, Vec<Var>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let scalar = if tape.value(y).numel() == 1 {
        y
    } else {
        let w = reduction_weights(tape.value(y).shape());
        tape.inner(y, w)?
    };
    let v = tape.value(scalar).data()[0];
    Ok((v, Some(tape), vars))
}

/// Check the analytic gradient of `scalar_reduction(f(inputs))` against
/// central finite differences, element by element.
///
/// `f` must be a pure function of the tape inputs. Returns the worst relative
/// error per input; non-finite values anywhere fail with their location.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    labels: &[&str],
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    assert_eq!(inputs.len(), labels.len());
    // Analytic pass.
    let (value, tape, vars) = eval_scalar(&f, inputs)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            location: "gradient check forward value".into(),
        });
    }
    let mut tape = tape.expect("tape");
    let scalar = Var(tape.len() - 1);
    let grads = tape.backward(scalar)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut entries = Vec::with_capacity(inputs.len());
    for (i, (input, label)) in inputs.iter().zip(labels).enumerate() {
        let a = &analytic[i];
        if !a.is_finite() {
            return Err(Error::NonFinite {
                location: format!("analytic gradient of input `{label}`"),
            });
        }
        let mut worst = GradCheckEntry {
            label: (*label).to_string(),
            checked: input.numel(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for k in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let (fp, _, _) = eval_scalar(&f, &plus)?;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            let (fm, _, _) = eval_scalar(&f, &minus)?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("finite-difference probe of `{label}` element {k}"),
                });
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let err = rel_err(a.data()[k], numeric);
            if err > worst.max_rel_err {
                worst.max_rel_err = err;
                worst.worst_index = k;
                worst.analytic_at_worst = a.data()[k];
                worst.numeric_at_worst = numeric;
            }
        }
        entries.push(worst);
    }
    Ok(GradCheckReport { tolerance, entries })
}

/// Evaluate `f(inputs)` through the canonical scalar reduction; the same
/// quantity [`grad_check`] differentiates. Useful for external FD harnesses.
pub fn grad_check_value<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    eval_scalar(f, inputs).map(|(v, _, _)| v)
}

#[cfg(test)]
mod tests {
    use super::super::tape::Op;
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        // f(x) = x^2 at x = 3: analytic 6; the central difference of a
        // quadratic has zero truncation error.
        let x = Tensor::scalar(3.0);
        let report = grad_check(
            |tape, vars| tape.mul(vars[0], vars[0]),
            &[x],
            &["x"],
            1e-10,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        let e = &report.entries[0];
        assert!((e.analytic_at_worst - 6.0).abs() < 1e-9 || e.max_rel_err < 1e-10);
    }

    #[test]
    fn convolution_passes() {
        let mut state = 7u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 33) as f64 / (1u64 << 31) as f64 - 0.5
        };
        let x = Tensor::from_fn(&[1, 2, 5, 5], |_| next());
        let w = Tensor::from_fn(&[3, 2, 3, 3], |_| next());
        let b = Tensor::from_fn(&[3], |_| next());
        let report = grad_check(
            |tape, vars| tape.convolve(vars[0], vars[1], Some(vars[2]), 2, 1, 1),
            &[x, w, b],
            &["input", "kernel", "bias"],
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        // Forward scales by 2 but the recorded op claims a factor of 3, so
        // the replayed backward rule is wrong and the check must notice.
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let v = tape.value(vars[0]).map(|v| v * 2.0);
                Ok(tape.push_raw(
                    v,
                    Op::Scale {
                        x: vars[0],
                        factor: 3.0,
                    },
                ))
            },
            &[x],
            &["x"],
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let x = Tensor::scalar(1.0);
        let err = grad_check(
            |tape, _| Ok(tape.leaf(Tensor::scalar(f64::NAN))),
            &[x],
            &["x"],
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
