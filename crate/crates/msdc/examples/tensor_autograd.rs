//! The reverse-mode tensor kernel on its own: record operations on a tape,
//! run a backward pass, and verify a gradient against finite differences.
//!
//! ```bash
//! cargo run --release -p msdc --example tensor_autograd
//! ```

use msdc::tensor::{grad_check, Tape, Tensor};

fn main() -> msdc::Result<()> {
    // A tiny graph: y = relu(conv(x, w)), loss = sum(y * y).
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_fn(&[1, 1, 5, 5], |i| (i as f64 * 0.7).sin()));
    let w = tape.leaf(Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64 - 8.0) / 10.0));
    let y = tape.convolve(x, w, None, 2, 1, 1)?;
    let y = tape.relu(y);
    let sq = tape.mul(y, y)?;
    let loss = tape.sum(sq)?;
    println!("loss = {:.6}", tape.value(loss).data()[0]);

    let grads = tape.backward(loss)?;
    let gw = grads.get(w).expect("kernel gradient");
    println!("kernel gradient (first row): {:?}", &gw.data()[..3]);

    // The same computation under an elementwise finite-difference check.
    let report = grad_check(
        |tape, vars| {
            let y = tape.convolve(vars[0], vars[1], None, 2, 1, 1)?;
            let y = tape.relu(y);
            tape.mul(y, y)
        },
        &[
            Tensor::from_fn(&[1, 1, 5, 5], |i| (i as f64 * 0.7).sin()),
            Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64 - 8.0) / 10.0),
        ],
        &["input", "kernel"],
        1e-4,
    )?;
    for entry in &report.entries {
        println!(
            "grad check `{}`: max relative error {:.3e} over {} elements",
            entry.label, entry.max_rel_err, entry.checked
        );
    }
    assert!(report.passed());
    println!("analytic gradients agree with central differences");
    Ok(())
}
