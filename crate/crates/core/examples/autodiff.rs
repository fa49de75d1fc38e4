//! Reverse-mode gradients on the scalar tape, checked by central differences.

use flowgp::grad::Real;
use flowgp::grad::{fd_check, gradient_of, tape_fn, ParamVector, TapeObjective};

fn main() -> flowgp::Result<()> {
    // log-sum-exp of softplus-transformed inputs
    let f = tape_fn(|_, x| {
        let s: Vec<_> = x.iter().map(|v| v.softplus()).collect();
        let total = s.iter().skip(1).fold(s[0].exp(), |acc, v| acc + v.exp());
        total.ln()
    });
    let x = [0.3, -1.2, 2.0];
    let (value, grad) = gradient_of(f, &x);
    println!("f = {value:.6}, grad = {grad:.6?}");

    let objective = TapeObjective::new(3, f);
    let report = fd_check(
        &objective,
        &ParamVector {
            flat: x.to_vec(),
            layout: Vec::new(),
        },
        1e-6,
        None,
    )?;
    println!(
        "max relative error against central differences: {:.2e}",
        report.max_rel_err
    );
    Ok(())
}
