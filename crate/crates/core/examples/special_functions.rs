//! Evaluates log U(a, b, z) across its range and checks two closed forms.

use flowgp::special::{log_gamma, log_hyp_u, log_hyp_u_with_derivative};

fn main() -> flowgp::Result<()> {
    println!("{:>6} {:>6} {:>10} {:>14} {:>14}", "a", "b", "z", "log U", "d/dz log U");
    for &(a, b) in &[(0.1, 0.6), (0.5, 1.0), (1.0, 2.0), (2.5, -3.0)] {
        for &z in &[1e-6, 1e-2, 1.0, 1e2] {
            let r = log_hyp_u_with_derivative(a, b, z)?;
            println!("{a:>6} {b:>6} {z:>10.0e} {:>14.8} {:>14.6e}", r.value, r.d_dz);
        }
    }
    // U(1, 2, z) = 1/z
    println!("U(1,2,5) * 5 = {}", log_hyp_u(1.0, 2.0, 5.0)?.exp() * 5.0);
    println!(
        "log Gamma(0.5) = {} (log sqrt(pi) = {})",
        log_gamma(0.5)?,
        0.5 * std::f64::consts::PI.ln()
    );
    Ok(())
}
