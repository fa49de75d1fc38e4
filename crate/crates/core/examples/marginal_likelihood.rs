//! GP log marginal likelihood and its gradient along a path of lengthscales.

use flowgp::data::equicorrelated_normals;
use flowgp::kernel::{log_marginal_likelihood, log_marginal_likelihood_grad, HyperParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> flowgp::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = equicorrelated_normals(60, 2, 0.3, &mut rng)?;
    // the response depends on the first covariate only
    let y: Vec<f64> = (0..60).map(|i| (1.5 * x[(i, 0)]).sin()).collect();
    println!(
        "{:>8} {:>12} {:>12} {:>12}",
        "theta_2", "log lik", "d/dtheta_1", "d/dtheta_2"
    );
    for theta2 in [0.0, 0.01, 0.1, 1.0] {
        let p = HyperParams::new(vec![1.0, theta2], 1.0, 0.01)?;
        let g = log_marginal_likelihood_grad(&y, &x, &p)?;
        assert!((g.value - log_marginal_likelihood(&y, &x, &p)?).abs() < 1e-9);
        println!(
            "{theta2:>8} {:>12.4} {:>12.4} {:>12.4}",
            g.value, g.d_theta[0], g.d_theta[1]
        );
    }
    Ok(())
}
