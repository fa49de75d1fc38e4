//! Marginal triple gamma density of one inverse lengthscale for two shape
//! settings, plus its mass by simple quadrature.

use flowgp::prior::{log_triple_gamma, TripleGammaConfig};

fn main() -> flowgp::Result<()> {
    let tau = 1.0;
    let settings = [(0.1, 0.1), (0.5, 0.5), (0.5, 0.1)];
    print!("{:>10}", "theta");
    for (a, c) in settings {
        print!("  a={a},c={c:<5}");
    }
    println!();
    for k in -8..=3 {
        let theta = 10f64.powi(k);
        print!("{theta:>10.0e}");
        for (a, c) in settings {
            let cfg = TripleGammaConfig::new(a, c, 10.0)?;
            print!("  {:>13.5e}", log_triple_gamma(theta, &cfg, tau)?.exp());
        }
        println!();
    }
    for (a, c) in settings {
        let cfg = TripleGammaConfig::new(a, c, 10.0)?;
        let h = 1e-2;
        let mass: f64 = (-4000..6000)
            .map(|i| {
                let u = i as f64 * h;
                (log_triple_gamma(u.exp(), &cfg, tau).unwrap() + u).exp() * h
            })
            .sum();
        println!("a={a} c={c}: mass on [e^-40, e^60] = {mass:.6}");
    }
    Ok(())
}
