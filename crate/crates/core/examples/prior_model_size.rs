//! Prior behaviour of the shrinkage hierarchy: induced inclusion probability,
//! model size, and the spread of Σθ with and without a random global scale.

use flowgp::model::quantile_sorted;
use flowgp::prior::{ks_critical_001, prior_model_size_study, sum_theta_draws, tau_prior_median, TripleGammaConfig};

fn main() -> flowgp::Result<()> {
    let cfg = TripleGammaConfig::new(0.5, 0.5, 10.0)?;
    let study = prior_model_size_study(20, &cfg, 2000, 2000, None, 1)?;
    println!(
        "d=20: KS distance of pi from uniform {:.4} (1% critical value {:.4}), mean model size {:.2}",
        study.ks_uniform(),
        ks_critical_001(2000),
        study.mean_model_size()
    );
    let hist = study.model_size_histogram();
    for (k, p) in hist.iter().enumerate().step_by(4) {
        println!("  P(K = {k:>2}) = {p:.3}");
    }

    let tau = tau_prior_median(&cfg, 100_000, 2)?;
    for d in [10, 50, 200] {
        let mut h = sum_theta_draws(d, &cfg, None, 10_000, 3)?;
        let mut f = sum_theta_draws(d, &cfg, Some(tau), 10_000, 3)?;
        h.sort_by(f64::total_cmp);
        f.sort_by(f64::total_cmp);
        println!(
            "d={d:>3}: sum theta deciles (hierarchical) {:.3e} / {:.3e} / {:.3e}   (tau fixed at {tau}) {:.3e} / {:.3e} / {:.3e}",
            quantile_sorted(&h, 0.1),
            quantile_sorted(&h, 0.5),
            quantile_sorted(&h, 0.9),
            quantile_sorted(&f, 0.1),
            quantile_sorted(&f, 0.5),
            quantile_sorted(&f, 0.9),
        );
    }
    Ok(())
}
