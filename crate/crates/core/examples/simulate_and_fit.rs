//! Simulates a sparse GP regression problem, fits the flow posterior and the
//! maximum likelihood baseline, and compares them on held-out data.

use flowgp::data::{simulate, GammaConvention, SimConfig};
use flowgp::model::{fit_ml, fit_nf, inclusion_summary, lpds, sample_posterior};
use flowgp::prior::TripleGammaConfig;
use flowgp::vi::VIConfig;

fn main() -> flowgp::Result<()> {
    let mut cfg = SimConfig::new(8, 150, 0.5, 0.5, 4);
    cfg.convention = GammaConvention::Rate;
    let sim = simulate(&cfg)?;
    println!("true theta: {:.3?}", sim.truth.theta);

    let prior = TripleGammaConfig::default();
    let vi = VIConfig {
        n_iterations: 600,
        n_mc_samples: 4,
        learning_rate: 0.02,
        seed: 4,
        ..VIConfig::default()
    };
    let nf = fit_nf(&sim.train, &prior, &vi)?;
    let ml = fit_ml(&sim.train, 5, 4)?;

    let draws = sample_posterior(&nf, 1000, 0)?;
    println!(
        "{:>6} {:>10} {:>10} {:>10} {:>10}",
        "theta", "median", "5%", "95%", "truth"
    );
    for row in inclusion_summary(&draws, &prior)? {
        println!(
            "{:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            row.index + 1,
            row.median,
            row.lower,
            row.upper,
            sim.truth.theta[row.index]
        );
    }
    println!("ML theta: {:.4?}", ml.point().expect("point estimate").theta);
    println!("LPDS flow {:.4}", lpds(&nf, &sim.test, 256, 0)?.mean);
    println!("LPDS ML   {:.4}", lpds(&ml, &sim.test, 1, 0)?.mean);
    Ok(())
}
