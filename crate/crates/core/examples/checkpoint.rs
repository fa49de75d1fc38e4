//! Saves a fitted model, reloads it and predicts from the copy.

use flowgp::data::{simulate, SimConfig};
use flowgp::model::{fit_mf, load_checkpoint, predict, save_checkpoint};
use flowgp::prior::TripleGammaConfig;
use flowgp::vi::VIConfig;

fn main() -> flowgp::Result<()> {
    let mut cfg = SimConfig::new(3, 40, 0.3, 0.0, 1);
    cfg.n_test = 5;
    let sim = simulate(&cfg)?;
    let vi = VIConfig {
        n_iterations: 200,
        n_mc_samples: 4,
        ..VIConfig::default()
    };
    let fit = fit_mf(&sim.train, &TripleGammaConfig::default(), &vi)?;
    let bytes = save_checkpoint(&fit);
    let copy = load_checkpoint(&bytes)?;
    println!(
        "checkpoint: {} bytes, re-encodes identically: {}",
        bytes.len(),
        save_checkpoint(&copy) == bytes
    );
    let pred = predict(&copy, &sim.test, 64, 0)?;
    for i in 0..sim.test.n() {
        println!(
            "y = {:>8.4}  mean = {:>8.4}  sd = {:.4}",
            sim.test.y[i],
            pred.mean[i],
            pred.var[i].sqrt()
        );
    }
    Ok(())
}
