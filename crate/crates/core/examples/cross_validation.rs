//! K-fold cross-validation on a delimited table: each fold is standardized
//! with its own training statistics and scored by LPDS.

use flowgp::data::{fold_datasets, kfold, load_table, simulate, write_table, GammaConvention, SimConfig};
use flowgp::model::{fit_mf, fit_ml, lpds};
use flowgp::prior::TripleGammaConfig;
use flowgp::vi::VIConfig;

fn main() -> flowgp::Result<()> {
    let dir = std::env::temp_dir().join("flowgp-cv-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("data.csv");
    let mut cfg = SimConfig::new(5, 120, 0.4, 0.2, 9);
    cfg.convention = GammaConvention::Rate;
    write_table(&simulate(&cfg)?.train, &path, b',')?;

    let raw = load_table(&path, "y", b',')?;
    let vi = VIConfig {
        n_iterations: 300,
        n_mc_samples: 4,
        learning_rate: 0.02,
        ..VIConfig::default()
    };
    let (mut ml_total, mut mf_total) = (0.0, 0.0);
    for (k, fold) in kfold(&raw, 5, 0)?.iter().enumerate() {
        let (train, test) = fold_datasets(&raw, fold)?;
        let ml = lpds(&fit_ml(&train, 3, k as u64)?, &test, 1, 0)?;
        let mf = lpds(&fit_mf(&train, &TripleGammaConfig::default(), &vi)?, &test, 128, 0)?;
        println!("fold {}: ML {:.4}  mean-field {:.4}", k + 1, ml.mean, mf.mean);
        ml_total += ml.per_point.iter().sum::<f64>();
        mf_total += mf.per_point.iter().sum::<f64>();
    }
    let n = raw.n() as f64;
    println!(
        "cross-validated LPDS: ML {:.4}  mean-field {:.4}",
        ml_total / n,
        mf_total / n
    );
    Ok(())
}
