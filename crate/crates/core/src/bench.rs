//! Wall-clock scaling measurements for the likelihood and the VI loop.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::format_f64;
use crate::error::{invalid, Error, Result};
use crate::flows::{standard_normal_vec, FlowStack};
use crate::kernel::{log_marginal_likelihood, HyperParams};
use crate::prior::TripleGammaConfig;
use crate::vi::{elbo_mc_grad, GpTarget, OptimizerState, VIConfig};

pub const MIN_REPETITIONS: usize = 5;

/// Where a report was measured.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub os: &'static str,
    pub arch: &'static str,
    pub available_cpus: usize,
    pub workers: usize,
    pub cpu_model: String,
    pub version: &'static str,
}

impl Environment {
    pub fn capture(workers: usize) -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Environment {
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            available_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            workers,
            cpu_model,
            version: env!("CARGO_PKG_VERSION"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchCase {
    pub n: usize,
    pub d: usize,
    pub s: usize,
    pub k: usize,
    /// Per-repetition wall times in seconds, warmup excluded.
    pub seconds: Vec<f64>,
}

impl BenchCase {
    pub fn median(&self) -> f64 {
        let mut v = self.seconds.clone();
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        if v.len() % 2 == 1 {
            v[m]
        } else {
            0.5 * (v[m - 1] + v[m])
        }
    }

    /// Median absolute deviation from the median.
    pub fn mad(&self) -> f64 {
        let med = self.median();
        let devs: Vec<f64> = self.seconds.iter().map(|t| (t - med).abs()).collect();
        BenchCase {
            seconds: devs,
            ..self.clone()
        }
        .median()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub kind: &'static str,
    pub cases: Vec<BenchCase>,
    pub environment: Environment,
}

impl BenchReport {
    /// Least-squares slope of log median time against log N over the upper
    /// half of the N range (at least two cases).
    pub fn log_log_slope(&self) -> Option<f64> {
        if self.cases.len() < 2 {
            return None;
        }
        let take = self.cases.len().div_ceil(2).max(2);
        let pts: Vec<(f64, f64)> = self.cases[self.cases.len() - take..]
            .iter()
            .map(|c| ((c.n as f64).ln(), c.median().ln()))
            .collect();
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        Some(sxy / sxx)
    }

    /// Delimited table, one row per case.
    pub fn to_table(&self) -> String {
        let mut s = String::from("kind,n,d,s,k,repetitions,median_seconds,mad_seconds\n");
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                self.kind,
                c.n,
                c.d,
                c.s,
                c.k,
                c.seconds.len(),
                format_f64(c.median()),
                format_f64(c.mad())
            );
        }
        s
    }
}

fn time_reps<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<Vec<f64>> {
    f()?;
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f()?;
            Ok(t.elapsed().as_secs_f64())
        })
        .collect()
}

fn check_reps(reps: usize) -> Result<()> {
    if reps < MIN_REPETITIONS {
        return invalid(format!("need at least {MIN_REPETITIONS} repetitions, got {reps}"));
    }
    Ok(())
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

fn synthetic(n: usize, d: usize, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, Vec<f64>) {
    let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let y = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    (x, y)
}

/// Times one log marginal likelihood evaluation per N (ascending).
pub fn bench_likelihood(ns: &[usize], d: usize, reps: usize, seed: u64) -> Result<BenchReport> {
    check_reps(reps)?;
    if ns.is_empty() || ns.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("N values must be nonempty and strictly ascending");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = HyperParams::new(vec![1.0 / d as f64; d], 1.0, 0.1)?;
    let mut cases = Vec::with_capacity(ns.len());
    for &n in ns {
        let (x, y) = synthetic(n, d, &mut rng);
        let seconds = time_reps(reps, || log_marginal_likelihood(&y, &x, &params).map(|_| ()))?;
        cases.push(BenchCase {
            n,
            d,
            s: 0,
            k: 0,
            seconds,
        });
    }
    Ok(BenchReport {
        kind: "likelihood",
        cases,
        environment: Environment::capture(1),
    })
}

/// Times one full VI iteration (sampling, ELBO and gradient, Adam step) at
/// each `(S, K)` pair, with `workers` threads.
pub fn bench_iteration(
    n: usize,
    d: usize,
    settings: &[(usize, usize)],
    reps: usize,
    workers: usize,
    seed: u64,
) -> Result<BenchReport> {
    check_reps(reps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, y) = synthetic(n, d, &mut rng);
    let target = GpTarget::new(&x, &y, TripleGammaConfig::default())?;
    let cfg = VIConfig::default();
    let pool = pool(workers)?;
    let mut cases = Vec::with_capacity(settings.len());
    for &(s, k) in settings {
        if s == 0 {
            return invalid("S must be at least 1");
        }
        let mut stack = FlowStack::sylvester(d + 2, k, 1.0, &mut rng)?;
        let mut params = stack.params().to_vec();
        let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate, params.len());
        let seconds = pool.install(|| {
            time_reps(reps, || {
                let noise: Vec<Vec<f64>> = (0..s).map(|_| standard_normal_vec(d + 2, &mut rng)).collect();
                let est = elbo_mc_grad(&stack, &target, &noise)?;
                opt.step(&mut params, &est.grad.expect("gradient requested"));
                stack = stack.with_params(&params)?;
                Ok(())
            })
        })?;
        cases.push(BenchCase { n, d, s, k, seconds });
    }
    Ok(BenchReport {
        kind: "iteration",
        cases,
        environment: Environment::capture(workers),
    })
}
