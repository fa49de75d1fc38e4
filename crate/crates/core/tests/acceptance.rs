//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! `FLOWGP_ACCEPTANCE=full` switches the optimisation experiments to their
//! full iteration budgets; `FLOWGP_ACCEPTANCE_ONLY=3,5` runs a subset.
//! A FAIL line does not fail the test binary: the lines are the report.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use flowgp::bench::bench_likelihood;
use flowgp::data::{simulate, GammaConvention, SimConfig, Simulation};
use flowgp::flows::{
    layer_forward, layer_inverse, log_base_density, log_q_density, stack_forward, standard_normal_vec, FlowLayerParams,
    FlowStack, LayerKind, MAX_BOTTLENECK,
};
use flowgp::kernel::{log_marginal_likelihood, HyperParams, BASE_JITTER};
use flowgp::model::{fit_mf, fit_ml, fit_nf, load_checkpoint, lpds, sample_posterior, save_checkpoint, FitResult};
use flowgp::prior::{
    ks_critical_001, log_triple_gamma, prior_model_size_study, sum_theta_draws, tau_prior_median, TripleGammaConfig,
};
use flowgp::special::{log_beta, log_hyp_u, log_hyp_u_fixed_order};
use flowgp::vi::{elbo_mc, elbo_mc_grad, sample_objective, GpTarget, VIConfig};

type Criterion = fn(Tier) -> Outcome;

struct Outcome {
    pass: bool,
    summary: String,
    notes: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, summary: impl Into<String>) -> Self {
        Outcome {
            pass,
            summary: summary.into(),
            notes: Vec::new(),
        }
    }

    fn note(mut self, n: impl Into<String>) -> Self {
        self.notes.push(n.into());
        self
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Tier {
    Desk,
    Full,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn cfg(a: f64, c: f64) -> TripleGammaConfig {
    TripleGammaConfig::new(a, c, 1.0).unwrap()
}

fn log_sum_exp_trapezoid(vals: &[f64], h: f64) -> f64 {
    let n = vals.len() - 1;
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = vals
        .iter()
        .enumerate()
        .map(|(i, v)| if i == 0 || i == n { 0.5 } else { 1.0 } * (v - m).exp())
        .sum();
    m + (s * h).ln()
}

/// Gamma(½, rate 1/(2τλ)) mixed over λ ~ F(2a, 2c), integrated in log λ.
fn mixture_density(theta: f64, a: f64, c: f64, tau: f64) -> f64 {
    let lb = log_beta(a, c).unwrap();
    let lg_half = 0.5 * std::f64::consts::PI.ln();
    let (lo, hi, h) = (theta.ln() - 60.0, theta.ln() + 400.0, 2e-3);
    let n = ((hi - lo) / h) as usize;
    let vals: Vec<f64> = (0..=n)
        .map(|i| {
            let s = lo + i as f64 * h;
            let lambda = s.exp();
            let scale = 2.0 * tau * lambda;
            let log_gamma_pdf = -0.5 * scale.ln() - 0.5 * theta.ln() - theta / scale - lg_half;
            let log_f = a * (a / c).ln() + (a - 1.0) * s - (a + c) * (a * lambda / c).ln_1p() - lb;
            log_gamma_pdf + log_f + s
        })
        .collect();
    log_sum_exp_trapezoid(&vals, h).exp()
}

fn total_mass(a: f64, c: f64, tau: f64) -> f64 {
    let conf = cfg(a, c);
    let f = |u: f64| (log_triple_gamma(u.exp(), &conf, tau).unwrap() + u).exp();
    let (lo, hi, h) = (-40.0f64, 60.0f64, 5e-3);
    let n = ((hi - lo) / h) as usize;
    let body: f64 = (0..=n)
        .map(|i| if i == 0 || i == n { 0.5 } else { 1.0 } * f(lo + i as f64 * h))
        .sum::<f64>()
        * h;
    // power-law tails beyond the grid
    let slope_lo = (f(lo + 0.01).ln() - f(lo).ln()) / 0.01;
    let slope_hi = (f(hi).ln() - f(hi - 0.01).ln()) / 0.01;
    body + f(lo) / slope_lo - f(hi) / slope_hi
}

fn criterion_1(_: Tier) -> Outcome {
    let start = Instant::now();
    let mut worst_rel: f64 = 0.0;
    let mut worst_mass: f64 = 0.0;
    for (a, c) in [(0.1, 0.1), (0.5, 0.5)] {
        for tau in [0.5, 2.0] {
            for theta in [1e-4, 1e-2, 0.1, 1.0, 10.0] {
                let got = log_triple_gamma(theta, &cfg(a, c), tau).unwrap().exp();
                let want = mixture_density(theta, a, c, tau);
                worst_rel = worst_rel.max((got - want).abs() / want);
            }
            worst_mass = worst_mass.max((total_mass(a, c, tau) - 1.0).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst_rel < 1e-4 && worst_mass < 1e-3 && secs < 60.0,
        format!("max rel err vs mixture {worst_rel:.2e}, max |mass-1| {worst_mass:.2e}, {secs:.1}s"),
    )
}

fn criterion_2(_: Tier) -> Outcome {
    let mut reciprocal: f64 = 0.0;
    for k in 0..=50 {
        let z = 10f64.powf(-6.0 + 10.0 * k as f64 / 50.0);
        let u = log_hyp_u(1.0, 2.0, z).unwrap().exp();
        reciprocal = reciprocal.max((u * z - 1.0).abs());
    }
    // E1(1) from its convergent series
    let euler = 0.577_215_664_901_532_9;
    let mut sum = 0.0;
    let mut term = 1.0;
    for k in 1..60 {
        term *= -1.0 / k as f64;
        sum += term / k as f64;
    }
    let want = std::f64::consts::E * (-euler - sum);
    let got = log_hyp_u(1.0, 1.0, 1.0).unwrap().exp();
    let e1_rel = (got / want - 1.0).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut self_rel: f64 = 0.0;
    for _ in 0..300 {
        let a = 0.05 * 100f64.powf(rng.random::<f64>());
        let b = rng.random_range(-5.0..2.0);
        let z = 10f64.powf(rng.random_range(-8.0..4.0));
        let lo = log_hyp_u_fixed_order(a, b, z, 128).unwrap();
        let hi = log_hyp_u_fixed_order(a, b, z, 256).unwrap();
        self_rel = self_rel.max(((lo - hi).exp() - 1.0).abs());
    }
    Outcome::new(
        reciprocal < 1e-10 && e1_rel < 1e-8 && self_rel < 1e-6,
        format!("U(1,2,z)z-1 max {reciprocal:.1e}, U(1,1,1) rel {e1_rel:.1e}, order 128 vs 256 max rel {self_rel:.1e}"),
    )
}

fn criterion_3(_: Tier) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=30);
        let d = rng.random_range(1..=5);
        let x = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let theta: Vec<f64> = (0..d).map(|_| 10f64.powf(rng.random_range(-2.0..1.0))).collect();
        let tau = rng.random_range(0.2..5.0);
        let sigma2 = rng.random_range(0.01..1.0);
        let params = HyperParams::new(theta.clone(), tau, sigma2).unwrap();
        let fast = log_marginal_likelihood(&y, &x, &params).unwrap();

        let jitter = BASE_JITTER * (1.0 / tau + sigma2);
        let c = DMatrix::from_fn(n, n, |i, j| {
            let q: f64 = (0..d).map(|k| theta[k] * (x[(i, k)] - x[(j, k)]).powi(2)).sum();
            (-0.5 * q).exp() / tau + if i == j { sigma2 + jitter } else { 0.0 }
        });
        let lu = c.clone().lu();
        let yv = nalgebra::DVector::from_vec(y);
        let alpha = lu.solve(&yv).unwrap();
        let naive =
            -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * yv.dot(&alpha) - 0.5 * lu.determinant().ln();
        worst = worst.max((fast - naive).abs());
    }
    Outcome::new(
        worst < 1e-8,
        format!("max |cholesky - dense LU| over 100 instances {worst:.2e}"),
    )
}

fn random_layer(kind: LayerKind, d: usize, rng: &mut ChaCha8Rng) -> FlowLayerParams {
    let mut n = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
    match kind {
        LayerKind::Sylvester => {
            let m = d.min(MAX_BOTTLENECK);
            let packed = m * (m + 1) / 2;
            FlowLayerParams::Sylvester {
                householder: (0..m * d).map(|_| n(1.0)).collect(),
                r_upper: (0..packed).map(|_| n(1.0)).collect(),
                r_tilde_upper: (0..packed).map(|_| n(1.0)).collect(),
                b: (0..m).map(|_| n(1.0)).collect(),
            }
        }
        LayerKind::Radial => FlowLayerParams::Radial {
            alpha_raw: n(1.0),
            beta_raw: n(1.0),
            center: (0..d).map(|_| n(1.0)).collect(),
        },
        LayerKind::DiagAffine => FlowLayerParams::DiagAffine {
            shift: (0..d).map(|_| n(1.0)).collect(),
            log_scale: (0..d).map(|_| n(0.5)).collect(),
        },
    }
}

fn fd_log_det(f: impl Fn(&[f64]) -> Vec<f64>, u: &[f64]) -> f64 {
    let d = u.len();
    let h = 1e-6;
    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut up = u.to_vec();
        let mut dn = u.to_vec();
        up[j] += h;
        dn[j] -= h;
        let (fu, fd) = (f(&up), f(&dn));
        for i in 0..d {
            jac[(i, j)] = (fu[i] - fd[i]) / (2.0 * h);
        }
    }
    jac.determinant().abs().ln()
}

fn criterion_4(_: Tier) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut det_err, mut inv_err, mut dens_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for kind in [LayerKind::Sylvester, LayerKind::Radial, LayerKind::DiagAffine] {
        for d in 1..=3 {
            for _ in 0..100 {
                let l = random_layer(kind, d, &mut rng);
                let u = standard_normal_vec(d, &mut rng);
                let (z, ld) = layer_forward(&u, &l).unwrap();
                let fd = fd_log_det(|x| layer_forward(x, &l).unwrap().0, &u);
                det_err = det_err.max((ld - fd).abs());
                let back = layer_inverse(&z, &l, 1e-10).unwrap();
                inv_err = back.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(inv_err, f64::max);
                let stack = FlowStack::from_layers(d, 1.0, std::slice::from_ref(&l)).unwrap();
                let (xi, sld) = stack_forward(&u, &stack).unwrap();
                let lq = log_q_density(&xi, &stack).unwrap();
                dens_err = dens_err.max((lq - (log_base_density(&u) - sld)).abs());
            }
        }
    }
    Outcome::new(
        det_err < 1e-5 && inv_err < 1e-6 && dens_err < 1e-6,
        format!("log-det vs FD {det_err:.1e}, inverse round trip {inv_err:.1e}, density consistency {dens_err:.1e}"),
    )
}

fn criterion_5(_: Tier) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = DMatrix::from_fn(10, 1, |_, _| rng.random_range(-1.5f64..1.5));
    let y: Vec<f64> = (0..10)
        .map(|i| (2.0 * x[(i, 0)]).sin() + 0.1 * rng.random_range(-1.0..1.0))
        .collect();
    let target = GpTarget::new(&x, &y, TripleGammaConfig::new(0.5, 0.5, 10.0).unwrap()).unwrap();
    let stack = FlowStack::with_kinds(3, &[LayerKind::Sylvester], 1.0, &mut rng).unwrap();
    let p: Vec<f64> = stack
        .params()
        .iter()
        .map(|v| v + 0.3 * rng.random_range(-1.0..1.0))
        .collect();
    let stack = stack.with_params(&p).unwrap();
    let noise: Vec<Vec<f64>> = (0..2).map(|_| standard_normal_vec(3, &mut rng)).collect();
    let g = elbo_mc_grad(&stack, &target, &noise).unwrap().grad.unwrap();
    let f = |q: &[f64]| elbo_mc(&stack.with_params(q).unwrap(), &target, &noise).unwrap().value;
    let (mut worst, mut checked): (f64, usize) = (0.0, 0);
    for k in 0..p.len() {
        if g[k].abs() <= 1e-6 {
            continue;
        }
        let h = 1e-5;
        let mut up = p.clone();
        let mut dn = p.clone();
        up[k] += h;
        dn[k] -= h;
        let num = (f(&up) - f(&dn)) / (2.0 * h);
        worst = worst.max((g[k] - num).abs() / g[k].abs().max(num.abs()));
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst < 1e-4 && secs < 60.0,
        format!(
            "max rel err {worst:.1e} over {checked}/{} coordinates, {secs:.1}s",
            p.len()
        ),
    )
}

fn criterion_6(_: Tier) -> Outcome {
    let start = Instant::now();
    let study = prior_model_size_study(10, &cfg(0.5, 0.5), 2000, 2000, None, 6).unwrap();
    let ks = study.ks_uniform();
    let crit = ks_critical_001(2000);
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        ks < crit && secs < 120.0,
        format!("KS {ks:.4} vs critical {crit:.4}, {secs:.1}s"),
    )
}

fn criterion_7(_: Tier) -> Outcome {
    let conf = cfg(0.1, 0.1);
    let tau = tau_prior_median(&conf, 200_000, 7).unwrap();
    let mut hier = sum_theta_draws(200, &conf, None, 10_000, 7).unwrap();
    let mut fixed = sum_theta_draws(200, &conf, Some(tau), 10_000, 7).unwrap();
    hier.sort_by(f64::total_cmp);
    fixed.sort_by(f64::total_cmp);
    let (mh, mf) = (median(&hier), median(&fixed));
    let (dh, df) = (hier[1000], fixed[1000]);
    Outcome::new(
        mh < mf,
        format!("a=c=0.1, d=200: median hierarchical {mh:.3e} vs fixed tau={tau} {mf:.3e}"),
    )
    .note(format!("lower decile: hierarchical {dh:.3e} vs fixed {df:.3e}"))
}

fn sim(d: usize, n: usize, s: f64, seed: u64, n_test: usize, conv: GammaConvention) -> Simulation {
    let mut c = SimConfig::new(d, n, s, 0.5, seed);
    c.n_test = n_test;
    c.convention = conv;
    simulate(&c).unwrap()
}

fn criterion_8(tier: Tier) -> Outcome {
    let iters = 3000;
    let prior = TripleGammaConfig::default();
    let mut ok = 0;
    let mut notes = Vec::new();
    for seed in 1..=3 {
        let data = sim(10, 100, 0.5, seed, 10, GammaConvention::Scale);
        let vi = VIConfig {
            n_iterations: iters,
            seed,
            ..VIConfig::default()
        };
        let fit = fit_nf(&data.train, &prior, &vi).unwrap();
        let t = fit.elbo_trace().unwrap();
        let (early, last) = (t.smoothed[49], *t.smoothed.last().unwrap());
        if last >= early - 1.0 {
            ok += 1;
        }
        notes.push(format!(
            "seed {seed}: smoothed ELBO at 50 {early:.2}, at {iters} {last:.2}"
        ));
    }
    let _ = tier;
    let mut o = Outcome::new(ok == 3, format!("{ok}/3 seeds with final >= iteration-50 value - 1"));
    o.notes = notes;
    o
}

fn vi_budget(tier: Tier, desk_iters: usize, desk_samples: usize, desk_lr: f64) -> VIConfig {
    match tier {
        Tier::Full => VIConfig::default(),
        Tier::Desk => VIConfig {
            n_iterations: desk_iters,
            n_mc_samples: desk_samples,
            learning_rate: desk_lr,
            ..VIConfig::default()
        },
    }
}

/// Fraction of (irrelevant, relevant) pairs whose posterior θ medians are
/// ordered correctly, and whether every pair is.
fn separation(fit: &FitResult, truth: &[f64], seed: u64) -> (f64, bool) {
    let draws = sample_posterior(fit, 1000, seed).unwrap();
    let d = truth.len();
    let med: Vec<f64> = (0..d)
        .map(|j| median(&(0..draws.len()).map(|s| draws.xi[(s, j)]).collect::<Vec<_>>()))
        .collect();
    let (mut good, mut total) = (0, 0);
    for i in (0..d).filter(|&i| truth[i] == 0.0) {
        for j in (0..d).filter(|&j| truth[j] != 0.0) {
            total += 1;
            if med[i] < med[j] {
                good += 1;
            }
        }
    }
    let rate = good as f64 / total.max(1) as f64;
    (rate, good == total)
}

fn recovery(tier: Tier, seeds: u64, conv: GammaConvention) -> (usize, usize, Vec<f64>) {
    let prior = TripleGammaConfig::default();
    let (mut pass, mut strict, mut rates) = (0, 0, Vec::new());
    for seed in 1..=seeds {
        let data = sim(10, 500, 0.5, seed, 10, conv);
        let vi = VIConfig {
            seed,
            ..vi_budget(tier, 300, 4, 0.03)
        };
        let fit = fit_nf(&data.train, &prior, &vi).unwrap();
        let (rate, all) = separation(&fit, &data.truth.theta, seed);
        if rate >= 0.8 {
            pass += 1;
        }
        if all {
            strict += 1;
        }
        rates.push(rate);
    }
    (pass, strict, rates)
}

fn criterion_9(tier: Tier) -> Outcome {
    let prior = TripleGammaConfig::default();
    let (mut nf, mut ml) = (Vec::new(), Vec::new());
    for seed in 1..=10 {
        let data = sim(50, 100, 0.9, seed, 300, GammaConvention::Scale);
        let vi = VIConfig {
            seed,
            ..vi_budget(tier, 1000, 5, 5e-3)
        };
        let fit = fit_nf(&data.train, &prior, &vi).unwrap();
        nf.push(lpds(&fit, &data.test, 256, seed).unwrap().mean);
        let point = fit_ml(&data.train, 10, seed).unwrap();
        ml.push(lpds(&point, &data.test, 1, seed).unwrap().mean);
    }
    let (mn, mm) = (median(&nf), median(&ml));
    let (pass, strict, rates) = recovery(tier, 10, GammaConvention::Scale);
    let diag_seeds = if tier == Tier::Full { 10 } else { 3 };
    let (rpass, rstrict, _) = recovery(tier, diag_seeds, GammaConvention::Rate);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    Outcome::new(
        mn >= mm && pass >= 8,
        format!(
            "median LPDS NF {mn:.4} vs ML {mm:.4} ({}); recovery {pass}/10 seeds ({})",
            if mn >= mm { "met" } else { "not met" },
            if pass >= 8 { "met" } else { "not met" }
        ),
    )
    .note(format!("LPDS NF per seed: {}", fmt(&nf)))
    .note(format!("LPDS ML per seed: {}", fmt(&ml)))
    .note(format!(
        "pairwise ordering rate per seed: {} ({strict}/10 fully separated)",
        fmt(&rates)
    ))
    .note(format!(
        "rate-parameterised weights: recovery {rpass}/{diag_seeds} seeds, {rstrict} fully separated"
    ))
}

/// Mean and standard error of the per-sample ELBO terms over fresh noise.
fn elbo_with_se(fit: &FitResult, prior: &TripleGammaConfig, seed: u64) -> (f64, f64) {
    let stack = fit.stack().unwrap();
    let target = GpTarget::new(&fit.train.x, &fit.train.y, *prior).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals: Vec<f64> = (0..1000)
        .filter_map(|_| sample_objective(stack, &target, &standard_normal_vec(stack.dim(), &mut rng)).ok())
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn criterion_10(tier: Tier) -> Outcome {
    let prior = TripleGammaConfig::default();
    let mut margins = Vec::new();
    let mut notes = Vec::new();
    for seed in 1..=5 {
        let data = sim(10, 100, 0.5, seed, 10, GammaConvention::Scale);
        let vi = VIConfig {
            seed,
            ..vi_budget(tier, 2000, 10, 5e-3)
        };
        let nf = fit_nf(&data.train, &prior, &vi).unwrap();
        let mf = fit_mf(&data.train, &prior, &vi).unwrap();
        let (en, sn) = elbo_with_se(&nf, &prior, 1000 + seed);
        let (em, sm) = elbo_with_se(&mf, &prior, 1000 + seed);
        let se = (sn * sn + sm * sm).sqrt();
        margins.push(en - em + 2.0 * se);
        notes.push(format!("seed {seed}: NF {en:.3} (se {sn:.3}), MF {em:.3} (se {sm:.3})"));
    }
    let m = median(&margins);
    let mut o = Outcome::new(m >= 0.0, format!("median of NF - MF + 2 SE over 5 seeds {m:.3}"));
    o.notes = notes;
    o
}

fn criterion_11(_: Tier) -> Outcome {
    let r = bench_likelihood(&[200, 400, 800, 1600], 25, 5, 11).unwrap();
    let slope = r.log_log_slope().unwrap();
    let times = r
        .cases
        .iter()
        .map(|c| format!("N={} {:.4}s", c.n, c.median()))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new((2.2..=3.3).contains(&slope), format!("log-log slope {slope:.3}")).note(times)
}

fn flowgp(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_flowgp"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn pipeline(root: &Path) -> bool {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    flowgp(&[
        "simulate",
        "--d",
        "5",
        "--n-train",
        "60",
        "--n-test",
        "30",
        "--sparsity",
        "0.4",
        "--rho",
        "0.5",
        "--seed",
        "12",
        "--out-dir",
        &p("sim"),
    ]) && flowgp(&[
        "fit",
        "--method",
        "nf",
        "--train",
        &p("sim/train.csv"),
        "--iterations",
        "200",
        "--layers",
        "3",
        "--mc-samples",
        "4",
        "--seed",
        "12",
        "--out-dir",
        &p("fit"),
    ]) && flowgp(&[
        "eval",
        "--checkpoint",
        &p("fit/checkpoint.bin"),
        "--test",
        &p("sim/test.csv"),
        "--seed",
        "12",
        "--out-dir",
        &p("eval"),
    ])
}

fn criterion_12(_: Tier) -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    if !dirs.iter().all(|d| pipeline(d.path())) {
        return Outcome::new(false, "pipeline command failed");
    }
    let files = [
        "sim/train.csv",
        "sim/test.csv",
        "sim/truth.csv",
        "fit/checkpoint.bin",
        "fit/trace.csv",
        "fit/inclusion.csv",
        "eval/lpds.csv",
        "eval/lpds_points.csv",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(dirs[0].path().join(f)).ok() != std::fs::read(dirs[1].path().join(f)).ok())
        .collect();
    let bytes = std::fs::read(dirs[0].path().join("fit/checkpoint.bin")).unwrap();
    let loaded = load_checkpoint(&bytes).unwrap();
    let round_trip = save_checkpoint(&loaded) == bytes;
    Outcome::new(
        differing.is_empty() && round_trip,
        format!(
            "{} of {} outputs identical across runs, checkpoint round trip {}",
            files.len() - differing.len(),
            files.len(),
            if round_trip { "exact" } else { "differs" }
        ),
    )
}

fn main() {
    let tier = match std::env::var("FLOWGP_ACCEPTANCE").as_deref() {
        Ok("full") => Tier::Full,
        _ => Tier::Desk,
    };
    let only: Option<Vec<usize>> = std::env::var("FLOWGP_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, Criterion); 12] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
        (11, criterion_11),
        (12, criterion_12),
    ];
    println!("acceptance tier: {}", if tier == Tier::Full { "full" } else { "desk" });
    let mut failed = 0;
    for (id, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| run(tier))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        if !outcome.pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2}: {} - {} [{:.1}s]",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.summary,
            start.elapsed().as_secs_f64()
        );
        for n in &outcome.notes {
            println!("    {n}");
        }
    }
    println!("{failed} criteria failed");
}
