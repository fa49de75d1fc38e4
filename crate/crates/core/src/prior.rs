//! Hierarchical triple gamma shrinkage prior on the inverse lengthscales.
//!
//! The hierarchy is
//!
//! ```text
//! θ_j | τ, λ_j ~ Gamma(½, rate 1/(2τλ_j))
//! λ_j         ~ F(2a, 2c)
//! τ           ~ F(2c, 2a)
//! σ²          ~ Exp(rate)
//! ```
//!
//! Integrating out `λ_j` gives a closed-form marginal in terms of the
//! confluent hypergeometric function `U`, which is what the posterior uses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma};

use crate::error::{invalid, Result};
use crate::special::{ln_gamma_pos, log_beta, log_hyp_u_with_derivative};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripleGammaConfig {
    pub a: f64,
    pub c: f64,
    pub sigma2_rate: f64,
}

impl TripleGammaConfig {
    pub fn new(a: f64, c: f64, sigma2_rate: f64) -> Result<Self> {
        let cfg = TripleGammaConfig { a, c, sigma2_rate };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("c", self.c), ("sigma2_rate", self.sigma2_rate)] {
            if !(v > 0.0) || !v.is_finite() {
                return invalid(format!("{name} must be positive and finite, got {v}"));
            }
        }
        Ok(())
    }
}

impl Default for TripleGammaConfig {
    fn default() -> Self {
        TripleGammaConfig {
            a: 0.1,
            c: 0.1,
            sigma2_rate: 10.0,
        }
    }
}

/// Log marginal density of `θ_j` with its partial derivatives.
#[derive(Debug, Clone, Copy)]
pub struct TripleGammaEval {
    pub value: f64,
    pub d_theta: f64,
    pub d_tau: f64,
}

/// Normalized log density of the triple gamma marginal at `theta_j`.
pub fn log_triple_gamma(theta_j: f64, cfg: &TripleGammaConfig, tau: f64) -> Result<f64> {
    Ok(log_triple_gamma_grad(theta_j, cfg, tau)?.value)
}

pub fn log_triple_gamma_grad(theta_j: f64, cfg: &TripleGammaConfig, tau: f64) -> Result<TripleGammaEval> {
    if !(theta_j > 0.0) || !theta_j.is_finite() {
        return invalid(format!("theta_j must be positive, got {theta_j}"));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return invalid(format!("tau must be positive, got {tau}"));
    }
    let (a, c) = (cfg.a, cfg.c);
    let kappa = tau * c / a;
    let z = theta_j / (2.0 * kappa);
    let u = log_hyp_u_with_derivative(c + 0.5, 1.5 - a, z)?;
    let value = ln_gamma_pos(c + 0.5) - 0.5 * (LN_2PI + (kappa * theta_j).ln()) - log_beta(a, c)? + u.value;
    Ok(TripleGammaEval {
        value,
        d_theta: -0.5 / theta_j + u.d_dz * z / theta_j,
        d_tau: -0.5 / tau - u.d_dz * z / tau,
    })
}

/// Unnormalized log density of `τ ~ F(2c, 2a)`.
pub fn log_f_prior_tau(tau: f64, cfg: &TripleGammaConfig) -> Result<f64> {
    Ok(log_f_prior_tau_grad(tau, cfg)?.0)
}

/// Value and derivative in `τ`.
pub fn log_f_prior_tau_grad(tau: f64, cfg: &TripleGammaConfig) -> Result<(f64, f64)> {
    if !(tau > 0.0) || !tau.is_finite() {
        return invalid(format!("tau must be positive, got {tau}"));
    }
    let (a, c) = (cfg.a, cfg.c);
    let r = c / a;
    let value = (c - 1.0) * tau.ln() - (c + a) * (r * tau).ln_1p();
    let grad = (c - 1.0) / tau - (c + a) * r / (1.0 + r * tau);
    Ok((value, grad))
}

/// Unnormalized log density of `σ² ~ Exp(rate)`.
pub fn log_exp_prior_sigma2(sigma2: f64, cfg: &TripleGammaConfig) -> f64 {
    -cfg.sigma2_rate * sigma2
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorDraw {
    pub theta: Vec<f64>,
    pub tau: f64,
    pub lambda: Vec<f64>,
    pub rho: Vec<f64>,
}

/// `F(2p, 2q)` as a ratio of scaled Gamma variates.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FDist {
    num: Gamma<f64>,
    den: Gamma<f64>,
    p: f64,
    q: f64,
}

impl FDist {
    pub(crate) fn new(p: f64, q: f64) -> Result<Self> {
        let num = Gamma::new(p, 1.0).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
        let den = Gamma::new(q, 1.0).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
        Ok(FDist { num, den, p, q })
    }
}

impl Distribution<f64> for FDist {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let x = (self.num.sample(rng) / self.p) / (self.den.sample(rng) / self.q);
            if x > 0.0 && x.is_finite() {
                return x;
            }
        }
    }
}

/// `ρ = 1/(1 + τλ)`
pub fn shrinkage_factor(tau: f64, lambda: f64) -> f64 {
    1.0 / (1.0 + tau * lambda)
}

/// Draws one realization of the hierarchy from an existing generator.
pub fn sample_hierarchy_with<R: Rng + ?Sized>(
    d: usize,
    cfg: &TripleGammaConfig,
    tau_fixed: Option<f64>,
    rng: &mut R,
) -> Result<PriorDraw> {
    cfg.validate()?;
    if d == 0 {
        return invalid("d must be at least 1");
    }
    let tau = match tau_fixed {
        Some(t) if t > 0.0 && t.is_finite() => t,
        Some(t) => return invalid(format!("tau_fixed must be positive, got {t}")),
        None => FDist::new(cfg.c, cfg.a)?.sample(rng),
    };
    let local = FDist::new(cfg.a, cfg.c)?;
    let lambda: Vec<f64> = (0..d).map(|_| local.sample(rng)).collect();
    let mut theta = Vec::with_capacity(d);
    for &l in &lambda {
        let g = Gamma::new(0.5, 2.0 * tau * l).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
        theta.push(g.sample(rng));
    }
    let rho = lambda.iter().map(|&l| shrinkage_factor(tau, l)).collect();
    Ok(PriorDraw {
        theta,
        tau,
        lambda,
        rho,
    })
}

/// Seeded draw from the hierarchy. With `hierarchical = false`, `τ` is held at
/// `tau_fixed`.
pub fn sample_hierarchy(
    d: usize,
    cfg: &TripleGammaConfig,
    hierarchical: bool,
    tau_fixed: Option<f64>,
    rng_seed: u64,
) -> Result<PriorDraw> {
    let tau = if hierarchical {
        None
    } else {
        match tau_fixed {
            Some(t) => Some(t),
            None => return invalid("non-hierarchical sampling needs tau_fixed"),
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_hierarchy_with(d, cfg, tau, &mut rng)
}

/// `Σ_j θ_j` for `draws` independent realizations of a `d`-dimensional
/// hierarchy, draw `i` generated from seed `rng_seed + i`.
pub fn sum_theta_draws(
    d: usize,
    cfg: &TripleGammaConfig,
    tau_fixed: Option<f64>,
    draws: usize,
    rng_seed: u64,
) -> Result<Vec<f64>> {
    (0..draws as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed.wrapping_add(i));
            Ok(sample_hierarchy_with(d, cfg, tau_fixed, &mut rng)?.theta.iter().sum())
        })
        .collect()
}

/// Median of the prior on `τ`. Exactly 1 when `a = c`; otherwise estimated
/// from `draws` seeded samples.
pub fn tau_prior_median(cfg: &TripleGammaConfig, draws: usize, rng_seed: u64) -> Result<f64> {
    cfg.validate()?;
    if cfg.a == cfg.c {
        return Ok(1.0);
    }
    if draws == 0 {
        return invalid("draws must be at least 1");
    }
    let f = FDist::new(cfg.c, cfg.a)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut v: Vec<f64> = (0..draws).map(|_| f.sample(&mut rng)).collect();
    v.sort_by(f64::total_cmp);
    Ok(v[draws / 2])
}

/// Number of covariates with `ρ_j < 0.5`.
pub fn model_size(rho: &[f64]) -> Result<usize> {
    if let Some(r) = rho.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return invalid(format!("shrinkage factors must lie in [0, 1], got {r}"));
    }
    Ok(rho.iter().filter(|&&r| r < 0.5).count())
}

/// Empirical distribution of `π(τ) = Pr(ρ_j < 0.5 | τ)` and of the model size.
#[derive(Debug, Clone)]
pub struct ModelSizeStudy {
    pub tau: Vec<f64>,
    pub pi: Vec<f64>,
    pub model_size: Vec<usize>,
    pub d: usize,
}

impl ModelSizeStudy {
    pub fn ks_uniform(&self) -> f64 {
        ks_statistic_uniform(&self.pi)
    }

    pub fn mean_model_size(&self) -> f64 {
        self.model_size.iter().sum::<usize>() as f64 / self.model_size.len() as f64
    }

    /// Relative frequency of each model size `0..=d`.
    pub fn model_size_histogram(&self) -> Vec<f64> {
        let mut h = vec![0.0; self.d + 1];
        for &k in &self.model_size {
            h[k] += 1.0;
        }
        let n = self.model_size.len() as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    }
}

/// For each outer draw of `τ` (or the fixed value), estimates `π(τ)` from
/// `inner_draws` local scales and draws `K | τ ~ Binomial(d, π(τ))`.
///
/// The inner local scales are drawn once and shared by every outer draw, so
/// `π(τ)` is a step function of `τ` and a fixed `τ` gives exactly one value.
pub fn prior_model_size_study(
    d: usize,
    cfg: &TripleGammaConfig,
    draws: usize,
    inner_draws: usize,
    tau_fixed: Option<f64>,
    rng_seed: u64,
) -> Result<ModelSizeStudy> {
    cfg.validate()?;
    if d == 0 {
        return invalid("d must be at least 1");
    }
    if draws < 1000 {
        return invalid(format!("draws must be at least 1000, got {draws}"));
    }
    if inner_draws == 0 {
        return invalid("inner_draws must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let global = FDist::new(cfg.c, cfg.a)?;
    let local = FDist::new(cfg.a, cfg.c)?;
    let mut lambda: Vec<f64> = (0..inner_draws).map(|_| local.sample(&mut rng)).collect();
    lambda.sort_by(f64::total_cmp);
    let mut study = ModelSizeStudy {
        tau: Vec::with_capacity(draws),
        pi: Vec::with_capacity(draws),
        model_size: Vec::with_capacity(draws),
        d,
    };
    for _ in 0..draws {
        let tau = match tau_fixed {
            Some(t) => t,
            None => global.sample(&mut rng),
        };
        // ρ < 0.5  ⇔  τλ > 1
        let below = lambda.partition_point(|&l| tau * l <= 1.0);
        let pi = (inner_draws - below) as f64 / inner_draws as f64;
        let k = Binomial::new(d as u64, pi)
            .map_err(|e| crate::Error::InvalidArgument(e.to_string()))?
            .sample(&mut rng) as usize;
        study.tau.push(tau);
        study.pi.push(pi);
        study.model_size.push(k);
    }
    Ok(study)
}

/// One-sample Kolmogorov–Smirnov statistic against Uniform(0, 1).
pub fn ks_statistic_uniform(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at level 0.01.
pub fn ks_critical_001(n: usize) -> f64 {
    1.627_6 / (n as f64).sqrt()
}
