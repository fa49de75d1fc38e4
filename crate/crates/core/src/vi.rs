//! Stochastic variational inference with normalizing flows.
//!
//! Each iteration draws `S` base samples, pushes them through the flow,
//! evaluates the unnormalized log posterior at the resulting hyperparameters
//! and ascends the Monte Carlo ELBO
//!
//! ```text
//! ELBO_MC(φ) = (1/S) Σ_s [log p(y, ξ⁽ˢ⁾) + log |det J(u⁽ˢ⁾)| − log p_U(u⁽ˢ⁾)]
//! ```
//!
//! using reparameterization gradients. The last term does not depend on `φ`;
//! keeping it makes the estimate an actual lower bound on the log evidence. Samples whose covariance cannot be
//! factorized are dropped for that iteration.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flows::{log_base_density, standard_normal_vec, FlowStack};
use crate::grad::{clip_global_norm, Real, Tape};
use crate::kernel::{log_marginal_likelihood_grad, HyperParams};
use crate::prior::{log_exp_prior_sigma2, log_f_prior_tau_grad, log_triple_gamma_grad, TripleGammaConfig};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Unnormalized log density over a positive vector, with its gradient.
pub trait LogTarget: Sync {
    fn dim(&self) -> usize;
    fn log_density_grad(&self, xi: &[f64]) -> Result<(f64, Vec<f64>)>;
    fn log_density(&self, xi: &[f64]) -> Result<f64> {
        Ok(self.log_density_grad(xi)?.0)
    }
}

/// GP posterior over `ξ = (θ₁…θ_d, τ, σ²)` under the triple gamma prior.
#[derive(Debug, Clone, Copy)]
pub struct GpTarget<'a> {
    pub x: &'a DMatrix<f64>,
    pub y: &'a [f64],
    pub prior: TripleGammaConfig,
}

impl<'a> GpTarget<'a> {
    pub fn new(x: &'a DMatrix<f64>, y: &'a [f64], prior: TripleGammaConfig) -> Result<Self> {
        prior.validate().map_err(|e| Error::Config(e.to_string()))?;
        if x.nrows() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "X has {} rows but y has {} entries",
                x.nrows(),
                y.len()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidArgument("need at least one covariate".into()));
        }
        Ok(GpTarget { x, y, prior })
    }
}

impl LogTarget for GpTarget<'_> {
    fn dim(&self) -> usize {
        self.x.ncols() + 2
    }

    fn log_density_grad(&self, xi: &[f64]) -> Result<(f64, Vec<f64>)> {
        log_joint_grad(xi, self.y, self.x, &self.prior)
    }
}

/// Prior part of the log joint: triple gamma on each `θ_j`, F on `τ`,
/// exponential on `σ²`. Returns value and gradient in `ξ`.
pub fn log_prior_grad(xi: &[f64], cfg: &TripleGammaConfig) -> Result<(f64, Vec<f64>)> {
    let d = xi.len() - 2;
    let (tau, sigma2) = (xi[d], xi[d + 1]);
    let mut grad = vec![0.0; d + 2];
    let (mut value, g_tau) = log_f_prior_tau_grad(tau, cfg)?;
    grad[d] = g_tau;
    for j in 0..d {
        let tg = log_triple_gamma_grad(xi[j], cfg, tau)?;
        value += tg.value;
        grad[j] = tg.d_theta;
        grad[d] += tg.d_tau;
    }
    value += log_exp_prior_sigma2(sigma2, cfg);
    grad[d + 1] = -cfg.sigma2_rate;
    Ok((value, grad))
}

/// Unnormalized log posterior: GP log marginal likelihood without the
/// `−(N/2) log 2π` constant plus the log priors.
pub fn log_joint(xi: &[f64], y: &[f64], x: &DMatrix<f64>, cfg: &TripleGammaConfig) -> Result<f64> {
    Ok(log_joint_grad(xi, y, x, cfg)?.0)
}

pub fn log_joint_grad(xi: &[f64], y: &[f64], x: &DMatrix<f64>, cfg: &TripleGammaConfig) -> Result<(f64, Vec<f64>)> {
    if xi.len() != x.ncols() + 2 {
        return Err(Error::InvalidArgument(format!(
            "xi has {} entries, expected d + 2 = {}",
            xi.len(),
            x.ncols() + 2
        )));
    }
    let params = HyperParams::from_xi(xi)?;
    let lik = log_marginal_likelihood_grad(y, x, &params)?;
    let (prior, mut grad) = log_prior_grad(xi, cfg)?;
    for (g, l) in grad.iter_mut().zip(lik.to_xi_grad()) {
        *g += l;
    }
    let value = lik.value + y.len() as f64 * HALF_LN_2PI + prior;
    Ok((value, grad))
}

/// Per-sample contribution `log p(ξ) − log q(ξ)` and its gradient with
/// respect to the flow parameters.
pub fn sample_objective_grad<T: LogTarget + ?Sized>(
    stack: &FlowStack,
    target: &T,
    u0: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let p = tape.vars(stack.params());
    let u: Vec<_> = u0.iter().map(|&v| tape.constant(v)).collect();
    let (xi, log_det) = stack.forward_with(&p, &u);
    let xv: Vec<f64> = xi.iter().map(|v| v.value()).collect();
    if xv.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || !log_det.value().is_finite() {
        return Err(Error::Evaluation {
            value: log_det.value(),
            snapshot: xv,
        });
    }
    let (lp, g) = target.log_density_grad(&xv)?;
    let out = tape.custom(lp, &xi, &g) + log_det - log_base_density(u0);
    if !out.value().is_finite() {
        return Err(Error::Evaluation {
            value: out.value(),
            snapshot: xv,
        });
    }
    let adj = tape.gradient(out);
    Ok((out.value(), adj[..p.len()].to_vec()))
}

/// Per-sample contribution without gradients.
pub fn sample_objective<T: LogTarget + ?Sized>(stack: &FlowStack, target: &T, u0: &[f64]) -> Result<f64> {
    let s = stack.forward(u0)?;
    Ok(target.log_density(&s.xi)? + s.log_det - log_base_density(u0))
}

/// Monte Carlo ELBO over fixed noise, with the number of samples kept.
#[derive(Debug, Clone)]
pub struct ElboEstimate {
    pub value: f64,
    pub used: usize,
    pub grad: Option<Vec<f64>>,
}

/// `(1/S) Σ_s [log p(ξ⁽ˢ⁾) − log q(ξ⁽ˢ⁾)]` over the samples that evaluate.
pub fn elbo_mc<T: LogTarget + ?Sized>(stack: &FlowStack, target: &T, noise: &[Vec<f64>]) -> Result<ElboEstimate> {
    let vals: Vec<Result<f64>> = noise.par_iter().map(|u| sample_objective(stack, target, u)).collect();
    reduce(vals.into_iter().map(|r| r.map(|v| (v, Vec::new()))), false)
}

pub fn elbo_mc_grad<T: LogTarget + ?Sized>(stack: &FlowStack, target: &T, noise: &[Vec<f64>]) -> Result<ElboEstimate> {
    let vals: Vec<Result<(f64, Vec<f64>)>> = noise
        .par_iter()
        .map(|u| sample_objective_grad(stack, target, u))
        .collect();
    reduce(vals.into_iter(), true)
}

fn reduce(vals: impl Iterator<Item = Result<(f64, Vec<f64>)>>, with_grad: bool) -> Result<ElboEstimate> {
    let mut sum = 0.0;
    let mut grad: Option<Vec<f64>> = None;
    let mut used = 0;
    let mut last_err = None;
    for r in vals {
        match r {
            Ok((v, g)) => {
                sum += v;
                used += 1;
                if with_grad {
                    match &mut grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => grad = Some(g),
                    }
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    if used == 0 {
        return Err(last_err.unwrap_or_else(|| Error::InvalidArgument("no Monte Carlo samples".into())));
    }
    let n = used as f64;
    if let Some(g) = &mut grad {
        g.iter_mut().for_each(|v| *v /= n);
    }
    Ok(ElboEstimate {
        value: sum / n,
        used,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VIConfig {
    pub n_layers: usize,
    pub n_mc_samples: usize,
    pub n_iterations: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub elbo_window: usize,
    pub softplus_beta: f64,
    pub clip_norm: f64,
}

impl Default for VIConfig {
    fn default() -> Self {
        VIConfig {
            n_layers: 10,
            n_mc_samples: 10,
            n_iterations: 3000,
            learning_rate: 5e-3,
            optimizer: Optimizer::default(),
            seed: 0,
            elbo_window: 50,
            softplus_beta: 1.0,
            clip_norm: 1e3,
        }
    }
}

impl VIConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_mc_samples == 0 {
            return bad("n_mc_samples must be at least 1");
        }
        if self.n_iterations == 0 {
            return bad("n_iterations must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.elbo_window == 0 {
            return bad("elbo_window must be at least 1");
        }
        if !(self.softplus_beta > 0.0) {
            return bad("softplus_beta must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// First-order optimizer state for gradient ascent.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, lr: f64, n: usize) -> Self {
        OptimizerState {
            kind,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One ascent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += self.lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] += self.lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ElboTrace {
    pub elbo: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub seconds: Vec<f64>,
    /// Samples dropped at each iteration.
    pub rejected: Vec<usize>,
    /// First iteration at which the smoothed ELBO changed by less than 1e-4
    /// (relative) over one window.
    pub plateau_at: Option<usize>,
}

impl ElboTrace {
    pub fn len(&self) -> usize {
        self.elbo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elbo.is_empty()
    }

    fn push(&mut self, value: f64, seconds: f64, rejected: usize, window: usize) {
        self.elbo.push(value);
        self.seconds.push(seconds);
        self.rejected.push(rejected);
        let n = self.elbo.len();
        let lo = n.saturating_sub(window);
        let finite: Vec<f64> = self.elbo[lo..].iter().copied().filter(|v| v.is_finite()).collect();
        let sm = if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        self.smoothed.push(sm);
        if self.plateau_at.is_none() && n > 2 * window {
            let prev = self.smoothed[n - 1 - window];
            if ((sm - prev) / prev.abs().max(1e-12)).abs() < 1e-4 {
                self.plateau_at = Some(n - 1);
            }
        }
    }
}

/// Consecutive fully rejected iterations tolerated before giving up.
pub const MAX_REJECTED_ITERATIONS: usize = 50;

/// Runs the ascent loop from `init`.
pub fn fit<T: LogTarget + ?Sized>(target: &T, init: FlowStack, cfg: &VIConfig) -> Result<(FlowStack, ElboTrace)> {
    cfg.validate()?;
    if init.dim() != target.dim() {
        return Err(Error::InvalidArgument(format!(
            "flow dimension {} does not match target dimension {}",
            init.dim(),
            target.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stack = init;
    let mut params = stack.params().to_vec();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate, params.len());
    let mut trace = ElboTrace::default();
    let mut consecutive = 0;
    let d = stack.dim();
    for _ in 0..cfg.n_iterations {
        let start = Instant::now();
        let noise: Vec<Vec<f64>> = (0..cfg.n_mc_samples)
            .map(|_| standard_normal_vec(d, &mut rng))
            .collect();
        match elbo_mc_grad(&stack, target, &noise) {
            Ok(est) => {
                consecutive = 0;
                let mut g = est.grad.expect("gradient requested");
                clip_global_norm(&mut g, cfg.clip_norm);
                opt.step(&mut params, &g);
                stack = stack.with_params(&params)?;
                trace.push(
                    est.value,
                    start.elapsed().as_secs_f64(),
                    cfg.n_mc_samples - est.used,
                    cfg.elbo_window,
                );
            }
            Err(_) => {
                consecutive += 1;
                trace.push(
                    f64::NAN,
                    start.elapsed().as_secs_f64(),
                    cfg.n_mc_samples,
                    cfg.elbo_window,
                );
                if consecutive > MAX_REJECTED_ITERATIONS {
                    return Err(Error::Fit {
                        message: format!("{consecutive} consecutive iterations with no usable sample"),
                        trace: trace.elbo,
                    });
                }
            }
        }
    }
    Ok((stack, trace))
}

/// Density of `softplus(u)`, `u ~ N(0, I)`, plus a constant: a target with a
/// known normalizer `exp(log_norm)`.
#[derive(Debug, Clone, Copy)]
pub struct SoftplusNormalTarget {
    pub dim: usize,
    pub log_norm: f64,
}

impl LogTarget for SoftplusNormalTarget {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_grad(&self, xi: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut value = self.log_norm;
        let mut grad = Vec::with_capacity(xi.len());
        for &v in xi {
            if !(v > 0.0) {
                return Err(Error::Domain(format!("xi must be positive, got {v}")));
            }
            let x = crate::special::softplus_inv(v);
            let s = crate::special::sigmoid(x);
            value += -HALF_LN_2PI - 0.5 * x * x - crate::special::log_sigmoid(x);
            grad.push((-x - (1.0 - s)) / s);
        }
        Ok((value, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{FlowLayerParams, LayerKind};
    use crate::kernel::log_marginal_likelihood;
    use crate::prior::{log_f_prior_tau, log_triple_gamma};
    use rand::Rng;

    fn toy_data(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5f64..1.5));
        let y = (0..n)
            .map(|i| (2.0f64 * x[(i, 0)]).sin() + 0.1 * rng.random_range(-1.0..1.0))
            .collect();
        (x, y)
    }

    #[test]
    fn log_joint_decomposes() {
        let (x, y) = toy_data(6, 2, 1);
        let cfg = TripleGammaConfig::new(0.3, 0.4, 2.0).unwrap();
        let xi = [0.7, 0.2, 1.3, 0.05];
        let lj = log_joint(&xi, &y, &x, &cfg).unwrap();
        let lik = log_marginal_likelihood(&y, &x, &HyperParams::from_xi(&xi).unwrap()).unwrap() + 6.0 * HALF_LN_2PI;
        let prior = log_triple_gamma(0.7, &cfg, 1.3).unwrap()
            + log_triple_gamma(0.2, &cfg, 1.3).unwrap()
            + log_f_prior_tau(1.3, &cfg).unwrap()
            - 2.0 * 0.05;
        assert!((lj - lik - prior).abs() < 1e-12);
    }

    #[test]
    fn log_joint_scalar_hand_assembly() {
        let x = DMatrix::from_element(1, 1, 0.0);
        let cfg = TripleGammaConfig::new(0.5, 0.5, 10.0).unwrap();
        let xi = [1.0, 1.0, 0.1];
        let lj = log_joint(&xi, &[0.0], &x, &cfg).unwrap();
        let jitter = 1e-8 * 1.1;
        let want =
            -0.5 * (1.1f64 + jitter).ln() + log_triple_gamma(1.0, &cfg, 1.0).unwrap() - std::f64::consts::LN_2 - 1.0;
        assert!((lj - want).abs() < 1e-12, "{lj} vs {want}");
        // doubling the rate shifts by −λσ²
        let cfg2 = TripleGammaConfig::new(0.5, 0.5, 20.0).unwrap();
        let lj2 = log_joint(&xi, &[0.0], &x, &cfg2).unwrap();
        assert!((lj2 - lj + 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_joint_gradient_matches_fd() {
        let (x, y) = toy_data(8, 3, 2);
        let cfg = TripleGammaConfig::new(0.1, 0.1, 10.0).unwrap();
        let xi = [0.4, 0.05, 2.0, 0.8, 0.2];
        let (_, g) = log_joint_grad(&xi, &y, &x, &cfg).unwrap();
        for k in 0..xi.len() {
            let h = 1e-6 * xi[k];
            let mut up = xi;
            let mut dn = xi;
            up[k] += h;
            dn[k] -= h;
            let num = (log_joint(&up, &y, &x, &cfg).unwrap() - log_joint(&dn, &y, &x, &cfg).unwrap()) / (2.0 * h);
            assert!(
                (g[k] - num).abs() < 1e-5 * num.abs().max(1.0),
                "k={k} {} vs {num}",
                g[k]
            );
        }
    }

    #[test]
    fn elbo_of_softplus_only_stack() {
        let (x, y) = toy_data(5, 1, 3);
        let cfg = TripleGammaConfig::new(0.5, 0.5, 10.0).unwrap();
        let target = GpTarget::new(&x, &y, cfg).unwrap();
        let stack = FlowStack::from_layers(3, 1.0, &[]).unwrap();
        let u = vec![0.3, -0.2, -1.0];
        let e = elbo_mc(&stack, &target, std::slice::from_ref(&u)).unwrap();
        let xi: Vec<f64> = u.iter().map(|&v| crate::special::softplus(v)).collect();
        let want = log_joint(&xi, &y, &x, &cfg).unwrap()
            + u.iter().map(|&v| crate::special::log_sigmoid(v)).sum::<f64>()
            - log_base_density(&u);
        assert!((e.value - want).abs() < 1e-12);
    }

    #[test]
    fn mc_elbo_gradient_matches_fd() {
        let (x, y) = toy_data(10, 1, 4);
        let cfg = TripleGammaConfig::new(0.5, 0.5, 10.0).unwrap();
        let target = GpTarget::new(&x, &y, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = FlowStack::with_kinds(3, &[LayerKind::Sylvester], 1.0, &mut rng).unwrap();
        // move off the identity so every parameter matters
        let p: Vec<f64> = stack
            .params()
            .iter()
            .map(|v| v + 0.3 * rng.random_range(-1.0..1.0))
            .collect();
        let stack = stack.with_params(&p).unwrap();
        let noise: Vec<Vec<f64>> = (0..2).map(|_| standard_normal_vec(3, &mut rng)).collect();
        let g = elbo_mc_grad(&stack, &target, &noise).unwrap().grad.unwrap();
        let f = |q: &[f64]| elbo_mc(&stack.with_params(q).unwrap(), &target, &noise).unwrap().value;
        for k in 0..p.len() {
            let h = 1e-5;
            let mut up = p.clone();
            let mut dn = p.clone();
            up[k] += h;
            dn[k] -= h;
            let num = (f(&up) - f(&dn)) / (2.0 * h);
            if g[k].abs() > 1e-6 {
                assert!(
                    (g[k] - num).abs() < 1e-4 * g[k].abs().max(num.abs()),
                    "k={k} {} vs {num}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn kl_sanity_reaches_zero() {
        let target = SoftplusNormalTarget { dim: 1, log_norm: 0.0 };
        let start = FlowLayerParams::DiagAffine {
            shift: vec![1.5],
            log_scale: vec![-1.0],
        };
        let stack = FlowStack::from_layers(1, 1.0, &[start]).unwrap();
        let cfg = VIConfig {
            n_iterations: 3000,
            learning_rate: 1e-2,
            n_mc_samples: 8,
            ..VIConfig::default()
        };
        let (fitted, trace) = fit(&target, stack, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let noise: Vec<Vec<f64>> = (0..4000).map(|_| standard_normal_vec(1, &mut rng)).collect();
        let e = elbo_mc(&fitted, &target, &noise).unwrap().value;
        assert!(e <= 1e-9 && e > -1e-2, "{e}");
        assert_eq!(trace.len(), 3000);
    }

    #[test]
    fn elbo_never_exceeds_log_normalizer() {
        let target = SoftplusNormalTarget { dim: 2, log_norm: 1.7 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for kinds in [
            vec![LayerKind::Sylvester],
            vec![LayerKind::Radial, LayerKind::DiagAffine],
        ] {
            let s = FlowStack::with_kinds(2, &kinds, 1.0, &mut rng).unwrap();
            let p: Vec<f64> = s
                .params()
                .iter()
                .map(|v| v + 0.5 * rng.random_range(-1.0..1.0))
                .collect();
            let s = s.with_params(&p).unwrap();
            let vals: Vec<f64> = (0..200)
                .map(|_| {
                    let noise: Vec<Vec<f64>> = (0..10).map(|_| standard_normal_vec(2, &mut rng)).collect();
                    elbo_mc(&s, &target, &noise).unwrap().value
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / 200.0;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 199.0).sqrt();
            assert!(mean <= 1.7 + 3.0 * sd / 200f64.sqrt(), "{mean}");
        }
    }

    #[test]
    fn small_step_does_not_decrease_elbo() {
        let (x, y) = toy_data(12, 2, 7);
        let target = GpTarget::new(&x, &y, TripleGammaConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let stack = FlowStack::sylvester(4, 2, 1.0, &mut rng).unwrap();
        let noise: Vec<Vec<f64>> = (0..4).map(|_| standard_normal_vec(4, &mut rng)).collect();
        let est = elbo_mc_grad(&stack, &target, &noise).unwrap();
        let mut p = stack.params().to_vec();
        let mut opt = OptimizerState::new(Optimizer::Sgd, 1e-6, p.len());
        opt.step(&mut p, est.grad.as_ref().unwrap());
        let after = elbo_mc(&stack.with_params(&p).unwrap(), &target, &noise).unwrap().value;
        assert!(after >= est.value - 1e-10);
    }

    #[test]
    fn fit_is_deterministic() {
        let (x, y) = toy_data(10, 2, 9);
        let target = GpTarget::new(&x, &y, TripleGammaConfig::default()).unwrap();
        let cfg = VIConfig {
            n_iterations: 20,
            n_mc_samples: 3,
            seed: 4,
            ..VIConfig::default()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let s = FlowStack::sylvester(4, 2, 1.0, &mut rng).unwrap();
            fit(&target, s, &cfg).unwrap()
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(
            ta.elbo.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            tb.elbo.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn config_validation() {
        assert!(VIConfig {
            n_mc_samples: 0,
            ..VIConfig::default()
        }
        .validate()
        .is_err());
        assert!(VIConfig {
            n_iterations: 0,
            ..VIConfig::default()
        }
        .validate()
        .is_err());
        assert!(VIConfig::default().validate().is_ok());
    }
}
