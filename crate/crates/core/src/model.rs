//! Fitting, posterior sampling, prediction and checkpoints for GP models.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Dataset, Manifest, Standardization};
use crate::error::{invalid, Error, Result};
use crate::flows::{log_base_density, standard_normal_vec, FlowStack, LayerKind, LayerSpec};
use crate::kernel::{log_marginal_likelihood_grad, predictive_distribution, HyperParams};
use crate::prior::{sample_hierarchy_with, TripleGammaConfig};
use crate::special::{sigmoid, softplus, softplus_inv};
use crate::vi::{self, ElboTrace, GpTarget, VIConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Posterior draws used for prediction when the caller has no preference.
pub const DEFAULT_PREDICTIVE_DRAWS: usize = 256;
pub const DEFAULT_RESTARTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Sylvester normalizing flow.
    Nf,
    /// Factorized Gaussian before the softplus.
    Mf,
    /// Type-II maximum likelihood point estimate.
    Ml,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Nf => "nf",
            Method::Mf => "mf",
            Method::Ml => "ml",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "nf" => Some(Method::Nf),
            "mf" => Some(Method::Mf),
            "ml" => Some(Method::Ml),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Estimate {
    Flow(FlowStack),
    Point(HyperParams),
}

/// One maximum likelihood restart: its starting `ξ`, the final log marginal
/// likelihood (`None` if the run failed) and the iteration count.
#[derive(Debug, Clone, PartialEq)]
pub struct MlRestart {
    pub start: Vec<f64>,
    pub log_lik: Option<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FitTrace {
    Elbo(ElboTrace),
    Restarts(Vec<MlRestart>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub method: Method,
    pub estimate: Estimate,
    pub trace: FitTrace,
    /// `None` for maximum likelihood fits.
    pub prior: Option<TripleGammaConfig>,
    /// Training data on the modelling scale; prediction conditions on it.
    pub train: Dataset,
    pub seed: u64,
}

impl FitResult {
    pub fn stack(&self) -> Option<&FlowStack> {
        match &self.estimate {
            Estimate::Flow(s) => Some(s),
            Estimate::Point(_) => None,
        }
    }

    pub fn point(&self) -> Option<&HyperParams> {
        match &self.estimate {
            Estimate::Point(p) => Some(p),
            Estimate::Flow(_) => None,
        }
    }

    pub fn elbo_trace(&self) -> Option<&ElboTrace> {
        match &self.trace {
            FitTrace::Elbo(t) => Some(t),
            FitTrace::Restarts(_) => None,
        }
    }

    pub fn standardization(&self) -> &Standardization {
        &self.train.standardization
    }

    /// Covariates on the modelling scale.
    pub fn d(&self) -> usize {
        self.train.d()
    }
}

/// Starting location of the variational families: `θ_j = 1/d`,
/// `1/τ = var(y)`, `σ² = var(y)/10`.
pub fn initial_xi(data: &Dataset) -> Vec<f64> {
    let d = data.d();
    let n = data.n() as f64;
    let mean = data.y.iter().sum::<f64>() / n;
    let var = (data.y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).max(1e-6);
    let mut xi = vec![1.0 / d as f64; d];
    xi.push(1.0 / var);
    xi.push(0.1 * var);
    xi
}

/// Moves the final diag-affine layer so that the flow's median starts at
/// `xi0` (through the softplus with slope `beta`).
fn center_stack(stack: FlowStack, xi0: &[f64]) -> Result<FlowStack> {
    let beta = stack.softplus_beta();
    let pv = stack.param_vector();
    let last = stack.n_layers() - 1;
    let range = pv
        .layout
        .iter()
        .find(|b| b.layer == last && b.field == "shift")
        .map(|b| b.range.clone())
        .ok_or_else(|| Error::InvalidArgument("stack must end with a diag-affine layer".into()))?;
    let mut flat = pv.flat;
    for (p, &x) in flat[range].iter_mut().zip(xi0) {
        *p = softplus_inv(beta * x) / beta;
    }
    stack.with_params(&flat)
}

fn fit_flow(data: &Dataset, prior: &TripleGammaConfig, cfg: &VIConfig, method: Method) -> Result<FitResult> {
    cfg.validate()?;
    let target = GpTarget::new(&data.x, &data.y, *prior)?;
    let dim = data.d() + 2;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f10e);
    let stack = match method {
        Method::Nf => FlowStack::sylvester(dim, cfg.n_layers, cfg.softplus_beta, &mut init_rng)?,
        _ => FlowStack::mean_field(dim, cfg.softplus_beta)?,
    };
    let stack = center_stack(stack, &initial_xi(data))?;
    let (stack, trace) = vi::fit(&target, stack, cfg)?;
    Ok(FitResult {
        method,
        estimate: Estimate::Flow(stack),
        trace: FitTrace::Elbo(trace),
        prior: Some(*prior),
        train: data.clone(),
        seed: cfg.seed,
    })
}

/// Normalizing-flow fit with `vi_cfg.n_layers` Sylvester layers.
pub fn fit_nf(data: &Dataset, prior: &TripleGammaConfig, vi_cfg: &VIConfig) -> Result<FitResult> {
    fit_flow(data, prior, vi_cfg, Method::Nf)
}

/// Mean-field fit: a single diag-affine layer, `vi_cfg.n_layers` is ignored.
pub fn fit_mf(data: &Dataset, prior: &TripleGammaConfig, vi_cfg: &VIConfig) -> Result<FitResult> {
    fit_flow(data, prior, vi_cfg, Method::Mf)
}

/// Negative log marginal likelihood over `z = softplus⁻¹(ξ)`.
fn neg_lml(data: &Dataset, z: &[f64]) -> Option<(f64, Vec<f64>)> {
    let xi: Vec<f64> = z.iter().map(|&v| softplus(v)).collect();
    let params = HyperParams::from_xi(&xi).ok()?;
    let g = log_marginal_likelihood_grad(&data.y, &data.x, &params).ok()?;
    if !g.value.is_finite() {
        return None;
    }
    let grad: Vec<f64> = g.to_xi_grad().iter().zip(z).map(|(gx, &v)| -gx * sigmoid(v)).collect();
    if grad.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((-g.value, grad))
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS with Armijo backtracking. `f` returns `None` where
/// it cannot be evaluated; the line search treats that as an increase.
fn lbfgs<F>(f: F, x0: Vec<f64>, max_iter: usize) -> Option<(Vec<f64>, f64, usize)>
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    const MEMORY: usize = 10;
    let (mut fx, mut g) = f(&x0)?;
    let mut x = x0;
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut iter = 0;
    while iter < max_iter {
        iter += 1;
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax < 1e-6 * fx.abs().max(1.0) {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dotp(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = match hist.last() {
            Some((s, y, _)) => dotp(s, y) / dotp(y, y),
            None => 1.0 / g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dotp(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dotp(&g, &dir);
        if !(slope < 0.0) {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dotp(&g, &dir);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + step * b).collect();
            if let Some((fn_, gn)) = f(&xn) {
                if fn_ <= fx + 1e-4 * step * slope {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else { break };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dotp(&s, &y);
        if sy > 1e-12 {
            if hist.len() == MEMORY {
                hist.remove(0);
            }
            hist.push((s, y, 1.0 / sy));
        }
        let decrease = fx - fn_;
        x = xn;
        fx = fn_;
        g = gn;
        if decrease.abs() < 1e-12 * fx.abs().max(1.0) {
            break;
        }
    }
    Some((x, fx, iter))
}

/// Type-II maximum likelihood with `n_restarts` L-BFGS runs. Each restart
/// draws `θ_j` log-uniformly on `[1e-3, 10]` and starts `τ`, `σ²` from the
/// response variance.
pub fn fit_ml(data: &Dataset, n_restarts: usize, seed: u64) -> Result<FitResult> {
    if n_restarts == 0 {
        return invalid("n_restarts must be at least 1");
    }
    if data.n() == 0 || data.d() == 0 {
        return invalid("maximum likelihood needs a nonempty design");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = initial_xi(data);
    let d = data.d();
    let starts: Vec<Vec<f64>> = (0..n_restarts)
        .map(|_| {
            let mut xi: Vec<f64> = (0..d)
                .map(|_| rng.random_range(1e-3f64.ln()..10f64.ln()).exp())
                .collect();
            xi.extend_from_slice(&base[d..]);
            xi
        })
        .collect();
    let runs: Vec<(MlRestart, Option<Vec<f64>>)> = starts
        .into_par_iter()
        .map(|start| {
            let z0: Vec<f64> = start.iter().map(|&v| softplus_inv(v)).collect();
            match lbfgs(|z| neg_lml(data, z), z0, 500) {
                Some((z, f, iters)) => (
                    MlRestart {
                        start,
                        log_lik: Some(-f),
                        iterations: iters,
                    },
                    Some(z.iter().map(|&v| softplus(v)).collect()),
                ),
                None => (
                    MlRestart {
                        start,
                        log_lik: None,
                        iterations: 0,
                    },
                    None,
                ),
            }
        })
        .collect();
    let best = runs.iter().filter_map(|(r, xi)| Some((r.log_lik?, xi.as_ref()?))).fold(
        None::<(f64, &Vec<f64>)>,
        |acc, (l, xi)| match acc {
            Some((bl, _)) if bl >= l => acc,
            _ => Some((l, xi)),
        },
    );
    let Some((_, xi)) = best else {
        return Err(Error::Fit {
            message: format!("all {n_restarts} restarts failed"),
            trace: Vec::new(),
        });
    };
    let point = HyperParams::from_xi(xi)?;
    Ok(FitResult {
        method: Method::Ml,
        estimate: Estimate::Point(point),
        trace: FitTrace::Restarts(runs.into_iter().map(|(r, _)| r).collect()),
        prior: None,
        train: data.clone(),
        seed,
    })
}

/// Hyperparameter draws from a variational fit, one row per draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub xi: DMatrix<f64>,
    pub log_q: Vec<f64>,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.xi.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.nrows() == 0
    }

    pub fn row(&self, s: usize) -> Vec<f64> {
        self.xi.row(s).iter().copied().collect()
    }
}

pub fn sample_posterior(fit: &FitResult, n_draws: usize, seed: u64) -> Result<PosteriorDraws> {
    let stack = fit
        .stack()
        .ok_or_else(|| Error::Unsupported("maximum likelihood fits have no posterior".into()))?;
    if n_draws == 0 {
        return invalid("n_draws must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = stack.dim();
    let mut xi = DMatrix::zeros(n_draws, dim);
    let mut log_q = Vec::with_capacity(n_draws);
    for s in 0..n_draws {
        let u0 = standard_normal_vec(dim, &mut rng);
        let fs = stack.forward(&u0)?;
        for (j, &v) in fs.xi.iter().enumerate() {
            xi[(s, j)] = v;
        }
        log_q.push(log_base_density(&u0) - fs.log_det);
    }
    Ok(PosteriorDraws { xi, log_q })
}

/// Brings `test` onto the fit's modelling scale. Accepts raw data or data
/// already carrying the fit's standardization.
pub fn to_model_scale(fit: &FitResult, test: &Dataset) -> Result<Dataset> {
    let std = fit.standardization();
    let out = if test.standardization == *std {
        test.clone()
    } else if test.standardization.is_identity() {
        std.apply(test)?
    } else {
        return invalid("test data carries a different standardization than the fit");
    };
    if out.d() != fit.d() {
        return invalid(format!("test data has {} covariates, the fit has {}", out.d(), fit.d()));
    }
    Ok(out)
}

fn normal_log_pdf(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (y - mean) * (y - mean) / var)
}

/// Per-draw predictive moments at the test rows; draws whose covariance
/// cannot be factorized are dropped.
fn predictive_moments(fit: &FitResult, test: &Dataset, n_draws: usize, seed: u64) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let points: Vec<HyperParams> = match &fit.estimate {
        Estimate::Point(p) => vec![p.clone()],
        Estimate::Flow(_) => {
            let draws = sample_posterior(fit, n_draws, seed)?;
            (0..draws.len())
                .map(|s| HyperParams::from_xi(&draws.row(s)))
                .collect::<Result<_>>()?
        }
    };
    let moments: Vec<(Vec<f64>, Vec<f64>)> = points
        .par_iter()
        .filter_map(|p| {
            let (m, v) = predictive_distribution(&fit.train.x, &fit.train.y, &test.x, p).ok()?;
            Some((m.iter().copied().collect(), v.iter().copied().collect()))
        })
        .collect();
    if moments.is_empty() {
        return Err(Error::Numerical {
            message: "no posterior draw gave a usable predictive distribution".into(),
            residual: f64::NAN,
        });
    }
    Ok(moments)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpdsReport {
    pub per_point: Vec<f64>,
    pub mean: f64,
    pub draws_used: usize,
}

/// Average log predictive density of the test responses. Variational fits
/// average the predictive density over `n_draws` posterior draws before
/// taking the log; maximum likelihood fits use the plug-in predictive.
pub fn lpds(fit: &FitResult, test: &Dataset, n_draws: usize, seed: u64) -> Result<LpdsReport> {
    let test = to_model_scale(fit, test)?;
    if test.n() == 0 {
        return invalid("test set is empty");
    }
    let moments = predictive_moments(fit, &test, n_draws, seed)?;
    let used = moments.len();
    let ln_s = (used as f64).ln();
    let per_point: Vec<f64> = (0..test.n())
        .map(|i| {
            let terms: Vec<f64> = moments
                .iter()
                .map(|(m, v)| normal_log_pdf(test.y[i], m[i], v[i]))
                .collect();
            let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln() - ln_s
        })
        .collect();
    let mean = per_point.iter().sum::<f64>() / per_point.len() as f64;
    Ok(LpdsReport {
        per_point,
        mean,
        draws_used: used,
    })
}

/// Predictive mean and variance per test row, in raw response units.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn predict(fit: &FitResult, test: &Dataset, n_draws: usize, seed: u64) -> Result<Prediction> {
    let test = to_model_scale(fit, test)?;
    let moments = predictive_moments(fit, &test, n_draws, seed)?;
    let s = moments.len() as f64;
    let std = fit.standardization();
    let mut mean = Vec::with_capacity(test.n());
    let mut var = Vec::with_capacity(test.n());
    for i in 0..test.n() {
        let m = moments.iter().map(|(m, _)| m[i]).sum::<f64>() / s;
        let second = moments.iter().map(|(mm, v)| v[i] + mm[i] * mm[i]).sum::<f64>() / s;
        mean.push(std.restore_y(m));
        var.push((second - m * m).max(0.0));
    }
    Ok(Prediction { mean, var })
}

/// Posterior summary of one `θ_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct InclusionRow {
    pub index: usize,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    /// Share of draws below the prior median of `θ_j`.
    pub below_prior_median: f64,
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quantile of the marginal prior of a single `θ_j` with `τ` integrated
/// out, by simulation.
pub fn prior_theta_quantile(cfg: &TripleGammaConfig, p: f64, n: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        v.push(sample_hierarchy_with(1, cfg, None, &mut rng)?.theta[0]);
    }
    v.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&v, p))
}

/// Median and central 90% interval of each `θ_j`, sorted by descending
/// median (ties by index).
pub fn inclusion_summary(draws: &PosteriorDraws, prior: &TripleGammaConfig) -> Result<Vec<InclusionRow>> {
    if draws.is_empty() {
        return invalid("no draws to summarize");
    }
    if draws.xi.ncols() < 3 {
        return invalid("draws must have at least one θ column");
    }
    let reference = prior_theta_quantile(prior, 0.5, 20_000, 0)?;
    let d = draws.xi.ncols() - 2;
    let mut rows: Vec<InclusionRow> = (0..d)
        .map(|j| {
            let mut col: Vec<f64> = draws.xi.column(j).iter().copied().collect();
            col.sort_by(f64::total_cmp);
            InclusionRow {
                index: j,
                median: quantile_sorted(&col, 0.5),
                lower: quantile_sorted(&col, 0.05),
                upper: quantile_sorted(&col, 0.95),
                below_prior_median: col.partition_point(|&v| v < reference) as f64 / col.len() as f64,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.median.total_cmp(&a.median).then(a.index.cmp(&b.index)));
    Ok(rows)
}

const MAGIC: &[u8; 8] = b"FLOWGPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn f64s<T: Copy + Into<f64>>(v: &[T]) -> Vec<f64> {
    v.iter().map(|&x| x.into()).collect()
}

/// Versioned binary container: magic, version, a `key=value` manifest, then
/// named little-endian `f64` sections whose lengths the manifest lists.
/// Wall-clock timings are not stored, so identical fits give identical bytes.
pub fn save_checkpoint(fit: &FitResult) -> Vec<u8> {
    let mut m = Manifest::new();
    let mut sections: Vec<(&str, Vec<f64>)> = Vec::new();
    m.set("method", fit.method.name());
    m.set("seed", fit.seed);
    let train = &fit.train;
    m.set("n", train.n());
    m.set("d", train.d());
    if let Some(p) = &fit.prior {
        m.set("prior.a", format!("{:?}", p.a));
        m.set("prior.c", format!("{:?}", p.c));
        m.set("prior.sigma2_rate", format!("{:?}", p.sigma2_rate));
    }
    m.set("response_name", &train.response_name);
    for (j, name) in train.feature_names.iter().enumerate() {
        m.set(format!("feature.{j}"), name);
    }
    m.set(
        "binary_mask",
        train
            .binary_mask
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect::<String>(),
    );
    let std = &train.standardization;
    m.set("std.raw_dim", std.raw_dim);
    m.set(
        "std.columns",
        std.columns.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
    );
    sections.push(("x", train.x.transpose().as_slice().to_vec()));
    sections.push(("y", train.y.clone()));
    sections.push(("std.means", std.means.clone()));
    sections.push(("std.scales", std.scales.clone()));
    sections.push(("std.y_center", vec![std.y_center]));
    match &fit.estimate {
        Estimate::Flow(s) => {
            m.set("dim", s.dim());
            m.set("softplus_beta", format!("{:?}", s.softplus_beta()));
            m.set(
                "layers",
                s.specs()
                    .iter()
                    .map(|l| format!("{}:{}", l.kind.name(), l.m))
                    .collect::<Vec<_>>()
                    .join(","),
            );
            sections.push(("params", s.params().to_vec()));
        }
        Estimate::Point(p) => {
            m.set("dim", p.dim() + 2);
            sections.push(("point", p.to_xi()));
        }
    }
    match &fit.trace {
        FitTrace::Elbo(t) => {
            m.set("trace", "elbo");
            m.set("plateau_at", t.plateau_at.map_or("none".to_string(), |p| p.to_string()));
            sections.push(("elbo", t.elbo.clone()));
            sections.push(("smoothed", t.smoothed.clone()));
            sections.push(("rejected", t.rejected.iter().map(|&r| r as f64).collect()));
        }
        FitTrace::Restarts(rs) => {
            m.set("trace", "restarts");
            m.set("restarts", rs.len());
            sections.push(("restart.start", rs.iter().flat_map(|r| r.start.clone()).collect()));
            sections.push((
                "restart.log_lik",
                rs.iter().map(|r| r.log_lik.unwrap_or(f64::NAN)).collect(),
            ));
            sections.push((
                "restart.iterations",
                f64s(&rs.iter().map(|r| r.iterations as u32).collect::<Vec<_>>()),
            ));
        }
    }
    m.set(
        "sections",
        sections
            .iter()
            .map(|(name, v)| format!("{name}:{}", v.len()))
            .collect::<Vec<_>>()
            .join(","),
    );
    let text = m.to_text();
    let total: usize = sections.iter().map(|(_, v)| v.len()).sum();
    let mut out = Vec::with_capacity(28 + text.len() + 8 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(total as u64).to_le_bytes());
    for (_, v) in &sections {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                ck(format!(
                    "truncated: needed {n} bytes at offset {}, {} available",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<FitResult> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(ck("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ck(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let text_len = cur.u64()? as usize;
    let text = std::str::from_utf8(cur.take(text_len)?).map_err(|_| ck("manifest is not UTF-8"))?;
    let m = Manifest::from_text(text)?;
    let total = cur.u64()? as usize;
    let mut sections: Vec<(String, Vec<f64>)> = Vec::new();
    let mut declared = 0usize;
    for entry in m
        .get("sections")
        .ok_or_else(|| ck("manifest lists no sections"))?
        .split(',')
    {
        let (name, len) = entry
            .split_once(':')
            .ok_or_else(|| ck(format!("bad section entry {entry:?}")))?;
        let len: usize = len.parse().map_err(|_| ck(format!("bad section length {entry:?}")))?;
        declared = declared
            .checked_add(len)
            .ok_or_else(|| ck("section lengths overflow"))?;
        let raw = cur.take(len.checked_mul(8).ok_or_else(|| ck("section too large"))?)?;
        let v = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        sections.push((name.to_string(), v));
    }
    if declared != total {
        return Err(ck(format!(
            "payload count {total} disagrees with sections ({declared})"
        )));
    }
    if cur.pos != bytes.len() {
        return Err(ck(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    let mut take = |name: &str| -> Result<Vec<f64>> {
        let i = sections
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| ck(format!("missing section {name}")))?;
        Ok(sections.swap_remove(i).1)
    };

    let method_name = m.get("method").ok_or_else(|| ck("missing method"))?;
    let method = Method::from_name(method_name).ok_or_else(|| ck(format!("unknown method {method_name:?}")))?;
    let n: usize = m.parse("n")?;
    let d: usize = m.parse("d")?;
    let x_flat = take("x")?;
    let y = take("y")?;
    if x_flat.len() != n * d || y.len() != n {
        return Err(ck("training data shape disagrees with the manifest"));
    }
    let mask = m.get("binary_mask").unwrap_or("");
    if mask.len() != d {
        return Err(ck("binary mask has the wrong length"));
    }
    let columns = match m.get("std.columns").unwrap_or("") {
        "" => Vec::new(),
        s => s
            .split(',')
            .map(|c| c.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| ck("bad standardization columns"))?,
    };
    let std = Standardization {
        raw_dim: m.parse("std.raw_dim")?,
        columns,
        means: take("std.means")?,
        scales: take("std.scales")?,
        y_center: *take("std.y_center")?.first().ok_or_else(|| ck("empty y_center"))?,
    };
    if std.columns.len() != d || std.means.len() != d || std.scales.len() != d {
        return Err(ck("standardization shape disagrees with d"));
    }
    let train = Dataset {
        x: DMatrix::from_row_slice(n, d, &x_flat),
        y,
        feature_names: (0..d)
            .map(|j| {
                m.get(&format!("feature.{j}"))
                    .map(str::to_string)
                    .ok_or_else(|| ck("missing feature name"))
            })
            .collect::<Result<_>>()?,
        response_name: m.get("response_name").unwrap_or("y").to_string(),
        binary_mask: mask.chars().map(|c| c == '1').collect(),
        standardization: std,
    };
    let prior = match m.get("prior.a") {
        Some(_) => Some(TripleGammaConfig::new(
            m.parse("prior.a")?,
            m.parse("prior.c")?,
            m.parse("prior.sigma2_rate")?,
        )?),
        None => None,
    };
    let dim: usize = m.parse("dim")?;
    if dim != d + 2 {
        return Err(ck(format!("dimension {dim} does not match d + 2 = {}", d + 2)));
    }
    let estimate = match method {
        Method::Ml => Estimate::Point(HyperParams::from_xi(&take("point")?)?),
        _ => {
            let specs = m
                .get("layers")
                .ok_or_else(|| ck("missing layers"))?
                .split(',')
                .map(|l| {
                    let (kind, width) = l.split_once(':').ok_or_else(|| ck(format!("bad layer {l:?}")))?;
                    let kind = LayerKind::from_name(kind).ok_or_else(|| ck(format!("unknown layer kind {kind:?}")))?;
                    let width = width.parse().map_err(|_| ck(format!("bad layer width {l:?}")))?;
                    Ok(LayerSpec::new(kind, dim, width))
                })
                .collect::<Result<Vec<_>>>()?;
            Estimate::Flow(FlowStack::from_specs(
                dim,
                m.parse("softplus_beta")?,
                specs,
                take("params")?,
            )?)
        }
    };
    let trace = match m.get("trace") {
        Some("elbo") => FitTrace::Elbo(ElboTrace {
            elbo: take("elbo")?,
            smoothed: take("smoothed")?,
            seconds: Vec::new(),
            rejected: take("rejected")?.iter().map(|&r| r as usize).collect(),
            plateau_at: match m.get("plateau_at") {
                Some("none") | None => None,
                Some(_) => Some(m.parse("plateau_at")?),
            },
        }),
        Some("restarts") => {
            let k: usize = m.parse("restarts")?;
            let starts = take("restart.start")?;
            let ll = take("restart.log_lik")?;
            let it = take("restart.iterations")?;
            if starts.len() != k * dim || ll.len() != k || it.len() != k {
                return Err(ck("restart sections have inconsistent lengths"));
            }
            FitTrace::Restarts(
                (0..k)
                    .map(|r| MlRestart {
                        start: starts[r * dim..(r + 1) * dim].to_vec(),
                        log_lik: if ll[r].is_nan() { None } else { Some(ll[r]) },
                        iterations: it[r] as usize,
                    })
                    .collect(),
            )
        }
        other => return Err(ck(format!("unknown trace kind {other:?}"))),
    };
    Ok(FitResult {
        method,
        estimate,
        trace,
        prior,
        train,
        seed: m.parse("seed")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{simulate, GammaConvention, SimConfig};
    use crate::kernel::log_marginal_likelihood;

    fn small_sim(d: usize, n: usize, seed: u64) -> (Dataset, Dataset, Vec<f64>) {
        let mut cfg = SimConfig::new(d, n, 0.5, 0.5, seed);
        cfg.n_test = 40;
        cfg.convention = GammaConvention::Rate;
        let sim = simulate(&cfg).unwrap();
        (sim.train, sim.test, sim.truth.theta)
    }

    fn quick_cfg(seed: u64) -> VIConfig {
        VIConfig {
            n_layers: 2,
            n_mc_samples: 4,
            n_iterations: 150,
            learning_rate: 1e-2,
            seed,
            ..VIConfig::default()
        }
    }

    fn point_fit(train: Dataset, params: HyperParams) -> FitResult {
        FitResult {
            method: Method::Ml,
            estimate: Estimate::Point(params),
            trace: FitTrace::Restarts(Vec::new()),
            prior: None,
            train,
            seed: 0,
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Nf, Method::Mf, Method::Ml] {
            assert_eq!(Method::from_name(m.name()), Some(m));
        }
        assert_eq!(Method::from_name("hmc"), None);
    }

    #[test]
    fn single_standard_normal_point_scores_its_log_density() {
        // one training point far away leaves the test predictive at N(0, 1/τ + σ²)
        let train = Dataset::unnamed(DMatrix::from_element(1, 1, 1e3), vec![0.0]).unwrap();
        let test = Dataset::unnamed(DMatrix::from_element(1, 1, 0.0), vec![0.0]).unwrap();
        let fit = point_fit(train, HyperParams::new(vec![1.0], 2.0, 0.5).unwrap());
        let r = lpds(&fit, &test, 1, 0).unwrap();
        assert!((r.mean + 0.918_938_533_204_672_7).abs() < 1e-12, "{}", r.mean);
        assert_eq!(r.per_point.len(), 1);
    }

    #[test]
    fn lpds_mixture_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(6, 1, |_, _| rng.random_range(-1.0f64..1.0));
        let y: Vec<f64> = (0..6).map(|i| x[(i, 0)].sin()).collect();
        let train = Dataset::unnamed(x, y).unwrap();
        let test = Dataset::unnamed(DMatrix::from_row_slice(2, 1, &[0.2, -0.4]), vec![0.1, -0.3]).unwrap();
        let stack = FlowStack::mean_field(3, 1.0).unwrap();
        let fit = FitResult {
            method: Method::Mf,
            estimate: Estimate::Flow(stack),
            trace: FitTrace::Elbo(ElboTrace::default()),
            prior: Some(TripleGammaConfig::default()),
            train: train.clone(),
            seed: 0,
        };
        let r = lpds(&fit, &test, 5, 9).unwrap();
        let draws = sample_posterior(&fit, 5, 9).unwrap();
        for i in 0..2 {
            let mut dens = 0.0;
            for s in 0..5 {
                let p = HyperParams::from_xi(&draws.row(s)).unwrap();
                let (m, v) = predictive_distribution(&train.x, &train.y, &test.x, &p).unwrap();
                dens += (-0.5 * (y_sq(test.y[i] - m[i]) / v[i])).exp() / (2.0 * std::f64::consts::PI * v[i]).sqrt();
            }
            assert!((r.per_point[i] - (dens / 5.0).ln()).abs() < 1e-10);
        }
    }

    fn y_sq(v: f64) -> f64 {
        v * v
    }

    #[test]
    fn lpds_on_pure_noise_matches_constant_kernel_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let train = Dataset::unnamed(x, y).unwrap();
        let tx = DMatrix::from_fn(100, 2, |_, _| rng.random_range(-1.0..1.0));
        let ty: Vec<f64> = (0..100)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let test = Dataset::unnamed(tx, ty.clone()).unwrap();
        let params = HyperParams::new(vec![0.0, 0.0], 2.0, 0.5).unwrap();
        let fit = point_fit(train.clone(), params);
        let got = lpds(&fit, &test, 1, 0).unwrap().mean;
        // θ = 0 makes K = (1/τ)11ᵀ: the predictive is a Gaussian with a
        // shrunken common mean
        let s = 1.0 / 2.0;
        let ybar = train.y.iter().sum::<f64>() / n as f64;
        let w = s * n as f64 / (s * n as f64 + 0.5);
        let mean = w * ybar;
        let var = 0.5 + s * 0.5 / (s * n as f64 + 0.5);
        let want = ty.iter().map(|&t| normal_log_pdf(t, mean, var)).sum::<f64>() / 100.0;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");

        // a fitted model on pure noise has no signal amplitude left, so its
        // score is that of the marginal N(0, 1/τ̂ + σ̂²)
        let ml = fit_ml(&train, 3, 2).unwrap();
        let p = ml.point().unwrap();
        let got = lpds(&ml, &test, 1, 0).unwrap().mean;
        let marginal = ty
            .iter()
            .map(|&t| normal_log_pdf(t, 0.0, 1.0 / p.tau + p.sigma2))
            .sum::<f64>()
            / 100.0;
        assert!((got - marginal).abs() < 0.05, "{got} vs {marginal}");
    }

    #[test]
    fn posterior_draws_are_positive_and_self_consistent() {
        let (train, _, _) = small_sim(3, 30, 2);
        let fit = fit_nf(&train, &TripleGammaConfig::default(), &quick_cfg(1)).unwrap();
        let draws = sample_posterior(&fit, 50, 4).unwrap();
        assert_eq!(draws.len(), 50);
        assert!(draws.xi.iter().all(|&v| v > 0.0));
        let stack = fit.stack().unwrap();
        for s in 0..50 {
            let lq = crate::flows::log_q_density(&draws.row(s), stack).unwrap();
            assert!((lq - draws.log_q[s]).abs() < 1e-6, "{lq} vs {}", draws.log_q[s]);
        }
        assert_ne!(
            sample_posterior(&fit, 5, 5).unwrap(),
            sample_posterior(&fit, 5, 6).unwrap()
        );
    }

    #[test]
    fn ml_fit_has_no_posterior() {
        let (train, _, _) = small_sim(2, 20, 1);
        let fit = fit_ml(&train, 2, 0).unwrap();
        assert!(fit.stack().is_none() && fit.point().is_some());
        assert!(matches!(sample_posterior(&fit, 10, 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn ml_fit_beats_generating_parameters() {
        let mut cfg = SimConfig::new(2, 300, 0.0, 0.0, 5);
        cfg.n_test = 0;
        cfg.convention = GammaConvention::Rate;
        let sim = simulate(&cfg).unwrap();
        let truth = HyperParams::new(sim.truth.theta.clone(), 2.0, 0.1).unwrap();
        let at_truth = log_marginal_likelihood(&sim.train.y, &sim.train.x, &truth).unwrap();
        let fit = fit_ml(&sim.train, 3, 1).unwrap();
        let got = log_marginal_likelihood(&sim.train.y, &sim.train.x, fit.point().unwrap()).unwrap();
        assert!(got >= at_truth - 1e-3, "{got} < {at_truth}");
        let FitTrace::Restarts(rs) = &fit.trace else { panic!() };
        assert_eq!(rs.len(), 3);
        assert_ne!(rs[0].start, rs[1].start);
        let best = rs.iter().filter_map(|r| r.log_lik).fold(f64::NEG_INFINITY, f64::max);
        assert!((best - got).abs() < 1e-8);
    }

    #[test]
    fn ml_restart_starts_follow_the_seed() {
        let (train, _, _) = small_sim(3, 15, 3);
        let a = fit_ml(&train, 2, 7).unwrap();
        let b = fit_ml(&train, 2, 7).unwrap();
        let c = fit_ml(&train, 2, 8).unwrap();
        assert_eq!(a, b);
        let starts = |f: &FitResult| match &f.trace {
            FitTrace::Restarts(r) => r.iter().map(|r| r.start.clone()).collect::<Vec<_>>(),
            _ => unreachable!(),
        };
        assert_ne!(starts(&a), starts(&c));
        for s in starts(&a) {
            assert!(s[..3].iter().all(|&t| (1e-3..=10.0).contains(&t)));
        }
        assert!(fit_ml(&train, 0, 0).is_err());
    }

    #[test]
    fn invalid_prior_is_a_config_error() {
        let (train, _, _) = small_sim(2, 10, 1);
        let bad = TripleGammaConfig {
            a: -1.0,
            c: 0.1,
            sigma2_rate: 10.0,
        };
        assert!(matches!(fit_nf(&train, &bad, &quick_cfg(0)), Err(Error::Config(_))));
        let half = TripleGammaConfig::new(0.5, 0.5, 10.0).unwrap();
        assert!(fit_nf(&train, &half, &quick_cfg(0)).is_ok());
    }

    #[test]
    fn mean_field_is_a_single_affine_layer_and_deterministic() {
        let (train, _, _) = small_sim(3, 25, 4);
        let a = fit_mf(&train, &TripleGammaConfig::default(), &quick_cfg(2)).unwrap();
        let b = fit_mf(&train, &TripleGammaConfig::default(), &quick_cfg(2)).unwrap();
        let stack = a.stack().unwrap();
        assert_eq!(stack.n_layers(), 1);
        assert_eq!(stack.specs()[0].kind, LayerKind::DiagAffine);
        assert_eq!(a.stack(), b.stack());
        assert_eq!(a.elbo_trace().unwrap().elbo, b.elbo_trace().unwrap().elbo);
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        let rank = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
            let mut r = vec![0.0; v.len()];
            for (k, &i) in idx.iter().enumerate() {
                r[i] = k as f64;
            }
            r
        };
        let (ra, rb) = (rank(a), rank(b));
        let n = a.len() as f64;
        let m = (n - 1.0) / 2.0;
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - m) * (y - m)).sum();
        let var: f64 = ra.iter().map(|x| (x - m) * (x - m)).sum();
        cov / var
    }

    #[test]
    fn mean_field_draws_are_uncorrelated() {
        let (train, _, _) = small_sim(2, 25, 4);
        let fit = fit_mf(&train, &TripleGammaConfig::default(), &quick_cfg(3)).unwrap();
        let draws = sample_posterior(&fit, 4000, 1).unwrap();
        let cols: Vec<Vec<f64>> = (0..4).map(|j| draws.xi.column(j).iter().copied().collect()).collect();
        for a in 0..4 {
            for b in (a + 1)..4 {
                assert!(spearman(&cols[a], &cols[b]).abs() < 0.1);
            }
        }
    }

    #[test]
    fn inclusion_summary_sorts_and_handles_constant_draws() {
        let xi = DMatrix::from_row_slice(
            3,
            5,
            &[
                1.0, 2.0, 2.0, 1.0, 0.1, //
                1.0, 2.0, 2.0, 1.0, 0.1, //
                1.0, 2.0, 2.0, 1.0, 0.1,
            ],
        );
        let draws = PosteriorDraws {
            xi,
            log_q: vec![0.0; 3],
        };
        let rows = inclusion_summary(&draws, &TripleGammaConfig::default()).unwrap();
        assert_eq!(rows.iter().map(|r| r.index).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert!(rows.iter().all(|r| r.lower == r.upper && r.median == r.lower));
        assert!(rows.iter().all(|r| r.below_prior_median == 0.0));
    }

    #[test]
    fn predictions_are_in_raw_units() {
        let (train_raw, test_raw, _) = small_sim(2, 30, 8);
        let mut shifted = train_raw.clone();
        shifted.y.iter_mut().for_each(|v| *v += 100.0);
        let train = crate::data::preprocess(&shifted).unwrap();
        let fit = fit_ml(&train, 2, 0).unwrap();
        let mut test = test_raw.clone();
        test.y.iter_mut().for_each(|v| *v += 100.0);
        let p = predict(&fit, &test, 1, 0).unwrap();
        let mean_pred = p.mean.iter().sum::<f64>() / p.mean.len() as f64;
        assert!((mean_pred - 100.0).abs() < 2.0, "{mean_pred}");
        let a = lpds(&fit, &test, 1, 0).unwrap();
        let b = lpds(&fit, &train.standardization.apply(&test).unwrap(), 1, 0).unwrap();
        assert_eq!(a, b);
        let wrong = Dataset::unnamed(DMatrix::zeros(3, 5), vec![0.0; 3]).unwrap();
        assert!(lpds(&fit, &wrong, 1, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (train, test, _) = small_sim(3, 25, 6);
        for fit in [
            fit_nf(&train, &TripleGammaConfig::default(), &quick_cfg(5)).unwrap(),
            fit_ml(&train, 2, 5).unwrap(),
        ] {
            let bytes = save_checkpoint(&fit);
            let back = load_checkpoint(&bytes).unwrap();
            assert_eq!(save_checkpoint(&back), bytes);
            assert_eq!(back.method, fit.method);
            assert_eq!(back.estimate, fit.estimate);
            assert_eq!(back.train, fit.train);
            let a = lpds(&fit, &test, 16, 3).unwrap();
            let b = lpds(&back, &test, 16, 3).unwrap();
            assert_eq!(a.per_point, b.per_point);
        }
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let (train, _, _) = small_sim(2, 10, 6);
        let bytes = save_checkpoint(&fit_ml(&train, 1, 0).unwrap());
        for cut in [0, 5, 12, 30, bytes.len() - 1] {
            assert!(
                matches!(load_checkpoint(&bytes[..cut]), Err(Error::Checkpoint(_))),
                "cut {cut}"
            );
        }
        let mut v = bytes.clone();
        v[8] = 99;
        assert!(matches!(load_checkpoint(&v), Err(Error::Checkpoint(m)) if m.contains("version")));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(load_checkpoint(&extra).is_err());
    }
}
