//! Squared exponential ARD kernel and Cholesky-based GP marginal likelihood.
//!
//! The kernel is parameterized by inverse lengthscale weights `theta` and an
//! inverse amplitude `tau`:
//!
//! ```text
//! k(z, z') = (1/τ) · exp(−½ Σ_j θ_j (z_j − z'_j)²)
//! ```
//!
//! All quadratic forms go through triangular solves. The only place a full
//! inverse is formed is the likelihood gradient, which needs every entry of
//! `(K + σ²I)⁻¹`.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Base jitter relative to the mean diagonal of `K + σ²I`.
pub const BASE_JITTER: f64 = 1e-8;
/// Number of times the jitter is multiplied by ten after a failed factorization.
pub const JITTER_RETRIES: usize = 3;

/// GP hyperparameters `ξ = (θ₁…θ_d, τ, σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub theta: Vec<f64>,
    pub tau: f64,
    pub sigma2: f64,
}

impl HyperParams {
    pub fn new(theta: Vec<f64>, tau: f64, sigma2: f64) -> Result<Self> {
        let p = HyperParams { theta, tau, sigma2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_kernel()?;
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return invalid(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        Ok(())
    }

    fn validate_kernel(&self) -> Result<()> {
        if let Some(t) = self.theta.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
            return invalid(format!("theta entries must be finite and >= 0, got {t}"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return invalid(format!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Flat layout `(θ₁…θ_d, τ, σ²)`.
    pub fn to_xi(&self) -> Vec<f64> {
        let mut xi = self.theta.clone();
        xi.push(self.tau);
        xi.push(self.sigma2);
        xi
    }

    pub fn from_xi(xi: &[f64]) -> Result<Self> {
        if xi.len() < 3 {
            return invalid(format!("xi needs at least 3 entries, got {}", xi.len()));
        }
        let d = xi.len() - 2;
        HyperParams::new(xi[..d].to_vec(), xi[d], xi[d + 1])
    }
}

/// Cholesky factor of `K + σ²I` (plus jitter), stored row-major.
#[derive(Debug, Clone)]
pub struct KernelMatrixFactor {
    rows: Vec<f64>,
    pub log_det: f64,
    pub n: usize,
}

impl KernelMatrixFactor {
    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.n..i * self.n + i + 1]
    }

    /// Lower-triangular factor as a dense matrix.
    pub fn chol_lower(&self) -> DMatrix<f64> {
        DMatrix::from_fn(
            self.n,
            self.n,
            |i, j| {
                if j <= i {
                    self.rows[i * self.n + j]
                } else {
                    0.0
                }
            },
        )
    }

    /// `L⁻¹ b`
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        for i in 0..self.n {
            let row = self.row(i);
            x[i] = (b[i] - dot(&row[..i], &x[..i])) / row[i];
        }
        x
    }

    /// `L⁻ᵀ b`
    pub fn solve_upper(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            x[i] /= self.rows[i * n + i];
            let xi = x[i];
            let row = self.row(i);
            for (xk, lik) in x[..i].iter_mut().zip(&row[..i]) {
                *xk -= lik * xi;
            }
        }
        x
    }

    /// `(L Lᵀ)⁻¹ b`
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// Dense inverse of `L Lᵀ`, symmetric by construction.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.n;
        // row j of `lit` holds column j of L⁻¹ (entries j..n).
        let mut lit = vec![0.0; n * n];
        let mut x = vec![0.0; n];
        for j in 0..n {
            x[j] = 1.0 / self.rows[j * n + j];
            for i in j + 1..n {
                let row = &self.rows[i * n..i * n + i + 1];
                x[i] = -dot(&row[j..i], &x[j..i]) / row[i];
            }
            lit[j * n + j..(j + 1) * n].copy_from_slice(&x[j..n]);
        }
        let mut inv = DMatrix::zeros(n, n);
        for i in 0..n {
            for k in i..n {
                let v = dot(&lit[i * n + k..(i + 1) * n], &lit[k * n + k..(k + 1) * n]);
                inv[(i, k)] = v;
                inv[(k, i)] = v;
            }
        }
        inv
    }
}

/// Four-lane dot product with a fixed reduction order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let k = 4 * c;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[2]) + (acc[1] + acc[3]);
    for k in 4 * chunks..n {
        s += a[k] * b[k];
    }
    s
}

fn check_dims(z: &[f64], zp: &[f64], theta: &[f64]) -> Result<()> {
    if z.len() != zp.len() || z.len() != theta.len() {
        return invalid(format!(
            "dimension mismatch: z has {}, z' has {}, theta has {}",
            z.len(),
            zp.len(),
            theta.len()
        ));
    }
    Ok(())
}

/// `sqrt(Σ_j (z_j − z'_j)² θ_j)`
pub fn aniso_distance(z: &[f64], z_prime: &[f64], theta: &[f64]) -> Result<f64> {
    check_dims(z, z_prime, theta)?;
    if theta.iter().any(|t| *t < 0.0) {
        return invalid("theta must be elementwise >= 0");
    }
    Ok(sq_dist(z, z_prime, theta).sqrt())
}

#[inline]
fn sq_dist(z: &[f64], zp: &[f64], theta: &[f64]) -> f64 {
    z.iter()
        .zip(zp)
        .zip(theta)
        .map(|((a, b), t)| (a - b) * (a - b) * t)
        .sum()
}

/// `(1/τ) exp(−½ δ(z, z'; θ)²)`
pub fn se_kernel(z: &[f64], z_prime: &[f64], params: &HyperParams) -> Result<f64> {
    check_dims(z, z_prime, &params.theta)?;
    params.validate()?;
    Ok((-0.5 * sq_dist(z, z_prime, &params.theta)).exp() / params.tau)
}

fn rows_of(x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let (n, d) = x.shape();
    let mut rows = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            let v = x[(i, j)];
            if !v.is_finite() {
                return invalid(format!("non-finite covariate at ({i}, {j})"));
            }
            rows[i * d + j] = v;
        }
    }
    Ok(rows)
}

/// Kernel part `K(x; θ, τ)` only, lower triangle mirrored so the result is
/// exactly symmetric.
fn kernel_matrix(x: &DMatrix<f64>, params: &HyperParams) -> Result<DMatrix<f64>> {
    let (n, d) = x.shape();
    if d != params.dim() {
        return invalid(format!("X has {d} columns but theta has {}", params.dim()));
    }
    params.validate_kernel()?;
    let rows = rows_of(x)?;
    let amp = 1.0 / params.tau;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        let ri = &rows[i * d..(i + 1) * d];
        k[(i, i)] = amp;
        for j in 0..i {
            let rj = &rows[j * d..(j + 1) * d];
            let v = amp * (-0.5 * sq_dist(ri, rj, &params.theta)).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// `K(x; θ, τ) + (σ² + jitter) I`
pub fn build_covariance(x: &DMatrix<f64>, params: &HyperParams, jitter: f64) -> Result<DMatrix<f64>> {
    if !(jitter >= 0.0) {
        return invalid(format!("jitter must be >= 0, got {jitter}"));
    }
    if !(params.sigma2 >= 0.0) || !params.sigma2.is_finite() {
        return invalid(format!("sigma2 must be >= 0, got {}", params.sigma2));
    }
    let mut k = kernel_matrix(x, params)?;
    for i in 0..k.nrows() {
        k[(i, i)] += params.sigma2 + jitter;
    }
    Ok(k)
}

/// Cholesky factorization of a symmetric positive-definite matrix.
pub fn factorize(a: &DMatrix<f64>) -> Result<KernelMatrixFactor> {
    let n = a.nrows();
    if a.ncols() != n {
        return invalid(format!("matrix must be square, got {}x{}", n, a.ncols()));
    }
    for i in 0..n {
        for j in 0..i {
            let (u, v) = (a[(i, j)], a[(j, i)]);
            if (u - v).abs() > 1e-10 * u.abs().max(v.abs()).max(1.0) {
                return invalid(format!("matrix is not symmetric at ({i}, {j})"));
            }
        }
    }
    let mut rows = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            rows[i * n + j] = a[(i, j)];
        }
    }
    cholesky_in_place(&mut rows, n)?;
    let log_det = 2.0 * (0..n).map(|i| rows[i * n + i].ln()).sum::<f64>();
    Ok(KernelMatrixFactor { rows, log_det, n })
}

/// Blocked right-looking Cholesky on a row-major array; only the lower
/// triangle is read or written.
fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<()> {
    const BLOCK: usize = 64;
    let mut k0 = 0;
    while k0 < n {
        let k1 = (k0 + BLOCK).min(n);
        for i in k0..n {
            for j in k0..k1.min(i + 1) {
                let s = a[i * n + j] - dot(&a[i * n + k0..i * n + j], &a[j * n + k0..j * n + j]);
                if j == i {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Factorization { pivot: i, value: s });
                    }
                    a[i * n + i] = s.sqrt();
                } else {
                    a[i * n + j] = s / a[j * n + j];
                }
            }
        }
        for i in k1..n {
            for j in k1..=i {
                let s = dot(&a[i * n + k0..i * n + k1], &a[j * n + k0..j * n + k1]);
                a[i * n + j] -= s;
            }
        }
        k0 = k1;
    }
    Ok(())
}

/// Factorization of `K + σ²I` under the jitter policy, plus the jitter
/// multiplier that succeeded (1, 10, 100 or 1000).
#[derive(Debug, Clone)]
pub struct CovarianceFactor {
    pub factor: KernelMatrixFactor,
    pub jitter: f64,
    pub jitter_multiplier: f64,
    /// Kernel part without noise or jitter.
    pub kernel: DMatrix<f64>,
}

/// Builds and factorizes `K + (σ² + jitter)I` with jitter
/// `1e-8 · mean(diag)`, retried up to three times with ×10 growth.
pub fn factor_covariance(x: &DMatrix<f64>, params: &HyperParams) -> Result<CovarianceFactor> {
    params.validate()?;
    let kernel = kernel_matrix(x, params)?;
    let base = BASE_JITTER * (1.0 / params.tau + params.sigma2);
    let mut multiplier = 1.0;
    let mut last_err = None;
    for _ in 0..=JITTER_RETRIES {
        let jitter = base * multiplier;
        let mut c = kernel.clone();
        for i in 0..c.nrows() {
            c[(i, i)] += params.sigma2 + jitter;
        }
        match factorize(&c) {
            Ok(factor) => {
                return Ok(CovarianceFactor {
                    factor,
                    jitter,
                    jitter_multiplier: multiplier,
                    kernel,
                })
            }
            Err(e @ Error::Factorization { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
        multiplier *= 10.0;
    }
    Err(last_err.expect("at least one attempt"))
}

fn check_data(y: &[f64], x: &DMatrix<f64>) -> Result<()> {
    if y.len() != x.nrows() {
        return invalid(format!("y has {} entries but X has {} rows", y.len(), x.nrows()));
    }
    if let Some(v) = y.iter().find(|v| !v.is_finite()) {
        return invalid(format!("non-finite response {v}"));
    }
    Ok(())
}

/// `−(N/2) log 2π − ½ log|K + σ²I| − ½ yᵀ(K + σ²I)⁻¹y`
pub fn log_marginal_likelihood(y: &[f64], x: &DMatrix<f64>, params: &HyperParams) -> Result<f64> {
    check_data(y, x)?;
    let cf = factor_covariance(x, params)?;
    let v = cf.factor.solve_lower(y);
    Ok(-0.5 * y.len() as f64 * LN_2PI - 0.5 * cf.factor.log_det - 0.5 * dot(&v, &v))
}

/// Log marginal likelihood with its gradient in `ξ = (θ, τ, σ²)`.
#[derive(Debug, Clone)]
pub struct LikelihoodGrad {
    pub value: f64,
    pub d_theta: Vec<f64>,
    pub d_tau: f64,
    pub d_sigma2: f64,
}

impl LikelihoodGrad {
    pub fn to_xi_grad(&self) -> Vec<f64> {
        let mut g = self.d_theta.clone();
        g.push(self.d_tau);
        g.push(self.d_sigma2);
        g
    }
}

/// Gradient via `∂L/∂C = ½(ααᵀ − C⁻¹)`, `α = C⁻¹y`, with the jitter treated as
/// part of the model (it scales with `1/τ + σ²`).
pub fn log_marginal_likelihood_grad(y: &[f64], x: &DMatrix<f64>, params: &HyperParams) -> Result<LikelihoodGrad> {
    check_data(y, x)?;
    let (n, d) = x.shape();
    let cf = factor_covariance(x, params)?;
    let f = &cf.factor;
    let v = f.solve_lower(y);
    let value = -0.5 * n as f64 * LN_2PI - 0.5 * f.log_det - 0.5 * dot(&v, &v);
    let alpha = f.solve_upper(&v);
    let cinv = f.inverse();

    // W = ½(ααᵀ − C⁻¹); M = W ∘ K_f
    let mut trace_w = 0.0;
    let mut wk_sum = 0.0;
    let mut m = DMatrix::zeros(n, n);
    for k in 0..n {
        for i in 0..n {
            let w = 0.5 * (alpha[i] * alpha[k] - cinv[(i, k)]);
            if i == k {
                trace_w += w;
            }
            let mk = w * cf.kernel[(i, k)];
            wk_sum += mk;
            m[(i, k)] = mk;
        }
    }

    // ∂L/∂θ_j = −½ Σ_ik M_ik (x_ij − x_kj)² = −Σ_i x_ij² r_i + x_jᵀ M x_j
    let r = m.column_sum();
    let mx = &m * x;
    let mut d_theta = vec![0.0; d];
    for (j, g) in d_theta.iter_mut().enumerate() {
        let mut s = 0.0;
        for i in 0..n {
            let xij = x[(i, j)];
            s += xij * mx[(i, j)] - xij * xij * r[i];
        }
        *g = s;
    }

    let eps = BASE_JITTER * cf.jitter_multiplier;
    let d_tau = -wk_sum / params.tau - trace_w * eps / (params.tau * params.tau);
    let d_sigma2 = trace_w * (1.0 + eps);
    Ok(LikelihoodGrad {
        value,
        d_theta,
        d_tau,
        d_sigma2,
    })
}

/// GP predictive mean and variance of `y*` at each test row, conditional on
/// `params`. Variances include the observation noise.
pub fn predictive_distribution(
    x_train: &DMatrix<f64>,
    y_train: &[f64],
    x_test: &DMatrix<f64>,
    params: &HyperParams,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_data(y_train, x_train)?;
    let d = x_train.ncols();
    if x_test.ncols() != d {
        return invalid(format!("train has {d} covariates but test has {}", x_test.ncols()));
    }
    let cf = factor_covariance(x_train, params)?;
    let alpha = cf.factor.solve(y_train);
    let train_rows = rows_of(x_train)?;
    let test_rows = rows_of(x_test)?;
    let n = x_train.nrows();
    let m = x_test.nrows();
    let amp = 1.0 / params.tau;
    let mut mean = DVector::zeros(m);
    let mut var = DVector::zeros(m);
    let mut kstar = vec![0.0; n];
    for t in 0..m {
        let zt = &test_rows[t * d..(t + 1) * d];
        for (i, ks) in kstar.iter_mut().enumerate() {
            let zi = &train_rows[i * d..(i + 1) * d];
            *ks = amp * (-0.5 * sq_dist(zt, zi, &params.theta)).exp();
        }
        mean[t] = dot(&kstar, &alpha);
        let v = cf.factor.solve_lower(&kstar);
        // latent variance amp − vᵀv is non-negative in exact arithmetic
        var[t] = params.sigma2 + (amp - dot(&v, &v)).max(0.0);
    }
    Ok((mean, var))
}
