//! Invertible flow layers and the variational density they define.
//!
//! A sample is produced as `ξ = softplus_β(T_K ∘ … ∘ T_1(u))` with
//! `u ~ N(0, I_D)`. Three layer kinds are available:
//!
//! * **Sylvester** (orthogonal, Householder): `z = u + Q R h(R̃ Qᵀ u + b)` where
//!   `Q` holds the first `M` columns of a product of `M` Householder
//!   reflections, `R`, `R̃` are `M × M` upper triangular and `h = tanh`.
//!   Diagonals are `tanh` of raw parameters, so `1 + h' r_ii r̃_ii > 0`.
//! * **Radial**: `z = u + β (u − u₀) / (α + |u − u₀|)` with `α = softplus(α_raw)`
//!   and `β = α (exp(β_raw) − 1) > −α`.
//! * **Diagonal affine**: `z = shift + exp(log_scale) ⊙ u`.
//!
//! All forward maps are written once against [`Real`] and evaluated either on
//! plain floats or on a gradient tape.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grad::{ParamBlock, ParamVector, Real};
use crate::special::{log_sigmoid, softplus, softplus_inv};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Default Sylvester bottleneck cap.
pub const MAX_BOTTLENECK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Sylvester,
    Radial,
    DiagAffine,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Sylvester => "sylvester",
            LayerKind::Radial => "radial",
            LayerKind::DiagAffine => "diag-affine",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "sylvester" => Some(LayerKind::Sylvester),
            "radial" => Some(LayerKind::Radial),
            "diag-affine" => Some(LayerKind::DiagAffine),
            _ => None,
        }
    }
}

/// Parameters of one layer. Triangular factors are stored packed by rows
/// (`M(M+1)/2` entries, diagonal entries raw).
#[derive(Debug, Clone, PartialEq)]
pub enum FlowLayerParams {
    Sylvester {
        /// `M × D`, row-major; row `k` defines the `k`-th reflection.
        householder: Vec<f64>,
        r_upper: Vec<f64>,
        r_tilde_upper: Vec<f64>,
        b: Vec<f64>,
    },
    Radial {
        alpha_raw: f64,
        beta_raw: f64,
        center: Vec<f64>,
    },
    DiagAffine {
        shift: Vec<f64>,
        log_scale: Vec<f64>,
    },
}

fn packed_len(m: usize) -> usize {
    m * (m + 1) / 2
}

/// Offset of row `i` in a packed upper-triangular `M × M` matrix.
#[inline]
fn packed_row(i: usize, m: usize) -> usize {
    i * m - i * i.saturating_sub(1) / 2
}

impl FlowLayerParams {
    pub fn kind(&self) -> LayerKind {
        match self {
            FlowLayerParams::Sylvester { .. } => LayerKind::Sylvester,
            FlowLayerParams::Radial { .. } => LayerKind::Radial,
            FlowLayerParams::DiagAffine { .. } => LayerKind::DiagAffine,
        }
    }

    /// Radial layer from its constrained parameters, `α > 0`, `β > −α`.
    pub fn radial(alpha: f64, beta: f64, center: Vec<f64>) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "radial alpha must be positive, got {alpha}"
            )));
        }
        if !(beta > -alpha) || !beta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "radial beta must exceed -alpha = {}, got {beta}",
                -alpha
            )));
        }
        Ok(FlowLayerParams::Radial {
            alpha_raw: softplus_inv(alpha),
            beta_raw: (beta / alpha).ln_1p(),
            center,
        })
    }

    /// Identity Sylvester layer with the given reflections.
    pub fn sylvester_identity(householder: Vec<f64>, m: usize) -> Self {
        FlowLayerParams::Sylvester {
            householder,
            r_upper: vec![0.0; packed_len(m)],
            r_tilde_upper: vec![0.0; packed_len(m)],
            b: vec![0.0; m],
        }
    }

    pub fn diag_affine_identity(d: usize) -> Self {
        FlowLayerParams::DiagAffine {
            shift: vec![0.0; d],
            log_scale: vec![0.0; d],
        }
    }

    /// Bottleneck width for Sylvester layers, `None` otherwise.
    pub fn bottleneck(&self) -> Option<usize> {
        match self {
            FlowLayerParams::Sylvester { b, .. } => Some(b.len()),
            _ => None,
        }
    }

    fn spec(&self, dim: usize) -> Result<LayerSpec> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        let all_finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            FlowLayerParams::Sylvester {
                householder,
                r_upper,
                r_tilde_upper,
                b,
            } => {
                let m = b.len();
                if m == 0 || m > dim {
                    return bad(format!("bottleneck {m} must be in 1..={dim}"));
                }
                if householder.len() != m * dim
                    || r_upper.len() != packed_len(m)
                    || r_tilde_upper.len() != packed_len(m)
                {
                    return bad("sylvester parameter shapes are inconsistent".into());
                }
                if !all_finite(householder) || !all_finite(r_upper) || !all_finite(r_tilde_upper) || !all_finite(b) {
                    return bad("sylvester parameters must be finite".into());
                }
                for k in 0..m {
                    let v = &householder[k * dim..(k + 1) * dim];
                    if v.iter().map(|x| x * x).sum::<f64>() <= 0.0 {
                        return bad(format!("householder vector {k} is zero"));
                    }
                }
                Ok(LayerSpec::new(LayerKind::Sylvester, dim, m))
            }
            FlowLayerParams::Radial {
                alpha_raw,
                beta_raw,
                center,
            } => {
                if center.len() != dim {
                    return bad(format!("radial center has {} entries, expected {dim}", center.len()));
                }
                if !alpha_raw.is_finite() || !beta_raw.is_finite() || !all_finite(center) {
                    return bad("radial parameters must be finite".into());
                }
                Ok(LayerSpec::new(LayerKind::Radial, dim, 0))
            }
            FlowLayerParams::DiagAffine { shift, log_scale } => {
                if shift.len() != dim || log_scale.len() != dim {
                    return bad("diag-affine parameter shapes are inconsistent".into());
                }
                if !all_finite(shift) || !all_finite(log_scale) {
                    return bad("diag-affine parameters must be finite".into());
                }
                Ok(LayerSpec::new(LayerKind::DiagAffine, dim, 0))
            }
        }
    }

    fn pack(&self, out: &mut Vec<f64>) {
        match self {
            FlowLayerParams::Sylvester {
                householder,
                r_upper,
                r_tilde_upper,
                b,
            } => {
                out.extend_from_slice(householder);
                out.extend_from_slice(r_upper);
                out.extend_from_slice(r_tilde_upper);
                out.extend_from_slice(b);
            }
            FlowLayerParams::Radial {
                alpha_raw,
                beta_raw,
                center,
            } => {
                out.push(*alpha_raw);
                out.push(*beta_raw);
                out.extend_from_slice(center);
            }
            FlowLayerParams::DiagAffine { shift, log_scale } => {
                out.extend_from_slice(shift);
                out.extend_from_slice(log_scale);
            }
        }
    }
}

/// Shape of one layer inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub dim: usize,
    /// Sylvester bottleneck width (0 for other kinds).
    pub m: usize,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, dim: usize, m: usize) -> Self {
        LayerSpec { kind, dim, m }
    }

    pub fn n_params(&self) -> usize {
        match self.kind {
            LayerKind::Sylvester => self.m * self.dim + 2 * packed_len(self.m) + self.m,
            LayerKind::Radial => 2 + self.dim,
            LayerKind::DiagAffine => 2 * self.dim,
        }
    }

    fn fields(&self) -> Vec<(&'static str, usize)> {
        match self.kind {
            LayerKind::Sylvester => vec![
                ("householder", self.m * self.dim),
                ("r_upper", packed_len(self.m)),
                ("r_tilde_upper", packed_len(self.m)),
                ("b", self.m),
            ],
            LayerKind::Radial => vec![("alpha_raw", 1), ("beta_raw", 1), ("center", self.dim)],
            LayerKind::DiagAffine => vec![("shift", self.dim), ("log_scale", self.dim)],
        }
    }

    fn unpack(&self, p: &[f64]) -> FlowLayerParams {
        let d = self.dim;
        match self.kind {
            LayerKind::Sylvester => {
                let m = self.m;
                let (h, rest) = p.split_at(m * d);
                let (r, rest) = rest.split_at(packed_len(m));
                let (rt, b) = rest.split_at(packed_len(m));
                FlowLayerParams::Sylvester {
                    householder: h.to_vec(),
                    r_upper: r.to_vec(),
                    r_tilde_upper: rt.to_vec(),
                    b: b.to_vec(),
                }
            }
            LayerKind::Radial => FlowLayerParams::Radial {
                alpha_raw: p[0],
                beta_raw: p[1],
                center: p[2..2 + d].to_vec(),
            },
            LayerKind::DiagAffine => FlowLayerParams::DiagAffine {
                shift: p[..d].to_vec(),
                log_scale: p[d..2 * d].to_vec(),
            },
        }
    }

    /// Forward map and log-determinant on flat parameters.
    pub fn forward<T: Real>(&self, p: &[T], u: &[T]) -> (Vec<T>, T) {
        match self.kind {
            LayerKind::Sylvester => sylvester_forward(p, self.dim, self.m, u),
            LayerKind::Radial => radial_forward(p, self.dim, u),
            LayerKind::DiagAffine => affine_forward(p, self.dim, u),
        }
    }

    fn inverse(&self, p: &[f64], z: &[f64], tol: f64) -> Result<Vec<f64>> {
        match self.kind {
            LayerKind::Sylvester => sylvester_inverse(p, self.dim, self.m, z, tol),
            LayerKind::Radial => Ok(radial_inverse(p, self.dim, z)),
            LayerKind::DiagAffine => Ok(affine_inverse(p, self.dim, z)),
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = a[0] * b[0];
    for k in 1..a.len() {
        acc = acc + a[k] * b[k];
    }
    acc
}

/// Unit-norm reflection vectors.
fn householder_units<T: Real>(h: &[T], d: usize, m: usize) -> Vec<Vec<T>> {
    (0..m)
        .map(|k| {
            let v = &h[k * d..(k + 1) * d];
            let norm = dot(v, v).sqrt();
            v.iter().map(|&x| x / norm).collect()
        })
        .collect()
}

fn reflect<T: Real>(w: &mut [T], v: &[T]) {
    let s = dot(v, w) * 2.0;
    for (wi, &vi) in w.iter_mut().zip(v) {
        *wi = *wi - vi * s;
    }
}

/// `Qᵀ u`, first `m` entries.
fn q_transpose<T: Real>(units: &[Vec<T>], u: &[T], m: usize) -> Vec<T> {
    let mut w = u.to_vec();
    for v in units {
        reflect(&mut w, v);
    }
    w.truncate(m);
    w
}

/// `Q [w; 0]`
fn q_apply<T: Real>(units: &[Vec<T>], w: &[T], d: usize) -> Vec<T> {
    let zero = w[0].lift(0.0);
    let mut out = vec![zero; d];
    out[..w.len()].copy_from_slice(w);
    for v in units.iter().rev() {
        reflect(&mut out, v);
    }
    out
}

/// Upper-triangular matrix-vector product with `tanh` on the diagonal.
fn tri_mul<T: Real>(packed: &[T], m: usize, x: &[T]) -> Vec<T> {
    (0..m)
        .map(|i| {
            let row = &packed[packed_row(i, m)..packed_row(i, m) + (m - i)];
            let mut acc = row[0].tanh() * x[i];
            for j in i + 1..m {
                acc = acc + row[j - i] * x[j];
            }
            acc
        })
        .collect()
}

fn tri_diag<T: Real>(packed: &[T], m: usize) -> Vec<T> {
    (0..m).map(|i| packed[packed_row(i, m)].tanh()).collect()
}

struct SylvesterParts<'a, T> {
    units: Vec<Vec<T>>,
    r: &'a [T],
    rt: &'a [T],
    b: &'a [T],
}

fn sylvester_parts<T: Real>(p: &[T], d: usize, m: usize) -> SylvesterParts<'_, T> {
    let (h, rest) = p.split_at(m * d);
    let (r, rest) = rest.split_at(packed_len(m));
    let (rt, b) = rest.split_at(packed_len(m));
    SylvesterParts {
        units: householder_units(h, d, m),
        r,
        rt,
        b: &b[..m],
    }
}

fn sylvester_forward<T: Real>(p: &[T], d: usize, m: usize, u: &[T]) -> (Vec<T>, T) {
    let s = sylvester_parts(p, d, m);
    let v = q_transpose(&s.units, u, m);
    let pre: Vec<T> = tri_mul(s.rt, m, &v).iter().zip(s.b).map(|(&a, &b)| a + b).collect();
    let h: Vec<T> = pre.iter().map(|a| a.tanh()).collect();
    let w = tri_mul(s.r, m, &h);
    let shift = q_apply(&s.units, &w, d);
    let out: Vec<T> = u.iter().zip(&shift).map(|(&a, &b)| a + b).collect();
    let rd = tri_diag(s.r, m);
    let rtd = tri_diag(s.rt, m);
    let mut log_det = u[0].lift(0.0);
    for i in 0..m {
        let hp = -(h[i] * h[i]) + 1.0;
        log_det = log_det + (hp * rd[i] * rtd[i]).ln_1p();
    }
    (out, log_det)
}

const SYLVESTER_MAX_ITER: usize = 200;

fn sylvester_inverse(p: &[f64], d: usize, m: usize, z: &[f64], tol: f64) -> Result<Vec<f64>> {
    let s = sylvester_parts(p, d, m);
    let c = q_transpose(&s.units, z, m);
    let residual = |v: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let pre: Vec<f64> = tri_mul(s.rt, m, v).iter().zip(s.b).map(|(a, b)| a + b).collect();
        let h: Vec<f64> = pre.iter().map(|a| a.tanh()).collect();
        let rh = tri_mul(s.r, m, &h);
        let f = (0..m).map(|i| v[i] + rh[i] - c[i]).collect();
        (f, h)
    };
    let dense = |packed: &[f64]| {
        DMatrix::from_fn(m, m, |i, j| {
            if j < i {
                0.0
            } else if j == i {
                packed[packed_row(i, m)].tanh()
            } else {
                packed[packed_row(i, m) + j - i]
            }
        })
    };
    let r = dense(s.r);
    let rt = dense(s.rt);
    let norm = |f: &[f64]| f.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let mut v = c.clone();
    let (mut f, mut h) = residual(&v);
    let mut res = norm(&f);
    let target = 0.1 * tol;
    let mut iter = 0;
    while res > target && iter < SYLVESTER_MAX_ITER {
        let hp = DMatrix::from_diagonal(&DVector::from_iterator(m, h.iter().map(|x| 1.0 - x * x)));
        let jac = DMatrix::identity(m, m) + &r * hp * &rt;
        let step = jac
            .lu()
            .solve(&DVector::from_column_slice(&f))
            .ok_or_else(|| Error::Numerical {
                message: "singular Jacobian in Sylvester inverse".into(),
                residual: res,
            })?;
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = (0..m).map(|i| v[i] - t * step[i]).collect();
            let (fc, hc) = residual(&cand);
            let rc = norm(&fc);
            if rc < res || t < 1e-8 {
                v = cand;
                f = fc;
                h = hc;
                res = rc;
                break;
            }
            t *= 0.5;
        }
        iter += 1;
    }
    let shift = q_apply(&s.units, &tri_mul(s.r, m, &h), d);
    let u: Vec<f64> = z.iter().zip(&shift).map(|(a, b)| a - b).collect();
    let (back, _) = sylvester_forward(p, d, m, &u);
    let err = norm(&back.iter().zip(z).map(|(a, b)| a - b).collect::<Vec<_>>());
    if err > tol {
        return Err(Error::Numerical {
            message: format!("Sylvester inverse did not converge in {iter} iterations"),
            residual: err,
        });
    }
    Ok(u)
}

fn radial_scalars<T: Real>(p: &[T]) -> (T, T) {
    let alpha = p[0].softplus();
    let beta = alpha * (p[1].exp() - 1.0);
    (alpha, beta)
}

fn radial_forward<T: Real>(p: &[T], d: usize, u: &[T]) -> (Vec<T>, T) {
    let (alpha, beta) = radial_scalars(p);
    let center = &p[2..2 + d];
    let diff: Vec<T> = u.iter().zip(center).map(|(&a, &c)| a - c).collect();
    let r = dot(&diff, &diff).sqrt();
    let h = r.lift(1.0) / (alpha + r);
    let bh = beta * h;
    let out = u.iter().zip(&diff).map(|(&a, &df)| a + df * bh).collect();
    let log_det = bh.ln_1p() * (d as f64 - 1.0) + (beta * alpha * h * h).ln_1p();
    (out, log_det)
}

fn radial_inverse(p: &[f64], d: usize, z: &[f64]) -> Vec<f64> {
    let (alpha, beta) = radial_scalars(p);
    let center = &p[2..2 + d];
    let dz: Vec<f64> = z.iter().zip(center).map(|(a, c)| a - c).collect();
    let rz = dz.iter().map(|x| x * x).sum::<f64>().sqrt();
    if rz == 0.0 {
        return center.to_vec();
    }
    // r² + (α + β − r_z) r − α r_z = 0, positive root
    let q = alpha + beta - rz;
    let disc = (q * q + 4.0 * alpha * rz).sqrt();
    let r = if q > 0.0 {
        2.0 * alpha * rz / (q + disc)
    } else {
        0.5 * (disc - q)
    };
    let scale = 1.0 + beta / (alpha + r);
    center.iter().zip(&dz).map(|(c, x)| c + x / scale).collect()
}

fn affine_forward<T: Real>(p: &[T], d: usize, u: &[T]) -> (Vec<T>, T) {
    let (shift, log_scale) = p.split_at(d);
    let out = (0..d).map(|i| shift[i] + log_scale[i].exp() * u[i]).collect();
    let mut log_det = log_scale[0];
    for &ls in &log_scale[1..d] {
        log_det = log_det + ls;
    }
    (out, log_det)
}

fn affine_inverse(p: &[f64], d: usize, z: &[f64]) -> Vec<f64> {
    let (shift, log_scale) = p.split_at(d);
    (0..d).map(|i| (z[i] - shift[i]) * (-log_scale[i]).exp()).collect()
}

/// `T(u)` and `log |det J_T(u)|` for one layer.
pub fn layer_forward(u: &[f64], params: &FlowLayerParams) -> Result<(Vec<f64>, f64)> {
    let spec = params.spec(u.len())?;
    let mut flat = Vec::with_capacity(spec.n_params());
    params.pack(&mut flat);
    let (z, ld) = spec.forward(&flat, u);
    if !ld.is_finite() {
        return Err(Error::InvalidParameter(format!("log-determinant is {ld}")));
    }
    Ok((z, ld))
}

/// `T⁻¹(z)` with `|T(u) − z|_∞ ≤ tol`.
pub fn layer_inverse(z: &[f64], params: &FlowLayerParams, tol: f64) -> Result<Vec<f64>> {
    let spec = params.spec(z.len())?;
    let mut flat = Vec::with_capacity(spec.n_params());
    params.pack(&mut flat);
    spec.inverse(&flat, z, tol)
}

/// Ordered composition of layers followed by an elementwise softplus.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    dim: usize,
    softplus_beta: f64,
    specs: Vec<LayerSpec>,
    params: Vec<f64>,
}

/// Result of pushing one base draw through a stack.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub u0: Vec<f64>,
    pub xi: Vec<f64>,
    pub log_det: f64,
}

impl FlowStack {
    pub fn from_layers(dim: usize, softplus_beta: f64, layers: &[FlowLayerParams]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("flow dimension must be at least 1".into()));
        }
        if !(softplus_beta > 0.0) || !softplus_beta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "softplus beta must be positive, got {softplus_beta}"
            )));
        }
        let mut specs = Vec::with_capacity(layers.len());
        let mut params = Vec::new();
        for l in layers {
            specs.push(l.spec(dim)?);
            l.pack(&mut params);
        }
        Ok(FlowStack {
            dim,
            softplus_beta,
            specs,
            params,
        })
    }

    /// Rebuilds a stack from layer shapes and a flat parameter vector.
    pub fn from_specs(dim: usize, softplus_beta: f64, specs: Vec<LayerSpec>, params: Vec<f64>) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut off = 0;
        for s in &specs {
            if s.dim != dim {
                return Err(Error::InvalidArgument(format!(
                    "layer has dimension {} but the stack has {dim}",
                    s.dim
                )));
            }
            let n = s.n_params();
            if off + n > params.len() {
                return Err(Error::InvalidArgument(format!(
                    "parameter vector too short: {} entries for layers needing more",
                    params.len()
                )));
            }
            layers.push(s.unpack(&params[off..off + n]));
            off += n;
        }
        if off != params.len() {
            return Err(Error::InvalidArgument(format!(
                "layers use {off} parameters but {} were given",
                params.len()
            )));
        }
        let stack = FlowStack::from_layers(dim, softplus_beta, &layers)?;
        debug_assert_eq!(stack.params, params);
        Ok(stack)
    }

    /// `k` Sylvester layers followed by a diagonal affine layer, initialized
    /// at the identity.
    pub fn sylvester<R: Rng + ?Sized>(dim: usize, k: usize, softplus_beta: f64, rng: &mut R) -> Result<Self> {
        let m = dim.min(MAX_BOTTLENECK);
        let mut layers: Vec<FlowLayerParams> = (0..k).map(|_| init_sylvester(dim, m, rng)).collect();
        layers.push(FlowLayerParams::diag_affine_identity(dim));
        FlowStack::from_layers(dim, softplus_beta, &layers)
    }

    /// Single diagonal affine layer: the mean-field family.
    pub fn mean_field(dim: usize, softplus_beta: f64) -> Result<Self> {
        FlowStack::from_layers(dim, softplus_beta, &[FlowLayerParams::diag_affine_identity(dim)])
    }

    /// Arbitrary layer kinds, each drawn from its initialization distribution.
    pub fn with_kinds<R: Rng + ?Sized>(
        dim: usize,
        kinds: &[LayerKind],
        softplus_beta: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let m = dim.min(MAX_BOTTLENECK);
        let layers: Vec<FlowLayerParams> = kinds
            .iter()
            .map(|k| match k {
                LayerKind::Sylvester => init_sylvester(dim, m, rng),
                LayerKind::Radial => init_radial(dim, rng),
                LayerKind::DiagAffine => FlowLayerParams::diag_affine_identity(dim),
            })
            .collect();
        FlowStack::from_layers(dim, softplus_beta, &layers)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn softplus_beta(&self) -> f64 {
        self.softplus_beta
    }

    pub fn n_layers(&self) -> usize {
        self.specs.len()
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn layers(&self) -> Vec<FlowLayerParams> {
        let mut off = 0;
        self.specs
            .iter()
            .map(|s| {
                let n = s.n_params();
                let l = s.unpack(&self.params[off..off + n]);
                off += n;
                l
            })
            .collect()
    }

    pub fn param_vector(&self) -> ParamVector {
        let mut layout = Vec::new();
        let mut off = 0;
        for (li, s) in self.specs.iter().enumerate() {
            for (field, n) in s.fields() {
                layout.push(ParamBlock {
                    layer: li,
                    field,
                    range: off..off + n,
                });
                off += n;
            }
        }
        ParamVector {
            flat: self.params.clone(),
            layout,
        }
    }

    /// Same architecture with new flat parameters.
    pub fn with_params(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                flat.len()
            )));
        }
        Ok(FlowStack {
            params: flat.to_vec(),
            ..self.clone()
        })
    }

    /// Stack forward on flat parameters (any scalar type): returns `ξ` and
    /// the total log-determinant including the softplus map.
    pub fn forward_with<T: Real>(&self, params: &[T], u0: &[T]) -> (Vec<T>, T) {
        let beta = self.softplus_beta;
        let mut u = u0.to_vec();
        let mut total = u0[0].lift(0.0);
        let mut off = 0;
        for s in &self.specs {
            let n = s.n_params();
            let (z, ld) = s.forward(&params[off..off + n], &u);
            total = total + ld;
            u = z;
            off += n;
        }
        let mut xi = Vec::with_capacity(self.dim);
        for &x in &u {
            let bx = x * beta;
            xi.push(bx.softplus() / beta);
            total = total + bx.log_sigmoid();
        }
        (xi, total)
    }

    pub fn forward(&self, u0: &[f64]) -> Result<FlowSample> {
        if u0.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "base draw has {} entries, expected {}",
                u0.len(),
                self.dim
            )));
        }
        let (xi, log_det) = self.forward_with(&self.params, u0);
        if !log_det.is_finite() || xi.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(format!("stack produced log-det {log_det}")));
        }
        Ok(FlowSample {
            u0: u0.to_vec(),
            xi,
            log_det,
        })
    }

    /// Recovers the base draw from `ξ` and returns it with the forward
    /// log-determinant at that point.
    pub fn inverse(&self, xi: &[f64], tol: f64) -> Result<(Vec<f64>, f64)> {
        if xi.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "xi has {} entries, expected {}",
                xi.len(),
                self.dim
            )));
        }
        if let Some(x) = xi.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("xi must be positive, got {x}")));
        }
        let beta = self.softplus_beta;
        let mut z: Vec<f64> = xi.iter().map(|&x| softplus_inv(beta * x) / beta).collect();
        let mut total: f64 = z.iter().map(|&x| log_sigmoid(beta * x)).sum();
        let mut offsets = Vec::with_capacity(self.specs.len());
        let mut off = 0;
        for s in &self.specs {
            offsets.push(off);
            off += s.n_params();
        }
        for (s, &o) in self.specs.iter().zip(&offsets).rev() {
            let p = &self.params[o..o + s.n_params()];
            let u = s.inverse(p, &z, tol)?;
            total += s.forward(p, &u).1;
            z = u;
        }
        Ok((z, total))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<FlowSample> {
        let u0 = standard_normal_vec(self.dim, rng);
        self.forward(&u0)
    }

    pub fn identity_distance(&self, u: &[f64]) -> Result<f64> {
        let s = self.forward(u)?;
        Ok(s.xi
            .iter()
            .zip(u)
            .map(|(x, &v)| (x - softplus(self.softplus_beta * v) / self.softplus_beta).abs())
            .fold(0.0, f64::max))
    }
}

pub fn standard_normal_vec<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Log density of the standard normal base.
pub fn log_base_density(u: &[f64]) -> f64 {
    -0.5 * u.len() as f64 * LN_2PI - 0.5 * u.iter().map(|x| x * x).sum::<f64>()
}

fn init_sylvester<R: Rng + ?Sized>(dim: usize, m: usize, rng: &mut R) -> FlowLayerParams {
    let mut householder = Vec::with_capacity(m * dim);
    for _ in 0..m {
        let v = standard_normal_vec(dim, rng);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        householder.extend(v.iter().map(|x| x / n));
    }
    let small = |rng: &mut R| -> f64 {
        let x: f64 = StandardNormal.sample(rng);
        0.1 * x
    };
    FlowLayerParams::Sylvester {
        householder,
        r_upper: vec![0.0; packed_len(m)],
        r_tilde_upper: (0..packed_len(m)).map(|_| small(rng)).collect(),
        b: (0..m).map(|_| small(rng)).collect(),
    }
}

fn init_radial<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> FlowLayerParams {
    FlowLayerParams::Radial {
        alpha_raw: softplus_inv(1.0),
        beta_raw: 0.0,
        center: standard_normal_vec(dim, rng),
    }
}

/// `(ξ, total log-det)` for one base draw.
pub fn stack_forward(u0: &[f64], stack: &FlowStack) -> Result<(Vec<f64>, f64)> {
    let s = stack.forward(u0)?;
    Ok((s.xi, s.log_det))
}

/// Tolerance used when inverting a stack for density evaluation.
pub const INVERSE_TOL: f64 = 1e-10;

/// `log q(ξ) = log p_U(u₀) − log |det J(u₀)|`
pub fn log_q_density(xi: &[f64], stack: &FlowStack) -> Result<f64> {
    let (u0, log_det) = stack.inverse(xi, INVERSE_TOL)?;
    Ok(log_base_density(&u0) - log_det)
}
