//! Reverse-mode differentiation on a per-evaluation tape, plus finite-difference
//! checking.
//!
//! A [`Tape`] records every operation on [`Var`] values as a node with a short
//! list of `(parent, local partial)` edges. Calling [`Tape::gradient`] sweeps
//! the nodes backwards once. Expensive pieces with known adjoints (the GP log
//! joint) enter as a single n-ary node through [`Tape::custom`].
//!
//! Numeric code that should run both on plain floats and on the tape is
//! written against the [`Real`] trait.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Range, Sub};

use crate::error::{Error, Result};
use crate::special;

const CONST: u32 = u32::MAX;

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<(u32, u32)>>,
    edges: RefCell<Vec<(u32, f64)>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// New independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let e = self.edges.borrow().len() as u32;
        nodes.push((e, e));
        Var {
            tape: self,
            idx: (nodes.len() - 1) as u32,
            val: value,
        }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        Var {
            tape: self,
            idx: CONST,
            val: value,
        }
    }

    fn push(&self, value: f64, parents: &[(u32, f64)]) -> Var<'_> {
        let mut edges = self.edges.borrow_mut();
        let start = edges.len() as u32;
        edges.extend(parents.iter().filter(|(p, _)| *p != CONST));
        let end = edges.len() as u32;
        if start == end {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push((start, end));
        Var {
            tape: self,
            idx: (nodes.len() - 1) as u32,
            val: value,
        }
    }

    /// Node with a caller-supplied value and partial derivatives.
    pub fn custom<'t>(&'t self, value: f64, inputs: &[Var<'t>], partials: &[f64]) -> Var<'t> {
        assert_eq!(inputs.len(), partials.len(), "one partial per input");
        let parents: Vec<(u32, f64)> = inputs.iter().zip(partials).map(|(v, &p)| (v.idx, p)).collect();
        self.push(value, &parents)
    }

    /// Adjoints of every node with respect to `output`, indexed by node.
    /// Independent variables created first occupy the leading slots.
    pub fn gradient(&self, output: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let edges = self.edges.borrow();
        let mut adj = vec![0.0; nodes.len()];
        if output.idx == CONST {
            return adj;
        }
        adj[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let (s, e) = nodes[i];
            for &(p, w) in &edges[s as usize..e as usize] {
                adj[p as usize] += a * w;
            }
        }
        adj
    }
}

/// Scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, #{})", self.val, self.idx)
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.val
    }

    pub fn index(&self) -> Option<usize> {
        (self.idx != CONST).then_some(self.idx as usize)
    }

    fn unary(self, value: f64, d: f64) -> Self {
        self.tape.push(value, &[(self.idx, d)])
    }
}

/// Scalar arithmetic shared by `f64` and [`Var`].
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    /// Constant in the same context as `self`.
    fn lift(self, v: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn softplus(self) -> Self;
    fn log_sigmoid(self) -> Self;
    fn sigmoid(self) -> Self;
    fn ln_1p(self) -> Self;
}

impl Real for f64 {
    fn value(self) -> f64 {
        self
    }
    fn lift(self, v: f64) -> Self {
        v
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn softplus(self) -> Self {
        special::softplus(self)
    }
    fn log_sigmoid(self) -> Self {
        special::log_sigmoid(self)
    }
    fn sigmoid(self) -> Self {
        special::sigmoid(self)
    }
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
}

impl<'t> Real for Var<'t> {
    fn value(self) -> f64 {
        self.val
    }
    fn lift(self, v: f64) -> Self {
        self.tape.constant(v)
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn softplus(self) -> Self {
        self.unary(special::softplus(self.val), special::sigmoid(self.val))
    }
    fn log_sigmoid(self) -> Self {
        self.unary(special::log_sigmoid(self.val), special::sigmoid(-self.val))
    }
    fn sigmoid(self) -> Self {
        let s = special::sigmoid(self.val);
        self.unary(s, s * (1.0 - s))
    }
    fn ln_1p(self) -> Self {
        self.unary(self.val.ln_1p(), 1.0 / (1.0 + self.val))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        self.tape.push(self.val + o.val, &[(self.idx, 1.0), (o.idx, 1.0)])
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self.tape.push(self.val - o.val, &[(self.idx, 1.0), (o.idx, -1.0)])
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        self.tape
            .push(self.val * o.val, &[(self.idx, o.val), (o.idx, self.val)])
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.val / o.val;
        self.tape.push(q, &[(self.idx, 1.0 / o.val), (o.idx, -q / o.val)])
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, c: f64) -> Self {
        self.unary(self.val + c, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, c: f64) -> Self {
        self.unary(self.val - c, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, c: f64) -> Self {
        self.unary(self.val * c, c)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, c: f64) -> Self {
        self.unary(self.val / c, 1.0 / c)
    }
}

/// Sum with a fixed left-to-right order.
pub fn sum<T: Real>(xs: &[T], zero: T) -> T {
    xs.iter().fold(zero, |acc, &x| acc + x)
}

/// Value and gradient of a function written against the tape.
pub fn gradient_of<F>(f: F, x: &[f64]) -> (f64, Vec<f64>)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars = tape.vars(x);
    let out = f(&tape, &vars);
    let adj = tape.gradient(out);
    (out.value(), adj[..x.len()].to_vec())
}

/// Named contiguous block of a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub layer: usize,
    pub field: &'static str,
    pub range: Range<usize>,
}

/// Flat vector of unconstrained parameters with its block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub flat: Vec<f64>,
    pub layout: Vec<ParamBlock>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// Blocks tile `0..len` in order with no gaps or overlaps.
    pub fn layout_is_exact(&self) -> bool {
        let mut next = 0;
        for b in &self.layout {
            if b.range.start != next || b.range.end < b.range.start {
                return false;
            }
            next = b.range.end;
        }
        next == self.flat.len()
    }

    pub fn block(&self, layer: usize, field: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|b| b.layer == layer && b.field == field)
            .map(|b| &self.flat[b.range.clone()])
    }
}

/// Deterministic scalar objective with an exact gradient.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
    /// Primitive evaluations performed per gradient call.
    fn evals_per_grad(&self) -> usize {
        1
    }
}

/// Pins a closure to the higher-ranked tape signature so it can be stored
/// and reused.
pub fn tape_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    f
}

/// Objective defined by a tape closure.
pub struct TapeObjective<F> {
    dim: usize,
    f: F,
}

impl<F> TapeObjective<F>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        TapeObjective { dim, f }
    }
}

impl<F> Objective for TapeObjective<F>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(gradient_of(&self.f, x).0)
    }
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(gradient_of(&self.f, x))
    }
}

#[derive(Debug, Clone)]
pub struct GradResult {
    pub value: f64,
    pub grad: Vec<f64>,
    pub n_evals: usize,
}

pub fn objective_gradient<O: Objective + ?Sized>(objective: &O, at: &ParamVector) -> Result<GradResult> {
    if at.len() != objective.dim() {
        return Err(Error::InvalidArgument(format!(
            "parameter vector has {} entries, objective expects {}",
            at.len(),
            objective.dim()
        )));
    }
    let (value, grad) = objective.value_grad(&at.flat)?;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Evaluation {
            value,
            snapshot: at.flat.clone(),
        });
    }
    Ok(GradResult {
        value,
        grad,
        n_evals: objective.evals_per_grad(),
    })
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub coords: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_err: Vec<f64>,
    pub max_rel_err: f64,
    pub worst: Option<usize>,
}

impl FdReport {
    /// Coordinates whose relative error exceeds `tol`, ignoring those where
    /// both estimates are below `floor` in magnitude.
    pub fn flagged(&self, tol: f64, floor: f64) -> Vec<usize> {
        self.coords
            .iter()
            .enumerate()
            .filter(|(k, _)| self.analytic[*k].abs().max(self.numeric[*k].abs()) > floor && self.rel_err[*k] > tol)
            .map(|(_, &c)| c)
            .collect()
    }

    /// Largest relative error over coordinates with `|grad| > floor`.
    pub fn max_rel_err_above(&self, floor: f64) -> f64 {
        (0..self.coords.len())
            .filter(|&k| self.analytic[k].abs() > floor)
            .map(|k| self.rel_err[k])
            .fold(0.0, f64::max)
    }
}

/// Central differences `(f(x + h e_k) − f(x − h e_k)) / 2h` against the
/// analytic gradient.
pub fn fd_check<O: Objective + ?Sized>(
    objective: &O,
    at: &ParamVector,
    step: f64,
    subset: Option<&[usize]>,
) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let g = objective_gradient(objective, at)?;
    let coords: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..at.len()).collect(),
    };
    let mut report = FdReport {
        coords: coords.clone(),
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
        rel_err: Vec::with_capacity(coords.len()),
        max_rel_err: 0.0,
        worst: None,
    };
    let mut x = at.flat.clone();
    for &k in &coords {
        let orig = x[k];
        x[k] = orig + step;
        let up = objective.value(&x)?;
        x[k] = orig - step;
        let dn = objective.value(&x)?;
        x[k] = orig;
        let num = (up - dn) / (2.0 * step);
        let ana = g.grad[k];
        let scale = ana.abs().max(num.abs());
        let rel = if scale > 0.0 { (ana - num).abs() / scale } else { 0.0 };
        if report.worst.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some(k);
        }
        report.analytic.push(ana);
        report.numeric.push(num);
        report.rel_err.push(rel);
    }
    Ok(report)
}

/// Rescales `g` in place so its Euclidean norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(flat: Vec<f64>) -> ParamVector {
        let n = flat.len();
        ParamVector {
            flat,
            layout: vec![ParamBlock {
                layer: 0,
                field: "x",
                range: 0..n,
            }],
        }
    }

    fn curved<T: Real>(x: &[T]) -> T {
        let a = (x[0] * x[1]).tanh() + x[2].exp() / (x[0] * x[0] + 1.0);
        let b = (x[1] * x[1] + 2.0).sqrt().ln() - x[2].softplus() * 0.3 + (x[0] * 3.0).log_sigmoid();
        a * b - (x[2] - x[1]) + x[1].sigmoid() * (x[0] * x[0]).ln_1p()
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let obj = TapeObjective::new(4, |t: &Tape, x: &[Var]| {
            let terms: Vec<Var> = x.iter().map(|&v| v * v * 0.5).collect();
            sum(&terms, t.constant(0.0))
        });
        let at = pv(vec![1.5, -2.0, 0.25, 7.0]);
        let g = objective_gradient(&obj, &at).unwrap();
        assert_eq!(g.grad, at.flat);
        assert_eq!(g.value, 0.5 * (2.25 + 4.0 + 0.0625 + 49.0));
    }

    #[test]
    fn linear_objective_has_tiny_fd_error() {
        let obj = TapeObjective::new(3, |_t: &Tape, x: &[Var]| x[0] * 2.0 - x[1] * 0.5 + x[2] * 3.0 + 1.0);
        let r = fd_check(&obj, &pv(vec![0.3, -1.0, 2.0]), 1e-3, None).unwrap();
        assert!(r.max_rel_err < 1e-10, "{}", r.max_rel_err);
    }

    #[test]
    fn curved_objective_matches_fd_and_large_steps_are_flagged() {
        let obj = TapeObjective::new(3, |_t: &Tape, x: &[Var]| curved(x));
        let at = pv(vec![0.4, -0.7, 0.2]);
        let fine = fd_check(&obj, &at, 1e-5, None).unwrap();
        assert!(fine.max_rel_err < 1e-8, "{}", fine.max_rel_err);
        let coarse = fd_check(&obj, &at, 1e-1, None).unwrap();
        assert!(coarse.max_rel_err > 10.0 * fine.max_rel_err);
        assert!(!coarse.flagged(1e-6, 1e-12).is_empty());
        // f64 path gives the same value
        assert_eq!(curved(&at.flat), obj.value(&at.flat).unwrap());
    }

    #[test]
    fn gradients_are_linear() {
        let f = tape_fn(|_t, x| curved(x));
        let g = tape_fn(|_t, x| (x[0] * x[2]).exp() - x[1] * x[1] * x[1]);
        let x = [0.2, 0.5, -0.3];
        let (_, gf) = gradient_of(f, &x);
        let (_, gg) = gradient_of(g, &x);
        let (_, gc) = gradient_of(|t: &Tape, v: &[Var]| f(t, v) * 2.0 - g(t, v) * 0.5, &x);
        for k in 0..3 {
            assert!((gc[k] - (2.0 * gf[k] - 0.5 * gg[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_gradients_are_bit_identical() {
        let x = [0.9, -0.1, 1.3];
        let a = gradient_of(|_t: &Tape, v: &[Var]| curved(v), &x);
        let b = gradient_of(|_t: &Tape, v: &[Var]| curved(v), &x);
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn custom_node_chains() {
        // custom node for sin with derivative cos
        let x = [0.7, 1.1];
        let (v, g) = gradient_of(
            |t: &Tape, v: &[Var]| {
                let p = v[0] * v[1];
                let s = t.custom(p.value().sin(), &[p], &[p.value().cos()]);
                s + v[0]
            },
            &x,
        );
        assert!((v - ((0.77f64).sin() + 0.7)).abs() < 1e-15);
        assert!((g[0] - (0.77f64.cos() * 1.1 + 1.0)).abs() < 1e-15);
        assert!((g[1] - 0.77f64.cos() * 0.7).abs() < 1e-15);
    }

    #[test]
    fn constants_do_not_enter_the_tape() {
        let t = Tape::new();
        let c = t.constant(2.0);
        let d = c * c + 1.0;
        assert!(d.index().is_none());
        assert!(t.is_empty());
        let x = t.var(3.0);
        let y = x * c;
        assert_eq!(t.gradient(y)[0], 2.0);
    }

    #[test]
    fn non_finite_objective_reports_snapshot() {
        let obj = TapeObjective::new(1, |_t: &Tape, x: &[Var]| x[0].ln());
        match objective_gradient(&obj, &pv(vec![-1.0])) {
            Err(Error::Evaluation { snapshot, .. }) => assert_eq!(snapshot, vec![-1.0]),
            other => panic!("expected evaluation error, got {other:?}"),
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut h = vec![0.1];
        clip_global_norm(&mut h, 1.0);
        assert_eq!(h, vec![0.1]);
    }

    #[test]
    fn layout_check() {
        let mut p = pv(vec![0.0; 3]);
        assert!(p.layout_is_exact());
        p.layout.push(ParamBlock {
            layer: 1,
            field: "y",
            range: 2..4,
        });
        assert!(!p.layout_is_exact());
    }
}
