//! Log-scale special functions used by the triple gamma density.
//!
//! The confluent hypergeometric function of the second kind is evaluated from
//! its integral representation
//!
//! ```text
//! U(a, b, z) = 1/Γ(a) ∫₀^∞ e^{-zt} t^{a-1} (1+t)^{b-a-1} dt
//! ```
//!
//! after the substitution `t = eˣ`. The left tail (`t → 0`) is integrated in
//! closed form from a second-order expansion, the remainder with a single
//! Gauss–Legendre rule, and everything is accumulated relative to the largest
//! log-integrand value so that neither very large `z` nor very small `a`
//! underflows.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.9999999999998099,
    676.5203681218851,
    -1259.139216722403,
    771.3234287776531,
    -176.6150291621406,
    12.507343278686905,
    -0.1385710952657201,
    9.984369578019572e-06,
    1.5056327351493116e-07,
];

/// Natural log of the gamma function for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("log_gamma requires x > 0, got {x}")));
    }
    Ok(ln_gamma_pos(x))
}

pub(crate) fn ln_gamma_pos(x: f64) -> f64 {
    if x < 0.5 {
        // reflection: Γ(x)Γ(1-x) = π / sin(πx)
        return PI.ln() - (PI * x).sin().ln() - ln_gamma_pos(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `log B(a, c) = log Γ(a) + log Γ(c) − log Γ(a + c)`.
pub fn log_beta(a: f64, c: f64) -> Result<f64> {
    Ok(log_gamma(a)? + log_gamma(c)? - log_gamma(a + c)?)
}

/// Numerically stable `log(1 / (1 + e^{-x}))`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y < 30.0 {
        y.exp_m1().ln()
    } else {
        // log(e^y - 1) = y + log(1 - e^{-y})
        y + (-(-y).exp()).ln_1p()
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub order: usize,
}

impl QuadratureRule {
    /// Builds the `order`-point Gauss–Legendre rule by Newton iteration on
    /// the Legendre recurrence. Nodes come out strictly increasing.
    pub fn gauss_legendre(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi initial guess for the i-th largest root
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        QuadratureRule {
            nodes,
            weights,
            order: n,
        }
    }

    /// Shared, lazily built rule for the orders used by [`log_hyp_u`].
    pub fn cached(order: usize) -> &'static QuadratureRule {
        static RULES: [OnceLock<QuadratureRule>; 5] = [
            OnceLock::new(),
            OnceLock::new(),
            OnceLock::new(),
            OnceLock::new(),
            OnceLock::new(),
        ];
        let slot = match order {
            64 => 0,
            128 => 1,
            256 => 2,
            512 => 3,
            1024 => 4,
            _ => panic!("no cached quadrature rule of order {order}"),
        };
        RULES[slot].get_or_init(|| QuadratureRule::gauss_legendre(order))
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let pn = if n == 0 { 1.0 } else { p1 };
    let pn1 = if n == 0 { 0.0 } else { p0 };
    let d = n as f64 * (x * pn - pn1) / (x * x - 1.0);
    (pn, d)
}

pub const DEFAULT_U_ORDER: usize = 128;
pub const MAX_U_ORDER: usize = 1024;
const U_AGREEMENT: f64 = 1e-8;

/// Value of `log U(a, b, z)` together with `∂/∂z log U(a, b, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogHypU {
    pub value: f64,
    pub d_dz: f64,
    /// Quadrature order that produced the returned value.
    pub order: usize,
}

/// `log U(a, b, z)` for `a > 0`, `z > 0`.
pub fn log_hyp_u(a: f64, b: f64, z: f64) -> Result<f64> {
    Ok(log_hyp_u_with_derivative(a, b, z)?.value)
}

/// Adaptive evaluation: order 128 doubled until two successive orders agree
/// to 1e-8 relative or order 1024 is reached.
pub fn log_hyp_u_with_derivative(a: f64, b: f64, z: f64) -> Result<LogHypU> {
    let integrand = UIntegrand::new(a, b, z)?;
    let mut order = DEFAULT_U_ORDER;
    let mut prev = integrand.evaluate(QuadratureRule::cached(order));
    while order < MAX_U_ORDER {
        order *= 2;
        let next = integrand.evaluate(QuadratureRule::cached(order));
        let agree = (next.0 - prev.0).abs() < U_AGREEMENT;
        prev = next;
        if agree {
            break;
        }
    }
    Ok(integrand.finish(prev, order))
}

/// Fixed-order evaluation of `log U`, used for self-consistency checks.
pub fn log_hyp_u_fixed_order(a: f64, b: f64, z: f64, order: usize) -> Result<f64> {
    let integrand = UIntegrand::new(a, b, z)?;
    let rule = QuadratureRule::gauss_legendre(order);
    let raw = integrand.evaluate(&rule);
    Ok(integrand.finish(raw, order).value)
}

/// Log-integrand `φ(x) = −z eˣ + a x + (b − a − 1) log(1 + eˣ)` in `x = log t`,
/// together with the integration window.
struct UIntegrand {
    a: f64,
    z: f64,
    p: f64,
    x_left: f64,
    x_right: f64,
    shift: f64,
    log_tail: f64,
    log_tail_t: f64,
}

impl UIntegrand {
    fn new(a: f64, b: f64, z: f64) -> Result<Self> {
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::Domain(format!("U(a, b, z) requires a > 0, got a = {a}")));
        }
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::Domain(format!("U(a, b, z) requires z > 0, got z = {z}")));
        }
        if !b.is_finite() {
            return Err(Error::Domain(format!("U(a, b, z) requires finite b, got {b}")));
        }
        let p = b - a - 1.0;
        let phi = |x: f64| -z * x.exp() + a * x + p * softplus(x);

        // Below t_left the integrand is t^{a-1}(1 + c1 t + c2 t²) to O(1e-12).
        let t_left = 1e-4 / (1.0 + z + p.abs());
        let x_left = t_left.ln();

        // Walk right until the log-integrand has dropped 50 nats below its
        // running maximum and is monotone decreasing from there on.
        let step = 0.5;
        let mut best = phi(x_left);
        let mut x = x_left;
        let monotone_from = ((a + p.abs() + 1.0) / z).ln();
        let mut x_right = x_left;
        for _ in 0..100_000 {
            x += step;
            let v = phi(x);
            if v > best {
                best = v;
            }
            if x > monotone_from && v < best - 50.0 {
                x_right = x;
                break;
            }
        }

        let c1 = p - z;
        let c2 = 0.5 * p * (p - 1.0) - p * z + 0.5 * z * z;
        let log_tail =
            a * x_left - a.ln() + (c1 * t_left * a / (a + 1.0) + c2 * t_left * t_left * a / (a + 2.0)).ln_1p();
        let log_tail_t = (a + 1.0) * x_left - (a + 1.0).ln()
            + (c1 * t_left * (a + 1.0) / (a + 2.0) + c2 * t_left * t_left * (a + 1.0) / (a + 3.0)).ln_1p();

        Ok(UIntegrand {
            a,
            z,
            p,
            x_left,
            x_right,
            shift: best,
            log_tail,
            log_tail_t,
        })
    }

    /// Returns `(log ∫, log ∫ t·integrand)`, both over `t ∈ (0, ∞)`.
    fn evaluate(&self, rule: &QuadratureRule) -> (f64, f64) {
        let half = 0.5 * (self.x_right - self.x_left);
        let mid = 0.5 * (self.x_right + self.x_left);
        let mut sum = 0.0;
        let mut sum_t = 0.0;
        for (node, w) in rule.nodes.iter().zip(&rule.weights) {
            let x = mid + half * node;
            let ex = x.exp();
            let v = -self.z * ex + self.a * x + self.p * softplus(x);
            let f = w * (v - self.shift).exp();
            sum += f;
            sum_t += f * ex;
        }
        sum *= half;
        sum_t *= half;
        sum += (self.log_tail - self.shift).exp();
        sum_t += (self.log_tail_t - self.shift).exp();
        (self.shift + sum.ln(), self.shift + sum_t.ln())
    }

    fn finish(&self, raw: (f64, f64), order: usize) -> LogHypU {
        LogHypU {
            value: raw.0 - ln_gamma_pos(self.a),
            d_dz: -(raw.1 - raw.0).exp(),
            order,
        }
    }
}
