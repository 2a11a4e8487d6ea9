//! Shared numerical kernels: quadrature rules and dense interpolation of
//! ODE solutions stored on uniform grids.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadError {
    #[error("adaptive quadrature did not reach relative tolerance {tol} (best error {best})")]
    NoConvergence { tol: f64, best: f64 },
}

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1].
///
/// Computed by Newton iteration on the Legendre polynomial; exact enough for
/// any n this crate uses (error at machine precision up to n of a few hundred).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-like initial guess
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // evaluate P_n and P_n' by recurrence
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Fixed Gauss-Legendre rule mapped onto [a, b].
pub struct FixedRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl FixedRule {
    pub fn new(n: usize, a: f64, b: f64) -> Self {
        let (x, w) = gauss_legendre(n);
        let c = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        FixedRule {
            nodes: x.iter().map(|&t| mid + c * t).collect(),
            weights: w.iter().map(|&wi| wi * c).collect(),
        }
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

// 7-point Gauss / 15-point Kronrod pair on [-1, 1].
const GK_XK: [f64; 8] = [
    0.991455371120813,
    0.949107912342759,
    0.864864423359769,
    0.741531185599394,
    0.586087235467691,
    0.405845151377397,
    0.207784955007898,
    0.0,
];
const GK_WK: [f64; 8] = [
    0.022935322010529,
    0.063092092629979,
    0.104790010322250,
    0.140653259715525,
    0.169004726639267,
    0.190350578064785,
    0.204432940075298,
    0.209482141084728,
];
const GK_WG: [f64; 4] = [
    0.129484966168870,
    0.279705391489277,
    0.381830050505119,
    0.417959183673469,
];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let fc = f(mid);
    let mut res_k = GK_WK[7] * fc;
    let mut res_g = GK_WG[3] * fc;
    for j in 0..7 {
        let x = c * GK_XK[j];
        let fsum = f(mid - x) + f(mid + x);
        res_k += GK_WK[j] * fsum;
        if j % 2 == 1 {
            res_g += GK_WG[j / 2] * fsum;
        }
    }
    res_k *= c;
    res_g *= c;
    (res_k, (res_k - res_g).abs())
}

/// Adaptive Gauss-Kronrod quadrature by interval bisection down to a relative
/// target. Meant for the smooth integrands of this crate; refuses to recurse
/// past `max_depth` and errors instead of silently returning garbage.
pub fn adaptive_quad<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
) -> Result<f64, QuadError> {
    if a == b {
        return Ok(0.0);
    }
    let (whole, err) = gk15(&mut f, a, b);
    let scale = whole.abs().max(1e-300);
    if err <= rel_tol * scale {
        return Ok(whole);
    }
    let total_len = (b - a).abs();
    let mut total = 0.0;
    let mut total_err = 0.0;
    // manual stack of (a, b, estimate, err, depth); error budget per interval
    // proportional to its length
    let mut stack = vec![(a, b, whole, err, 0u32)];
    while let Some((lo, hi, est, err, depth)) = stack.pop() {
        let budget = rel_tol * scale * (hi - lo).abs() / total_len;
        if err <= budget || depth >= 50 {
            total += est;
            total_err += err;
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let (l, le) = gk15(&mut f, lo, mid);
        let (r, re) = gk15(&mut f, mid, hi);
        stack.push((lo, mid, l, le, depth + 1));
        stack.push((mid, hi, r, re, depth + 1));
    }
    if total_err > 10.0 * rel_tol * total.abs().max(scale) {
        return Err(QuadError::NoConvergence {
            tol: rel_tol,
            best: total_err / total.abs().max(scale),
        });
    }
    Ok(total)
}

/// Columns of an ODE solution sampled on a uniform grid, with dense cubic
/// (4-point Lagrange) evaluation between grid points.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CubicTable {
    pub t0: f64,
    pub step: f64,
    /// `columns[c][i]` is column c at grid point i.
    pub columns: Vec<Vec<f64>>,
}

impl CubicTable {
    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, |c| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn t_max(&self) -> f64 {
        self.t0 + self.step * (self.len() - 1) as f64
    }

    pub fn grid_value(&self, col: usize, i: usize) -> f64 {
        self.columns[col][i]
    }

    /// Dense evaluation of one column at `t` (clamped to the grid range).
    pub fn eval(&self, col: usize, t: f64) -> f64 {
        let n = self.len();
        debug_assert!(n >= 2);
        let s = ((t - self.t0) / self.step).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n - 2);
        let u = s - i as f64;
        let vals = &self.columns[col];
        if n < 4 {
            // linear fallback for very short tables
            return vals[i] * (1.0 - u) + vals[i + 1] * u;
        }
        // pick the 4-point stencil i-1..i+2, clamped at the ends
        let j = i.clamp(1, n - 3);
        let d = u + (i as f64 - j as f64); // local coordinate relative to j
        let (y0, y1, y2, y3) = (vals[j - 1], vals[j], vals[j + 1], vals[j + 2]);
        // Lagrange cubic through points at local x = -1, 0, 1, 2
        let c0 = -d * (d - 1.0) * (d - 2.0) / 6.0;
        let c1 = (d + 1.0) * (d - 1.0) * (d - 2.0) / 2.0;
        let c2 = -(d + 1.0) * d * (d - 2.0) / 2.0;
        let c3 = (d + 1.0) * d * (d - 1.0) / 6.0;
        c0 * y0 + c1 * y1 + c2 * y2 + c3 * y3
    }

    pub fn eval_many(&self, t: f64, out: &mut [f64]) {
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = self.eval(c, t);
        }
    }
}

/// Composite Simpson rule with `n` (even) intervals; the brute-force oracle
/// used by tests against the adaptive integrator.
pub fn simpson<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 0 { n } else { n + 1 };
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}
