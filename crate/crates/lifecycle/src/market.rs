//! Two-factor affine market: Ornstein-Uhlenbeck term-structure factors,
//! realized inflation, an equity index, and exponential-affine prices for
//! nominal and inflation-linked zero-coupon bonds.
//!
//! The real short rate is `r = delta_r + X1`, expected inflation is
//! `pi_e = delta_pi_e + X2`, and the factors mean-revert at speeds
//! `kappa1`, `kappa2` with loadings `sigma1`, `sigma2` on a 4-dimensional
//! Brownian motion. Prices of risk are affine, `Lambda(X) = Lambda0 +
//! Lambda1 X`. Bond log-price coefficients `A0(tau)`, `A1(tau)` (nominal)
//! and `A0R(tau)`, `A1R(tau)` (inflation-linked, in real terms) solve the
//! usual affine ODE systems with zero initial conditions.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::CubicTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid market parameters: {0}")]
    InvalidParams(String),
    #[error("bond ODE solution became non-finite before tau = {0}")]
    NonFiniteOde(f64),
    #[error("asset exposure matrix is numerically singular (condition {0:.3e})")]
    SingularSigma(f64),
    #[error("maturity {0} outside the solved coefficient grid (max {1})")]
    MaturityOutOfRange(f64, f64),
}

/// All market-level constants: factor dynamics, volatility loadings, and
/// prices of risk. Units are per year; vectors load on the 4 Brownian shocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    /// Real short-rate constant (1/year).
    pub delta_r: f64,
    /// Expected-inflation constant (1/year).
    pub delta_pi_e: f64,
    /// Nominal short-rate constant (1/year); tied to the others through
    /// `delta_big_r = delta_r + delta_pi_e - sigma_pi' lambda0`.
    pub delta_big_r: f64,
    /// Mean-reversion speed of the real-rate factor.
    pub kappa1: f64,
    /// Mean-reversion speed of the expected-inflation factor.
    pub kappa2: f64,
    /// Loadings of the real-rate factor (only the first entry may be nonzero).
    pub sigma1: Vector4<f64>,
    /// Loadings of the expected-inflation factor (first two entries).
    pub sigma2: Vector4<f64>,
    /// Realized-inflation loadings (first three entries).
    pub sigma_pi: Vector4<f64>,
    /// Equity loadings (all four entries).
    pub sigma_s: Vector4<f64>,
    /// Constant part of the equity risk premium.
    pub mu0: f64,
    /// Factor loadings of the equity risk premium.
    pub mu1: Vector2<f64>,
    /// Unconditional price of risk; third entry is structurally zero.
    pub lambda0: Vector4<f64>,
    /// Conditional price-of-risk loadings; rows 1-2 are diagonal, row 3 zero.
    pub lambda1: Matrix4x2<f64>,
}

impl MarketParams {
    /// Named built-in parameter sets. `us-1961-2023` is the monthly U.S.
    /// estimate shipped with the crate.
    pub fn preset(name: &str) -> Result<Self, MarketError> {
        match name {
            "us-1961-2023" => Ok(Self::us_1961_2023()),
            other => Err(MarketError::UnknownPreset(other.to_string())),
        }
    }

    /// U.S. monthly estimate, June 1961 - December 2023.
    pub fn us_1961_2023() -> Self {
        MarketParams {
            delta_r: 0.01254,
            delta_pi_e: 0.03831,
            delta_big_r: 0.05120,
            kappa1: 0.61921,
            kappa2: 0.18894,
            sigma1: Vector4::new(0.02209, 0.0, 0.0, 0.0),
            sigma2: Vector4::new(-0.00673, 0.01408, 0.0, 0.0),
            sigma_pi: Vector4::new(0.00042, 0.00207, 0.01363, 0.0),
            sigma_s: Vector4::new(-0.01974, -0.01785, -0.00793, 0.15410),
            mu0: 0.04600,
            mu1: Vector2::new(-1.97000, -1.41000),
            lambda0: Vector4::new(0.00487, -0.17007, 0.0, 0.27943),
            lambda1: Matrix4x2::new(
                -9.92002, 0.0, //
                0.0, -9.98001, //
                0.0, 0.0, //
                -14.05465, -10.30593,
            ),
        }
    }

    /// Factor loading matrix (2x4) with rows `sigma1`, `sigma2`.
    pub fn sigma_x(&self) -> Matrix2x4<f64> {
        Matrix2x4::from_rows(&[self.sigma1.transpose(), self.sigma2.transpose()])
    }

    /// Diagonal mean-reversion matrix.
    pub fn k_x(&self) -> Matrix2<f64> {
        Matrix2::new(self.kappa1, 0.0, 0.0, self.kappa2)
    }

    /// Price of risk `Lambda0 + Lambda1 X`.
    pub fn price_of_risk(&self, x: &Vector2<f64>) -> Vector4<f64> {
        self.lambda0 + self.lambda1 * x
    }

    /// Real short rate `delta_r + X1`.
    pub fn real_short_rate(&self, x: &Vector2<f64>) -> f64 {
        self.delta_r + x[0]
    }

    /// Expected inflation `delta_pi_e + X2`.
    pub fn expected_inflation(&self, x: &Vector2<f64>) -> f64 {
        self.delta_pi_e + x[1]
    }

    /// Nominal short rate `delta_R + (iota' - sigma_pi' Lambda1) X`.
    pub fn nominal_short_rate(&self, x: &Vector2<f64>) -> f64 {
        let load = Vector2::new(1.0, 1.0) - (self.lambda1.transpose() * self.sigma_pi);
        self.delta_big_r + load.dot(x)
    }

    /// Structural and consistency checks. The stacked volatility matrix must
    /// be lower triangular, the price-of-risk sparsity must hold, and the
    /// three cross-equation identities must be satisfied to 1e-6.
    pub fn validate(&self) -> Result<(), MarketError> {
        let fail = |msg: &str| Err(MarketError::InvalidParams(msg.to_string()));
        if !(self.kappa1 > 0.0 && self.kappa2 > 0.0) {
            return fail("mean-reversion speeds must be positive");
        }
        if self.sigma1[1] != 0.0 || self.sigma1[2] != 0.0 || self.sigma1[3] != 0.0 {
            return fail("sigma1 must be zero above the diagonal");
        }
        if self.sigma2[2] != 0.0 || self.sigma2[3] != 0.0 {
            return fail("sigma2 must be zero above the diagonal");
        }
        if self.sigma_pi[3] != 0.0 {
            return fail("sigma_pi must be zero above the diagonal");
        }
        if self.lambda0[2] != 0.0 {
            return fail("lambda0 third entry must be zero");
        }
        let l1 = &self.lambda1;
        if l1[(0, 1)] != 0.0 || l1[(1, 0)] != 0.0 || l1[(2, 0)] != 0.0 || l1[(2, 1)] != 0.0 {
            return fail("lambda1 violates its sparsity pattern");
        }
        let tol = 1e-6;
        let id_r = self.delta_r + self.delta_pi_e - self.sigma_pi.dot(&self.lambda0);
        if (id_r - self.delta_big_r).abs() > tol {
            return fail("delta_R identity violated");
        }
        if (self.sigma_s.dot(&self.lambda0) - self.mu0).abs() > tol {
            return fail("mu0 identity violated");
        }
        let mu1_implied = self.lambda1.transpose() * self.sigma_s;
        if (mu1_implied - self.mu1).amax() > tol {
            return fail("mu1 identity violated");
        }
        Ok(())
    }
}

/// Solved bond-price coefficients on a uniform maturity grid.
///
/// Column layout: `[A0, A1_1, A1_2, A0R, A1R_1, A1R_2]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BondCoefficients {
    table: CubicTable,
}

const C_A0: usize = 0;
const C_A1: usize = 1;
const C_A0R: usize = 3;
const C_A1R: usize = 4;

impl BondCoefficients {
    pub fn tau_max(&self) -> f64 {
        self.table.t_max()
    }

    pub fn step(&self) -> f64 {
        self.table.step
    }

    pub fn a0(&self, tau: f64) -> f64 {
        self.table.eval(C_A0, tau)
    }

    pub fn a1(&self, tau: f64) -> Vector2<f64> {
        Vector2::new(self.table.eval(C_A1, tau), self.table.eval(C_A1 + 1, tau))
    }

    pub fn a0r(&self, tau: f64) -> f64 {
        self.table.eval(C_A0R, tau)
    }

    pub fn a1r(&self, tau: f64) -> Vector2<f64> {
        Vector2::new(self.table.eval(C_A1R, tau), self.table.eval(C_A1R + 1, tau))
    }

    /// Nominal log bond price at state `x` for maturity `tau`.
    pub fn log_price_nominal(&self, tau: f64, x: &Vector2<f64>) -> f64 {
        self.a0(tau) + self.a1(tau).dot(x)
    }

    /// Real log price of the inflation-linked bond.
    pub fn log_price_real(&self, tau: f64, x: &Vector2<f64>) -> f64 {
        self.a0r(tau) + self.a1r(tau).dot(x)
    }

    /// Continuously compounded nominal yield for maturity `tau > 0`.
    pub fn nominal_yield(&self, tau: f64, x: &Vector2<f64>) -> f64 {
        -self.log_price_nominal(tau, x) / tau
    }

    /// Continuously compounded real yield for maturity `tau > 0`.
    pub fn real_yield(&self, tau: f64, x: &Vector2<f64>) -> f64 {
        -self.log_price_real(tau, x) / tau
    }
}

#[derive(Clone, Copy)]
struct OdeConsts {
    zz: Matrix2<f64>,          // Sigma_X Sigma_X'
    m: Matrix2<f64>,           // K_X' + Lambda1' Sigma_X'
    sx_l0: Vector2<f64>,       // Sigma_X Lambda0
    sx_l0_pi: Vector2<f64>,    // Sigma_X (Lambda0 - sigma_pi)
    l1t_spi: Vector2<f64>,     // Lambda1' sigma_pi
    delta_big_r: f64,
    delta_r: f64,
}

impl OdeConsts {
    fn new(p: &MarketParams) -> Self {
        let sx = p.sigma_x();
        OdeConsts {
            zz: sx * sx.transpose(),
            m: p.k_x().transpose() + p.lambda1.transpose() * sx.transpose(),
            sx_l0: sx * p.lambda0,
            sx_l0_pi: sx * (p.lambda0 - p.sigma_pi),
            l1t_spi: p.lambda1.transpose() * p.sigma_pi,
            delta_big_r: p.delta_big_r,
            delta_r: p.delta_r,
        }
    }

    #[inline]
    fn rhs(&self, y: &[f64; 6]) -> [f64; 6] {
        let a1 = Vector2::new(y[1], y[2]);
        let a1r = Vector2::new(y[4], y[5]);
        let iota = Vector2::new(1.0, 1.0);
        let da0 = 0.5 * (a1.transpose() * self.zz * a1)[0] - a1.dot(&self.sx_l0) - self.delta_big_r;
        let da1 = -self.m * a1 - iota + self.l1t_spi;
        let da0r =
            0.5 * (a1r.transpose() * self.zz * a1r)[0] - a1r.dot(&self.sx_l0_pi) - self.delta_r;
        let da1r = -self.m * a1r - Vector2::new(1.0, 0.0);
        [da0, da1[0], da1[1], da0r, da1r[0], da1r[1]]
    }
}

/// Default maturity step for the bond ODE grid (one trading day).
pub const DEFAULT_BOND_STEP: f64 = 1.0 / 252.0;

/// Integrate the nominal and inflation-linked coefficient ODEs out to
/// `tau_max` with classical RK4 at fixed `step`.
pub fn solve_bond_odes(
    params: &MarketParams,
    tau_max: f64,
    step: f64,
) -> Result<BondCoefficients, MarketError> {
    assert!(tau_max > 0.0 && step > 0.0);
    params.validate()?;
    let consts = OdeConsts::new(params);
    let n = (tau_max / step).ceil() as usize;
    let mut y = [0.0f64; 6];
    let mut columns = vec![Vec::with_capacity(n + 1); 6];
    for c in 0..6 {
        columns[c].push(0.0);
    }
    for i in 0..n {
        y = rk4_step(&consts, &y, step);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(MarketError::NonFiniteOde((i + 1) as f64 * step));
        }
        for c in 0..6 {
            columns[c].push(y[c]);
        }
    }
    Ok(BondCoefficients {
        table: CubicTable {
            t0: 0.0,
            step,
            columns,
        },
    })
}

#[inline]
fn rk4_step(c: &OdeConsts, y: &[f64; 6], h: f64) -> [f64; 6] {
    let add = |y: &[f64; 6], k: &[f64; 6], s: f64| {
        let mut o = *y;
        for i in 0..6 {
            o[i] += s * k[i];
        }
        o
    };
    let k1 = c.rhs(y);
    let k2 = c.rhs(&add(y, &k1, 0.5 * h));
    let k3 = c.rhs(&add(y, &k2, 0.5 * h));
    let k4 = c.rhs(&add(y, &k3, h));
    let mut o = *y;
    for i in 0..6 {
        o[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    o
}

/// The four tradable risky assets and their 4x4 exposure matrix: two nominal
/// bonds, one inflation-linked bond, and the equity index (cash is the
/// residual).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssetUniverse {
    /// Maturities (t1, t2) of the nominal bonds and t3 of the linker.
    pub maturities: [f64; 3],
    /// Row i is the diffusion loading of asset i on the 4 Brownian shocks.
    pub sigma: Matrix4<f64>,
    /// Cached inverse of `sigma'`, used by every strategy formula.
    sigma_t_inv: Matrix4<f64>,
    /// Columns `A1(t1)`, `A1(t2)` — the nominal-bond factor loadings.
    pub nominal_loadings: Matrix2<f64>,
    /// `A1R(t3)` — the linker's factor loading.
    pub linker_loading: Vector2<f64>,
}

/// Condition-number ceiling above which `sigma` is treated as singular.
pub const SIGMA_CONDITION_LIMIT: f64 = 1e12;

/// Assemble the asset exposure matrix from solved bond coefficients.
pub fn build_universe(
    params: &MarketParams,
    coeffs: &BondCoefficients,
    t1: f64,
    t2: f64,
    t3: f64,
) -> Result<AssetUniverse, MarketError> {
    for &t in &[t1, t2, t3] {
        if t <= 0.0 || t > coeffs.tau_max() + 1e-12 {
            return Err(MarketError::MaturityOutOfRange(t, coeffs.tau_max()));
        }
    }
    let sx = params.sigma_x();
    let a1_t1 = coeffs.a1(t1);
    let a1_t2 = coeffs.a1(t2);
    let a1r_t3 = coeffs.a1r(t3);
    let row1 = (a1_t1.transpose() * sx).transpose();
    let row2 = (a1_t2.transpose() * sx).transpose();
    let row3 = (a1r_t3.transpose() * sx).transpose() + params.sigma_pi;
    let sigma = Matrix4::from_rows(&[
        row1.transpose(),
        row2.transpose(),
        row3.transpose(),
        params.sigma_s.transpose(),
    ]);
    let svd = sigma.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > SIGMA_CONDITION_LIMIT {
        return Err(MarketError::SingularSigma(cond));
    }
    let sigma_t_inv = sigma
        .transpose()
        .try_inverse()
        .ok_or(MarketError::SingularSigma(cond))?;
    Ok(AssetUniverse {
        maturities: [t1, t2, t3],
        sigma,
        sigma_t_inv,
        nominal_loadings: Matrix2::from_columns(&[a1_t1, a1_t2]),
        linker_loading: a1r_t3,
    })
}

impl AssetUniverse {
    /// `inv(sigma') v` — the workhorse of every portfolio formula.
    pub fn solve_sigma_t(&self, v: &Vector4<f64>) -> Vector4<f64> {
        self.sigma_t_inv * v
    }
}
