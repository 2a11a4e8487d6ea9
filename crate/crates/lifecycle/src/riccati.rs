//! The quadratic-exponential value-function machinery.
//!
//! The closed-form value functions of all three life phases share a factor
//! `f(X, tau) = exp(Gamma0 + Gamma1' X + X' Gamma2 X / 2)` whose coefficients
//! solve a coupled ODE system: a 2x2 Hermitian matrix Riccati equation for
//! `Gamma2`, a linear equation for `Gamma1` driven by `Gamma2`, and a scalar
//! quadrature for `Gamma0`. This module
//!
//! - assembles the constant coefficient blocks from market parameters and
//!   household preferences ([`build_coefficients`]),
//! - integrates the system by fixed-step RK4 ([`solve_gamma_system`]),
//! - solves the same Riccati flow through its Hamiltonian linearization
//!   (`Gamma2 = P Q^{-1}`, [`radon_solve`]) as an independent second route,
//! - runs the global-existence test batteries ([`existence_check`]), and
//! - evaluates the value-function building blocks `f`, `f1`, `f2` and their
//!   state derivatives ([`ValueEvaluator`]).

use nalgebra::{Complex, Matrix2, Matrix4, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuarial::MortalityLaw;
use crate::market::MarketParams;
use crate::numerics::{adaptive_quad, CubicTable, QuadError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("gamma = 1 is excluded by the power-utility closed forms")]
    GammaOne,
    #[error("invalid preference parameters: {0}")]
    InvalidPreferences(String),
    #[error("Riccati flow escaped to infinity near tau = {tau}")]
    BlowUp { tau: f64 },
    #[error("det Q(tau) vanished near tau = {tau}; conjugate point reached")]
    QSingular { tau: f64 },
    #[error("quadrature failure: {0}")]
    QuadratureFail(#[from] QuadError),
}

/// Constant coefficient blocks of the `Gamma` ODE system for a given
/// `(market, gamma, theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaCoefficients {
    pub gamma: f64,
    pub theta: f64,
    pub z2: Matrix2<f64>,
    pub z1: Matrix2<f64>,
    pub z0: Matrix2<f64>,
    pub b2: Matrix2<f64>,
    pub b11: Vector2<f64>,
    pub b12: Matrix2<f64>,
    pub b0: Vector2<f64>,
    pub d2: Matrix2<f64>,
    pub d1: Vector2<f64>,
    pub d0: f64,
}

/// Assemble the ten coefficient blocks. Requires `gamma > 0`, `gamma != 1`,
/// and `theta` in `[0, 1]`.
pub fn build_coefficients(
    params: &MarketParams,
    gamma: f64,
    theta: f64,
) -> Result<GammaCoefficients, RiccatiError> {
    if gamma == 1.0 {
        return Err(RiccatiError::GammaOne);
    }
    if !(gamma > 0.0) {
        return Err(RiccatiError::InvalidPreferences(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(RiccatiError::InvalidPreferences(format!(
            "theta must lie in [0, 1], got {theta}"
        )));
    }
    let g = (1.0 - gamma) / gamma;
    let sx = params.sigma_x();
    let l1 = params.lambda1;
    let l0_pi = params.lambda0 - params.sigma_pi;
    let z2 = sx * sx.transpose();
    let z1 = g * sx * l1 - params.k_x();
    let z0 = (g / gamma) * l1.transpose() * l1;
    let b11 = sx * (g * l0_pi + theta * g * params.sigma_pi);
    let b0 = g * Vector2::new(1.0, 0.0)
        + g * theta * Vector2::new(0.0, 1.0)
        + (g / gamma) * l1.transpose() * l0_pi
        + theta * g * g * l1.transpose() * params.sigma_pi;
    let spi2 = params.sigma_pi.dot(&params.sigma_pi);
    let d0 = g * (params.delta_r + theta * params.delta_pi_e)
        + (g / (2.0 * gamma)) * l0_pi.dot(&l0_pi)
        + 0.5 * theta * g * (theta * g - 1.0) * spi2
        + theta * g * g * l0_pi.dot(&params.sigma_pi);
    Ok(GammaCoefficients {
        gamma,
        theta,
        z2,
        z1,
        z0,
        b2: z2,
        b11,
        b12: z1.transpose(),
        b0,
        d2: 0.5 * z2,
        d1: b11,
        d0,
    })
}

impl GammaCoefficients {
    /// The 4x4 Hamiltonian matrix of the linearized Riccati flow.
    pub fn hamiltonian(&self) -> Matrix4<f64> {
        let mut h = Matrix4::zeros();
        h.fixed_view_mut::<2, 2>(0, 0).copy_from(&(-self.z1));
        h.fixed_view_mut::<2, 2>(0, 2).copy_from(&(-self.z2));
        h.fixed_view_mut::<2, 2>(2, 0).copy_from(&self.z0);
        h.fixed_view_mut::<2, 2>(2, 2)
            .copy_from(&self.z1.transpose());
        h
    }

    #[inline]
    fn rhs(&self, g2: &Matrix2<f64>, g1: &Vector2<f64>) -> (Matrix2<f64>, Vector2<f64>, f64) {
        let d2 = g2 * self.z2 * g2 + self.z1.transpose() * g2 + g2 * self.z1 + self.z0;
        let d1 = g2 * self.b2 * g1 + g2 * self.b11 + self.b12 * g1 + self.b0;
        let d0 = (g1.transpose() * self.d2 * g1)[0]
            + g1.dot(&self.d1)
            + 0.5 * (g2 * self.z2).trace()
            + self.d0;
        (d2, d1, d0)
    }
}

/// Default RK4 step for the `Gamma` system (one trading day).
pub const DEFAULT_GAMMA_STEP: f64 = 1.0 / 252.0;

/// Norm ceiling that flags a finite-time escape of the Riccati flow.
pub const BLOWUP_LIMIT: f64 = 1e12;

/// Solved `Gamma` trajectories on a uniform `tau` grid with dense cubic
/// interpolation, plus the attached existence diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GammaSolution {
    pub gamma: f64,
    pub theta: f64,
    pub horizon: f64,
    /// Columns: `[Gamma0, Gamma1_1, Gamma1_2, Gamma2_11, Gamma2_12, Gamma2_22]`.
    table: CubicTable,
    pub existence: ExistenceReport,
}

impl GammaSolution {
    pub fn step(&self) -> f64 {
        self.table.step
    }

    pub fn gamma0(&self, tau: f64) -> f64 {
        self.table.eval(0, tau)
    }

    pub fn gamma1(&self, tau: f64) -> Vector2<f64> {
        Vector2::new(self.table.eval(1, tau), self.table.eval(2, tau))
    }

    pub fn gamma2(&self, tau: f64) -> Matrix2<f64> {
        let (a, b, c) = (
            self.table.eval(3, tau),
            self.table.eval(4, tau),
            self.table.eval(5, tau),
        );
        Matrix2::new(a, b, b, c)
    }

    /// Log of the value-function factor: `Gamma0 + Gamma1'X + X'Gamma2 X / 2`.
    pub fn log_f(&self, x: &Vector2<f64>, tau: f64) -> f64 {
        let g2 = self.gamma2(tau);
        self.gamma0(tau) + self.gamma1(tau).dot(x) + 0.5 * (x.transpose() * g2 * x)[0]
    }

    /// The value-function factor `f(X, tau)`, strictly positive.
    pub fn eval_f(&self, x: &Vector2<f64>, tau: f64) -> f64 {
        self.log_f(x, tau).exp()
    }

    /// Largest eigenvalue of `Gamma2` over the stored grid.
    pub fn max_gamma2_eigenvalue(&self) -> f64 {
        let n = self.table.len();
        let mut max = f64::NEG_INFINITY;
        for i in 1..n {
            let a = self.table.grid_value(3, i);
            let b = self.table.grid_value(4, i);
            let c = self.table.grid_value(5, i);
            max = max.max(sym2_max_eig(a, b, c));
        }
        max
    }
}

#[inline]
fn sym2_max_eig(a: f64, b: f64, c: f64) -> f64 {
    let tr = a + c;
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    0.5 * tr + disc
}

/// Integrate the coupled `Gamma` system by RK4 and attach existence
/// diagnostics computed from the same coefficients.
pub fn solve_gamma_system(
    coeffs: &GammaCoefficients,
    horizon: f64,
    step: f64,
) -> Result<GammaSolution, RiccatiError> {
    assert!(horizon > 0.0 && step > 0.0);
    let n = (horizon / step).ceil() as usize;
    let mut g2 = Matrix2::zeros();
    let mut g1 = Vector2::zeros();
    let mut g0 = 0.0f64;
    let mut columns = vec![Vec::with_capacity(n + 1); 6];
    let push = |cols: &mut Vec<Vec<f64>>, g0: f64, g1: &Vector2<f64>, g2: &Matrix2<f64>| {
        cols[0].push(g0);
        cols[1].push(g1[0]);
        cols[2].push(g1[1]);
        cols[3].push(g2[(0, 0)]);
        cols[4].push(g2[(0, 1)]);
        cols[5].push(g2[(1, 1)]);
    };
    push(&mut columns, g0, &g1, &g2);
    for i in 0..n {
        let (k1m, k1v, k1s) = coeffs.rhs(&g2, &g1);
        let (k2m, k2v, k2s) = coeffs.rhs(&(g2 + 0.5 * step * k1m), &(g1 + 0.5 * step * k1v));
        let (k3m, k3v, k3s) = coeffs.rhs(&(g2 + 0.5 * step * k2m), &(g1 + 0.5 * step * k2v));
        let (k4m, k4v, k4s) = coeffs.rhs(&(g2 + step * k3m), &(g1 + step * k3v));
        g2 += step / 6.0 * (k1m + 2.0 * k2m + 2.0 * k3m + k4m);
        g2 = 0.5 * (g2 + g2.transpose());
        g1 += step / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        g0 += step / 6.0 * (k1s + 2.0 * k2s + 2.0 * k3s + k4s);
        let norm = g2.amax().max(g1.amax()).max(g0.abs());
        if !norm.is_finite() || norm > BLOWUP_LIMIT {
            return Err(RiccatiError::BlowUp {
                tau: (i + 1) as f64 * step,
            });
        }
        push(&mut columns, g0, &g1, &g2);
    }
    let existence = existence_from_coefficients(coeffs, horizon);
    Ok(GammaSolution {
        gamma: coeffs.gamma,
        theta: coeffs.theta,
        horizon,
        table: CubicTable {
            t0: 0.0,
            step,
            columns,
        },
        existence,
    })
}

/// The Hamiltonian matrix of the linearized flow together with its spectrum.
#[derive(Debug, Clone)]
pub struct HamiltonianSystem {
    pub matrix: Matrix4<f64>,
    /// Eigenvalues sorted by ascending real part.
    pub eigenvalues: [Complex<f64>; 4],
}

impl HamiltonianSystem {
    pub fn new(coeffs: &GammaCoefficients) -> Self {
        let h = coeffs.hamiltonian();
        let ev = h.complex_eigenvalues();
        let mut eigenvalues = [ev[0], ev[1], ev[2], ev[3]];
        eigenvalues.sort_by(|a, b| a.re.partial_cmp(&b.re).unwrap());
        HamiltonianSystem {
            matrix: h,
            eigenvalues,
        }
    }

    /// Coefficients `(b, c, d, j)` of `det(lambda I - H) = lambda^4 +
    /// b lambda^3 + c lambda^2 + d lambda + j`, from power sums of `H`.
    pub fn char_poly(&self) -> (f64, f64, f64, f64) {
        let h = &self.matrix;
        let h2 = h * h;
        let h3 = h2 * h;
        let h4 = h3 * h;
        let t1 = h.trace();
        let t2 = h2.trace();
        let t3 = h3.trace();
        let t4 = h4.trace();
        let b = -t1;
        let c = (t1 * t1 - t2) / 2.0;
        let d = -(t1 * t1 * t1 - 3.0 * t1 * t2 + 2.0 * t3) / 6.0;
        let j = (t1.powi(4) - 6.0 * t1 * t1 * t2 + 3.0 * t2 * t2 + 8.0 * t1 * t3 - 6.0 * t4) / 24.0;
        (b, c, d, j)
    }

    /// Smallest pairwise eigenvalue distance, used as the numerical
    /// diagonalizability margin.
    pub fn min_eigenvalue_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for i in 0..4 {
            for k in (i + 1)..4 {
                gap = gap.min((self.eigenvalues[i] - self.eigenvalues[k]).norm());
            }
        }
        gap
    }

    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues.iter().map(|e| e.norm()).fold(0.0, f64::max)
    }
}

/// Trajectory of the linear system `(Q, P)' = H (Q, P)` with `Q(0) = I`,
/// `P(0) = 0`, and the Riccati solution recovered as `Gamma2 = P Q^{-1}`.
#[derive(Debug, Clone)]
pub struct RadonSolution {
    pub step: f64,
    pub q: Vec<Matrix2<f64>>,
    pub p: Vec<Matrix2<f64>>,
    pub gamma2: Vec<Matrix2<f64>>,
    pub min_abs_det_q: f64,
}

impl RadonSolution {
    pub fn tau(&self, i: usize) -> f64 {
        self.step * i as f64
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

/// Threshold on `|det Q|` below which the linearization is declared singular.
pub const DET_Q_LIMIT: f64 = 1e-12;

/// Solve the Riccati flow through its Hamiltonian linearization. The step
/// transfer matrix `exp(H h)` is exact (Pade scaling-and-squaring), so this
/// route carries no truncation error in `tau`. Each grid step restarts the
/// linear system from the current `Gamma2` — the flow-composition form of
/// `P Q^{-1}` — because the global `Q(tau)` turns ill-conditioned once its
/// columns align with the dominant eigenspace. The cocycle identity
/// `Q(tau + h) = Q_step Q(tau)` still yields the global `Q`, `P`, and
/// `det Q` exactly.
pub fn radon_solve(
    coeffs: &GammaCoefficients,
    horizon: f64,
    step: f64,
) -> Result<RadonSolution, RiccatiError> {
    assert!(horizon > 0.0 && step > 0.0);
    let h = coeffs.hamiltonian();
    let transfer = (h * step).exp();
    let t11: Matrix2<f64> = transfer.fixed_view::<2, 2>(0, 0).into_owned();
    let t12: Matrix2<f64> = transfer.fixed_view::<2, 2>(0, 2).into_owned();
    let t21: Matrix2<f64> = transfer.fixed_view::<2, 2>(2, 0).into_owned();
    let t22: Matrix2<f64> = transfer.fixed_view::<2, 2>(2, 2).into_owned();
    let n = (horizon / step).ceil() as usize;
    let mut q = Vec::with_capacity(n + 1);
    let mut p = Vec::with_capacity(n + 1);
    let mut gamma2 = Vec::with_capacity(n + 1);
    let mut g2 = Matrix2::<f64>::zeros();
    let mut q_global = Matrix2::<f64>::identity();
    let mut p_global = Matrix2::<f64>::zeros();
    let mut det_global = 1.0f64;
    let mut min_det = f64::INFINITY;
    for i in 0..=n {
        min_det = min_det.min(det_global.abs());
        if det_global.abs() < DET_Q_LIMIT {
            return Err(RiccatiError::QSingular {
                tau: i as f64 * step,
            });
        }
        q.push(q_global);
        p.push(p_global);
        gamma2.push(g2);
        if i < n {
            let q_step = t11 + t12 * g2;
            let p_step = t21 + t22 * g2;
            let det_step = q_step.determinant();
            let inv = q_step.try_inverse().filter(|_| det_step.abs() > 1e-300);
            let inv = inv.ok_or(RiccatiError::QSingular {
                tau: (i + 1) as f64 * step,
            })?;
            g2 = p_step * inv;
            // cocycle: the restarted blocks left-multiply the old global Q
            let q_new = q_step * q_global;
            p_global = p_step * q_global;
            q_global = q_new;
            det_global *= det_step;
            if !g2.iter().all(|v| v.is_finite()) {
                return Err(RiccatiError::BlowUp {
                    tau: (i + 1) as f64 * step,
                });
            }
        }
    }
    Ok(RadonSolution {
        step,
        q,
        p,
        gamma2,
        min_abs_det_q: min_det,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    GammaAboveOne,
    GammaBelowOne,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExistenceCheck {
    pub name: String,
    pub value: f64,
    pub pass: bool,
}

/// Outcome of the regime-appropriate global-existence battery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExistenceReport {
    pub regime: Regime,
    pub checks: Vec<ExistenceCheck>,
    /// All regime-relevant checks passed.
    pub satisfied: bool,
    /// The Hamiltonian spectrum was too clustered to classify reliably.
    pub indeterminate: bool,
    /// Smallest `|det Q(tau)|` seen on the scan grid (`gamma < 1` regime).
    pub min_abs_det_q: Option<f64>,
    /// Largest eigenvalue of `Gamma2` over the scan grid.
    pub max_gamma2_eigenvalue: Option<f64>,
}

/// Number of grid points used by the definiteness / det Q scans.
pub const EXISTENCE_SCAN_POINTS: usize = 600;

/// Run the existence battery for `(params, gamma, theta)` over `[0, horizon]`.
pub fn existence_check(
    params: &MarketParams,
    gamma: f64,
    theta: f64,
    horizon: f64,
) -> Result<ExistenceReport, RiccatiError> {
    let coeffs = build_coefficients(params, gamma, theta)?;
    Ok(existence_from_coefficients(&coeffs, horizon))
}

fn existence_from_coefficients(coeffs: &GammaCoefficients, horizon: f64) -> ExistenceReport {
    let gamma = coeffs.gamma;
    let mut checks = Vec::new();
    if gamma > 1.0 {
        // Sigma_X Sigma_X' = Z2 directly; Lambda1' Lambda1 recovered from Z0.
        let min_z2 = -sym2_max_eig(-coeffs.z2[(0, 0)], -coeffs.z2[(0, 1)], -coeffs.z2[(1, 1)]);
        let l1tl1 = (gamma * gamma / (1.0 - gamma)) * coeffs.z0;
        let min_l1 = -sym2_max_eig(-l1tl1[(0, 0)], -l1tl1[(0, 1)], -l1tl1[(1, 1)]);
        checks.push(ExistenceCheck {
            name: "min_eig_sigma_x_gram".into(),
            value: min_z2,
            pass: min_z2 > 0.0,
        });
        checks.push(ExistenceCheck {
            name: "min_eig_lambda1_gram".into(),
            value: min_l1,
            pass: min_l1 > 0.0,
        });
        let satisfied = checks.iter().all(|c| c.pass);
        return ExistenceReport {
            regime: Regime::GammaAboveOne,
            checks,
            satisfied,
            indeterminate: false,
            min_abs_det_q: None,
            max_gamma2_eigenvalue: None,
        };
    }

    // 0 < gamma < 1: quartic root conditions plus the det Q / definiteness scan
    let ham = HamiltonianSystem::new(coeffs);
    let (b, c, d, j) = ham.char_poly();
    let (q, _r, s, disc) = depressed_quartic(b, c, d, j);
    checks.push(ExistenceCheck {
        name: "quartic_discriminant".into(),
        value: disc,
        pass: disc > 0.0,
    });
    checks.push(ExistenceCheck {
        name: "quartic_q_negative".into(),
        value: q,
        pass: q < 0.0,
    });
    checks.push(ExistenceCheck {
        name: "quartic_s_below_q2_over_4".into(),
        value: q * q / 4.0 - s,
        pass: s < q * q / 4.0,
    });
    let gap = ham.min_eigenvalue_gap();
    let rho = ham.spectral_radius();
    let indeterminate = gap <= 1e-8 * rho;
    checks.push(ExistenceCheck {
        name: "eigenvalue_gap".into(),
        value: gap,
        pass: !indeterminate,
    });

    let step = horizon / EXISTENCE_SCAN_POINTS as f64;
    let scan = radon_solve(coeffs, horizon, step);
    let (min_det, max_eig, scan_ok) = match &scan {
        Ok(sol) => {
            let mut max_eig = f64::NEG_INFINITY;
            for g2 in sol.gamma2.iter().skip(1) {
                max_eig = max_eig.max(sym2_max_eig(
                    g2[(0, 0)],
                    0.5 * (g2[(0, 1)] + g2[(1, 0)]),
                    g2[(1, 1)],
                ));
            }
            (sol.min_abs_det_q, max_eig, true)
        }
        Err(_) => (0.0, f64::INFINITY, false),
    };
    checks.push(ExistenceCheck {
        name: "min_abs_det_q".into(),
        value: min_det,
        pass: scan_ok && min_det > DET_Q_LIMIT,
    });
    checks.push(ExistenceCheck {
        name: "gamma2_negative_definite".into(),
        value: max_eig,
        pass: scan_ok && max_eig < 0.0,
    });
    let satisfied = checks.iter().all(|c| c.pass);
    ExistenceReport {
        regime: Regime::GammaBelowOne,
        checks,
        satisfied,
        indeterminate,
        min_abs_det_q: Some(min_det),
        max_gamma2_eigenvalue: Some(max_eig),
    }
}

/// Depressed-quartic data `(q, r, s, discriminant)` for
/// `lambda^4 + b lambda^3 + c lambda^2 + d lambda + j`.
pub fn depressed_quartic(b: f64, c: f64, d: f64, j: f64) -> (f64, f64, f64, f64) {
    let q = (8.0 * c - 3.0 * b * b) / 8.0;
    let r = (b * b * b - 4.0 * b * c + 8.0 * d) / 8.0;
    let s = (-3.0 * b.powi(4) + 256.0 * j - 64.0 * b * d + 16.0 * b * b * c) / 256.0;
    let disc = -4.0 * q.powi(3) * r * r - 27.0 * r.powi(4)
        + 256.0 * s.powi(3)
        + 16.0 * q.powi(4) * s
        + 144.0 * q * r * r * s
        - 128.0 * q * q * s * s;
    (q, r, s, disc)
}

/// Relative tolerance of the `f1`/`f2` quadratures.
pub const VALUE_QUAD_TOL: f64 = 1e-8;

/// Evaluates the value-function building blocks for one household:
///
/// - `f1(t, X) = int_t^T e^{-delta (s-t)/gamma} f(X, s-t) ds`
/// - `f2(t, X) = kappa1^{1/gamma} int_t^T p(t, s-t) e^{-delta (s-t)/gamma}
///   f(X, s-t) ds + kappa2^{1/gamma} f1(t, X)`
///
/// plus gradients, Hessians, and time derivatives obtained by
/// differentiating under the integral sign (the exponent is affine-quadratic
/// in `X`, so these are exact rather than finite differences).
#[derive(Clone)]
pub struct ValueEvaluator<'a> {
    pub solution: &'a GammaSolution,
    pub law: &'a MortalityLaw,
    pub delta: f64,
    pub kappa1_w: f64,
    pub kappa2_w: f64,
    pub horizon: f64,
}

impl<'a> ValueEvaluator<'a> {
    pub fn new(
        solution: &'a GammaSolution,
        law: &'a MortalityLaw,
        delta: f64,
        kappa1_w: f64,
        kappa2_w: f64,
        horizon: f64,
    ) -> Self {
        debug_assert!((kappa1_w + kappa2_w - 1.0).abs() < 1e-12);
        debug_assert!(horizon <= solution.horizon + 1e-9);
        ValueEvaluator {
            solution,
            law,
            delta,
            kappa1_w,
            kappa2_w,
            horizon,
        }
    }

    #[inline]
    pub fn gamma(&self) -> f64 {
        self.solution.gamma
    }

    #[inline]
    fn kappa1_pow(&self) -> f64 {
        if self.kappa1_w == 0.0 {
            0.0
        } else {
            self.kappa1_w.powf(1.0 / self.gamma())
        }
    }

    #[inline]
    pub fn kappa2_pow(&self) -> f64 {
        self.kappa2_w.powf(1.0 / self.gamma())
    }

    pub fn f(&self, x: &Vector2<f64>, tau: f64) -> f64 {
        self.solution.eval_f(x, tau)
    }

    /// `f1(t, X)`; zero at `t = T`.
    pub fn f1(&self, t: f64, x: &Vector2<f64>) -> Result<f64, RiccatiError> {
        let disc = self.delta / self.gamma();
        let v = adaptive_quad(
            |u| (-disc * u).exp() * self.solution.eval_f(x, u),
            0.0,
            (self.horizon - t).max(0.0),
            VALUE_QUAD_TOL,
        )?;
        Ok(v)
    }

    pub fn f1_gradient(&self, t: f64, x: &Vector2<f64>) -> Result<Vector2<f64>, RiccatiError> {
        let disc = self.delta / self.gamma();
        let mut g = Vector2::zeros();
        for i in 0..2 {
            g[i] = adaptive_quad(
                |u| {
                    let w = (-disc * u).exp() * self.solution.eval_f(x, u);
                    let lin = self.solution.gamma1(u) + self.solution.gamma2(u) * x;
                    w * lin[i]
                },
                0.0,
                (self.horizon - t).max(0.0),
                VALUE_QUAD_TOL,
            )?;
        }
        Ok(g)
    }

    /// Survival-weighted part of `f2` (the breadwinner term without its
    /// `kappa1^{1/gamma}` factor).
    fn survival_integral(&self, t: f64, x: &Vector2<f64>) -> Result<f64, RiccatiError> {
        let disc = self.delta / self.gamma();
        let v = adaptive_quad(
            |u| self.law.survival_from(t, u) * (-disc * u).exp() * self.solution.eval_f(x, u),
            0.0,
            (self.horizon - t).max(0.0),
            VALUE_QUAD_TOL,
        )?;
        Ok(v)
    }

    /// `f2(t, X)`; collapses to `f1` when the breadwinner weight is zero.
    pub fn f2(&self, t: f64, x: &Vector2<f64>) -> Result<f64, RiccatiError> {
        let f1 = self.f1(t, x)?;
        if self.kappa1_w == 0.0 {
            return Ok(self.kappa2_pow() * f1);
        }
        Ok(self.kappa1_pow() * self.survival_integral(t, x)? + self.kappa2_pow() * f1)
    }

    pub fn f2_gradient(&self, t: f64, x: &Vector2<f64>) -> Result<Vector2<f64>, RiccatiError> {
        let disc = self.delta / self.gamma();
        let mut g = self.kappa2_pow() * self.f1_gradient(t, x)?;
        if self.kappa1_w != 0.0 {
            for i in 0..2 {
                g[i] += self.kappa1_pow()
                    * adaptive_quad(
                        |u| {
                            let w = self.law.survival_from(t, u)
                                * (-disc * u).exp()
                                * self.solution.eval_f(x, u);
                            let lin = self.solution.gamma1(u) + self.solution.gamma2(u) * x;
                            w * lin[i]
                        },
                        0.0,
                        (self.horizon - t).max(0.0),
                        VALUE_QUAD_TOL,
                    )?;
            }
        }
        Ok(g)
    }

    /// Hessian of `f2` in the state, for the dynamic-programming residuals.
    pub fn f2_hessian(&self, t: f64, x: &Vector2<f64>) -> Result<Matrix2<f64>, RiccatiError> {
        self.weighted_hessian(t, x, true)
    }

    pub fn f1_hessian(&self, t: f64, x: &Vector2<f64>) -> Result<Matrix2<f64>, RiccatiError> {
        self.weighted_hessian(t, x, false)
    }

    fn weighted_hessian(
        &self,
        t: f64,
        x: &Vector2<f64>,
        with_mortality: bool,
    ) -> Result<Matrix2<f64>, RiccatiError> {
        let disc = self.delta / self.gamma();
        let upper = (self.horizon - t).max(0.0);
        let mut h = Matrix2::zeros();
        // integrate each of the three distinct entries of the symmetric matrix
        for (i, k) in [(0usize, 0usize), (0, 1), (1, 1)] {
            let entry = |weight: fn(&Self, f64, f64) -> f64| {
                adaptive_quad(
                    |u| {
                        let w = weight(self, t, u) * (-disc * u).exp() * self.solution.eval_f(x, u);
                        let g2 = self.solution.gamma2(u);
                        let lin = self.solution.gamma1(u) + g2 * x;
                        w * (lin[i] * lin[k] + g2[(i, k)])
                    },
                    0.0,
                    upper,
                    VALUE_QUAD_TOL,
                )
            };
            let plain = entry(|_, _, _| 1.0)?;
            let val = if with_mortality {
                let surv = if self.kappa1_w != 0.0 {
                    entry(|s, t, u| s.law.survival_from(t, u))?
                } else {
                    0.0
                };
                self.kappa1_pow() * surv + self.kappa2_pow() * plain
            } else {
                plain
            };
            h[(i, k)] = val;
            h[(k, i)] = val;
        }
        Ok(h)
    }

    /// `d f1 / d t`: only the integration limit moves.
    pub fn f1_time_derivative(&self, t: f64, x: &Vector2<f64>) -> f64 {
        let tau = (self.horizon - t).max(0.0);
        -((-self.delta / self.gamma() * tau).exp()) * self.solution.eval_f(x, tau)
    }

    /// `d f2 / d t`: moving limit plus the ageing of the survival weight
    /// (`d/dt p(t, u) = (hazard(t) - hazard(t+u)) p(t, u)`).
    pub fn f2_time_derivative(&self, t: f64, x: &Vector2<f64>) -> Result<f64, RiccatiError> {
        let tau = (self.horizon - t).max(0.0);
        let disc = self.delta / self.gamma();
        let mut d = self.kappa2_pow() * self.f1_time_derivative(t, x);
        if self.kappa1_w != 0.0 {
            let boundary =
                self.law.survival_from(t, tau) * (-disc * tau).exp() * self.solution.eval_f(x, tau);
            let ageing = adaptive_quad(
                |u| {
                    (self.law.hazard(t) - self.law.hazard(t + u))
                        * self.law.survival_from(t, u)
                        * (-disc * u).exp()
                        * self.solution.eval_f(x, u)
                },
                0.0,
                tau,
                VALUE_QUAD_TOL,
            )?;
            d += self.kappa1_pow() * (ageing - boundary);
        }
        Ok(d)
    }
}

/// Free-function form of `f1` evaluation.
pub fn eval_f1(
    solution: &GammaSolution,
    delta: f64,
    x: &Vector2<f64>,
    t: f64,
    horizon: f64,
) -> Result<f64, RiccatiError> {
    let law = MortalityLaw::default();
    ValueEvaluator::new(solution, &law, delta, 0.0, 1.0, horizon).f1(t, x)
}

/// Free-function form of `f2` evaluation.
pub fn eval_f2(
    solution: &GammaSolution,
    law: &MortalityLaw,
    delta: f64,
    kappa1_w: f64,
    kappa2_w: f64,
    x: &Vector2<f64>,
    t: f64,
    horizon: f64,
) -> Result<f64, RiccatiError> {
    ValueEvaluator::new(solution, law, delta, kappa1_w, kappa2_w, horizon).f2(t, x)
}

/// Free-function form of the `f2` state gradient.
pub fn eval_f2_gradient(
    solution: &GammaSolution,
    law: &MortalityLaw,
    delta: f64,
    kappa1_w: f64,
    kappa2_w: f64,
    x: &Vector2<f64>,
    t: f64,
    horizon: f64,
) -> Result<Vector2<f64>, RiccatiError> {
    ValueEvaluator::new(solution, law, delta, kappa1_w, kappa2_w, horizon).f2_gradient(t, x)
}
