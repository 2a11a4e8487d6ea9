//! Reproducible Monte Carlo simulation of the market state, the price level,
//! and household wealth under the closed-form controls.
//!
//! Design notes:
//!
//! - The factors advance by their exact Gaussian transition, conditioned on
//!   the same Brownian increment that drives the price level and wealth, so
//!   factor moments are exact at any step size while cross-correlations are
//!   preserved.
//! - The price level and wealth advance by Euler-Maruyama on logs, which
//!   keeps them positive; under the proportional closed-form controls the
//!   wealth SDE is linear, so log stepping is also the natural
//!   discretization.
//! - Every path owns a counter-based random stream keyed by `(seed, path)`,
//!   and chunk partials merge in a fixed order, so results are bitwise
//!   reproducible for a given seed and path count no matter how many worker
//!   threads run.
//! - One death time is drawn per path by inverse-CDF; the step containing it
//!   is split at the exact death time, the death benefit is applied, and the
//!   survivor controls take over.

use nalgebra::{Matrix2, Matrix2x4, Vector2, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::{AssetUniverse, BondCoefficients, MarketParams};
use crate::numerics::gauss_legendre;
use crate::policy::{HouseholdSpec, PolicyError};
use crate::riccati::{
    build_coefficients, solve_gamma_system, GammaSolution, RiccatiError, ValueEvaluator,
    DEFAULT_GAMMA_STEP,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("global-existence checks failed for gamma={gamma}, theta={theta}")]
    ExistenceFail { gamma: f64, theta: f64 },
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Everything the simulator can record along paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observable {
    C1,
    C2,
    Premium,
    FaceValue,
    Surplus,
    Wealth,
    BequestRatio,
    Beta1,
    Beta2,
    Beta3,
    Beta4,
    Smd1,
    Smd2,
    Smd3,
    Smd4,
    Ifhd1,
    Ifhd2,
    Ifhd3,
    Ifhd4,
    Ithd1,
    Ithd2,
    Ithd3,
    Ithd4,
}

impl Observable {
    pub const ALL: [Observable; 23] = [
        Observable::C1,
        Observable::C2,
        Observable::Premium,
        Observable::FaceValue,
        Observable::Surplus,
        Observable::Wealth,
        Observable::BequestRatio,
        Observable::Beta1,
        Observable::Beta2,
        Observable::Beta3,
        Observable::Beta4,
        Observable::Smd1,
        Observable::Smd2,
        Observable::Smd3,
        Observable::Smd4,
        Observable::Ifhd1,
        Observable::Ifhd2,
        Observable::Ifhd3,
        Observable::Ifhd4,
        Observable::Ithd1,
        Observable::Ithd2,
        Observable::Ithd3,
        Observable::Ithd4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Observable::C1 => "c1",
            Observable::C2 => "c2",
            Observable::Premium => "premium",
            Observable::FaceValue => "face_value",
            Observable::Surplus => "surplus",
            Observable::Wealth => "wealth",
            Observable::BequestRatio => "bequest_ratio",
            Observable::Beta1 => "beta1",
            Observable::Beta2 => "beta2",
            Observable::Beta3 => "beta3",
            Observable::Beta4 => "beta4",
            Observable::Smd1 => "smd1",
            Observable::Smd2 => "smd2",
            Observable::Smd3 => "smd3",
            Observable::Smd4 => "smd4",
            Observable::Ifhd1 => "ifhd1",
            Observable::Ifhd2 => "ifhd2",
            Observable::Ifhd3 => "ifhd3",
            Observable::Ifhd4 => "ifhd4",
            Observable::Ithd1 => "ithd1",
            Observable::Ithd2 => "ithd2",
            Observable::Ithd3 => "ithd3",
            Observable::Ithd4 => "ithd4",
        }
    }

    pub fn by_name(name: &str) -> Option<Observable> {
        Observable::ALL.iter().copied().find(|o| o.name() == name)
    }

    /// Strategy observables exist only while the breadwinner is alive; the
    /// survivors' consumption and wealth keep going.
    pub fn alive_only(self) -> bool {
        !matches!(
            self,
            Observable::C2 | Observable::Wealth | Observable::Surplus
        )
    }

    fn index(self) -> usize {
        Observable::ALL.iter().position(|o| *o == self).unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_paths: usize,
    /// Step length in years.
    pub dt: f64,
    pub seed: u64,
    pub antithetic: bool,
    /// Which series to record (empty list = value estimate only).
    pub record: Vec<Observable>,
    /// Money-illusion degree of the utility used in the value estimate
    /// (0 evaluates in fully real terms).
    pub evaluation_theta: f64,
    /// Run the independent Euler wealth discretization alongside the surplus
    /// route and report their gap (a self-financing diagnostic; costs about
    /// a quarter of the step time).
    pub track_budget: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_paths: 100_000,
            dt: 1.0 / 12.0,
            seed: 42,
            antithetic: true,
            record: Observable::ALL.to_vec(),
            evaluation_theta: 0.0,
            track_budget: false,
        }
    }
}

impl SimConfig {
    fn validate(&self, hh: &HouseholdSpec) -> Result<(), SimError> {
        if self.n_paths == 0 {
            return Err(SimError::InvalidConfig("n_paths must be positive".into()));
        }
        if self.antithetic && self.n_paths % 2 != 0 {
            return Err(SimError::InvalidConfig(
                "antithetic sampling needs an even path count".into(),
            ));
        }
        if !(self.dt > 0.0) {
            return Err(SimError::InvalidConfig("dt must be positive".into()));
        }
        for (name, span) in [("horizon", hh.horizon()), ("retirement", hh.retirement())] {
            let steps = span / self.dt;
            if (steps - steps.round()).abs() > 1e-9 {
                return Err(SimError::InvalidConfig(format!(
                    "dt must divide the {name} ({span} years)"
                )));
            }
        }
        Ok(())
    }
}

/// Time series of one observable: cross-sectional mean, its standard error,
/// and the number of contributing paths per step.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ObsSeries {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub count: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimOutput {
    /// Step-start times; observables are recorded at each of these.
    pub times: Vec<f64>,
    pub recorded: Vec<Observable>,
    series: Vec<ObsSeries>,
    /// Fraction of paths with a living breadwinner at each step.
    pub alive_fraction: Vec<f64>,
    /// Estimate of the household objective under the simulated controls.
    pub value: f64,
    pub value_stderr: f64,
    /// Paths dropped from the value average after a numerical failure.
    pub excluded_paths: u64,
    /// Mean absolute gap between the surplus route and an independent Euler
    /// discretization of the wealth identity, measured at the working-phase
    /// exit. Shrinks at first order in `dt`.
    pub budget_residual_mean: f64,
}

impl SimOutput {
    pub fn series(&self, o: Observable) -> Option<&ObsSeries> {
        let pos = self.recorded.iter().position(|r| *r == o)?;
        Some(&self.series[pos])
    }

    /// Index of the recording step at time `t`.
    pub fn time_index(&self, t: f64) -> Option<usize> {
        let dt = self.times.get(1).copied()? - self.times[0];
        let i = ((t - self.times[0]) / dt).round() as isize;
        if i < 0 || i as usize >= self.times.len() {
            None
        } else {
            Some(i as usize)
        }
    }
}

/// Largest Gauss-Legendre node count for the value-function integrals.
const F_NODES: usize = 64;
/// Largest node count for the human-capital integral.
const HC_NODES: usize = 48;

/// Node count scaled to the integration span: long horizons need the full
/// rule, short ones converge with far fewer points.
fn nodes_for_span(span: f64, max: usize) -> usize {
    ((span.ceil() as usize) + 8).clamp(12, max)
}
/// Paths per deterministic accumulation chunk.
const CHUNK: usize = 1024;

/// Precomputed quadrature data for one time-grid point.
struct StepTable {
    hazard: f64,
    income: f64,
    // value-function nodes over u in [0, T - t]
    w1: Vec<f64>,
    w2: Vec<f64>, // includes kappa1^{1/gamma}; empty when that weight is zero
    g0: Vec<f64>,
    g1a: Vec<f64>,
    g1b: Vec<f64>,
    g2aa: Vec<f64>,
    g2ab: Vec<f64>,
    g2bb: Vec<f64>,
    // human-capital nodes over s in [t, retirement] (empty once retired)
    hw: Vec<f64>,
    ha: Vec<f64>,
    hb: Vec<f64>,
}

struct FEval {
    f1: f64,
    f2: f64,
    grad1: Vector2<f64>,
    grad2: Vector2<f64>,
}

impl StepTable {
    fn eval_f(&self, x: &Vector2<f64>, k2p: f64) -> FEval {
        let (x1, x2) = (x[0], x[1]);
        let mut f1 = 0.0;
        let mut fs = 0.0;
        let (mut g1a, mut g1b) = (0.0, 0.0);
        let (mut gsa, mut gsb) = (0.0, 0.0);
        let with_surv = !self.w2.is_empty();
        for j in 0..self.w1.len() {
            let la = self.g1a[j] + self.g2aa[j] * x1 + self.g2ab[j] * x2;
            let lb = self.g1b[j] + self.g2ab[j] * x1 + self.g2bb[j] * x2;
            let expo = self.g0[j]
                + self.g1a[j] * x1
                + self.g1b[j] * x2
                + 0.5
                    * (self.g2aa[j] * x1 * x1
                        + 2.0 * self.g2ab[j] * x1 * x2
                        + self.g2bb[j] * x2 * x2);
            let e = expo.exp();
            let v1 = self.w1[j] * e;
            f1 += v1;
            g1a += v1 * la;
            g1b += v1 * lb;
            if with_surv {
                let v2 = self.w2[j] * e;
                fs += v2;
                gsa += v2 * la;
                gsb += v2 * lb;
            }
        }
        FEval {
            f1,
            f2: fs + k2p * f1,
            grad1: Vector2::new(g1a, g1b),
            grad2: Vector2::new(gsa + k2p * g1a, gsb + k2p * g1b),
        }
    }

    fn eval_human_capital(&self, x: &Vector2<f64>) -> (f64, Vector2<f64>) {
        let (x1, x2) = (x[0], x[1]);
        let mut v = 0.0;
        let (mut ga, mut gb) = (0.0, 0.0);
        for j in 0..self.hw.len() {
            let e = self.hw[j] * (self.ha[j] * x1 + self.hb[j] * x2).exp();
            v += e;
            ga += e * self.ha[j];
            gb += e * self.hb[j];
        }
        (v, Vector2::new(ga, gb))
    }
}

/// Exact-transition constants for an OU step of length `h`, conditioned on
/// the raw Brownian increment.
#[derive(Clone, Copy)]
struct OuStep {
    decay: [f64; 2],
    /// Regression of the integrated factor noise on the raw increment.
    regression: Matrix2x4<f64>,
    /// Cholesky factor of the residual covariance.
    residual: Matrix2<f64>,
}

fn ou_step_consts(params: &MarketParams, h: f64) -> OuStep {
    let sx = params.sigma_x();
    let kappa = [params.kappa1, params.kappa2];
    let decay = [(-kappa[0] * h).exp(), (-kappa[1] * h).exp()];
    let mut regression = Matrix2x4::zeros();
    for i in 0..2 {
        let scale = (1.0 - decay[i]) / kappa[i];
        for j in 0..4 {
            regression[(i, j)] = scale * sx[(i, j)];
        }
    }
    let gram = sx * sx.transpose();
    let mut cov = Matrix2::zeros();
    for i in 0..2 {
        for j in 0..2 {
            let kk = kappa[i] + kappa[j];
            cov[(i, j)] = gram[(i, j)] * (1.0 - (-kk * h).exp()) / kk;
        }
    }
    let resid = cov - regression * regression.transpose() / h;
    regression /= h;
    OuStep {
        decay,
        regression,
        residual: chol2(&resid),
    }
}

fn chol2(m: &Matrix2<f64>) -> Matrix2<f64> {
    let a = m[(0, 0)].max(0.0).sqrt();
    let b = if a > 0.0 { m[(0, 1)] / a } else { 0.0 };
    let c = (m[(1, 1)] - b * b).max(0.0).sqrt();
    Matrix2::new(a, 0.0, b, c)
}

/// Advance the factors by their exact transition given the raw increment
/// `dz` (4 normals scaled by sqrt(h)) and two residual normals.
fn ou_exact_step(
    consts: &OuStep,
    x: &Vector2<f64>,
    dz: &Vector4<f64>,
    resid: &Vector2<f64>,
) -> Vector2<f64> {
    Vector2::new(consts.decay[0] * x[0], consts.decay[1] * x[1])
        + consts.regression * dz
        + consts.residual * resid
}

struct Engine<'a> {
    params: &'a MarketParams,
    universe: &'a AssetUniverse,
    household: &'a HouseholdSpec,
    solution: &'a GammaSolution,
    cfg: &'a SimConfig,
    control_theta: f64,
    tables: Vec<StepTable>,
    n_steps: usize,
    retire_step: usize,
    k1p: f64,
    k2p: f64,
    ou_full: OuStep,
    ifhd: Vector4<f64>,
    nominal_inv: Matrix2<f64>,
    record_idx: Vec<usize>,
    needs_decomposition: bool,
    w_surplus0: f64,
}

/// Per-chunk accumulators merged deterministically across chunks.
struct ChunkAcc {
    sums: Vec<Vec<f64>>,
    sumsq: Vec<Vec<f64>>,
    counts: Vec<Vec<u64>>,
    alive: Vec<u64>,
    value_sum: f64,
    value_sumsq: f64,
    value_units: u64,
    excluded: u64,
    budget_sum: f64,
    budget_units: u64,
}

impl ChunkAcc {
    fn new(n_obs: usize, n_steps: usize) -> Self {
        ChunkAcc {
            sums: vec![vec![0.0; n_steps]; n_obs],
            sumsq: vec![vec![0.0; n_steps]; n_obs],
            counts: vec![vec![0; n_steps]; n_obs],
            alive: vec![0; n_steps],
            value_sum: 0.0,
            value_sumsq: 0.0,
            value_units: 0,
            excluded: 0,
            budget_sum: 0.0,
            budget_units: 0,
        }
    }

    fn merge(&mut self, other: &ChunkAcc) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.sumsq.iter_mut().zip(&other.sumsq) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.alive.iter_mut().zip(&other.alive) {
            *a += b;
        }
        self.value_sum += other.value_sum;
        self.value_sumsq += other.value_sumsq;
        self.value_units += other.value_units;
        self.excluded += other.excluded;
        self.budget_sum += other.budget_sum;
        self.budget_units += other.budget_units;
    }
}

struct PathState {
    x: Vector2<f64>,
    log_pi: f64,
    wealth: f64,
    alive: bool,
    death_time: f64,
    utility: f64,
    shadow_wealth: f64,
    budget_gap: Option<f64>,
    failed: bool,
}

impl<'a> Engine<'a> {
    fn new(
        params: &'a MarketParams,
        coeffs: &BondCoefficients,
        universe: &'a AssetUniverse,
        household: &'a HouseholdSpec,
        solution: &'a GammaSolution,
        cfg: &'a SimConfig,
    ) -> Result<Self, SimError> {
        cfg.validate(household)?;
        household.validate()?;
        let horizon = household.horizon();
        let retirement = household.retirement();
        let n_steps = (horizon / cfg.dt).round() as usize;
        let retire_step = (retirement / cfg.dt).round() as usize;
        let gamma = household.gamma;
        let k1p = if household.kappa1_w == 0.0 {
            0.0
        } else {
            household.kappa1_w.powf(1.0 / gamma)
        };
        let k2p = household.kappa2_w.powf(1.0 / gamma);
        let disc = household.delta / gamma;
        let rules: Vec<(Vec<f64>, Vec<f64>)> = (0..=F_NODES)
            .map(|n| if n >= 12 { gauss_legendre(n) } else { (Vec::new(), Vec::new()) })
            .collect();
        let law = &household.mortality;
        let mut tables = Vec::with_capacity(n_steps);
        for k in 0..n_steps {
            let t = k as f64 * cfg.dt;
            let span = horizon - t;
            let nf = nodes_for_span(span, F_NODES);
            let (gl_x, gl_w) = (&rules[nf].0, &rules[nf].1);
            let mut tab = StepTable {
                hazard: law.hazard(t),
                income: household.income.income(t),
                w1: Vec::with_capacity(F_NODES),
                w2: Vec::new(),
                g0: Vec::with_capacity(F_NODES),
                g1a: Vec::with_capacity(F_NODES),
                g1b: Vec::with_capacity(F_NODES),
                g2aa: Vec::with_capacity(F_NODES),
                g2ab: Vec::with_capacity(F_NODES),
                g2bb: Vec::with_capacity(F_NODES),
                hw: Vec::new(),
                ha: Vec::new(),
                hb: Vec::new(),
            };
            if k1p > 0.0 {
                tab.w2.reserve(nf);
            }
            for j in 0..nf {
                let u = 0.5 * span * (gl_x[j] + 1.0);
                let w = 0.5 * span * gl_w[j];
                let base = w * (-disc * u).exp();
                tab.w1.push(base);
                if k1p > 0.0 {
                    tab.w2.push(k1p * base * law.survival_from(t, u));
                }
                let g1 = solution.gamma1(u);
                let g2 = solution.gamma2(u);
                tab.g0.push(solution.gamma0(u));
                tab.g1a.push(g1[0]);
                tab.g1b.push(g1[1]);
                tab.g2aa.push(g2[(0, 0)]);
                tab.g2ab.push(g2[(0, 1)]);
                tab.g2bb.push(g2[(1, 1)]);
            }
            if t < retirement && household.income.y0 != 0.0 {
                let span_hc = retirement - t;
                let nh = nodes_for_span(span_hc, HC_NODES);
                let (hc_x, hc_w) = (&rules[nh].0, &rules[nh].1);
                for j in 0..nh {
                    let u = 0.5 * span_hc * (hc_x[j] + 1.0);
                    let w = 0.5 * span_hc * hc_w[j];
                    let a1r = coeffs.a1r(u);
                    tab.hw.push(
                        w * law.survival_from(t, u)
                            * coeffs.a0r(u).exp()
                            * household.income.income(t + u),
                    );
                    tab.ha.push(a1r[0]);
                    tab.hb.push(a1r[1]);
                }
            }
            tables.push(tab);
        }
        let control_theta = solution.theta;
        let scale = (gamma - 1.0) / gamma * (1.0 - control_theta);
        let nominal_inv = universe
            .nominal_loadings
            .try_inverse()
            .ok_or_else(|| SimError::InvalidConfig("nominal bond loadings are singular".into()))?;
        let if12 = -scale * (nominal_inv * universe.linker_loading);
        let ifhd = Vector4::new(if12[0], if12[1], scale, 0.0);
        let record_idx: Vec<usize> = cfg.record.iter().map(|o| o.index()).collect();
        let needs_decomposition = cfg.record.iter().any(|o| {
            matches!(
                o,
                Observable::Beta1
                    | Observable::Beta2
                    | Observable::Beta3
                    | Observable::Beta4
                    | Observable::Smd1
                    | Observable::Smd2
                    | Observable::Smd3
                    | Observable::Smd4
                    | Observable::Ithd1
                    | Observable::Ithd2
                    | Observable::Ithd3
                    | Observable::Ithd4
            )
        });
        let w_surplus0 = household.w0 + tables[0].eval_human_capital(&Vector2::zeros()).0;
        Ok(Engine {
            params,
            universe,
            household,
            solution,
            cfg,
            control_theta,
            tables,
            n_steps,
            retire_step,
            k1p,
            k2p,
            ou_full: ou_step_consts(params, cfg.dt),
            ifhd,
            nominal_inv,
            record_idx,
            needs_decomposition,
            w_surplus0,
        })
    }

    fn run(&self) -> SimOutput {
        let n_obs = self.record_idx.len();
        let n_chunks = self.cfg.n_paths.div_ceil(CHUNK);
        let partials: Vec<ChunkAcc> = (0..n_chunks)
            .into_par_iter()
            .map(|chunk| {
                let mut acc = ChunkAcc::new(n_obs, self.n_steps);
                let lo = chunk * CHUNK;
                let hi = ((chunk + 1) * CHUNK).min(self.cfg.n_paths);
                if self.cfg.antithetic {
                    let mut p = lo;
                    while p < hi {
                        let v_plus = self.run_path(p, &mut acc);
                        let v_minus = self.run_path(p + 1, &mut acc);
                        if let (Some(a), Some(b)) = (v_plus, v_minus) {
                            let pair = 0.5 * (a + b);
                            acc.value_sum += pair;
                            acc.value_sumsq += pair * pair;
                            acc.value_units += 1;
                        } else {
                            acc.excluded += 1;
                        }
                        p += 2;
                    }
                } else {
                    for p in lo..hi {
                        match self.run_path(p, &mut acc) {
                            Some(v) => {
                                acc.value_sum += v;
                                acc.value_sumsq += v * v;
                                acc.value_units += 1;
                            }
                            None => acc.excluded += 1,
                        }
                    }
                }
                acc
            })
            .collect();
        let mut total = ChunkAcc::new(n_obs, self.n_steps);
        for acc in &partials {
            total.merge(acc);
        }

        let times: Vec<f64> = (0..self.n_steps).map(|k| k as f64 * self.cfg.dt).collect();
        let mut series = Vec::with_capacity(n_obs);
        for o in 0..n_obs {
            let mut mean = vec![0.0; self.n_steps];
            let mut stderr = vec![0.0; self.n_steps];
            for k in 0..self.n_steps {
                let n = total.counts[o][k];
                if n > 0 {
                    let m = total.sums[o][k] / n as f64;
                    mean[k] = m;
                    if n > 1 {
                        let var = (total.sumsq[o][k] / n as f64 - m * m).max(0.0);
                        stderr[k] = (var / n as f64).sqrt();
                    }
                }
            }
            series.push(ObsSeries {
                mean,
                stderr,
                count: total.counts[o].clone(),
            });
        }
        let alive_fraction: Vec<f64> = total
            .alive
            .iter()
            .map(|&a| a as f64 / self.cfg.n_paths as f64)
            .collect();
        let (value, value_stderr) = if total.value_units > 0 {
            let n = total.value_units as f64;
            let m = total.value_sum / n;
            let var = (total.value_sumsq / n - m * m).max(0.0);
            (m, (var / n).sqrt())
        } else {
            (f64::NAN, f64::NAN)
        };
        SimOutput {
            times,
            recorded: self.cfg.record.clone(),
            series,
            alive_fraction,
            value,
            value_stderr,
            excluded_paths: total.excluded,
            budget_residual_mean: if total.budget_units > 0 {
                total.budget_sum / total.budget_units as f64
            } else {
                0.0
            },
        }
    }

    /// Simulate one path; returns its utility functional unless it failed.
    fn run_path(&self, path: usize, acc: &mut ChunkAcc) -> Option<f64> {
        let (stream, flip) = if self.cfg.antithetic {
            ((path / 2) as u64, path % 2 == 1)
        } else {
            (path as u64, false)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(stream);
        let sign = if flip { -1.0 } else { 1.0 };
        let u_raw: f64 = rng.gen::<f64>();
        let u_death = if flip { 1.0 - u_raw } else { u_raw };
        let death_time = self.household.mortality.death_time_from_uniform(u_death);

        let mut st = PathState {
            x: Vector2::zeros(),
            log_pi: 0.0,
            wealth: self.w_surplus0,
            alive: true,
            death_time,
            utility: 0.0,
            shadow_wealth: self.household.w0,
            budget_gap: None,
            failed: false,
        };
        let dt = self.cfg.dt;
        let normals = |rng: &mut ChaCha8Rng| {
            let mut z = [0.0f64; 6];
            for slot in &mut z {
                *slot = sign * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            z
        };

        for k in 0..self.n_steps {
            let t = k as f64 * dt;
            if st.alive && st.death_time <= t {
                // death exactly on a grid point (measure zero but handle it)
                self.apply_death(&mut st, t);
            }
            if self.cfg.track_budget && st.alive && k == self.retire_step && st.budget_gap.is_none()
            {
                // human capital is exhausted; close out the budget shadow
                st.budget_gap = Some((st.wealth - st.shadow_wealth).abs());
            }
            self.record_step(k, &st, acc);
            if st.failed {
                continue;
            }
            let z = normals(&mut rng);
            if st.alive && st.death_time < t + dt {
                let t_death = st.death_time;
                let h1 = t_death - t;
                if self.cfg.track_budget && st.budget_gap.is_none() {
                    let hc = self.tables[k].eval_human_capital(&st.x).0;
                    st.budget_gap = Some((st.wealth - hc - st.shadow_wealth).abs());
                }
                if h1 > 0.0 {
                    self.advance(&mut st, k, t, h1, &z);
                }
                self.apply_death(&mut st, t_death);
                let h2 = t + dt - t_death;
                if h2 > 0.0 && !st.failed {
                    let z2 = normals(&mut rng);
                    self.advance_post_death(&mut st, t_death, h2, &z2);
                }
            } else {
                self.advance(&mut st, k, t, dt, &z);
            }
            if !st.wealth.is_finite() || !st.x[0].is_finite() || !st.x[1].is_finite() {
                st.failed = true;
            }
        }
        if let Some(gap) = st.budget_gap {
            acc.budget_sum += gap;
            acc.budget_units += 1;
        }
        if st.failed {
            None
        } else {
            Some(st.utility)
        }
    }

    /// One Euler/OU step over `[t, t+h]` on time-grid index `k`.
    fn advance(&self, st: &mut PathState, k: usize, t: f64, h: f64, z: &[f64; 6]) {
        let sqrt_h = h.sqrt();
        let dz = Vector4::new(z[0], z[1], z[2], z[3]) * sqrt_h;
        let resid = Vector2::new(z[4], z[5]);
        let consts = if h == self.cfg.dt {
            self.ou_full
        } else {
            ou_step_consts(self.params, h)
        };
        let tab = &self.tables[k];
        let gamma = self.household.gamma;
        let fe = tab.eval_f(&st.x, self.k2p);
        let lambda = self.params.price_of_risk(&st.x);
        let spi = self.params.sigma_pi;
        let r = self.params.real_short_rate(&st.x);
        let (eta, cash_drift) = if st.alive {
            let eta = (lambda - spi + self.control_theta * (1.0 - gamma) * spi) / gamma
                + self.params.sigma_x().transpose() * (fe.grad2 / fe.f2);
            let ratio = self.k2p * fe.f1 / fe.f2;
            (
                eta,
                tab.hazard * (1.0 - ratio) - (self.k1p + self.k2p) / fe.f2,
            )
        } else {
            let eta = (lambda - spi + self.control_theta * (1.0 - gamma) * spi) / gamma
                + self.params.sigma_x().transpose() * (fe.grad1 / fe.f1);
            (eta, -1.0 / fe.f1)
        };
        let drift = r + eta.dot(&(lambda - spi)) + cash_drift;

        // utility of the step (left-endpoint controls, midpoint discounting)
        let the = self.cfg.evaluation_theta * (1.0 - gamma);
        let disc = (-self.household.delta * (t + 0.5 * h)).exp();
        let pi_pow = if self.cfg.evaluation_theta == 0.0 {
            1.0
        } else {
            (st.log_pi * the).exp()
        };
        if st.alive {
            let c2 = self.k2p * st.wealth / fe.f2;
            let mut u = self.household.kappa2_w * c2.powf(1.0 - gamma) / (1.0 - gamma);
            if self.k1p > 0.0 {
                let c1 = self.k1p * st.wealth / fe.f2;
                u += self.household.kappa1_w * c1.powf(1.0 - gamma) / (1.0 - gamma);
            }
            st.utility += disc * pi_pow * u * h;
        } else {
            let c2 = st.wealth / fe.f1;
            st.utility += disc * pi_pow * c2.powf(1.0 - gamma) / (1.0 - gamma) * h;
        }

        // budget shadow: independent Euler discretization of real wealth
        if self.cfg.track_budget && st.alive && k < self.retire_step && st.budget_gap.is_none() {
            let (hc, hc_grad) = tab.eval_human_capital(&st.x);
            let w_real = st.wealth - hc;
            let c_total = (self.k1p + self.k2p) * st.wealth / fe.f2;
            let premium = tab.hazard * (self.k2p * fe.f1 / fe.f2 * st.wealth - w_real);
            let nu = st.wealth * eta - self.params.sigma_x().transpose() * hc_grad;
            st.shadow_wealth += (st.shadow_wealth * r + nu.dot(&(lambda - spi)) + tab.income
                - premium
                - c_total)
                * h
                + nu.dot(&dz);
        }

        // log price level
        let pi_e = self.params.expected_inflation(&st.x);
        st.log_pi += (pi_e - 0.5 * spi.dot(&spi)) * h + spi.dot(&dz);
        // log wealth
        st.wealth *= ((drift - 0.5 * eta.dot(&eta)) * h + eta.dot(&dz)).exp();
        // exact factor transition
        st.x = ou_exact_step(&consts, &st.x, &dz, &resid);
    }

    /// Post-death sub-step starting at an off-grid time.
    fn advance_post_death(&self, st: &mut PathState, t: f64, h: f64, z: &[f64; 6]) {
        let sqrt_h = h.sqrt();
        let dz = Vector4::new(z[0], z[1], z[2], z[3]) * sqrt_h;
        let resid = Vector2::new(z[4], z[5]);
        let consts = ou_step_consts(self.params, h);
        let gamma = self.household.gamma;
        let ev = self.slow_evaluator();
        let (f1, grad1) = match (ev.f1(t, &st.x), ev.f1_gradient(t, &st.x)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => {
                st.failed = true;
                return;
            }
        };
        let lambda = self.params.price_of_risk(&st.x);
        let spi = self.params.sigma_pi;
        let eta = (lambda - spi + self.control_theta * (1.0 - gamma) * spi) / gamma
            + self.params.sigma_x().transpose() * (grad1 / f1);
        let r = self.params.real_short_rate(&st.x);
        let drift = r + eta.dot(&(lambda - spi)) - 1.0 / f1;
        let c2 = st.wealth / f1;
        let the = self.cfg.evaluation_theta * (1.0 - gamma);
        let disc = (-self.household.delta * (t + 0.5 * h)).exp();
        let pi_pow = if self.cfg.evaluation_theta == 0.0 {
            1.0
        } else {
            (st.log_pi * the).exp()
        };
        st.utility += disc * pi_pow * c2.powf(1.0 - gamma) / (1.0 - gamma) * h;
        let pi_e = self.params.expected_inflation(&st.x);
        st.log_pi += (pi_e - 0.5 * spi.dot(&spi)) * h + spi.dot(&dz);
        st.wealth *= ((drift - 0.5 * eta.dot(&eta)) * h + eta.dot(&dz)).exp();
        st.x = ou_exact_step(&consts, &st.x, &dz, &resid);
    }

    fn slow_evaluator(&self) -> ValueEvaluator<'a> {
        ValueEvaluator::new(
            self.solution,
            &self.household.mortality,
            self.household.delta,
            self.household.kappa1_w,
            self.household.kappa2_w,
            self.household.horizon(),
        )
    }

    /// Death benefit: the survivors restart from `bequest ratio x surplus`.
    fn apply_death(&self, st: &mut PathState, t: f64) {
        let ev = self.slow_evaluator();
        let t = t.min(self.household.horizon() - 1e-9);
        let (f1, f2) = match (ev.f1(t, &st.x), ev.f2(t, &st.x)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => {
                st.failed = true;
                return;
            }
        };
        st.wealth *= self.k2p * f1 / f2;
        st.alive = false;
    }

    fn record_step(&self, k: usize, st: &PathState, acc: &mut ChunkAcc) {
        if st.alive {
            acc.alive[k] += 1;
        }
        if self.record_idx.is_empty() || st.failed {
            return;
        }
        let tab = &self.tables[k];
        let gamma = self.household.gamma;
        let fe = tab.eval_f(&st.x, self.k2p);
        let hc = if st.alive && k < self.retire_step {
            tab.eval_human_capital(&st.x).0
        } else {
            0.0
        };
        let (c1, c2, premium, face, bequest, surplus, wealth) = if st.alive {
            let w = st.wealth;
            let w_real = w - hc;
            let ratio = self.k2p * fe.f1 / fe.f2;
            let premium = tab.hazard * (ratio * w - w_real);
            (
                self.k1p * w / fe.f2,
                self.k2p * w / fe.f2,
                premium,
                premium / tab.hazard,
                ratio,
                w,
                w_real,
            )
        } else {
            (0.0, st.wealth / fe.f1, 0.0, 0.0, 0.0, st.wealth, st.wealth)
        };
        let mut values = [0.0f64; 23];
        values[0] = c1;
        values[1] = c2;
        values[2] = premium;
        values[3] = face;
        values[4] = surplus;
        values[5] = wealth;
        values[6] = bequest;
        if self.needs_decomposition {
            let lambda = self.params.price_of_risk(&st.x);
            let smd = self.universe.solve_sigma_t(&lambda) / gamma;
            let grad_over_f = if st.alive {
                fe.grad2 / fe.f2
            } else {
                fe.grad1 / fe.f1
            };
            let it12 = self.nominal_inv * grad_over_f;
            values[11] = smd[0];
            values[12] = smd[1];
            values[13] = smd[2];
            values[14] = smd[3];
            values[15] = self.ifhd[0];
            values[16] = self.ifhd[1];
            values[17] = self.ifhd[2];
            values[18] = self.ifhd[3];
            values[19] = it12[0];
            values[20] = it12[1];
            values[21] = 0.0;
            values[22] = 0.0;
            values[7] = smd[0] + self.ifhd[0] + it12[0];
            values[8] = smd[1] + self.ifhd[1] + it12[1];
            values[9] = smd[2] + self.ifhd[2];
            values[10] = smd[3] + self.ifhd[3];
        }
        for (slot, &obs_i) in self.record_idx.iter().enumerate() {
            let o = Observable::ALL[obs_i];
            if o.alive_only() && !st.alive {
                continue;
            }
            let v = values[obs_i];
            acc.sums[slot][k] += v;
            acc.sumsq[slot][k] += v * v;
            acc.counts[slot][k] += 1;
        }
    }
}

/// Simulate the household under the controls embedded in `solution`
/// (its `theta` is the control-illusion degree). Utilities in the value
/// estimate use `cfg.evaluation_theta`.
pub fn simulate(
    household: &HouseholdSpec,
    params: &MarketParams,
    coeffs: &BondCoefficients,
    universe: &AssetUniverse,
    solution: &GammaSolution,
    control_theta: f64,
    cfg: &SimConfig,
) -> Result<SimOutput, SimError> {
    if (solution.theta - control_theta).abs() > 1e-12 {
        return Err(SimError::InvalidConfig(format!(
            "solution carries theta = {}, controls ask for {}",
            solution.theta, control_theta
        )));
    }
    if !solution.existence.satisfied {
        return Err(SimError::ExistenceFail {
            gamma: solution.gamma,
            theta: solution.theta,
        });
    }
    let engine = Engine::new(params, coeffs, universe, household, solution, cfg)?;
    Ok(engine.run())
}

/// Estimate the value of following `control_theta` strategies, evaluated
/// with `evaluation_theta` utilities, from fresh Monte Carlo paths.
pub fn estimate_value(
    household: &HouseholdSpec,
    params: &MarketParams,
    coeffs: &BondCoefficients,
    universe: &AssetUniverse,
    cfg: &SimConfig,
    control_theta: f64,
    evaluation_theta: f64,
) -> Result<(f64, f64), SimError> {
    let gc = build_coefficients(params, household.gamma, control_theta)?;
    let solution = solve_gamma_system(&gc, household.horizon(), DEFAULT_GAMMA_STEP)?;
    let mut cfg = cfg.clone();
    cfg.record = Vec::new();
    cfg.evaluation_theta = evaluation_theta;
    let out = simulate(
        household,
        params,
        coeffs,
        universe,
        &solution,
        control_theta,
        &cfg,
    )?;
    Ok((out.value, out.value_stderr))
}

/// Mean strategy curves for each control-theta in `thetas`.
pub fn expected_curves(
    household: &HouseholdSpec,
    params: &MarketParams,
    coeffs: &BondCoefficients,
    universe: &AssetUniverse,
    cfg: &SimConfig,
    thetas: &[f64],
) -> Result<Vec<(f64, SimOutput)>, SimError> {
    let mut out = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let mut hh = household.clone();
        hh.theta = theta;
        let gc = build_coefficients(params, household.gamma, theta)?;
        let solution = solve_gamma_system(&gc, household.horizon(), DEFAULT_GAMMA_STEP)?;
        let run = simulate(&hh, params, coeffs, universe, &solution, theta, cfg)?;
        out.push((theta, run));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{build_universe, solve_bond_odes};
    use approx::assert_relative_eq;

    fn setup() -> (MarketParams, BondCoefficients, AssetUniverse, HouseholdSpec) {
        let params = MarketParams::us_1961_2023();
        let coeffs = solve_bond_odes(&params, 60.0, 1.0 / 252.0).unwrap();
        let universe = build_universe(&params, &coeffs, 3.0, 10.0, 10.0).unwrap();
        (params, coeffs, universe, HouseholdSpec::default())
    }

    fn solution_for(params: &MarketParams, gamma: f64, theta: f64) -> GammaSolution {
        let gc = build_coefficients(params, gamma, theta).unwrap();
        solve_gamma_system(&gc, 60.0, 1.0 / 252.0).unwrap()
    }

    fn small_cfg(n: usize) -> SimConfig {
        SimConfig {
            n_paths: n,
            dt: 1.0 / 12.0,
            seed: 7,
            antithetic: true,
            record: Observable::ALL.to_vec(),
            evaluation_theta: 0.0,
            track_budget: false,
        }
    }

    #[test]
    fn config_validation_catches_misuse() {
        let (_, _, _, hh) = setup();
        let mut cfg = small_cfg(11);
        assert!(cfg.validate(&hh).is_err()); // odd with antithetic
        cfg.antithetic = false;
        assert!(cfg.validate(&hh).is_ok());
        cfg.dt = 0.7; // does not divide 60
        assert!(cfg.validate(&hh).is_err());
    }

    #[test]
    fn reruns_are_bitwise_identical() {
        let (params, coeffs, universe, hh) = setup();
        let sol = solution_for(&params, hh.gamma, 0.0);
        let cfg = small_cfg(256);
        let a = simulate(&hh, &params, &coeffs, &universe, &sol, 0.0, &cfg).unwrap();
        let b = simulate(&hh, &params, &coeffs, &universe, &sol, 0.0, &cfg).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        let sa = a.series(Observable::Premium).unwrap();
        let sb = b.series(Observable::Premium).unwrap();
        for (x, y) in sa.mean.iter().zip(&sb.mean) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn factor_moments_match_theory() {
        // E[X_t] = 0 and Var[X_t] equals the OU covariance integral within
        // three standard errors of each estimate
        let (params, _, _, _) = setup();
        let h = 1.0 / 12.0;
        let consts = ou_step_consts(&params, h);
        let t_steps = 120; // 10 years
        let n = 20_000usize;
        let mut sums = Vector2::zeros();
        let mut sq = Vector2::zeros();
        for p in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            rng.set_stream(p as u64);
            let mut x = Vector2::zeros();
            for _ in 0..t_steps {
                let mut z = [0.0f64; 6];
                for slot in &mut z {
                    *slot = rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
                let dz = Vector4::new(z[0], z[1], z[2], z[3]) * h.sqrt();
                x = ou_exact_step(&consts, &x, &dz, &Vector2::new(z[4], z[5]));
            }
            sums += x;
            sq += Vector2::new(x[0] * x[0], x[1] * x[1]);
        }
        let mean = sums / n as f64;
        let var = sq / n as f64 - Vector2::new(mean[0] * mean[0], mean[1] * mean[1]);
        let sx = params.sigma_x();
        let gram = sx * sx.transpose();
        let t = 10.0;
        for i in 0..2 {
            let kappa = if i == 0 { params.kappa1 } else { params.kappa2 };
            let theory = gram[(i, i)] * (1.0 - (-2.0 * kappa * t).exp()) / (2.0 * kappa);
            let se_mean = (theory / n as f64).sqrt();
            assert!(mean[i].abs() < 3.0 * se_mean, "mean[{i}] = {}", mean[i]);
            let se_var = theory * (2.0 / n as f64).sqrt();
            assert!(
                (var[i] - theory).abs() < 3.0 * se_var,
                "var[{i}] = {} vs {}",
                var[i],
                theory
            );
        }
    }

    #[test]
    fn exact_transition_matches_fine_euler_in_distribution() {
        let (params, _, _, _) = setup();
        let h = 1.0 / 12.0;
        let consts = ou_step_consts(&params, h);
        let n = 40_000;
        let mut exact_m = Vector2::zeros();
        let mut exact_v = Vector2::zeros();
        let mut euler_m = Vector2::zeros();
        let mut euler_v = Vector2::zeros();
        let x0 = Vector2::new(0.05, -0.03);
        let sx = params.sigma_x();
        for p in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            rng.set_stream(p as u64);
            let mut z = [0.0f64; 6];
            for slot in &mut z {
                *slot = rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            let dz = Vector4::new(z[0], z[1], z[2], z[3]) * h.sqrt();
            let xe = ou_exact_step(&consts, &x0, &dz, &Vector2::new(z[4], z[5]));
            exact_m += xe;
            exact_v += Vector2::new(xe[0] * xe[0], xe[1] * xe[1]);
            // Euler at h/100 with its own fine increments
            let fine = 100;
            let hf = h / fine as f64;
            let mut x = x0;
            for _ in 0..fine {
                let mut zf = Vector4::zeros();
                for i in 0..4 {
                    zf[i] = rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
                x += -params.k_x() * x * hf + sx * (zf * hf.sqrt());
            }
            euler_m += x;
            euler_v += Vector2::new(x[0] * x[0], x[1] * x[1]);
        }
        let nm = n as f64;
        let em = exact_m / nm;
        let um = euler_m / nm;
        let ev = exact_v / nm - Vector2::new(em[0] * em[0], em[1] * em[1]);
        let uv = euler_v / nm - Vector2::new(um[0] * um[0], um[1] * um[1]);
        for i in 0..2 {
            let se = (ev[i] / nm).sqrt() + (uv[i] / nm).sqrt();
            assert!(
                (em[i] - um[i]).abs() < 3.0 * se,
                "means {} vs {}",
                em[i],
                um[i]
            );
            let se_v = (ev[i] + uv[i]) * (2.0 / nm).sqrt();
            assert!((ev[i] - uv[i]).abs() < 3.0 * se_v + 1e-9);
        }
    }

    #[test]
    fn antithetic_and_plain_estimates_agree() {
        let (params, coeffs, universe, hh) = setup();
        let sol = solution_for(&params, hh.gamma, 0.0);
        let mut cfg = small_cfg(4096);
        cfg.record = Vec::new();
        let anti = simulate(&hh, &params, &coeffs, &universe, &sol, 0.0, &cfg).unwrap();
        cfg.antithetic = false;
        let plain = simulate(&hh, &params, &coeffs, &universe, &sol, 0.0, &cfg).unwrap();
        let se = anti.value_stderr.hypot(plain.value_stderr);
        assert!(
            (anti.value - plain.value).abs() < 3.0 * se,
            "{} vs {} (se {se})",
            anti.value,
            plain.value
        );
    }

    #[test]
    fn stderr_shrinks_with_path_count() {
        let (params, coeffs, universe, hh) = setup();
        let sol = solution_for(&params, hh.gamma, 0.0);
        let mut cfg = small_cfg(2048);
        cfg.record = vec![Observable::Premium];
        let a = simulate(&hh, &params, &coeffs, &universe, &sol, 0.0, &cfg).unwrap();
        cfg.n_paths = 4096;
        let b = simulate(&hh, &params, &coeffs, &universe, &sol, 0.0, &cfg).unwrap();
        let k = a.time_index(20.0).unwrap();
        let sa = a.series(Observable::Premium).unwrap().stderr[k];
        let sb = b.series(Observable::Premium).unwrap().stderr[k];
        let ratio = sa / sb;
        assert!(
            (ratio - std::f64::consts::SQRT_2).abs() < 0.2 * std::f64::consts::SQRT_2,
            "ratio {ratio}"
        );
    }

    #[test]
    fn full_illusion_records_zero_inflation_hedge() {
        let (params, coeffs, universe, mut hh) = setup();
        hh.theta = 1.0;
        let sol = solution_for(&params, hh.gamma, 1.0);
        let mut cfg = small_cfg(64);
        cfg.record = vec![
            Observable::Ifhd1,
            Observable::Ifhd2,
            Observable::Ifhd3,
            Observable::Ifhd4,
        ];
        let out = simulate(&hh, &params, &coeffs, &universe, &sol, 1.0, &cfg).unwrap();
        for o in cfg.record.iter() {
            let s = out.series(*o).unwrap();
            for (m, se) in s.mean.iter().zip(&s.stderr) {
                assert_eq!(*m, 0.0);
                assert_eq!(*se, 0.0);
            }
        }
    }

    #[test]
    fn budget_residual_shrinks_linearly_in_dt() {
        let (params, coeffs, universe, hh) = setup();
        let sol = solution_for(&params, hh.gamma, 0.0);
        let mut cfg = small_cfg(512);
        cfg.record = Vec::new();
        cfg.track_budget = true;
        cfg.dt = 1.0 / 12.0;
        let coarse = simulate(&hh, &params, &coeffs, &universe, &sol, 0.0, &cfg).unwrap();
        cfg.dt = 1.0 / 48.0;
        let fine = simulate(&hh, &params, &coeffs, &universe, &sol, 0.0, &cfg).unwrap();
        let ratio = coarse.budget_residual_mean / fine.budget_residual_mean;
        assert!(
            ratio > 2.0,
            "expected first-order shrinkage, got {} -> {} (ratio {ratio})",
            coarse.budget_residual_mean,
            fine.budget_residual_mean
        );
    }

    #[test]
    fn deterministic_market_reproduces_closed_form_wealth() {
        // strip the market of every stochastic term that feeds wealth and
        // compare one simulated path against the consumption ODE solution
        let mut params = MarketParams::us_1961_2023();
        params.lambda0 = Vector4::zeros();
        params.lambda1 = nalgebra::Matrix4x2::zeros();
        params.sigma_pi = Vector4::zeros();
        params.mu0 = 0.0;
        params.mu1 = Vector2::zeros();
        params.delta_big_r = params.delta_r + params.delta_pi_e;
        params.sigma1 = Vector4::zeros();
        params.sigma2 = Vector4::zeros();
        let coeffs = solve_bond_odes(&params, 60.0, 1.0 / 252.0).unwrap();
        let mut hh = HouseholdSpec::default();
        hh.kappa1_w = 0.0;
        hh.kappa2_w = 1.0;
        hh.income.y0 = 0.0;
        hh.w0 = 100.0;
        hh.mortality.modal_age = 1e9; // effectively no deaths
        let gc = build_coefficients(&params, hh.gamma, 0.0).unwrap();
        let sol = solve_gamma_system(&gc, 60.0, 1.0 / 252.0).unwrap();
        // a plain universe keeps the engine constructible; its exposures are
        // never used because no observables are recorded
        let universe_src = MarketParams::us_1961_2023();
        let real_coeffs = solve_bond_odes(&universe_src, 60.0, 1.0 / 252.0).unwrap();
        let universe = build_universe(&universe_src, &real_coeffs, 3.0, 10.0, 10.0).unwrap();
        let mut cfg = small_cfg(4);
        cfg.dt = 1.0 / 1200.0;
        cfg.record = Vec::new();
        let engine = Engine::new(&params, &coeffs, &universe, &hh, &sol, &cfg).unwrap();
        // reference: dW/W = (r - 1/f1) dt integrated at midpoint, stopped at
        // t = 50 (wealth is fully depleted at the horizon, where a relative
        // comparison would be 0 against 0)
        let t_stop = 50.0;
        let law = hh.mortality;
        let ev = ValueEvaluator::new(&sol, &law, hh.delta, 0.0, 1.0, 60.0);
        let mut log_w: f64 = 0.0;
        let n = 50_000;
        let h = t_stop / n as f64;
        for i in 0..n {
            let ti = (i as f64 + 0.5) * h;
            let f1 = ev.f1(ti, &Vector2::zeros()).unwrap();
            log_w += (params.delta_r - 1.0 / f1) * h;
        }
        let expect = 100.0 * log_w.exp();
        let mut st = PathState {
            x: Vector2::zeros(),
            log_pi: 0.0,
            wealth: 100.0,
            alive: true,
            death_time: f64::INFINITY,
            utility: 0.0,
            shadow_wealth: 100.0,
            budget_gap: None,
            failed: false,
        };
        let z = [0.0f64; 6];
        let steps = (t_stop / cfg.dt).round() as usize;
        for k in 0..steps {
            let t = k as f64 * cfg.dt;
            engine.advance(&mut st, k, t, cfg.dt, &z);
        }
        assert_relative_eq!(st.wealth, expect, max_relative = 1e-3);
    }

    #[test]
    fn step_tables_match_adaptive_quadrature() {
        let (params, coeffs, universe, hh) = setup();
        let sol = solution_for(&params, hh.gamma, 0.0);
        let cfg = small_cfg(2);
        let engine = Engine::new(&params, &coeffs, &universe, &hh, &sol, &cfg).unwrap();
        let ev = engine.slow_evaluator();
        for &(k, x1, x2) in &[
            (0usize, 0.0, 0.0),
            (60, 0.08, -0.1),
            (360, -0.1454, 0.1696),
            (600, 0.05, 0.05),
            (715, -0.02, 0.01),
        ] {
            let t = k as f64 * cfg.dt;
            let x = Vector2::new(x1, x2);
            let fe = engine.tables[k].eval_f(&x, engine.k2p);
            assert_relative_eq!(fe.f1, ev.f1(t, &x).unwrap(), max_relative = 1e-6);
            assert_relative_eq!(fe.f2, ev.f2(t, &x).unwrap(), max_relative = 1e-6);
            let g2 = ev.f2_gradient(t, &x).unwrap();
            for i in 0..2 {
                assert_relative_eq!(fe.grad2[i], g2[i], max_relative = 1e-5, epsilon = 1e-9);
            }
            if t < hh.retirement() {
                let (hc, _) = engine.tables[k].eval_human_capital(&x);
                let direct =
                    crate::actuarial::human_capital(&hh.income, &hh.mortality, &coeffs, t, &x)
                        .unwrap();
                assert_relative_eq!(hc, direct, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn existence_failure_blocks_simulation() {
        let (params, coeffs, universe, mut hh) = setup();
        hh.gamma = 0.5; // low risk aversion fails the definiteness scan here
        let gc = build_coefficients(&params, 0.5, 0.0).unwrap();
        if let Ok(sol) = solve_gamma_system(&gc, 60.0, 1.0 / 252.0) {
            let cfg = small_cfg(8);
            let res = simulate(&hh, &params, &coeffs, &universe, &sol, 0.0, &cfg);
            assert!(matches!(res, Err(SimError::ExistenceFail { .. })));
        }
    }
}


#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::market::{build_universe, solve_bond_odes};

    pub fn run_timing() {
        let params = MarketParams::us_1961_2023();
        let coeffs = solve_bond_odes(&params, 60.0, 1.0 / 252.0).unwrap();
        let universe = build_universe(&params, &coeffs, 3.0, 10.0, 10.0).unwrap();
        let hh = HouseholdSpec::default();
        let gc = build_coefficients(&params, hh.gamma, 0.0).unwrap();
        let sol = solve_gamma_system(&gc, 60.0, 1.0 / 252.0).unwrap();
        let cfg = SimConfig::default();
        let start = std::time::Instant::now();
        let out = simulate(&hh, &params, &coeffs, &universe, &sol, 0.0, &cfg).unwrap();
        eprintln!(
            "full sim: {:.1}s, value {} +- {}, excluded {}",
            start.elapsed().as_secs_f64(),
            out.value,
            out.value_stderr,
            out.excluded_paths
        );
        let start2 = std::time::Instant::now();
        let mut cfg2 = cfg.clone();
        cfg2.record = Vec::new();
        let out2 = simulate(&hh, &params, &coeffs, &universe, &sol, 0.0, &cfg2).unwrap();
        eprintln!(
            "value-only sim: {:.1}s, value {} +- {}",
            start2.elapsed().as_secs_f64(),
            out2.value,
            out2.value_stderr
        );
    }
}
