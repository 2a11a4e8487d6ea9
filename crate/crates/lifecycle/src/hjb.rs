//! Numerical verification of the closed forms: evaluates the
//! dynamic-programming residual of each phase's candidate value function at
//! arbitrary interior states, with the optimal controls or with imposed ones.
//!
//! A residual near zero at the optimal controls, together with strictly
//! negative residuals under perturbed controls (the supremum property),
//! is the working substitute for a symbolic verification argument.

use nalgebra::{Matrix2, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuarial::human_capital;
use crate::policy::{PolicyContext, PolicyError};
use crate::riccati::RiccatiError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HjbError {
    #[error("state outside the admissible interior: {0}")]
    DomainEdge(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
}

/// Which of the three dynamic-programming problems the state belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Breadwinner alive and working; wealth variable is the surplus.
    Working,
    /// Breadwinner alive and retired; wealth variable is real wealth.
    Retired,
    /// After the breadwinner's death; wealth variable is real wealth.
    Survivors,
}

/// One evaluation point. `wealth` is the phase's own wealth variable (the
/// surplus in [`Phase::Working`], real wealth otherwise).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HjbState {
    pub t: f64,
    pub wealth: f64,
    pub price_level: f64,
    pub x: Vector2<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualSample {
    pub phase: Phase,
    pub state: HjbState,
    /// Value of the (supposedly zero) dynamic-programming expression.
    pub residual: f64,
    /// Largest absolute summand of that expression.
    pub scale: f64,
    /// `residual / scale`.
    pub relative: f64,
}

/// How the candidate's partial derivatives are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeMode {
    /// Differentiate the closed form analytically (exact up to quadrature).
    ClosedForm,
    /// Central finite differences of the candidate value itself; an
    /// independent cross-check of the analytic derivative list.
    FiniteDifference,
}

/// Imposed controls for suboptimality experiments. `premium` is ignored in
/// the survivor phase; `c1` is the breadwinner's consumption where defined.
#[derive(Debug, Clone, Copy)]
pub struct Controls {
    pub c1: f64,
    pub c2: f64,
    pub exposure: Vector4<f64>,
    pub premium: f64,
}

/// Minimum distance from the terminal time for a residual query.
pub const INTERIOR_GUARD: f64 = 1e-3;

struct CandidateDerivs {
    v: f64,
    vt: f64,
    vw: f64,
    vpi: f64,
    vx: Vector2<f64>,
    vww: f64,
    vpipi: f64,
    vxx: Matrix2<f64>,
    vwpi: f64,
    vwx: Vector2<f64>,
    vpix: Vector2<f64>,
}

fn f_bundle(
    ctx: &PolicyContext<'_>,
    phase: Phase,
    t: f64,
    x: &Vector2<f64>,
) -> Result<(f64, Vector2<f64>, Matrix2<f64>, f64), HjbError> {
    Ok(match phase {
        Phase::Survivors => (
            ctx.values.f1(t, x)?,
            ctx.values.f1_gradient(t, x)?,
            ctx.values.f1_hessian(t, x)?,
            ctx.values.f1_time_derivative(t, x),
        ),
        _ => (
            ctx.values.f2(t, x)?,
            ctx.values.f2_gradient(t, x)?,
            ctx.values.f2_hessian(t, x)?,
            ctx.values.f2_time_derivative(t, x)?,
        ),
    })
}

/// Candidate value `w^{1-gamma} pi^{theta(1-gamma)} f^gamma / (1-gamma)`.
fn candidate_value(
    ctx: &PolicyContext<'_>,
    phase: Phase,
    t: f64,
    w: f64,
    pi: f64,
    x: &Vector2<f64>,
) -> Result<f64, HjbError> {
    let gamma = ctx.household.gamma;
    let th = ctx.control_theta * (1.0 - gamma);
    let f = match phase {
        Phase::Survivors => ctx.values.f1(t, x)?,
        _ => ctx.values.f2(t, x)?,
    };
    Ok(w.powf(1.0 - gamma) * pi.powf(th) * f.powf(gamma) / (1.0 - gamma))
}

fn derivs_closed_form(
    ctx: &PolicyContext<'_>,
    phase: Phase,
    s: &HjbState,
) -> Result<CandidateDerivs, HjbError> {
    let gamma = ctx.household.gamma;
    let th = ctx.control_theta * (1.0 - gamma);
    let (w, pi) = (s.wealth, s.price_level);
    let (f, grad, hess, ft) = f_bundle(ctx, phase, s.t, &s.x)?;
    let wp = w.powf(1.0 - gamma);
    let pip = pi.powf(th);
    let fp = f.powf(gamma);
    let v = wp * pip * fp / (1.0 - gamma);
    Ok(CandidateDerivs {
        v,
        vt: gamma / (1.0 - gamma) * wp * pip * f.powf(gamma - 1.0) * ft,
        vw: w.powf(-gamma) * pip * fp,
        vpi: ctx.control_theta * wp * pi.powf(th - 1.0) * fp,
        vx: gamma / (1.0 - gamma) * wp * pip * f.powf(gamma - 1.0) * grad,
        vww: -gamma * w.powf(-gamma - 1.0) * pip * fp,
        vpipi: ctx.control_theta * (th - 1.0) * wp * pi.powf(th - 2.0) * fp,
        vxx: -gamma * wp * pip * f.powf(gamma - 2.0) * grad * grad.transpose()
            + gamma / (1.0 - gamma) * wp * pip * f.powf(gamma - 1.0) * hess,
        vwpi: th * w.powf(-gamma) * pi.powf(th - 1.0) * fp,
        vwx: gamma * w.powf(-gamma) * pip * f.powf(gamma - 1.0) * grad,
        vpix: ctx.control_theta * gamma * wp * pi.powf(th - 1.0) * f.powf(gamma - 1.0) * grad,
    })
}

fn derivs_finite_difference(
    ctx: &PolicyContext<'_>,
    phase: Phase,
    s: &HjbState,
) -> Result<CandidateDerivs, HjbError> {
    let val = |t: f64, w: f64, pi: f64, x: Vector2<f64>| -> Result<f64, HjbError> {
        candidate_value(ctx, phase, t, w, pi, &x)
    };
    let (t, w, pi, x) = (s.t, s.wealth, s.price_level, s.x);
    let (ht, hw, hpi, hx) = (1e-5, 1e-4 * w.abs().max(1.0), 1e-5, 1e-5);
    let v = val(t, w, pi, x)?;
    let vt = (val(t + ht, w, pi, x)? - val(t - ht, w, pi, x)?) / (2.0 * ht);
    let vw = (val(t, w + hw, pi, x)? - val(t, w - hw, pi, x)?) / (2.0 * hw);
    let vpi = (val(t, w, pi + hpi, x)? - val(t, w, pi - hpi, x)?) / (2.0 * hpi);
    let vww = (val(t, w + hw, pi, x)? - 2.0 * v + val(t, w - hw, pi, x)?) / (hw * hw);
    let vpipi = (val(t, w, pi + hpi, x)? - 2.0 * v + val(t, w, pi - hpi, x)?) / (hpi * hpi);
    let bump = |i: usize, sgn: f64| {
        let mut xb = x;
        xb[i] += sgn * hx;
        xb
    };
    let mut vx = Vector2::zeros();
    let mut vwx = Vector2::zeros();
    let mut vpix = Vector2::zeros();
    let mut vxx = Matrix2::zeros();
    for i in 0..2 {
        vx[i] = (val(t, w, pi, bump(i, 1.0))? - val(t, w, pi, bump(i, -1.0))?) / (2.0 * hx);
        vwx[i] = (val(t, w + hw, pi, bump(i, 1.0))? - val(t, w + hw, pi, bump(i, -1.0))?
            - val(t, w - hw, pi, bump(i, 1.0))?
            + val(t, w - hw, pi, bump(i, -1.0))?)
            / (4.0 * hw * hx);
        vpix[i] = (val(t, w, pi + hpi, bump(i, 1.0))? - val(t, w, pi + hpi, bump(i, -1.0))?
            - val(t, w, pi - hpi, bump(i, 1.0))?
            + val(t, w, pi - hpi, bump(i, -1.0))?)
            / (4.0 * hpi * hx);
        vxx[(i, i)] =
            (val(t, w, pi, bump(i, 1.0))? - 2.0 * v + val(t, w, pi, bump(i, -1.0))?) / (hx * hx);
    }
    let pair = |s0: f64, s1: f64| -> Result<f64, HjbError> {
        let mut xb = x;
        xb[0] += s0 * hx;
        xb[1] += s1 * hx;
        val(t, w, pi, xb)
    };
    let cross =
        (pair(1.0, 1.0)? - pair(1.0, -1.0)? - pair(-1.0, 1.0)? + pair(-1.0, -1.0)?)
            / (4.0 * hx * hx);
    vxx[(0, 1)] = cross;
    vxx[(1, 0)] = cross;
    let vwpi = (val(t, w + hw, pi + hpi, x)? - val(t, w + hw, pi - hpi, x)?
        - val(t, w - hw, pi + hpi, x)?
        + val(t, w - hw, pi - hpi, x)?)
        / (4.0 * hw * hpi);
    Ok(CandidateDerivs {
        v,
        vt,
        vw,
        vpi,
        vx,
        vww,
        vpipi,
        vxx,
        vwpi,
        vwx,
        vpix,
    })
}

fn optimal_controls(
    ctx: &PolicyContext<'_>,
    phase: Phase,
    s: &HjbState,
) -> Result<Controls, HjbError> {
    Ok(match phase {
        Phase::Working => {
            let hh = ctx.household;
            let hc = human_capital(&hh.income, &hh.mortality, ctx.coeffs, s.t, &s.x)
                .map_err(PolicyError::from)?;
            // the context evaluates from real wealth; the state carries surplus
            let eval = ctx.phase_working(s.t, s.wealth - hc, &s.x)?;
            Controls {
                c1: eval.c1.unwrap(),
                c2: eval.c2,
                exposure: Vector4::from(eval.beta),
                premium: eval.premium.unwrap(),
            }
        }
        Phase::Retired => {
            let eval = ctx.phase_retired(s.t, s.wealth, &s.x)?;
            Controls {
                c1: eval.c1.unwrap(),
                c2: eval.c2,
                exposure: Vector4::from(eval.beta),
                premium: eval.premium.unwrap(),
            }
        }
        Phase::Survivors => {
            let eval = ctx.phase_survivors(s.t, s.wealth, &s.x)?;
            Controls {
                c1: 0.0,
                c2: eval.c2,
                exposure: Vector4::from(eval.alpha),
                premium: 0.0,
            }
        }
    })
}

/// Evaluate the dynamic-programming residual at `state` under the phase's
/// optimal controls.
pub fn hjb_residual(
    ctx: &PolicyContext<'_>,
    phase: Phase,
    state: &HjbState,
    mode: DerivativeMode,
) -> Result<ResidualSample, HjbError> {
    check_domain(ctx, phase, state)?;
    let controls = optimal_controls(ctx, phase, state)?;
    hjb_residual_with_controls(ctx, phase, state, &controls, mode)
}

fn check_domain(ctx: &PolicyContext<'_>, phase: Phase, state: &HjbState) -> Result<(), HjbError> {
    let hh = ctx.household;
    let horizon = hh.horizon();
    if state.t < 0.0 || state.t > horizon - INTERIOR_GUARD {
        return Err(HjbError::DomainEdge(format!(
            "t = {} outside [0, {}]",
            state.t,
            horizon - INTERIOR_GUARD
        )));
    }
    if state.wealth <= 0.0 || state.price_level <= 0.0 {
        return Err(HjbError::DomainEdge(
            "wealth and price level must be positive".into(),
        ));
    }
    match phase {
        Phase::Working if state.t >= hh.retirement() => Err(HjbError::DomainEdge(
            "working phase needs t < retirement".into(),
        )),
        Phase::Retired if state.t < hh.retirement() => Err(HjbError::DomainEdge(
            "retired phase needs t >= retirement".into(),
        )),
        _ => Ok(()),
    }
}

/// Evaluate the residual under imposed controls (suboptimal ones must drive
/// it negative).
pub fn hjb_residual_with_controls(
    ctx: &PolicyContext<'_>,
    phase: Phase,
    state: &HjbState,
    controls: &Controls,
    mode: DerivativeMode,
) -> Result<ResidualSample, HjbError> {
    check_domain(ctx, phase, state)?;
    let hh = ctx.household;
    let gamma = hh.gamma;
    let th = ctx.control_theta * (1.0 - gamma);
    let d = match mode {
        DerivativeMode::ClosedForm => derivs_closed_form(ctx, phase, state)?,
        DerivativeMode::FiniteDifference => derivs_finite_difference(ctx, phase, state)?,
    };
    let (t, w, pi, x) = (state.t, state.wealth, state.price_level, state.x);
    let params = ctx.params;
    let lambda = params.price_of_risk(&x);
    let spi = params.sigma_pi;
    let sx = params.sigma_x();
    let r = params.real_short_rate(&x);
    let pi_e = params.expected_inflation(&x);
    let hazard = hh.mortality.hazard(t);
    let delta = hh.delta;

    // exposure net of the inflation loading drives every diffusion term
    let net: Vector4<f64> = ctx.universe.sigma.transpose() * controls.exposure - spi;
    let utility = |c: f64| c.powf(1.0 - gamma) * pi.powf(th) / (1.0 - gamma);

    let mut terms: Vec<f64> = Vec::with_capacity(14);
    match phase {
        Phase::Survivors => {
            terms.push(utility(controls.c2));
            terms.push(-delta * d.v);
            terms.push(d.vw * (w * (r + net.dot(&(lambda - spi))) - controls.c2));
        }
        Phase::Retired | Phase::Working => {
            let k1u = if hh.kappa1_w == 0.0 {
                0.0
            } else {
                hh.kappa1_w * utility(controls.c1)
            };
            terms.push(k1u);
            terms.push(hh.kappa2_w * utility(controls.c2));
            // death-benefit continuation through the survivor candidate
            let (death_wealth, extra_drift) = match phase {
                Phase::Retired => (w + controls.premium / hazard, 0.0),
                Phase::Working => {
                    let hc = human_capital(&hh.income, &hh.mortality, ctx.coeffs, t, &x)
                        .map_err(PolicyError::from)?;
                    (w - hc + controls.premium / hazard, hazard * hc)
                }
                Phase::Survivors => unreachable!(),
            };
            let g1 = candidate_value(ctx, Phase::Survivors, t, death_wealth, pi, &x)?;
            terms.push(hh.kappa2_w * hazard * g1);
            terms.push(-(hazard + delta) * d.v);
            terms.push(
                d.vw * (w * (r + net.dot(&(lambda - spi))) + extra_drift
                    - controls.premium
                    - controls.c1
                    - controls.c2),
            );
        }
    }
    terms.push(d.vt);
    terms.push(-(d.vx.transpose() * (params.k_x() * x))[0]);
    terms.push(d.vpi * pi * pi_e);
    terms.push(0.5 * d.vww * w * w * net.dot(&net));
    terms.push(0.5 * d.vpipi * pi * pi * spi.dot(&spi));
    terms.push(0.5 * (d.vxx * (sx * sx.transpose())).trace());
    terms.push(w * (net.transpose() * sx.transpose() * d.vwx)[0]);
    terms.push(d.vwpi * w * pi * net.dot(&spi));
    terms.push((d.vpix.transpose() * (sx * spi))[0] * pi);

    let residual: f64 = terms.iter().sum();
    let scale = terms.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    Ok(ResidualSample {
        phase,
        state: *state,
        residual,
        scale,
        relative: residual / scale,
    })
}

/// Worst deviations of the closed-form controls from the first-order
/// conditions at one state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FocReport {
    pub c1_error: Option<f64>,
    pub c2_error: f64,
    pub exposure_error: f64,
    pub premium_error: Option<f64>,
}

/// Verify that the phase's closed-form controls solve the first-order
/// conditions of the dynamic program (marginal-utility inversion for
/// consumption and insurance, the linear system for the portfolio).
pub fn foc_check(
    ctx: &PolicyContext<'_>,
    phase: Phase,
    state: &HjbState,
) -> Result<FocReport, HjbError> {
    let hh = ctx.household;
    let gamma = hh.gamma;
    let th = ctx.control_theta * (1.0 - gamma);
    let controls = optimal_controls(ctx, phase, state)?;
    let d = derivs_closed_form(ctx, phase, state)?;
    let (w, pi, x) = (state.wealth, state.price_level, state.x);
    let pith = pi.powf(th);

    // consumption: kappa U'(c) = Vw with U'(c) = c^{-gamma} pi^{th}
    let c_from = |kappa: f64| (d.vw / (kappa * pith)).powf(-1.0 / gamma);
    let (c1_error, c2_error) = match phase {
        Phase::Survivors => (None, rel_err(controls.c2, c_from(1.0))),
        _ => {
            let c1e = if hh.kappa1_w == 0.0 {
                None
            } else {
                Some(rel_err(controls.c1, c_from(hh.kappa1_w)))
            };
            (c1e, rel_err(controls.c2, c_from(hh.kappa2_w)))
        }
    };

    // portfolio: the linear system solved by the first-order condition
    let params = ctx.params;
    let rhs = d.vw * (params.price_of_risk(&x) - params.sigma_pi)
        + d.vwpi * pi * params.sigma_pi
        + params.sigma_x().transpose() * d.vwx;
    let exposure = -ctx.universe.solve_sigma_t(&rhs) / (w * d.vww)
        + ctx.universe.solve_sigma_t(&params.sigma_pi);
    let exposure_error = (0..4)
        .map(|i| rel_err(controls.exposure[i], exposure[i]))
        .fold(0.0f64, f64::max);

    // insurance: hazard * [(dPhi1/dw)^{-1}((1/kappa2) Vw) - real wealth]
    let premium_error = match phase {
        Phase::Survivors => None,
        _ => {
            let f1 = ctx.values.f1(state.t, &x)?;
            let target = f1 * (d.vw / (hh.kappa2_w * pith)).powf(-1.0 / gamma);
            let w_real = match phase {
                Phase::Working => {
                    let hc = human_capital(&hh.income, &hh.mortality, ctx.coeffs, state.t, &x)
                        .map_err(PolicyError::from)?;
                    w - hc
                }
                _ => w,
            };
            let foc_premium = hh.mortality.hazard(state.t) * (target - w_real);
            Some(rel_err_scaled(controls.premium, foc_premium, w))
        }
    };
    Ok(FocReport {
        c1_error,
        c2_error,
        exposure_error,
        premium_error,
    })
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn rel_err_scaled(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(scale.abs()).max(1e-12)
}

/// Deterministic sampling of interior states for residual sweeps, drawn from
/// the region Monte Carlo paths actually visit.
pub fn sample_states(ctx: &PolicyContext<'_>, phase: Phase, n: usize, seed: u64) -> Vec<HjbState> {
    let hh = ctx.household;
    let (t_lo, t_hi) = match phase {
        Phase::Working => (0.5, hh.retirement() - 0.5),
        Phase::Retired => (hh.retirement() + 0.5, hh.horizon() - 0.5),
        Phase::Survivors => (0.5, hh.horizon() - 0.5),
    };
    // splitmix-style generator keeps the sweep independent of rand versions
    let mut z = seed.wrapping_add(0x9E3779B97F4A7C15);
    let mut unit = move || {
        z = z.wrapping_add(0x9E3779B97F4A7C15);
        let mut v = z;
        v = (v ^ (v >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        v = (v ^ (v >> 27)).wrapping_mul(0x94D049BB133111EB);
        v ^= v >> 31;
        (v >> 11) as f64 / (1u64 << 53) as f64
    };
    (0..n)
        .map(|_| HjbState {
            t: t_lo + (t_hi - t_lo) * unit(),
            wealth: 10.0 + 490.0 * unit(),
            price_level: 0.5 + 2.5 * unit(),
            x: Vector2::new(
                -0.1454 + 2.0 * 0.1454 * unit(),
                -0.1696 + 2.0 * 0.1696 * unit(),
            ),
        })
        .collect()
}
