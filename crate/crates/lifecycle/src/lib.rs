//! Life-cycle consumption, investment, and life-insurance planning in a
//! two-factor inflationary market.
//!
//! The crate solves a household's consumption / portfolio / life-insurance
//! problem in closed form when the financial market has affine real rates,
//! expected inflation, and prices of risk, and the household evaluates
//! consumption partly in nominal terms (the money-illusion weight `theta`).
//! It provides:
//!
//! - [`market`]: the affine market and nominal / inflation-linked bond prices;
//! - [`actuarial`]: Gompertz mortality, deterministic labor income, and the
//!   actuarial value of future income (human capital);
//! - [`riccati`]: the quadratic-exponential value-function machinery (the
//!   `Gamma` ODE system, its Hamiltonian linearization, and global-existence
//!   diagnostics);
//! - [`policy`]: closed-form optimal controls for the three life phases and
//!   the welfare-loss functional;
//! - [`sim`]: reproducible Monte Carlo of states, wealth, and strategies;
//! - [`calib`]: Kalman-filter maximum likelihood for the market parameters;
//! - [`hjb`]: a numerical verifier that evaluates the dynamic-programming
//!   residuals of the closed forms.
//!
//! The accompanying guide under `book/` walks through each piece with
//! runnable examples; those examples double as doc-tests.

pub mod actuarial;
pub mod calib;
pub mod hjb;
pub mod market;
pub mod numerics;
pub mod policy;
pub mod riccati;
pub mod sim;

#[cfg(doctest)]
mod book {
    //! Compiles and runs every Rust snippet in the guide as a doc-test so the
    //! book can never drift from the API.
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            #[allow(dead_code)]
            struct $name;
        };
    }
    chapter!(Intro, "../../../book/src/intro.md");
    chapter!(Market, "../../../book/src/market.md");
    chapter!(Actuarial, "../../../book/src/actuarial.md");
    chapter!(Riccati, "../../../book/src/riccati.md");
    chapter!(Policies, "../../../book/src/policies.md");
    chapter!(Simulation, "../../../book/src/simulation.md");
    chapter!(Calibration, "../../../book/src/calibration.md");
    chapter!(Verification, "../../../book/src/verification.md");
}
