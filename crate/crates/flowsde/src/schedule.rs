//! Time parametrization and exploration schedules.
//!
//! The forward path is the linear interpolation z_t = (1-t) z0 + t eps with
//! standard normal eps, so the log signal-to-noise ratio is
//!
//! ```text
//! logsnr(t) = log((1-t)^2 / t^2) = 2 (log(1-t) - log t)
//! ```
//!
//! A reverse-time sampler injects exploration noise eps_t. Two schedules are
//! supported:
//!
//! ```text
//! Constant:  eps_t = eta
//! LogSnr:    eps_t = eta * sqrt(t / (1-t))
//! ```
//!
//! The LogSnr schedule keeps the ratio of score-term noise to the logSNR
//! velocity constant: (eps_t^2 / t^2) / (2 / (t (1-t))) = eta^2 / 2 at every
//! t, so exploration strength is uniform in logSNR time.
//!
//! Closed-form transitions need the accumulated noise-to-signal energy
//!
//! ```text
//! A(t', t) = integral over s in [t', t] of eps_s^2 / s^2 ds
//!   Constant: eta^2 (1/t' - 1/t)
//!   LogSnr:   eta^2 log( t (1-t') / (t' (1-t)) )
//! ```
//!
//! and the retention factor rho = exp(-A/2). Both forms are evaluated in a
//! cancellation-free arrangement so that A is accurate near t' = t and at
//! the t = 1 endpoint, where the LogSnr integral diverges and rho is exactly
//! zero.

use crate::error::{Error, Result};

/// Log signal-to-noise ratio of the interpolation path, valid on (0, 1).
pub fn logsnr(t: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain {
            op: "logsnr",
            name: "t",
            value: t,
            domain: "(0, 1)",
        });
    }
    // ln_1p(-t) is ln(1-t) without forming 1-t.
    Ok(2.0 * ((-t).ln_1p() - t.ln()))
}

/// Exploration noise schedule eps_t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExplorationSchedule {
    Constant { eta: f64 },
    LogSnr { eta: f64 },
}

fn check_eta(op: &'static str, eta: f64) -> Result<()> {
    if !eta.is_finite() || eta < 0.0 {
        return Err(Error::Domain {
            op,
            name: "eta",
            value: eta,
            domain: "[0, inf)",
        });
    }
    Ok(())
}

impl ExplorationSchedule {
    pub fn constant(eta: f64) -> Result<Self> {
        check_eta("ExplorationSchedule::constant", eta)?;
        Ok(ExplorationSchedule::Constant { eta })
    }

    pub fn log_snr(eta: f64) -> Result<Self> {
        check_eta("ExplorationSchedule::log_snr", eta)?;
        Ok(ExplorationSchedule::LogSnr { eta })
    }

    pub fn eta(&self) -> f64 {
        match *self {
            ExplorationSchedule::Constant { eta } | ExplorationSchedule::LogSnr { eta } => eta,
        }
    }

    /// Noise magnitude at time t.
    ///
    /// The LogSnr value diverges as t -> 1, so t >= 1 is rejected there; the
    /// caller is expected to evaluate at a clamped time instead.
    pub fn eps_at(&self, t: f64) -> Result<f64> {
        match *self {
            ExplorationSchedule::Constant { eta } => {
                if !t.is_finite() {
                    return Err(Error::Domain {
                        op: "eps_at",
                        name: "t",
                        value: t,
                        domain: "finite",
                    });
                }
                Ok(eta)
            }
            ExplorationSchedule::LogSnr { eta } => {
                if !(t >= 0.0 && t < 1.0) {
                    return Err(Error::Domain {
                        op: "eps_at",
                        name: "t",
                        value: t,
                        domain: "[0, 1)",
                    });
                }
                Ok(eta * (t / (1.0 - t)).sqrt())
            }
        }
    }

    /// Accumulated exploration energy A(t', t) for 0 < t' <= t <= 1.
    ///
    /// Returns infinity for the LogSnr schedule at t = 1 (the caller maps it
    /// to rho = 0). Exactly zero when t' = t or eta = 0.
    pub fn a_integral(&self, t_prime: f64, t: f64) -> Result<f64> {
        if !(t_prime > 0.0 && t_prime <= t && t <= 1.0) {
            return Err(Error::invalid(
                "a_integral",
                format!("need 0 < t' <= t <= 1, got t' = {t_prime}, t = {t}"),
            ));
        }
        let eta = self.eta();
        if eta == 0.0 || t_prime == t {
            return Ok(0.0);
        }
        let dt = t - t_prime;
        let a = match *self {
            // eta^2 (1/t' - 1/t) without cancellation near t' = t.
            ExplorationSchedule::Constant { .. } => eta * eta * dt / (t * t_prime),
            // eta^2 [ln(t/t') + ln((1-t')/(1-t))], each factor via ln_1p so
            // the value stays accurate near t' = t and is +inf at t = 1.
            ExplorationSchedule::LogSnr { .. } => {
                let one_minus_t = 1.0 - t;
                let second = if one_minus_t == 0.0 {
                    f64::INFINITY
                } else {
                    (dt / one_minus_t).ln_1p()
                };
                eta * eta * ((dt / t_prime).ln_1p() + second)
            }
        };
        Ok(a)
    }
}

/// How Euler-style rules avoid the divergent schedule value at t = 1:
/// evaluation time is pulled back to t_eval = min(t, 1 - margin_factor * dt).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClampPolicy {
    pub margin_factor: f64,
}

impl Default for ClampPolicy {
    fn default() -> Self {
        ClampPolicy { margin_factor: 0.5 }
    }
}

/// Everything a transition rule needs to know about one step t -> t'.
///
/// Invariants: dt >= 0, a_value >= 0, rho in [0, 1] with rho = 1 iff
/// a_value = 0 and rho = 0 only in the infinite-A limit (t = 1 under LogSnr,
/// or t' = 0), and rho^2 + (1 - exp(-a_value)) = 1 by construction.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub t: f64,
    pub t_prime: f64,
    pub dt: f64,
    /// Clamped evaluation time min(t, 1 - margin_factor * dt).
    pub t_eval: f64,
    /// Schedule value at t_eval; zero for a zero-length step.
    pub eps_t: f64,
    pub a_value: f64,
    /// Retention factor exp(-a_value / 2).
    pub rho: f64,
}

/// Precompute the per-step quantities shared by all transition rules.
///
/// Accepts 0 <= t' <= t <= 1 with t > 0. A zero-length step (t' = t) yields
/// the identity context (a_value = 0, rho = 1, eps_t = 0).
pub fn step_context(
    schedule: &ExplorationSchedule,
    t: f64,
    t_prime: f64,
    clamp: ClampPolicy,
) -> Result<StepContext> {
    if !(t > 0.0 && t <= 1.0) || !(t_prime >= 0.0 && t_prime <= t) {
        return Err(Error::invalid(
            "step_context",
            format!("need 0 <= t' <= t <= 1 with t > 0, got t' = {t_prime}, t = {t}"),
        ));
    }
    if !(clamp.margin_factor >= 0.0) {
        return Err(Error::Domain {
            op: "step_context",
            name: "margin_factor",
            value: clamp.margin_factor,
            domain: "[0, inf)",
        });
    }
    let dt = t - t_prime;
    if dt == 0.0 {
        return Ok(StepContext {
            t,
            t_prime,
            dt,
            t_eval: t,
            eps_t: 0.0,
            a_value: 0.0,
            rho: 1.0,
        });
    }
    let t_eval = t.min(1.0 - clamp.margin_factor * dt);
    let eps_t = schedule.eps_at(t_eval)?;
    let a_value = if t_prime == 0.0 {
        // A(0, t) diverges for both schedules; the closed-form transition
        // then keeps nothing of the current latent.
        if schedule.eta() == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        schedule.a_integral(t_prime, t)?
    };
    let rho = (-a_value / 2.0).exp();
    Ok(StepContext {
        t,
        t_prime,
        dt,
        t_eval,
        eps_t,
        a_value,
        rho,
    })
}
