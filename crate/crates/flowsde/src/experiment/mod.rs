//! Experiment runners behind the CLI subcommands.
//!
//! Each runner consumes a [`Settings`](crate::config::Settings) bag (config
//! file plus command-line overrides), executes its sweep, writes CSV tables
//! and a `config.echo` through a [`Reporter`](crate::report::Reporter), and
//! returns the [`Summary`](crate::report::Summary) whose `all_pass` flag the
//! binary maps to an exit code. Every consumed key lands in the echo with
//! its effective value, so a finished run documents its own configuration,
//! and all randomness flows through keyed [`DrawStream`](crate::rng::DrawStream)s,
//! so re-running with the same settings reproduces every output byte.

mod double_ring;
mod gaussian;
mod identities;
mod point_mass;

pub use double_ring::run_double_ring;
pub use gaussian::run_gaussian;
pub use identities::run_identities;
pub use point_mass::run_point_mass;

use crate::error::{Error, Result};
use crate::schedule::ExplorationSchedule;

/// Build a schedule from its config-file spelling.
fn schedule_of(kind: &str, eta: f64) -> Result<ExplorationSchedule> {
    match kind {
        "log-snr" => ExplorationSchedule::log_snr(eta),
        "constant" => ExplorationSchedule::constant(eta),
        other => Err(Error::Config(format!(
            "unknown schedule '{other}' (expected log-snr or constant)"
        ))),
    }
}

/// Relative error against a nonnegative target; falls back to the absolute
/// error when the target is zero so exact-zero cases stay checkable.
fn rel_err(estimate: f64, target: f64) -> f64 {
    if target == 0.0 {
        estimate.abs()
    } else {
        ((estimate - target) / target).abs()
    }
}

/// Split a comma-separated config value into trimmed nonempty entries.
fn comma_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}
