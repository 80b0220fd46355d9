//! Reverse-time transition rules and the rollout driver.
//!
//! All rules consume the same per-step data: the current latent z at time t,
//! a `StepContext`, the posterior mean m of the oracle, and a standard normal
//! noise vector w. They differ in how the move to t' is assembled.
//!
//! Euler discretizes the mean-form reverse SDE
//!
//! ```text
//! dz = [ (z - m)/t + (eps_t^2 / (2 t^2)) (z - (1-t) m) ] dt + eps_t dw
//! ```
//!
//! evaluating drift and noise at the clamped time t_eval, so one step reads
//!
//! ```text
//! z' = z - dt [ (z - m)/t_eval + (eps^2/(2 t_eval^2)) (z - (1-t_eval) m) ]
//!        + eps sqrt(dt) w
//! ```
//!
//! Coefficient-preserving (CPS) rules rebuild the latent from the posterior
//! mean and the reconstructed noise eps_hat = (z - (1-t) m)/t:
//!
//! ```text
//! z' = (1-t') m + k1 eps_hat + k2 w,   k1^2 + k2^2 = t'^2
//! ```
//!
//! so on an exact posterior the signal/noise coefficients of the forward
//! path are preserved by construction. The split between reused and fresh
//! noise is a policy choice (`SplitPolicy`).
//!
//! FrozenMean is the exact transition of the SDE obtained by freezing m over
//! [t', t]: with rho = exp(-A(t',t)/2),
//!
//! ```text
//! z' = (1-t') m + t' rho eps_hat + t' sqrt(1 - rho^2) w
//! ```
//!
//! which is the matched CPS split. A zero-length step (t' = t) is the
//! identity for every rule.

use rayon::prelude::*;
use std::sync::Mutex;

use crate::batch::{SampleBatch, Trajectories};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::oracle::{DataModel, PosteriorScratch};
use crate::rng::DrawStream;
use crate::schedule::{step_context, ClampPolicy, ExplorationSchedule, StepContext};

/// How a CPS rule splits the noise budget t'^2 between the reconstructed
/// noise eps_hat (k1) and fresh noise (k2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPolicy {
    /// k1 = 0: discard eps_hat, fully re-noise.
    Local,
    /// k2 matches the Euler fresh-noise magnitude eps sqrt(dt), capped at t'.
    EulerEnergy,
    /// k1 = t' rho: reproduces the FrozenMean transition path-wise.
    Matched,
}

impl SplitPolicy {
    /// The (k1, k2) pair for one step. Invariant: k1^2 + k2^2 = t'^2.
    pub fn coefficients(&self, ctx: &StepContext) -> (f64, f64) {
        let tp = ctx.t_prime;
        match self {
            SplitPolicy::Local => (0.0, tp),
            SplitPolicy::EulerEnergy => {
                let k2 = tp.min(ctx.eps_t * ctx.dt.sqrt());
                ((tp * tp - k2 * k2).sqrt(), k2)
            }
            SplitPolicy::Matched => (
                tp * ctx.rho,
                tp * (1.0 - ctx.rho * ctx.rho).max(0.0).sqrt(),
            ),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SplitPolicy::Local => "local",
            SplitPolicy::EulerEnergy => "euler-energy",
            SplitPolicy::Matched => "matched",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(SplitPolicy::Local),
            "euler-energy" => Ok(SplitPolicy::EulerEnergy),
            "matched" => Ok(SplitPolicy::Matched),
            other => Err(Error::Config(format!(
                "unknown split policy '{other}' (expected local, euler-energy, matched)"
            ))),
        }
    }

    pub const ALL: [SplitPolicy; 3] = [
        SplitPolicy::Local,
        SplitPolicy::EulerEnergy,
        SplitPolicy::Matched,
    ];
}

impl std::fmt::Display for SplitPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Transition rule family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRule {
    Euler,
    Cps { split: SplitPolicy },
    FrozenMean,
}

impl StepRule {
    /// Where the rule wants the posterior evaluated. Euler needs the clamped
    /// time (its drift diverges with the schedule at t = 1); the rebuild
    /// rules use the node time itself, which the posterior supports up to
    /// and including t = 1.
    pub fn posterior_time(&self, ctx: &StepContext) -> f64 {
        match self {
            StepRule::Euler => ctx.t_eval,
            StepRule::Cps { .. } | StepRule::FrozenMean => ctx.t,
        }
    }

    /// Apply one transition. `w` must hold dim standard normal draws.
    pub fn apply(
        &self,
        z: &[f64],
        ctx: &StepContext,
        mean: &[f64],
        w: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        match self {
            StepRule::Euler => euler_step(z, ctx, mean, w, out),
            StepRule::Cps { split } => cps_step(z, ctx, mean, *split, w, out),
            StepRule::FrozenMean => frozen_mean_step(z, ctx, mean, w, out),
        }
    }

    pub fn name(&self) -> String {
        match self {
            StepRule::Euler => "euler".to_string(),
            StepRule::Cps { split } => format!("cps-{}", split.name()),
            StepRule::FrozenMean => "frozen-mean".to_string(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(StepRule::Euler),
            "frozen-mean" => Ok(StepRule::FrozenMean),
            "cps" => Ok(StepRule::Cps {
                split: SplitPolicy::EulerEnergy,
            }),
            other => {
                if let Some(split) = other.strip_prefix("cps-") {
                    Ok(StepRule::Cps {
                        split: SplitPolicy::parse(split)?,
                    })
                } else {
                    Err(Error::Config(format!(
                        "unknown rule '{other}' (expected euler, cps[-<split>], frozen-mean)"
                    )))
                }
            }
        }
    }
}

impl std::fmt::Display for StepRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

fn check_step_args(
    op: &'static str,
    z: &[f64],
    mean: &[f64],
    w: &[f64],
    out: &[f64],
) -> Result<()> {
    for (len, what) in [(mean.len(), "mean"), (w.len(), "noise"), (out.len(), "out")] {
        if len != z.len() {
            return Err(Error::invalid(
                op,
                format!("{what} has length {len}, latent has {}", z.len()),
            ));
        }
    }
    Ok(())
}

/// One Euler-Maruyama step of the mean-form reverse SDE.
pub fn euler_step(
    z: &[f64],
    ctx: &StepContext,
    mean: &[f64],
    w: &[f64],
    out: &mut [f64],
) -> Result<()> {
    check_step_args("euler_step", z, mean, w, out)?;
    if ctx.dt == 0.0 {
        out.copy_from_slice(z);
        return Ok(());
    }
    let te = ctx.t_eval;
    let eps = ctx.eps_t;
    let score_scale = eps * eps / (2.0 * te * te);
    let fresh = eps * ctx.dt.sqrt();
    for i in 0..z.len() {
        let drift = (z[i] - mean[i]) / te + score_scale * (z[i] - (1.0 - te) * mean[i]);
        out[i] = z[i] - ctx.dt * drift + fresh * w[i];
    }
    Ok(())
}

/// The raw coefficient-preserving rebuild, without the zero-length identity
/// shortcut. Exposed for one-step analyses that evaluate the formula at
/// t' = t on purpose.
pub fn cps_transition(
    z: &[f64],
    ctx: &StepContext,
    mean: &[f64],
    split: SplitPolicy,
    w: &[f64],
    out: &mut [f64],
) -> Result<()> {
    check_step_args("cps_transition", z, mean, w, out)?;
    let (k1, k2) = split.coefficients(ctx);
    rebuild(z, ctx, mean, k1, k2, w, out);
    Ok(())
}

/// One coefficient-preserving step.
pub fn cps_step(
    z: &[f64],
    ctx: &StepContext,
    mean: &[f64],
    split: SplitPolicy,
    w: &[f64],
    out: &mut [f64],
) -> Result<()> {
    check_step_args("cps_step", z, mean, w, out)?;
    if ctx.dt == 0.0 {
        out.copy_from_slice(z);
        return Ok(());
    }
    let (k1, k2) = split.coefficients(ctx);
    rebuild(z, ctx, mean, k1, k2, w, out);
    Ok(())
}

/// One exact transition of the frozen-posterior-mean SDE.
pub fn frozen_mean_step(
    z: &[f64],
    ctx: &StepContext,
    mean: &[f64],
    w: &[f64],
    out: &mut [f64],
) -> Result<()> {
    check_step_args("frozen_mean_step", z, mean, w, out)?;
    if ctx.dt == 0.0 {
        out.copy_from_slice(z);
        return Ok(());
    }
    // Same arithmetic as the matched CPS split, kept in sync bitwise.
    let k1 = ctx.t_prime * ctx.rho;
    let k2 = ctx.t_prime * (1.0 - ctx.rho * ctx.rho).max(0.0).sqrt();
    rebuild(z, ctx, mean, k1, k2, w, out);
    Ok(())
}

/// out = (1-t') mean + k1 eps_hat + k2 w with eps_hat = (z - (1-t) mean) / t.
fn rebuild(
    z: &[f64],
    ctx: &StepContext,
    mean: &[f64],
    k1: f64,
    k2: f64,
    w: &[f64],
    out: &mut [f64],
) {
    let omt = 1.0 - ctx.t;
    let omtp = 1.0 - ctx.t_prime;
    for i in 0..z.len() {
        let eps_hat = (z[i] - omt * mean[i]) / ctx.t;
        out[i] = omtp * mean[i] + k1 * eps_hat + k2 * w[i];
    }
}

/// Configuration for a batched rollout from t = 1 to t = 0.
#[derive(Debug, Clone)]
pub struct RolloutConfig {
    pub grid: TimeGrid,
    pub n_samples: usize,
    pub seed: u64,
    pub record_trajectories: bool,
    pub clamp: ClampPolicy,
}

impl RolloutConfig {
    pub fn new(grid: TimeGrid, n_samples: usize, seed: u64) -> Self {
        RolloutConfig {
            grid,
            n_samples,
            seed,
            record_trajectories: false,
            clamp: ClampPolicy::default(),
        }
    }
}

#[derive(Debug)]
pub struct RolloutOutput {
    pub finals: SampleBatch,
    pub trajectories: Option<Trajectories>,
}

/// Run `rule` down the grid for every sample.
///
/// Sample i draws its initial latent from the stream keyed (seed, i, init)
/// and its step-k noise from (seed, i, k), so the output is bit-identical
/// for a given (config, seed) regardless of thread count, and extending the
/// batch leaves existing sample indices unchanged.
pub fn rollout(
    model: &DataModel,
    schedule: &ExplorationSchedule,
    rule: StepRule,
    cfg: &RolloutConfig,
) -> Result<RolloutOutput> {
    let dim = model.dim();
    let n = cfg.n_samples;
    if n == 0 {
        return Err(Error::invalid("rollout", "n_samples must be positive"));
    }
    let n_steps = cfg.grid.n_steps();
    // Step contexts are shared by all samples; index k holds the step from
    // node k to node k-1.
    let mut ctxs: Vec<StepContext> = Vec::with_capacity(n_steps + 1);
    ctxs.push(step_context(schedule, 1.0, 1.0, cfg.clamp)?); // unused slot 0
    for k in 1..=n_steps {
        ctxs.push(step_context(
            schedule,
            cfg.grid.node(k),
            cfg.grid.node(k - 1),
            cfg.clamp,
        )?);
    }

    let mut finals = SampleBatch::zeros(n, dim);
    let mut trajectories = cfg
        .record_trajectories
        .then(|| Trajectories::zeros(n, n_steps + 1, dim));

    let first_error: Mutex<Option<(usize, usize, Error)>> = Mutex::new(None);
    let note_error = |sample: usize, step: usize, err: Error| {
        let mut slot = first_error.lock().unwrap();
        if slot.as_ref().map_or(true, |(s, _, _)| sample < *s) {
            *slot = Some((sample, step, err));
        }
    };

    struct Workspace {
        scratch: PosteriorScratch,
        mean: Vec<f64>,
        noise: Vec<f64>,
        next: Vec<f64>,
    }
    let make_ws = || Workspace {
        scratch: model.scratch(),
        mean: vec![0.0; dim],
        noise: vec![0.0; dim],
        next: vec![0.0; dim],
    };

    let run_sample = |ws: &mut Workspace, sample: usize, final_row: &mut [f64], traj: Option<&mut [f64]>| {
        let mut z = DrawStream::init(cfg.seed, sample as u64).normal_vec(dim);
        if let Some(traj) = &traj {
            // node n_steps is t = 1; trajectory rows are node-major.
            debug_assert_eq!(traj.len(), (n_steps + 1) * dim);
        }
        let write_node = |traj: &mut Option<&mut [f64]>, node: usize, state: &[f64]| {
            if let Some(traj) = traj {
                traj[node * dim..(node + 1) * dim].copy_from_slice(state);
            }
        };
        let mut traj = traj;
        write_node(&mut traj, n_steps, &z);
        for k in (1..=n_steps).rev() {
            let ctx = &ctxs[k];
            let t_post = rule.posterior_time(ctx);
            if let Err(e) = model.posterior_mean_into(&z, t_post, &mut ws.scratch, &mut ws.mean) {
                note_error(sample, k, e);
                return;
            }
            DrawStream::step(cfg.seed, sample as u64, k as u64).fill_normal(&mut ws.noise);
            if let Err(e) = rule.apply(&z, ctx, &ws.mean, &ws.noise, &mut ws.next) {
                note_error(sample, k, e);
                return;
            }
            std::mem::swap(&mut z, &mut ws.next);
            write_node(&mut traj, k - 1, &z);
        }
        final_row.copy_from_slice(&z);
    };

    match &mut trajectories {
        Some(traj) => {
            let stride = traj.stride();
            finals
                .data_mut()
                .par_chunks_mut(dim)
                .zip(traj.data_mut().par_chunks_mut(stride))
                .enumerate()
                .with_min_len(16)
                .for_each_init(make_ws, |ws, (i, (final_row, traj_row))| {
                    run_sample(ws, i, final_row, Some(traj_row));
                });
        }
        None => {
            finals
                .data_mut()
                .par_chunks_mut(dim)
                .enumerate()
                .with_min_len(16)
                .for_each_init(make_ws, |ws, (i, final_row)| {
                    run_sample(ws, i, final_row, None);
                });
        }
    }

    if let Some((sample, step, source)) = first_error.into_inner().unwrap() {
        return Err(Error::Rollout {
            sample,
            step,
            source: Box::new(source),
        });
    }
    Ok(RolloutOutput {
        finals,
        trajectories,
    })
}

/// Integrate the mean-form reverse SDE over [t', t] with `m_substeps` Euler
/// substeps, re-evaluating the posterior at every substep. The Brownian
/// increments are supplied by the caller as `m_substeps * dim` standard
/// normals so that a second integrator can be coupled synchronously to the
/// same path. With one substep this reduces exactly to `euler_step`.
pub fn fine_reference_step(
    model: &DataModel,
    schedule: &ExplorationSchedule,
    clamp: ClampPolicy,
    z: &[f64],
    t: f64,
    t_prime: f64,
    m_substeps: usize,
    noise: &[f64],
) -> Result<Vec<f64>> {
    fine_step_inner(model, schedule, clamp, z, t, t_prime, m_substeps, noise, None)
}

/// Same integrator, but with the posterior mean frozen at the supplied value
/// (normally the mean at the step start) throughout the step.
pub fn fine_frozen_step(
    model: &DataModel,
    schedule: &ExplorationSchedule,
    clamp: ClampPolicy,
    z: &[f64],
    t: f64,
    t_prime: f64,
    m_substeps: usize,
    noise: &[f64],
    frozen_mean: &[f64],
) -> Result<Vec<f64>> {
    fine_step_inner(
        model,
        schedule,
        clamp,
        z,
        t,
        t_prime,
        m_substeps,
        noise,
        Some(frozen_mean),
    )
}

#[allow(clippy::too_many_arguments)]
fn fine_step_inner(
    model: &DataModel,
    schedule: &ExplorationSchedule,
    clamp: ClampPolicy,
    z: &[f64],
    t: f64,
    t_prime: f64,
    m_substeps: usize,
    noise: &[f64],
    frozen_mean: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let dim = model.dim();
    if m_substeps == 0 {
        return Err(Error::invalid("fine_step", "need at least one substep"));
    }
    if noise.len() != m_substeps * dim {
        return Err(Error::Dim {
            op: "fine_step",
            expected: m_substeps * dim,
            got: noise.len(),
        });
    }
    if let Some(fm) = frozen_mean {
        if fm.len() != dim {
            return Err(Error::Dim {
                op: "fine_step",
                expected: dim,
                got: fm.len(),
            });
        }
    }
    let h = (t - t_prime) / m_substeps as f64;
    let mut cur = z.to_vec();
    let mut mean = vec![0.0; dim];
    let mut next = vec![0.0; dim];
    let mut scratch = model.scratch();
    for k in 0..m_substeps {
        let s_hi = t - k as f64 * h;
        let s_lo = if k + 1 == m_substeps {
            t_prime
        } else {
            t - (k + 1) as f64 * h
        };
        let ctx = step_context(schedule, s_hi, s_lo, clamp)?;
        match frozen_mean {
            Some(fm) => mean.copy_from_slice(fm),
            None => model.posterior_mean_into(&cur, ctx.t_eval, &mut scratch, &mut mean)?,
        }
        euler_step(&cur, &ctx, &mean, &noise[k * dim..(k + 1) * dim], &mut next)?;
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}
