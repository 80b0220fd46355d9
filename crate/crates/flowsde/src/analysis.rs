//! Closed-form identities and error experiments for the transition rules.
//!
//! Everything here is a measurement with a known target: the first-order
//! logSNR decomposition of one reverse step and its exact counterpart, the
//! point-mass noise-coefficient algebra for Euler steps, the variance
//! contraction of coefficient-preserving steps on a Gaussian prior, the
//! posterior-mean Jacobian identity, the renoising map that raises a latent
//! back to a lower logSNR, and the synchronous coupling of a frozen-mean
//! integrator against a fine reference.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::oracle::DataModel;
use crate::rng::{lane, DrawStream};
use crate::sampler::{
    cps_transition, fine_frozen_step, fine_reference_step, SplitPolicy, StepRule,
};
use crate::schedule::{step_context, ClampPolicy, ExplorationSchedule, StepContext};

/// First-order contributions of one reverse step of size dt to the logSNR
/// increase, split into velocity, score, and stochastic parts.
///
/// The score term's progress is cancelled exactly by the injected noise
/// (sto = -sco), so the net first-order progress is the velocity term alone
/// and is independent of the exploration level.
#[derive(Debug, Clone, Copy)]
pub struct LogSnrTerms {
    pub vel: f64,
    pub sco: f64,
    pub sto: f64,
}

fn check_lemma_window(op: &'static str, t: f64, dt: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) || !t.is_finite() {
        return Err(Error::Domain {
            op,
            name: "t",
            value: t,
            domain: "(0, 1)",
        });
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Domain {
            op,
            name: "dt",
            value: dt,
            domain: "(0, inf)",
        });
    }
    if t - dt <= 0.0 {
        return Err(Error::invalid(op, format!("t - dt = {} must be positive", t - dt)));
    }
    Ok(())
}

/// First-order logSNR terms: vel = 2 dt / (t (1-t)), sco = eps^2 dt / t^2,
/// sto = -sco.
pub fn logsnr_terms(t: f64, dt: f64, eps: f64) -> Result<LogSnrTerms> {
    check_lemma_window("logsnr_terms", t, dt)?;
    let vel = 2.0 * dt / (t * (1.0 - t));
    let sco = eps * eps * dt / (t * t);
    Ok(LogSnrTerms { vel, sco, sto: -sco })
}

/// Exact one-step logSNR increments the first-order terms approximate.
///
/// The deterministic (velocity) increment is the full logSNR change along
/// the path, lambda(t-dt) - lambda(t) = 2 [ln(1 + dt/(1-t)) - ln(1 - dt/t)];
/// the stochastic increment from adding eps^2 dt of noise variance on top of
/// t^2 is ln(t^2 / (t^2 + eps^2 dt)) = -ln(1 + eps^2 dt / t^2). Both are
/// computed through ln_1p so that nothing cancels as dt -> 0.
pub fn logsnr_exact_increments(t: f64, dt: f64, eps: f64) -> Result<(f64, f64)> {
    check_lemma_window("logsnr_exact_increments", t, dt)?;
    let vel_exact = 2.0 * ((dt / (1.0 - t)).ln_1p() - (-dt / t).ln_1p());
    let sto_exact = -(eps * eps * dt / (t * t)).ln_1p();
    Ok((vel_exact, sto_exact))
}

/// Consecutive residual ratios |exact - first order| (dt) / (dt/2) for the
/// velocity and stochastic terms over a halving sequence of step sizes.
/// Second-order remainders make every ratio approach 4.
pub fn logsnr_residual_ratios(t: f64, eps: f64, dts: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if dts.len() < 2 {
        return Err(Error::invalid(
            "logsnr_residual_ratios",
            "need at least two step sizes",
        ));
    }
    let mut vel_res = Vec::with_capacity(dts.len());
    let mut sto_res = Vec::with_capacity(dts.len());
    for &dt in dts {
        let terms = logsnr_terms(t, dt, eps)?;
        let (vel_exact, sto_exact) = logsnr_exact_increments(t, dt, eps)?;
        vel_res.push((vel_exact - terms.vel).abs());
        sto_res.push((sto_exact - terms.sto).abs());
    }
    let ratios = |res: &[f64]| res.windows(2).map(|w| w[0] / w[1]).collect();
    Ok((ratios(&vel_res), ratios(&sto_res)))
}

/// Coefficients of one Euler step on point-mass data at z* = 0, starting
/// from the exact marginal z_t = t eps0.
///
/// The next state is eps_coeff * eps0 + fresh * w, so its total noise scale
/// exceeds the target t' whenever eps > 0.
#[derive(Debug, Clone, Copy)]
pub struct EulerCoeffs {
    /// Coefficient on the data point: 1 - t'.
    pub signal: f64,
    /// Coefficient on the inherited noise eps0: t' - eps^2 dt / (2t).
    pub eps_coeff: f64,
    /// Scale of the fresh noise: eps sqrt(dt).
    pub fresh: f64,
    /// sqrt(eps_coeff^2 + fresh^2).
    pub total_noise: f64,
}

/// The unclamped one-step coefficients, valid whenever eps is finite at t.
pub fn pointmass_euler_coeffs(t: f64, t_prime: f64, eps: f64) -> Result<EulerCoeffs> {
    if !(t > 0.0) {
        return Err(Error::Domain {
            op: "pointmass_euler_coeffs",
            name: "t",
            value: t,
            domain: "(0, 1]",
        });
    }
    if !(t_prime <= t && t_prime >= 0.0) {
        return Err(Error::invalid(
            "pointmass_euler_coeffs",
            format!("need 0 <= t' <= t, got t' = {t_prime}, t = {t}"),
        ));
    }
    let dt = t - t_prime;
    let eps_coeff = t_prime - eps * eps * dt / (2.0 * t);
    let fresh = eps * dt.sqrt();
    Ok(EulerCoeffs {
        signal: 1.0 - t_prime,
        eps_coeff,
        fresh,
        total_noise: (eps_coeff * eps_coeff + fresh * fresh).sqrt(),
    })
}

/// Clamp-aware variant: drift and noise are evaluated at t_eval as the Euler
/// rule does, giving eps_coeff = t (1 - dt/t_eval - eps^2 dt / (2 t_eval^2)).
/// Coincides with `pointmass_euler_coeffs` whenever the clamp is inactive,
/// and stays finite at t = 1 where the logSNR schedule diverges.
pub fn pointmass_euler_coeffs_clamped(
    schedule: &ExplorationSchedule,
    t: f64,
    t_prime: f64,
    clamp: ClampPolicy,
) -> Result<EulerCoeffs> {
    let ctx = step_context(schedule, t, t_prime, clamp)?;
    let te = ctx.t_eval;
    let eps = ctx.eps_t;
    let eps_coeff = t * (1.0 - ctx.dt / te - eps * eps * ctx.dt / (2.0 * te * te));
    let fresh = eps * ctx.dt.sqrt();
    Ok(EulerCoeffs {
        signal: 1.0 - t_prime,
        eps_coeff,
        fresh,
        total_noise: (eps_coeff * eps_coeff + fresh * fresh).sqrt(),
    })
}

/// Exact marginal law of a rollout node on point-mass data: the state at
/// time t is signal * z* + noise_std * (standard normal).
#[derive(Debug, Clone, Copy)]
pub struct NodeLaw {
    pub t: f64,
    pub signal: f64,
    pub noise_std: f64,
}

/// Propagate the exact per-node marginal law of a rollout on point-mass data.
///
/// Every rule here maps the state affinely, z' = alpha z + beta z* + gamma w,
/// so the signal coefficient and noise variance obey the recursion
/// sigma' = alpha sigma + beta, v' = alpha^2 v + gamma^2 starting from
/// (sigma, v) = (0, 1) at t = 1. For the rebuild rules the recursion
/// reproduces (1 - t_k, t_k^2) exactly; for Euler it accumulates the
/// per-step inflation and is the oracle for the rollout's residual noise.
pub fn pointmass_node_laws(
    schedule: &ExplorationSchedule,
    grid: &TimeGrid,
    rule: StepRule,
    clamp: ClampPolicy,
) -> Result<Vec<NodeLaw>> {
    let n = grid.n_steps();
    let mut laws = vec![
        NodeLaw {
            t: 0.0,
            signal: 0.0,
            noise_std: 0.0,
        };
        n + 1
    ];
    laws[n] = NodeLaw {
        t: grid.node(n),
        signal: 0.0,
        noise_std: 1.0,
    };
    let mut sigma = 0.0;
    let mut v = 1.0;
    for k in (1..=n).rev() {
        let ctx = step_context(schedule, grid.node(k), grid.node(k - 1), clamp)?;
        let (alpha, beta, gamma_sq) = step_affine(rule, &ctx);
        sigma = alpha * sigma + beta;
        v = alpha * alpha * v + gamma_sq;
        laws[k - 1] = NodeLaw {
            t: grid.node(k - 1),
            signal: sigma,
            noise_std: v.sqrt(),
        };
    }
    Ok(laws)
}

/// Coefficients of one step as an affine map z' = alpha z + beta m + gamma w,
/// where m is the posterior mean the rule consumes.
fn step_affine(rule: StepRule, ctx: &StepContext) -> (f64, f64, f64) {
    match rule {
        StepRule::Euler => {
            let te = ctx.t_eval;
            let eps = ctx.eps_t;
            let a = 1.0 - ctx.dt / te - eps * eps * ctx.dt / (2.0 * te * te);
            let b = ctx.dt * (1.0 / te + eps * eps * (1.0 - te) / (2.0 * te * te));
            (a, b, eps * eps * ctx.dt)
        }
        StepRule::Cps { split } => {
            let (k1, k2) = split.coefficients(ctx);
            let a = k1 / ctx.t;
            (a, (1.0 - ctx.t_prime) - a * (1.0 - ctx.t), k2 * k2)
        }
        StepRule::FrozenMean => {
            let k1 = ctx.t_prime * ctx.rho;
            let a = k1 / ctx.t;
            let k2_sq = ctx.t_prime * ctx.t_prime * (1.0 - ctx.rho * ctx.rho).max(0.0);
            (a, (1.0 - ctx.t_prime) - a * (1.0 - ctx.t), k2_sq)
        }
    }
}

/// Per-node variance of a rollout on a centered 1-d Gaussian prior N(0, s^2).
///
/// On this prior the posterior mean is linear, m = alpha_u z with
/// alpha_u = (1-u) s^2 / ((1-u)^2 s^2 + u^2) at the rule's posterior time u,
/// so every rule maps the state as z' = g z + gamma w with
/// g = alpha + beta alpha_u, and the node variance obeys v' = g^2 v + gamma^2
/// from v = 1 at t = 1. The mean stays zero throughout.
///
/// The forward marginal at node t has variance (1-t)^2 s^2 + t^2; the
/// mean-rebuild rules fall short of it by the accumulated posterior-variance
/// gap, which vanishes only as the grid refines (or as s -> 0, where the
/// prior degenerates to a point mass and the rebuild is exact).
pub fn gaussian_node_variances(
    s_sq: f64,
    schedule: &ExplorationSchedule,
    grid: &TimeGrid,
    rule: StepRule,
    clamp: ClampPolicy,
) -> Result<Vec<f64>> {
    if !(s_sq >= 0.0) || !s_sq.is_finite() {
        return Err(Error::Domain {
            op: "gaussian_node_variances",
            name: "s_sq",
            value: s_sq,
            domain: "[0, inf)",
        });
    }
    let n = grid.n_steps();
    let mut vars = vec![0.0; n + 1];
    vars[n] = 1.0;
    let mut v = 1.0;
    for k in (1..=n).rev() {
        let ctx = step_context(schedule, grid.node(k), grid.node(k - 1), clamp)?;
        let (alpha, beta, gamma_sq) = step_affine(rule, &ctx);
        let u = rule.posterior_time(&ctx);
        let mean_coeff = (1.0 - u) * s_sq / ((1.0 - u) * (1.0 - u) * s_sq + u * u);
        let g = alpha + beta * mean_coeff;
        v = g * g * v + gamma_sq;
        vars[k - 1] = v;
    }
    Ok(vars)
}

/// Variance accounting of one coefficient-preserving step on a centered 1-d
/// Gaussian prior N(0, s^2).
#[derive(Debug, Clone)]
pub struct ContractionReport {
    pub split: SplitPolicy,
    pub s: f64,
    pub t: f64,
    pub t_prime: f64,
    pub k1: f64,
    pub k2: f64,
    /// Marginal variance the step should produce: (1-t')^2 s^2 + t'^2.
    pub target_var: f64,
    /// Variance the step actually produces, in closed form.
    pub cps_var: f64,
    /// target_var - cps_var = ((1-t') - k1 (1-t)/t)^2 E[Var(z0|z_t)] >= 0.
    pub gap: f64,
    /// Monte-Carlo estimate of the same gap.
    pub mc_gap: f64,
    /// Standard error of the Monte-Carlo variance estimate.
    pub mc_stderr: f64,
}

/// Measure the one-step variance contraction of a CPS rule on N(0, s^2).
///
/// Writing the posterior mean as m = c z with c = (1-t) s^2 / denom and
/// denom = (1-t)^2 s^2 + t^2, the step is affine in z, so its output
/// variance is available in closed form; the deficit against the target
/// marginal is E[Var(z0|z_t)] ((1-t') - k1 (1-t)/t)^2, nonnegative for every
/// split and zero only when the reused-noise coefficient matches t'/t
/// exactly. The Monte-Carlo column replays the step through the posterior
/// oracle and the real transition kernel.
#[allow(clippy::too_many_arguments)]
pub fn cps_contraction_gaussian(
    s: f64,
    schedule: &ExplorationSchedule,
    t: f64,
    t_prime: f64,
    split: SplitPolicy,
    clamp: ClampPolicy,
    n_samples: usize,
    seed: u64,
) -> Result<ContractionReport> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Domain {
            op: "cps_contraction_gaussian",
            name: "s",
            value: s,
            domain: "(0, inf)",
        });
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain {
            op: "cps_contraction_gaussian",
            name: "t",
            value: t,
            domain: "(0, 1)",
        });
    }
    if n_samples < 2 {
        return Err(Error::invalid(
            "cps_contraction_gaussian",
            "need at least two samples",
        ));
    }
    let ctx = step_context(schedule, t, t_prime, clamp)?;
    let (k1, k2) = split.coefficients(&ctx);
    let omt = 1.0 - t;
    let omtp = 1.0 - t_prime;
    let denom = omt * omt * s * s + t * t;
    let post_var = s * s * t * t / denom;
    let target_var = omtp * omtp * s * s + t_prime * t_prime;
    let shortfall = omtp - k1 * omt / t;
    let gap = shortfall * shortfall * post_var;
    let cps_var = target_var - gap;

    let model = DataModel::diagonal_gaussian(vec![0.0], vec![s * s])?;
    let mut scratch = model.scratch();
    let sigma_t = denom.sqrt();
    let mut mean = [0.0];
    let mut out = [0.0];
    let mut acc = 0.0;
    let mut acc_sq = 0.0;
    for i in 0..n_samples {
        let mut stream = DrawStream::new(seed, i as u64, 0, lane::PROBE);
        let z = [sigma_t * stream.normal()];
        model.posterior_mean_into(&z, t, &mut scratch, &mut mean)?;
        let w = [stream.normal()];
        cps_transition(&z, &ctx, &mean, split, &w, &mut out)?;
        acc += out[0];
        acc_sq += out[0] * out[0];
    }
    let n = n_samples as f64;
    let m = acc / n;
    let var = (acc_sq - n * m * m) / (n - 1.0);
    Ok(ContractionReport {
        split,
        s,
        t,
        t_prime,
        k1,
        k2,
        target_var,
        cps_var,
        gap,
        mc_gap: target_var - var,
        mc_stderr: var * (2.0 / (n - 1.0)).sqrt(),
    })
}

/// Max-entry residual of the identity grad_z m_t(z) = ((1-t)/t^2) Cov(z0|z_t),
/// with the Jacobian taken by central finite differences of step h.
pub fn jacobian_identity_residual(model: &DataModel, z: &[f64], t: f64, h: f64) -> Result<f64> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Domain {
            op: "jacobian_identity_residual",
            name: "h",
            value: h,
            domain: "(0, inf)",
        });
    }
    let d = model.dim();
    let stats = model.posterior(z, t)?;
    let scale = (1.0 - t) / (t * t);
    let mut scratch = model.scratch();
    let mut probe = z.to_vec();
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    let mut max_residual: f64 = 0.0;
    for j in 0..d {
        probe[j] = z[j] + h;
        model.posterior_mean_into(&probe, t, &mut scratch, &mut plus)?;
        probe[j] = z[j] - h;
        model.posterior_mean_into(&probe, t, &mut scratch, &mut minus)?;
        probe[j] = z[j];
        for i in 0..d {
            let fd = (plus[i] - minus[i]) / (2.0 * h);
            let analytic = scale * stats.cov.entry(i, j);
            max_residual = max_residual.max((fd - analytic).abs());
        }
    }
    Ok(max_residual)
}

/// Deterministic pieces of the renoising map from t' up to t: the carried
/// scale (1-t)/(1-t') and the fresh-noise std sqrt(t^2 - ((1-t)t'/(1-t'))^2).
pub fn renoise_coeffs(t_prime: f64, t: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&t_prime) || !t_prime.is_finite() {
        return Err(Error::Domain {
            op: "renoise",
            name: "t_prime",
            value: t_prime,
            domain: "[0, 1)",
        });
    }
    if !(t >= t_prime && t <= 1.0) || !t.is_finite() {
        return Err(Error::invalid(
            "renoise",
            format!("need t' <= t <= 1, got t' = {t_prime}, t = {t}"),
        ));
    }
    let scale = (1.0 - t) / (1.0 - t_prime);
    let carried = scale * t_prime;
    let fresh = (t * t - carried * carried).max(0.0).sqrt();
    Ok((scale, fresh))
}

/// Map a latent with marginal coefficients (1 - t', t') to one with
/// coefficients (1 - t, t): z_tilde = scale * z + fresh * xi. A zero-length
/// move (t = t') is the identity with no fresh noise.
pub fn renoise(z_tp: &[f64], t_prime: f64, t: f64, xi: &[f64], out: &mut [f64]) -> Result<()> {
    let (scale, fresh) = renoise_coeffs(t_prime, t)?;
    if xi.len() != z_tp.len() || out.len() != z_tp.len() {
        return Err(Error::Dim {
            op: "renoise",
            expected: z_tp.len(),
            got: xi.len().max(out.len()),
        });
    }
    for i in 0..z_tp.len() {
        out[i] = scale * z_tp[i] + fresh * xi[i];
    }
    Ok(())
}

/// Summary of posterior-mean movement under renoising.
#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub t_prime: f64,
    pub t: f64,
    pub n_probes: usize,
    /// Mean over probes of |m_t(z_tilde) - m_t'(z')| / |z_tilde - z'|.
    /// Integrable for d >= 2; in one dimension the small-denominator tail
    /// makes this statistic diverge, so prefer `rms_ratio` there.
    pub mean_ratio: f64,
    pub std_ratio: f64,
    /// sqrt(sum |m_t(z_tilde) - m_t'(z')|^2 / sum |z_tilde - z'|^2): the
    /// ratio of RMS movements, robust to near-coincident probe pairs.
    pub rms_ratio: f64,
}

/// Draw z' from the forward marginal at t', renoise it up to t, and measure
/// how far the posterior mean moves relative to how far the latent moves.
pub fn stability_ratio(
    model: &DataModel,
    t_prime: f64,
    t: f64,
    n_probes: usize,
    seed: u64,
) -> Result<StabilityReport> {
    if n_probes == 0 {
        return Err(Error::invalid("stability_ratio", "need at least one probe"));
    }
    if t_prime <= 0.0 {
        return Err(Error::Domain {
            op: "stability_ratio",
            name: "t_prime",
            value: t_prime,
            domain: "(0, 1)",
        });
    }
    let d = model.dim();
    let mut scratch = model.scratch();
    let mut m_lo = vec![0.0; d];
    let mut m_hi = vec![0.0; d];
    let mut xi = vec![0.0; d];
    let mut z_hi = vec![0.0; d];
    let mut acc = 0.0;
    let mut acc_sq = 0.0;
    let mut num_sq_total = 0.0;
    let mut den_sq_total = 0.0;
    for p in 0..n_probes {
        let mut stream = DrawStream::new(seed, p as u64, 0, lane::PROBE);
        let fwd = model.forward_marginal(t_prime, &mut stream)?;
        model.posterior_mean_into(&fwd.z_t, t_prime, &mut scratch, &mut m_lo)?;
        stream.fill_normal(&mut xi);
        renoise(&fwd.z_t, t_prime, t, &xi, &mut z_hi)?;
        model.posterior_mean_into(&z_hi, t, &mut scratch, &mut m_hi)?;
        let num_sq: f64 = m_hi
            .iter()
            .zip(&m_lo)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let den_sq: f64 = z_hi
            .iter()
            .zip(&fwd.z_t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        num_sq_total += num_sq;
        den_sq_total += den_sq;
        // A zero numerator (constant posterior mean) is a zero ratio even in
        // the measure-zero event that the latent did not move.
        let ratio = if num_sq == 0.0 {
            0.0
        } else {
            (num_sq / den_sq).sqrt()
        };
        acc += ratio;
        acc_sq += ratio * ratio;
    }
    let n = n_probes as f64;
    let mean_ratio = acc / n;
    let var = if n_probes > 1 {
        ((acc_sq - n * mean_ratio * mean_ratio) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    let rms_ratio = if num_sq_total == 0.0 {
        0.0
    } else {
        (num_sq_total / den_sq_total).sqrt()
    };
    Ok(StabilityReport {
        t_prime,
        t,
        n_probes,
        mean_ratio,
        std_ratio: var.sqrt(),
        rms_ratio,
    })
}

/// Endpoint distance between a fine reference integrator and a frozen-mean
/// integrator driven by the same Brownian increments over one macro step.
#[derive(Debug, Clone)]
pub struct CouplingReport {
    pub t: f64,
    pub delta: f64,
    pub m_substeps: usize,
    pub n_paths: usize,
    /// Mean over paths of |Z_fine - Z_frozen| at t - delta.
    pub mean_error: f64,
    /// Mean over paths of |Z_fine(M) - Z_fine(2M)|: how converged the
    /// reference itself is on the same path.
    pub refine_gap: f64,
}

/// Synchronously couple the re-evaluating and frozen-mean integrators over
/// [t - delta, t].
///
/// Each path draws its start point from the exact forward marginal at t and
/// a single Brownian path at resolution 2M; the M-substep integrators
/// consume the pairwise-aggregated increments (v_{2k} + v_{2k+1}) / sqrt(2),
/// so the 2M-substep reference rides the identical path and their gap
/// isolates discretization error.
#[allow(clippy::too_many_arguments)]
pub fn coupling_error(
    model: &DataModel,
    schedule: &ExplorationSchedule,
    clamp: ClampPolicy,
    t: f64,
    delta: f64,
    m_substeps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<CouplingReport> {
    if n_paths == 0 {
        return Err(Error::invalid("coupling_error", "need at least one path"));
    }
    if !(delta > 0.0 && t - delta > 0.0 && t <= 1.0) {
        return Err(Error::invalid(
            "coupling_error",
            format!("window [t - delta, t] = [{}, {t}] must sit inside (0, 1]", t - delta),
        ));
    }
    let d = model.dim();
    let t_prime = t - delta;
    let mut scratch = model.scratch();
    let mut frozen_mean = vec![0.0; d];
    let mut acc_err = 0.0;
    let mut acc_refine = 0.0;
    for p in 0..n_paths {
        let mut init = DrawStream::new(seed, p as u64, 0, lane::PROBE);
        let fwd = model.forward_marginal(t, &mut init)?;
        let z = &fwd.z_t;
        let fine2 = DrawStream::new(seed, p as u64, 0, lane::REFERENCE).normal_vec(2 * m_substeps * d);
        let mut coarse = vec![0.0; m_substeps * d];
        for k in 0..m_substeps {
            for i in 0..d {
                coarse[k * d + i] =
                    (fine2[2 * k * d + i] + fine2[(2 * k + 1) * d + i]) / std::f64::consts::SQRT_2;
            }
        }
        let first_ctx = step_context(schedule, t, t - delta / m_substeps as f64, clamp)?;
        model.posterior_mean_into(z, first_ctx.t_eval, &mut scratch, &mut frozen_mean)?;
        let fine = fine_reference_step(model, schedule, clamp, z, t, t_prime, m_substeps, &coarse)?;
        let frozen = fine_frozen_step(
            model,
            schedule,
            clamp,
            z,
            t,
            t_prime,
            m_substeps,
            &coarse,
            &frozen_mean,
        )?;
        let refined =
            fine_reference_step(model, schedule, clamp, z, t, t_prime, 2 * m_substeps, &fine2)?;
        let dist = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        acc_err += dist(&fine, &frozen);
        acc_refine += dist(&fine, &refined);
    }
    Ok(CouplingReport {
        t,
        delta,
        m_substeps,
        n_paths,
        mean_error: acc_err / n_paths as f64,
        refine_gap: acc_refine / n_paths as f64,
    })
}

/// The 12-anchor time grid used by the stability experiment: uniform in
/// logSNR over [lo, hi], mapped back through t = 1 / (1 + e^{lambda/2}).
pub fn logsnr_anchor_times(lo: f64, hi: f64, n_anchors: usize) -> Result<Vec<f64>> {
    if n_anchors < 2 {
        return Err(Error::invalid("logsnr_anchor_times", "need at least two anchors"));
    }
    if !(lo < hi) {
        return Err(Error::invalid(
            "logsnr_anchor_times",
            format!("need lo < hi, got [{lo}, {hi}]"),
        ));
    }
    Ok((0..n_anchors)
        .map(|i| {
            let lambda = lo + (hi - lo) * i as f64 / (n_anchors - 1) as f64;
            1.0 / (1.0 + (lambda / 2.0).exp())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::logsnr;
    use approx::assert_relative_eq;

    #[test]
    fn logsnr_terms_reference_values() {
        let terms = logsnr_terms(0.5, 0.01, 1.0).unwrap();
        assert_relative_eq!(terms.vel, 0.08, max_relative = 1e-14);
        assert_relative_eq!(terms.sco, 0.04, max_relative = 1e-14);
        assert_relative_eq!(terms.sto, -0.04, max_relative = 1e-14);
        assert_eq!(terms.sco + terms.sto, 0.0);
    }

    #[test]
    fn logsnr_terms_zero_eps() {
        let terms = logsnr_terms(0.3, 0.005, 0.0).unwrap();
        assert!(terms.vel > 0.0);
        assert_eq!(terms.sco, 0.0);
        assert_eq!(terms.sto + terms.sco, 0.0);
    }

    #[test]
    fn score_to_velocity_ratio_constant_under_logsnr_schedule() {
        // eps from the logSNR schedule with eta = sqrt(2) makes sco/vel = 1.
        let sched = ExplorationSchedule::log_snr(2.0f64.sqrt()).unwrap();
        for &t in &[0.1, 0.3, 0.5, 0.7, 0.9] {
            let eps = sched.eps_at(t).unwrap();
            let terms = logsnr_terms(t, 1e-4, eps).unwrap();
            assert_relative_eq!(terms.sco / terms.vel, 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn exact_increments_reference_values() {
        let (vel, sto) = logsnr_exact_increments(0.5, 0.01, 1.0).unwrap();
        assert_relative_eq!(vel, 2.0 * (0.51f64 / 0.49).ln(), max_relative = 1e-13);
        assert_relative_eq!(vel, 0.08001067, max_relative = 1e-6);
        assert_relative_eq!(sto, (0.25f64 / 0.26).ln(), max_relative = 1e-13);
        assert_relative_eq!(sto, -0.03922071, max_relative = 1e-6);
        // The velocity increment is the full logSNR change along the path.
        assert_relative_eq!(vel, logsnr(0.49).unwrap() - logsnr(0.5).unwrap(), max_relative = 1e-12);
    }

    #[test]
    fn residual_ratios_are_second_order() {
        let dts = [1e-2, 5e-3, 2.5e-3];
        for &t in &[0.3, 0.45, 0.6, 0.75, 0.9] {
            for &eps in &[0.3, 0.7, 1.5] {
                let (vel_r, sto_r) = logsnr_residual_ratios(t, eps, &dts).unwrap();
                for r in vel_r.iter().chain(&sto_r) {
                    assert!((3.5..=4.5).contains(r), "t={t} eps={eps} ratio {r}");
                }
            }
        }
    }

    #[test]
    fn lemma_window_is_checked() {
        assert!(logsnr_terms(0.01, 0.02, 1.0).is_err());
        assert!(logsnr_terms(1.0, 0.1, 1.0).is_err());
        assert!(logsnr_terms(0.5, 0.0, 1.0).is_err());
        assert!(logsnr_exact_increments(0.5, 0.5, 1.0).is_err());
    }

    #[test]
    fn euler_coeffs_reference_case() {
        let c = pointmass_euler_coeffs(0.5, 0.4, 1.5).unwrap();
        assert_relative_eq!(c.signal, 0.6, max_relative = 1e-14);
        assert_relative_eq!(c.eps_coeff, 0.175, max_relative = 1e-12);
        assert_relative_eq!(c.fresh, 0.4743416490252569, max_relative = 1e-12);
        assert_relative_eq!(c.total_noise, 0.255625f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(c.total_noise, 0.505594, max_relative = 1e-6);
        assert!(c.total_noise > 0.4);
    }

    #[test]
    fn euler_coeffs_zero_eps_is_exact_ode() {
        let c = pointmass_euler_coeffs(0.5, 0.4, 0.0).unwrap();
        assert_eq!(
            (c.signal, c.eps_coeff, c.fresh, c.total_noise),
            (0.6, 0.4, 0.0, 0.4)
        );
    }

    #[test]
    fn euler_total_noise_monotone_in_eps() {
        let mut last = 0.0;
        for &eps in &[0.0, 0.3, 0.7, 1.5, 3.0] {
            let c = pointmass_euler_coeffs(0.5, 0.4, eps).unwrap();
            assert!(c.total_noise >= last);
            last = c.total_noise;
        }
    }

    #[test]
    fn clamped_coeffs_match_plain_when_clamp_inactive() {
        let sched = ExplorationSchedule::log_snr(0.7).unwrap();
        let plain = pointmass_euler_coeffs(0.5, 0.4, sched.eps_at(0.5).unwrap()).unwrap();
        let clamped =
            pointmass_euler_coeffs_clamped(&sched, 0.5, 0.4, ClampPolicy::default()).unwrap();
        assert_relative_eq!(plain.eps_coeff, clamped.eps_coeff, max_relative = 1e-12);
        assert_relative_eq!(plain.fresh, clamped.fresh, max_relative = 1e-12);
        // At t = 1 the clamped form is finite even though the schedule diverges.
        let boundary =
            pointmass_euler_coeffs_clamped(&sched, 1.0, 0.9, ClampPolicy::default()).unwrap();
        assert!(boundary.total_noise.is_finite());
        assert!(boundary.total_noise > 0.9);
    }

    #[test]
    fn node_laws_rebuild_rules_are_exact() {
        let sched = ExplorationSchedule::log_snr(1.5).unwrap();
        let grid = TimeGrid::uniform(10).unwrap();
        for rule in [
            StepRule::FrozenMean,
            StepRule::Cps {
                split: SplitPolicy::Local,
            },
            StepRule::Cps {
                split: SplitPolicy::EulerEnergy,
            },
        ] {
            let laws = pointmass_node_laws(&sched, &grid, rule, ClampPolicy::default()).unwrap();
            for law in &laws {
                assert_relative_eq!(law.signal, 1.0 - law.t, epsilon = 1e-12);
                assert_relative_eq!(law.noise_std, law.t, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn node_laws_euler_accumulates_excess_noise() {
        let sched = ExplorationSchedule::log_snr(0.7).unwrap();
        let grid = TimeGrid::uniform(10).unwrap();
        let laws =
            pointmass_node_laws(&sched, &grid, StepRule::Euler, ClampPolicy::default()).unwrap();
        // Residual noise at t = 0 strictly positive; every interior node
        // carries more noise than the target t.
        assert!(laws[0].noise_std > 0.0);
        for law in laws.iter().take(10).skip(1) {
            assert!(law.noise_std > law.t, "t={} std={}", law.t, law.noise_std);
        }
    }

    #[test]
    fn gaussian_variances_degenerate_to_point_mass_law() {
        // At s^2 = 0 the prior is a point mass at the origin and the node
        // variances must equal the point-mass noise recursion bit for bit.
        let sched = ExplorationSchedule::log_snr(0.9).unwrap();
        let grid = TimeGrid::uniform(7).unwrap();
        for rule in [
            StepRule::Euler,
            StepRule::FrozenMean,
            StepRule::Cps {
                split: SplitPolicy::EulerEnergy,
            },
        ] {
            let vars =
                gaussian_node_variances(0.0, &sched, &grid, rule, ClampPolicy::default()).unwrap();
            let laws = pointmass_node_laws(&sched, &grid, rule, ClampPolicy::default()).unwrap();
            for (v, law) in vars.iter().zip(&laws) {
                assert_eq!(v.sqrt().to_bits(), law.noise_std.to_bits());
            }
        }
    }

    #[test]
    fn gaussian_variances_show_mean_rebuild_contraction() {
        // On a unit Gaussian the frozen-mean rollout undershoots the target
        // variance at moderate step counts and approaches it as the grid
        // refines; the first-order rule stays near the target throughout.
        let sched = ExplorationSchedule::log_snr(1.5).unwrap();
        let clamp = ClampPolicy::default();
        let at = |rule: StepRule, n: usize| {
            let grid = TimeGrid::uniform(n).unwrap();
            gaussian_node_variances(1.0, &sched, &grid, rule, clamp).unwrap()[0]
        };
        let frozen30 = at(StepRule::FrozenMean, 30);
        assert_relative_eq!(frozen30, 0.845467, max_relative = 1e-5);
        assert!(at(StepRule::FrozenMean, 320) > 0.98);
        let cps = StepRule::Cps {
            split: SplitPolicy::EulerEnergy,
        };
        assert!(at(cps, 30) < frozen30);
        assert!((at(StepRule::Euler, 30) - 1.0).abs() < 0.01);
    }

    #[test]
    fn gaussian_variances_match_rollout_moments() {
        let sched = ExplorationSchedule::log_snr(1.5).unwrap();
        let grid = TimeGrid::uniform(10).unwrap();
        let model = DataModel::diagonal_gaussian(vec![0.0], vec![1.0]).unwrap();
        let predicted =
            gaussian_node_variances(1.0, &sched, &grid, StepRule::FrozenMean, ClampPolicy::default())
                .unwrap()[0];
        let n = 20_000;
        let cfg = crate::sampler::RolloutConfig::new(grid, n, 55);
        let out = crate::sampler::rollout(&model, &sched, StepRule::FrozenMean, &cfg).unwrap();
        let mean: f64 = out.finals.data().iter().sum::<f64>() / n as f64;
        let var: f64 = out
            .finals
            .data()
            .iter()
            .map(|z| (z - mean) * (z - mean))
            .sum::<f64>()
            / (n as f64 - 1.0);
        let se = predicted * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!(
            (var - predicted).abs() <= 3.0 * se,
            "var {var} predicted {predicted} se {se}"
        );
        // The deficit against the data law is real, not Monte-Carlo noise.
        assert!(var < 0.75, "var {var}");
    }

    #[test]
    fn contraction_local_split_reference() {
        let sched = ExplorationSchedule::log_snr(0.7).unwrap();
        let r = cps_contraction_gaussian(
            1.0,
            &sched,
            0.5,
            0.5,
            SplitPolicy::Local,
            ClampPolicy::default(),
            40_000,
            7,
        )
        .unwrap();
        assert_relative_eq!(r.gap, 0.125, max_relative = 1e-12);
        assert_relative_eq!(r.target_var, 0.5, max_relative = 1e-12);
        assert!(
            (r.mc_gap - r.gap).abs() <= 3.0 * r.mc_stderr,
            "mc_gap {} vs gap {} (3se = {})",
            r.mc_gap,
            r.gap,
            3.0 * r.mc_stderr
        );
    }

    #[test]
    fn contraction_gap_nonnegative_on_grid() {
        let sched = ExplorationSchedule::log_snr(2.0f64.sqrt()).unwrap();
        for &t in &[0.2, 0.35, 0.5, 0.65, 0.8] {
            for &f in &[0.2, 0.4, 0.6, 0.8, 1.0] {
                for split in SplitPolicy::ALL {
                    let r = cps_contraction_gaussian(
                        1.0,
                        &sched,
                        t,
                        f * t,
                        split,
                        ClampPolicy::default(),
                        2,
                        1,
                    )
                    .unwrap();
                    assert!(r.gap >= 0.0, "negative gap at t={t}, f={f}, {split}");
                }
            }
        }
    }

    #[test]
    fn contraction_vanishes_near_point_mass() {
        let sched = ExplorationSchedule::log_snr(0.7).unwrap();
        for split in SplitPolicy::ALL {
            let r = cps_contraction_gaussian(
                0.01,
                &sched,
                0.5,
                0.4,
                split,
                ClampPolicy::default(),
                2,
                1,
            )
            .unwrap();
            assert!(r.gap <= 1e-3, "gap {} for {split}", r.gap);
        }
    }

    #[test]
    fn matched_split_contraction_is_second_order_in_dt() {
        // gap ~ dt^2 for the matched split: gap/dt^2 stays bounded as dt -> 0.
        let sched = ExplorationSchedule::log_snr(2.0f64.sqrt()).unwrap();
        let mut scaled = Vec::new();
        for &dt in &[0.1, 0.05, 0.025] {
            let r = cps_contraction_gaussian(
                1.0,
                &sched,
                0.5,
                0.5 - dt,
                SplitPolicy::Matched,
                ClampPolicy::default(),
                2,
                1,
            )
            .unwrap();
            scaled.push(r.gap / (dt * dt));
        }
        for pair in scaled.windows(2) {
            assert!((pair[0] / pair[1] - 1.0).abs() < 0.5, "scaled gaps {scaled:?}");
        }
    }

    #[test]
    fn jacobian_identity_gaussian() {
        let model = DataModel::diagonal_gaussian(vec![0.0], vec![1.0]).unwrap();
        let res = jacobian_identity_residual(&model, &[0.7], 0.5, 1e-4).unwrap();
        assert!(res <= 1e-6, "residual {res}");
    }

    #[test]
    fn jacobian_identity_point_mass_is_zero() {
        let model = DataModel::point_mass(vec![0.3, -0.4]).unwrap();
        let res = jacobian_identity_residual(&model, &[0.1, 0.1], 0.5, 1e-4).unwrap();
        assert_eq!(res, 0.0);
    }

    #[test]
    fn jacobian_identity_double_ring() {
        let model = crate::oracle::make_double_ring((0.5, 1.0), 128).unwrap();
        let mut stream = DrawStream::new(3, 0, 0, lane::PROBE);
        for p in 0..20 {
            let t = 0.25 + 0.7 * stream.uniform();
            let fwd = model.forward_marginal(t, &mut stream).unwrap();
            let res = jacobian_identity_residual(&model, &fwd.z_t, t, 1e-4).unwrap();
            assert!(res <= 1e-5, "probe {p}: residual {res} at t={t}");
        }
    }

    #[test]
    fn renoise_reference_coefficients() {
        let (scale, fresh) = renoise_coeffs(0.4, 0.6).unwrap();
        assert_relative_eq!(scale, 2.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(fresh, 0.5374838498865699, max_relative = 1e-12);
        // carried^2 + fresh^2 = t^2
        let carried = scale * 0.4;
        assert_relative_eq!(carried * carried + fresh * fresh, 0.36, max_relative = 1e-12);
    }

    #[test]
    fn renoise_identity_and_domain() {
        let (scale, fresh) = renoise_coeffs(0.5, 0.5).unwrap();
        assert_eq!((scale, fresh), (1.0, 0.0));
        assert!(renoise_coeffs(0.6, 0.5).is_err());
        assert!(renoise_coeffs(1.0, 1.0).is_err());
        let mut out = [0.0; 2];
        renoise(&[1.0, 2.0], 0.5, 0.5, &[9.0, 9.0], &mut out).unwrap();
        assert_eq!(out, [1.0, 2.0]);
    }

    #[test]
    fn renoise_preserves_marginal_coefficients_empirically() {
        // Draw the exact marginal at t' on a unit Gaussian, renoise to t, and
        // regress against z0: slope -> 1 - t, residual std -> t.
        let model = DataModel::diagonal_gaussian(vec![0.0], vec![1.0]).unwrap();
        let (t_prime, t) = (0.4, 0.6);
        let n = 40_000;
        let mut sum_zz = 0.0;
        let mut sum_z0sq = 0.0;
        let mut tilde = vec![0.0; n];
        let mut z0s = vec![0.0; n];
        for i in 0..n {
            let mut stream = DrawStream::new(11, i as u64, 0, lane::PROBE);
            let fwd = model.forward_marginal(t_prime, &mut stream).unwrap();
            let xi = [stream.normal()];
            let mut out = [0.0];
            renoise(&fwd.z_t, t_prime, t, &xi, &mut out).unwrap();
            sum_zz += out[0] * fwd.z0[0];
            sum_z0sq += fwd.z0[0] * fwd.z0[0];
            tilde[i] = out[0];
            z0s[i] = fwd.z0[0];
        }
        let slope = sum_zz / sum_z0sq;
        assert_relative_eq!(slope, 1.0 - t, max_relative = 0.02);
        let resid_var = tilde
            .iter()
            .zip(&z0s)
            .map(|(a, b)| (a - slope * b) * (a - slope * b))
            .sum::<f64>()
            / (n as f64 - 1.0);
        assert_relative_eq!(resid_var.sqrt(), t, max_relative = 0.02);
    }

    #[test]
    fn stability_ratio_point_mass_is_zero() {
        let model = DataModel::point_mass(vec![0.5, 0.5]).unwrap();
        let r = stability_ratio(&model, 0.4, 0.6, 200, 5).unwrap();
        assert_eq!(r.mean_ratio, 0.0);
        assert_eq!(r.std_ratio, 0.0);
        assert_eq!(r.rms_ratio, 0.0);
    }

    #[test]
    fn stability_ratio_gaussian_bounded_by_posterior_slope() {
        // For a linear posterior mean m_t(z) = c_t z the ratio is controlled
        // by the largest slope along the time segment; the slope at the
        // lower time exceeds the one at the higher time.
        let model = DataModel::diagonal_gaussian(vec![0.0], vec![1.0]).unwrap();
        let r = stability_ratio(&model, 0.4, 0.6, 4_000, 5).unwrap();
        let c_lo: f64 = 0.6 / (0.36 + 0.16); // slope at t' = 0.4
        let c_hi = 0.4 / (0.16 + 0.36); // slope at t = 0.6
        let bound = c_lo.max(c_hi);
        assert!(
            r.rms_ratio <= 1.05 * bound,
            "rms ratio {} vs segment bound {}",
            r.rms_ratio,
            bound
        );
        assert!(r.rms_ratio > 0.5 * c_hi);
    }

    #[test]
    fn coupling_error_point_mass_is_exactly_zero() {
        let model = DataModel::point_mass(vec![0.2]).unwrap();
        let sched = ExplorationSchedule::log_snr(2.0f64.sqrt()).unwrap();
        let r = coupling_error(
            &model,
            &sched,
            ClampPolicy::default(),
            0.5,
            0.1,
            16,
            50,
            9,
        )
        .unwrap();
        assert_eq!(r.mean_error, 0.0);
    }

    #[test]
    fn coupling_error_shrinks_with_delta() {
        let model = DataModel::diagonal_gaussian(vec![0.0], vec![1.0]).unwrap();
        let sched = ExplorationSchedule::log_snr(2.0f64.sqrt()).unwrap();
        let clamp = ClampPolicy::default();
        let e1 = coupling_error(&model, &sched, clamp, 0.5, 0.1, 32, 800, 13).unwrap();
        let e2 = coupling_error(&model, &sched, clamp, 0.5, 0.05, 32, 800, 13).unwrap();
        assert!(
            e2.mean_error <= 0.7 * e1.mean_error,
            "errors {} -> {}",
            e1.mean_error,
            e2.mean_error
        );
        assert!(e1.refine_gap < 0.2 * e1.mean_error);
    }

    #[test]
    fn anchor_times_span_the_logsnr_window() {
        let ts = logsnr_anchor_times(-5.0, 1.5, 12).unwrap();
        assert_eq!(ts.len(), 12);
        assert_relative_eq!(ts[0], 1.0 / (1.0 + (-2.5f64).exp()), max_relative = 1e-14);
        assert_relative_eq!(ts[11], 1.0 / (1.0 + 0.75f64.exp()), max_relative = 1e-14);
        for pair in ts.windows(2) {
            assert!(pair[0] > pair[1], "times must descend");
        }
        // Round trip through the logSNR map.
        for &t in &ts {
            let lambda = logsnr(t).unwrap();
            assert_relative_eq!(1.0 / (1.0 + (lambda / 2.0).exp()), t, max_relative = 1e-12);
        }
    }
}
