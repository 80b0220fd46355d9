//! Closed-form identity suites.
//!
//! Five measurement families, each against an exact target:
//!
//! - logSNR decomposition: the score and injection terms cancel exactly, the
//!   (exact - first order) residuals shrink fourfold per step-size halving,
//!   and under the logSNR schedule the score/velocity ratio is eta^2/2 at
//!   every time.
//! - Jacobian identity: grad_z m_t(z) = ((1-t)/t^2) Cov(z0 | z_t), probed by
//!   central finite differences on Gaussian and double-ring oracles.
//! - Renoising: mapping a latent from t' up to t preserves the marginal
//!   coefficients (signal 1-t, noise std t) exactly.
//! - Stability: renoising moves the posterior mean less than it moves the
//!   latent (ratio below one on the double-ring; exactly zero on point-mass
//!   data, whose posterior mean is constant).
//! - Coupling: a frozen-mean integrator driven by the Brownian path of a
//!   fine re-evaluating reference drifts away at a superlinear rate in the
//!   step size, so halving the macro step cuts the endpoint error well below
//!   half; on point-mass data the two integrators coincide exactly.

use crate::analysis::{
    coupling_error, jacobian_identity_residual, logsnr_anchor_times, logsnr_exact_increments,
    logsnr_residual_ratios, logsnr_terms, stability_ratio,
};
use crate::config::Settings;
use crate::error::{Error, Result};
use crate::oracle::{make_double_ring, DataModel};
use crate::report::{Check, Reporter, Summary};
use crate::rng::{lane, DrawStream};
use crate::schedule::{ClampPolicy, ExplorationSchedule};

use super::rel_err;

pub fn run_identities(mut settings: Settings) -> Result<Summary> {
    let seed = settings.take_u64("seed", 41)?;
    let out = settings.take_string("out", "runs/identities");
    let eta = settings.take_f64("eta", 0.7)?;
    let richardson_t = settings.take_f64_list("richardson_t", &[0.3, 0.45, 0.6, 0.75, 0.9])?;
    let richardson_eps = settings.take_f64_list("richardson_eps", &[0.3, 0.7, 1.5])?;
    let richardson_dts = settings.take_f64_list("richardson_dts", &[1e-2, 5e-3, 2.5e-3])?;
    let jacobian_probes = settings.take_usize("jacobian_probes", 50)?;
    let jacobian_h = settings.take_f64("jacobian_h", 1e-4)?;
    let jacobian_t_lo = settings.take_f64("jacobian_t_lo", 0.25)?;
    let jacobian_t_hi = settings.take_f64("jacobian_t_hi", 0.95)?;
    let renoise_pairs = settings.take_pair_list("renoise_pairs", &[(0.2, 0.4), (0.4, 0.6)])?;
    let renoise_probes = settings.take_usize("renoise_probes", 100_000)?;
    let renoise_s = settings.take_f64("renoise_s", 1.0)?;
    let lambda_lo = settings.take_f64("lambda_lo", -5.0)?;
    let lambda_hi = settings.take_f64("lambda_hi", 1.5)?;
    let anchors = settings.take_usize("anchors", 12)?;
    let stability_probes = settings.take_usize("stability_probes", 1000)?;
    let coupling_t = settings.take_f64("coupling_t", 0.5)?;
    let coupling_s = settings.take_f64("coupling_s", 1.0)?;
    let coupling_eta = settings.take_f64("coupling_eta", std::f64::consts::SQRT_2)?;
    let coupling_substeps = settings.take_usize("coupling_substeps", 64)?;
    let coupling_paths = settings.take_usize("coupling_paths", 10_000)?;
    let coupling_deltas = settings.take_f64_list("coupling_deltas", &[0.1, 0.05, 0.025])?;
    let ring_points = settings.take_usize("ring_points", 512)?;
    let radii = settings.take_f64_list("radii", &[0.5, 1.0])?;
    let echo = settings.finish()?;

    if radii.len() != 2 {
        return Err(Error::Config(format!(
            "radii must list exactly two values, got {}",
            radii.len()
        )));
    }
    if richardson_dts.len() < 2 {
        return Err(Error::Config("richardson_dts needs at least two step sizes".to_string()));
    }
    if !(renoise_s > 0.0 && coupling_s > 0.0) {
        return Err(Error::Config("renoise_s and coupling_s must be positive".to_string()));
    }
    let schedule = ExplorationSchedule::log_snr(eta)?;
    let clamp = ClampPolicy::default();
    let ring = make_double_ring((radii[0], radii[1]), ring_points)?;

    let reporter = Reporter::create(&out)?;
    reporter.write_config_echo(&echo)?;
    let mut summary = Summary::new("identities", seed, echo);

    logsnr_suite(
        &reporter,
        &mut summary,
        &schedule,
        &richardson_t,
        &richardson_eps,
        &richardson_dts,
    )?;
    jacobian_suite(
        &reporter,
        &mut summary,
        &ring,
        jacobian_probes,
        jacobian_h,
        (jacobian_t_lo, jacobian_t_hi),
        seed,
    )?;
    renoise_suite(&reporter, &mut summary, renoise_s, &renoise_pairs, renoise_probes, seed)?;
    stability_suite(
        &reporter,
        &mut summary,
        &ring,
        (lambda_lo, lambda_hi),
        anchors,
        stability_probes,
        seed,
    )?;
    coupling_suite(
        &reporter,
        &mut summary,
        coupling_s,
        coupling_eta,
        clamp,
        coupling_t,
        coupling_substeps,
        coupling_paths,
        &coupling_deltas,
        seed,
    )?;

    reporter.write_summary(&summary)?;
    Ok(summary)
}

/// Exact-vs-first-order logSNR terms, Richardson ratios, and the schedule's
/// score/velocity ratio.
fn logsnr_suite(
    reporter: &Reporter,
    summary: &mut Summary,
    schedule: &ExplorationSchedule,
    ts: &[f64],
    epss: &[f64],
    dts: &[f64],
) -> Result<()> {
    let mut terms_csv = reporter.csv(
        "identities_logsnr.csv",
        &["t", "eps", "dt", "vel", "sco", "sto", "vel_exact", "sto_exact"],
    )?;
    let mut ratio_csv = reporter.csv(
        "identities_richardson.csv",
        &["t", "eps", "term", "dt_coarse", "dt_fine", "ratio"],
    )?;
    let mut max_cancel = 0.0f64;
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio = f64::NEG_INFINITY;
    for &t in ts {
        for &eps in epss {
            for &dt in dts {
                let terms = logsnr_terms(t, dt, eps)?;
                let (vel_exact, sto_exact) = logsnr_exact_increments(t, dt, eps)?;
                terms_csv.row(&[
                    &t,
                    &eps,
                    &dt,
                    &terms.vel,
                    &terms.sco,
                    &terms.sto,
                    &vel_exact,
                    &sto_exact,
                ])?;
                max_cancel = max_cancel.max((terms.sco + terms.sto).abs());
            }
            let (vel_ratios, sto_ratios) = logsnr_residual_ratios(t, eps, dts)?;
            for (name, ratios) in [("velocity", &vel_ratios), ("stochastic", &sto_ratios)] {
                for (i, &ratio) in ratios.iter().enumerate() {
                    ratio_csv.row(&[&t, &eps, &name, &dts[i], &dts[i + 1], &ratio])?;
                    min_ratio = min_ratio.min(ratio);
                    max_ratio = max_ratio.max(ratio);
                }
            }
        }
    }
    terms_csv.finish()?;
    ratio_csv.finish()?;

    // Score/velocity ratio of the schedule itself; dt cancels in the ratio.
    let mut noise_csv = reporter.csv("identities_noise_ratio.csv", &["t", "eps", "ratio", "target"])?;
    let target = schedule.eta() * schedule.eta() / 2.0;
    let mut max_ratio_dev = 0.0f64;
    for &t in ts {
        let eps = schedule.eps_at(t)?;
        let terms = logsnr_terms(t, dts[0], eps)?;
        let ratio = terms.sco / terms.vel;
        noise_csv.row(&[&t, &eps, &ratio, &target])?;
        max_ratio_dev = max_ratio_dev.max(rel_err(ratio, target));
    }
    noise_csv.finish()?;

    summary.push(Check::at_least("logsnr Richardson ratio min", min_ratio, 3.5, 0.0));
    summary.push(Check::at_most("logsnr Richardson ratio max", max_ratio, 4.5, 0.0));
    summary.push(Check::at_most(
        "logsnr score and injection cancellation max |sco + sto|",
        max_cancel,
        0.0,
        0.0,
    ));
    summary.push(Check::at_most(
        "logsnr-schedule score/velocity ratio max rel dev from eta^2/2",
        max_ratio_dev,
        1e-12,
        0.0,
    ));
    Ok(())
}

/// Central-difference probes of grad_z m = ((1-t)/t^2) Cov(z0|z_t).
fn jacobian_suite(
    reporter: &Reporter,
    summary: &mut Summary,
    ring: &DataModel,
    n_probes: usize,
    h: f64,
    t_range: (f64, f64),
    seed: u64,
) -> Result<()> {
    let gauss = DataModel::diagonal_gaussian(vec![0.25, -0.5], vec![1.0, 0.4])?;
    let mut csv = reporter.csv("identities_jacobian.csv", &["model", "probe", "t", "residual"])?;
    for (name, model) in [("diagonal-gaussian", &gauss), ("double-ring", ring)] {
        let mut max_residual = 0.0f64;
        for p in 0..n_probes {
            let mut stream = DrawStream::new(seed, p as u64, 0, lane::PROBE);
            let t = t_range.0 + (t_range.1 - t_range.0) * stream.uniform();
            let fwd = model.forward_marginal(t, &mut stream)?;
            let residual = jacobian_identity_residual(model, &fwd.z_t, t, h)?;
            csv.row(&[&name, &p, &t, &residual])?;
            max_residual = max_residual.max(residual);
        }
        summary.push(Check::at_most(
            format!("jacobian identity max residual ({name})"),
            max_residual,
            1e-5,
            0.0,
        ));
    }
    csv.finish()?;
    Ok(())
}

/// Renoised latents keep the marginal coefficients (1-t, t).
fn renoise_suite(
    reporter: &Reporter,
    summary: &mut Summary,
    s: f64,
    pairs: &[(f64, f64)],
    n_probes: usize,
    seed: u64,
) -> Result<()> {
    let model = DataModel::diagonal_gaussian(vec![0.0], vec![s * s])?;
    let mut csv = reporter.csv(
        "identities_renoise.csv",
        &["t_prime", "t", "probes", "signal_coeff", "signal_target", "noise_std", "noise_target"],
    )?;
    for (pair_idx, &(t_prime, t)) in pairs.iter().enumerate() {
        if !(t_prime <= t) {
            return Err(Error::Config(format!(
                "renoise_pairs entries must be t_prime:t with t_prime <= t, got {t_prime}:{t}"
            )));
        }
        let mut s_zz = 0.0;
        let mut s_yz = 0.0;
        let mut s_yy = 0.0;
        let mut z_tilde = vec![0.0; 1];
        let mut xi = vec![0.0; 1];
        for i in 0..n_probes {
            let mut stream = DrawStream::new(seed, i as u64, pair_idx as u64, lane::PROBE);
            let fwd = model.forward_marginal(t_prime, &mut stream)?;
            stream.fill_normal(&mut xi);
            crate::analysis::renoise(&fwd.z_t, t_prime, t, &xi, &mut z_tilde)?;
            let (z0, y) = (fwd.z0[0], z_tilde[0]);
            s_zz += z0 * z0;
            s_yz += y * z0;
            s_yy += y * y;
        }
        let coeff = s_yz / s_zz;
        let resid_var = ((s_yy - coeff * coeff * s_zz) / (n_probes as f64 - 1.0)).max(0.0);
        let noise_std = resid_var.sqrt();
        csv.row(&[&t_prime, &t, &n_probes, &coeff, &(1.0 - t), &noise_std, &t])?;
        summary.push(Check::at_most(
            format!("renoise signal coeff rel error (t'={t_prime} -> t={t})"),
            rel_err(coeff, 1.0 - t),
            0.01,
            0.0,
        ));
        summary.push(Check::at_most(
            format!("renoise noise std rel error (t'={t_prime} -> t={t})"),
            rel_err(noise_std, t),
            0.01,
            0.0,
        ));
    }
    csv.finish()?;
    Ok(())
}

/// Posterior-mean movement under renoising along a logSNR ladder.
fn stability_suite(
    reporter: &Reporter,
    summary: &mut Summary,
    ring: &DataModel,
    lambda_range: (f64, f64),
    anchors: usize,
    n_probes: usize,
    seed: u64,
) -> Result<()> {
    let times = logsnr_anchor_times(lambda_range.0, lambda_range.1, anchors)?;
    let point = DataModel::point_mass(vec![1.0, 0.0])?;
    let mut csv = reporter.csv(
        "identities_stability.csv",
        &["model", "t_prime", "t", "probes", "mean_ratio", "std_ratio", "rms_ratio"],
    )?;
    let mut max_ring = 0.0f64;
    let mut max_point = 0.0f64;
    // Times descend along the ladder (lambda ascends); each adjacent pair is
    // renoised from the smaller time back up to the larger one.
    for (name, model, acc) in [
        ("double-ring", ring, &mut max_ring),
        ("point-mass", &point, &mut max_point),
    ] {
        for w in times.windows(2) {
            let (t, t_prime) = (w[0], w[1]);
            let rep = stability_ratio(model, t_prime, t, n_probes, seed)?;
            csv.row(&[
                &name,
                &t_prime,
                &t,
                &n_probes,
                &rep.mean_ratio,
                &rep.std_ratio,
                &rep.rms_ratio,
            ])?;
            *acc = acc.max(rep.mean_ratio);
        }
    }
    csv.finish()?;
    summary.push(Check::at_most(
        "double-ring stability mean ratio max over lambda ladder",
        max_ring,
        1.0,
        0.0,
    ));
    summary.push(Check::at_most(
        "point-mass stability ratio max",
        max_point,
        0.0,
        0.0,
    ));
    Ok(())
}

/// Synchronous coupling of the frozen-mean and re-evaluating integrators.
#[allow(clippy::too_many_arguments)]
fn coupling_suite(
    reporter: &Reporter,
    summary: &mut Summary,
    s: f64,
    eta: f64,
    clamp: ClampPolicy,
    t: f64,
    substeps: usize,
    n_paths: usize,
    deltas: &[f64],
    seed: u64,
) -> Result<()> {
    let schedule = ExplorationSchedule::log_snr(eta)?;
    let gauss = DataModel::diagonal_gaussian(vec![0.0], vec![s * s])?;
    let point = DataModel::point_mass(vec![1.0])?;
    let mut csv = reporter.csv(
        "identities_coupling.csv",
        &["model", "t", "delta", "substeps", "paths", "mean_error", "refine_gap"],
    )?;
    let mut gauss_errors = Vec::with_capacity(deltas.len());
    let mut max_point_error = 0.0f64;
    for (name, model) in [("gaussian", &gauss), ("point-mass", &point)] {
        for &delta in deltas {
            let rep = coupling_error(model, &schedule, clamp, t, delta, substeps, n_paths, seed)?;
            csv.row(&[
                &name,
                &t,
                &delta,
                &substeps,
                &n_paths,
                &rep.mean_error,
                &rep.refine_gap,
            ])?;
            if name == "gaussian" {
                gauss_errors.push((delta, rep.mean_error));
            } else {
                max_point_error = max_point_error.max(rep.mean_error);
            }
        }
    }
    csv.finish()?;
    for w in gauss_errors.windows(2) {
        let ((d_coarse, e_coarse), (d_fine, e_fine)) = (w[0], w[1]);
        // Only assert the halving law for genuinely halved step sizes.
        if (2.0 * d_fine - d_coarse).abs() <= 1e-12 * d_coarse {
            summary.push(Check::at_most(
                format!("coupling error ratio (delta {d_coarse} -> {d_fine})"),
                e_fine / e_coarse,
                0.6,
                0.0,
            ));
        }
    }
    summary.push(Check::at_most(
        "point-mass coupling error max",
        max_point_error,
        0.0,
        0.0,
    ));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_settings(dir: &std::path::Path) -> Settings {
        let mut s = Settings::empty();
        s.set("out", dir.display());
        s.set("jacobian_probes", 8);
        s.set("renoise_probes", 20_000);
        s.set("stability_probes", 200);
        s.set("coupling_paths", 500);
        s.set("ring_points", 64);
        s.set("anchors", 6);
        s
    }

    #[test]
    fn tiny_run_emits_all_suites() {
        let dir = tempfile::tempdir().unwrap();
        let summary = run_identities(tiny_settings(dir.path())).unwrap();
        for name in [
            "identities_logsnr.csv",
            "identities_richardson.csv",
            "identities_noise_ratio.csv",
            "identities_jacobian.csv",
            "identities_renoise.csv",
            "identities_stability.csv",
            "identities_coupling.csv",
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        // 4 logsnr + 2 jacobian + 4 renoise + 2 stability + 2 coupling
        // ratios + 1 point-mass coupling.
        assert_eq!(summary.checks.len(), 15);
    }

    #[test]
    fn exact_identity_checks_pass_in_the_tiny_run() {
        let dir = tempfile::tempdir().unwrap();
        let summary = run_identities(tiny_settings(dir.path())).unwrap();
        for check in &summary.checks {
            let exact = check.name.contains("cancellation")
                || check.name.contains("Richardson")
                || check.name.contains("eta^2/2")
                || check.name.contains("jacobian")
                || check.name.contains("point-mass");
            if exact {
                assert!(check.pass, "{} failed: {:?}", check.name, check);
            }
        }
    }

    #[test]
    fn misordered_renoise_pair_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = tiny_settings(dir.path());
        s.set("renoise_pairs", "0.6:0.4");
        assert!(matches!(run_identities(s), Err(Error::Config(_))));
    }
}
