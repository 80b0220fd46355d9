//! Analytic data models and their posteriors under the interpolation path.
//!
//! For z_t = (1-t) z0 + t eps the conditional law of z0 given z_t is
//! available in closed form for three model families:
//!
//! ```text
//! PointMass z*:        E[z0|z] = z*,  Cov = 0
//! DiagonalGaussian:    per dim, with D = (1-t)^2 s^2 + t^2,
//!                        E[z0|z] = mu + (1-t) s^2 (z - (1-t) mu) / D
//!                        Var     = s^2 t^2 / D
//! DiscreteSupport:     softmax responsibilities
//!                        r_j ~ w_j exp(-|z - (1-t) x_j|^2 / (2 t^2))
//!                        E[z0|z] = sum_j r_j x_j
//!                        Cov     = sum_j r_j (x_j - m)(x_j - m)^T
//! ```
//!
//! Derived fields follow from the same posterior mean m:
//!
//! ```text
//! eps_hat  = (z - (1-t) m) / t
//! score    = ((1-t) m - z) / t^2      (= -eps_hat / t)
//! velocity = (z - m) / t
//! ```
//!
//! The softmax is evaluated with max-subtraction, in the expanded form
//! e_j = log w_j + (1-t) (z . x_j) / t^2 - (1-t)^2 |x_j|^2 / (2 t^2) whose
//! z-only term cancels in the normalization. Terms more than EXP_CUT below
//! the maximum are skipped: with K points the skipped mass is at most
//! K exp(-EXP_CUT), below one ulp of the retained sum for the sizes used
//! here. This keeps the t -> 0 regime (huge negative exponents) both stable
//! and cheap, because only the near-support points survive the cut.
//!
//! The posterior domain is 0 < t <= 1. At t = 1 the latent carries no
//! signal and each formula degrades continuously to the prior moments,
//! which is exactly what the t = 1 rollout node needs.

use crate::error::{Error, Result};
use crate::rng::DrawStream;
use wide::{bytemuck, f64x4, i64x4};

/// Vectorized exp for nonpositive arguments, used only to turn max-shifted
/// log responsibilities into softmax weights.
///
/// Inputs are clamped to [-708, 0], so the power-of-two scaling never leaves
/// the normal range and no overflow/NaN/subnormal handling is needed. The
/// fdlibm-style hi/lo reduction keeps x = d - r ln 2 exact, and the degree-13
/// truncated series has remainder below one ulp on |x| <= ln(2)/2; agreement
/// with the scalar libm exp is a few ulps (verified in tests). This exists
/// because the general-purpose vector exp measured slower than scalar libm
/// calls here, and the libm calls force vector register spills in the
/// accumulation loop.
#[inline]
fn exp4_nonpos(d: f64x4) -> f64x4 {
    const LN2_HI: f64 = 0.693145751953125;
    const LN2_LO: f64 = 1.42860682030941723212e-6;
    const POW2_52: f64 = 4503599627370496.0;
    let d = d.max(f64x4::from(-708.0));
    let r = (d * f64x4::LOG2_E).round_ties_even();
    let x = r.mul_neg_add(f64x4::from(LN2_HI), d);
    let x = r.mul_neg_add(f64x4::from(LN2_LO), x);
    let x2 = x * x;
    let x4 = x2 * x2;
    let x8 = x4 * x4;
    // P(x) = sum_{k<=13} x^k/k! in Estrin form: (a0 + x^4 a1) + x^8 (a2 + x^4 a3).
    let c = f64x4::from;
    let a0 = x
        .mul_add(c(1.0 / 6.0), c(0.5))
        .mul_add(x2, x.mul_add(c(1.0), c(1.0)));
    let a1 = x
        .mul_add(c(1.0 / 5040.0), c(1.0 / 720.0))
        .mul_add(x2, x.mul_add(c(1.0 / 120.0), c(1.0 / 24.0)));
    let a2 = x
        .mul_add(c(1.0 / 39916800.0), c(1.0 / 3628800.0))
        .mul_add(x2, x.mul_add(c(1.0 / 362880.0), c(1.0 / 40320.0)));
    let a3 = x.mul_add(c(1.0 / 6227020800.0), c(1.0 / 479001600.0));
    let p = a3.mul_add(x4, a2).mul_add(x8, a1.mul_add(x4, a0));
    // 2^r via exponent-field insertion; r is in [-1022, 0] after the clamp.
    let bits: i64x4 = bytemuck::cast(r + f64x4::from(1023.0 + POW2_52));
    let scale: f64x4 = bytemuck::cast(bits << 52);
    p * scale
}

/// Exponent window for the discrete-support softmax.
const EXP_CUT: f64 = 45.0;

/// Finite weighted support with flattened storage.
#[derive(Debug, Clone)]
pub struct DiscreteSupport {
    dim: usize,
    /// K x dim, row-major.
    points: Vec<f64>,
    /// Normalized to sum exactly to 1.
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    sq_norms: Vec<f64>,
    /// Column copies of 2-d supports for the vectorized posterior path;
    /// empty in other dimensions.
    col_x: Vec<f64>,
    col_y: Vec<f64>,
}

impl DiscreteSupport {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("DiscreteSupport::new", "empty support"));
        }
        if weights.len() != points.len() {
            return Err(Error::Dim {
                op: "DiscreteSupport::new",
                expected: points.len(),
                got: weights.len(),
            });
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::invalid("DiscreteSupport::new", "zero-dimensional points"));
        }
        let mut flat = Vec::with_capacity(points.len() * dim);
        for p in &points {
            if p.len() != dim {
                return Err(Error::Dim {
                    op: "DiscreteSupport::new",
                    expected: dim,
                    got: p.len(),
                });
            }
            if !p.iter().all(|x| x.is_finite()) {
                return Err(Error::invalid("DiscreteSupport::new", "non-finite point"));
            }
            flat.extend_from_slice(p);
        }
        let total: f64 = weights.iter().sum();
        if !weights.iter().all(|w| w.is_finite() && *w >= 0.0) || total <= 0.0 {
            return Err(Error::invalid(
                "DiscreteSupport::new",
                "weights must be nonnegative with positive sum",
            ));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        let sq_norms = points
            .iter()
            .map(|p| p.iter().map(|x| x * x).sum())
            .collect();
        let (col_x, col_y) = if dim == 2 {
            (
                points.iter().map(|p| p[0]).collect(),
                points.iter().map(|p| p[1]).collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(DiscreteSupport {
            dim,
            points: flat,
            weights,
            log_weights,
            sq_norms,
            col_x,
            col_y,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    /// Fills `exps[j] = log w_j + (1-t)(z . x_j)/t^2 - (1-t)^2 |x_j|^2/(2 t^2)`
    /// and returns the maximum.
    ///
    /// The 2-d branch runs four points per iteration; each lane evaluates the
    /// same scalar expression, so the stored exponents do not depend on the
    /// chunking.
    fn exponents(&self, z: &[f64], t: f64, exps: &mut [f64]) -> f64 {
        let k = self.len();
        let scale = (1.0 - t) / (t * t);
        let qscale = (1.0 - t) * (1.0 - t) / (2.0 * t * t);
        let mut max = f64::NEG_INFINITY;
        if self.dim == 2 {
            // Hot path for the planar supports used by the ring experiments.
            let (z0, z1) = (z[0], z[1]);
            let k4 = k - k % 4;
            let (z0v, z1v) = (f64x4::from(z0), f64x4::from(z1));
            let (sv, qv) = (f64x4::from(scale), f64x4::from(qscale));
            let mut maxv = f64x4::from(f64::NEG_INFINITY);
            // Keep the fused expression identical between the vector lanes
            // and the scalar tail so exponents do not depend on chunking.
            for j in (0..k4).step_by(4) {
                let x = f64x4::from(&self.col_x[j..j + 4]);
                let y = f64x4::from(&self.col_y[j..j + 4]);
                let lw = f64x4::from(&self.log_weights[j..j + 4]);
                let q = f64x4::from(&self.sq_norms[j..j + 4]);
                let dot = y.mul_add(z1v, z0v * x);
                let e = q.mul_neg_add(qv, dot.mul_add(sv, lw));
                exps[j..j + 4].copy_from_slice(&e.to_array());
                maxv = maxv.max(e);
            }
            max = maxv.to_array().into_iter().fold(max, f64::max);
            for j in k4..k {
                let dot = self.points[2 * j + 1].mul_add(z1, z0 * self.points[2 * j]);
                let e = (-self.sq_norms[j]).mul_add(qscale, dot.mul_add(scale, self.log_weights[j]));
                exps[j] = e;
                if e > max {
                    max = e;
                }
            }
        } else {
            for j in 0..k {
                let row = &self.points[j * self.dim..(j + 1) * self.dim];
                let dot: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
                let e = self.log_weights[j] + scale * dot - qscale * self.sq_norms[j];
                exps[j] = e;
                if e > max {
                    max = e;
                }
            }
        }
        max
    }
}

/// Data model with a closed-form posterior.
#[derive(Debug, Clone)]
pub enum DataModel {
    PointMass { point: Vec<f64> },
    DiagonalGaussian { mean: Vec<f64>, variance: Vec<f64> },
    Discrete(DiscreteSupport),
}

/// Reusable buffer for repeated posterior evaluations.
#[derive(Debug, Default)]
pub struct PosteriorScratch {
    exps: Vec<f64>,
}

/// Posterior covariance in the cheapest faithful representation.
#[derive(Debug, Clone, PartialEq)]
pub enum PosteriorCov {
    Zero { dim: usize },
    Diagonal(Vec<f64>),
    /// Row-major dim x dim.
    Full { dim: usize, data: Vec<f64> },
}

impl PosteriorCov {
    pub fn dim(&self) -> usize {
        match self {
            PosteriorCov::Zero { dim } => *dim,
            PosteriorCov::Diagonal(d) => d.len(),
            PosteriorCov::Full { dim, .. } => *dim,
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match self {
            PosteriorCov::Zero { .. } => 0.0,
            PosteriorCov::Diagonal(d) => {
                if i == j {
                    d[i]
                } else {
                    0.0
                }
            }
            PosteriorCov::Full { dim, data } => data[i * dim + j],
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.entry(i, i)).sum()
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorStats {
    pub mean: Vec<f64>,
    pub cov: PosteriorCov,
}

/// One draw from the forward corruption path.
#[derive(Debug, Clone)]
pub struct ForwardSample {
    pub z_t: Vec<f64>,
    pub z0: Vec<f64>,
    pub eps: Vec<f64>,
}

impl DataModel {
    pub fn point_mass(point: Vec<f64>) -> Result<Self> {
        if point.is_empty() || !point.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid(
                "DataModel::point_mass",
                "point must be nonempty and finite",
            ));
        }
        Ok(DataModel::PointMass { point })
    }

    pub fn diagonal_gaussian(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != variance.len() {
            return Err(Error::Dim {
                op: "DataModel::diagonal_gaussian",
                expected: mean.len(),
                got: variance.len(),
            });
        }
        if !mean.iter().all(|x| x.is_finite())
            || !variance.iter().all(|v| v.is_finite() && *v >= 0.0)
        {
            return Err(Error::invalid(
                "DataModel::diagonal_gaussian",
                "mean must be finite, variances finite and nonnegative",
            ));
        }
        Ok(DataModel::DiagonalGaussian { mean, variance })
    }

    pub fn discrete(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        Ok(DataModel::Discrete(DiscreteSupport::new(points, weights)?))
    }

    pub fn dim(&self) -> usize {
        match self {
            DataModel::PointMass { point } => point.len(),
            DataModel::DiagonalGaussian { mean, .. } => mean.len(),
            DataModel::Discrete(s) => s.dim(),
        }
    }

    /// Mean and covariance (row-major) of the data law itself.
    pub fn prior_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        match self {
            DataModel::PointMass { point } => (point.clone(), vec![0.0; d * d]),
            DataModel::DiagonalGaussian { mean, variance } => {
                let mut cov = vec![0.0; d * d];
                for i in 0..d {
                    cov[i * d + i] = variance[i];
                }
                (mean.clone(), cov)
            }
            DataModel::Discrete(s) => {
                let mut mean = vec![0.0; d];
                for j in 0..s.len() {
                    let w = s.weight(j);
                    for (m, x) in mean.iter_mut().zip(s.point(j)) {
                        *m += w * x;
                    }
                }
                let mut cov = vec![0.0; d * d];
                for j in 0..s.len() {
                    let w = s.weight(j);
                    let p = s.point(j);
                    for a in 0..d {
                        let da = p[a] - mean[a];
                        for b in 0..d {
                            cov[a * d + b] += w * da * (p[b] - mean[b]);
                        }
                    }
                }
                (mean, cov)
            }
        }
    }

    /// Draw z0 from the data law.
    pub fn sample_data(&self, stream: &mut DrawStream) -> Vec<f64> {
        match self {
            DataModel::PointMass { point } => point.clone(),
            DataModel::DiagonalGaussian { mean, variance } => mean
                .iter()
                .zip(variance)
                .map(|(m, v)| m + v.sqrt() * stream.normal())
                .collect(),
            DataModel::Discrete(s) => {
                let u = stream.uniform();
                let mut cum = 0.0;
                let mut idx = s.len() - 1;
                for j in 0..s.len() {
                    cum += s.weight(j);
                    if u < cum {
                        idx = j;
                        break;
                    }
                }
                s.point(idx).to_vec()
            }
        }
    }

    /// Draw (z_t, z0, eps) from the forward path at time t in [0, 1].
    pub fn forward_marginal(&self, t: f64, stream: &mut DrawStream) -> Result<ForwardSample> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain {
                op: "forward_marginal",
                name: "t",
                value: t,
                domain: "[0, 1]",
            });
        }
        let z0 = self.sample_data(stream);
        let eps = stream.normal_vec(self.dim());
        let z_t = z0
            .iter()
            .zip(&eps)
            .map(|(a, e)| (1.0 - t) * a + t * e)
            .collect();
        Ok(ForwardSample { z_t, z0, eps })
    }

    pub fn scratch(&self) -> PosteriorScratch {
        let n = match self {
            DataModel::Discrete(s) => s.len(),
            _ => 0,
        };
        PosteriorScratch {
            exps: vec![0.0; n],
        }
    }

    fn check_posterior_args(&self, op: &'static str, z: &[f64], t: f64) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::Dim {
                op,
                expected: self.dim(),
                got: z.len(),
            });
        }
        if !z.iter().all(|x| x.is_finite()) {
            return Err(Error::invalid(op, "non-finite latent"));
        }
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Domain {
                op,
                name: "t",
                value: t,
                domain: "(0, 1]",
            });
        }
        Ok(())
    }

    /// Posterior mean only, written into `out`. This is the sampler hot path;
    /// it allocates nothing.
    pub fn posterior_mean_into(
        &self,
        z: &[f64],
        t: f64,
        scratch: &mut PosteriorScratch,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_posterior_args("posterior_mean", z, t)?;
        if out.len() != self.dim() {
            return Err(Error::Dim {
                op: "posterior_mean",
                expected: self.dim(),
                got: out.len(),
            });
        }
        match self {
            DataModel::PointMass { point } => out.copy_from_slice(point),
            DataModel::DiagonalGaussian { mean, variance } => {
                let omt = 1.0 - t;
                for i in 0..out.len() {
                    let denom = omt * omt * variance[i] + t * t;
                    out[i] = mean[i] + omt * variance[i] * (z[i] - omt * mean[i]) / denom;
                }
            }
            DataModel::Discrete(s) => {
                scratch.exps.resize(s.len(), 0.0);
                let max = s.exponents(z, t, &mut scratch.exps);
                let cut = max - EXP_CUT;
                let dim = s.dim();
                out.fill(0.0);
                let mut total = 0.0;
                if dim == 2 {
                    // Chunked softmax average. Chunks whose four exponents
                    // all fall below the cut contribute exactly zero, same as
                    // the scalar skip, so they bypass the exp entirely.
                    let k = s.len();
                    let k4 = k - k % 4;
                    let (maxv, cutv) = (f64x4::from(max), f64x4::from(cut));
                    let mut totv = f64x4::ZERO;
                    let (mut m0v, mut m1v) = (f64x4::ZERO, f64x4::ZERO);
                    for j in (0..k4).step_by(4) {
                        let e = f64x4::from(&scratch.exps[j..j + 4]);
                        let keep = e.simd_ge(cutv);
                        if keep.any() {
                            let r = keep.select(exp4_nonpos(e - maxv), f64x4::ZERO);
                            totv += r;
                            m0v += r * f64x4::from(&s.col_x[j..j + 4]);
                            m1v += r * f64x4::from(&s.col_y[j..j + 4]);
                        }
                    }
                    total = totv.reduce_add();
                    let (mut m0, mut m1) = (m0v.reduce_add(), m1v.reduce_add());
                    for j in k4..k {
                        let e = scratch.exps[j];
                        if e >= cut {
                            let r = (e - max).exp();
                            total += r;
                            m0 += r * s.points[2 * j];
                            m1 += r * s.points[2 * j + 1];
                        }
                    }
                    out[0] = m0 / total;
                    out[1] = m1 / total;
                } else {
                    for (j, &e) in scratch.exps.iter().enumerate() {
                        if e >= cut {
                            let r = (e - max).exp();
                            total += r;
                            for (o, x) in out.iter_mut().zip(s.point(j)) {
                                *o += r * x;
                            }
                        }
                    }
                    for o in out.iter_mut() {
                        *o /= total;
                    }
                }
            }
        }
        Ok(())
    }

    /// Full posterior stats (mean and covariance).
    pub fn posterior(&self, z: &[f64], t: f64) -> Result<PosteriorStats> {
        self.check_posterior_args("posterior", z, t)?;
        let d = self.dim();
        match self {
            DataModel::PointMass { point } => Ok(PosteriorStats {
                mean: point.clone(),
                cov: PosteriorCov::Zero { dim: d },
            }),
            DataModel::DiagonalGaussian { mean, variance } => {
                let omt = 1.0 - t;
                let mut m = vec![0.0; d];
                let mut c = vec![0.0; d];
                for i in 0..d {
                    let denom = omt * omt * variance[i] + t * t;
                    m[i] = mean[i] + omt * variance[i] * (z[i] - omt * mean[i]) / denom;
                    c[i] = variance[i] * t * t / denom;
                }
                Ok(PosteriorStats {
                    mean: m,
                    cov: PosteriorCov::Diagonal(c),
                })
            }
            DataModel::Discrete(s) => {
                // Reuse the single-pass mean so the two entry points agree
                // bitwise, then normalize responsibilities for an exactly
                // centered covariance pass.
                let mut scratch = self.scratch();
                let mut mean = vec![0.0; d];
                self.posterior_mean_into(z, t, &mut scratch, &mut mean)?;
                let max = s.exponents(z, t, &mut scratch.exps);
                let cut = max - EXP_CUT;
                let mut total = 0.0;
                for e in scratch.exps.iter_mut() {
                    *e = if *e >= cut { (*e - max).exp() } else { 0.0 };
                    total += *e;
                }
                for e in scratch.exps.iter_mut() {
                    *e /= total;
                }
                let mut cov = vec![0.0; d * d];
                for (j, &r) in scratch.exps.iter().enumerate() {
                    if r > 0.0 {
                        let p = s.point(j);
                        for a in 0..d {
                            let da = p[a] - mean[a];
                            for b in a..d {
                                cov[a * d + b] += r * da * (p[b] - mean[b]);
                            }
                        }
                    }
                }
                for a in 0..d {
                    for b in 0..a {
                        cov[a * d + b] = cov[b * d + a];
                    }
                }
                Ok(PosteriorStats {
                    mean,
                    cov: PosteriorCov::Full { dim: d, data: cov },
                })
            }
        }
    }
}

/// Reconstructed noise (z - (1-t) m) / t for a posterior mean m.
pub fn eps_hat(z: &[f64], t: f64, mean: &[f64]) -> Result<Vec<f64>> {
    if z.len() != mean.len() {
        return Err(Error::Dim {
            op: "eps_hat",
            expected: mean.len(),
            got: z.len(),
        });
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain {
            op: "eps_hat",
            name: "t",
            value: t,
            domain: "(0, 1]",
        });
    }
    let omt = 1.0 - t;
    Ok(z.iter().zip(mean).map(|(z, m)| (z - omt * m) / t).collect())
}

/// Score ((1-t) m - z) / t^2 and posterior-mean velocity (z - m) / t.
pub fn score_and_velocity(z: &[f64], t: f64, mean: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if z.len() != mean.len() {
        return Err(Error::Dim {
            op: "score_and_velocity",
            expected: mean.len(),
            got: z.len(),
        });
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain {
            op: "score_and_velocity",
            name: "t",
            value: t,
            domain: "(0, 1]",
        });
    }
    let omt = 1.0 - t;
    let score = z
        .iter()
        .zip(mean)
        .map(|(z, m)| (omt * m - z) / (t * t))
        .collect();
    let velocity = z.iter().zip(mean).map(|(z, m)| (z - m) / t).collect();
    Ok((score, velocity))
}

/// Two concentric circles of k points each, uniform weights.
pub fn make_double_ring(radii: (f64, f64), k: usize) -> Result<DataModel> {
    if !(radii.0 > 0.0 && radii.1 > 0.0) || !radii.0.is_finite() || !radii.1.is_finite() {
        return Err(Error::invalid("make_double_ring", "radii must be positive and finite"));
    }
    if k == 0 {
        return Err(Error::invalid("make_double_ring", "need at least one point per ring"));
    }
    let mut points = Vec::with_capacity(2 * k);
    for &r in &[radii.0, radii.1] {
        for j in 0..k {
            let angle = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
            points.push(vec![r * angle.cos(), r * angle.sin()]);
        }
    }
    let weights = vec![1.0 / (2 * k) as f64; 2 * k];
    DataModel::discrete(points, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_gaussian_1d() -> DataModel {
        DataModel::diagonal_gaussian(vec![0.0], vec![1.0]).unwrap()
    }

    #[test]
    fn exp4_nonpos_matches_libm() {
        // Dense sweep of the softmax-weight domain plus the clamp region.
        let mut worst = 0.0f64;
        let mut i = 0u64;
        let mut probe = |d: [f64; 4]| {
            let got = exp4_nonpos(f64x4::from(d)).to_array();
            for (x, g) in d.iter().zip(got) {
                let want = x.max(-708.0).exp();
                let rel = if want == 0.0 {
                    g.abs()
                } else {
                    ((g - want) / want).abs()
                };
                if rel > worst {
                    worst = rel;
                }
            }
        };
        while i < 200_000 {
            let base = -46.0 * (i as f64 / 200_000.0);
            probe([base, base - 1e-5, base - 0.25, base * 0.5 - 100.0]);
            i += 4;
        }
        probe([0.0, -708.5, -46.0, -1e9]);
        assert!(worst <= 5e-15, "worst relative error {worst:e}");
    }

    #[test]
    fn point_mass_always_returns_its_point() {
        let m = DataModel::point_mass(vec![1.0, -2.0]).unwrap();
        let mut s = DrawStream::new(0, 0, 0, 2);
        for _ in 0..5 {
            assert_eq!(m.sample_data(&mut s), vec![1.0, -2.0]);
        }
        let post = m.posterior(&[0.3, 0.4], 0.5).unwrap();
        assert_eq!(post.mean, vec![1.0, -2.0]);
        assert_eq!(post.cov, PosteriorCov::Zero { dim: 2 });
    }

    #[test]
    fn forward_marginal_endpoints() {
        let m = unit_gaussian_1d();
        let mut s = DrawStream::new(1, 0, 0, 2);
        let at0 = m.forward_marginal(0.0, &mut s).unwrap();
        assert_eq!(at0.z_t, at0.z0);
        let at1 = m.forward_marginal(1.0, &mut s).unwrap();
        assert_eq!(at1.z_t, at1.eps);
        assert!(m.forward_marginal(1.5, &mut s).is_err());
    }

    #[test]
    fn gaussian_posterior_reference_value() {
        // mu = 0, s^2 = 1, t = 0.5, z = 1: mean = 1.0, cov = 0.5.
        let m = unit_gaussian_1d();
        let p = m.posterior(&[1.0], 0.5).unwrap();
        assert_relative_eq!(p.mean[0], 1.0, max_relative = 1e-14);
        assert_relative_eq!(p.cov.entry(0, 0), 0.5, max_relative = 1e-14);
    }

    #[test]
    fn gaussian_posterior_prior_recovery_near_one() {
        let m = DataModel::diagonal_gaussian(vec![0.3], vec![1.0]).unwrap();
        let p = m.posterior(&[0.5], 0.999).unwrap();
        assert!((p.mean[0] - 0.3).abs() < 1e-3);
        assert!((p.cov.entry(0, 0) - 1.0).abs() < 1e-3);
        // t = 1 is the exact no-signal limit: prior moments.
        let p1 = m.posterior(&[17.0], 1.0).unwrap();
        assert_eq!(p1.mean[0], 0.3);
        assert_eq!(p1.cov.entry(0, 0), 1.0);
    }

    #[test]
    fn posterior_domain_checks() {
        let m = unit_gaussian_1d();
        assert!(m.posterior(&[0.0], 0.0).is_err());
        assert!(m.posterior(&[0.0], 1.0 + 1e-12).is_err());
        assert!(m.posterior(&[f64::NAN], 0.5).is_err());
        assert!(m.posterior(&[0.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn single_point_support_matches_point_mass() {
        let pm = DataModel::point_mass(vec![0.7, -0.1]).unwrap();
        let ds = DataModel::discrete(vec![vec![0.7, -0.1]], vec![1.0]).unwrap();
        for &t in &[0.05, 0.5, 0.95, 1.0] {
            let a = pm.posterior(&[0.2, 0.9], t).unwrap();
            let b = ds.posterior(&[0.2, 0.9], t).unwrap();
            assert_relative_eq!(a.mean[0], b.mean[0], max_relative = 1e-12);
            assert_relative_eq!(a.mean[1], b.mean[1], max_relative = 1e-12);
            assert!(b.cov.trace().abs() < 1e-12);
        }
    }

    #[test]
    fn discrete_posterior_matches_direct_softmax() {
        // Direct evaluation of r_j ~ w_j exp(-|z - (1-t) x_j|^2 / (2 t^2)),
        // no expansion, no pruning.
        let points = vec![
            vec![0.5, 0.0],
            vec![0.0, 0.8],
            vec![-0.3, -0.4],
            vec![1.0, 1.0],
        ];
        let weights = vec![0.1, 0.2, 0.3, 0.4];
        let m = DataModel::discrete(points.clone(), weights.clone()).unwrap();
        let z = [0.25, -0.1];
        let t = 0.35;
        let mut es = Vec::new();
        for (p, w) in points.iter().zip(&weights) {
            let d2: f64 = p
                .iter()
                .zip(z.iter())
                .map(|(x, zz)| (zz - (1.0 - t) * x).powi(2))
                .sum();
            es.push((w / weights.iter().sum::<f64>()).ln() - d2 / (2.0 * t * t));
        }
        let emax = es.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let rs: Vec<f64> = es.iter().map(|e| (e - emax).exp()).collect();
        let total: f64 = rs.iter().sum();
        let mut want_mean = [0.0; 2];
        for (r, p) in rs.iter().zip(&points) {
            want_mean[0] += r / total * p[0];
            want_mean[1] += r / total * p[1];
        }
        let got = m.posterior(&z, t).unwrap();
        assert_relative_eq!(got.mean[0], want_mean[0], max_relative = 1e-12);
        assert_relative_eq!(got.mean[1], want_mean[1], max_relative = 1e-12);

        // Covariance against the same direct responsibilities.
        let mut want_cov = [0.0; 4];
        for (r, p) in rs.iter().zip(&points) {
            let da = p[0] - want_mean[0];
            let db = p[1] - want_mean[1];
            want_cov[0] += r / total * da * da;
            want_cov[1] += r / total * da * db;
            want_cov[3] += r / total * db * db;
        }
        want_cov[2] = want_cov[1];
        for (i, want) in want_cov.iter().enumerate() {
            assert_relative_eq!(got.cov.entry(i / 2, i % 2), *want, max_relative = 1e-10);
        }
    }

    #[test]
    fn discrete_posterior_stable_far_field_small_t() {
        // Far-field latent at tiny t: exponents are around -1e8 before
        // max-subtraction, still must give a finite mean inside the hull.
        let ring = make_double_ring((0.5, 1.0), 64).unwrap();
        let z = [7.0, -6.0];
        let p = ring.posterior(&z, 1e-3).unwrap();
        assert!(p.mean.iter().all(|x| x.is_finite()));
        let norm = (p.mean[0] * p.mean[0] + p.mean[1] * p.mean[1]).sqrt();
        assert!(norm <= 1.0 + 1e-12);
        // At this scale the nearest support point takes all the mass.
        let dir = f64::atan2(-6.0, 7.0);
        let k = 64.0;
        let jstar = (dir / (2.0 * std::f64::consts::PI) * k).round().rem_euclid(k);
        let angle = 2.0 * std::f64::consts::PI * jstar / k;
        assert_relative_eq!(p.mean[0], angle.cos(), max_relative = 1e-9);
        assert_relative_eq!(p.mean[1], angle.sin(), max_relative = 1e-9);
    }

    #[test]
    fn posterior_mean_into_agrees_with_posterior() {
        let ring = make_double_ring((0.5, 1.0), 32).unwrap();
        let mut scratch = ring.scratch();
        let mut out = [0.0; 2];
        for &t in &[0.02, 0.3, 0.7, 1.0] {
            let z = [0.4, -0.2];
            ring.posterior_mean_into(&z, t, &mut scratch, &mut out).unwrap();
            let full = ring.posterior(&z, t).unwrap();
            assert_eq!(out[0].to_bits(), full.mean[0].to_bits());
            assert_eq!(out[1].to_bits(), full.mean[1].to_bits());
        }
    }

    #[test]
    fn eps_hat_recovers_injected_noise() {
        let m = [0.3, -0.7];
        let e = [1.1, 0.4];
        for &t in &[0.1, 0.5, 0.9] {
            let z: Vec<f64> = m
                .iter()
                .zip(&e)
                .map(|(m, e)| (1.0 - t) * m + t * e)
                .collect();
            let got = eps_hat(&z, t, &m).unwrap();
            assert_relative_eq!(got[0], e[0], max_relative = 1e-12);
            assert_relative_eq!(got[1], e[1], max_relative = 1e-12);
        }
        assert!(eps_hat(&[0.0], 0.0, &[0.0]).is_err());
    }

    #[test]
    fn score_and_velocity_reference_values() {
        // Point mass at 0, z = 0.5, t = 0.5: score = -2, velocity = 1.
        let (score, vel) = score_and_velocity(&[0.5], 0.5, &[0.0]).unwrap();
        assert_relative_eq!(score[0], -2.0, max_relative = 1e-14);
        assert_relative_eq!(vel[0], 1.0, max_relative = 1e-14);
        // score = -eps_hat / t always.
        let eh = eps_hat(&[0.5], 0.5, &[0.0]).unwrap();
        assert_relative_eq!(score[0], -eh[0] / 0.5, max_relative = 1e-14);
    }

    #[test]
    fn double_ring_construction() {
        let ring = make_double_ring((0.5, 1.0), 4).unwrap();
        let DataModel::Discrete(s) = &ring else {
            panic!("expected discrete support");
        };
        assert_eq!(s.len(), 8);
        for j in 0..8 {
            assert_relative_eq!(s.weight(j), 0.125, max_relative = 1e-15);
            let p = s.point(j);
            let norm = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let want = if j < 4 { 0.5 } else { 1.0 };
            assert_relative_eq!(norm, want, max_relative = 1e-12);
        }
        let (mean, _) = ring.prior_moments();
        assert!(mean[0].abs() < 1e-12 && mean[1].abs() < 1e-12);

        assert!(make_double_ring((0.0, 1.0), 4).is_err());
        assert!(make_double_ring((0.5, 1.0), 0).is_err());
    }

    #[test]
    fn discrete_sampling_hits_weights() {
        let m = DataModel::discrete(
            vec![vec![0.0], vec![1.0]],
            vec![0.25, 0.75],
        )
        .unwrap();
        let mut s = DrawStream::new(9, 0, 0, 2);
        let n = 40_000;
        let mut ones = 0usize;
        for _ in 0..n {
            if m.sample_data(&mut s)[0] == 1.0 {
                ones += 1;
            }
        }
        let frac = ones as f64 / n as f64;
        assert!((frac - 0.75).abs() < 3.0 * (0.25 * 0.75 / n as f64).sqrt() + 1e-9);
    }

    #[test]
    fn construction_validation() {
        assert!(DataModel::point_mass(vec![]).is_err());
        assert!(DataModel::point_mass(vec![f64::INFINITY]).is_err());
        assert!(DataModel::diagonal_gaussian(vec![0.0], vec![-1.0]).is_err());
        assert!(DataModel::diagonal_gaussian(vec![0.0], vec![1.0, 2.0]).is_err());
        assert!(DataModel::discrete(vec![], vec![]).is_err());
        assert!(DataModel::discrete(vec![vec![0.0], vec![1.0, 2.0]], vec![0.5, 0.5]).is_err());
        assert!(DataModel::discrete(vec![vec![0.0]], vec![-1.0]).is_err());
        assert!(DataModel::discrete(vec![vec![0.0]], vec![0.0]).is_err());
    }
}
