//! Estimators for judging sampled marginals: ring mass, moments, radial
//! histograms, and sliced Wasserstein-1 distances.
//!
//! Every estimator is deterministic given its inputs and seed; the direction
//! draws of the sliced distance and any subsampling come from dedicated
//! keyed streams so results do not depend on scheduling.

use crate::batch::SampleBatch;
use crate::error::{Error, Result};
use crate::rng::{lane, DrawStream};

/// Analytic descriptions of a target marginal, for report tables.
#[derive(Debug, Clone)]
pub enum MarginalTarget {
    /// Independent Gaussian coordinates.
    Gaussian { mean: Vec<f64>, variance: Vec<f64> },
    /// The point-mass forward marginal at time t: signal * z* + noise * eps.
    PointMassMarginal { signal: f64, noise_std: f64 },
    /// A finite reference sample set.
    Empirical { reference: SampleBatch },
}

/// Fraction of 2-d samples with Euclidean norm above `boundary`, with the
/// binomial standard error of that fraction.
pub fn ring_mass(samples: &SampleBatch, boundary: f64) -> Result<(f64, f64)> {
    if samples.dim() != 2 {
        return Err(Error::Dim {
            op: "ring_mass",
            expected: 2,
            got: samples.dim(),
        });
    }
    if samples.is_empty() {
        return Err(Error::invalid("ring_mass", "need at least one sample"));
    }
    if !(boundary > 0.0) {
        return Err(Error::Domain {
            op: "ring_mass",
            name: "boundary",
            value: boundary,
            domain: "(0, inf)",
        });
    }
    let b_sq = boundary * boundary;
    let outer = samples
        .rows()
        .filter(|r| r[0] * r[0] + r[1] * r[1] > b_sq)
        .count();
    let n = samples.len() as f64;
    let mass = outer as f64 / n;
    Ok((mass, (mass * (1.0 - mass) / n).sqrt()))
}

/// Sample mean and unbiased covariance (divisor n - 1, row-major d x d).
pub fn sample_moments(samples: &SampleBatch) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = samples.len();
    let d = samples.dim();
    if n < 2 {
        return Err(Error::invalid("sample_moments", "need at least two samples"));
    }
    let mut mean = vec![0.0; d];
    for row in samples.rows() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for row in samples.rows() {
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a * d + b] /= n as f64 - 1.0;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    Ok((mean, cov))
}

/// Deterministically subsample `k` of `n` row indices with a partial
/// Fisher-Yates shuffle driven by the stream.
fn subsample_indices(n: usize, k: usize, stream: &mut DrawStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + stream.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Average over random unit directions of the 1-d Wasserstein-1 distance
/// between the projected sample sets (sorted-difference formula).
///
/// Unequal sample counts are handled by deterministically subsampling the
/// larger set; direction i comes from its own keyed stream so the estimate
/// is independent of evaluation order.
pub fn sliced_w1(
    a: &SampleBatch,
    b: &SampleBatch,
    n_directions: usize,
    seed: u64,
) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dim {
            op: "sliced_w1",
            expected: a.dim(),
            got: b.dim(),
        });
    }
    if n_directions == 0 {
        return Err(Error::invalid("sliced_w1", "need at least one direction"));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("sliced_w1", "need nonempty sample sets"));
    }
    let d = a.dim();
    let k = a.len().min(b.len());
    let pick = |set: &SampleBatch| -> Vec<usize> {
        if set.len() == k {
            (0..k).collect()
        } else {
            let mut stream = DrawStream::new(seed, set.len() as u64, 0, lane::PROBE);
            subsample_indices(set.len(), k, &mut stream)
        }
    };
    let idx_a = pick(a);
    let idx_b = pick(b);
    let mut proj_a = vec![0.0; k];
    let mut proj_b = vec![0.0; k];
    let mut dir = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..n_directions {
        let mut stream = DrawStream::new(seed, i as u64, 0, lane::DIRECTION);
        loop {
            stream.fill_normal(&mut dir);
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for x in dir.iter_mut() {
                    *x /= norm;
                }
                break;
            }
        }
        let project = |set: &SampleBatch, idx: &[usize], out: &mut [f64]| {
            for (o, &r) in out.iter_mut().zip(idx) {
                *o = set.row(r).iter().zip(&dir).map(|(x, u)| x * u).sum();
            }
        };
        project(a, &idx_a, &mut proj_a);
        project(b, &idx_b, &mut proj_b);
        proj_a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        proj_b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let w1: f64 = proj_a
            .iter()
            .zip(&proj_b)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / k as f64;
        total += w1;
    }
    Ok(total / n_directions as f64)
}

/// Counts of sample norms per bin. Norms below the first or above the last
/// edge are clamped into the end bins, so the counts always sum to the
/// sample count.
pub fn radial_histogram(samples: &SampleBatch, bin_edges: &[f64]) -> Result<Vec<usize>> {
    if bin_edges.len() < 2 {
        return Err(Error::invalid("radial_histogram", "need at least two bin edges"));
    }
    if bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("radial_histogram", "bin edges must be strictly increasing"));
    }
    let n_bins = bin_edges.len() - 1;
    let mut counts = vec![0usize; n_bins];
    for row in samples.rows() {
        let r = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let pos = bin_edges.partition_point(|&e| e <= r);
        counts[pos.saturating_sub(1).min(n_bins - 1)] += 1;
    }
    Ok(counts)
}
