//! Two-cluster separation of post-selected ensembles and the relative
//! probability of multiple most-likely paths from distance histograms.
//!
//! A trajectory at Euclidean distance 𝓔 from its MLP is modelled as
//! H(𝓔) = P(0) e^{−𝓔²/2σ²} · 2π^{N/2} 𝓔^{N−1} / Γ(N/2), so H peaks at
//! 𝓔 = σ√(N−1) and the ratio of two such histograms isolates P₁(0)/P₂(0).

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::manifold::csv_error;
use crate::mlp::MlpPath;
use crate::params::{BlochState, PhysParams, TimeGrid};
use crate::pathprob::{euclid_distance, log_path_probability, mlp_by_distance, MlpEstimate};
use crate::sde::Trajectory;

/// Smallest weight after min-max normalisation.
pub const WEIGHT_FLOOR: f64 = 1e-3;
/// Minimum number of histogram bins.
pub const MIN_BINS: usize = 10;

/// Min-max normalisation of values into [ε, 1]; all ones when degenerate.
pub fn normalize_weights(log_probs: &[f64]) -> Vec<f64> {
    let lo = log_probs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![1.0; log_probs.len()];
    }
    log_probs.iter().map(|v| WEIGHT_FLOOR + (1.0 - WEIGHT_FLOOR) * (v - lo) / (hi - lo)).collect()
}

/// Per-trajectory weights P_j from record log-probabilities.
pub fn weights(ens: &[Trajectory], p: &PhysParams) -> Result<Vec<f64>> {
    let lp: Vec<f64> = ens.par_iter().map(|t| log_path_probability(t, p)).collect::<Result<_>>()?;
    Ok(normalize_weights(&lp))
}

/// Symmetric matrix of pairwise `euclid_distance`, row-major.
pub fn distance_matrix(ens: &[Trajectory]) -> Result<Vec<f64>> {
    let m = ens.len();
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| (0..m).map(|j| if i == j { Ok(0.0) } else { euclid_distance(&ens[i], &ens[j]) }).collect())
        .collect::<Result<_>>()?;
    Ok(rows.concat())
}

/// Result of [`bipartition`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPartition {
    /// `true` for members of set 2.
    pub in_set2: Vec<bool>,
    pub weights: Vec<f64>,
    /// d̄^W_set1 + d̄^W_set2 after every accepted move, starting with the
    /// initial random split.
    pub objective_trace: Vec<f64>,
    /// Reassignment attempts made.
    pub iterations: usize,
    /// A full sweep finished without an accepted move.
    pub converged: bool,
}

impl ClusterPartition {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace starts with the initial objective")
    }

    pub fn set1(&self) -> Vec<usize> {
        (0..self.in_set2.len()).filter(|&i| !self.in_set2[i]).collect()
    }

    pub fn set2(&self) -> Vec<usize> {
        (0..self.in_set2.len()).filter(|&i| self.in_set2[i]).collect()
    }

    /// Labels with set 1 defined as the set containing trajectory 0, so that
    /// partitions from different seeds compare directly.
    pub fn canonical_labels(&self) -> Vec<bool> {
        let flip = self.in_set2.first().copied().unwrap_or(false);
        self.in_set2.iter().map(|&b| b != flip).collect()
    }

    /// One NDJSON line per trajectory: index, set (1 or 2), weight.
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, (&s2, &wt)) in self.in_set2.iter().zip(&self.weights).enumerate() {
            let line = serde_json::json!({ "index": i, "set": if s2 { 2 } else { 1 }, "P": wt });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

struct SetSums {
    /// Σ_{j∈set, j≠i} P_j D_ij per i.
    weighted: Vec<f64>,
    /// Σ_{j∈set, j≠i} D_ij per i.
    plain: Vec<f64>,
    /// Σ_{i∈set} weighted_i.
    total: f64,
    size: usize,
}

impl SetSums {
    fn mean(&self) -> f64 {
        if self.size < 2 {
            0.0
        } else {
            self.total / (self.size * (self.size - 1)) as f64
        }
    }
}

fn mean_of(total: f64, size: usize) -> f64 {
    if size < 2 {
        0.0
    } else {
        total / (size * (size - 1)) as f64
    }
}

/// Splits the ensemble into two sets minimising d̄^W_set1 + d̄^W_set2 by
/// single-trajectory reassignment from a seeded random split. Sweeps visit the
/// trajectories in a seeded random order; moves that would empty a set are
/// not allowed.
pub fn bipartition(ens: &[Trajectory], weights: &[f64], seed: u64) -> Result<ClusterPartition> {
    let d = distance_matrix(ens)?;
    bipartition_matrix(&d, weights, seed)
}

/// [`bipartition`] on a precomputed distance matrix.
pub fn bipartition_matrix(d: &[f64], weights: &[f64], seed: u64) -> Result<ClusterPartition> {
    let m = weights.len();
    if m < 2 {
        return Err(Error::TooFewTrajectories { need: 2, got: m });
    }
    if d.len() != m * m {
        return Err(Error::GridMismatch(format!("distance matrix has {} entries for {m} trajectories", d.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in2: Vec<bool> = (0..m).map(|_| rng.random::<bool>()).collect();
    if in2.iter().all(|&b| b) || in2.iter().all(|&b| !b) {
        let k = rng.random_range(0..m);
        in2[k] = !in2[k];
    }
    let build = |want2: bool, in2: &[bool]| {
        let mut s = SetSums { weighted: vec![0.0; m], plain: vec![0.0; m], total: 0.0, size: 0 };
        for i in 0..m {
            for j in 0..m {
                if j != i && in2[j] == want2 {
                    s.weighted[i] += weights[j] * d[i * m + j];
                    s.plain[i] += d[i * m + j];
                }
            }
            if in2[i] == want2 {
                s.total += s.weighted[i];
                s.size += 1;
            }
        }
        s
    };
    let mut sets = [build(false, &in2), build(true, &in2)];
    let mut trace = vec![sets[0].mean() + sets[1].mean()];
    let mut order: Vec<usize> = (0..m).collect();
    let limit = 10 * m;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < limit {
        order.shuffle(&mut rng);
        let mut moved = false;
        for &i in &order {
            if iterations >= limit {
                break;
            }
            iterations += 1;
            let (from, to) = if in2[i] { (1, 0) } else { (0, 1) };
            if sets[from].size <= 1 {
                continue;
            }
            let new_from = sets[from].total - sets[from].weighted[i] - weights[i] * sets[from].plain[i];
            let new_to = sets[to].total + sets[to].weighted[i] + weights[i] * sets[to].plain[i];
            let current = sets[0].mean() + sets[1].mean();
            let proposed = mean_of(new_from, sets[from].size - 1) + mean_of(new_to, sets[to].size + 1);
            if proposed < current - 1e-12 * current.abs() {
                in2[i] = !in2[i];
                sets[from].total = new_from;
                sets[to].total = new_to;
                sets[from].size -= 1;
                sets[to].size += 1;
                for k in 0..m {
                    if k == i {
                        continue;
                    }
                    let dik = d[k * m + i];
                    sets[from].weighted[k] -= weights[i] * dik;
                    sets[from].plain[k] -= dik;
                    sets[to].weighted[k] += weights[i] * dik;
                    sets[to].plain[k] += dik;
                }
                trace.push(proposed);
                moved = true;
            }
        }
        if !moved {
            converged = true;
            break;
        }
    }
    Ok(ClusterPartition { in_set2: in2, weights: weights.to_vec(), objective_trace: trace, iterations, converged })
}

/// ln of the hypersphere multiplicity n(𝓔) = 2π^{N/2} 𝓔^{N−1} / Γ(N/2).
pub fn multiplicity_log(e: f64, n: usize) -> Result<f64> {
    if !(e > 0.0) || n < 1 {
        return Err(Error::InvalidParams(format!("multiplicity needs 𝓔 > 0 and N ≥ 1, got 𝓔={e}, N={n}")));
    }
    let nf = n as f64;
    Ok(std::f64::consts::LN_2 + 0.5 * nf * std::f64::consts::PI.ln() + (nf - 1.0) * e.ln() - ln_gamma(0.5 * nf))
}

/// σ from the histogram mode, 𝓔_peak = σ√(N−1).
pub fn sigma_from_mode(e_peak: f64, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidParams(format!("σ from the mode needs N ≥ 2, got {n}")));
    }
    if !(e_peak > 0.0) {
        return Err(Error::InvalidParams(format!("mode must be positive, got {e_peak}")));
    }
    Ok(e_peak / ((n - 1) as f64).sqrt())
}

/// Histogram of distances 𝓔 from a reference path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Time-step count in the multiplicity model.
    pub n: usize,
    pub sigma: f64,
    /// ln P(0) from a fixed-σ, count-weighted fit of the model to the
    /// non-empty bins (density normalised by sample size and bin width).
    pub ln_p0: f64,
}

/// Freedman–Diaconis bin edges covering `data`, with at least [`MIN_BINS`] bins.
pub fn fd_edges(data: &[f64]) -> Result<Vec<f64>> {
    if data.len() < 2 {
        return Err(Error::InsufficientBins { need: MIN_BINS, got: 0 });
    }
    let mut s = data.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |f: f64| {
        let pos = f * (s.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
    };
    let (lo, hi) = (s[0], s[s.len() - 1]);
    if !(hi > lo) {
        return Err(Error::InsufficientBins { need: MIN_BINS, got: 1 });
    }
    let width = 2.0 * (q(0.75) - q(0.25)) / (s.len() as f64).cbrt();
    let bins = if width > 0.0 { (((hi - lo) / width).ceil() as usize).max(MIN_BINS) } else { MIN_BINS };
    let step = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..=bins).map(|k| lo + step * k as f64).collect();
    edges[bins] = hi;
    Ok(edges)
}

fn bin_counts(data: &[f64], edges: &[f64]) -> Vec<usize> {
    let nb = edges.len() - 1;
    let mut counts = vec![0; nb];
    for &v in data {
        if v < edges[0] || v > edges[nb] {
            continue;
        }
        let k = edges.partition_point(|&e| e <= v).saturating_sub(1).min(nb - 1);
        counts[k] += 1;
    }
    counts
}

/// Location of the histogram maximum refined by a parabola through the log
/// counts of the peak bin and its neighbours.
fn parabolic_mode(edges: &[f64], counts: &[usize]) -> f64 {
    let centers: Vec<f64> = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let k = (0..counts.len()).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).unwrap_or(0);
    if k == 0 || k + 1 >= counts.len() || counts[k - 1] == 0 || counts[k + 1] == 0 {
        return centers[k];
    }
    let (a, b, c) = ((counts[k - 1] as f64).ln(), (counts[k] as f64).ln(), (counts[k + 1] as f64).ln());
    let denom = a - 2.0 * b + c;
    if denom >= 0.0 {
        return centers[k];
    }
    let shift = (0.5 * (a - c) / denom).clamp(-0.5, 0.5);
    centers[k] + shift * (centers[1] - centers[0])
}

/// Mode of the model e^{−𝓔²/2σ²} 𝓔^{N−1} fitted to the log counts by
/// count-weighted least squares in 𝓔²; falls back to [`parabolic_mode`] when
/// fewer than three bins are populated or the fitted curvature has the wrong sign.
fn histogram_mode(edges: &[f64], counts: &[usize], n: usize) -> f64 {
    let pts: Vec<(f64, f64, f64)> = edges
        .windows(2)
        .zip(counts)
        .filter(|(w, &c)| c > 0 && w[0] + w[1] > 0.0)
        .map(|(w, &c)| {
            let e = 0.5 * (w[0] + w[1]);
            (e * e, (c as f64).ln() - (n as f64 - 1.0) * e.ln(), c as f64)
        })
        .collect();
    if pts.len() >= 3 {
        let sw: f64 = pts.iter().map(|p| p.2).sum();
        let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
        let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
        let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
        if sxx > 0.0 && sxy < 0.0 && n >= 2 {
            let sigma2 = -0.5 * sxx / sxy;
            return (sigma2 * (n as f64 - 1.0)).sqrt();
        }
    }
    parabolic_mode(edges, counts)
}

impl DistanceHistogram {
    /// Histogram on explicit `edges`; σ from the mode.
    pub fn with_edges(distances: &[f64], edges: Vec<f64>, n: usize) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::InsufficientBins { need: MIN_BINS, got: 0 });
        }
        let counts = bin_counts(distances, &edges);
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::TooFewTrajectories { need: 1, got: 0 });
        }
        let sigma = sigma_from_mode(histogram_mode(&edges, &counts, n), n)?;
        let width = edges[1] - edges[0];
        let mut acc = 0.0;
        for (k, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let e = 0.5 * (edges[k] + edges[k + 1]);
            let density = c as f64 / (total as f64 * width);
            acc += c as f64 * (density.ln() + e * e / (2.0 * sigma * sigma) - multiplicity_log(e, n)?);
        }
        Ok(Self { edges, counts, n, sigma, ln_p0: acc / total as f64 })
    }

    /// Freedman–Diaconis binning of `distances`.
    pub fn build(distances: &[f64], n: usize) -> Result<Self> {
        Self::with_edges(distances, fd_edges(distances)?, n)
    }

    /// Two histograms sharing one binning derived from the pooled data.
    pub fn pair(d1: &[f64], d2: &[f64], n: usize) -> Result<(Self, Self)> {
        let pooled: Vec<f64> = d1.iter().chain(d2).copied().collect();
        let edges = fd_edges(&pooled)?;
        Ok((Self::with_edges(d1, edges.clone(), n)?, Self::with_edges(d2, edges, n)?))
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// CSV of bins with the fit metadata in leading comment lines.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# N = {}", self.n)?;
        writeln!(w, "# sigma = {}", self.sigma)?;
        writeln!(w, "# ln_P0 = {}", self.ln_p0)?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["E_lo", "E_hi", "count"]).map_err(csv_error)?;
        for (k, c) in self.counts.iter().enumerate() {
            out.write_record([self.edges[k].to_string(), self.edges[k + 1].to_string(), c.to_string()])
                .map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Euclidean distances 𝓔 = √(euclid_distance) of trajectories from a reference path.
pub fn distances_from(ens: &[Trajectory], reference: &[BlochState]) -> Result<Vec<f64>> {
    ens.iter()
        .map(|t| {
            if t.states.len() != reference.len() {
                return Err(Error::GridMismatch(format!(
                    "{} states vs reference of {}",
                    t.states.len(),
                    reference.len()
                )));
            }
            Ok(t.states.iter().zip(reference).map(|(a, b)| a.dist2_xz(b)).sum::<f64>().sqrt())
        })
        .collect()
}

/// Fitted P₁(0)/P₂(0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioFit {
    pub log_ratio: f64,
    /// Standard error of the mean over contributing bins.
    pub std_err: f64,
    pub bins: usize,
}

impl RatioFit {
    pub fn ratio(&self) -> f64 {
        self.log_ratio.exp()
    }
}

/// Fits ln(H₁/H₂) = ln(P₁(0)/P₂(0)) − (𝓔²/2)(1/σ₁² − 1/σ₂²) over bins where both
/// histograms are non-empty, with the slope fixed by the two σ values. The
/// intercept is the mean of the per-bin estimates.
pub fn fit_relative_probability(h1: &DistanceHistogram, h2: &DistanceHistogram) -> Result<RatioFit> {
    if h1.edges.len() != h2.edges.len() || h1.edges.iter().zip(&h2.edges).any(|(a, b)| (a - b).abs() > 1e-12) {
        return Err(Error::GridMismatch("histograms must share bin edges".into()));
    }
    let slope = 0.5 * (1.0 / (h1.sigma * h1.sigma) - 1.0 / (h2.sigma * h2.sigma));
    let est: Vec<f64> = h1
        .centers()
        .iter()
        .zip(h1.counts.iter().zip(&h2.counts))
        .filter(|(_, (&a, &b))| a > 0 && b > 0)
        .map(|(e, (&a, &b))| (a as f64 / b as f64).ln() + slope * e * e)
        .collect();
    if est.len() < 3 {
        return Err(Error::InsufficientBins { need: 3, got: est.len() });
    }
    let n = est.len() as f64;
    let mean = est.iter().sum::<f64>() / n;
    let var = est.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(RatioFit { log_ratio: mean, std_err: (var / n).sqrt(), bins: est.len() })
}

/// Two well-separated bundles of damped-Rabi-like curves (`m1` then `m2`
/// members) with small random-walk jitter, for clustering checks.
pub fn synthetic_bundles(m1: usize, m2: usize, grid: &TimeGrid, seed: u64) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = 2.0 * std::f64::consts::PI * 0.9;
    (0..m1 + m2)
        .map(|i| {
            let phase = if i < m1 { 0.0 } else { 0.5 * std::f64::consts::PI };
            let mut jitter = (0.0, 0.0);
            let step = 0.02 * grid.dt.sqrt();
            let states = (0..grid.n_points())
                .map(|k| {
                    let t = grid.time(k);
                    let damp = (-0.7 * t).exp();
                    let s = BlochState::xz(
                        0.8 * damp * (omega * t + phase).sin() + jitter.0,
                        -0.8 * damp * (omega * t + phase).cos() + jitter.1,
                    );
                    let (a, b): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
                    jitter = (jitter.0 + step * a, jitter.1 + step * b);
                    s
                })
                .collect();
            let record = (0..grid.n_steps)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * grid.dt.sqrt()
                })
                .collect();
            Trajectory { grid: *grid, states, record, seed: i as u64, clamp_events: 0 }
        })
        .collect()
}

/// One cluster's MLP estimate and the theory path it lies closest to.
#[derive(Debug, Clone)]
pub struct ClusterMatch {
    pub members: Vec<usize>,
    pub estimate: MlpEstimate,
    /// Index into the theory paths.
    pub path: usize,
    pub coverage: f64,
    pub rms_gap: f64,
}

/// Partition of a post-selected ensemble, per-cluster estimates matched to
/// theory paths, and the relative-probability fit between the two clusters.
#[derive(Debug, Clone)]
pub struct ClusterAnalysis {
    pub partition: ClusterPartition,
    pub clusters: [ClusterMatch; 2],
    pub histograms: Option<(DistanceHistogram, DistanceHistogram)>,
    pub fit: Option<RatioFit>,
    /// S of cluster 1's path minus S of cluster 2's path.
    pub action_difference: f64,
}

impl ClusterAnalysis {
    /// (fitted − predicted) / standard error.
    pub fn z_score(&self) -> Option<f64> {
        self.fit.map(|f| (f.log_ratio - self.action_difference) / f.std_err)
    }
}

/// Bipartition with weights from the record probabilities, then a distance-ranked
/// MLP estimate (top `frac`) per cluster, each matched to the theory path with
/// the smallest RMS gap. Distances of each cluster from its matched path feed the
/// histogram fit; the fit is `None` when the histograms cannot be built or too
/// few bins overlap.
pub fn analyze_clusters(
    ens: &[Trajectory],
    theory: &[MlpPath],
    p: &PhysParams,
    seed: u64,
    frac: f64,
) -> Result<ClusterAnalysis> {
    if theory.is_empty() {
        return Err(Error::InvalidParams("no theory paths to match".into()));
    }
    let w = weights(ens, p)?;
    let partition = bipartition(ens, &w, seed)?;
    let paths: Vec<Vec<BlochState>> = theory.iter().map(MlpPath::states).collect();
    let matched = |members: Vec<usize>| -> Result<ClusterMatch> {
        let sub: Vec<Trajectory> = members.iter().map(|&i| ens[i].clone()).collect();
        let estimate = mlp_by_distance(&sub, frac)?;
        let path = (0..paths.len())
            .min_by(|&a, &b| estimate.rms_gap(&paths[a]).total_cmp(&estimate.rms_gap(&paths[b])))
            .expect("non-empty");
        let coverage = estimate.band_coverage(&paths[path])?;
        let rms_gap = estimate.rms_gap(&paths[path]);
        Ok(ClusterMatch { members, estimate, path, coverage, rms_gap })
    };
    let clusters = [matched(partition.set1())?, matched(partition.set2())?];
    let dist = |c: &ClusterMatch| -> Result<Vec<f64>> {
        let sub: Vec<Trajectory> = c.members.iter().map(|&i| ens[i].clone()).collect();
        distances_from(&sub, &paths[c.path])
    };
    let (d1, d2) = (dist(&clusters[0])?, dist(&clusters[1])?);
    let n = ens[0].grid.n_steps;
    let histograms = DistanceHistogram::pair(&d1, &d2, n).ok();
    let fit = histograms.as_ref().and_then(|(h1, h2)| fit_relative_probability(h1, h2).ok());
    let action_difference = theory[clusters[0].path].action - theory[clusters[1].path].action;
    Ok(ClusterAnalysis { partition, clusters, histograms, fit, action_difference })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand_distr::Normal;

    #[test]
    fn weight_examples() {
        assert_eq!(normalize_weights(&[-3.0, -3.0]), vec![1.0, 1.0]);
        let w = normalize_weights(&[-10.0, -5.0, 0.0]);
        assert_relative_eq!(w[0], WEIGHT_FLOOR);
        assert_relative_eq!(w[1], 0.5 + 0.5 * WEIGHT_FLOOR, epsilon = 1e-15);
        assert_relative_eq!(w[2], 1.0);
    }

    proptest! {
        #[test]
        fn weights_shift_invariant(v in proptest::collection::vec(-1e3f64..1e3, 2..20), c in -1e4f64..1e4) {
            let a = normalize_weights(&v);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = normalize_weights(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
                prop_assert!(*x >= WEIGHT_FLOOR - 1e-15 && *x <= 1.0 + 1e-15);
            }
        }
    }

    #[test]
    fn two_members_split_apart() {
        let g = TimeGrid::new(0.01, 10).unwrap();
        let ens = synthetic_bundles(1, 1, &g, 3);
        for seed in 0..5 {
            let part = bipartition(&ens, &[1.0, 1.0], seed).unwrap();
            assert_eq!(part.set1().len(), 1);
            assert_eq!(part.objective(), 0.0);
        }
        assert!(bipartition(&ens[..1], &[1.0], 0).is_err());
    }

    #[test]
    fn separated_bundles_recovered_for_all_seeds() {
        let g = TimeGrid::from_horizon(0.01, 1.5).unwrap();
        let ens = synthetic_bundles(30, 20, &g, 9);
        let truth: Vec<bool> = (0..50).map(|i| i >= 30).collect();
        let p = PhysParams::reference();
        let w = weights(&ens, &p).unwrap();
        let d = distance_matrix(&ens).unwrap();
        for seed in 0..10 {
            let part = bipartition_matrix(&d, &w, seed).unwrap();
            assert!(part.converged);
            assert_eq!(part.canonical_labels(), truth, "seed {seed}");
            assert!(part.objective_trace.windows(2).all(|t| t[1] <= t[0]));
            let flat = bipartition_matrix(&d, &vec![1.0; 50], seed).unwrap();
            assert_eq!(flat.canonical_labels(), truth);
        }
    }

    #[test]
    fn multiplicity_small_dimensions() {
        let e: f64 = 0.37;
        assert_relative_eq!(multiplicity_log(e, 2).unwrap(), (2.0 * std::f64::consts::PI * e).ln(), epsilon = 1e-12);
        assert_relative_eq!(multiplicity_log(1.0, 3).unwrap(), (4.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
        for (e, n, want) in
            [(5.0, 970, -396.70676904753448), (0.8, 970, -2172.4782074196469), (3.1, 120, 19.479962737515436)]
        {
            assert_relative_eq!(multiplicity_log(e, n).unwrap(), want, max_relative = 1e-12);
        }
        assert!(multiplicity_log(0.0, 3).is_err());
        assert!(multiplicity_log(-1.0, 3).is_err());
    }

    #[test]
    fn sigma_mode_examples() {
        assert_relative_eq!(sigma_from_mode(99f64.sqrt(), 100).unwrap(), 1.0, epsilon = 1e-15);
        assert!(sigma_from_mode(1.0, 1).is_err());
    }

    fn half_normal_distances(sigma: f64, n: usize, count: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).unwrap();
        (0..count).map(|_| (0..n).map(|_| normal.sample(&mut rng).powi(2)).sum::<f64>().sqrt()).collect()
    }

    #[test]
    fn sigma_recovered_from_synthetic_deviations() {
        let d = half_normal_distances(0.3, 100, 20000, 5);
        let h = DistanceHistogram::build(&d, 100).unwrap();
        assert!(h.counts.len() >= MIN_BINS);
        assert!((h.sigma - 0.3).abs() < 0.05 * 0.3, "σ = {}", h.sigma);
    }

    #[test]
    fn amplitude_fit_back_from_exact_model() {
        // radius of an N-dimensional isotropic Gaussian follows the model with P(0) = (2πσ²)^{−N/2}
        let n = 20;
        let d = half_normal_distances(0.3, n, 50000, 6);
        let h = DistanceHistogram::build(&d, n).unwrap();
        let want = -0.5 * n as f64 * (2.0 * std::f64::consts::PI * h.sigma * h.sigma).ln();
        assert!((h.ln_p0 - want).abs() < 0.05, "{} vs {want}", h.ln_p0);
        assert!((h.sigma - 0.3).abs() < 0.003);
    }

    #[test]
    fn exact_model_histogram_peaks_at_mode() {
        let (sigma, n) = (0.2, 50usize);
        let edges: Vec<f64> = (0..=400).map(|k| 0.5 + 1.5 * k as f64 / 400.0).collect();
        let ln_h: Vec<f64> = edges
            .windows(2)
            .map(|w| {
                let e = 0.5 * (w[0] + w[1]);
                -e * e / (2.0 * sigma * sigma) + multiplicity_log(e, n).unwrap()
            })
            .collect();
        let top = ln_h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let counts: Vec<usize> = ln_h.iter().map(|v| (1e6 * (v - top).exp()).round() as usize).collect();
        let mode = histogram_mode(&edges, &counts, n);
        assert!((mode - sigma * ((n - 1) as f64).sqrt()).abs() < 0.1 * (edges[1] - edges[0]), "{mode}");
        let h = DistanceHistogram::with_edges(&[], edges.clone(), n);
        assert!(h.is_err());
    }

    #[test]
    fn identical_histograms_ratio_one() {
        let d = half_normal_distances(0.3, 100, 5000, 1);
        let (a, b) = DistanceHistogram::pair(&d, &d, 100).unwrap();
        let fit = fit_relative_probability(&a, &b).unwrap();
        assert_eq!(fit.log_ratio, 0.0);
        assert_relative_eq!(fit.ratio(), 1.0);
    }

    #[test]
    fn planted_ratio_recovered() {
        // same σ, 2.5× as many draws in the first set
        let d1 = half_normal_distances(0.3, 100, 25000, 2);
        let d2 = half_normal_distances(0.3, 100, 10000, 3);
        let (h1, h2) = DistanceHistogram::pair(&d1, &d2, 100).unwrap();
        let fit = fit_relative_probability(&h1, &h2).unwrap();
        assert!((fit.log_ratio - 2.5f64.ln()).abs() < 2.0 * fit.std_err, "{fit:?}");
    }

    #[test]
    fn too_few_overlapping_bins() {
        let d1 = [1.0, 1.1, 1.2, 1.3, 1.4];
        let d2 = [5.0, 5.1, 5.2, 5.3, 5.4];
        let (h1, h2) = DistanceHistogram::pair(&d1, &d2, 4).unwrap();
        assert!(matches!(fit_relative_probability(&h1, &h2), Err(Error::InsufficientBins { .. })));
    }

    #[test]
    fn histogram_csv_has_metadata() {
        let d = half_normal_distances(0.3, 20, 500, 4);
        let h = DistanceHistogram::build(&d, 20).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# N = 20\n# sigma = "));
        assert!(text.contains("E_lo,E_hi,count\n"));
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), h.counts.len() + 1);
    }

    #[test]
    fn partition_ndjson_lines() {
        let g = TimeGrid::new(0.01, 10).unwrap();
        let ens = synthetic_bundles(3, 2, &g, 3);
        let part = bipartition(&ens, &[1.0; 5], 1).unwrap();
        let mut buf = Vec::new();
        part.write_ndjson(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["index"], 0);
    }
}
