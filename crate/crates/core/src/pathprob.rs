//! Path-probability ranking of post-selected trajectories and the two empirical
//! most-likely-path estimators (closest-by-distance and most-probable record).

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::csv_error;
use crate::params::{BlochState, PhysParams, TimeGrid};
use crate::sde::Trajectory;

/// Log density of the homodyne record given the states it was conditioned on:
/// Σ_k ln N(dI_k; √η γ x_k dt, γ dt), constants included.
pub fn log_path_probability(t: &Trajectory, p: &PhysParams) -> Result<f64> {
    t.validate()?;
    let dt = t.grid.dt;
    let var = p.gamma * dt;
    let norm = -0.5 * (2.0 * PI * var).ln();
    let mean_scale = p.eta.sqrt() * p.gamma * dt;
    Ok(t.record
        .iter()
        .zip(&t.states)
        .map(|(di, s)| {
            let r = di - mean_scale * s.x;
            norm - r * r / (2.0 * var)
        })
        .sum())
}

fn same_grid(a: &TimeGrid, b: &TimeGrid) -> Result<()> {
    if a.n_steps != b.n_steps || (a.dt - b.dt).abs() > 1e-15 * a.dt.max(b.dt) {
        return Err(Error::GridMismatch(format!(
            "{} steps of {} μs vs {} steps of {} μs",
            a.n_steps, a.dt, b.n_steps, b.dt
        )));
    }
    Ok(())
}

fn state_distance(a: &[BlochState], b: &[BlochState]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u.dist2_xz(v)).sum()
}

/// Σ_k [(x_{a,k} − x_{b,k})² + (z_{a,k} − z_{b,k})²] over all stored states.
pub fn euclid_distance(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    same_grid(&a.grid, &b.grid)?;
    if a.states.len() != b.states.len() {
        return Err(Error::GridMismatch(format!("{} vs {} states", a.states.len(), b.states.len())));
    }
    Ok(state_distance(&a.states, &b.states))
}

fn check_ensemble(ens: &[Trajectory], need: usize) -> Result<()> {
    if ens.len() < need {
        return Err(Error::TooFewTrajectories { need, got: ens.len() });
    }
    for t in ens {
        same_grid(&ens[0].grid, &t.grid)?;
        t.validate()?;
    }
    Ok(())
}

/// d_i = (1/(M−1)) Σ_{j≠i} euclid_distance(i, j).
pub fn mean_distance(i: usize, ens: &[Trajectory]) -> Result<f64> {
    check_ensemble(ens, 2)?;
    if i >= ens.len() {
        return Err(Error::InvalidParams(format!("index {i} out of {} trajectories", ens.len())));
    }
    let s: f64 =
        ens.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, b)| state_distance(&ens[i].states, &b.states)).sum();
    Ok(s / (ens.len() - 1) as f64)
}

/// All d_i, computed in parallel over rows.
pub fn mean_distances(ens: &[Trajectory]) -> Result<Vec<f64>> {
    check_ensemble(ens, 2)?;
    let m = ens.len();
    Ok((0..m)
        .into_par_iter()
        .map(|i| {
            let s: f64 = (0..m).filter(|&j| j != i).map(|j| state_distance(&ens[i].states, &ens[j].states)).sum();
            s / (m - 1) as f64
        })
        .collect())
}

/// Shape of the acceptance window around a boundary state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// |Δx| ≤ tol and |Δz| ≤ tol.
    #[default]
    Box,
    /// Δx² + Δz² ≤ tol².
    Disc,
}

impl Window {
    pub fn accepts(self, s: &BlochState, target: &BlochState, tol: f64) -> bool {
        let (dx, dz) = (s.x - target.x, s.z - target.z);
        match self {
            Window::Box => dx.abs() <= tol && dz.abs() <= tol,
            Window::Disc => dx * dx + dz * dz <= tol * tol,
        }
    }
}

/// Boundary conditions that a trajectory must meet to be kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostselectRule {
    pub initial: BlochState,
    #[serde(rename = "final")]
    pub final_state: BlochState,
    /// μs
    pub t_final: f64,
    pub tol: f64,
    #[serde(default)]
    pub window: Window,
}

impl PostselectRule {
    pub fn new(initial: BlochState, final_state: BlochState, t_final: f64, tol: f64) -> Result<Self> {
        let rule = Self { initial, final_state, t_final, tol, window: Window::Box };
        rule.check()?;
        Ok(rule)
    }

    pub fn with_window(self, window: Window) -> Self {
        Self { window, ..self }
    }

    fn check(&self) -> Result<()> {
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::InvalidParams(format!("selection tolerance must be positive, got {}", self.tol)));
        }
        if !(self.t_final > 0.0) {
            return Err(Error::InvalidParams(format!("selection time must be positive, got {}", self.t_final)));
        }
        Ok(())
    }

    /// Whether a final state falls in the window (the initial state is not checked).
    pub fn accepts_final(&self, s: &BlochState) -> bool {
        self.window.accepts(s, &self.final_state, self.tol)
    }

    /// Whether the trajectory meets both boundary conditions on `grid`.
    pub fn accepts(&self, t: &Trajectory) -> Result<bool> {
        let k = t.grid.index_of(self.t_final).ok_or_else(|| {
            Error::GridMismatch(format!("selection time {} μs is not a grid point of dt = {}", self.t_final, t.grid.dt))
        })?;
        let fin = t.states.get(k).ok_or_else(|| Error::GridMismatch(format!("grid index {k} beyond trajectory")))?;
        Ok(self.window.accepts(&t.states[0], &self.initial, self.tol) && self.accepts_final(fin))
    }
}

/// Keeps the trajectories meeting `rule`, preserving order. An empty result is
/// not an error.
pub fn postselect(ens: &[Trajectory], rule: &PostselectRule) -> Result<Vec<Trajectory>> {
    rule.check()?;
    let mut out = Vec::new();
    for t in ens {
        if rule.accepts(t)? {
            out.push(t.clone());
        }
    }
    Ok(out)
}

/// How an [`MlpEstimate`] was formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimateMethod {
    Distance,
    Probability,
    Mean,
}

/// Pointwise average of a set of trajectories with its spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpEstimate {
    pub grid: TimeGrid,
    pub mean: Vec<BlochState>,
    /// Per-time sample standard deviation of x.
    pub x_std: Vec<f64>,
    /// Per-time sample standard deviation of z.
    pub z_std: Vec<f64>,
    pub members: usize,
    pub method: EstimateMethod,
    /// Seeds of the averaged trajectories, in ranking order.
    pub member_seeds: Vec<u64>,
}

#[derive(Serialize)]
struct EstimateRow {
    t: f64,
    x_mean: f64,
    z_mean: f64,
    x_std: f64,
    z_std: f64,
    n_members: usize,
}

impl MlpEstimate {
    /// Averages `members` (indices into `ens`).
    pub fn from_members(ens: &[Trajectory], members: &[usize], method: EstimateMethod) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::TooFewTrajectories { need: 1, got: 0 });
        }
        let grid = ens[members[0]].grid;
        let n_pts = grid.n_points();
        let m = members.len() as f64;
        let mut mean = Vec::with_capacity(n_pts);
        let mut x_std = Vec::with_capacity(n_pts);
        let mut z_std = Vec::with_capacity(n_pts);
        for k in 0..n_pts {
            let (mut sx, mut sy, mut sz) = (0.0, 0.0, 0.0);
            for &i in members {
                let s = ens[i].states[k];
                sx += s.x;
                sy += s.y;
                sz += s.z;
            }
            let (mx, mz) = (sx / m, sz / m);
            let (mut vx, mut vz) = (0.0, 0.0);
            for &i in members {
                let s = ens[i].states[k];
                vx += (s.x - mx).powi(2);
                vz += (s.z - mz).powi(2);
            }
            let denom = (m - 1.0).max(1.0);
            mean.push(BlochState { x: mx, y: sy / m, z: mz });
            x_std.push((vx / denom).sqrt());
            z_std.push((vz / denom).sqrt());
        }
        Ok(Self {
            grid,
            mean,
            x_std,
            z_std,
            members: members.len(),
            method,
            member_seeds: members.iter().map(|&i| ens[i].seed).collect(),
        })
    }

    /// Fraction of time points where `reference` lies within one standard
    /// deviation of the estimate in both x and z.
    pub fn band_coverage(&self, reference: &[BlochState]) -> Result<f64> {
        if reference.len() != self.mean.len() {
            return Err(Error::GridMismatch(format!("{} reference points vs {}", reference.len(), self.mean.len())));
        }
        let inside = (0..self.mean.len())
            .filter(|&k| {
                let (m, r) = (self.mean[k], reference[k]);
                (m.x - r.x).abs() <= self.x_std[k] + 1e-12 && (m.z - r.z).abs() <= self.z_std[k] + 1e-12
            })
            .count();
        Ok(inside as f64 / self.mean.len() as f64)
    }

    /// Mean over time of the two component standard deviations.
    pub fn mean_band(&self) -> f64 {
        let n = self.mean.len() as f64;
        self.x_std.iter().zip(&self.z_std).map(|(a, b)| 0.5 * (a + b)).sum::<f64>() / n
    }

    /// RMS separation from another path on the same grid.
    pub fn rms_gap(&self, other: &[BlochState]) -> f64 {
        (state_distance(&self.mean, other) / self.mean.len() as f64).sqrt()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for k in 0..self.mean.len() {
            out.serialize(EstimateRow {
                t: self.grid.time(k),
                x_mean: self.mean[k].x,
                z_mean: self.mean[k].z,
                x_std: self.x_std[k],
                z_std: self.z_std[k],
                n_members: self.members,
            })
            .map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn check_frac(frac: f64) -> Result<()> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::InvalidParams(format!("fraction must lie in (0, 1], got {frac}")));
    }
    Ok(())
}

/// Number of members kept for fraction `frac` of `m`, at least one.
pub fn top_count(m: usize, frac: f64) -> usize {
    ((frac * m as f64 - 1e-9).ceil() as usize).clamp(1, m)
}

/// Indices sorted by ascending `key`, ties broken by seed.
fn rank_ascending(ens: &[Trajectory], key: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ens.len()).collect();
    idx.sort_by(|&a, &b| key[a].total_cmp(&key[b]).then(ens[a].seed.cmp(&ens[b].seed)));
    idx
}

/// Plain pointwise mean of the whole ensemble.
pub fn plain_mean(ens: &[Trajectory]) -> Result<MlpEstimate> {
    check_ensemble(ens, 1)?;
    let all: Vec<usize> = (0..ens.len()).collect();
    MlpEstimate::from_members(ens, &all, EstimateMethod::Mean)
}

/// Average of the ⌈frac·M⌉ trajectories with the smallest mean distance to the
/// rest of the ensemble.
pub fn mlp_by_distance(ens: &[Trajectory], frac: f64) -> Result<MlpEstimate> {
    check_frac(frac)?;
    check_ensemble(ens, 1)?;
    if ens.len() == 1 {
        return MlpEstimate::from_members(ens, &[0], EstimateMethod::Distance);
    }
    let d = mean_distances(ens)?;
    let order = rank_ascending(ens, &d);
    MlpEstimate::from_members(ens, &order[..top_count(ens.len(), frac)], EstimateMethod::Distance)
}

/// Average of the ⌈frac·M⌉ trajectories with the highest record log-probability.
pub fn mlp_by_probability(ens: &[Trajectory], p: &PhysParams, frac: f64) -> Result<MlpEstimate> {
    check_frac(frac)?;
    check_ensemble(ens, 1)?;
    let neg: Vec<f64> = ens.par_iter().map(|t| log_path_probability(t, p).map(|v| -v)).collect::<Result<_>>()?;
    let order = rank_ascending(ens, &neg);
    MlpEstimate::from_members(ens, &order[..top_count(ens.len(), frac)], EstimateMethod::Probability)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{simulate_ensemble, Scheme};
    use approx::assert_relative_eq;

    fn toy(states: &[(f64, f64)], record: &[f64], seed: u64, dt: f64) -> Trajectory {
        Trajectory {
            grid: TimeGrid::new(dt, record.len()).unwrap(),
            states: states.iter().map(|&(x, z)| BlochState::xz(x, z)).collect(),
            record: record.to_vec(),
            seed,
            clamp_events: 0,
        }
    }

    #[test]
    fn zero_residual_record_is_maximal() {
        let p = PhysParams::reference();
        let dt = 0.01;
        let xs = [0.1, -0.2, 0.3, 0.0];
        let states: Vec<(f64, f64)> = xs.iter().map(|&x| (x, 0.0)).collect();
        let rec: Vec<f64> = xs[..3].iter().map(|&x| p.eta.sqrt() * p.gamma * x * dt).collect();
        let best = log_path_probability(&toy(&states, &rec, 0, dt), &p).unwrap();
        assert_relative_eq!(best, -1.5 * (2.0 * PI * p.gamma * dt).ln(), epsilon = 1e-12);
        let mut worse = rec.clone();
        worse[1] += 1e-3;
        assert!(log_path_probability(&toy(&states, &worse, 0, dt), &p).unwrap() < best);
    }

    #[test]
    fn single_residual_difference() {
        let p = PhysParams::reference();
        let dt = 0.002;
        let states = [(0.2, 0.1), (0.1, 0.2), (0.0, 0.3), (0.0, 0.3)];
        let mu1 = p.eta.sqrt() * p.gamma * 0.1 * dt;
        let at_mean = [0.001, mu1, -0.002];
        let r = 0.0123;
        let shifted = [0.001, mu1 + r, -0.002];
        let a = log_path_probability(&toy(&states, &shifted, 0, dt), &p).unwrap();
        let b = log_path_probability(&toy(&states, &at_mean, 0, dt), &p).unwrap();
        assert_relative_eq!(a - b, -r * r / (2.0 * p.gamma * dt), epsilon = 1e-10);
    }

    #[test]
    fn three_step_hand_sum() {
        let p = PhysParams::new(1.0, 1.0, 0.0).unwrap();
        let dt = 0.5;
        let t = toy(&[(0.0, 1.0), (1.0, 0.0), (0.5, 0.0), (0.0, 0.0)], &[0.0, 0.5, 1.0], 0, dt);
        // means: 0, 0.5, 0.25; variance 0.5
        let ln = |r: f64| -0.5 * (PI).ln() - r * r;
        assert_relative_eq!(log_path_probability(&t, &p).unwrap(), ln(0.0) + ln(0.0) + ln(0.75), epsilon = 1e-14);
    }

    #[test]
    fn length_mismatch_rejected() {
        let p = PhysParams::reference();
        let mut t = toy(&[(0.0, 1.0), (0.0, 1.0)], &[0.0], 0, 0.01);
        t.record.push(0.0);
        assert!(matches!(log_path_probability(&t, &p), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn distance_examples() {
        let a = toy(&[(0.0, 0.0), (0.0, 0.0)], &[0.0], 0, 0.1);
        let b = toy(&[(0.0, 0.0), (0.3, 0.4)], &[0.0], 1, 0.1);
        assert_eq!(euclid_distance(&a, &a).unwrap(), 0.0);
        assert_relative_eq!(euclid_distance(&a, &b).unwrap(), 0.25, epsilon = 1e-15);
        let c = toy(&[(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)], &[0.0, 0.0], 2, 0.1);
        assert!(euclid_distance(&a, &c).is_err());
    }

    #[test]
    fn mean_distance_examples() {
        let a = toy(&[(0.0, 0.0), (0.0, 0.0)], &[0.0], 0, 0.1);
        let b = toy(&[(0.0, 0.0), (1.0, 0.0)], &[0.0], 1, 0.1);
        let c = toy(&[(0.0, 0.0), (0.0, 2.0)], &[0.0], 2, 0.1);
        let two = [a.clone(), b.clone()];
        assert_eq!(mean_distance(0, &two).unwrap(), 1.0);
        assert_eq!(mean_distance(1, &two).unwrap(), 1.0);
        let three = [a.clone(), b.clone(), c.clone()];
        // d(a,b)=1, d(a,c)=4, d(b,c)=5
        assert_relative_eq!(mean_distance(0, &three).unwrap(), 2.5);
        assert_relative_eq!(mean_distance(1, &three).unwrap(), 3.0);
        assert_relative_eq!(mean_distance(2, &three).unwrap(), 4.5);
        assert_eq!(mean_distances(&three).unwrap(), vec![2.5, 3.0, 4.5]);
        let four = [a.clone(), b, c, a];
        assert!(mean_distance(0, &four).unwrap() < 2.5);
        assert!(mean_distance(0, &[three[0].clone()]).is_err());
    }

    fn small_ensemble(n: usize) -> Vec<Trajectory> {
        let p = PhysParams::reference();
        let g = TimeGrid::from_horizon(0.01, 0.5).unwrap();
        simulate_ensemble(Scheme::Kraus, BlochState::xz(0.0, -0.97), &p, &g, n, 11)
    }

    #[test]
    fn postselect_wide_window_keeps_all_and_is_idempotent() {
        let ens = small_ensemble(40);
        let all = PostselectRule::new(BlochState::xz(0.0, -0.97), BlochState::GROUND, 0.5, 2.0).unwrap();
        assert_eq!(postselect(&ens, &all).unwrap().len(), 40);
        let some = PostselectRule::new(BlochState::xz(0.0, -0.97), ens[3].final_state(), 0.5, 0.2).unwrap();
        let once = postselect(&ens, &some).unwrap();
        assert!(!once.is_empty());
        assert_eq!(postselect(&once, &some).unwrap(), once);
        let disc = some.with_window(Window::Disc);
        assert!(postselect(&ens, &disc).unwrap().len() <= once.len());
    }

    #[test]
    fn unreachable_final_is_empty() {
        let ens = small_ensemble(20);
        let g = TimeGrid::from_horizon(0.01, 0.01).unwrap();
        let short: Vec<Trajectory> = ens
            .iter()
            .map(|t| Trajectory {
                grid: g,
                states: t.states[..2].to_vec(),
                record: t.record[..1].to_vec(),
                ..t.clone()
            })
            .collect();
        let rule = PostselectRule::new(BlochState::xz(0.0, -0.97), BlochState::GROUND, 0.01, 0.05).unwrap();
        assert!(postselect(&short, &rule).unwrap().is_empty());
    }

    #[test]
    fn rule_validation() {
        assert!(PostselectRule::new(BlochState::GROUND, BlochState::GROUND, 1.0, 0.0).is_err());
        let ens = small_ensemble(2);
        let off_grid = PostselectRule::new(BlochState::xz(0.0, -0.97), BlochState::GROUND, 0.2345, 0.1).unwrap();
        assert!(postselect(&ens, &off_grid).is_err());
    }

    #[test]
    fn frac_one_is_plain_mean() {
        let p = PhysParams::reference();
        let ens = small_ensemble(30);
        let plain = plain_mean(&ens).unwrap();
        let by_d = mlp_by_distance(&ens, 1.0).unwrap();
        let by_p = mlp_by_probability(&ens, &p, 1.0).unwrap();
        for k in 0..plain.mean.len() {
            assert_relative_eq!(plain.mean[k].x, by_d.mean[k].x, epsilon = 1e-12);
            assert_relative_eq!(plain.mean[k].z, by_p.mean[k].z, epsilon = 1e-12);
        }
        assert_eq!(by_d.members, 30);
        assert!(mlp_by_distance(&ens, 0.0).is_err());
        assert!(mlp_by_distance(&[], 0.05).is_err());
    }

    #[test]
    fn identical_trajectories_give_that_trajectory() {
        let p = PhysParams::reference();
        let one = small_ensemble(1).remove(0);
        let ens = vec![one.clone(); 7];
        let est = mlp_by_probability(&ens, &p, 0.3).unwrap();
        assert_eq!(est.members, 3);
        for (m, s) in est.mean.iter().zip(&one.states) {
            assert!((m.x - s.x).abs() < 1e-15 && (m.z - s.z).abs() < 1e-15);
        }
        assert!(est.x_std.iter().all(|&s| s < 1e-15));
    }

    #[test]
    fn denser_bundle_wins() {
        // 12 tightly packed paths around z = 0.5 and 4 spread paths around z = −0.5
        let mut ens = Vec::new();
        for i in 0..12 {
            let z = 0.5 + 0.001 * i as f64;
            ens.push(toy(&[(0.0, z); 5], &[0.0; 4], i, 0.1));
        }
        for i in 0..4 {
            let z = -0.5 + 0.2 * i as f64;
            ens.push(toy(&[(0.0, z); 5], &[0.0; 4], 100 + i, 0.1));
        }
        let est = mlp_by_distance(&ens, 0.1).unwrap();
        assert_eq!(est.members, 2);
        assert!((est.mean[2].z - 0.5).abs() < 0.02);
    }

    #[test]
    fn estimate_csv_columns() {
        let ens = small_ensemble(3);
        let mut buf = Vec::new();
        plain_mean(&ens).unwrap().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x_mean,z_mean,x_std,z_std,n_members\n"));
        assert_eq!(text.lines().count(), 52);
    }

    #[test]
    fn top_count_rounding() {
        assert_eq!(top_count(100, 0.05), 5);
        assert_eq!(top_count(101, 0.05), 6);
        assert_eq!(top_count(3, 0.05), 1);
        assert_eq!(top_count(10, 1.0), 10);
    }
}
