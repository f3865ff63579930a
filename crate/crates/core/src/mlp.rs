//! Most-likely paths (MLPs) of the monitored qubit in the x–z plane.
//!
//! The reduced stochastic Hamiltonian in (x, z, p_x, p_z) is
//!
//! ```text
//! H = p_z F_z + p_x F_x − r²/2 + √(ηγ) x r − ηγ(1−z)/2
//! F_z = Ωx + γ(1−z)(1 − η(1−z)/2) + √(ηγ) x(1−z) r
//! F_x = −Ωz − (γ/2) x (1 − η(1−z)) + √(ηγ)(1−z−x²) r
//! ```
//!
//! Stationarity in r gives the optimal readout
//! r* = √(ηγ)[x + p_x(1−z−x²) + p_z x(1−z)], and Hamilton's equations with r = r*
//! are the MLP equations of motion. The action accumulates
//! S = ∫(−q̇·p + H) dt = ∫(−r²/2 + √(ηγ) x r − ηγ(1−z)/2) dt.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::csv_error;
use crate::ode::{Dopri5, OdeFailure, Tolerance};
use crate::params::{BlochState, PhysParams, TimeGrid};

/// Local error tolerance of MLP integration.
pub const MLP_TOL: f64 = 1e-10;
/// Shots whose momenta exceed this magnitude are abandoned as singular.
pub const MOMENTUM_LIMIT: f64 = 1e3;

/// Point of the four-dimensional MLP phase space.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: f64,
    pub z: f64,
    pub px: f64,
    pub pz: f64,
}

impl PhasePoint {
    pub const fn new(x: f64, z: f64, px: f64, pz: f64) -> Self {
        Self { x, z, px, pz }
    }

    /// Starts at state `q` with initial momenta `(px, pz)`.
    pub fn at(q: BlochState, px: f64, pz: f64) -> Self {
        Self { x: q.x, z: q.z, px, pz }
    }

    pub fn state(&self) -> BlochState {
        BlochState::xz(self.x, self.z)
    }

    fn to_array(self) -> [f64; 4] {
        [self.x, self.z, self.px, self.pz]
    }

    fn from_slice(v: &[f64]) -> Self {
        Self { x: v[0], z: v[1], px: v[2], pz: v[3] }
    }
}

/// State-space velocity (F_x, F_z) for an arbitrary readout r.
fn velocity(pt: &PhasePoint, r: f64, p: &PhysParams) -> (f64, f64) {
    let k = p.root_eta_gamma();
    let (x, z) = (pt.x, pt.z);
    let u = 1.0 - z;
    let fx = -p.omega_rabi * z - 0.5 * p.gamma * x * (1.0 - p.eta * u) + k * (u - x * x) * r;
    let fz = p.omega_rabi * x + p.gamma * u * (1.0 - 0.5 * p.eta * u) + k * x * u * r;
    (fx, fz)
}

/// Reduced stochastic Hamiltonian for readout `r`.
pub fn hamiltonian(pt: &PhasePoint, r: f64, p: &PhysParams) -> f64 {
    let (fx, fz) = velocity(pt, r, p);
    pt.px * fx + pt.pz * fz - 0.5 * r * r + p.root_eta_gamma() * pt.x * r - 0.5 * p.eta * p.gamma * (1.0 - pt.z)
}

/// Hamiltonian of the full Bloch ball including the y quadrature and its momentum.
/// At y = 0 the p_y bracket vanishes identically.
pub fn hamiltonian_with_y(pt: &PhasePoint, y: f64, py: f64, r: f64, p: &PhysParams) -> f64 {
    let u = 1.0 - pt.z;
    let y_bracket = -0.5 * p.gamma * y * (1.0 - p.eta * u) - p.root_eta_gamma() * pt.x * y * r;
    hamiltonian(pt, r, p) + py * y_bracket
}

/// H with the optimal readout substituted; the conserved stochastic energy.
pub fn energy(pt: &PhasePoint, p: &PhysParams) -> f64 {
    hamiltonian(pt, optimal_readout(pt, p), p)
}

/// Readout r* that makes H stationary.
pub fn optimal_readout(pt: &PhasePoint, p: &PhysParams) -> f64 {
    let u = 1.0 - pt.z;
    p.root_eta_gamma() * (pt.x + pt.px * (u - pt.x * pt.x) + pt.pz * pt.x * u)
}

/// Rate of change of the action along an MLP, −q̇·p + H.
pub fn action_rate(pt: &PhasePoint, p: &PhysParams) -> f64 {
    let r = optimal_readout(pt, p);
    -0.5 * r * r + p.root_eta_gamma() * pt.x * r - 0.5 * p.eta * p.gamma * (1.0 - pt.z)
}

/// Time derivatives (ẋ, ż, ṗ_x, ṗ_z) of the MLP equations of motion.
pub fn eom_rhs(pt: &PhasePoint, p: &PhysParams) -> [f64; 4] {
    let k = p.root_eta_gamma();
    let r = optimal_readout(pt, p);
    let (x, z, px, pz) = (pt.x, pt.z, pt.px, pt.pz);
    let u = 1.0 - z;
    let (xdot, zdot) = velocity(pt, r, p);
    let pxdot = -pz * (p.omega_rabi + k * u * r) + px * (0.5 * p.gamma * (1.0 - p.eta * u) + 2.0 * k * x * r) - k * r;
    let pzdot = pz * (p.gamma * (1.0 - p.eta * u) + k * x * r)
        + px * (p.omega_rabi + 0.5 * p.gamma * p.eta * x + k * r)
        - 0.5 * p.eta * p.gamma;
    [xdot, zdot, pxdot, pzdot]
}

/// Which substitution is applied when evaluating the printed four-dimensional
/// Hamiltonian written in the compact coordinate u.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UMapping {
    /// u = 1 + z, p_u = p_z
    OnePlusZ,
    /// u = 1 − z, p_u = −p_z
    OneMinusZ,
}

/// The reduced Hamiltonian exactly as printed in terms of (u, p_u).
pub fn literal_compact_hamiltonian(pt: &PhasePoint, r: f64, p: &PhysParams, mapping: UMapping) -> f64 {
    let (u, pu) = match mapping {
        UMapping::OnePlusZ => (1.0 + pt.z, pt.pz),
        UMapping::OneMinusZ => (1.0 - pt.z, -pt.pz),
    };
    let (g, e, om, k, x) = (p.gamma, p.eta, p.omega_rabi, p.root_eta_gamma(), pt.x);
    pu * (om * x + u * g * (1.0 - 2.0 * e + 0.5 * e * u) + k * x * r * (2.0 - u) + 2.0 * g * (e - 1.0))
        + pt.px * (-om * (1.0 - u) - 0.5 * g * x * (1.0 + e * u - 2.0 * e) + k * (2.0 - u - x * x) * r)
        - 0.5 * r * r
        + r * k * x
        - 0.5 * e * g * u
}

/// Largest |H_literal − H| over a deterministic set of phase points, for each
/// u-mapping. Zero would mean the printed compact form reproduces the equations
/// of motion used here.
pub fn compact_form_discrepancy(p: &PhysParams) -> [(UMapping, f64); 2] {
    let mut worst = [0.0f64; 2];
    for i in 0..400 {
        let f = |a: f64| ((i as f64 + 1.0) * a).sin();
        let pt = PhasePoint::new(0.7 * f(1.3), 0.7 * f(2.1), 2.0 * f(0.7), 2.0 * f(3.7));
        let r = 1.5 * f(5.3);
        let h = hamiltonian(&pt, r, p);
        for (w, m) in worst.iter_mut().zip([UMapping::OnePlusZ, UMapping::OneMinusZ]) {
            *w = w.max((literal_compact_hamiltonian(&pt, r, p, m) - h).abs());
        }
    }
    [(UMapping::OnePlusZ, worst[0]), (UMapping::OneMinusZ, worst[1])]
}

/// Deterministic extremal path sampled on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpPath {
    pub grid: TimeGrid,
    pub points: Vec<PhasePoint>,
    /// Optimal readout along the path, μs^−1/2.
    pub readout: Vec<f64>,
    /// Stochastic energy at t = 0, rad/μs.
    pub energy: f64,
    /// Accumulated action ∫(−q̇·p + H) dt.
    pub action: f64,
    /// Net number of extra revolutions about the x–z great circle relative to the
    /// shortest angular route between the endpoints.
    pub winding: i64,
}

impl MlpPath {
    pub fn start(&self) -> PhasePoint {
        self.points[0]
    }

    pub fn end(&self) -> PhasePoint {
        *self.points.last().expect("path has points")
    }

    pub fn states(&self) -> Vec<BlochState> {
        self.points.iter().map(PhasePoint::state).collect()
    }

    /// Energy along the path.
    pub fn energies(&self, p: &PhysParams) -> Vec<f64> {
        self.points.iter().map(|pt| energy(pt, p)).collect()
    }

    /// Largest |H(t) − E| relative to max(1, |E|).
    pub fn energy_drift(&self, p: &PhysParams) -> f64 {
        let scale = self.energy.abs().max(1.0);
        self.points.iter().map(|pt| (energy(pt, p) - self.energy).abs() / scale).fold(0.0, f64::max)
    }

    /// Action recomputed by the trapezoid rule on the stored samples.
    pub fn action_trapezoid(&self, p: &PhysParams) -> f64 {
        let rates: Vec<f64> = self.points.iter().map(|pt| action_rate(pt, p)).collect();
        rates.windows(2).map(|w| 0.5 * (w[0] + w[1]) * self.grid.dt).sum()
    }

    /// Columns t, x, z, p_x, p_z, r, H.
    pub fn write_csv<W: Write>(&self, p: &PhysParams, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "x", "z", "p_x", "p_z", "r", "H"]).map_err(csv_error)?;
        for (k, (pt, r)) in self.points.iter().zip(&self.readout).enumerate() {
            out.write_record([self.grid.time(k), pt.x, pt.z, pt.px, pt.pz, *r, energy(pt, p)].map(|v| v.to_string()))
                .map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Unwrapped polar angle θ = atan2(x, z) along the path.
    pub fn unwrapped_angle(&self) -> Vec<f64> {
        unwrap_angles(self.points.iter().map(|pt| pt.x.atan2(pt.z)))
    }
}

pub(crate) fn unwrap_angles(raw: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for a in raw {
        match out.last() {
            None => out.push(a),
            Some(&prev) => out.push(prev + ((a - prev + PI).rem_euclid(TAU) - PI)),
        }
    }
    out
}

fn winding_of(angles: &[f64]) -> i64 {
    let (first, last) = (angles[0], angles[angles.len() - 1]);
    let net = last - first;
    let principal = (net + PI).rem_euclid(TAU) - PI;
    ((net - principal) / TAU).round() as i64
}

fn singular(v: &[f64]) -> bool {
    v[2].abs() > MOMENTUM_LIMIT || v[3].abs() > MOMENTUM_LIMIT
}

pub(crate) fn ode_error(e: OdeFailure) -> Error {
    let reason = match e {
        OdeFailure::StepUnderflow { h, .. } => format!("step size underflow (h = {h:.3e})"),
        OdeFailure::Aborted { .. } => format!("momentum exceeded {MOMENTUM_LIMIT}"),
        OdeFailure::NonFinite { .. } => "non-finite state".to_string(),
    };
    Error::Integration { t: e.time(), reason }
}

/// Final phase point after evolving `start` for time `t` (no sampling).
pub fn flow_final(start: &PhasePoint, p: &PhysParams, t: f64) -> Result<PhasePoint> {
    let pp = *p;
    let rhs = move |v: &[f64; 4]| eom_rhs(&PhasePoint::from_slice(v), &pp);
    let mut v = start.to_array();
    Dopri5::new(rhs, Tolerance::uniform(MLP_TOL)).advance(&mut v, 0.0, t, &|v| singular(v)).map_err(ode_error)?;
    Ok(PhasePoint::from_slice(&v))
}

/// Integrates the MLP equations from `start` over `grid`, recording every grid
/// point and accumulating the action as an extra ODE component.
pub fn integrate_mlp(start: &PhasePoint, p: &PhysParams, grid: &TimeGrid) -> Result<MlpPath> {
    let pp = *p;
    let rhs = move |v: &[f64; 5]| {
        let pt = PhasePoint::from_slice(v);
        let d = eom_rhs(&pt, &pp);
        [d[0], d[1], d[2], d[3], action_rate(&pt, &pp)]
    };
    let mut stepper = Dopri5::new(rhs, Tolerance::uniform(MLP_TOL));
    let mut v = [start.x, start.z, start.px, start.pz, 0.0];
    let mut points = Vec::with_capacity(grid.n_points());
    points.push(*start);
    for k in 0..grid.n_steps {
        stepper.advance(&mut v, grid.time(k), grid.time(k + 1), &|v| singular(v)).map_err(ode_error)?;
        points.push(PhasePoint::from_slice(&v));
    }
    let readout = points.iter().map(|pt| optimal_readout(pt, p)).collect();
    let angles = unwrap_angles(points.iter().map(|pt| pt.x.atan2(pt.z)));
    Ok(MlpPath { grid: *grid, readout, energy: energy(start, p), action: v[4], winding: winding_of(&angles), points })
}

/// Search settings for [`shoot_bvp`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShootOptions {
    /// Inclusive bounds of the initial-momentum box, applied to both p_x and p_z.
    pub p_min: f64,
    pub p_max: f64,
    /// Nodes per axis of the coarse scan.
    pub n_grid: usize,
    /// Coarse local minima above this residual are not refined.
    pub coarse_threshold: f64,
    /// Accepted |q(T) − q_f|.
    pub tol: f64,
    /// Output sampling step of the returned paths, μs.
    pub dt_out: f64,
}

impl Default for ShootOptions {
    fn default() -> Self {
        Self {
            p_min: -10.0,
            p_max: 10.0,
            n_grid: 121,
            coarse_threshold: 0.5,
            tol: 1e-6,
            dt_out: crate::params::DEFAULT_DT,
        }
    }
}

impl ShootOptions {
    pub fn axis(&self) -> Vec<f64> {
        let n = self.n_grid.max(2);
        (0..n).map(|i| self.p_min + (self.p_max - self.p_min) * i as f64 / (n - 1) as f64).collect()
    }

    fn contains(&self, px: f64, pz: f64) -> bool {
        let slack = 1e-9 * (self.p_max - self.p_min);
        (self.p_min - slack..=self.p_max + slack).contains(&px)
            && (self.p_min - slack..=self.p_max + slack).contains(&pz)
    }
}

/// All MLPs found for one boundary-value problem.
#[derive(Debug, Clone)]
pub struct ShootResult {
    /// Distinct solutions, sorted by action (most probable first).
    pub solutions: Vec<MlpPath>,
    /// Smallest residual seen anywhere (scan or refinement).
    pub min_residual: f64,
    /// Scan nodes abandoned as singular.
    pub singular_shots: usize,
    /// Candidates handed to refinement.
    pub candidates: usize,
}

fn residual(q_i: BlochState, q_f: BlochState, t: f64, p: &PhysParams, px: f64, pz: f64) -> Option<[f64; 2]> {
    let end = flow_final(&PhasePoint::at(q_i, px, pz), p, t).ok()?;
    Some([end.x - q_f.x, end.z - q_f.z])
}

fn norm2(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

/// Levenberg–Marquardt iteration on the 2-D endpoint residual with central
/// finite-difference sensitivities. The damping keeps the step well defined
/// where the endpoint map is rank deficient.
fn refine(
    q_i: BlochState,
    q_f: BlochState,
    t: f64,
    p: &PhysParams,
    start: [f64; 2],
    tol: f64,
) -> Option<([f64; 2], f64)> {
    let res = |m: [f64; 2]| residual(q_i, q_f, t, p, m[0], m[1]);
    let mut m = start;
    let mut f = res(m)?;
    let mut fn_ = norm2(f);
    let mut mu = f64::NAN;
    for _ in 0..100 {
        if fn_ < tol * 1e-3 {
            break;
        }
        let mut jac = [[0.0; 2]; 2];
        for c in 0..2 {
            let h = 1e-6 * m[c].abs().max(1.0);
            let (mut hi, mut lo) = (m, m);
            hi[c] += h;
            lo[c] -= h;
            let (fp, fm) = (res(hi)?, res(lo)?);
            jac[0][c] = (fp[0] - fm[0]) / (2.0 * h);
            jac[1][c] = (fp[1] - fm[1]) / (2.0 * h);
        }
        // normal equations (JᵀJ + μI) δ = −Jᵀf
        let a00 = jac[0][0] * jac[0][0] + jac[1][0] * jac[1][0];
        let a01 = jac[0][0] * jac[0][1] + jac[1][0] * jac[1][1];
        let a11 = jac[0][1] * jac[0][1] + jac[1][1] * jac[1][1];
        let g0 = jac[0][0] * f[0] + jac[1][0] * f[1];
        let g1 = jac[0][1] * f[0] + jac[1][1] * f[1];
        if mu.is_nan() {
            mu = 1e-6 * a00.max(a11).max(1e-12);
        }
        let mut improved = false;
        while mu < 1e12 {
            let (b00, b11) = (a00 + mu, a11 + mu);
            let det = b00 * b11 - a01 * a01;
            let d = [-(b11 * g0 - a01 * g1) / det, -(-a01 * g0 + b00 * g1) / det];
            let len = d[0].hypot(d[1]);
            let scale = if len > 1.0 { 1.0 / len } else { 1.0 };
            let trial = [m[0] + scale * d[0], m[1] + scale * d[1]];
            if let Some(ft) = res(trial) {
                let nt = norm2(ft);
                if nt < fn_ {
                    m = trial;
                    f = ft;
                    fn_ = nt;
                    mu = (mu / 3.0).max(1e-15);
                    improved = true;
                    break;
                }
            }
            mu *= 4.0;
        }
        if !improved {
            break;
        }
    }
    Some((m, fn_))
}

fn rms_gap(a: &MlpPath, b: &MlpPath) -> f64 {
    let s: f64 = a.points.iter().zip(&b.points).map(|(u, v)| (u.x - v.x).powi(2) + (u.z - v.z).powi(2)).sum();
    (s / a.points.len() as f64).sqrt()
}

/// Finds every MLP from `q_i` to `q_f` in time `t` whose initial momenta lie in
/// the search box: coarse grid scan, refinement of residual local minima,
/// de-duplication, and ordering by action (descending), then initial momenta.
pub fn shoot_bvp(q_i: BlochState, q_f: BlochState, t: f64, p: &PhysParams, opts: &ShootOptions) -> Result<ShootResult> {
    if !(t >= 10.0 * opts.dt_out) {
        return Err(Error::InvalidParams(format!(
            "horizon {t} μs is shorter than ten output steps ({} μs)",
            10.0 * opts.dt_out
        )));
    }
    if !(opts.p_max > opts.p_min) || opts.n_grid < 2 {
        return Err(Error::InvalidParams("momentum box must be non-empty with n_grid >= 2".into()));
    }
    let grid = TimeGrid::from_horizon(opts.dt_out, t)?;
    let axis = opts.axis();
    let n = axis.len();
    let scan: Vec<Option<f64>> = (0..n * n)
        .into_par_iter()
        .map(|idx| residual(q_i, q_f, t, p, axis[idx / n], axis[idx % n]).map(norm2))
        .collect();
    let singular_shots = scan.iter().filter(|r| r.is_none()).count();
    let mut min_residual = scan.iter().flatten().copied().fold(f64::INFINITY, f64::min);

    let mut candidates = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let Some(here) = scan[i * n + j] else { continue };
            if here > opts.coarse_threshold {
                continue;
            }
            let mut is_min = true;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    if (di, dj) == (0, 0) || a < 0 || b < 0 || a >= n as i64 || b >= n as i64 {
                        continue;
                    }
                    if let Some(v) = scan[a as usize * n + b as usize] {
                        if v < here {
                            is_min = false;
                        }
                    }
                }
            }
            if is_min {
                candidates.push([axis[i], axis[j]]);
            }
        }
    }

    let refined: Vec<([f64; 2], f64)> =
        candidates.par_iter().filter_map(|&c| refine(q_i, q_f, t, p, c, opts.tol)).collect();
    for r in &refined {
        min_residual = min_residual.min(r.1);
    }

    let mut solutions: Vec<MlpPath> = Vec::new();
    for (m, res) in refined {
        if res > opts.tol || !opts.contains(m[0], m[1]) {
            continue;
        }
        let Ok(path) = integrate_mlp(&PhasePoint::at(q_i, m[0], m[1]), p, &grid) else { continue };
        // identical state paths carry identical readouts and actions, so momenta
        // differing only along a degenerate direction describe the same MLP
        let duplicate = solutions.iter().any(|s| rms_gap(s, &path) < 1e-3);
        if !duplicate {
            solutions.push(path);
        }
    }
    solutions.sort_by(|a, b| {
        b.action
            .total_cmp(&a.action)
            .then(a.start().px.total_cmp(&b.start().px))
            .then(a.start().pz.total_cmp(&b.start().pz))
    });
    Ok(ShootResult { solutions, min_residual, singular_shots, candidates: candidates.len() })
}

/// S_a − S_b for two MLPs sharing endpoints and duration; exp of the result is
/// the predicted probability ratio.
pub fn action_difference(a: &MlpPath, b: &MlpPath) -> Result<f64> {
    let close = |u: BlochState, v: BlochState| (u.x - v.x).abs() < 1e-5 && (u.z - v.z).abs() < 1e-5;
    if (a.grid.total() - b.grid.total()).abs() > 1e-9 {
        return Err(Error::EndpointMismatch(format!("durations {} vs {}", a.grid.total(), b.grid.total())));
    }
    if !close(a.start().state(), b.start().state()) || !close(a.end().state(), b.end().state()) {
        return Err(Error::EndpointMismatch(format!(
            "{} → {} vs {} → {}",
            a.start().state(),
            a.end().state(),
            b.start().state(),
            b.end().state()
        )));
    }
    Ok(a.action - b.action)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn pt_strategy() -> impl Strategy<Value = PhasePoint> {
        (0.0f64..0.95, 0.0..TAU, -3.0f64..3.0, -3.0f64..3.0)
            .prop_map(|(rad, ang, px, pz)| PhasePoint::new(rad * ang.sin(), rad * ang.cos(), px, pz))
    }

    #[test]
    fn hamiltonian_at_zero_momentum() {
        let p = PhysParams::reference();
        let pt = PhasePoint::new(0.0, 0.3, 0.0, 0.0);
        assert_relative_eq!(hamiltonian(&pt, 0.0, &p), -0.5 * p.eta * p.gamma * 0.7, epsilon = 1e-15);
    }

    #[test]
    fn readout_examples() {
        let p = PhysParams::reference();
        assert_eq!(optimal_readout(&PhasePoint::new(0.0, 0.4, 0.0, 2.0), &p), 0.0);
        let unit = PhysParams::new(1.0, 1.0, 3.0).unwrap();
        assert_relative_eq!(optimal_readout(&PhasePoint::new(0.0, 0.0, 1.0, 0.0), &unit), 1.0);
    }

    #[test]
    fn eom_at_ground_without_drive() {
        let p = PhysParams::new(1.42, 0.45, 0.0).unwrap();
        let d = eom_rhs(&PhasePoint::new(0.0, 1.0, 0.0, 0.0), &p);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
        assert_relative_eq!(d[3], -0.5 * p.eta * p.gamma, epsilon = 1e-15);
    }

    #[test]
    fn zero_momentum_drift_is_stratonovich_sme_drift() {
        // with p = 0 the readout is √(ηγ)x and the state equations reduce to the
        // SME drift plus the Stratonovich correction
        let p = PhysParams::reference();
        let (x, z) = (0.3, -0.2);
        let d = eom_rhs(&PhasePoint::new(x, z, 0.0, 0.0), &p);
        let u = 1.0 - z;
        let ito_x = -p.omega_rabi * z - 0.5 * p.gamma * x;
        let ito_z = p.omega_rabi * x + p.gamma * u;
        assert_relative_eq!(
            d[0],
            ito_x + 0.5 * p.gamma * p.eta * x * u + p.eta * p.gamma * x * (u - x * x),
            epsilon = 1e-12
        );
        assert_relative_eq!(d[1], ito_z - 0.5 * p.gamma * p.eta * u * u + p.eta * p.gamma * x * x * u, epsilon = 1e-12);
    }

    #[test]
    fn printed_compact_form_matches_neither_mapping() {
        let p = PhysParams::reference();
        for (m, gap) in compact_form_discrepancy(&p) {
            assert!(gap > 1e-3, "{m:?} unexpectedly reproduces the canonical Hamiltonian");
        }
    }

    #[test]
    fn unwrap_and_winding() {
        let raw = [3.0, -3.0, -2.0, 0.0, 2.0, 3.1, -3.1];
        let u = unwrap_angles(raw.iter().copied());
        assert_relative_eq!(u[1], TAU - 3.0, epsilon = 1e-12);
        assert!(u.windows(2).all(|w| (w[1] - w[0]).abs() < PI));
        assert_eq!(winding_of(&[0.0, -1.0, -2.0 * TAU - 0.5]), -2);
        assert_eq!(winding_of(&[PI, 0.0, -1.24]), -1);
        assert_eq!(winding_of(&[0.2, 0.9, 1.3]), 0);
    }

    #[test]
    fn degenerate_horizon_rejected() {
        let p = PhysParams::reference();
        let q = BlochState::EXCITED;
        assert!(shoot_bvp(q, q, 0.01, &p, &ShootOptions::default()).is_err());
    }

    #[test]
    fn action_two_ways() {
        let p = PhysParams::reference();
        let g = TimeGrid::from_horizon(0.002, 1.0).unwrap();
        let path = integrate_mlp(&PhasePoint::new(0.0, -0.97, 0.0, 0.0), &p, &g).unwrap();
        assert!((path.action - path.action_trapezoid(&p)).abs() < 1e-6);
        assert!(path.energy_drift(&p) < 1e-6);
    }

    #[test]
    fn action_difference_rules() {
        let p = PhysParams::reference();
        let g = TimeGrid::from_horizon(0.002, 0.5).unwrap();
        let a = integrate_mlp(&PhasePoint::new(0.0, -0.97, 0.3, 0.1), &p, &g).unwrap();
        assert_eq!(action_difference(&a, &a).unwrap(), 0.0);
        let b = integrate_mlp(&PhasePoint::new(0.0, -0.97, -0.3, 0.1), &p, &g).unwrap();
        assert!(matches!(action_difference(&a, &b), Err(Error::EndpointMismatch(_))));
    }

    #[test]
    fn singular_shot_reports_time() {
        let p = PhysParams::reference();
        match flow_final(&PhasePoint::new(0.0, -1.0, 400.0, 400.0), &p, 2.0) {
            Err(Error::Integration { t, .. }) => assert!(t < 2.0),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn readout_is_stationary(pt in pt_strategy()) {
            let p = PhysParams::reference();
            let r = optimal_readout(&pt, &p);
            let h = 1e-4;
            let d = (hamiltonian(&pt, r + h, &p) - hamiltonian(&pt, r - h, &p)) / (2.0 * h);
            prop_assert!(d.abs() < 1e-8);
            // concave in r: a scan never beats r*
            let best = hamiltonian(&pt, r, &p);
            for k in -20..=20 {
                prop_assert!(hamiltonian(&pt, r + 0.1 * k as f64, &p) <= best + 1e-12);
            }
        }

        #[test]
        fn py_decouples_at_y_zero(pt in pt_strategy(), r in -3.0f64..3.0, py in -50.0f64..50.0) {
            let p = PhysParams::reference();
            prop_assert_eq!(hamiltonian_with_y(&pt, 0.0, py, r, &p), hamiltonian(&pt, r, &p));
            prop_assert!((hamiltonian_with_y(&pt, 0.0, 17.3, r, &p) - hamiltonian(&pt, r, &p)).abs() < 1e-12);
        }
    }
}
