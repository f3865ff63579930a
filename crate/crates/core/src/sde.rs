//! Homodyne-monitored resonance fluorescence: Euler–Maruyama integration of the
//! Bloch-form stochastic master equation (Itô reading), the accompanying
//! homodyne record, and the unconditioned mean evolution.
//!
//! With ξ a Gaussian draw of variance 1/dt,
//!
//! ```text
//! dz = [Ωx + γ(1−z)] dt + √(ηγ) x(1−z) ξ dt
//! dx = [−Ωz − γx/2] dt + √(ηγ) (1−z−x²) ξ dt
//! dI = √η γ x dt + √γ ξ dt
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{Dopri5, Tolerance};
use crate::params::{BlochState, PhysParams, TimeGrid};

/// Trajectories are summed in blocks of this size so that ensemble reductions do
/// not depend on the number of worker threads.
const REDUCTION_BLOCK: usize = 64;

/// One conditioned evolution and the record that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: TimeGrid,
    /// `grid.n_points()` states.
    pub states: Vec<BlochState>,
    /// `grid.n_steps` homodyne increments dI_t.
    pub record: Vec<f64>,
    pub seed: u64,
    /// Steps whose Euler update left the Bloch ball and was projected back.
    pub clamp_events: usize,
}

impl Trajectory {
    pub fn final_state(&self) -> BlochState {
        *self.states.last().expect("trajectory has at least one state")
    }

    /// Checks that the stored arrays match the grid.
    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.grid.n_points() || self.record.len() != self.grid.n_steps {
            return Err(Error::GridMismatch(format!(
                "grid has {} steps but trajectory stores {} states and {} record entries",
                self.grid.n_steps,
                self.states.len(),
                self.record.len()
            )));
        }
        Ok(())
    }

    /// Recovers the noise draw ξ_t used at step `k` by inverting the record equation.
    pub fn noise_at(&self, k: usize, p: &PhysParams) -> f64 {
        let dt = self.grid.dt;
        (self.record[k] - p.eta.sqrt() * p.gamma * self.states[k].x * dt) / (p.gamma.sqrt() * dt)
    }
}

/// Deterministic per-trajectory seed derived from a root seed and a trajectory index
/// (SplitMix64 finaliser). Trajectory `i` of a run is reproducible on its own.
pub fn trajectory_seed(root: u64, index: u64) -> u64 {
    let mut z = root ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Drift and noise coefficients of (x, y, z) at state `s`.
fn sme_coefficients(s: &BlochState, p: &PhysParams) -> ([f64; 3], [f64; 3]) {
    let k = p.root_eta_gamma();
    let (x, y, z) = (s.x, s.y, s.z);
    let drift = [-p.omega_rabi * z - 0.5 * p.gamma * x, -0.5 * p.gamma * y, p.omega_rabi * x + p.gamma * (1.0 - z)];
    let noise = [k * (1.0 - z - x * x), -k * x * y, k * x * (1.0 - z)];
    (drift, noise)
}

/// One explicit Euler–Maruyama step; `xi` is the noise draw (variance 1/dt).
/// Returns the new state and whether it had to be projected back onto the ball.
pub fn step_sme_checked(s: BlochState, xi: f64, p: &PhysParams, dt: f64) -> (BlochState, bool) {
    let (drift, noise) = sme_coefficients(&s, p);
    let mut next = BlochState {
        x: s.x + (drift[0] + noise[0] * xi) * dt,
        y: s.y + (drift[1] + noise[1] * xi) * dt,
        z: s.z + (drift[2] + noise[2] * xi) * dt,
    };
    let clamped = next.clamp_to_ball();
    (next, clamped)
}

pub fn step_sme(s: BlochState, xi: f64, p: &PhysParams, dt: f64) -> BlochState {
    step_sme_checked(s, xi, p, dt).0
}

/// Homodyne increment dI = √η γ x dt + √γ ξ dt.
pub fn emit_record(s: &BlochState, xi: f64, p: &PhysParams, dt: f64) -> f64 {
    p.eta.sqrt() * p.gamma * s.x * dt + p.gamma.sqrt() * xi * dt
}

/// Update rule used to advance trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Literal explicit Euler–Maruyama step of the Itô SME with projective clamping.
    #[default]
    Euler,
    /// Measurement-operator map ρ → MρMᵀ + (1−η)γdt·LρLᵀ, renormalised. Agrees
    /// with the Euler–Maruyama step to first order, keeps ρ positive and keeps
    /// pure states pure at η = 1.
    Kraus,
}

impl Scheme {
    pub fn step(self, s: BlochState, xi: f64, p: &PhysParams, dt: f64) -> (BlochState, bool) {
        match self {
            Scheme::Kraus => (step_kraus(s, xi, p, dt), false),
            Scheme::Euler => step_sme_checked(s, xi, p, dt),
        }
    }
}

/// Measurement-operator update driven by the same noise draw as [`step_sme`].
///
/// With |g⟩ = (1,0), L = σ₋ = |g⟩⟨e| and H = −(Ω/2)σy every matrix is real:
/// M = I + (Ω/2)dt·[[0,1],[−1,0]] − (γ/2)dt·|e⟩⟨e| + √(ηγ)dY·L, where
/// dY = √(ηγ)x dt + ξ dt is the record in units of √γ.
pub fn step_kraus(s: BlochState, xi: f64, p: &PhysParams, dt: f64) -> BlochState {
    let dy = p.root_eta_gamma() * s.x * dt + xi * dt;
    let w = 0.5 * p.omega_rabi * dt;
    let m = [[1.0, w + p.root_eta_gamma() * dy], [-w, 1.0 - 0.5 * p.gamma * dt]];
    // symmetric (real) part of ρ
    let r = [[0.5 * (1.0 + s.z), 0.5 * s.x], [0.5 * s.x, 0.5 * (1.0 - s.z)]];
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = 0.0;
            for k in 0..2 {
                for l in 0..2 {
                    acc += m[i][k] * r[k][l] * m[j][l];
                }
            }
            out[i][j] = acc;
        }
    }
    out[0][0] += (1.0 - p.eta) * p.gamma * dt * r[1][1];
    let tr = out[0][0] + out[1][1];
    // the antisymmetric (y) part transforms with det M
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    BlochState { x: (out[0][1] + out[1][0]) / tr, y: det * s.y / tr, z: (out[0][0] - out[1][1]) / tr }
}

fn run(
    s0: BlochState,
    p: &PhysParams,
    g: &TimeGrid,
    seed: u64,
    scheme: Scheme,
    mut visit: impl FnMut(usize, BlochState, f64),
) -> (BlochState, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / g.dt.sqrt();
    let mut s = s0;
    let mut clamps = 0;
    for k in 0..g.n_steps {
        let n: f64 = StandardNormal.sample(&mut rng);
        let xi = n * scale;
        let d_i = emit_record(&s, xi, p, g.dt);
        let (next, clamped) = scheme.step(s, xi, p, g.dt);
        clamps += clamped as usize;
        visit(k, s, d_i);
        s = next;
    }
    (s, clamps)
}

/// Full conditioned trajectory; a pure function of its arguments.
pub fn simulate_trajectory(s0: BlochState, p: &PhysParams, g: &TimeGrid, seed: u64) -> Trajectory {
    simulate_trajectory_with(Scheme::default(), s0, p, g, seed)
}

pub fn simulate_trajectory_with(scheme: Scheme, s0: BlochState, p: &PhysParams, g: &TimeGrid, seed: u64) -> Trajectory {
    let mut states = Vec::with_capacity(g.n_points());
    let mut record = Vec::with_capacity(g.n_steps);
    let (last, clamp_events) = run(s0, p, g, seed, scheme, |_, s, d_i| {
        states.push(s);
        record.push(d_i);
    });
    states.push(last);
    Trajectory { grid: *g, states, record, seed, clamp_events }
}

/// Final state only, without storing the path.
pub fn simulate_final(scheme: Scheme, s0: BlochState, p: &PhysParams, g: &TimeGrid, seed: u64) -> BlochState {
    run(s0, p, g, seed, scheme, |_, _, _| {}).0
}

/// Re-integrates a trajectory using the noise recovered from its record.
pub fn replay(scheme: Scheme, t: &Trajectory, p: &PhysParams) -> Vec<BlochState> {
    let dt = t.grid.dt;
    let mut out = Vec::with_capacity(t.states.len());
    let mut s = t.states[0];
    out.push(s);
    for &d_i in &t.record {
        let xi = (d_i - p.eta.sqrt() * p.gamma * s.x * dt) / (p.gamma.sqrt() * dt);
        s = scheme.step(s, xi, p, dt).0;
        out.push(s);
    }
    out
}

/// `n` trajectories with seeds `trajectory_seed(root_seed, i)`, in index order.
pub fn simulate_ensemble(
    scheme: Scheme,
    s0: BlochState,
    p: &PhysParams,
    g: &TimeGrid,
    n: usize,
    root_seed: u64,
) -> Vec<Trajectory> {
    (0..n)
        .into_par_iter()
        .map(|i| simulate_trajectory_with(scheme, s0, p, g, trajectory_seed(root_seed, i as u64)))
        .collect()
}

/// Simulates `n` trajectories and keeps those accepted by `keep`, in index order.
/// Rejected trajectories are never stored, so very large ensembles stay cheap.
pub fn simulate_filtered(
    scheme: Scheme,
    s0: BlochState,
    p: &PhysParams,
    g: &TimeGrid,
    n: usize,
    root_seed: u64,
    keep: impl Fn(&BlochState) -> bool + Sync,
) -> Vec<Trajectory> {
    (0..n)
        .into_par_iter()
        .filter_map(|i| {
            let seed = trajectory_seed(root_seed, i as u64);
            let fin = simulate_final(scheme, s0, p, g, seed);
            keep(&fin).then(|| simulate_trajectory_with(scheme, s0, p, g, seed))
        })
        .collect()
}

/// Pointwise mean of `n` trajectories. The reduction order is fixed so the
/// result is bit-identical for any worker count.
pub fn ensemble_mean(
    s0: BlochState,
    p: &PhysParams,
    g: &TimeGrid,
    n: usize,
    root_seed: u64,
) -> Result<Vec<BlochState>> {
    ensemble_mean_with(Scheme::default(), s0, p, g, n, root_seed)
}

pub fn ensemble_mean_with(
    scheme: Scheme,
    s0: BlochState,
    p: &PhysParams,
    g: &TimeGrid,
    n: usize,
    root_seed: u64,
) -> Result<Vec<BlochState>> {
    if n == 0 {
        return Err(Error::TooFewTrajectories { need: 1, got: 0 });
    }
    let blocks: Vec<Vec<[f64; 3]>> = (0..n.div_ceil(REDUCTION_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![[0.0; 3]; g.n_points()];
            for i in b * REDUCTION_BLOCK..((b + 1) * REDUCTION_BLOCK).min(n) {
                let (last, _) = run(s0, p, g, trajectory_seed(root_seed, i as u64), scheme, |k, s, _| {
                    acc[k][0] += s.x;
                    acc[k][1] += s.y;
                    acc[k][2] += s.z;
                });
                let a = &mut acc[g.n_steps];
                a[0] += last.x;
                a[1] += last.y;
                a[2] += last.z;
            }
            acc
        })
        .collect();
    let mut total = vec![[0.0; 3]; g.n_points()];
    for block in &blocks {
        for (t, b) in total.iter_mut().zip(block) {
            t[0] += b[0];
            t[1] += b[1];
            t[2] += b[2];
        }
    }
    let inv = 1.0 / n as f64;
    Ok(total.into_iter().map(|a| BlochState { x: a[0] * inv, y: a[1] * inv, z: a[2] * inv }).collect())
}

/// Unconditioned (noise-averaged) evolution ż = Ωx + γ(1−z), ẋ = −Ωz − γx/2,
/// integrated adaptively and sampled on the grid.
pub fn lindblad_mean(s0: BlochState, p: &PhysParams, g: &TimeGrid) -> Vec<BlochState> {
    let (om, ga) = (p.omega_rabi, p.gamma);
    let rhs = move |v: &[f64; 3]| [-om * v[2] - 0.5 * ga * v[0], -0.5 * ga * v[1], om * v[0] + ga * (1.0 - v[2])];
    let mut stepper = Dopri5::new(rhs, Tolerance { atol: 1e-13, rtol: 1e-12 });
    let mut v = [s0.x, s0.y, s0.z];
    let mut out = Vec::with_capacity(g.n_points());
    out.push(s0);
    for k in 0..g.n_steps {
        stepper.advance(&mut v, g.time(k), g.time(k + 1), &|_| false).expect("linear Bloch equations cannot blow up");
        out.push(BlochState { x: v[0], y: v[1], z: v[2] });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(t: f64) -> TimeGrid {
        TimeGrid::from_horizon(0.002, t).unwrap()
    }

    #[test]
    fn ground_state_is_dark() {
        let p = PhysParams::new(1.42, 0.45, 0.0).unwrap();
        assert_eq!(step_sme(BlochState::GROUND, 0.0, &p, 0.002), BlochState::GROUND);
        // back-action vanishes at the ground state for any noise
        assert_eq!(step_sme(BlochState::GROUND, 123.0, &p, 0.002), BlochState::GROUND);
    }

    #[test]
    fn excited_state_decays() {
        let p = PhysParams::new(1.42, 0.45, 0.0).unwrap();
        let dt = 1e-4;
        let s = step_sme(BlochState::EXCITED, 0.0, &p, dt);
        assert_relative_eq!(s.z + 1.0, 2.0 * 1.42 * dt, epsilon = 1e-12);
        assert_eq!(s.x, 0.0);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let p = PhysParams::reference();
        let dt: f64 = 0.002;
        let xi = 0.7 / dt.sqrt();
        let s = step_sme(BlochState::xz(0.3, 0.2), xi, &p, dt);
        let om = 5.654_866_776_461_628_f64;
        let k = 0.639_f64.sqrt();
        let sq = 0.002_f64.sqrt();
        let z = 0.2 + (om * 0.3 + 1.42 * 0.8) * 0.002 + k * 0.3 * 0.8 * 0.7 * sq;
        let x = 0.3 + (-om * 0.2 - 0.71 * 0.3) * 0.002 + k * 0.71 * 0.7 * sq;
        assert_relative_eq!(s.z, z, epsilon = 1e-14);
        assert_relative_eq!(s.x, x, epsilon = 1e-14);
    }

    #[test]
    fn record_examples() {
        let p = PhysParams::reference();
        assert_eq!(emit_record(&BlochState::xz(0.0, 0.0), 0.0, &p, 0.002), 0.0);
        let d_i = emit_record(&BlochState::xz(1.0, 0.0), 0.0, &p, 0.002);
        assert_relative_eq!(d_i, 0.45f64.sqrt() * 1.42 * 0.002, epsilon = 1e-15);
        assert_relative_eq!(d_i, 1.905_13e-3, epsilon = 1e-8);
    }

    #[test]
    fn record_mean_is_signal() {
        let p = PhysParams::reference();
        let dt: f64 = 0.002;
        let x = 0.4;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let sum: f64 = (0..n)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                emit_record(&BlochState::xz(x, 0.0), g / dt.sqrt(), &p, dt)
            })
            .sum();
        let se = (p.gamma * dt / n as f64).sqrt();
        assert!((sum / n as f64 - p.eta.sqrt() * p.gamma * x * dt).abs() < 4.0 * se);
    }

    #[test]
    fn deterministic_in_seed() {
        let p = PhysParams::reference();
        let g = grid(0.5);
        let s0 = BlochState::xz(0.0, -0.97);
        let a = simulate_trajectory(s0, &p, &g, 42);
        assert_eq!(a, simulate_trajectory(s0, &p, &g, 42));
        assert_ne!(a.states, simulate_trajectory(s0, &p, &g, 43).states);
        a.validate().unwrap();
        assert_eq!(simulate_final(Scheme::default(), s0, &p, &g, 42), a.final_state());
    }

    #[test]
    fn undriven_pure_trajectories_stay_on_sphere() {
        let p = PhysParams::new(1.42, 1.0, 0.0).unwrap();
        let g = grid(2.0);
        for seed in 0..20 {
            let t = simulate_trajectory_with(Scheme::Kraus, BlochState::EXCITED, &p, &g, seed);
            for s in &t.states {
                assert!((s.x * s.x + s.z * s.z - 1.0).abs() < 1e-3, "seed {seed}: {s}");
            }
        }
    }

    #[test]
    fn replay_reproduces_states() {
        let p = PhysParams::reference();
        let t = simulate_trajectory_with(Scheme::Kraus, BlochState::xz(0.0, -0.97), &p, &grid(1.0), 3);
        for (a, b) in replay(Scheme::Kraus, &t, &p).iter().zip(&t.states) {
            assert!((a.x - b.x).abs() < 1e-9 && (a.z - b.z).abs() < 1e-9);
        }
        let t = simulate_trajectory_with(Scheme::Euler, BlochState::xz(0.0, -0.97), &p, &grid(1.0), 3);
        for (a, b) in replay(Scheme::Euler, &t, &p).iter().zip(&t.states) {
            assert!((a.x - b.x).abs() < 1e-9 && (a.z - b.z).abs() < 1e-9);
        }
    }

    #[test]
    fn single_member_mean_is_the_trajectory() {
        let p = PhysParams::reference();
        let g = grid(0.3);
        let m = ensemble_mean(BlochState::EXCITED, &p, &g, 1, 5).unwrap();
        let t = simulate_trajectory(BlochState::EXCITED, &p, &g, trajectory_seed(5, 0));
        assert_eq!(m, t.states);
        assert!(ensemble_mean(BlochState::EXCITED, &p, &g, 0, 5).is_err());
    }

    #[test]
    fn kraus_step_agrees_with_euler_to_first_order() {
        // the two schemes differ by O(dt·(ξ²dt − 1)) + O(dt²); with ξ fixed in units of
        // 1/√dt the gap must shrink linearly in dt
        let p = PhysParams::reference();
        let s = BlochState::xz(0.3, 0.2);
        let gap = |dt: f64| {
            let xi = 0.7 / dt.sqrt();
            let a = step_sme(s, xi, &p, dt);
            let b = step_kraus(s, xi, &p, dt);
            ((a.x - b.x).powi(2) + (a.z - b.z).powi(2)).sqrt()
        };
        let (g1, g2) = (gap(1e-4), gap(1e-5));
        assert!(g2 < 0.15 * g1, "{g1} {g2}");
    }

    #[test]
    fn kraus_keeps_states_physical() {
        let p = PhysParams::reference();
        let t = simulate_trajectory_with(Scheme::Kraus, BlochState::xz(0.0, -0.97), &p, &grid(2.0), 17);
        assert!(t.states.iter().all(|s| s.norm() <= 1.0 + 1e-12));
        assert_eq!(t.clamp_events, 0);
    }

    #[test]
    fn ensemble_mean_tracks_lindblad() {
        let p = PhysParams::reference();
        let g = grid(1.0);
        let n = 4000;
        let s0 = BlochState::xz(0.0, -0.97);
        let exact = lindblad_mean(s0, &p, &g);
        for scheme in [Scheme::Kraus, Scheme::Euler] {
            let mean = ensemble_mean_with(scheme, s0, &p, &g, n, 9).unwrap();
            let worst =
                mean.iter().zip(&exact).map(|(a, b)| (a.x - b.x).abs().max((a.z - b.z).abs())).fold(0.0, f64::max);
            assert!(worst < 5.0 / (n as f64).sqrt(), "{scheme:?}: {worst}");
        }
    }

    #[test]
    fn lindblad_decay_closed_form() {
        let p = PhysParams::new(1.42, 0.45, 0.0).unwrap();
        let g = grid(2.0);
        for (k, s) in lindblad_mean(BlochState::EXCITED, &p, &g).iter().enumerate() {
            let t = g.time(k);
            assert!((s.z - (1.0 - 2.0 * (-p.gamma * t).exp())).abs() < 1e-10);
            assert_eq!(s.x, 0.0);
        }
        for s in lindblad_mean(BlochState::GROUND, &p, &g) {
            assert_eq!(s, BlochState::GROUND);
        }
    }
}
