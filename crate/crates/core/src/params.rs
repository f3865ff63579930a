//! Physical parameters, time grids, Bloch vectors and the run configuration.
//!
//! Internal units: time in μs, every rate or frequency in rad/μs. The drive is
//! configured as Ω/2π in MHz and multiplied by 2π on the way in. Stochastic
//! energies and action rates share the rad/μs unit and are labelled "MHz" in
//! output files.

use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decay rate of the emitter used throughout the reference runs, μs⁻¹.
pub const REFERENCE_GAMMA: f64 = 1.42;
/// Quantum efficiency of the reference homodyne chain.
pub const REFERENCE_ETA: f64 = 0.45;
/// Reference Rabi frequency Ω/2π in MHz.
pub const REFERENCE_OMEGA_MHZ: f64 = 0.9;
/// Default integration step, μs.
pub const DEFAULT_DT: f64 = 0.002;

/// Physical constants of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysParams {
    /// Decay rate γ, μs⁻¹.
    pub gamma: f64,
    /// Quantum efficiency η ∈ [0, 1].
    pub eta: f64,
    /// Angular Rabi frequency Ω, rad/μs.
    pub omega_rabi: f64,
    /// Homodyne phase. Only φ = 0 is supported.
    pub phi: f64,
}

impl PhysParams {
    /// Validating constructor taking Ω already in rad/μs.
    pub fn new(gamma: f64, eta: f64, omega_rabi: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidParams(format!("gamma must be positive, got {gamma}")));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidParams(format!("eta must lie in [0,1], got {eta}")));
        }
        if !omega_rabi.is_finite() || omega_rabi < 0.0 {
            return Err(Error::InvalidParams(format!(
                "Rabi frequency must be finite and non-negative, got {omega_rabi}"
            )));
        }
        Ok(Self { gamma, eta, omega_rabi, phi: 0.0 })
    }

    /// γ = 1.42 μs⁻¹, η = 0.45, Ω/2π = 0.9 MHz.
    pub fn reference() -> Self {
        convert_config(REFERENCE_OMEGA_MHZ, REFERENCE_GAMMA, REFERENCE_ETA).expect("reference parameters are valid")
    }

    /// Dimensionless drive ω = Ω/γ.
    pub fn omega_ratio(&self) -> f64 {
        self.omega_rabi / self.gamma
    }

    /// Ω/2π in MHz.
    pub fn omega_mhz(&self) -> f64 {
        self.omega_rabi / TAU
    }

    pub fn with_omega(self, omega_rabi: f64) -> Self {
        Self { omega_rabi, ..self }
    }

    pub fn with_eta(self, eta: f64) -> Self {
        Self { eta, ..self }
    }

    /// Measurement strength √(ηγ) that multiplies the back-action terms.
    pub fn root_eta_gamma(&self) -> f64 {
        (self.eta * self.gamma).sqrt()
    }
}

/// Builds [`PhysParams`] from the configuration units (Ω/2π in MHz).
pub fn convert_config(omega_mhz: f64, gamma: f64, eta: f64) -> Result<PhysParams> {
    if !(omega_mhz >= 0.0) {
        return Err(Error::InvalidParams(format!("omega_over_2pi_mhz must be >= 0, got {omega_mhz}")));
    }
    PhysParams::new(gamma, eta, TAU * omega_mhz)
}

/// Bloch vector (x, y, z) = (⟨σx⟩, ⟨σy⟩, ⟨σz⟩). z = +1 is the ground state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlochState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl BlochState {
    /// State in the x–z plane.
    pub const fn xz(x: f64, z: f64) -> Self {
        Self { x, y: 0.0, z }
    }

    pub const GROUND: Self = Self::xz(0.0, 1.0);
    pub const EXCITED: Self = Self::xz(0.0, -1.0);

    pub fn norm(&self) -> f64 {
        bloch_norm(self)
    }

    /// Squared planar distance to `other` in the x–z plane.
    pub fn dist2_xz(&self, other: &Self) -> f64 {
        let dx = self.x - other.x;
        let dz = self.z - other.z;
        dx * dx + dz * dz
    }

    /// Projects the vector back onto the unit sphere when it lies outside the ball.
    /// Returns whether a projection happened.
    pub fn clamp_to_ball(&mut self) -> bool {
        let n = self.norm();
        if n > 1.0 {
            self.x /= n;
            self.y /= n;
            self.z /= n;
            true
        } else {
            false
        }
    }
}

impl fmt::Display for BlochState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(x={:.4}, z={:.4})", self.x, self.z)
    }
}

pub fn bloch_norm(s: &BlochState) -> f64 {
    (s.x * s.x + s.y * s.y + s.z * s.z).sqrt()
}

/// Uniform time grid t_k = k·dt, k = 0..=n_steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParams(format!("dt must be positive, got {dt}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidParams("n_steps must be at least 1".into()));
        }
        Ok(Self { dt, n_steps })
    }

    /// Grid covering `[0, t_final]` with step close to `dt`; the step count is rounded to
    /// the nearest integer and the horizon is honoured exactly.
    pub fn from_horizon(dt: f64, t_final: f64) -> Result<Self> {
        if !(t_final > 0.0) {
            return Err(Error::InvalidParams(format!("horizon must be positive, got {t_final}")));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidParams(format!("dt must be positive, got {dt}")));
        }
        let n = (t_final / dt).round().max(1.0) as usize;
        Self::new(t_final / n as f64, n)
    }

    pub fn total(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.dt * k as f64
    }

    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    /// Index of the grid point closest to `t`, if `t` lies on the grid within 1e−9·dt.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = (t / self.dt).round();
        if k < 0.0 || k as usize > self.n_steps {
            return None;
        }
        ((t - k * self.dt).abs() <= 1e-9 * self.dt.max(1.0)).then_some(k as usize)
    }

    /// Same grid with half the step.
    pub fn halved(&self) -> Self {
        Self { dt: self.dt / 2.0, n_steps: self.n_steps * 2 }
    }
}

/// JSON run configuration shared by the command-line pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub gamma_per_us: f64,
    pub eta: f64,
    pub omega_over_2pi_mhz: f64,
    pub dt_us: f64,
    pub t_final_us: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gamma_per_us: REFERENCE_GAMMA,
            eta: REFERENCE_ETA,
            omega_over_2pi_mhz: REFERENCE_OMEGA_MHZ,
            dt_us: DEFAULT_DT,
            t_final_us: 1.94,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidParams(e.to_string()))?;
        cfg.params()?;
        cfg.grid()?;
        Ok(cfg)
    }

    pub fn params(&self) -> Result<PhysParams> {
        convert_config(self.omega_over_2pi_mhz, self.gamma_per_us, self.eta)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::from_horizon(self.dt_us, self.t_final_us)
    }
}
