//! Pure-state (R = 1, η = 1) reduction of the MLP dynamics to the angle θ and
//! its conjugate momentum p.
//!
//! With the optimal readout substituted the stochastic Hamiltonian is
//! h* = a(θ)p² + b(θ)p + c(θ), and constant-energy curves are p±(θ, E).

use std::f64::consts::{PI, TAU};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::csv_error;
use crate::mlp::ode_error;
use crate::ode::{Dopri5, Tolerance};
use crate::params::{PhysParams, TimeGrid, DEFAULT_DT};

/// θ samples per period in the fixed-point scan.
pub const SCAN_SAMPLES: usize = 100_000;
/// Below this |λ| the linearisation is classed as elliptic.
pub const ELLIPTIC_THRESHOLD: f64 = 1e-6;
/// |a| below which p± falls back to the linear root.
pub const A_FLOOR: f64 = 1e-12;
const QUAD_TOL: f64 = 1e-12;
const PATH_TOL: f64 = 1e-11;
/// Endpoint tolerance for reconstructed winding paths.
pub const ENDPOINT_TOL: f64 = 1e-6;

/// Polar image of a Cartesian phase point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarCoords {
    pub r: f64,
    pub theta: f64,
    pub p_r: f64,
    pub p: f64,
}

/// (x, z, p_x, p_z) → (R, θ, p_R, p_θ) with x = R sinθ, z = R cosθ.
pub fn polar_map(x: f64, z: f64, px: f64, pz: f64) -> Result<PolarCoords> {
    let r = x.hypot(z);
    if r == 0.0 {
        return Err(Error::InvalidParams("polar map undefined at R = 0".into()));
    }
    let theta = x.atan2(z);
    let (s, c) = theta.sin_cos();
    Ok(PolarCoords { r, theta, p_r: px * s + pz * c, p: r * (px * c - pz * s) })
}

/// Inverse of [`polar_map`], returning (x, z, p_x, p_z).
pub fn cartesian_from_polar(pc: &PolarCoords) -> Result<[f64; 4]> {
    if !(pc.r > 0.0) {
        return Err(Error::InvalidParams(format!("inverse polar map needs R > 0, got {}", pc.r)));
    }
    let (s, c) = pc.theta.sin_cos();
    Ok([pc.r * s, pc.r * c, pc.p_r * s + pc.p * c / pc.r, pc.p_r * c - pc.p * s / pc.r])
}

/// Point of the reduced phase plane; θ is never wrapped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarPoint {
    pub theta: f64,
    pub p: f64,
}

impl PolarPoint {
    pub const fn new(theta: f64, p: f64) -> Self {
        Self { theta, p }
    }
}

/// Coefficients of h* = a p² + b p + c (or their θ-derivatives).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Abc {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

pub fn h_star_coeffs(theta: f64, p: &PhysParams) -> Abc {
    let (s, c) = theta.sin_cos();
    let g = p.gamma;
    Abc {
        a: g * (-c + 0.5 * (1.0 + c * c)),
        b: -p.omega_rabi + 0.5 * g * (-3.0 * s + (2.0 * theta).sin()),
        c: -0.5 * g * (c * c - c),
    }
}

/// (a′, b′, c′).
pub fn h_star_derivs(theta: f64, p: &PhysParams) -> Abc {
    let (s, c) = theta.sin_cos();
    let g = p.gamma;
    Abc { a: g * (s - c * s), b: 0.5 * g * (-3.0 * c + 2.0 * (2.0 * theta).cos()), c: -0.5 * g * (s - 2.0 * c * s) }
}

/// (a″, b″, c″).
fn h_star_second_derivs(theta: f64, p: &PhysParams) -> Abc {
    let (s, c) = theta.sin_cos();
    let c2 = (2.0 * theta).cos();
    let g = p.gamma;
    Abc { a: g * (c - c2), b: 0.5 * g * (3.0 * s - 4.0 * (2.0 * theta).sin()), c: -0.5 * g * (c - 2.0 * c2) }
}

pub fn h_star(pt: PolarPoint, p: &PhysParams) -> f64 {
    let k = h_star_coeffs(pt.theta, p);
    (k.a * pt.p + k.b) * pt.p + k.c
}

/// r* = −√γ (p(cosθ − 1) + sinθ).
pub fn polar_readout(pt: PolarPoint, p: &PhysParams) -> f64 {
    let (s, c) = pt.theta.sin_cos();
    -p.gamma.sqrt() * (pt.p * (c - 1.0) + s)
}

/// Pure-state Hamiltonian at arbitrary readout r,
/// h = p(−Ω + r√γ(1 − cosθ) − (γ/2) sinθ) − √γ r sinθ − (r² + γ(1 − cosθ))/2.
pub fn h_polar(pt: PolarPoint, r: f64, p: &PhysParams) -> f64 {
    let (s, c) = pt.theta.sin_cos();
    let rg = p.gamma.sqrt();
    pt.p * (-p.omega_rabi + r * rg * (1.0 - c) - 0.5 * p.gamma * s) - rg * r * s - 0.5 * (r * r + p.gamma * (1.0 - c))
}

/// Action rate Ṡ = γ sin²(θ/2)(p²(cosθ − 1) + cosθ).
pub fn sdot(pt: PolarPoint, p: &PhysParams) -> f64 {
    let c = pt.theta.cos();
    let h = (0.5 * pt.theta).sin();
    p.gamma * h * h * (pt.p * pt.p * (c - 1.0) + c)
}

/// Momenta on the contour h* = E at angle θ, as (p₊, p₋); `None` when the
/// discriminant is negative. Where a vanishes both entries are the linear
/// root (E − c)/b.
pub fn p_pm(theta: f64, e: f64, p: &PhysParams) -> Option<(f64, f64)> {
    let k = h_star_coeffs(theta, p);
    if k.a.abs() < A_FLOOR {
        if k.b == 0.0 {
            return None;
        }
        let root = (e - k.c) / k.b;
        return Some((root, root));
    }
    let disc = (e - k.c) / k.a + k.b * k.b / (4.0 * k.a * k.a);
    if disc < 0.0 {
        return None;
    }
    let centre = -k.b / (2.0 * k.a);
    Some((centre + disc.sqrt(), centre - disc.sqrt()))
}

/// (θ̇, ṗ) = (2ap + b, −a′p² − b′p − c′).
pub fn eom_2d(pt: PolarPoint, p: &PhysParams) -> [f64; 2] {
    let k = h_star_coeffs(pt.theta, p);
    let d = h_star_derivs(pt.theta, p);
    [2.0 * k.a * pt.p + k.b, -(d.a * pt.p + d.b) * pt.p - d.c]
}

/// Lowest energy reachable at θ, c − b²/4a; the p±-contours exist at θ iff E ≥ this.
pub fn contour_floor(theta: f64, p: &PhysParams) -> f64 {
    let k = h_star_coeffs(theta, p);
    if k.a.abs() < A_FLOOR {
        return f64::NEG_INFINITY;
    }
    k.c - k.b * k.b / (4.0 * k.a)
}

/// θ̇² on the contour of energy E at θ: b² + 4a(E − c).
fn speed2(theta: f64, e: f64, p: &PhysParams) -> f64 {
    let k = h_star_coeffs(theta, p);
    k.b * k.b + 4.0 * k.a * (e - k.c)
}

fn speed2_slope(theta: f64, e: f64, p: &PhysParams) -> f64 {
    let k = h_star_coeffs(theta, p);
    let d = h_star_derivs(theta, p);
    2.0 * k.b * d.b + 4.0 * d.a * (e - k.c) - 4.0 * k.a * d.c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixedPointKind {
    Elliptic,
    Hyperbolic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub theta_bar: f64,
    pub p_bar: f64,
    pub kind: FixedPointKind,
    /// h* at the point, rad/μs.
    pub energy: f64,
    /// λ² of the linearised flow (eigenvalues ±√λ²).
    pub lambda2: f64,
}

impl FixedPoint {
    pub fn point(&self) -> PolarPoint {
        PolarPoint::new(self.theta_bar, self.p_bar)
    }
}

/// Fixed-point condition a′b² − 2ab′b + 4a²c′ (4a² times the printed form),
/// evaluated at γ = 1, Ω = ω.
pub fn fixed_point_condition(theta: f64, omega_ratio: f64) -> f64 {
    let p = PhysParams { gamma: 1.0, eta: 1.0, omega_rabi: omega_ratio, phi: 0.0 };
    let k = h_star_coeffs(theta, &p);
    let d = h_star_derivs(theta, &p);
    d.a * k.b * k.b - 2.0 * k.a * d.b * k.b + 4.0 * k.a * k.a * d.c
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let mut flo = f(lo);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn fixed_point_angles(omega_ratio: f64) -> Vec<f64> {
    let h = TAU / SCAN_SAMPLES as f64;
    let values: Vec<f64> =
        (1..SCAN_SAMPLES).into_par_iter().map(|k| fixed_point_condition(k as f64 * h, omega_ratio)).collect();
    values
        .windows(2)
        .enumerate()
        .filter(|(_, w)| (w[0] < 0.0) != (w[1] < 0.0))
        .map(|(k, _)| {
            let lo = (k + 1) as f64 * h;
            bisect(|t| fixed_point_condition(t, omega_ratio), lo, lo + h, 1e-12)
        })
        .collect()
}

/// Linearised λ² at a point: the flow matrix of a one-degree-of-freedom
/// Hamiltonian is traceless, so its eigenvalues are ±√(−det).
pub fn linearised_lambda2(pt: PolarPoint, p: &PhysParams) -> f64 {
    let k = h_star_coeffs(pt.theta, p);
    let d = h_star_derivs(pt.theta, p);
    let d2 = h_star_second_derivs(pt.theta, p);
    let j11 = 2.0 * d.a * pt.p + d.b;
    let j12 = 2.0 * k.a;
    let j21 = -(d2.a * pt.p + d2.b) * pt.p - d2.c;
    j11 * j11 + j12 * j21
}

/// All fixed points in θ ∈ (0, 2π) at drive ratio ω = Ω/γ.
pub fn fixed_points(omega_ratio: f64, gamma: f64) -> Result<Vec<FixedPoint>> {
    if !(omega_ratio > 0.0) || !(gamma > 0.0) {
        return Err(Error::InvalidParams(format!("fixed points need ω > 0 and γ > 0, got ω={omega_ratio}, γ={gamma}")));
    }
    let p = PhysParams { gamma, eta: 1.0, omega_rabi: omega_ratio * gamma, phi: 0.0 };
    Ok(fixed_point_angles(omega_ratio)
        .into_iter()
        .map(|theta| {
            let k = h_star_coeffs(theta, &p);
            let p_bar = -k.b / (2.0 * k.a);
            let pt = PolarPoint::new(theta, p_bar);
            let lambda2 = linearised_lambda2(pt, &p);
            let kind = if lambda2 > 0.0 && lambda2.sqrt() >= ELLIPTIC_THRESHOLD {
                FixedPointKind::Hyperbolic
            } else {
                FixedPointKind::Elliptic
            };
            FixedPoint { theta_bar: theta, p_bar, kind, energy: h_star(pt, &p), lambda2 }
        })
        .collect())
}

/// Fixed points at one ω of a bifurcation scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSample {
    pub omega: f64,
    pub points: Vec<FixedPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BifurcationScan {
    /// Midpoint of the final bracket.
    pub omega_c: f64,
    pub bracket: (f64, f64),
    pub count_below: usize,
    pub count_above: usize,
    pub branches: Vec<BranchSample>,
}

impl BifurcationScan {
    /// Angles of the fixed points that exist just below ω_c but not above it.
    pub fn new_pair(&self) -> Result<Vec<f64>> {
        let below = fixed_points(self.bracket.0, 1.0)?;
        let above = fixed_points(self.bracket.1, 1.0)?;
        Ok(below
            .iter()
            .filter(|b| above.iter().all(|a| (a.theta_bar - b.theta_bar).abs() > 1e-3))
            .map(|b| b.theta_bar)
            .collect())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["omega", "theta_bar", "p_bar", "kind"]).map_err(csv_error)?;
        for b in &self.branches {
            for f in &b.points {
                let kind = match f.kind {
                    FixedPointKind::Elliptic => "elliptic",
                    FixedPointKind::Hyperbolic => "hyperbolic",
                };
                out.write_record([b.omega.to_string(), f.theta_bar.to_string(), f.p_bar.to_string(), kind.into()])
                    .map_err(csv_error)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Samples `n` values of ω in [lo, hi], locates the first change of the
/// fixed-point count and bisects it to 1e−6.
pub fn bifurcation_scan(lo: f64, hi: f64, n: usize) -> Result<BifurcationScan> {
    if !(lo > 0.0 && hi > lo) || n < 2 {
        return Err(Error::InvalidParams(format!(
            "bifurcation scan needs 0 < lo < hi and n ≥ 2, got [{lo}, {hi}], n={n}"
        )));
    }
    let omegas: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect();
    let branches = omegas
        .iter()
        .map(|&omega| Ok(BranchSample { omega, points: fixed_points(omega, 1.0)? }))
        .collect::<Result<Vec<_>>>()?;
    let count = |w: f64| fixed_point_angles(w).len();
    let k = branches.windows(2).position(|w| w[0].points.len() != w[1].points.len()).ok_or(Error::NoTransition {
        lo,
        hi,
        count: branches[0].points.len(),
    })?;
    let (mut a, mut b) = (omegas[k], omegas[k + 1]);
    let (ca, cb) = (branches[k].points.len(), branches[k + 1].points.len());
    while b - a > 1e-6 {
        let mid = 0.5 * (a + b);
        if count(mid) == ca {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(BifurcationScan { omega_c: 0.5 * (a + b), bracket: (a, b), count_below: ca, count_above: cb, branches })
}

pub fn write_fixed_points_csv<W: Write>(points: &[FixedPoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["theta_bar", "p_bar", "kind", "energy", "lambda2"]).map_err(csv_error)?;
    for f in points {
        let kind = match f.kind {
            FixedPointKind::Elliptic => "elliptic",
            FixedPointKind::Hyperbolic => "hyperbolic",
        };
        out.write_record([
            f.theta_bar.to_string(),
            f.p_bar.to_string(),
            kind.into(),
            f.energy.to_string(),
            f.lambda2.to_string(),
        ])
        .map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

/// Grid of (θ, p, h*, Ṡ) for contour plots, θ fastest.
pub fn write_portrait_csv<W: Write>(
    p: &PhysParams,
    theta: (f64, f64),
    mom: (f64, f64),
    n_theta: usize,
    n_p: usize,
    w: W,
) -> Result<()> {
    if n_theta < 2 || n_p < 2 {
        return Err(Error::InvalidParams("portrait grid needs at least 2 samples per axis".into()));
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["theta", "p", "h_star", "sdot"]).map_err(csv_error)?;
    for j in 0..n_p {
        let pm = mom.0 + (mom.1 - mom.0) * j as f64 / (n_p - 1) as f64;
        for i in 0..n_theta {
            let th = theta.0 + (theta.1 - theta.0) * i as f64 / (n_theta - 1) as f64;
            let pt = PolarPoint::new(th, pm);
            out.write_record([th.to_string(), pm.to_string(), h_star(pt, p).to_string(), sdot(pt, p).to_string()])
                .map_err(csv_error)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Phase-portrait regions for the single-fixed-point regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    /// Above the separatrix, moving with the drive (θ decreasing).
    A,
    /// Below the separatrix; both branches.
    B,
    /// Above the separatrix, moving against the drive.
    C,
}

/// Separatrix energy E_c (the highest contour floor); `None` unless there is
/// exactly one fixed point.
pub fn separatrix_energy(p: &PhysParams) -> Result<Option<f64>> {
    let fps = fixed_points(p.omega_ratio(), p.gamma)?;
    Ok((fps.len() == 1).then(|| fps[0].energy))
}

pub fn classify_region(pt: PolarPoint, e_c: f64, p: &PhysParams) -> Region {
    if h_star(pt, p) < e_c {
        Region::B
    } else if eom_2d(pt, p)[0] < 0.0 {
        Region::A
    } else {
        Region::C
    }
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_KRONROD: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd-indexed nodes, then the centre
const GK_GAUSS: [f64; 4] =
    [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

/// 15-point Kronrod estimate on [a, b] and its difference from the embedded 7-point Gauss rule.
fn gauss_kronrod(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = GK_KRONROD[7] * fc;
    let mut g = GK_GAUSS[3] * fc;
    for i in 0..7 {
        let s = f(c - h * GK_NODES[i]) + f(c + h * GK_NODES[i]);
        k += GK_KRONROD[i] * s;
        if i % 2 == 1 {
            g += GK_GAUSS[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

const MAX_SEGMENTS: usize = 2000;

/// Globally adaptive Gauss–Kronrod quadrature of a finite integrand on [a, b].
fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let first = gauss_kronrod(&f, a, b);
    let mut segs = vec![(a, b, first.0, first.1)];
    while segs.len() < MAX_SEGMENTS {
        let err: f64 = segs.iter().map(|s| s.3).sum();
        let total: f64 = segs.iter().map(|s| s.2).sum();
        if err <= tol.max(1e-14 * total.abs()) {
            break;
        }
        let worst = (0..segs.len()).max_by(|&i, &j| segs[i].3.total_cmp(&segs[j].3)).expect("at least one segment");
        let (lo, hi, _, _) = segs.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (l, r) = (gauss_kronrod(&f, lo, mid), gauss_kronrod(&f, mid, hi));
        segs.push((lo, mid, l.0, l.1));
        segs.push((mid, hi, r.0, r.1));
    }
    segs.iter().map(|s| s.2).sum()
}

/// ∫ dθ/|θ̇| between two angles where θ̇² > 0 in the interior; `u` may be a
/// simple turning point, handled by θ = u + (v − u)w².
fn flight_time(u: f64, v: f64, e: f64, turning_at_u: bool, p: &PhysParams) -> f64 {
    let span = v - u;
    if span == 0.0 {
        return 0.0;
    }
    if !turning_at_u {
        return integrate(|th| speed2(th, e, p).max(f64::MIN_POSITIVE).sqrt().recip(), u.min(v), u.max(v), QUAD_TOL);
    }
    let slope = speed2_slope(u, e, p).abs();
    let g = move |w: f64| {
        let dth = span * w * w;
        let d = speed2(u + dth, e, p);
        let d = if dth.abs() < 1e-9 || d <= 0.0 { slope * dth.abs() } else { d };
        if w == 0.0 {
            2.0 * span.abs().sqrt() / slope.sqrt()
        } else {
            2.0 * span.abs() * w / d.sqrt()
        }
    };
    integrate(g, 0.0, 1.0, QUAD_TOL)
}

/// Shape of a constant-energy path between two angles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    /// θ moves monotonically from θ_i to θ_f.
    Direct,
    /// θ sets off away from θ_f and reverses `turns` times (θ̇ = 0) before
    /// arriving, oscillating between the turning points on either side of θ_i.
    Bounce { turns: u32 },
}

const CHECK_STEP: f64 = 1e-3;

fn contour_open(lo: f64, hi: f64, e: f64, p: &PhysParams) -> bool {
    let n = ((hi - lo) / CHECK_STEP).ceil().max(1.0) as usize;
    (0..=n).all(|k| speed2(lo + (hi - lo) * k as f64 / n as f64, e, p) > 0.0)
}

/// First θ from `start` in direction `dir` where θ̇² reaches zero, within one period.
fn turning_point(start: f64, dir: f64, e: f64, p: &PhysParams) -> Option<f64> {
    let n = (TAU / CHECK_STEP) as usize;
    let mut prev = start;
    for k in 1..=n {
        let th = start + dir * CHECK_STEP * k as f64;
        if speed2(th, e, p) <= 0.0 {
            let (lo, hi) = if dir > 0.0 { (prev, th) } else { (th, prev) };
            return Some(bisect(|t| speed2(t, e, p), lo, hi, 1e-14));
        }
        prev = th;
    }
    None
}

/// Time to go from θ_i to θ_f along the contour h* = E with the given motion;
/// `None` when that motion does not exist at this energy.
pub fn time_of_flight(theta_i: f64, theta_f: f64, e: f64, motion: Motion, p: &PhysParams) -> Option<f64> {
    let dir = (theta_f - theta_i).signum();
    if dir == 0.0 || speed2(theta_i, e, p) <= 0.0 {
        return None;
    }
    let (lo, hi) = (theta_i.min(theta_f), theta_i.max(theta_f));
    match motion {
        Motion::Direct => contour_open(lo, hi, e, p).then(|| flight_time(theta_i, theta_f, e, false, p)),
        Motion::Bounce { turns: 0 } => None,
        Motion::Bounce { turns } => {
            let near = turning_point(theta_i, -dir, e, p)?;
            let far = turning_point(theta_i, dir, e, p);
            // θ_f must be reached before the far turning point
            if far.is_some_and(|f| (f - theta_f) * dir <= 0.0)
                || (turns > 1 && far.is_none())
                || !contour_open(lo, hi, e, p)
            {
                return None;
            }
            let t_mid = flight_time(theta_i, theta_f, e, false, p);
            let t_near = flight_time(near, theta_i, e, true, p);
            if turns == 1 {
                return Some(2.0 * t_near + t_mid);
            }
            let t_far = flight_time(far?, theta_i, e, true, p);
            let sweep = t_near + t_far;
            let last = if turns % 2 == 1 { t_near + t_mid } else { t_far - t_mid };
            Some(t_near + (turns - 1) as f64 * sweep + last)
        }
    }
}

/// Constant-energy path solving the two-point problem θ(0) = θ_i, θ(T) = θ_f.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindingPath {
    pub energy: f64,
    pub motion: Motion,
    pub grid: TimeGrid,
    pub points: Vec<PolarPoint>,
    /// ∫Ṡ dt along the path.
    pub action: f64,
}

impl WindingPath {
    pub fn start(&self) -> PolarPoint {
        self.points[0]
    }

    pub fn end(&self) -> PolarPoint {
        *self.points.last().expect("path has at least two points")
    }

    /// Bloch-sphere (x, z) along the path.
    pub fn xz(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|q| (q.theta.sin(), q.theta.cos())).collect()
    }

    pub fn max_energy_drift(&self, p: &PhysParams) -> f64 {
        self.points.iter().map(|q| (h_star(*q, p) - self.energy).abs()).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, p: &PhysParams, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "theta", "p", "x", "z", "h_star"]).map_err(csv_error)?;
        for (k, q) in self.points.iter().enumerate() {
            out.write_record([
                self.grid.time(k).to_string(),
                q.theta.to_string(),
                q.p.to_string(),
                q.theta.sin().to_string(),
                q.theta.cos().to_string(),
                h_star(*q, p).to_string(),
            ])
            .map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn initial_momentum(theta_i: f64, theta_f: f64, e: f64, motion: Motion, p: &PhysParams) -> Option<f64> {
    let (plus, minus) = p_pm(theta_i, e, p)?;
    let toward_larger = theta_f > theta_i;
    let first_up = match motion {
        Motion::Direct => toward_larger,
        Motion::Bounce { .. } => !toward_larger,
    };
    let a = h_star_coeffs(theta_i, p).a;
    // θ̇ = 2ap + b = ±√(b² + 4a(E − c)) with the sign of a
    Some(if first_up == (a >= 0.0) { plus } else { minus })
}

fn trace_path(theta_i: f64, p0: f64, t: f64, p: &PhysParams) -> Result<(TimeGrid, Vec<PolarPoint>, f64)> {
    let n = ((t / DEFAULT_DT).round() as usize).max(10);
    let grid = TimeGrid::new(t / n as f64, n)?;
    let pp = *p;
    let rhs = move |v: &[f64; 3]| {
        let q = PolarPoint::new(v[0], v[1]);
        let d = eom_2d(q, &pp);
        [d[0], d[1], sdot(q, &pp)]
    };
    let mut stepper = Dopri5::new(rhs, Tolerance::uniform(PATH_TOL));
    let mut v = [theta_i, p0, 0.0];
    let mut points = vec![PolarPoint::new(theta_i, p0)];
    for k in 0..n {
        stepper
            .advance(&mut v, grid.time(k), grid.time(k + 1), &|v| !v.iter().all(|x| x.is_finite()))
            .map_err(ode_error)?;
        points.push(PolarPoint::new(v[0], v[1]));
    }
    Ok((grid, points, v[2]))
}

fn endpoint_miss(theta_i: f64, theta_f: f64, e: f64, motion: Motion, t: f64, p: &PhysParams) -> Option<f64> {
    let p0 = initial_momentum(theta_i, theta_f, e, motion, p)?;
    let (_, pts, _) = trace_path(theta_i, p0, t, p).ok()?;
    Some(pts.last()?.theta - theta_f)
}

const ENERGY_SAMPLES: usize = 200;

fn energy_roots(theta_i: f64, theta_f: f64, t: f64, motion: Motion, p: &PhysParams) -> Result<Vec<f64>> {
    let dir = (theta_f - theta_i).signum();
    let tof = |e: f64| time_of_flight(theta_i, theta_f, e, motion, p);
    let floor_max = |lo: f64, hi: f64| {
        let n = ((hi - lo) / CHECK_STEP).ceil().max(1.0) as usize;
        (0..=n).map(|k| contour_floor(lo + (hi - lo) * k as f64 / n as f64, p)).fold(f64::NEG_INFINITY, f64::max)
    };
    match motion {
        Motion::Direct => {
            let e_lo = floor_max(theta_i.min(theta_f), theta_i.max(theta_f));
            let mut lo = e_lo + 1e-9 * e_lo.abs().max(1.0);
            let mut hi = lo + 1.0;
            while tof(hi).is_none_or(|v| v > t) {
                hi = lo + 2.0 * (hi - lo);
                if hi - lo > 1e9 {
                    return Err(Error::NoEnergyBracket("flight time stays above T".into()));
                }
            }
            if tof(lo).is_some_and(|v| v < t) {
                return Err(Error::NoEnergyBracket(format!("every direct path is faster than T = {t}")));
            }
            while hi - lo > 1e-13 * hi.abs().max(1.0) {
                let mid = 0.5 * (lo + hi);
                if tof(mid).is_none_or(|v| v > t) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Ok(vec![0.5 * (lo + hi)])
        }
        Motion::Bounce { .. } => {
            let e_lo = contour_floor(theta_i, p);
            let far = theta_i - dir * TAU;
            let e_hi = floor_max(theta_i.min(far), theta_i.max(far));
            if !(e_hi > e_lo) {
                return Err(Error::NoEnergyBracket("no turning point on the far side of θ_i".into()));
            }
            let es: Vec<f64> =
                (1..ENERGY_SAMPLES).map(|k| e_lo + (e_hi - e_lo) * k as f64 / ENERGY_SAMPLES as f64).collect();
            let times: Vec<Option<f64>> = es.par_iter().map(|&e| tof(e)).collect();
            let mut roots = Vec::new();
            for k in 0..es.len() - 1 {
                let (Some(a), Some(b)) = (times[k], times[k + 1]) else { continue };
                if (a - t < 0.0) != (b - t < 0.0) {
                    roots.push(bisect(
                        |e| tof(e).map_or(f64::NAN, |v| v - t),
                        es[k],
                        es[k + 1],
                        1e-13 * es[k].abs().max(1.0),
                    ));
                }
            }
            if roots.is_empty() {
                return Err(Error::NoEnergyBracket(format!("no bounce path reaches θ_f = {theta_f} in T = {t}")));
            }
            Ok(roots)
        }
    }
}

/// Solves θ(0) = θ_i, θ(T) = θ_f (θ unwrapped, so θ_f fixes the winding) on
/// constant-energy paths of the given motion. Energies are found by bisection
/// on the time of flight, then polished by secant iteration on the traced
/// endpoint. Returned in increasing energy.
pub fn winding_bvp(theta_i: f64, theta_f: f64, t: f64, p: &PhysParams, motion: Motion) -> Result<Vec<WindingPath>> {
    if !(t > 0.0) || theta_i == theta_f {
        return Err(Error::InvalidParams(format!("winding problem needs T > 0 and θ_i ≠ θ_f, got T={t}")));
    }
    let mut out = Vec::new();
    for e0 in energy_roots(theta_i, theta_f, t, motion, p)? {
        let mut e = e0;
        let miss = |e: f64| endpoint_miss(theta_i, theta_f, e, motion, t, p);
        let mut m = miss(e).ok_or(Error::NoEnergyBracket(format!("path at E = {e} cannot be traced")))?;
        let mut e_prev = e * (1.0 + 1e-7) + 1e-9;
        let mut m_prev = miss(e_prev).unwrap_or(m);
        for _ in 0..20 {
            if m.abs() <= 1e-10 || m == m_prev {
                break;
            }
            let next = e - m * (e - e_prev) / (m - m_prev);
            let Some(mn) = miss(next) else { break };
            if mn.abs() >= m.abs() {
                break;
            }
            (e_prev, m_prev, e, m) = (e, m, next, mn);
        }
        let p0 = initial_momentum(theta_i, theta_f, e, motion, p)
            .ok_or(Error::NoEnergyBracket(format!("no momentum at E = {e}")))?;
        let (grid, points, action) = trace_path(theta_i, p0, t, p)?;
        let end = points.last().map_or(f64::NAN, |q| q.theta);
        if (end - theta_f).abs() > ENDPOINT_TOL {
            return Err(Error::EndpointMismatch(format!("traced path ends at θ = {end}, target {theta_f}")));
        }
        out.push(WindingPath { energy: h_star(points[0], p), motion, grid, points, action });
    }
    out.sort_by(|a, b| a.energy.total_cmp(&b.energy));
    Ok(out)
}

/// θ wrapped to [0, 2π).
pub fn wrap_angle(theta: f64) -> f64 {
    theta.rem_euclid(TAU)
}

/// Angle of the excited state.
pub const THETA_EXCITED: f64 = PI;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn reference() -> PhysParams {
        PhysParams::reference()
    }

    #[test]
    fn polar_examples() {
        let pc = polar_map(0.0, 1.0, 0.3, -0.2).unwrap();
        assert_eq!((pc.theta, pc.r), (0.0, 1.0));
        let pc = polar_map(1.0, 0.0, 1.0, 0.0).unwrap();
        assert_relative_eq!(pc.theta, PI / 2.0);
        assert_relative_eq!(pc.p_r, 1.0);
        assert!(pc.p.abs() < 1e-15);
        assert!(polar_map(0.0, 0.0, 1.0, 1.0).is_err());
        assert!(cartesian_from_polar(&PolarCoords { r: 0.0, theta: 1.0, p_r: 0.0, p: 0.0 }).is_err());
    }

    proptest! {
        #[test]
        fn polar_round_trip(x in -1.0f64..1.0, z in -1.0f64..1.0, px in -5.0f64..5.0, pz in -5.0f64..5.0) {
            prop_assume!(x.hypot(z) > 1e-3);
            let back = cartesian_from_polar(&polar_map(x, z, px, pz).unwrap()).unwrap();
            for (a, b) in back.iter().zip([x, z, px, pz]) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn readout_substitution(th in -10.0f64..10.0, pm in -8.0f64..8.0) {
            let p = reference();
            let pt = PolarPoint::new(th, pm);
            let direct = h_polar(pt, polar_readout(pt, &p), &p);
            prop_assert!((direct - h_star(pt, &p)).abs() < 1e-10 * (1.0 + direct.abs()));
            // r* is stationary
            let r = polar_readout(pt, &p);
            let slope = (h_polar(pt, r + 1e-5, &p) - h_polar(pt, r - 1e-5, &p)) / 2e-5;
            prop_assert!(slope.abs() < 1e-8);
        }

        #[test]
        fn action_rate_identities(th in -10.0f64..10.0, pm in -8.0f64..8.0) {
            let p = reference();
            let pt = PolarPoint::new(th, pm);
            let k = h_star_coeffs(th, &p);
            let s = sdot(pt, &p);
            prop_assert!((s - (-k.a * pm * pm + k.c)).abs() < 1e-10);
            prop_assert!((h_star(pt, &p) - (pm * eom_2d(pt, &p)[0] + s)).abs() < 1e-10);
            if pm * pm * (1.0 - th.cos()) >= th.cos() {
                prop_assert!(s <= 1e-15);
            }
        }

        #[test]
        fn contour_roots(th in 0.3f64..6.0, e in -5.0f64..30.0) {
            let p = reference();
            if let Some((a, b)) = p_pm(th, e, &p) {
                prop_assert!((h_star(PolarPoint::new(th, a), &p) - e).abs() < 1e-10 * (1.0 + e.abs()));
                prop_assert!((h_star(PolarPoint::new(th, b), &p) - e).abs() < 1e-10 * (1.0 + e.abs()));
            } else {
                prop_assert!(e < contour_floor(th, &p));
            }
        }

        #[test]
        fn equations_of_motion_match_gradient(th in -10.0f64..10.0, pm in -8.0f64..8.0) {
            let p = reference();
            let h = 1e-6;
            let f = |t: f64, q: f64| h_star(PolarPoint::new(t, q), &p);
            let d = eom_2d(PolarPoint::new(th, pm), &p);
            prop_assert!((d[0] - (f(th, pm + h) - f(th, pm - h)) / (2.0 * h)).abs() < 1e-6 * (1.0 + d[0].abs()));
            prop_assert!((d[1] + (f(th + h, pm) - f(th - h, pm)) / (2.0 * h)).abs() < 1e-6 * (1.0 + d[1].abs()));
        }
    }

    #[test]
    fn coefficient_examples() {
        let p = reference();
        let k = h_star_coeffs(0.0, &p);
        assert_eq!((k.a, k.c), (0.0, 0.0));
        assert_relative_eq!(k.b, -p.omega_rabi);
        let k = h_star_coeffs(PI, &p);
        assert_relative_eq!(k.a, 2.0 * p.gamma);
        assert_relative_eq!(k.b, -p.omega_rabi, epsilon = 1e-12);
        assert_relative_eq!(k.c, -p.gamma);
        assert_eq!(sdot(PolarPoint::new(0.0, 3.0), &p), 0.0);
        assert_relative_eq!(sdot(PolarPoint::new(PI, 0.0), &p), -p.gamma);
        let d = eom_2d(PolarPoint::new(0.0, 0.0), &p);
        assert_relative_eq!(d[0], -p.omega_rabi);
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn second_derivatives_match_differences() {
        let p = reference();
        let h = 1e-5;
        for th in [0.3, 1.7, 3.0, 4.4, 5.9] {
            let dd = h_star_second_derivs(th, &p);
            let (up, dn) = (h_star_derivs(th + h, &p), h_star_derivs(th - h, &p));
            assert!((dd.a - (up.a - dn.a) / (2.0 * h)).abs() < 1e-8);
            assert!((dd.b - (up.b - dn.b) / (2.0 * h)).abs() < 1e-8);
            assert!((dd.c - (up.c - dn.c) / (2.0 * h)).abs() < 1e-8);
        }
    }

    #[test]
    fn linear_fallback_where_a_vanishes() {
        let p = reference();
        let (a, b) = p_pm(0.0, 2.0, &p).unwrap();
        assert_eq!(a, b);
        assert_relative_eq!(a, -2.0 / p.omega_rabi);
        assert!(p_pm(PI, -100.0, &p).is_none());
        let c = h_star_coeffs(2.0, &p).c;
        let (a, b) = p_pm(2.0, c, &p).unwrap();
        assert!(a.abs() < 1e-12 || b.abs() < 1e-12);
    }

    #[test]
    fn reference_fixed_point() {
        let p = reference();
        let fps = fixed_points(p.omega_ratio(), p.gamma).unwrap();
        assert_eq!(fps.len(), 1);
        let f = fps[0];
        assert!((f.theta_bar - 4.155).abs() < 0.005 && (f.p_bar - 0.967).abs() < 0.005, "{f:?}");
        assert_eq!(f.kind, FixedPointKind::Hyperbolic);
        assert!((f.energy + 2.126).abs() < 0.01);
        let d = eom_2d(f.point(), &p);
        assert!(d[0].abs() < 1e-8 && d[1].abs() < 1e-8);
        let (hi, lo) = p_pm(PI, f.energy, &p).unwrap();
        assert!(hi > lo);
    }

    #[test]
    fn slow_drive_fixed_points() {
        let fps = fixed_points(0.13, 1.0).unwrap();
        assert_eq!(fps.len(), 3);
        let want = [
            (4.63, -1.25, FixedPointKind::Hyperbolic),
            (5.55, -5.63, FixedPointKind::Elliptic),
            (6.04, -0.201, FixedPointKind::Hyperbolic),
        ];
        for (f, (th, pb, kind)) in fps.iter().zip(want) {
            assert!((f.theta_bar - th).abs() < 0.02 && (f.p_bar - pb).abs() < 0.02, "{f:?}");
            assert_eq!(f.kind, kind);
        }
        assert!((fps[0].energy + 0.938).abs() < 0.02, "{:?}", fps[0]);
        assert_eq!(fixed_points(0.2, 1.0).unwrap().len(), 1);
        assert!(fixed_points(0.0, 1.0).is_err());
    }

    #[test]
    fn bifurcation_examples() {
        let scan = bifurcation_scan(0.05, 0.4, 36).unwrap();
        assert!((scan.omega_c - 0.145).abs() < 0.005, "{}", scan.omega_c);
        assert_eq!((scan.count_below, scan.count_above), (3, 1));
        for th in scan.new_pair().unwrap() {
            assert!((th - 5.18).abs() < 0.05, "{th}");
        }
        assert!(matches!(bifurcation_scan(0.5, 1.0, 6), Err(Error::NoTransition { .. })));
    }

    #[test]
    fn winding_energies() {
        let p = reference();
        let a = winding_bvp(PI, -1.24 - TAU, 1.4, &p, Motion::Direct).unwrap();
        assert_eq!(a.len(), 1);
        assert!((a[0].energy - 11.09).abs() < 0.05, "E_A = {}", a[0].energy);
        let b = winding_bvp(PI, -1.24, 1.4, &p, Motion::Bounce { turns: 2 }).unwrap();
        assert_eq!(b.len(), 1);
        assert!((b[0].energy + 4.09).abs() < 0.05, "E_B = {}", b[0].energy);
        // a slower single-turn path also meets the boundary conditions
        let b1 = winding_bvp(PI, -1.24, 1.4, &p, Motion::Bounce { turns: 1 }).unwrap();
        assert_eq!(b1.len(), 1);
        assert!(b1[0].energy > b[0].energy && b1[0].energy < -2.126);
        for (w, target) in [(&a[0], -1.24 - TAU), (&b[0], -1.24), (&b1[0], -1.24)] {
            assert!(w.max_energy_drift(&p) < 1e-7);
            assert!((w.end().theta - target).abs() < ENDPOINT_TOL);
        }
        let turns = |w: &WindingPath| {
            w.points.windows(3).filter(|q| (q[1].theta - q[0].theta) * (q[2].theta - q[1].theta) < 0.0).count()
        };
        assert_eq!((turns(&a[0]), turns(&b[0]), turns(&b1[0])), (0, 2, 1));
    }

    #[test]
    fn drive_only_limit() {
        // with γ → 0 the motion is pure rotation θ̇ = −Ω
        let p = PhysParams { gamma: 1e-9, eta: 1.0, omega_rabi: 2.0, phi: 0.0 };
        let w = winding_bvp(PI, PI - 2.0 * 0.7, 0.7, &p, Motion::Direct).unwrap();
        assert!((w[0].end().theta - (PI - 1.4)).abs() < 1e-6);
        assert!(w[0].points.iter().all(|q| (eom_2d(*q, &p)[0] + 2.0).abs() < 1e-3));
    }

    #[test]
    fn region_labels() {
        let p = reference();
        let e_c = separatrix_energy(&p).unwrap().unwrap();
        let (up, down) = p_pm(PI, 11.0, &p).unwrap();
        assert_eq!(classify_region(PolarPoint::new(PI, down), e_c, &p), Region::A);
        assert_eq!(classify_region(PolarPoint::new(PI, up), e_c, &p), Region::C);
        let (_, low) = p_pm(PI, -4.0, &p).unwrap();
        assert_eq!(classify_region(PolarPoint::new(PI, low), e_c, &p), Region::B);
    }

    #[test]
    fn unit_purity_flow_reduces_to_polar() {
        let p = reference().with_eta(1.0);
        for (th0, px, pz) in [(2.0_f64, 0.3, -0.4), (1.0, 0.1, 0.1), (4.0, -0.5, 0.2)] {
            let start = crate::mlp::PhasePoint::new(th0.sin(), th0.cos(), px, pz);
            let grid = TimeGrid::new(0.002, 500).unwrap();
            let path = crate::mlp::integrate_mlp(&start, &p, &grid).unwrap();
            assert!(path.points.iter().all(|q| (q.x.hypot(q.z) - 1.0).abs() < 1e-9));
            let pc = polar_map(start.x, start.z, start.px, start.pz).unwrap();
            assert_relative_eq!(
                crate::mlp::energy(&start, &p),
                h_star(PolarPoint::new(th0, pc.p), &p),
                epsilon = 1e-10
            );
            let pp = p;
            let y = crate::ode::integrate(
                move |v: &[f64; 2]| eom_2d(PolarPoint::new(v[0], v[1]), &pp),
                [th0, pc.p],
                0.0,
                1.0,
                crate::ode::Tolerance::uniform(1e-12),
            )
            .unwrap();
            let end = path.end();
            let pe = polar_map(end.x, end.z, end.px, end.pz).unwrap();
            assert!((wrap_angle(y[0]) - wrap_angle(pe.theta)).abs() < 1e-6);
            assert!((y[1] - pe.p).abs() < 1e-6);
        }
    }

    #[test]
    fn portrait_csv_shape() {
        let mut buf = Vec::new();
        write_portrait_csv(&reference(), (0.0, TAU), (-3.0, 3.0), 5, 4, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("theta,p,h_star,sdot"));
        assert_eq!(text.lines().count(), 21);
    }
}
