//! Lagrangian-manifold snapshots: sweep a grid of initial momenta at a fixed
//! initial state, map each node to its final state, then count layers over a
//! final state and locate folds of the momentum → state map.

use std::collections::VecDeque;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mlp::{energy, flow_final, PhasePoint};
use crate::params::{BlochState, PhysParams};

/// Jacobian determinants smaller than this are treated as having no sign.
pub const JACOBIAN_FLOOR: f64 = 1e-8;
/// Default pin radius, matching the post-selection tolerance.
pub const DEFAULT_PIN_RADIUS: f64 = 0.05;

/// Square momentum box sampled with `n_grid` nodes per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentumBox {
    pub p_min: f64,
    pub p_max: f64,
    pub n_grid: usize,
}

impl Default for MomentumBox {
    fn default() -> Self {
        Self { p_min: -10.0, p_max: 10.0, n_grid: 121 }
    }
}

impl MomentumBox {
    pub fn axis(&self) -> Vec<f64> {
        let n = self.n_grid.max(2);
        (0..n).map(|i| self.p_min + (self.p_max - self.p_min) * i as f64 / (n - 1) as f64).collect()
    }

    pub fn spacing(&self) -> f64 {
        (self.p_max - self.p_min) / (self.n_grid.max(2) - 1) as f64
    }

    /// Same box with the grid spacing halved; every coarse node is kept.
    pub fn refined(&self) -> Self {
        Self { n_grid: 2 * self.n_grid - 1, ..*self }
    }
}

/// One node of a manifold sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SheetNode {
    pub p_x0: f64,
    pub p_z0: f64,
    pub x_f: f64,
    pub z_f: f64,
    #[serde(rename = "E")]
    pub energy: f64,
    pub valid: bool,
    /// det ∂(x_f, z_f)/∂(p_x0, p_z0) by central differences of step
    /// [`JACOBIAN_STEP`]; NaN where a displaced shot fails.
    pub jacobian: f64,
}

/// Momentum offset used for the per-node Jacobian.
pub const JACOBIAN_STEP: f64 = 1e-6;

fn node_at(q_i: BlochState, p: &PhysParams, t: f64, px: f64, pz: f64) -> SheetNode {
    let start = PhasePoint::at(q_i, px, pz);
    let e = energy(&start, p);
    let Ok(end) = flow_final(&start, p, t) else {
        return SheetNode {
            p_x0: px,
            p_z0: pz,
            x_f: f64::NAN,
            z_f: f64::NAN,
            energy: e,
            valid: false,
            jacobian: f64::NAN,
        };
    };
    let h = JACOBIAN_STEP;
    let shot = |dx: f64, dz: f64| flow_final(&PhasePoint::at(q_i, px + dx, pz + dz), p, t).ok();
    let jacobian = match (shot(h, 0.0), shot(-h, 0.0), shot(0.0, h), shot(0.0, -h)) {
        (Some(a), Some(b), Some(c), Some(d)) => {
            let (xa, za) = ((a.x - b.x) / (2.0 * h), (a.z - b.z) / (2.0 * h));
            let (xb, zb) = ((c.x - d.x) / (2.0 * h), (c.z - d.z) / (2.0 * h));
            xa * zb - xb * za
        }
        _ => f64::NAN,
    };
    SheetNode { p_x0: px, p_z0: pz, x_f: end.x, z_f: end.z, energy: e, valid: true, jacobian }
}

/// Final states of the momentum grid after time `t`, row-major with the p_x
/// index varying slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSheet {
    pub q_i: BlochState,
    pub t: f64,
    pub grid: MomentumBox,
    pub nodes: Vec<SheetNode>,
}

/// Maps every node of `grid` through the MLP flow. Singular shots are kept as
/// invalid nodes.
pub fn sweep(q_i: BlochState, p: &PhysParams, t: f64, grid: &MomentumBox) -> ManifoldSheet {
    let axis = grid.axis();
    let n = axis.len();
    let nodes = (0..n * n).into_par_iter().map(|idx| node_at(q_i, p, t, axis[idx / n], axis[idx % n])).collect();
    ManifoldSheet { q_i, t, grid: *grid, nodes }
}

impl ManifoldSheet {
    pub fn n(&self) -> usize {
        self.grid.n_grid.max(2)
    }

    pub fn node(&self, i: usize, j: usize) -> &SheetNode {
        &self.nodes[i * self.n() + j]
    }

    pub fn invalid_fraction(&self) -> f64 {
        self.nodes.iter().filter(|n| !n.valid).count() as f64 / self.nodes.len() as f64
    }

    fn neighbours(&self, i: usize, j: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n() as i64;
        (-1i64..=1).flat_map(move |di| (-1i64..=1).map(move |dj| (di, dj))).filter_map(move |(di, dj)| {
            let (a, b) = (i as i64 + di, j as i64 + dj);
            ((di, dj) != (0, 0) && a >= 0 && b >= 0 && a < n && b < n).then_some((a as usize, b as usize))
        })
    }

    fn jacobian_at(&self, i: usize, j: usize) -> Option<f64> {
        let d = self.node(i, j).jacobian;
        (d.is_finite() && d.abs() > JACOBIAN_FLOOR).then_some(d)
    }

    /// Median distance between final states of 4-adjacent valid nodes.
    pub fn median_final_spacing(&self) -> f64 {
        let n = self.n();
        let mut d = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let a = self.node(i, j);
                for (u, v) in [(i + 1, j), (i, j + 1)] {
                    if u < n && v < n && a.valid && self.node(u, v).valid {
                        let b = self.node(u, v);
                        d.push((a.x_f - b.x_f).hypot(a.z_f - b.z_f));
                    }
                }
            }
        }
        if d.is_empty() {
            return f64::NAN;
        }
        d.sort_by(f64::total_cmp);
        d[d.len() / 2]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for node in &self.nodes {
            out.serialize(node).map_err(csv_error)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_error(e: csv::Error) -> crate::Error {
    crate::Error::Format(e.to_string())
}

/// Outcome of a pin test.
#[derive(Debug, Clone, PartialEq)]
pub struct PinReport {
    /// Number of connected momentum components landing within the radius.
    pub layers: usize,
    /// Grid indices of each component.
    pub components: Vec<Vec<(usize, usize)>>,
    /// Median final-state spacing of the sheet; the radius should exceed it.
    pub final_spacing: f64,
}

impl PinReport {
    pub fn resolved(&self, radius: f64) -> bool {
        radius > self.final_spacing
    }
}

/// Distance from `q` to the triangle with vertices `v`.
fn triangle_distance(q: (f64, f64), v: [(f64, f64); 3]) -> f64 {
    let cross = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    let s = [cross(v[0], v[1], q), cross(v[1], v[2], q), cross(v[2], v[0], q)];
    if s.iter().all(|&x| x >= 0.0) || s.iter().all(|&x| x <= 0.0) {
        return 0.0;
    }
    let seg = |a: (f64, f64), b: (f64, f64)| {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (((q.0 - a.0) * dx + (q.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        (q.0 - a.0 - t * dx).hypot(q.1 - a.1 - t * dy)
    };
    seg(v[0], v[1]).min(seg(v[1], v[2])).min(seg(v[2], v[0]))
}

/// Counts manifold layers over `q_f`. The sheet is treated as piecewise linear
/// over the triangulated momentum grid: a node is selected when its own final
/// state, or the image of a triangle it belongs to, lies within `radius` of
/// `q_f`. Selected nodes are grouped into connected components under
/// 8-neighbour grid adjacency. Triangles whose image is longer than
/// `max_image_edge` are skipped as under-resolved.
pub fn pin_test_with(sheet: &ManifoldSheet, q_f: BlochState, radius: f64, max_image_edge: f64) -> PinReport {
    let n = sheet.n();
    let q = (q_f.x, q_f.z);
    let mut hit: Vec<bool> =
        sheet.nodes.iter().map(|nd| nd.valid && (nd.x_f - q.0).hypot(nd.z_f - q.1) <= radius).collect();
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            for tri in [[(i, j), (i + 1, j), (i + 1, j + 1)], [(i, j), (i + 1, j + 1), (i, j + 1)]] {
                let nodes = tri.map(|(a, b)| sheet.node(a, b));
                if !nodes.iter().all(|nd| nd.valid) {
                    continue;
                }
                let v = nodes.map(|nd| (nd.x_f, nd.z_f));
                let longest =
                    (0..3).map(|k| (v[k].0 - v[(k + 1) % 3].0).hypot(v[k].1 - v[(k + 1) % 3].1)).fold(0.0, f64::max);
                if longest <= max_image_edge && triangle_distance(q, v) <= radius {
                    for (a, b) in tri {
                        hit[a * n + b] = true;
                    }
                }
            }
        }
    }
    let mut seen = vec![false; n * n];
    let mut components = Vec::new();
    for start in 0..n * n {
        if !hit[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(k) = queue.pop_front() {
            let (i, j) = (k / n, k % n);
            comp.push((i, j));
            for (a, b) in sheet.neighbours(i, j) {
                let idx = a * n + b;
                if hit[idx] && !seen[idx] {
                    seen[idx] = true;
                    queue.push_back(idx);
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    PinReport { layers: components.len(), components, final_spacing: sheet.median_final_spacing() }
}

/// [`pin_test_with`] using an image-edge cap of ten radii.
pub fn pin_test(sheet: &ManifoldSheet, q_f: BlochState, radius: f64) -> PinReport {
    pin_test_with(sheet, q_f, radius, 10.0 * radius)
}

/// Point on the estimated fold curve, interpolated along a grid edge where the
/// Jacobian determinant changes sign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldPoint {
    pub p_x0: f64,
    pub p_z0: f64,
    pub x_f: f64,
    pub z_f: f64,
}

/// Locates sign changes of the Jacobian determinant across 4-adjacent edges,
/// ignoring nodes whose determinant magnitude is below [`JACOBIAN_FLOOR`].
pub fn detect_fold(sheet: &ManifoldSheet) -> Vec<FoldPoint> {
    let n = sheet.n();
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let Some(d1) = sheet.jacobian_at(i, j) else { continue };
            for (u, v) in [(i + 1, j), (i, j + 1)] {
                if u >= n || v >= n {
                    continue;
                }
                let Some(d2) = sheet.jacobian_at(u, v) else { continue };
                if d1.signum() == d2.signum() {
                    continue;
                }
                let s = d1 / (d1 - d2);
                let (a, b) = (sheet.node(i, j), sheet.node(u, v));
                let lerp = |x: f64, y: f64| x + s * (y - x);
                out.push(FoldPoint {
                    p_x0: lerp(a.p_x0, b.p_x0),
                    p_z0: lerp(a.p_z0, b.p_z0),
                    x_f: lerp(a.x_f, b.x_f),
                    z_f: lerp(a.z_f, b.z_f),
                });
            }
        }
    }
    out
}

/// Whether the Jacobian keeps one sign over a pin-test component (nodes below
/// the floor or without a determinant are ignored).
pub fn component_sign_constant(sheet: &ManifoldSheet, component: &[(usize, usize)]) -> bool {
    let signs: Vec<f64> = component.iter().filter_map(|&(i, j)| sheet.jacobian_at(i, j)).map(f64::signum).collect();
    signs.windows(2).all(|w| w[0] == w[1])
}

pub fn write_fold_csv<W: Write>(points: &[FoldPoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for pt in points {
        out.serialize(pt).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}
