//! Adaptive Dormand–Prince 5(4) integration for small fixed-size systems.
//!
//! Steps are controlled by a mixed absolute/relative error norm on the embedded
//! fourth-order estimate. Integration of a span lands exactly on its end time,
//! so callers can march over an output grid interval by interval while the
//! step-size state carries across intervals.

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;

const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;

// fifth minus fourth order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub atol: f64,
    pub rtol: f64,
}

impl Tolerance {
    pub const fn uniform(tol: f64) -> Self {
        Self { atol: tol, rtol: tol }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OdeFailure {
    /// Step size fell below the floor.
    StepUnderflow { t: f64, h: f64 },
    /// The state left the admissible region reported by the abort predicate.
    Aborted { t: f64 },
    /// Non-finite values appeared in the state.
    NonFinite { t: f64 },
}

impl OdeFailure {
    pub fn time(&self) -> f64 {
        match *self {
            OdeFailure::StepUnderflow { t, .. } | OdeFailure::Aborted { t } | OdeFailure::NonFinite { t } => t,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

/// Stateful integrator for `y' = f(y)` (autonomous) with `N` components.
pub struct Dopri5<F, const N: usize>
where
    F: Fn(&[f64; N]) -> [f64; N],
{
    rhs: F,
    tol: Tolerance,
    h: f64,
    h_min: f64,
    h_max: f64,
    pub stats: OdeStats,
}

#[inline]
fn axpy<const N: usize>(y: &[f64; N], terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for &(c, k) in terms {
        for i in 0..N {
            out[i] += c * k[i];
        }
    }
    out
}

impl<F, const N: usize> Dopri5<F, N>
where
    F: Fn(&[f64; N]) -> [f64; N],
{
    pub fn new(rhs: F, tol: Tolerance) -> Self {
        Self { rhs, tol, h: 0.0, h_min: 1e-14, h_max: f64::INFINITY, stats: OdeStats::default() }
    }

    pub fn with_max_step(mut self, h_max: f64) -> Self {
        self.h_max = h_max;
        self
    }

    fn initial_step(&self, y: &[f64; N], f0: &[f64; N], span: f64) -> f64 {
        let mut d0 = 0.0f64;
        let mut d1 = 0.0f64;
        for i in 0..N {
            let sc = self.tol.atol + self.tol.rtol * y[i].abs();
            d0 = d0.max((y[i] / sc).abs());
            d1 = d1.max((f0[i] / sc).abs());
        }
        let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h.min(span).min(self.h_max).max(self.h_min)
    }

    /// Advances `y` from `t0` to `t1` (`t1 > t0`). `abort` is checked after every
    /// accepted step and stops integration when it returns true.
    pub fn advance(
        &mut self,
        y: &mut [f64; N],
        t0: f64,
        t1: f64,
        abort: &dyn Fn(&[f64; N]) -> bool,
    ) -> Result<(), OdeFailure> {
        let span = t1 - t0;
        if span <= 0.0 {
            return Ok(());
        }
        let mut t = t0;
        let mut k1 = (self.rhs)(y);
        self.stats.rhs_evals += 1;
        if self.h <= 0.0 {
            self.h = self.initial_step(y, &k1, span);
        }
        loop {
            let remaining = t1 - t;
            if remaining <= 1e-15 * t1.abs().max(1.0) {
                return Ok(());
            }
            let last = self.h >= remaining;
            let h = if last { remaining } else { self.h };

            let k2 = (self.rhs)(&axpy(y, &[(h * A21, &k1)]));
            let k3 = (self.rhs)(&axpy(y, &[(h * A31, &k1), (h * A32, &k2)]));
            let k4 = (self.rhs)(&axpy(y, &[(h * A41, &k1), (h * A42, &k2), (h * A43, &k3)]));
            let k5 = (self.rhs)(&axpy(y, &[(h * A51, &k1), (h * A52, &k2), (h * A53, &k3), (h * A54, &k4)]));
            let k6 =
                (self.rhs)(&axpy(y, &[(h * A61, &k1), (h * A62, &k2), (h * A63, &k3), (h * A64, &k4), (h * A65, &k5)]));
            let y_new = axpy(y, &[(h * B1, &k1), (h * B3, &k3), (h * B4, &k4), (h * B5, &k5), (h * B6, &k6)]);
            let k7 = (self.rhs)(&y_new);
            self.stats.rhs_evals += 6;

            let mut err = 0.0f64;
            for i in 0..N {
                let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let sc = self.tol.atol + self.tol.rtol * y[i].abs().max(y_new[i].abs());
                err = err.max((e / sc).abs());
            }
            if !err.is_finite() {
                // treat as a failed step and shrink hard
                self.stats.rejected += 1;
                self.h = h * 0.1;
                if self.h < self.h_min {
                    return Err(OdeFailure::NonFinite { t });
                }
                continue;
            }

            if err <= 1.0 {
                t = if last { t1 } else { t + h };
                *y = y_new;
                k1 = k7;
                self.stats.accepted += 1;
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(OdeFailure::NonFinite { t });
                }
                if abort(y) {
                    return Err(OdeFailure::Aborted { t });
                }
                let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                // keep the nominal step when the last piece of a span was truncated
                let base = if last { self.h.max(h) } else { h };
                self.h = (base * fac).min(self.h_max);
            } else {
                self.stats.rejected += 1;
                self.h = h * (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            }
            if self.h < self.h_min {
                return Err(OdeFailure::StepUnderflow { t, h: self.h });
            }
        }
    }
}

/// Integrates once from `t0` to `t1` with a fresh step-size state.
pub fn integrate<F, const N: usize>(
    rhs: F,
    y0: [f64; N],
    t0: f64,
    t1: f64,
    tol: Tolerance,
) -> Result<[f64; N], OdeFailure>
where
    F: Fn(&[f64; N]) -> [f64; N],
{
    let mut y = y0;
    Dopri5::new(rhs, tol).advance(&mut y, t0, t1, &|_| false)?;
    Ok(y)
}
