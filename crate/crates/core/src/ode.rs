//! Dormand–Prince 5(4) integrator with continuous output, working on
//! complex state vectors.

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

/// First-order system dy/dt = f(t, y) over complex vectors.
pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, y: &[C64], dy: &mut [C64]);
    /// Times where f is not smooth; steps are made to land on them.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub h_max: f64,
    pub h_min: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rtol: 1e-8,
            atol: 1e-10,
            h_max: f64::INFINITY,
            h_min: 1e-14,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
    /// Sum over accepted steps of the max-abs local error estimate.
    pub error_estimate: f64,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
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
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Stepper state. Owns the current solution and the data needed to
/// interpolate inside the last accepted step.
pub struct Dopri5<'a, S: OdeSystem + ?Sized> {
    sys: &'a S,
    tol: Tolerances,
    t: f64,
    y: Vec<C64>,
    h: f64,
    k: [Vec<C64>; 7],
    fsal_valid: bool,
    y_new: Vec<C64>,
    scratch: Vec<C64>,
    // continuous output of the last accepted step
    t_old: f64,
    h_old: f64,
    rcont: [Vec<C64>; 5],
    breakpoints: Vec<f64>,
    next_break: usize,
    stats: StepStats,
}

impl<'a, S: OdeSystem + ?Sized> Dopri5<'a, S> {
    pub fn new(sys: &'a S, t0: f64, y0: &[C64], tol: Tolerances) -> Result<Self> {
        let n = sys.dim();
        if y0.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: y0.len(),
            });
        }
        let zeros = || vec![C64::new(0.0, 0.0); n];
        let mut breakpoints = sys.breakpoints();
        breakpoints.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let next_break = breakpoints.partition_point(|&b| b <= t0);
        Ok(Dopri5 {
            sys,
            tol,
            t: t0,
            y: y0.to_vec(),
            h: 0.0,
            k: [zeros(), zeros(), zeros(), zeros(), zeros(), zeros(), zeros()],
            fsal_valid: false,
            y_new: zeros(),
            scratch: zeros(),
            t_old: t0,
            h_old: 0.0,
            rcont: [zeros(), zeros(), zeros(), zeros(), zeros()],
            breakpoints,
            next_break,
            stats: StepStats::default(),
        })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn y(&self) -> &[C64] {
        &self.y
    }

    pub fn stats(&self) -> StepStats {
        self.stats
    }

    /// Restart from a new state (e.g. after a quantum jump).
    pub fn reset(&mut self, t: f64, y: &[C64]) {
        self.t = t;
        self.y.copy_from_slice(y);
        self.fsal_valid = false;
        self.t_old = t;
        self.h_old = 0.0;
        self.next_break = self.breakpoints.partition_point(|&b| b <= t);
    }

    fn error_norm(&self, err: &[C64]) -> f64 {
        let mut acc = 0.0;
        for ((e, y0), y1) in err.iter().zip(&self.y).zip(&self.y_new) {
            let sc = self.tol.atol + self.tol.rtol * y0.norm().max(y1.norm());
            let r = e.norm() / sc;
            acc += r * r;
        }
        (acc / err.len().max(1) as f64).sqrt()
    }

    fn initial_step(&mut self, t_limit: f64) -> f64 {
        // Hairer & Wanner's starting-step heuristic.
        let n = self.y.len().max(1) as f64;
        let sc = |y: &C64| self.tol.atol + self.tol.rtol * y.norm();
        let d0 = (self.y.iter().map(|y| (y.norm() / sc(y)).powi(2)).sum::<f64>() / n).sqrt();
        let d1 = (self
            .y
            .iter()
            .zip(&self.k[0])
            .map(|(y, f)| (f.norm() / sc(y)).powi(2))
            .sum::<f64>()
            / n)
            .sqrt();
        let span = (t_limit - self.t).abs();
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(span).min(self.tol.h_max);
        for i in 0..self.y.len() {
            self.scratch[i] = self.y[i] + self.k[0][i] * h0;
        }
        self.sys.eval(self.t + h0, &self.scratch, &mut self.k[1]);
        self.stats.evaluations += 1;
        let d2 = (self
            .y
            .iter()
            .zip(self.k[1].iter().zip(&self.k[0]))
            .map(|(y, (f1, f0))| ((f1 - f0).norm() / sc(y)).powi(2))
            .sum::<f64>()
            / n)
            .sqrt()
            / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(span).min(self.tol.h_max).max(self.tol.h_min)
    }

    /// Take one accepted step, not passing `t_limit` nor the next breakpoint.
    pub fn step(&mut self, t_limit: f64) -> Result<()> {
        let n = self.y.len();
        if !self.fsal_valid {
            let (t, y) = (self.t, &self.y);
            self.sys.eval(t, y, &mut self.k[0]);
            self.stats.evaluations += 1;
            self.fsal_valid = true;
            if self.h <= 0.0 {
                self.h = self.initial_step(t_limit);
            }
        }
        let mut limit = t_limit;
        let mut hits_break = false;
        if let Some(&b) = self.breakpoints.get(self.next_break) {
            if b < limit {
                limit = b;
                hits_break = true;
            }
        }
        loop {
            let mut h = self.h.min(self.tol.h_max);
            let mut lands = false;
            if self.t + h >= limit || (limit - self.t - h) < 1e-12 * limit.abs().max(1.0) {
                h = limit - self.t;
                lands = true;
            }
            if h < self.tol.h_min {
                if lands && h > 0.0 {
                    // tiny remainder before a landing point: take it
                } else {
                    return Err(Error::StepSizeUnderflow { t: self.t, h });
                }
            }
            let t = self.t;
            let y = &self.y;
            let k = &mut self.k;
            let s = &mut self.scratch;
            macro_rules! stage {
                ($dst:expr, $c:expr, $($a:expr => $ki:expr),+) => {{
                    for i in 0..n {
                        let mut acc = C64::new(0.0, 0.0);
                        $( acc += k[$ki][i] * $a; )+
                        s[i] = y[i] + acc * h;
                    }
                    let (_, hi) = k.split_at_mut($dst);
                    self.sys.eval(t + $c * h, s, &mut hi[0]);
                }};
            }
            stage!(1, C2, A21 => 0);
            stage!(2, C3, A31 => 0, A32 => 1);
            stage!(3, C4, A41 => 0, A42 => 1, A43 => 2);
            stage!(4, C5, A51 => 0, A52 => 1, A53 => 2, A54 => 3);
            stage!(5, 1.0, A61 => 0, A62 => 1, A63 => 2, A64 => 3, A65 => 4);
            for i in 0..n {
                let acc = k[0][i] * A71
                    + k[2][i] * A73
                    + k[3][i] * A74
                    + k[4][i] * A75
                    + k[5][i] * A76;
                self.y_new[i] = y[i] + acc * h;
            }
            let t_new = if lands { limit } else { t + h };
            self.sys.eval(t_new, &self.y_new, &mut k[6]);
            self.stats.evaluations += 6;
            let mut err_max = 0.0f64;
            for i in 0..n {
                let e = (k[0][i] * E1
                    + k[2][i] * E3
                    + k[3][i] * E4
                    + k[4][i] * E5
                    + k[5][i] * E6
                    + k[6][i] * E7)
                    * h;
                s[i] = e;
                err_max = err_max.max(e.norm());
            }
            let err = self.error_norm(&self.scratch);
            if !err.is_finite() {
                self.stats.rejected += 1;
                self.h = h * 0.1;
                continue;
            }
            if err <= 1.0 {
                // continuous output coefficients
                let k = &self.k;
                for i in 0..n {
                    let ydiff = self.y_new[i] - self.y[i];
                    let bspl = k[0][i] * h - ydiff;
                    self.rcont[0][i] = self.y[i];
                    self.rcont[1][i] = ydiff;
                    self.rcont[2][i] = bspl;
                    self.rcont[3][i] = ydiff - k[6][i] * h - bspl;
                    self.rcont[4][i] = (k[0][i] * D1
                        + k[2][i] * D3
                        + k[3][i] * D4
                        + k[4][i] * D5
                        + k[5][i] * D6
                        + k[6][i] * D7)
                        * h;
                }
                self.t_old = self.t;
                self.h_old = h;
                self.t = t_new;
                std::mem::swap(&mut self.y, &mut self.y_new);
                self.k.swap(0, 6);
                self.stats.accepted += 1;
                self.stats.error_estimate += err_max;
                let fac = (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
                if !lands {
                    self.h = h * fac;
                } else {
                    self.h = self.h.max(h * fac);
                }
                if lands && hits_break {
                    self.next_break += 1;
                    // derivative may jump across a breakpoint
                    self.fsal_valid = false;
                }
                return Ok(());
            }
            self.stats.rejected += 1;
            let fac = (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            self.h = h * fac;
        }
    }

    /// Evaluate the continuous extension of the last accepted step at `t`.
    pub fn interpolate(&self, t: f64, out: &mut [C64]) {
        if self.h_old == 0.0 || t == self.t {
            out.copy_from_slice(&self.y);
            return;
        }
        let th = (t - self.t_old) / self.h_old;
        let th1 = 1.0 - th;
        let r = &self.rcont;
        for i in 0..out.len() {
            out[i] = r[0][i] + (r[1][i] + (r[2][i] + (r[3][i] + r[4][i] * th1) * th) * th1) * th;
        }
    }

    /// Start of the last accepted step.
    pub fn t_previous(&self) -> f64 {
        self.t_old
    }

    /// Advance until `t_target` is covered, handing every grid time passed to
    /// `observe` with the interpolated state.
    pub fn advance_to(&mut self, t_target: f64) -> Result<()> {
        while self.t < t_target {
            self.step(t_target)?;
        }
        Ok(())
    }
}

/// Integrate over `grid` (grid[0] is the initial time) and call `observe`
/// with each grid time and state. Steps are not clipped to grid points; the
/// continuous extension supplies the intermediate values.
pub fn integrate_grid<S, F>(
    sys: &S,
    y0: &[C64],
    grid: &[f64],
    tol: Tolerances,
    mut observe: F,
) -> Result<StepStats>
where
    S: OdeSystem + ?Sized,
    F: FnMut(usize, f64, &[C64]) -> Result<()>,
{
    if grid.is_empty() {
        return Err(Error::InvalidGrid("empty grid".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidGrid("grid must be finite and strictly increasing".into()));
    }
    let mut solver = Dopri5::new(sys, grid[0], y0, tol)?;
    observe(0, grid[0], y0)?;
    let t_end = *grid.last().unwrap();
    let mut buf = vec![C64::new(0.0, 0.0); y0.len()];
    let mut next = 1;
    while next < grid.len() {
        solver.step(t_end)?;
        while next < grid.len() && grid[next] <= solver.t() {
            if grid[next] == solver.t() {
                observe(next, grid[next], solver.y())?;
            } else {
                solver.interpolate(grid[next], &mut buf);
                observe(next, grid[next], &buf)?;
            }
            next += 1;
        }
    }
    Ok(solver.stats())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Oscillator {
        w: f64,
        decay: f64,
    }

    impl OdeSystem for Oscillator {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, _t: f64, y: &[C64], dy: &mut [C64]) {
            dy[0] = C64::new(-self.decay, -self.w) * y[0];
        }
    }

    #[test]
    fn damped_rotation_matches_exact() {
        let sys = Oscillator { w: 5.0, decay: 0.7 };
        let grid: Vec<f64> = (0..=200).map(|i| i as f64 * 0.05).collect();
        let mut worst = 0.0f64;
        integrate_grid(&sys, &[C64::new(1.0, 0.0)], &grid, Tolerances::default(), |_, t, y| {
            let exact = C64::new(-0.7 * t, -5.0 * t).exp();
            worst = worst.max((y[0] - exact).norm());
            Ok(())
        })
        .unwrap();
        assert!(worst < 1e-7, "worst error {worst}");
    }

    struct Kink;
    impl OdeSystem for Kink {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, t: f64, _y: &[C64], dy: &mut [C64]) {
            dy[0] = C64::new(if t < 1.0 { t } else { 2.0 - t }, 0.0);
        }
        fn breakpoints(&self) -> Vec<f64> {
            vec![1.0]
        }
    }

    #[test]
    fn lands_on_breakpoints() {
        let grid = [0.0, 0.5, 1.0, 1.5, 2.0];
        let mut vals = Vec::new();
        let stats = integrate_grid(&Kink, &[C64::new(0.0, 0.0)], &grid, Tolerances::default(), |_, _, y| {
            vals.push(y[0].re);
            Ok(())
        })
        .unwrap();
        // y = t²/2 before the kink, 1/2 + (t − 1) − (t² − 1)/2 after
        let exact = |t: f64| if t < 1.0 { 0.5 * t * t } else { 0.5 + 2.0 * (t - 1.0) - 0.5 * (t * t - 1.0) };
        for (v, t) in vals.iter().zip(grid) {
            assert!((v - exact(t)).abs() < 1e-12, "{vals:?}");
        }
        assert!(stats.rejected <= 1);
    }

    #[test]
    fn rejects_bad_grid() {
        let sys = Oscillator { w: 1.0, decay: 0.0 };
        let r = integrate_grid(&sys, &[C64::new(1.0, 0.0)], &[0.0, 0.0], Tolerances::default(), |_, _, _| Ok(()));
        assert!(matches!(r, Err(Error::InvalidGrid(_))));
    }
}
