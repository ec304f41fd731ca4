//! Tukey-shaped probe pulses.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TAPER_TIME: f64 = 0.2;

/// Flat-top probe pulse with raised-cosine ramps of fixed length at both
/// ends. The pulse is supported on `[end_time - duration, end_time]`.
///
/// A pulse of zero duration is allowed and is zero everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseShape {
    pub duration: f64,
    #[serde(default = "default_taper")]
    pub taper_time: f64,
    pub peak_rate: f64,
    #[serde(default)]
    pub end_time: f64,
}

fn default_taper() -> f64 {
    DEFAULT_TAPER_TIME
}

impl PulseShape {
    pub fn new(duration: f64, taper_time: f64, peak_rate: f64, end_time: f64) -> Result<Self> {
        let shape = PulseShape {
            duration,
            taper_time,
            peak_rate,
            end_time,
        };
        shape.validate()?;
        Ok(shape)
    }

    /// Like [`PulseShape::new`], but shortens the ramps to `duration / 2`
    /// when the pulse is too short to hold two full ramps.
    pub fn with_clamped_taper(
        duration: f64,
        taper_time: f64,
        peak_rate: f64,
        end_time: f64,
    ) -> Result<Self> {
        let taper = if duration > 0.0 {
            taper_time.min(duration / 2.0)
        } else {
            taper_time
        };
        Self::new(duration, taper, peak_rate, end_time)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration.is_finite()
            && self.taper_time.is_finite()
            && self.peak_rate.is_finite()
            && self.end_time.is_finite())
        {
            return Err(Error::invalid("pulse parameters must be finite"));
        }
        if self.peak_rate < 0.0 {
            return Err(Error::invalid("peak_rate must be non-negative"));
        }
        if self.duration < 0.0 {
            return Err(Error::invalid("duration must be non-negative"));
        }
        if self.duration > 0.0 && !(self.taper_time > 0.0 && 2.0 * self.taper_time <= self.duration)
        {
            return Err(Error::invalid(format!(
                "taper_time {} incompatible with duration {} (need 0 < 2·taper <= duration)",
                self.taper_time, self.duration
            )));
        }
        Ok(())
    }

    pub fn start_time(&self) -> f64 {
        self.end_time - self.duration
    }

    pub fn is_empty(&self) -> bool {
        self.duration == 0.0 || self.peak_rate == 0.0
    }

    /// Probe photon rate R_p(t).
    pub fn rate(&self, t: f64) -> f64 {
        let a = self.envelope(t);
        self.peak_rate * a * a
    }

    /// Field amplitude √R_p(t).
    pub fn amplitude(&self, t: f64) -> f64 {
        self.peak_rate.sqrt() * self.envelope(t)
    }

    /// Square root of the normalized window, in [0, 1].
    fn envelope(&self, t: f64) -> f64 {
        if self.duration == 0.0 {
            return 0.0;
        }
        let start = self.start_time();
        if !(t > start && t < self.end_time) {
            return 0.0;
        }
        let rise = t - start;
        let fall = self.end_time - t;
        let ramp = rise.min(fall);
        if ramp < self.taper_time {
            (FRAC_PI_2 * ramp / self.taper_time).sin()
        } else {
            1.0
        }
    }

    /// ∫ R_p dt = peak_rate · (duration − taper_time).
    pub fn photon_number(&self) -> f64 {
        if self.duration == 0.0 {
            return 0.0;
        }
        self.peak_rate * (self.duration - self.taper_time)
    }

    /// ∫ √R_p dt, the pulse area per unit of 2√κ.
    pub fn amplitude_integral(&self) -> f64 {
        if self.duration == 0.0 {
            return 0.0;
        }
        self.peak_rate.sqrt() * (self.duration - 2.0 * self.taper_time + 4.0 * self.taper_time / PI)
    }

    /// Pulse whose G–W rotation angle ∫ 4√(κ R_p(t)) dt equals `area` for
/// the given κ (the drive matrix element is 2√(κ R_p)).
    pub fn with_area(
        area: f64,
        kappa: f64,
        taper_time: f64,
        peak_rate: f64,
        end_time: f64,
    ) -> Result<Self> {
        if kappa <= 0.0 || peak_rate <= 0.0 {
            return Err(Error::invalid("pulse area needs positive kappa and peak_rate"));
        }
        let flat = area / (4.0 * (kappa * peak_rate).sqrt());
        let duration = flat + 2.0 * taper_time - 4.0 * taper_time / PI;
        Self::new(duration, taper_time, peak_rate, end_time)
    }

    /// Times at which R_p(t) is not smooth.
    pub fn breakpoints(&self) -> Vec<f64> {
        if self.duration == 0.0 {
            return Vec::new();
        }
        let s = self.start_time();
        let mut pts = vec![s, s + self.taper_time, self.end_time - self.taper_time, self.end_time];
        pts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        pts
    }

    /// Last time at which R_p(t) is at least `fraction · peak_rate`.
    pub fn switch_off_time(&self, fraction: f64) -> f64 {
        if self.duration == 0.0 {
            return self.end_time;
        }
        let f = fraction.clamp(0.0, 1.0);
        self.end_time - self.taper_time * f.sqrt().asin() / FRAC_PI_2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn shape() -> PulseShape {
        PulseShape::new(2.0, 0.2, 15.0, 0.0).unwrap()
    }

    #[test]
    fn flat_top_and_edges() {
        let p = shape();
        assert_eq!(p.rate(-1.0), 15.0);
        assert_eq!(p.rate(0.0), 0.0);
        assert_eq!(p.rate(-2.0), 0.0);
        assert_eq!(p.rate(0.5), 0.0);
        assert_relative_eq!(p.rate(-0.1), 7.5, max_relative = 1e-14);
        assert_relative_eq!(p.rate(-1.9), 7.5, max_relative = 1e-14);
    }

    #[test]
    fn rejects_bad_taper() {
        assert!(PulseShape::new(0.3, 0.2, 1.0, 0.0).is_err());
        assert!(PulseShape::new(1.0, 0.0, 1.0, 0.0).is_err());
        assert!(PulseShape::new(1.0, 0.2, -1.0, 0.0).is_err());
        let c = PulseShape::with_clamped_taper(0.3, 0.2, 1.0, 0.0).unwrap();
        assert_eq!(c.taper_time, 0.15);
        assert_relative_eq!(c.rate(-0.15), 1.0);
    }

    #[test]
    fn empty_pulse_is_zero() {
        let p = PulseShape::new(0.0, 0.2, 15.0, 0.0).unwrap();
        assert_eq!(p.rate(0.0), 0.0);
        assert_eq!(p.photon_number(), 0.0);
        assert!(p.breakpoints().is_empty());
    }

    #[test]
    fn area_pulse() {
        let p = PulseShape::with_area(std::f64::consts::PI, 0.46, 0.2, 15.0, 0.0).unwrap();
        let area = 4.0 * 0.46f64.sqrt() * p.amplitude_integral();
        assert_relative_eq!(area, std::f64::consts::PI, max_relative = 1e-12);
        // quadrature of the amplitude
        let n = 200_000;
        let h = p.duration / n as f64;
        let q: f64 = (0..n)
            .map(|i| p.amplitude(p.start_time() + (i as f64 + 0.5) * h) * h)
            .sum();
        assert_relative_eq!(q, p.amplitude_integral(), max_relative = 1e-8);
    }

    #[test]
    fn switch_off_time_matches_rate() {
        let p = shape();
        let t = p.switch_off_time(1e-3);
        assert_relative_eq!(p.rate(t), 15e-3, max_relative = 1e-9);
        assert!(t < 0.0 && t > -0.01);
    }

    proptest! {
        #[test]
        fn integral_and_positivity(duration in 0.4f64..8.0, taper in 0.01f64..0.2, peak in 0.0f64..30.0) {
            let p = PulseShape::new(duration, taper, peak, 1.5).unwrap();
            // composite Simpson on each smooth segment
            let mut edges = vec![p.start_time() - 0.3];
            edges.extend(p.breakpoints());
            edges.push(p.end_time + 0.3);
            let mut total = 0.0;
            for w in edges.windows(2) {
                let n = 400;
                let h = (w[1] - w[0]) / n as f64;
                let mut s = p.rate(w[0]) + p.rate(w[1]);
                for i in 1..n {
                    let f = p.rate(w[0] + i as f64 * h);
                    prop_assert!(f >= 0.0);
                    s += if i % 2 == 1 { 4.0 * f } else { 2.0 * f };
                }
                total += s * h / 3.0;
            }
            let expected = p.photon_number();
            prop_assert!((total - expected).abs() <= 1e-6 * expected.max(1e-12));
        }

        #[test]
        fn continuous(t in -3.0f64..1.0) {
            let p = shape();
            let eps = 1e-9;
            prop_assert!((p.rate(t + eps) - p.rate(t)).abs() < 1e-6);
        }
    }
}
