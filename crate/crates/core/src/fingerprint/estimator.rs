use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Recursive least squares for `acc ≈ S * t` with exponential forgetting.
///
/// Time is fed in microseconds but regressed in seconds so the slope comes
/// out directly in µs/s (ppm). With a through-origin model the full RLS
/// recursion collapses to two discounted sums, which is what is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    lambda: f64,
    s_tt: f64,
    s_ty: f64,
    last_time_us: f64,
    last_error_us: f64,
    updates: u64,
}

/// Output of one estimator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkewUpdate {
    /// Slope before the new point was absorbed, in µs/s.
    pub skew_us_per_s: f64,
    /// `acc - skew * t` for the new point, in µs.
    pub error_us: f64,
}

pub const DEFAULT_LAMBDA: f64 = 0.9995;

impl EstimatorState {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.9 && lambda <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "forgetting factor {lambda} outside (0.9, 1]"
            )));
        }
        Ok(EstimatorState {
            lambda,
            s_tt: 0.0,
            s_ty: 0.0,
            last_time_us: 0.0,
            last_error_us: 0.0,
            updates: 0,
        })
    }

    /// Starts from a slope carried over from an earlier fit. `weight_s2` is
    /// the pseudo information in s², i.e. the discounted `sum t²` the prior
    /// is worth.
    pub fn with_prior(lambda: f64, skew_us_per_s: f64, weight_s2: f64) -> Result<Self> {
        let mut state = Self::new(lambda)?;
        if !skew_us_per_s.is_finite() || !(weight_s2 >= 0.0) || !weight_s2.is_finite() {
            return Err(Error::InvalidInput("prior must be finite and nonnegative".into()));
        }
        state.s_tt = weight_s2;
        state.s_ty = weight_s2 * skew_us_per_s;
        Ok(state)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Current slope in µs/s, zero before any information arrived.
    pub fn skew(&self) -> f64 {
        if self.s_tt > 0.0 {
            self.s_ty / self.s_tt
        } else {
            0.0
        }
    }

    /// Discounted `sum t²` in s².
    pub fn information(&self) -> f64 {
        self.s_tt
    }

    pub fn last_time_us(&self) -> f64 {
        self.last_time_us
    }

    pub fn last_error_us(&self) -> f64 {
        self.last_error_us
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Absorbs one `(elapsed_us, accumulated_us)` point.
    pub fn update(&mut self, elapsed_us: f64, accumulated_us: f64) -> Result<SkewUpdate> {
        if !elapsed_us.is_finite() || !accumulated_us.is_finite() {
            return Err(Error::InvalidInput("non-finite series point".into()));
        }
        if !(elapsed_us > self.last_time_us) {
            return Err(Error::InvalidInput(format!(
                "time {elapsed_us} us does not follow {} us",
                self.last_time_us
            )));
        }
        let skew = self.skew();
        let t = elapsed_us * 1e-6;
        let error_us = accumulated_us - skew * t;
        self.s_tt = self.lambda * self.s_tt + t * t;
        self.s_ty = self.lambda * self.s_ty + t * accumulated_us;
        self.last_time_us = elapsed_us;
        self.last_error_us = error_us;
        self.updates += 1;
        Ok(SkewUpdate {
            skew_us_per_s: skew,
            error_us,
        })
    }
}
