use crate::error::{Error, Result};

/// Standardized magnitude above which a sample no longer trains the noise
/// statistics.
const LEARN_GATE: f64 = 3.0;

/// Two-sided CUSUM over normalized identification errors.
///
/// `update_normalized` is the bare recursion. `update` standardizes a raw
/// error against a running mean and variance first; the first `warmup`
/// samples only train those statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CusumState {
    l_plus: f64,
    l_minus: f64,
    kappa: f64,
    gamma: f64,
    mean: f64,
    m2: f64,
    count: u64,
    warmup: u64,
    sd_floor: f64,
    step: u64,
    plus_zero_at: u64,
    minus_zero_at: u64,
}

/// Outcome of feeding one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CusumStep {
    /// Standardized sample, if the detector was past warm-up.
    pub normalized: Option<f64>,
    pub alarm: Option<Alarm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alarm {
    /// Upper (`true`) or lower sum crossed the threshold.
    pub upward: bool,
    /// Steps since the crossing sum was last zero, i.e. how many samples
    /// ago the change most likely started (1 = this sample).
    pub run_length: u64,
}

impl CusumState {
    pub fn new(kappa: f64, gamma: f64) -> Result<Self> {
        if !(kappa >= 0.0) || !(gamma > kappa) || !gamma.is_finite() {
            return Err(Error::InvalidInput(format!(
                "CUSUM needs gamma > kappa >= 0, got kappa={kappa} gamma={gamma}"
            )));
        }
        Ok(CusumState {
            l_plus: 0.0,
            l_minus: 0.0,
            kappa,
            gamma,
            mean: 0.0,
            m2: 0.0,
            count: 0,
            warmup: 0,
            sd_floor: 0.0,
            step: 0,
            plus_zero_at: 0,
            minus_zero_at: 0,
        })
    }

    /// Enables raw-error standardization with `warmup` training samples and
    /// a lower bound on the standard deviation.
    pub fn with_normalization(mut self, warmup: u64, sd_floor: f64) -> Self {
        self.warmup = warmup;
        self.sd_floor = sd_floor.max(0.0);
        self
    }

    pub fn l_plus(&self) -> f64 {
        self.l_plus
    }

    pub fn l_minus(&self) -> f64 {
        self.l_minus
    }

    pub fn trained(&self) -> bool {
        self.count >= self.warmup.max(2)
    }

    pub fn sd(&self) -> f64 {
        let var = if self.count > 1 {
            self.m2 / (self.count - 1) as f64
        } else {
            0.0
        };
        var.sqrt().max(self.sd_floor)
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Standardizes without touching any state.
    pub fn standardize(&self, e: f64) -> Option<f64> {
        if !self.trained() {
            return None;
        }
        let sd = self.sd();
        if sd > 0.0 {
            Some((e - self.mean) / sd)
        } else {
            Some(0.0)
        }
    }

    fn learn(&mut self, e: f64) {
        self.count += 1;
        let d = e - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (e - self.mean);
    }

    /// Feeds one raw error. Only samples within `LEARN_GATE` standard
    /// deviations update the running statistics, so a sustained shift
    /// cannot fold itself into the baseline.
    pub fn update(&mut self, e: f64) -> CusumStep {
        let Some(z) = self.standardize(e) else {
            self.learn(e);
            return CusumStep {
                normalized: None,
                alarm: None,
            };
        };
        let alarm = self.update_normalized(z);
        if z.abs() < LEARN_GATE.min(self.kappa) && alarm.is_none() {
            self.learn(e);
        }
        CusumStep {
            normalized: Some(z),
            alarm,
        }
    }

    /// `L+ = max(0, L+ + e - k)`, `L- = max(0, L- - e - k)`; alarms when
    /// either exceeds the threshold and then restarts both sums.
    pub fn update_normalized(&mut self, e: f64) -> Option<Alarm> {
        self.step += 1;
        self.l_plus = (self.l_plus + e - self.kappa).max(0.0);
        self.l_minus = (self.l_minus - e - self.kappa).max(0.0);
        if self.l_plus == 0.0 {
            self.plus_zero_at = self.step;
        }
        if self.l_minus == 0.0 {
            self.minus_zero_at = self.step;
        }
        let alarm = if self.l_plus > self.gamma {
            Some(Alarm {
                upward: true,
                run_length: self.step - self.plus_zero_at,
            })
        } else if self.l_minus > self.gamma {
            Some(Alarm {
                upward: false,
                run_length: self.step - self.minus_zero_at,
            })
        } else {
            None
        };
        if alarm.is_some() {
            self.reset();
        }
        alarm
    }

    /// Clears both sums, keeping the learned statistics.
    pub fn reset(&mut self) {
        self.l_plus = 0.0;
        self.l_minus = 0.0;
        self.plus_zero_at = self.step;
        self.minus_zero_at = self.step;
    }
}
