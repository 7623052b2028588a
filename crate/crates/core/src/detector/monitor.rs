//! Per-identifier pipeline: batches, accumulated offsets, the RLS slope and
//! CUSUM over slope innovations.

use crate::error::Result;
use crate::fingerprint::{
    accumulate, batches_from_arrivals, AccumulatedOffsetSeries, EstimatorState, SeriesPoint,
};
use crate::frame::FrameId;

use super::cusum::CusumState;
use super::DetectorConfig;

/// Lower bound on the innovation standard deviation, µs. Keeps
/// quantization-only traces from producing infinite z-scores.
const SD_FLOOR_US: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct AlarmRecord {
    /// Batch at which the CUSUM crossed its threshold.
    pub batch: usize,
    /// First batch attributed to the change.
    pub onset: usize,
    pub upward: bool,
    /// Slope in force before the change, µs/s.
    pub pre_skew: f64,
    /// Innovation scale when the alarm fired, µs.
    pub sd: f64,
}

/// Everything the detector learned about one identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct IdAnalysis {
    pub id: FrameId,
    pub period_us: f64,
    /// Absolute arrival time the series' elapsed time is measured from.
    pub origin_us: u64,
    pub series: AccumulatedOffsetSeries,
    /// Slope before each point was absorbed, µs/s.
    pub skew_estimate: Vec<f64>,
    /// Level residual against that slope, µs.
    pub identification_error: Vec<f64>,
    /// Slope innovation per batch, µs.
    pub innovation: Vec<f64>,
    /// Innovation standardized against the learned noise, once trained.
    pub innovation_z: Vec<Option<f64>>,
    /// Whether the batch is treated as disturbed by queueing.
    pub tainted: Vec<bool>,
    pub alarms: Vec<AlarmRecord>,
    /// Queueing is the norm for this identifier, so it is not masked.
    pub habitual_contention: bool,
}

impl IdAnalysis {
    pub fn batch_end_us(&self, k: usize) -> u64 {
        self.origin_us + self.series.points[k].elapsed_us.round() as u64
    }

    /// Time of the last point before batch `k`, or the origin.
    pub fn before_batch_us(&self, k: usize) -> u64 {
        if k == 0 {
            self.origin_us
        } else {
            self.batch_end_us(k - 1)
        }
    }

    pub fn len(&self) -> usize {
        self.series.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.points.is_empty()
    }

    /// Points in `range` re-expressed relative to the point just before it.
    pub fn rebased(&self, range: std::ops::Range<usize>) -> AccumulatedOffsetSeries {
        let (t0, y0) = match range.start {
            0 => (0.0, 0.0),
            s => {
                let p = &self.series.points[s - 1];
                (p.elapsed_us, p.accumulated_us)
            }
        };
        AccumulatedOffsetSeries {
            id: self.id,
            points: self.series.points[range]
                .iter()
                .map(|p| SeriesPoint {
                    elapsed_us: p.elapsed_us - t0,
                    accumulated_us: p.accumulated_us - y0,
                    ..p.clone()
                })
                .collect(),
        }
    }
}

struct Fit {
    est: EstimatorState,
    base_t: f64,
    base_y: f64,
}

impl Fit {
    fn fresh(lambda: f64, base: Option<&SeriesPoint>, prior: Option<(f64, f64)>) -> Result<Self> {
        let est = match prior {
            Some((skew, weight)) => EstimatorState::with_prior(lambda, skew, weight)?,
            None => EstimatorState::new(lambda)?,
        };
        let (base_t, base_y) = base.map_or((0.0, 0.0), |p| (p.elapsed_us, p.accumulated_us));
        Ok(Fit { est, base_t, base_y })
    }

    fn residual(&self, p: &SeriesPoint) -> (f64, f64) {
        let skew = self.est.skew();
        let t = p.elapsed_us - self.base_t;
        (skew, (p.accumulated_us - self.base_y) - skew * t * 1e-6)
    }

    fn absorb(&mut self, p: &SeriesPoint) -> Result<(f64, f64)> {
        let u = self
            .est
            .update(p.elapsed_us - self.base_t, p.accumulated_us - self.base_y)?;
        Ok((u.skew_us_per_s, u.error_us))
    }
}

pub(crate) fn monitor(
    id: FrameId,
    arrivals: &[u64],
    contended: &[bool],
    period_us: f64,
    config: &DetectorConfig,
) -> Result<IdAnalysis> {
    let n_size = config.batch_size;
    let hop = n_size / 2;
    let batches = batches_from_arrivals(id, arrivals, contended, period_us, n_size)?;
    let origin_us = arrivals.get(hop.saturating_sub(1)).copied().unwrap_or(0);
    let series = if batches.is_empty() {
        AccumulatedOffsetSeries { id, points: Vec::new() }
    } else {
        accumulate(&batches, config.accumulation)?
    };
    let points = &series.points;
    let n = points.len();

    let probe = n.min(2 * config.cusum_warmup.max(10));
    let habitual = probe > 0 && points[..probe].iter().filter(|p| p.contended).count() * 2 >= probe;
    let tainted: Vec<bool> = points.iter().map(|p| p.contended && !habitual).collect();

    let mut out = IdAnalysis {
        id,
        period_us,
        origin_us,
        series: series.clone(),
        skew_estimate: Vec::with_capacity(n),
        identification_error: Vec::with_capacity(n),
        innovation: Vec::with_capacity(n),
        innovation_z: Vec::with_capacity(n),
        tainted: tainted.clone(),
        alarms: Vec::new(),
        habitual_contention: habitual,
    };

    let mut fit = Fit::fresh(config.lambda, None, None)?;
    let mut cusum = CusumState::new(config.kappa, config.gamma)?
        .with_normalization(config.cusum_warmup as u64, SD_FLOOR_US);
    // Batch index behind each CUSUM step, to map run lengths back to onsets.
    let mut fed: Vec<usize> = Vec::new();
    let mut hold_until = 0usize;
    let mut rebase_pending = false;
    let mut primed = false;

    for k in 0..n {
        let p = &points[k];
        let (t_prev, y_prev) = if k == 0 {
            (0.0, 0.0)
        } else {
            (points[k - 1].elapsed_us, points[k - 1].accumulated_us)
        };
        if tainted[k] {
            let (skew, err) = fit.residual(p);
            let nu = (p.accumulated_us - y_prev) - skew * (p.elapsed_us - t_prev) * 1e-6;
            out.skew_estimate.push(skew);
            out.identification_error.push(err);
            out.innovation.push(nu);
            out.innovation_z.push(cusum.standardize(nu));
            rebase_pending = true;
            continue;
        }
        if rebase_pending {
            // The queueing delay shifted the level; keep the slope and its
            // information but measure the level from the last point.
            let prior = (fit.est.skew(), fit.est.information());
            fit = Fit::fresh(config.lambda, Some(&points[k - 1]), Some(prior))?;
            rebase_pending = false;
        }
        let (skew, err) = fit.absorb(p)?;
        let nu = (p.accumulated_us - y_prev) - skew * (p.elapsed_us - t_prev) * 1e-6;
        out.skew_estimate.push(skew);
        out.identification_error.push(err);
        out.innovation.push(nu);

        // The first point only fixes the initial slope; its innovation says
        // nothing about noise.
        let first = !primed;
        primed = true;
        if first || k < hold_until {
            out.innovation_z.push(cusum.standardize(nu));
            continue;
        }
        let sd = cusum.sd();
        let step = cusum.update(nu);
        out.innovation_z.push(step.normalized);
        fed.push(k);
        let Some(alarm) = step.alarm else { continue };

        let run = (alarm.run_length as usize).clamp(1, fed.len());
        let onset = fed[fed.len() - run];
        let pre_skew = out.skew_estimate[onset];
        out.alarms.push(AlarmRecord {
            batch: k,
            onset,
            upward: alarm.upward,
            pre_skew,
            sd,
        });
        hold_until = k + 1 + config.min_batches;
        fed.clear();

        // Fresh fit from the change point, seeded weakly with the old slope.
        let base = onset.checked_sub(1).map(|i| &points[i]);
        let hop_s = (p.elapsed_us - t_prev) * 1e-6;
        fit = Fit::fresh(config.lambda, base, Some((pre_skew, hop_s * hop_s)))?;
        for (j, q) in points.iter().enumerate().take(k + 1).skip(onset) {
            if !tainted[j] {
                fit.absorb(q)?;
            }
        }
    }
    Ok(out)
}
