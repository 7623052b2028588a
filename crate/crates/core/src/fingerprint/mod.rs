//! Clock-skew fingerprints: batching arrivals, accumulating offsets, fitting
//! the slope and comparing fingerprints against a learned database.

mod batch;
pub mod db;
mod estimator;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{EcuLabel, FrameId};

pub use batch::{
    accumulate, batch_avg_offset, batches_from_arrivals, AccumulatedOffsetSeries, AccumulationMode,
    OffsetBatch, SeriesPoint,
};
pub use db::{DbEntry, FingerprintDb};
pub use estimator::{EstimatorState, SkewUpdate, DEFAULT_LAMBDA};

/// What a fingerprint describes: a single identifier or a whole ECU.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FingerprintKey {
    Id(FrameId),
    Ecu(EcuLabel),
}

impl fmt::Display for FingerprintKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FingerprintKey::Id(id) => write!(f, "id:{id}"),
            FingerprintKey::Ecu(label) => write!(f, "ecu:{label}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub key: FingerprintKey,
    pub skew_us_per_s: f64,
    /// Half-width of the confidence interval, in µs/s.
    pub ci_us_per_s: f64,
    pub n_batches: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FingerprintConfig {
    pub lambda: f64,
    /// Number of standard errors in the confidence half-width.
    pub z: f64,
    pub min_batches: usize,
}

impl Default for FingerprintConfig {
    fn default() -> Self {
        FingerprintConfig {
            lambda: DEFAULT_LAMBDA,
            z: 3.0,
            min_batches: 10,
        }
    }
}

/// Fits the skew of one accumulated-offset series.
///
/// The slope is the forgetting-RLS fit. Its uncertainty treats the series as
/// what it is, a random walk: the increments are the batch averages, which
/// are only correlated with their direct neighbours because batches overlap
/// by half. Plain least-squares errors would be several times too small.
pub fn fingerprint_of(series: &AccumulatedOffsetSeries, config: &FingerprintConfig) -> Result<Fingerprint> {
    let points = &series.points;
    if points.len() < config.min_batches.max(2) {
        return Err(Error::InsufficientData(format!(
            "{} has {} batches, need {}",
            series.id,
            points.len(),
            config.min_batches.max(2)
        )));
    }
    let mut est = EstimatorState::new(config.lambda)?;
    for p in points {
        est.update(p.elapsed_us, p.accumulated_us)?;
    }
    let skew = est.skew();
    let se = slope_standard_error(points, skew, config.lambda);
    Ok(Fingerprint {
        key: FingerprintKey::Id(series.id),
        skew_us_per_s: skew,
        ci_us_per_s: config.z * se,
        n_batches: points.len(),
    })
}

const LRV_BANDWIDTH: usize = 2;

fn slope_standard_error(points: &[SeriesPoint], skew: f64, lambda: f64) -> f64 {
    // Residual increments; a contended batch carries queueing delay rather
    // than clock noise, so it and its successor are left out.
    let mut resid: Vec<Option<f64>> = Vec::with_capacity(points.len());
    let (mut t_prev, mut y_prev) = (0.0, 0.0);
    for (k, p) in points.iter().enumerate() {
        let clean = !p.contended && (k == 0 || !points[k - 1].contended);
        let r = (p.accumulated_us - y_prev) - skew * (p.elapsed_us - t_prev) * 1e-6;
        resid.push(clean.then_some(r));
        t_prev = p.elapsed_us;
        y_prev = p.accumulated_us;
    }
    let clean: Vec<f64> = resid.iter().flatten().copied().collect();
    if clean.len() < 2 {
        return 0.0;
    }
    let mean = clean.iter().sum::<f64>() / clean.len() as f64;
    let gamma0 = clean.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (clean.len() - 1) as f64;
    // Bartlett-weighted autocovariances; half-overlapping batches correlate
    // neighbouring increments, and the kernel keeps the sum nonnegative.
    let mut long_run = gamma0;
    for lag in 1..=LRV_BANDWIDTH {
        let (mut sum, mut count) = (0.0, 0usize);
        for (a, b) in resid.iter().zip(&resid[lag.min(resid.len())..]) {
            if let (Some(a), Some(b)) = (a, b) {
                sum += (a - mean) * (b - mean);
                count += 1;
            }
        }
        if count > 0 {
            let weight = 1.0 - lag as f64 / (LRV_BANDWIDTH + 1) as f64;
            long_run += 2.0 * weight * sum / count as f64;
        }
    }
    let long_run = long_run.max(0.0);

    let n = points.len();
    let weights: Vec<f64> = (0..n).map(|k| lambda.powi((n - 1 - k) as i32)).collect();
    let denom: f64 = points
        .iter()
        .zip(&weights)
        .map(|(p, w)| w * (p.elapsed_us * 1e-6).powi(2))
        .sum();
    if !(denom > 0.0) {
        return 0.0;
    }
    // Each increment j moves every later level, so it enters the slope with
    // weight sum_{k >= j} w_k t_k.
    let mut tail = 0.0;
    let mut spread = 0.0;
    for (p, w) in points.iter().zip(&weights).rev() {
        tail += w * p.elapsed_us * 1e-6;
        spread += tail * tail;
    }
    (long_run * spread).sqrt() / denom
}

/// Result of comparing a fingerprint against a database.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatchResult {
    Unique(FingerprintKey),
    Unknown,
}

/// The single entry whose interval overlaps the fingerprint's, if any.
pub fn match_fingerprint<'a>(fp: &Fingerprint, db: impl IntoIterator<Item = &'a Fingerprint>) -> MatchResult {
    let mut hits = db
        .into_iter()
        .filter(|e| (fp.skew_us_per_s - e.skew_us_per_s).abs() <= fp.ci_us_per_s + e.ci_us_per_s);
    match (hits.next(), hits.next()) {
        (Some(e), None) => MatchResult::Unique(e.key.clone()),
        _ => MatchResult::Unknown,
    }
}

/// Inverse-variance combination of per-identifier fingerprints that share a
/// clock. Zero-width intervals fall back to equal weights.
pub fn combine(label: EcuLabel, members: &[&Fingerprint]) -> Result<Fingerprint> {
    if members.is_empty() {
        return Err(Error::InsufficientData(format!("ECU {label} has no fingerprinted ids")));
    }
    let n_batches = members.iter().map(|f| f.n_batches).sum();
    let (skew, ci) = if members.iter().all(|f| f.ci_us_per_s > 0.0) {
        let w: Vec<f64> = members.iter().map(|f| f.ci_us_per_s.powi(-2)).collect();
        let total: f64 = w.iter().sum();
        let skew = members.iter().zip(&w).map(|(f, w)| w * f.skew_us_per_s).sum::<f64>() / total;
        (skew, total.sqrt().recip())
    } else {
        let n = members.len() as f64;
        let skew = members.iter().map(|f| f.skew_us_per_s).sum::<f64>() / n;
        let ci = members.iter().map(|f| f.ci_us_per_s).fold(0.0, f64::max);
        (skew, ci)
    };
    Ok(Fingerprint {
        key: FingerprintKey::Ecu(label),
        skew_us_per_s: skew,
        ci_us_per_s: ci,
        n_batches,
    })
}

/// Groups identifiers whose skew intervals chain together. Returns index
/// groups into `fps`, ordered by ascending skew.
pub fn cluster(fps: &[Fingerprint]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..fps.len()).collect();
    order.sort_by(|&a, &b| fps[a].skew_us_per_s.total_cmp(&fps[b].skew_us_per_s));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        let joins = groups.last().and_then(|g| g.last()).is_some_and(|&j| {
            (fps[i].skew_us_per_s - fps[j].skew_us_per_s).abs() <= fps[i].ci_us_per_s + fps[j].ci_us_per_s
        });
        match groups.last_mut() {
            Some(g) if joins => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}
