use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::FrameId;

/// Average gap between measured arrivals and an ideal periodic grid anchored
/// at the batch's first arrival:
/// `(1/(N-1)) * sum_{i=1..N-1} [a_i - (a_0 + i*T)]`.
pub fn batch_avg_offset(arrivals_us: &[f64], period_us: f64) -> Result<f64> {
    if arrivals_us.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "a batch needs at least 2 arrivals, got {}",
            arrivals_us.len()
        )));
    }
    if !(period_us > 0.0) {
        return Err(Error::InvalidInput(format!("period {period_us} must be > 0")));
    }
    if arrivals_us.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput(
            "arrivals must be strictly increasing".into(),
        ));
    }
    let anchor = arrivals_us[0];
    let sum: f64 = arrivals_us
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, &a)| (a - anchor) - i as f64 * period_us)
        .sum();
    Ok(sum / (arrivals_us.len() - 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetBatch {
    pub id: FrameId,
    pub batch_index: u64,
    pub avg_offset_us: f64,
    /// Arrival of the batch's last message, relative to the series origin.
    pub end_time_us: f64,
    pub n: usize,
    /// At least one message of the batch was queued behind another frame.
    pub contended: bool,
}

/// How batch averages are summed into the accumulated offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AccumulationMode {
    /// Plain running sum; the slope keeps the sign of the skew.
    #[default]
    Signed,
    /// Running sum of magnitudes; nondecreasing.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub batch_index: u64,
    pub elapsed_us: f64,
    pub accumulated_us: f64,
    pub contended: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulatedOffsetSeries {
    pub id: FrameId,
    pub points: Vec<SeriesPoint>,
}

/// Running sum of batch averages, one point per batch.
pub fn accumulate(batches: &[OffsetBatch], mode: AccumulationMode) -> Result<AccumulatedOffsetSeries> {
    let Some(first) = batches.first() else {
        return Err(Error::InvalidInput("no batches to accumulate".into()));
    };
    let id = first.id;
    if let Some(other) = batches.iter().find(|b| b.id != id) {
        return Err(Error::InvalidInput(format!(
            "mixed ids in one series: {} and {}",
            id, other.id
        )));
    }
    if batches
        .windows(2)
        .any(|w| w[1].batch_index <= w[0].batch_index || !(w[1].end_time_us > w[0].end_time_us))
    {
        return Err(Error::InvalidInput(
            "batches must be ordered by index and end time".into(),
        ));
    }
    let mut total = 0.0;
    let points = batches
        .iter()
        .map(|b| {
            total += match mode {
                AccumulationMode::Signed => b.avg_offset_us,
                AccumulationMode::Absolute => b.avg_offset_us.abs(),
            };
            SeriesPoint {
                batch_index: b.batch_index,
                elapsed_us: b.end_time_us,
                accumulated_us: total,
                contended: b.contended,
            }
        })
        .collect();
    Ok(AccumulatedOffsetSeries { id, points })
}

/// Half-overlapping batches over one identifier's arrival stream.
///
/// Batch `k` covers messages `[kH, kH + N - 1]` with hop `H = N/2`. The
/// series origin is the arrival of message `H - 1`, which makes consecutive
/// batch end times one hop apart while each batch average grows by one hop
/// of drift, so the accumulated slope equals the clock skew.
pub fn batches_from_arrivals(
    id: FrameId,
    arrivals_us: &[u64],
    contended: &[bool],
    period_us: f64,
    batch_size: usize,
) -> Result<Vec<OffsetBatch>> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "batch size must be even and >= 2, got {batch_size}"
        )));
    }
    if contended.len() != arrivals_us.len() {
        return Err(Error::InvalidInput("contention flags misaligned".into()));
    }
    let hop = batch_size / 2;
    if arrivals_us.len() < batch_size {
        return Ok(Vec::new());
    }
    let origin = arrivals_us[hop - 1] as f64;
    let mut buf = Vec::with_capacity(batch_size);
    let mut out = Vec::new();
    let mut k = 0usize;
    while k * hop + batch_size <= arrivals_us.len() {
        let range = k * hop..k * hop + batch_size;
        buf.clear();
        buf.extend(arrivals_us[range.clone()].iter().map(|&a| a as f64));
        out.push(OffsetBatch {
            id,
            batch_index: k as u64,
            avg_offset_us: batch_avg_offset(&buf, period_us)?,
            end_time_us: buf[batch_size - 1] - origin,
            n: batch_size,
            contended: contended[range].iter().any(|&c| c),
        });
        k += 1;
    }
    Ok(out)
}
