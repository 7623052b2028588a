//! Streaming change detection over per-identifier clock-skew series and the
//! rules that turn alarms into attack classifications.

mod classify;
mod context;
mod cusum;
mod monitor;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Serialize, Serializer};

use crate::bus::frame_time;
use crate::error::{Error, Result};
use crate::fingerprint::{
    fingerprint_of, AccumulationMode, Fingerprint, FingerprintConfig, FingerprintDb, FingerprintKey,
    DEFAULT_LAMBDA,
};
use crate::frame::{EcuLabel, FrameId};
use crate::trace_io::{SeriesRow, TraceDocument};

pub use cusum::{Alarm, CusumState, CusumStep};
pub use monitor::{AlarmRecord, IdAnalysis};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Messages per batch; batches overlap by half, so this must be even.
    pub batch_size: usize,
    pub accumulation: AccumulationMode,
    pub lambda: f64,
    pub kappa: f64,
    pub gamma: f64,
    /// Batches needed for a fingerprint, and the post-alarm hold-off.
    pub min_batches: usize,
    /// Standard errors in a confidence half-width.
    pub z: f64,
    /// Innovations used to learn the noise scale before CUSUM may alarm.
    pub cusum_warmup: usize,
    /// Batches after an alarm that must confirm a persistent slope change.
    pub confirm_batches: usize,
    /// Extra gap, in frame times, under which a frame counts as queued.
    pub contention_guard: f64,
    pub period_quantum_us: f64,
    pub period_warmup_intervals: usize,
    pub load_bin_us: u64,
    /// Used when the trace carries no bus metadata.
    pub default_bitrate_bps: u32,
    pub default_frame_bits: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            batch_size: 20,
            accumulation: AccumulationMode::Signed,
            lambda: DEFAULT_LAMBDA,
            kappa: 4.0,
            gamma: 5.0,
            min_batches: 10,
            z: 3.0,
            cusum_warmup: 8,
            confirm_batches: 2,
            contention_guard: 0.25,
            period_quantum_us: 1000.0,
            period_warmup_intervals: 200,
            load_bin_us: 250_000,
            default_bitrate_bps: 500_000,
            default_frame_bits: 131.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "batch size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        CusumState::new(self.kappa, self.gamma)?;
        crate::fingerprint::EstimatorState::new(self.lambda)?;
        if self.min_batches < 2 || self.load_bin_us == 0 || !(self.z > 0.0) {
            return Err(Error::InvalidInput("min_batches >= 2, load_bin_us > 0 and z > 0 required".into()));
        }
        Ok(())
    }

    pub fn fingerprint_config(&self) -> FingerprintConfig {
        FingerprintConfig {
            lambda: self.lambda,
            z: self.z,
            min_batches: self.min_batches,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum EventKind {
    SlopeChange,
    RateAnomaly,
    UnknownId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum AttackClass {
    Dos,
    Fuzzy,
    Impersonation,
    Unknown,
}

impl fmt::Display for AttackClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AttackClass::Dos => "DoS",
            AttackClass::Fuzzy => "fuzzy",
            AttackClass::Impersonation => "impersonation",
            AttackClass::Unknown => "unknown",
        };
        f.write_str(s)
    }
}

fn hex_id<S: Serializer>(id: &FrameId, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(id)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Evidence {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_index: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub onset_batch: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub onset_us: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pre_skew_us_per_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub post_skew_us_per_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bus_load: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub victim: Option<EcuLabel>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionEvent {
    pub time_us: u64,
    #[serde(serialize_with = "hex_id")]
    pub id: FrameId,
    pub kind: EventKind,
    pub class: AttackClass,
    /// `None` means unknown: no unique database entry matched.
    pub source: Option<EcuLabel>,
    pub evidence: Evidence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub frame_time_us: f64,
    pub ids: Vec<IdAnalysis>,
    /// Per-identifier fingerprints over the stretch before any alarm.
    pub fingerprints: Vec<Fingerprint>,
    pub events: Vec<DetectionEvent>,
    pub warnings: Vec<String>,
}

impl Analysis {
    pub fn id(&self, id: FrameId) -> Option<&IdAnalysis> {
        self.ids.iter().find(|a| a.id == id)
    }

    pub fn series_rows(&self) -> Vec<SeriesRow> {
        self.ids
            .iter()
            .flat_map(|a| {
                a.series.points.iter().enumerate().map(move |(k, p)| SeriesRow {
                    id: a.id,
                    batch_index: p.batch_index,
                    elapsed_time_us: p.elapsed_us,
                    accumulated_offset_us: p.accumulated_us,
                    skew_estimate: a.skew_estimate[k],
                    identification_error: a.identification_error[k],
                })
            })
            .collect()
    }
}

/// Runs the whole detection pipeline over a trace.
///
/// Periods come from the database when it has them and are learned from
/// the opening stretch of the trace otherwise. Without a database every
/// periodic identifier is monitored and the rest count as unknown.
pub fn analyze(trace: &TraceDocument, config: &DetectorConfig, db: Option<&FingerprintDb>) -> Result<Analysis> {
    config.validate()?;
    if trace.entries.is_empty() {
        return Err(Error::InvalidInput("trace has no frames".into()));
    }
    let bits = trace.metadata.frame_bits.unwrap_or(config.default_frame_bits);
    let bitrate = trace.metadata.bitrate_bps.unwrap_or(config.default_bitrate_bps);
    let ft = frame_time(bits, bitrate as f64)?;
    let entries = &trace.entries;
    let contended = context::contention(entries, ft, config.contention_guard);
    let streams = context::streams(entries, &contended);

    let mut warnings = Vec::new();
    let mut periods: BTreeMap<FrameId, f64> = BTreeMap::new();
    match db {
        Some(db) => {
            for id in db.ids() {
                let Some(stream) = streams.get(&id) else {
                    warnings.push(format!("{id} is in the database but absent from the trace"));
                    continue;
                };
                let period = db
                    .id_entry(id)
                    .and_then(|e| e.period_us)
                    .or_else(|| context::learn_period(&stream.arrivals, config, ft));
                match period {
                    Some(p) => {
                        periods.insert(id, p);
                    }
                    None => warnings.push(format!("no period known for {id}")),
                }
            }
        }
        None => {
            for (id, stream) in &streams {
                if let Some(p) = context::learn_period(&stream.arrivals, config, ft) {
                    periods.insert(*id, p);
                }
            }
        }
    }
    if periods.is_empty() {
        warnings.push("no periodic identifiers to analyze".into());
        return Ok(Analysis {
            frame_time_us: ft,
            ids: Vec::new(),
            fingerprints: Vec::new(),
            events: Vec::new(),
            warnings,
        });
    }

    let monitored: BTreeSet<FrameId> = periods.keys().copied().collect();
    let max_period = periods.values().copied().fold(0.0, f64::max);
    let drain_us = (config.batch_size as f64 * max_period) as u64;
    let profile = context::load_profile(entries, ft, config.load_bin_us);
    let episodes = context::episodes(entries, &contended, &profile, &monitored, ft, drain_us);
    let rate_runs: BTreeMap<FrameId, Vec<context::RateRun>> = periods
        .iter()
        .map(|(&id, &period)| {
            let s = &streams[&id];
            (id, context::rate_runs(&s.arrivals, period, config.batch_size))
        })
        .collect();

    let mut ids = Vec::with_capacity(periods.len());
    let mut fingerprints = Vec::new();
    let fp_config = config.fingerprint_config();
    for (&id, &period) in &periods {
        let s = &streams[&id];
        // While an identifier arrives too often its batches measure the
        // interleaving, not a clock; keep them away from the slope fit.
        let window = (config.batch_size as f64 * period) as u64;
        let runs = &rate_runs[&id];
        let masked: Vec<bool> = s
            .arrivals
            .iter()
            .zip(&s.contended)
            .map(|(&t, &c)| c || runs.iter().any(|r| t + window >= r.start_us && t <= r.end_us))
            .collect();
        let a = monitor::monitor(id, &s.arrivals, &masked, period, config)?;

        let disrupted = runs.first().map(|r| r.start_us.saturating_sub(window));
        let mut clean_end = a.alarms.first().map_or(a.len(), |al| al.onset);
        if let Some(t) = disrupted {
            clean_end = clean_end.min((0..a.len()).find(|&k| a.batch_end_us(k) >= t).unwrap_or(a.len()));
        }
        match fingerprint_of(&a.rebased(0..clean_end), &fp_config) {
            Ok(fp) => fingerprints.push(fp),
            Err(Error::InsufficientData(msg)) => warnings.push(format!("insufficient data: {msg}")),
            Err(e) => return Err(e),
        }
        if a.habitual_contention {
            warnings.push(format!("{} is routinely queued behind other traffic", a.id));
        }
        ids.push(a);
    }

    let unknown: BTreeMap<FrameId, &context::Stream> = streams
        .iter()
        .filter(|(id, _)| !monitored.contains(id))
        .map(|(id, s)| (*id, s))
        .collect();

    let events = classify::classify(&classify::Inputs {
        config,
        db,
        ids: &ids,
        episodes: &episodes,
        rate_runs: &rate_runs,
        unknown: &unknown,
        frame_time_us: ft,
        check_unknown: db.is_some(),
    })?;

    Ok(Analysis {
        frame_time_us: ft,
        ids,
        fingerprints,
        events,
        warnings,
    })
}

/// One JSON object per line.
pub fn events_jsonl(events: &[DetectionEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    out
}

/// Builds a fingerprint database from an attack-free analysis.
///
/// `owners` maps identifiers to ECU labels (e.g. from the scenario). Without
/// it, identifiers whose skew intervals chain together are grouped into
/// `ECU1`, `ECU2`, ... in ascending skew order.
pub fn build_db(
    analysis: &Analysis,
    owners: Option<&BTreeMap<FrameId, EcuLabel>>,
    trace_hash: Option<String>,
) -> Result<FingerprintDb> {
    use crate::fingerprint::{cluster, combine, DbEntry};

    let fps = &analysis.fingerprints;
    let period_of = |id: FrameId| analysis.id(id).map(|a| a.period_us);
    let mut entries: Vec<DbEntry> = fps
        .iter()
        .map(|fp| DbEntry {
            fingerprint: fp.clone(),
            period_us: match fp.key {
                FingerprintKey::Id(id) => period_of(id),
                _ => None,
            },
            members: Vec::new(),
            trace: trace_hash.clone(),
        })
        .collect();
    let id_of = |fp: &Fingerprint| match fp.key {
        FingerprintKey::Id(id) => id,
        _ => unreachable!("analysis fingerprints are per identifier"),
    };

    let groups: Vec<(EcuLabel, Vec<usize>)> = match owners {
        Some(owners) => {
            let mut by_label: BTreeMap<&EcuLabel, Vec<usize>> = BTreeMap::new();
            for (i, fp) in fps.iter().enumerate() {
                if let Some(label) = owners.get(&id_of(fp)) {
                    by_label.entry(label).or_default().push(i);
                }
            }
            by_label.into_iter().map(|(l, v)| (l.clone(), v)).collect()
        }
        None => cluster(fps)
            .into_iter()
            .enumerate()
            .map(|(n, g)| Ok((EcuLabel::new(format!("ECU{}", n + 1))?, g)))
            .collect::<Result<_>>()?,
    };
    for (label, members) in groups {
        let refs: Vec<&Fingerprint> = members.iter().map(|&i| &fps[i]).collect();
        let mut ids: Vec<FrameId> = refs.iter().map(|f| id_of(f)).collect();
        ids.sort();
        entries.push(DbEntry {
            fingerprint: combine(label, &refs)?,
            period_us: None,
            members: ids,
            trace: trace_hash.clone(),
        });
    }
    Ok(FingerprintDb { entries })
}
