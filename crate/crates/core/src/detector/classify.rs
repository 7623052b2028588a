//! Turns alarms, rate anomalies and flood episodes into classified events.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::fingerprint::{fingerprint_of, match_fingerprint, Fingerprint, FingerprintDb, FingerprintKey, MatchResult};
use crate::frame::{EcuLabel, FrameId};

use super::context::{Episode, RateRun, Stream};
use super::monitor::{AlarmRecord, IdAnalysis};
use super::{AttackClass, DetectionEvent, DetectorConfig, EventKind, Evidence};

pub(super) struct Inputs<'a> {
    pub config: &'a DetectorConfig,
    pub db: Option<&'a FingerprintDb>,
    pub ids: &'a [IdAnalysis],
    pub episodes: &'a [Episode],
    pub rate_runs: &'a BTreeMap<FrameId, Vec<RateRun>>,
    pub unknown: &'a BTreeMap<FrameId, &'a Stream>,
    pub frame_time_us: f64,
    pub check_unknown: bool,
}

impl Inputs<'_> {
    fn episode_at(&self, t: u64) -> Option<&Episode> {
        let lead = self.config.load_bin_us;
        self.episodes
            .iter()
            .find(|e| t + lead >= e.start_us && t <= e.window_end_us)
    }

    fn fingerprint(&self, a: &IdAnalysis, range: std::ops::Range<usize>) -> Result<Option<Fingerprint>> {
        if range.is_empty() {
            return Ok(None);
        }
        match fingerprint_of(&a.rebased(range), &self.config.fingerprint_config()) {
            Ok(fp) => Ok(Some(fp)),
            Err(Error::InsufficientData(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Unique ECU entry matching `fp`. Never guesses.
    fn source_of(&self, fp: Option<&Fingerprint>) -> Option<EcuLabel> {
        let (db, fp) = (self.db?, fp?);
        let ecus: Vec<&Fingerprint> = db.ecu_entries().map(|e| &e.fingerprint).collect();
        match match_fingerprint(fp, ecus) {
            MatchResult::Unique(FingerprintKey::Ecu(label)) => Some(label),
            _ => None,
        }
    }

    fn disturbed(&self, a: &IdAnalysis, k: usize) -> bool {
        if !a.tainted[k] {
            return false;
        }
        match a.innovation_z[k] {
            Some(z) => z.abs() > self.config.kappa,
            None => a.innovation[k].abs() > self.frame_time_us,
        }
    }
}

pub(super) fn classify(inp: &Inputs<'_>) -> Result<Vec<DetectionEvent>> {
    let mut events = Vec::new();
    dos_events(inp, &mut events);
    if inp.check_unknown {
        unknown_id_events(inp, &mut events);
    }
    for a in inp.ids {
        per_id_events(inp, a, &mut events)?;
    }
    events.sort_by(|x, y| (x.time_us, x.id, x.kind).cmp(&(y.time_us, y.id, y.kind)));
    Ok(events)
}

fn dos_events(inp: &Inputs<'_>, events: &mut Vec<DetectionEvent>) {
    let lead = inp.config.load_bin_us;
    for ep in inp.episodes {
        for id in &ep.flood_ids {
            let Some(stream) = inp.unknown.get(id) else { continue };
            let Some(&first) = stream
                .arrivals
                .iter()
                .find(|&&t| t + lead >= ep.start_us && t <= ep.end_us)
            else {
                continue;
            };
            events.push(DetectionEvent {
                time_us: first,
                id: *id,
                kind: EventKind::UnknownId,
                class: AttackClass::Dos,
                // A bus-paced flood carries no clock signature to match.
                source: None,
                evidence: Evidence {
                    bus_load: Some(ep.peak_load),
                    note: format!("unscheduled {id} flooding the bus"),
                    ..Default::default()
                },
            });
        }
        for a in inp.ids {
            let hit = (0..a.len()).find(|&k| {
                let t = a.batch_end_us(k);
                t >= ep.start_us
                    && t <= ep.window_end_us
                    && (inp.disturbed(a, k) || a.alarms.iter().any(|al| al.batch == k))
            });
            if let Some(k) = hit {
                events.push(DetectionEvent {
                    time_us: a.batch_end_us(k),
                    id: a.id,
                    kind: EventKind::SlopeChange,
                    class: AttackClass::Dos,
                    source: None,
                    evidence: Evidence {
                        batch_index: Some(k as u64),
                        pre_skew_us_per_s: Some(a.skew_estimate[k]),
                        bus_load: Some(ep.peak_load),
                        note: "transient offset jump during a bus-wide disturbance".into(),
                        ..Default::default()
                    },
                });
            }
        }
    }
}

fn unknown_id_events(inp: &Inputs<'_>, events: &mut Vec<DetectionEvent>) {
    for (id, stream) in inp.unknown {
        if let Some(&t) = stream.arrivals.iter().find(|&&t| inp.episode_at(t).is_none()) {
            events.push(DetectionEvent {
                time_us: t,
                id: *id,
                kind: EventKind::UnknownId,
                class: AttackClass::Unknown,
                source: None,
                evidence: Evidence {
                    note: format!("{id} is not in the fingerprint database"),
                    ..Default::default()
                },
            });
        }
    }
}

fn per_id_events(inp: &Inputs<'_>, a: &IdAnalysis, events: &mut Vec<DetectionEvent>) -> Result<()> {
    let window = (inp.config.batch_size as f64 * a.period_us) as u64;
    let mut used: BTreeSet<usize> = BTreeSet::new();
    let no_runs = Vec::new();
    let runs = inp.rate_runs.get(&a.id).unwrap_or(&no_runs);

    for run in runs.iter().filter(|r| inp.episode_at(r.start_us).is_none()) {
        let mut time = run.start_us;
        let mut kind = EventKind::RateAnomaly;
        for (i, al) in a.alarms.iter().enumerate() {
            let from = a.before_batch_us(al.onset);
            let to = a.batch_end_us(al.batch);
            if from <= run.end_us + window && to + window >= run.start_us {
                used.insert(i);
                if to < time {
                    time = to;
                    kind = EventKind::SlopeChange;
                }
            }
        }
        // The merged stream's slope while the spoofing lasts.
        let first = (0..a.len()).find(|&k| a.batch_end_us(k) >= run.start_us);
        let last = (0..a.len()).rev().find(|&k| a.batch_end_us(k) <= run.end_us);
        let post = match (first, last) {
            (Some(f), Some(l)) if l >= f => inp.fingerprint(a, f..l + 1)?,
            _ => None,
        };
        let pre_skew = first.map(|f| a.skew_estimate[f]);
        events.push(DetectionEvent {
            time_us: time,
            id: a.id,
            kind,
            class: AttackClass::Fuzzy,
            source: inp.source_of(post.as_ref()),
            evidence: Evidence {
                batch_index: first.map(|f| f as u64),
                pre_skew_us_per_s: pre_skew,
                post_skew_us_per_s: post.as_ref().map(|f| f.skew_us_per_s),
                rate_ratio: Some(run.peak_ratio),
                note: format!(
                    "{} arrives faster than its period allows ({} near-duplicates)",
                    a.id, run.duplicates
                ),
                ..Default::default()
            },
        });
    }

    for (i, al) in a.alarms.iter().enumerate() {
        if used.contains(&i) || inp.episode_at(a.batch_end_us(al.batch)).is_some() {
            continue;
        }
        // A same-direction alarm right after another is the refit still
        // settling onto the same change.
        let settling = i > 0 && {
            let prev = &a.alarms[i - 1];
            prev.upward == al.upward && al.onset <= prev.batch + 2 * inp.config.min_batches
        };
        if settling {
            continue;
        }
        let prev_onset = if i == 0 { 0 } else { a.alarms[i - 1].onset };
        let next_onset = a.alarms[i + 1..]
            .iter()
            .find(|n| !(n.upward == al.upward && n.onset <= al.batch + 2 * inp.config.min_batches))
            .map_or(a.len(), |n| n.onset);
        events.push(slope_event(inp, a, al, prev_onset, next_onset)?);
    }
    Ok(())
}

/// A rate-neutral slope alarm: impersonation if the new slope persists, the
/// old one was the registered owner's and the new one is not.
fn slope_event(
    inp: &Inputs<'_>,
    a: &IdAnalysis,
    al: &AlarmRecord,
    prev_onset: usize,
    next_onset: usize,
) -> Result<DetectionEvent> {
    let last = a.len() - 1;
    let confirm_end = (al.batch + inp.config.confirm_batches).min(last);
    let shifts: Vec<f64> = (al.batch + 1..=confirm_end)
        .filter(|&k| !a.tainted[k])
        .map(|k| {
            let (p, q) = (&a.series.points[k - 1], &a.series.points[k]);
            (q.accumulated_us - p.accumulated_us) - al.pre_skew * (q.elapsed_us - p.elapsed_us) * 1e-6
        })
        .collect();
    let persistent = !shifts.is_empty() && {
        let m = shifts.len() as f64;
        let mean = shifts.iter().sum::<f64>() / m;
        mean.abs() > 3.0 * al.sd / m.sqrt() && (mean > 0.0) == al.upward
    };

    let pre = inp.fingerprint(a, prev_onset..al.onset)?;
    let post = inp.fingerprint(a, al.onset..next_onset)?;
    let mut evidence = Evidence {
        batch_index: Some(confirm_end as u64),
        onset_batch: Some(al.onset as u64),
        onset_us: Some(a.before_batch_us(al.onset)),
        pre_skew_us_per_s: Some(pre.as_ref().map_or(al.pre_skew, |f| f.skew_us_per_s)),
        post_skew_us_per_s: post.as_ref().map(|f| f.skew_us_per_s),
        ..Default::default()
    };
    let mut class = AttackClass::Unknown;
    let mut source = None;

    if !persistent {
        evidence.note = "slope disturbance did not persist".into();
    } else if let Some(db) = inp.db {
        let victim = db.ecu_of(a.id).and_then(|e| match &e.fingerprint.key {
            FingerprintKey::Ecu(l) => Some(l.clone()),
            FingerprintKey::Id(_) => None,
        });
        let registered = db.id_entry(a.id).map(|e| &e.fingerprint);
        let owner = db.ecu_of(a.id).map(|e| &e.fingerprint);
        let close = |fp: &Fingerprint, r: &Fingerprint| {
            (fp.skew_us_per_s - r.skew_us_per_s).abs() <= fp.ci_us_per_s + r.ci_us_per_s
        };
        // Either the identifier's own entry or its ECU's pooled one.
        let agrees = |fp: &Option<Fingerprint>| {
            let fp = fp.as_ref()?;
            let refs: Vec<&Fingerprint> = registered.into_iter().chain(owner).collect();
            (!refs.is_empty()).then(|| refs.iter().any(|r| close(fp, r)))
        };
        let pre_ok = agrees(&pre).unwrap_or(true);
        let post_same = agrees(&post).unwrap_or(false);
        evidence.victim = victim.clone();
        if pre_ok && !post_same {
            class = AttackClass::Impersonation;
            source = inp.source_of(post.as_ref()).filter(|s| Some(s) != victim.as_ref());
            evidence.note = format!(
                "{} keeps its period but now drifts like another clock",
                a.id
            );
        } else if !pre_ok {
            evidence.note = "pre-change skew does not match the registered owner".into();
        } else {
            evidence.note = "post-change skew still matches the registered owner".into();
        }
    } else {
        class = AttackClass::Impersonation;
        evidence.note = format!("{} keeps its period but its skew changed persistently", a.id);
    }

    Ok(DetectionEvent {
        time_us: a.batch_end_us(confirm_end),
        id: a.id,
        kind: EventKind::SlopeChange,
        class,
        source,
        evidence,
    })
}
