//! Deterministic discrete-event simulation of a single CAN bus.
//!
//! Every ECU owns a clock with a constant skew. Frame `i` of a schedule entry
//! is released at `iT + O_i`, where the offset `O_i` grows linearly with the
//! nominal send time plus zero-mean jitter. Released frames wait in per-ID
//! FIFO queues; whenever the bus goes idle the lowest identifier among the
//! queue heads wins arbitration and occupies the bus for one frame time.
//! The receiver timestamps a frame at the end of its transmission plus a
//! small propagation delay.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{self, AttackSpec};
use crate::error::{Error, Result};
use crate::frame::{CanFrame, EcuLabel, FrameId, TimestampedFrame};
use crate::trace_io::{TraceDocument, TraceMetadata};

/// Sanity bound on clock drift.
pub const MAX_SKEW_PPM: f64 = 10_000.0;
/// Backlog (frames of one ID from one sender) above which a saturation
/// warning is recorded.
pub const SATURATION_BACKLOG: usize = 8;

/// Bus occupancy of one frame in microseconds, rounded to 0.1 us.
pub fn frame_time(frame_bits: f64, bitrate_bps: f64) -> Result<f64> {
    if !(frame_bits > 0.0) || !(bitrate_bps > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "frame_bits ({frame_bits}) and bitrate ({bitrate_bps}) must be positive"
        )));
    }
    Ok((frame_bits / bitrate_bps * 1e7).round() / 10.0)
}

/// Local oscillator of an ECU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    /// Drift rate in parts per million; positive runs slow (sends late).
    pub skew_ppm: f64,
    /// Standard deviation of the per-message offset noise.
    pub offset_jitter_us: f64,
    /// Constant phase added to every offset.
    pub phase_us: f64,
}

impl ClockModel {
    pub fn new(skew_ppm: f64, offset_jitter_us: f64, phase_us: f64) -> Result<Self> {
        let clock = ClockModel {
            skew_ppm,
            offset_jitter_us,
            phase_us,
        };
        clock.validate()?;
        Ok(clock)
    }

    pub fn ideal() -> Self {
        ClockModel {
            skew_ppm: 0.0,
            offset_jitter_us: 0.0,
            phase_us: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.skew_ppm.is_finite() || self.skew_ppm.abs() > MAX_SKEW_PPM {
            return Err(Error::InvalidSpec(format!(
                "|skew_ppm| must be <= {MAX_SKEW_PPM}, got {}",
                self.skew_ppm
            )));
        }
        if !(self.offset_jitter_us >= 0.0) || !self.offset_jitter_us.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "offset_jitter_us must be >= 0, got {}",
                self.offset_jitter_us
            )));
        }
        if !self.phase_us.is_finite() {
            return Err(Error::InvalidSpec("phase_us must be finite".into()));
        }
        Ok(())
    }

    /// Deterministic part of the offset at a nominal local send time.
    pub fn drift_us(&self, nominal_us: f64) -> f64 {
        self.skew_ppm * nominal_us * 1e-6 + self.phase_us
    }

    fn jitter<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        sample_normal(rng, self.offset_jitter_us)
    }
}

impl Default for ClockModel {
    fn default() -> Self {
        ClockModel::ideal()
    }
}

/// True-time instant at which message `i` of a period-`period_us` stream is
/// handed to the controller: `iT + O_i`.
pub fn intended_send_time<R: Rng + ?Sized>(
    clock: &ClockModel,
    i: u64,
    period_us: f64,
    rng: &mut R,
) -> f64 {
    let nominal = i as f64 * period_us;
    nominal + clock.drift_us(nominal) + clock.jitter(rng)
}

fn sample_normal<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sd)
        .expect("standard deviation validated as finite and nonnegative")
        .sample(rng)
}

/// How a schedule entry maps nominal send times onto its sender's clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Timing {
    /// Offset `skew * t + phase` from the trace origin.
    Free,
    /// Offset continues from `offset_us` at `at_us` with the sender's skew,
    /// ignoring its phase. Used by an impersonator that takes over a
    /// victim's stream without a timing discontinuity.
    PhaseLocked { at_us: f64, offset_us: f64 },
}

/// One periodic stream sent by an ECU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub id: FrameId,
    pub extended: bool,
    pub period_us: f64,
    /// Nominal time of the first message.
    pub offset_us: f64,
    pub dlc: usize,
    /// Only messages whose nominal time lies in `[active_from_us, active_until_us)` are sent.
    pub active_from_us: f64,
    pub active_until_us: Option<f64>,
    pub timing: Timing,
    /// Width of an extra uniform jitter added to every release (0 = periodic).
    pub extra_jitter_us: f64,
    /// Fill payloads with random bytes instead of a message counter.
    pub random_payload: bool,
}

impl ScheduleEntry {
    /// A plain extended-ID stream with an 8-byte counter payload.
    pub fn periodic(id: FrameId, period_ms: f64, offset_ms: f64) -> Self {
        ScheduleEntry {
            id,
            extended: true,
            period_us: period_ms * 1000.0,
            offset_us: offset_ms * 1000.0,
            dlc: 8,
            active_from_us: 0.0,
            active_until_us: None,
            timing: Timing::Free,
            extra_jitter_us: 0.0,
            random_payload: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.period_us > 0.0) || !self.period_us.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "period of {} must be > 0",
                self.id
            )));
        }
        if !(self.offset_us >= 0.0) || !self.offset_us.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "first-send offset of {} must be >= 0",
                self.id
            )));
        }
        if !(self.extra_jitter_us >= 0.0) {
            return Err(Error::InvalidSpec("extra jitter must be >= 0".into()));
        }
        CanFrame::new(self.id, self.extended, vec![0; self.dlc])?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Normal,
    Attacker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcuSpec {
    pub label: EcuLabel,
    pub clock: ClockModel,
    pub schedule: Vec<ScheduleEntry>,
    pub role: Role,
}

impl EcuSpec {
    pub fn normal(label: EcuLabel, clock: ClockModel, schedule: Vec<ScheduleEntry>) -> Self {
        EcuSpec {
            label,
            clock,
            schedule,
            role: Role::Normal,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = FrameId> + '_ {
        self.schedule.iter().map(|e| e.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusSpec {
    pub bitrate_bps: u32,
    /// Nominal bits per frame on the wire (all frames use this length).
    pub frame_bits: u32,
    /// Fixed multiplier standing in for bit stuffing.
    pub stuffing_factor: f64,
    /// Standard deviation of the propagation-delay noise.
    pub delay_jitter_us: f64,
    pub base_delay_us: f64,
}

impl Default for BusSpec {
    fn default() -> Self {
        BusSpec {
            bitrate_bps: 500_000,
            frame_bits: 131,
            stuffing_factor: 1.0,
            delay_jitter_us: 2.0,
            base_delay_us: 10.0,
        }
    }
}

impl BusSpec {
    pub fn effective_frame_bits(&self) -> f64 {
        self.frame_bits as f64 * self.stuffing_factor
    }

    pub fn frame_time_us(&self) -> Result<f64> {
        frame_time(self.effective_frame_bits(), self.bitrate_bps as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bitrate_bps == 0 || self.frame_bits == 0 {
            return Err(Error::InvalidSpec(
                "bitrate_bps and frame_bits must be > 0".into(),
            ));
        }
        if !(self.stuffing_factor >= 1.0) || !self.stuffing_factor.is_finite() {
            return Err(Error::InvalidSpec("stuffing_factor must be >= 1".into()));
        }
        if !(self.delay_jitter_us >= 0.0) || !(self.base_delay_us >= 0.0) {
            return Err(Error::InvalidSpec(
                "delay parameters must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub bus: BusSpec,
    pub ecus: Vec<EcuSpec>,
    pub attack: Option<AttackSpec>,
    pub duration_ms: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.bus.validate()?;
        if !(self.duration_ms > 0.0) || !self.duration_ms.is_finite() {
            return Err(Error::InvalidScenario("duration_ms must be > 0".into()));
        }
        if self.ecus.is_empty() {
            return Err(Error::InvalidScenario("at least one ECU is required".into()));
        }
        let mut labels: Vec<&EcuLabel> = self.ecus.iter().map(|e| &e.label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidScenario("ECU labels must be unique".into()));
        }
        let mut normal_ids = Vec::new();
        for ecu in &self.ecus {
            ecu.clock.validate()?;
            let mut own: Vec<FrameId> = Vec::new();
            for entry in &ecu.schedule {
                entry.validate()?;
                if own.contains(&entry.id) {
                    return Err(Error::InvalidScenario(format!(
                        "{} schedules {} twice",
                        ecu.label, entry.id
                    )));
                }
                own.push(entry.id);
            }
            if ecu.role == Role::Normal {
                normal_ids.extend(own);
            }
        }
        normal_ids.sort();
        if let Some(w) = normal_ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidScenario(format!(
                "{} is scheduled by more than one normal ECU",
                w[0]
            )));
        }
        if let Some(attack) = &self.attack {
            attack.validate(&self.bus)?;
        }
        Ok(())
    }

    pub fn ecu(&self, label: &EcuLabel) -> Option<&EcuSpec> {
        self.ecus.iter().find(|e| &e.label == label)
    }

    /// Which normal ECU sends a given identifier.
    pub fn owner_of(&self, id: FrameId) -> Option<&EcuLabel> {
        self.ecus
            .iter()
            .filter(|e| e.role == Role::Normal)
            .find(|e| e.ids().any(|x| x == id))
            .map(|e| &e.label)
    }

    /// Stable content hash (hex SHA-256 of the canonical JSON form).
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

/// A frame waiting in a controller queue.
#[derive(Debug, Clone, PartialEq)]
pub struct QueuedFrame {
    pub source: EcuLabel,
    pub frame: CanFrame,
    pub release_us: f64,
}

/// The frame that wins arbitration: lowest identifier, then standard before
/// extended, then (source label, payload) so duplicates resolve deterministically.
pub fn arbitrate(ready: &[QueuedFrame]) -> Result<&QueuedFrame> {
    ready
        .iter()
        .min_by(|a, b| {
            (a.frame.id(), a.frame.is_extended(), &a.source, a.frame.data()).cmp(&(
                b.frame.id(),
                b.frame.is_extended(),
                &b.source,
                b.frame.data(),
            ))
        })
        .ok_or_else(|| Error::Precondition("arbitration over an empty set".into()))
}

/// Ground truth for one transmitted frame, aligned with the trace entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SendRecord {
    pub sender: EcuLabel,
    pub id: FrameId,
    /// Message index within its schedule entry.
    pub seq: u64,
    pub release_us: f64,
    pub start_us: f64,
    pub end_us: f64,
    pub arrival_us: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub trace: TraceDocument,
    pub sends: Vec<SendRecord>,
    /// The scenario actually simulated, with any attack materialized.
    pub effective: Scenario,
}

/// Independent random stream for one (sender, id, purpose) triple, so that
/// adding a node never perturbs another node's noise.
pub(crate) fn stream_rng(seed: u64, label: &EcuLabel, id: FrameId, purpose: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_str().as_bytes());
    h.update([0u8]);
    h.update(id.value().to_le_bytes());
    h.update(purpose.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

struct Release {
    time_us: f64,
    queue: usize,
    seq: u64,
    frame: CanFrame,
}

struct Queue {
    ecu: usize,
    id: FrameId,
    items: VecDeque<Release>,
    delay_rng: ChaCha8Rng,
    warned: bool,
}

fn releases_for(
    entry: &ScheduleEntry,
    ecu: &EcuSpec,
    queue: usize,
    seed: u64,
    duration_us: f64,
    out: &mut Vec<Release>,
) -> Result<()> {
    let mut clock_rng = stream_rng(seed, &ecu.label, entry.id, "clock");
    let mut payload_rng = stream_rng(seed, &ecu.label, entry.id, "payload");
    for seq in 0u64.. {
        let nominal = entry.offset_us + seq as f64 * entry.period_us;
        if nominal >= duration_us {
            break;
        }
        if entry.active_until_us.is_some_and(|until| nominal >= until) {
            break;
        }
        let jitter = ecu.clock.jitter(&mut clock_rng);
        let extra = if entry.extra_jitter_us > 0.0 {
            payload_rng.random_range(-0.5..0.5) * entry.extra_jitter_us
        } else {
            0.0
        };
        let data = if entry.random_payload {
            (0..entry.dlc).map(|_| payload_rng.random::<u8>()).collect()
        } else {
            seq.to_be_bytes()[8 - entry.dlc..].to_vec()
        };
        if nominal < entry.active_from_us {
            continue;
        }
        let drift = match entry.timing {
            Timing::Free => ecu.clock.drift_us(nominal),
            Timing::PhaseLocked { at_us, offset_us } => {
                ecu.clock.skew_ppm * (nominal - at_us) * 1e-6 + offset_us
            }
        };
        let time_us = (nominal + drift + jitter + extra).max(entry.active_from_us.max(0.0));
        out.push(Release {
            time_us,
            queue,
            seq,
            frame: CanFrame::new(entry.id, entry.extended, data)?,
        });
    }
    Ok(())
}

/// Simulate a scenario (materializing its attack first) into a trace.
pub fn run(scenario: &Scenario) -> Result<SimOutput> {
    scenario.validate()?;
    let effective = attacks::materialize(scenario)?;
    effective.validate()?;
    let bus = &effective.bus;
    let ft = bus.frame_time_us()?;
    let duration_us = effective.duration_ms * 1000.0;

    let mut queues = Vec::new();
    let mut releases = Vec::new();
    for (ecu_idx, ecu) in effective.ecus.iter().enumerate() {
        for entry in &ecu.schedule {
            let q = queues.len();
            queues.push(Queue {
                ecu: ecu_idx,
                id: entry.id,
                items: VecDeque::new(),
                delay_rng: stream_rng(effective.seed, &ecu.label, entry.id, "delay"),
                warned: false,
            });
            releases_for(entry, ecu, q, effective.seed, duration_us, &mut releases)?;
        }
    }
    releases.sort_by(|a, b| {
        a.time_us
            .total_cmp(&b.time_us)
            .then(a.queue.cmp(&b.queue))
            .then(a.seq.cmp(&b.seq))
    });

    let mut warnings = Vec::new();
    let mut entries = Vec::new();
    let mut sends = Vec::new();
    let mut pending = releases.into_iter().peekable();
    let mut bus_free = 0.0f64;
    let mut last_arrival: Option<u64> = None;
    let mut heads: Vec<QueuedFrame> = Vec::new();
    let mut head_queue: Vec<usize> = Vec::new();

    loop {
        while let Some(r) = pending.next_if(|r| r.time_us <= bus_free) {
            let q = &mut queues[r.queue];
            q.items.push_back(r);
            if q.items.len() > SATURATION_BACKLOG && !q.warned {
                q.warned = true;
                warnings.push(format!(
                    "saturation: {} frames of {} from {} queued at {:.6} s",
                    q.items.len(),
                    q.id,
                    effective.ecus[q.ecu].label,
                    bus_free / 1e6
                ));
            }
        }
        heads.clear();
        head_queue.clear();
        for (qi, q) in queues.iter().enumerate() {
            if let Some(head) = q.items.front() {
                heads.push(QueuedFrame {
                    source: effective.ecus[q.ecu].label.clone(),
                    frame: head.frame.clone(),
                    release_us: head.time_us,
                });
                head_queue.push(qi);
            }
        }
        if heads.is_empty() {
            match pending.peek() {
                Some(next) => {
                    bus_free = bus_free.max(next.time_us);
                    continue;
                }
                None => break,
            }
        }
        let winner = arbitrate(&heads)?;
        let pos = heads
            .iter()
            .position(|h| std::ptr::eq(h, winner))
            .expect("winner comes from heads");
        let q = &mut queues[head_queue[pos]];
        let sent = q.items.pop_front().expect("head exists");
        let start = bus_free;
        let end = start + ft;
        let delay = (bus.base_delay_us + sample_normal(&mut q.delay_rng, bus.delay_jitter_us)).max(0.0);
        let mut arrival = (end + delay).round() as u64;
        if let Some(prev) = last_arrival {
            arrival = arrival.max(prev + 1);
        }
        last_arrival = Some(arrival);
        bus_free = end;
        sends.push(SendRecord {
            sender: effective.ecus[q.ecu].label.clone(),
            id: q.id,
            seq: sent.seq,
            release_us: sent.time_us,
            start_us: start,
            end_us: end,
            arrival_us: arrival,
        });
        entries.push(TimestampedFrame {
            arrival_us: arrival,
            frame: sent.frame,
        });
    }

    let metadata = TraceMetadata {
        scenario_hash: Some(scenario.content_hash()),
        seed: Some(scenario.seed),
        bitrate_bps: Some(bus.bitrate_bps),
        frame_bits: Some(bus.effective_frame_bits()),
        warnings,
    };
    Ok(SimOutput {
        trace: TraceDocument { metadata, entries },
        sends,
        effective,
    })
}
