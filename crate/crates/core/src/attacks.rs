//! Attack injection. Each attack is a transform from a clean scenario to one
//! with a compromised node that takes part in arbitration like any other ECU.

use serde::{Deserialize, Serialize};

use crate::bus::{BusSpec, ClockModel, EcuSpec, Role, Scenario, ScheduleEntry, Timing};
use crate::error::{Error, Result};
use crate::frame::{EcuLabel, FrameId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackKind {
    Dos,
    Fuzzy,
    Impersonation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AttackParams {
    /// Flood the bus with top-priority frames.
    Dos { flood_period_us: f64 },
    /// Inject spoofed frames carrying `targets` identifiers.
    Fuzzy {
        targets: Vec<FrameId>,
        injection_period_us: f64,
        /// Uniform jitter width added to every injection (0 = periodic).
        jitter_us: f64,
        /// Permit identifiers no normal ECU sends.
        allow_unknown_ids: bool,
    },
    /// Silence `target` and send its streams from the attacker.
    Impersonation { target: EcuLabel },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub attacker: EcuLabel,
    pub start_ms: f64,
    /// Attack window length for DoS and fuzzy; impersonation persists.
    pub duration_ms: Option<f64>,
    pub attacker_clock: ClockModel,
    pub params: AttackParams,
}

impl AttackSpec {
    pub fn kind(&self) -> AttackKind {
        match self.params {
            AttackParams::Dos { .. } => AttackKind::Dos,
            AttackParams::Fuzzy { .. } => AttackKind::Fuzzy,
            AttackParams::Impersonation { .. } => AttackKind::Impersonation,
        }
    }

    pub fn validate(&self, bus: &BusSpec) -> Result<()> {
        if !(self.start_ms >= 0.0) || !self.start_ms.is_finite() {
            return Err(Error::InvalidScenario("attack start_ms must be >= 0".into()));
        }
        self.attacker_clock.validate()?;
        if let Some(d) = self.duration_ms {
            if !(d >= 0.0) || !d.is_finite() {
                return Err(Error::InvalidScenario(
                    "attack duration_ms must be >= 0".into(),
                ));
            }
        }
        match &self.params {
            AttackParams::Dos { flood_period_us } => {
                let ft = bus.frame_time_us()?;
                if !(*flood_period_us >= ft) {
                    return Err(Error::InvalidScenario(format!(
                        "flood_period_us {flood_period_us} is below the frame time {ft}"
                    )));
                }
                if self.duration_ms.is_none() {
                    return Err(Error::InvalidScenario("DoS needs duration_ms".into()));
                }
            }
            AttackParams::Fuzzy {
                injection_period_us,
                jitter_us,
                ..
            } => {
                if !(*injection_period_us > 0.0) {
                    return Err(Error::InvalidScenario(
                        "fuzzy injection period must be > 0".into(),
                    ));
                }
                if !(*jitter_us >= 0.0) {
                    return Err(Error::InvalidScenario("fuzzy jitter must be >= 0".into()));
                }
            }
            AttackParams::Impersonation { .. } => {}
        }
        Ok(())
    }

    fn start_us(&self) -> f64 {
        self.start_ms * 1000.0
    }

    fn end_us(&self) -> Option<f64> {
        self.duration_ms.map(|d| (self.start_ms + d) * 1000.0)
    }
}

fn check_kind(spec: &AttackSpec, kind: AttackKind) -> Result<()> {
    if spec.kind() != kind {
        return Err(Error::Precondition(format!(
            "expected a {kind:?} attack, got {:?}",
            spec.kind()
        )));
    }
    Ok(())
}

fn with_attacker(scenario: &Scenario, spec: &AttackSpec, schedule: Vec<ScheduleEntry>) -> Result<Scenario> {
    if scenario.ecu(&spec.attacker).is_some() {
        return Err(Error::InvalidScenario(format!(
            "attacker label {} collides with an existing ECU",
            spec.attacker
        )));
    }
    let mut out = scenario.clone();
    out.attack = None;
    out.ecus.push(EcuSpec {
        label: spec.attacker.clone(),
        clock: spec.attacker_clock.clone(),
        schedule,
        role: Role::Attacker,
    });
    Ok(out)
}

fn normal_ids(scenario: &Scenario) -> Vec<(FrameId, bool)> {
    scenario
        .ecus
        .iter()
        .filter(|e| e.role == Role::Normal)
        .flat_map(|e| e.schedule.iter().map(|s| (s.id, s.extended)))
        .collect()
}

/// Adds a node flooding identifier 0x000 during the attack window.
pub fn apply_dos(scenario: &Scenario, spec: &AttackSpec) -> Result<Scenario> {
    check_kind(spec, AttackKind::Dos)?;
    spec.validate(&scenario.bus)?;
    let AttackParams::Dos { flood_period_us } = spec.params else {
        unreachable!("kind checked")
    };
    if normal_ids(scenario).iter().any(|(id, _)| *id == FrameId::TOP_PRIORITY) {
        return Err(Error::InvalidScenario(
            "0x000 is already scheduled by a normal ECU".into(),
        ));
    }
    let start = spec.start_us();
    let end = spec.end_us().expect("validated");
    let schedule = if end > start {
        vec![ScheduleEntry {
            id: FrameId::TOP_PRIORITY,
            extended: false,
            period_us: flood_period_us,
            offset_us: start,
            dlc: 0,
            active_from_us: start,
            active_until_us: Some(end),
            timing: Timing::Free,
            extra_jitter_us: 0.0,
            random_payload: false,
        }]
    } else {
        Vec::new()
    };
    with_attacker(scenario, spec, schedule)
}

/// Adds a node that sends spoofed frames with the target identifiers on its
/// own clock from the attack start.
pub fn apply_fuzzy(scenario: &Scenario, spec: &AttackSpec) -> Result<Scenario> {
    check_kind(spec, AttackKind::Fuzzy)?;
    spec.validate(&scenario.bus)?;
    let AttackParams::Fuzzy {
        targets,
        injection_period_us,
        jitter_us,
        allow_unknown_ids,
    } = &spec.params
    else {
        unreachable!("kind checked")
    };
    if targets.is_empty() {
        return Err(Error::InvalidScenario("fuzzy attack needs at least one target id".into()));
    }
    let known = normal_ids(scenario);
    let start = spec.start_us();
    let mut schedule = Vec::new();
    for target in targets {
        let extended = match known.iter().find(|(id, _)| id == target) {
            Some((_, ext)) => *ext,
            None if *allow_unknown_ids => true,
            None => {
                return Err(Error::InvalidScenario(format!(
                    "fuzzy target {target} is not sent by any normal ECU"
                )))
            }
        };
        schedule.push(ScheduleEntry {
            id: *target,
            extended,
            period_us: *injection_period_us,
            offset_us: start,
            dlc: 8,
            active_from_us: start,
            active_until_us: spec.end_us(),
            timing: Timing::Free,
            extra_jitter_us: *jitter_us,
            random_payload: true,
        });
    }
    with_attacker(scenario, spec, schedule)
}

/// Silences the target from the attack start and lets the attacker send the
/// target's streams at the same periods on the attacker's clock. The
/// attacker continues the target's timing at the switch-over instant, so
/// only the drift rate changes.
pub fn apply_impersonation(scenario: &Scenario, spec: &AttackSpec) -> Result<Scenario> {
    check_kind(spec, AttackKind::Impersonation)?;
    spec.validate(&scenario.bus)?;
    let AttackParams::Impersonation { target } = &spec.params else {
        unreachable!("kind checked")
    };
    let victim = scenario
        .ecu(target)
        .filter(|e| e.role == Role::Normal)
        .ok_or_else(|| Error::InvalidScenario(format!("unknown impersonation target {target}")))?
        .clone();
    let start = spec.start_us();
    let takeover_offset = victim.clock.drift_us(start);
    let schedule = victim
        .schedule
        .iter()
        .map(|entry| ScheduleEntry {
            active_from_us: entry.active_from_us.max(start),
            timing: Timing::PhaseLocked {
                at_us: start,
                offset_us: takeover_offset,
            },
            ..entry.clone()
        })
        .collect();
    let mut out = with_attacker(scenario, spec, schedule)?;
    let silenced = out
        .ecus
        .iter_mut()
        .find(|e| &e.label == target)
        .expect("victim present");
    for entry in &mut silenced.schedule {
        entry.active_until_us = Some(entry.active_until_us.map_or(start, |u| u.min(start)));
    }
    Ok(out)
}

/// Applies the scenario's attack (if any) and returns an attack-free
/// description with the attacker as an explicit node.
pub fn materialize(scenario: &Scenario) -> Result<Scenario> {
    match &scenario.attack {
        None => Ok(scenario.clone()),
        Some(spec) => match spec.kind() {
            AttackKind::Dos => apply_dos(scenario, spec),
            AttackKind::Fuzzy => apply_fuzzy(scenario, spec),
            AttackKind::Impersonation => apply_impersonation(scenario, spec),
        },
    }
}
