//! TOML scenario files.
//!
//! ```toml
//! duration_ms = 60000
//! seed = 1
//!
//! [bus]
//! bitrate_bps = 500000
//!
//! [[ecu]]
//! label = "A"
//! skew_ppm = 130.0
//! offset_jitter_us = 5.0
//! messages = [{ id = 0x1, period_ms = 50, offset_ms = 0 }]
//!
//! [attack]
//! kind = "impersonation"
//! attacker = "X"
//! start_ms = 20000
//! skew_ppm = 330.0
//! target = "A"
//! ```

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackParams, AttackSpec};
use crate::bus::{BusSpec, ClockModel, EcuSpec, Scenario, ScheduleEntry};
use crate::error::{Error, Result};
use crate::frame::{EcuLabel, FrameId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: Option<String>,
    pub duration_ms: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bus: BusSection,
    #[serde(rename = "ecu")]
    pub ecus: Vec<EcuSection>,
    #[serde(default)]
    pub attack: Option<AttackSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BusSection {
    pub bitrate_bps: u32,
    pub frame_bits: u32,
    pub stuffing_factor: f64,
    pub delay_jitter_us: f64,
    pub base_delay_us: f64,
}

impl Default for BusSection {
    fn default() -> Self {
        let b = BusSpec::default();
        BusSection {
            bitrate_bps: b.bitrate_bps,
            frame_bits: b.frame_bits,
            stuffing_factor: b.stuffing_factor,
            delay_jitter_us: b.delay_jitter_us,
            base_delay_us: b.base_delay_us,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcuSection {
    pub label: String,
    #[serde(default)]
    pub skew_ppm: f64,
    #[serde(default)]
    pub offset_jitter_us: f64,
    #[serde(default)]
    pub phase_us: f64,
    pub messages: Vec<MessageSection>,
}

fn yes() -> bool {
    true
}

fn eight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageSection {
    pub id: u32,
    pub period_ms: f64,
    #[serde(default)]
    pub offset_ms: f64,
    #[serde(default = "yes")]
    pub extended: bool,
    #[serde(default = "eight")]
    pub dlc: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKindName {
    Dos,
    Fuzzy,
    Impersonation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub kind: AttackKindName,
    #[serde(default = "default_attacker")]
    pub attacker: String,
    pub start_ms: f64,
    #[serde(default)]
    pub duration_ms: Option<f64>,
    #[serde(default)]
    pub skew_ppm: f64,
    #[serde(default)]
    pub offset_jitter_us: f64,
    #[serde(default)]
    pub phase_us: f64,
    /// DoS: spacing of flood releases; defaults to one frame time.
    #[serde(default)]
    pub flood_period_us: Option<f64>,
    /// Fuzzy: spoofed identifiers.
    #[serde(default)]
    pub targets: Vec<u32>,
    #[serde(default)]
    pub injection_period_ms: Option<f64>,
    #[serde(default)]
    pub jitter_us: f64,
    #[serde(default)]
    pub allow_unknown_ids: bool,
    /// Impersonation: the silenced ECU.
    #[serde(default)]
    pub target: Option<String>,
}

fn default_attacker() -> String {
    "X".into()
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidScenario(msg.into())
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| invalid(format!("scenario file: {}", e.message())))
    }

    pub fn to_scenario(&self) -> Result<Scenario> {
        let bus = BusSpec {
            bitrate_bps: self.bus.bitrate_bps,
            frame_bits: self.bus.frame_bits,
            stuffing_factor: self.bus.stuffing_factor,
            delay_jitter_us: self.bus.delay_jitter_us,
            base_delay_us: self.bus.base_delay_us,
        };
        let ecus = self
            .ecus
            .iter()
            .map(|e| {
                let schedule = e
                    .messages
                    .iter()
                    .map(|m| {
                        let mut entry = ScheduleEntry::periodic(FrameId::new(m.id)?, m.period_ms, m.offset_ms);
                        entry.extended = m.extended;
                        entry.dlc = m.dlc;
                        Ok(entry)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(EcuSpec::normal(
                    EcuLabel::new(e.label.as_str())?,
                    ClockModel::new(e.skew_ppm, e.offset_jitter_us, e.phase_us)?,
                    schedule,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let attack = self.attack.as_ref().map(|a| a.to_spec(&bus)).transpose()?;
        let scenario = Scenario {
            bus,
            ecus,
            attack,
            duration_ms: self.duration_ms,
            seed: self.seed,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

impl AttackSection {
    fn to_spec(&self, bus: &BusSpec) -> Result<AttackSpec> {
        let params = match self.kind {
            AttackKindName::Dos => AttackParams::Dos {
                flood_period_us: match self.flood_period_us {
                    Some(p) => p,
                    None => bus.frame_time_us()?,
                },
            },
            AttackKindName::Fuzzy => AttackParams::Fuzzy {
                targets: self
                    .targets
                    .iter()
                    .map(|&t| FrameId::new(t))
                    .collect::<Result<Vec<_>>>()?,
                injection_period_us: self
                    .injection_period_ms
                    .ok_or_else(|| invalid("fuzzy attack needs injection_period_ms"))?
                    * 1000.0,
                jitter_us: self.jitter_us,
                allow_unknown_ids: self.allow_unknown_ids,
            },
            AttackKindName::Impersonation => AttackParams::Impersonation {
                target: EcuLabel::new(
                    self.target
                        .as_deref()
                        .ok_or_else(|| invalid("impersonation attack needs a target"))?,
                )?,
            },
        };
        Ok(AttackSpec {
            attacker: EcuLabel::new(self.attacker.as_str())?,
            start_ms: self.start_ms,
            duration_ms: self.duration_ms,
            attacker_clock: ClockModel::new(self.skew_ppm, self.offset_jitter_us, self.phase_us)?,
            params,
        })
    }
}

const BUNDLED: &[(&str, &str)] = &[
    ("paper-normal", include_str!("../scenarios/paper-normal.toml")),
    ("paper-dos", include_str!("../scenarios/paper-dos.toml")),
    ("paper-fuzzy", include_str!("../scenarios/paper-fuzzy.toml")),
    ("paper-impersonation", include_str!("../scenarios/paper-impersonation.toml")),
];

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

/// Source text of a bundled scenario.
pub fn bundled_source(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn bundled(name: &str) -> Option<Result<Scenario>> {
    bundled_source(name).map(|text| ScenarioFile::parse(text)?.to_scenario())
}
