//! Plain-text fingerprint database, one entry per line:
//!
//! ```text
//! # canskew fingerprint db v1
//! id:00000001 skew_us_per_s=130.2 ci_us_per_s=2.9 n_batches=118 period_us=50000 trace=9f2c...
//! ecu:A skew_us_per_s=130.1 ci_us_per_s=1.7 n_batches=354 members=00000001,00000002 trace=9f2c...
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so writing a parsed
//! database reproduces it byte for byte.

use std::fmt::Write as _;

use super::{Fingerprint, FingerprintKey};
use crate::error::{Error, Result};
use crate::frame::{EcuLabel, FrameId};

const HEADER: &str = "# canskew fingerprint db v1";

#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub fingerprint: Fingerprint,
    /// Learned transmission period, for identifier entries.
    pub period_us: Option<f64>,
    /// Identifiers folded into an ECU entry.
    pub members: Vec<FrameId>,
    /// Hash of the training trace, if known.
    pub trace: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FingerprintDb {
    pub entries: Vec<DbEntry>,
}

impl FingerprintDb {
    pub fn id_entry(&self, id: FrameId) -> Option<&DbEntry> {
        self.entries
            .iter()
            .find(|e| e.fingerprint.key == FingerprintKey::Id(id))
    }

    pub fn ecu_entries(&self) -> impl Iterator<Item = &DbEntry> {
        self.entries
            .iter()
            .filter(|e| matches!(e.fingerprint.key, FingerprintKey::Ecu(_)))
    }

    /// The ECU entry listing `id` among its members.
    pub fn ecu_of(&self, id: FrameId) -> Option<&DbEntry> {
        self.ecu_entries().find(|e| e.members.contains(&id))
    }

    pub fn ids(&self) -> impl Iterator<Item = FrameId> + '_ {
        self.entries.iter().filter_map(|e| match e.fingerprint.key {
            FingerprintKey::Id(id) => Some(id),
            FingerprintKey::Ecu(_) => None,
        })
    }

    pub fn write(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for e in &self.entries {
            let fp = &e.fingerprint;
            let _ = write!(
                out,
                "{} skew_us_per_s={} ci_us_per_s={} n_batches={}",
                fp.key, fp.skew_us_per_s, fp.ci_us_per_s, fp.n_batches
            );
            if let Some(p) = e.period_us {
                let _ = write!(out, " period_us={p}");
            }
            if !e.members.is_empty() {
                let list: Vec<String> = e.members.iter().map(|m| m.to_string()).collect();
                let _ = write!(out, " members={}", list.join(","));
            }
            if let Some(t) = &e.trace {
                let _ = write!(out, " trace={t}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut db = FingerprintDb::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            db.entries.push(parse_entry(line, idx + 1)?);
        }
        Ok(db)
    }
}

fn parse_entry(line: &str, line_no: usize) -> Result<DbEntry> {
    let err = |msg: String| Error::parse(line_no, msg);
    let mut fields = line.split_whitespace();
    let key = fields.next().ok_or_else(|| err("empty entry".into()))?;
    let key = match key.split_once(':') {
        Some(("id", hex)) if hex.len() == 8 => {
            let v = u32::from_str_radix(hex, 16).map_err(|_| err(format!("bad id {hex:?}")))?;
            FingerprintKey::Id(FrameId::new(v).map_err(|e| err(e.to_string()))?)
        }
        Some(("ecu", name)) => FingerprintKey::Ecu(EcuLabel::new(name).map_err(|e| err(e.to_string()))?),
        _ => return Err(err(format!("unknown entry key {key:?}"))),
    };

    let (mut skew, mut ci, mut n) = (None, None, None);
    let mut entry = DbEntry {
        fingerprint: Fingerprint {
            key,
            skew_us_per_s: 0.0,
            ci_us_per_s: 0.0,
            n_batches: 0,
        },
        period_us: None,
        members: Vec::new(),
        trace: None,
    };
    for field in fields {
        let (name, value) = field
            .split_once('=')
            .ok_or_else(|| err(format!("field {field:?} is not name=value")))?;
        let float = || -> Result<f64> {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad number for {name}: {value:?}")))
        };
        match name {
            "skew_us_per_s" => skew = Some(float()?),
            "ci_us_per_s" => ci = Some(float()?.max(0.0)),
            "n_batches" => {
                n = Some(value.parse().map_err(|_| err(format!("bad n_batches {value:?}")))?)
            }
            "period_us" => entry.period_us = Some(float()?),
            "members" => {
                for m in value.split(',') {
                    let v = u32::from_str_radix(m, 16).map_err(|_| err(format!("bad member {m:?}")))?;
                    entry.members.push(FrameId::new(v).map_err(|e| err(e.to_string()))?);
                }
            }
            "trace" => entry.trace = Some(value.to_string()),
            _ => return Err(err(format!("unknown field {name:?}"))),
        }
    }
    let missing = |what: &str| err(format!("missing {what}"));
    entry.fingerprint.skew_us_per_s = skew.ok_or_else(|| missing("skew_us_per_s"))?;
    entry.fingerprint.ci_us_per_s = ci.ok_or_else(|| missing("ci_us_per_s"))?;
    entry.fingerprint.n_batches = n.ok_or_else(|| missing("n_batches"))?;
    Ok(entry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn example_round_trip() {
        let text = "# canskew fingerprint db v1\n\
            id:00000001 skew_us_per_s=130.25 ci_us_per_s=2.5 n_batches=118 period_us=50000 trace=ab\n\
            ecu:A skew_us_per_s=-80 ci_us_per_s=1 n_batches=3 members=00000001,00000002\n";
        let db = FingerprintDb::parse(text).unwrap();
        assert_eq!(db.entries.len(), 2);
        assert_eq!(db.write(), text);
        let id1 = FrameId::new(1).unwrap();
        assert_eq!(db.id_entry(id1).unwrap().period_us, Some(50_000.0));
        assert_eq!(db.ecu_of(id1).unwrap().fingerprint.skew_us_per_s, -80.0);
    }

    #[test]
    fn parse_errors_carry_line() {
        let r = FingerprintDb::parse("\nid:00000001 skew_us_per_s=1 n_batches=2\n");
        assert!(matches!(r, Err(Error::Parse { line: 2, .. })));
        let r = FingerprintDb::parse("foo:1 skew_us_per_s=1 ci_us_per_s=1 n_batches=2\n");
        assert!(matches!(r, Err(Error::Parse { line: 1, .. })));
        let r = FingerprintDb::parse("ecu:A skew_us_per_s=nan ci_us_per_s=1 n_batches=2\n");
        assert!(r.is_err());
    }

    fn arb_entry() -> impl Strategy<Value = DbEntry> {
        let key = prop_oneof![
            (0u32..=0x1FFF_FFFF).prop_map(|v| FingerprintKey::Id(FrameId::new(v).unwrap())),
            "[A-Za-z][A-Za-z0-9_]{0,6}".prop_map(|s| FingerprintKey::Ecu(EcuLabel::new(s).unwrap())),
        ];
        (
            key,
            -1e4f64..1e4,
            0.0f64..100.0,
            0usize..100_000,
            prop::option::of(1.0f64..1e7),
            prop::collection::vec(0u32..=0x1FFF_FFFF, 0..4),
            prop::option::of("[0-9a-f]{8,64}"),
        )
            .prop_map(|(key, skew, ci, n, period_us, members, trace)| DbEntry {
                fingerprint: Fingerprint {
                    key,
                    skew_us_per_s: skew,
                    ci_us_per_s: ci,
                    n_batches: n,
                },
                period_us,
                members: members.into_iter().map(|m| FrameId::new(m).unwrap()).collect(),
                trace,
            })
    }

    proptest! {
        #[test]
        fn db_round_trip(entries in prop::collection::vec(arb_entry(), 0..12)) {
            let db = FingerprintDb { entries };
            let text = db.write();
            let back = FingerprintDb::parse(&text).unwrap();
            prop_assert_eq!(&back, &db);
            prop_assert_eq!(back.write(), text);
        }
    }
}
