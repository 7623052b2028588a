//! candump-style trace files and the per-batch series CSV.
//!
//! A trace line looks like `(1.000272) can0 00000001#0011223344556677`.
//! Standard identifiers use 3 hex digits, extended ones 8. Metadata lives in
//! leading `# key: value` comments; unknown comments are ignored.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::frame::{CanFrame, FrameId, TimestampedFrame};

const HEADER: &str = "# canskew trace v1";
const INTERFACE: &str = "can0";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceMetadata {
    pub scenario_hash: Option<String>,
    pub seed: Option<u64>,
    pub bitrate_bps: Option<u32>,
    /// Effective bits per frame, stuffing included.
    pub frame_bits: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceDocument {
    pub metadata: TraceMetadata,
    pub entries: Vec<TimestampedFrame>,
}

/// Serializes a trace. Newlines inside warnings are flattened to spaces.
pub fn write_trace(doc: &TraceDocument) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    let m = &doc.metadata;
    if let Some(h) = &m.scenario_hash {
        let _ = writeln!(out, "# scenario-hash: {h}");
    }
    if let Some(seed) = m.seed {
        let _ = writeln!(out, "# seed: {seed}");
    }
    if let Some(b) = m.bitrate_bps {
        let _ = writeln!(out, "# bitrate: {b}");
    }
    if let Some(bits) = m.frame_bits {
        let _ = writeln!(out, "# frame-bits: {bits}");
    }
    for w in &m.warnings {
        let _ = writeln!(out, "# warning: {}", w.replace(['\n', '\r'], " "));
    }
    for e in &doc.entries {
        write_entry(&mut out, e);
    }
    out
}

fn write_entry(out: &mut String, e: &TimestampedFrame) {
    let secs = e.arrival_us / 1_000_000;
    let micros = e.arrival_us % 1_000_000;
    let id = e.frame.id().value();
    let _ = if e.frame.is_extended() {
        write!(out, "({secs}.{micros:06}) {INTERFACE} {id:08X}#")
    } else {
        write!(out, "({secs}.{micros:06}) {INTERFACE} {id:03X}#")
    };
    out.push_str(&hex::encode_upper(e.frame.data()));
    out.push('\n');
}

pub fn parse_trace(text: &str) -> Result<TraceDocument> {
    let mut doc = TraceDocument::default();
    let mut previous: Option<u64> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            parse_comment(&mut doc.metadata, comment.trim(), line_no)?;
            continue;
        }
        let entry = parse_entry(line, line_no)?;
        if let Some(prev) = previous {
            if entry.arrival_us <= prev {
                return Err(Error::Ordering {
                    line: line_no,
                    timestamp_us: entry.arrival_us,
                    previous_us: prev,
                });
            }
        }
        previous = Some(entry.arrival_us);
        doc.entries.push(entry);
    }
    Ok(doc)
}

fn parse_comment(m: &mut TraceMetadata, body: &str, line: usize) -> Result<()> {
    let Some((key, value)) = body.split_once(':') else {
        return Ok(());
    };
    let value = value.trim();
    let bad = |what: &str| Error::parse(line, format!("invalid {what} {value:?}"));
    match key.trim() {
        "scenario-hash" => m.scenario_hash = Some(value.to_string()),
        "seed" => m.seed = Some(value.parse().map_err(|_| bad("seed"))?),
        "bitrate" => m.bitrate_bps = Some(value.parse().map_err(|_| bad("bitrate"))?),
        "frame-bits" => {
            let bits: f64 = value.parse().map_err(|_| bad("frame-bits"))?;
            if !(bits.is_finite() && bits > 0.0) {
                return Err(bad("frame-bits"));
            }
            m.frame_bits = Some(bits);
        }
        "warning" => m.warnings.push(value.to_string()),
        _ => {}
    }
    Ok(())
}

fn parse_entry(line: &str, line_no: usize) -> Result<TimestampedFrame> {
    let err = |msg: &str| Error::parse(line_no, msg.to_string());
    let mut fields = line.split_whitespace();
    let stamp = fields.next().ok_or_else(|| err("empty line"))?;
    let _iface = fields.next().ok_or_else(|| err("missing interface"))?;
    let frame = fields.next().ok_or_else(|| err("missing frame"))?;

    let stamp = stamp
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| err("timestamp must look like (S.UUUUUU)"))?;
    let arrival_us = parse_timestamp(stamp).ok_or_else(|| err("malformed timestamp"))?;

    let (id_hex, data_hex) = frame
        .split_once('#')
        .ok_or_else(|| err("frame must look like ID#DATA"))?;
    if data_hex.starts_with('#') || data_hex.starts_with('R') {
        return Err(err("remote and CAN FD frames are not supported"));
    }
    let extended = match id_hex.len() {
        3 => false,
        8 => true,
        _ => return Err(err("identifier must have 3 or 8 hex digits")),
    };
    let raw_id = u32::from_str_radix(id_hex, 16).map_err(|_| err("identifier is not hex"))?;
    let id = FrameId::new(raw_id).map_err(|e| Error::parse(line_no, e.to_string()))?;
    let data = hex::decode(data_hex).map_err(|_| err("payload is not an even-length hex string"))?;
    let frame = CanFrame::new(id, extended, data).map_err(|e| Error::parse(line_no, e.to_string()))?;
    Ok(TimestampedFrame { arrival_us, frame })
}

fn parse_timestamp(s: &str) -> Option<u64> {
    let (secs, frac) = s.split_once('.')?;
    if secs.is_empty()
        || frac.is_empty()
        || frac.len() > 6
        || !secs.bytes().all(|b| b.is_ascii_digit())
        || !frac.bytes().all(|b| b.is_ascii_digit())
    {
        return None;
    }
    let secs: u64 = secs.parse().ok()?;
    let micros: u64 = frac.parse::<u64>().ok()? * 10u64.pow(6 - frac.len() as u32);
    secs.checked_mul(1_000_000)?.checked_add(micros)
}

/// One row of the per-batch analysis output.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRow {
    pub id: FrameId,
    pub batch_index: u64,
    pub elapsed_time_us: f64,
    pub accumulated_offset_us: f64,
    pub skew_estimate: f64,
    pub identification_error: f64,
}

pub const SERIES_HEADER: &str =
    "id,batch_index,elapsed_time_us,accumulated_offset_us,skew_estimate,identification_error";

/// Rows are written ordered by (id, batch_index).
pub fn write_series_csv(rows: &[SeriesRow]) -> String {
    let mut sorted: Vec<&SeriesRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.id, r.batch_index));
    let mut out = String::from(SERIES_HEADER);
    out.push('\n');
    for r in sorted {
        let _ = writeln!(
            out,
            "{},{},{:.1},{:.3},{:.4},{:.3}",
            r.id,
            r.batch_index,
            r.elapsed_time_us,
            r.accumulated_offset_us,
            r.skew_estimate,
            r.identification_error
        );
    }
    out
}

pub fn parse_series_csv(text: &str) -> Result<Vec<SeriesRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SERIES_HEADER => {}
        _ => return Err(Error::parse(1, "missing series header")),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.trim().split(',').collect();
        if cols.len() != 6 {
            return Err(Error::parse(line_no, format!("expected 6 columns, got {}", cols.len())));
        }
        let num = |i: usize| -> Result<f64> {
            cols[i]
                .parse::<f64>()
                .map_err(|_| Error::parse(line_no, format!("bad number {:?}", cols[i])))
        };
        let raw_id = u32::from_str_radix(cols[0], 16)
            .map_err(|_| Error::parse(line_no, format!("bad id {:?}", cols[0])))?;
        rows.push(SeriesRow {
            id: FrameId::new(raw_id).map_err(|e| Error::parse(line_no, e.to_string()))?,
            batch_index: cols[1]
                .parse()
                .map_err(|_| Error::parse(line_no, format!("bad batch index {:?}", cols[1])))?,
            elapsed_time_us: num(2)?,
            accumulated_offset_us: num(3)?,
            skew_estimate: num(4)?,
            identification_error: num(5)?,
        });
    }
    Ok(rows)
}
