//! Command-line front end: `simulate`, `fingerprint`, `detect` and `report`.
//!
//! Exit codes: 0 success, 2 usage, 3 invalid input document or parameters,
//! 4 missing input, 5 I/O or internal failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::bus::{self, Scenario};
use crate::detector::{self, AttackClass, DetectorConfig};
use crate::error::Error;
use crate::fingerprint::{AccumulationMode, FingerprintDb};
use crate::frame::{EcuLabel, FrameId};
use crate::scenario_file::{self, ScenarioFile};
use crate::trace_io::{self, SeriesRow};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INVALID: i32 = 3;
pub const EXIT_MISSING: i32 = 4;
pub const EXIT_INTERNAL: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "canskew", version, about = "Clock-skew fingerprinting and intrusion detection for CAN traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario and write its trace.
    Simulate {
        /// Scenario file, or the name of a bundled scenario.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a fingerprint database from an attack-free trace.
    Fingerprint {
        #[arg(long)]
        trace: PathBuf,
        /// Scenario whose ECU labels group identifiers; clusters by skew otherwise.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Analyze a trace against a fingerprint database.
    Detect {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Turn series CSVs from `detect` into figure data.
    Report {
        /// Series CSV; repeat for several inputs.
        #[arg(long = "series")]
        series: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Tuning {
    /// Messages per batch (even).
    #[arg(long)]
    batch_size: Option<usize>,
    /// CUSUM drift allowance.
    #[arg(long)]
    kappa: Option<f64>,
    /// CUSUM threshold.
    #[arg(long)]
    gamma: Option<f64>,
    /// RLS forgetting factor.
    #[arg(long)]
    lambda: Option<f64>,
    /// Sum signed batch offsets (the default).
    #[arg(long, conflicts_with = "absolute_accumulation")]
    signed_accumulation: bool,
    /// Sum absolute batch offsets.
    #[arg(long)]
    absolute_accumulation: bool,
}

impl Tuning {
    fn config(&self) -> DetectorConfig {
        let mut c = DetectorConfig::default();
        if let Some(n) = self.batch_size {
            c.batch_size = n;
        }
        if let Some(k) = self.kappa {
            c.kappa = k;
        }
        if let Some(g) = self.gamma {
            c.gamma = g;
        }
        if let Some(l) = self.lambda {
            c.lambda = l;
        }
        if self.absolute_accumulation {
            c.accumulation = AccumulationMode::Absolute;
        }
        c
    }
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    fn missing(what: &str, path: &Path) -> Self {
        Self::new(EXIT_MISSING, format!("{what} not found: {}", path.display()))
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(EXIT_INTERNAL, format!("{}: {e}", path.display()))
    }

    fn in_file(path: &Path, e: Error) -> Self {
        Self::new(code_of(&e), format!("{}: {e}", path.display()))
    }
}

fn code_of(e: &Error) -> i32 {
    match e {
        Error::Precondition(_) => EXIT_INTERNAL,
        _ => EXIT_INVALID,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::new(code_of(&e), e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Simulate { scenario, seed, out: dir } => simulate(&scenario, seed, &dir, out),
        Command::Fingerprint {
            trace,
            scenario,
            out: dir,
            tuning,
        } => fingerprint(&trace, scenario.as_deref(), &dir, &tuning.config(), out, err),
        Command::Detect {
            trace,
            db,
            out: dir,
            tuning,
        } => detect(&trace, &db, &dir, &tuning.config(), out, err),
        Command::Report { series, out: dir } => report(&series, &dir, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn read(path: &Path, what: &str) -> CliResult<String> {
    if !path.exists() {
        return Err(CliError::missing(what, path));
    }
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write(dir: &Path, name: &str, text: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

/// A scenario argument is a file path if one exists, else a bundled name.
fn load_scenario(arg: &str) -> CliResult<(String, Scenario)> {
    let path = Path::new(arg);
    let file = if path.is_file() {
        let text = read(path, "scenario")?;
        ScenarioFile::parse(&text).map_err(|e| CliError::in_file(path, e))?
    } else if let Some(text) = scenario_file::bundled_source(arg) {
        ScenarioFile::parse(text)?
    } else {
        let names: Vec<&str> = scenario_file::bundled_names().collect();
        return Err(CliError::new(
            EXIT_MISSING,
            format!("scenario not found: {arg} (bundled: {})", names.join(", ")),
        ));
    };
    let scenario = file.to_scenario().map_err(|e| CliError::new(code_of(&e), format!("{arg}: {e}")))?;
    let name = file.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map_or_else(|| arg.to_string(), |s| s.to_string_lossy().into_owned())
    });
    Ok((name, scenario))
}

fn load_trace(path: &Path) -> CliResult<(String, trace_io::TraceDocument)> {
    let text = read(path, "trace")?;
    let doc = trace_io::parse_trace(&text).map_err(|e| CliError::in_file(path, e))?;
    let digest = hex::encode(Sha256::digest(text.as_bytes()));
    Ok((digest[..16].to_string(), doc))
}

fn simulate(arg: &str, seed: Option<u64>, dir: &Path, out: &mut dyn Write) -> CliResult<()> {
    let (name, mut scenario) = load_scenario(arg)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    let sim = bus::run(&scenario)?;
    let path = write(dir, &format!("{name}.log"), &trace_io::write_trace(&sim.trace))?;

    let entries = &sim.trace.entries;
    let mut counts: BTreeMap<FrameId, usize> = BTreeMap::new();
    for e in entries {
        *counts.entry(e.frame.id()).or_default() += 1;
    }
    let span = match (entries.first(), entries.last()) {
        (Some(a), Some(b)) => (b.arrival_us - a.arrival_us) as f64 / 1e6,
        _ => 0.0,
    };
    let mut s = String::new();
    let _ = writeln!(s, "wrote {}", path.display());
    let _ = writeln!(
        s,
        "scenario {name}, seed {}, {} frames over {:.3} s, {} identifiers",
        scenario.seed,
        entries.len(),
        span,
        counts.len()
    );
    if let Some(a) = &sim.effective.attack {
        let _ = writeln!(s, "attack: {:?} from {}", a.kind(), a.attacker);
    }
    for (id, n) in &counts {
        let _ = writeln!(s, "  {id}  {n} frames");
    }
    for w in &sim.trace.metadata.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    out.write_all(s.as_bytes()).map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))
}

fn owners_of(scenario: &Scenario) -> BTreeMap<FrameId, EcuLabel> {
    scenario
        .ecus
        .iter()
        .flat_map(|e| e.ids().map(move |id| (id, e.label.clone())))
        .collect()
}

fn fingerprint(
    trace: &Path,
    scenario: Option<&str>,
    dir: &Path,
    config: &DetectorConfig,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult<()> {
    let (digest, doc) = load_trace(trace)?;
    let owners = match scenario {
        Some(arg) => Some(owners_of(&load_scenario(arg)?.1)),
        None => None,
    };
    let analysis = detector::analyze(&doc, config, None).map_err(|e| CliError::in_file(trace, e))?;
    let db = detector::build_db(&analysis, owners.as_ref(), Some(digest))?;

    let mut diag = String::new();
    for w in &analysis.warnings {
        let _ = writeln!(diag, "warning: {w}");
    }
    if analysis.fingerprints.is_empty() {
        let _ = writeln!(diag, "warning: insufficient data for every identifier; the database is empty");
    }
    if !analysis.events.is_empty() {
        let _ = writeln!(
            diag,
            "warning: {} anomalies in a trace expected to be attack-free",
            analysis.events.len()
        );
    }
    err.write_all(diag.as_bytes()).map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))?;

    let path = write(dir, "fingerprints.db", &db.write())?;
    let mut s = String::new();
    let _ = writeln!(s, "wrote {}", path.display());
    let _ = writeln!(s, "{:<14} {:>14} {:>10} {:>8}", "key", "skew [us/s]", "+/-", "batches");
    for e in &db.entries {
        let fp = &e.fingerprint;
        let _ = writeln!(
            s,
            "{:<14} {:>14.3} {:>10.3} {:>8}",
            fp.key.to_string(),
            fp.skew_us_per_s,
            fp.ci_us_per_s,
            fp.n_batches
        );
    }
    out.write_all(s.as_bytes()).map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))
}

fn detect(
    trace: &Path,
    db_path: &Path,
    dir: &Path,
    config: &DetectorConfig,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult<()> {
    if !db_path.exists() {
        return Err(CliError::new(
            EXIT_MISSING,
            format!(
                "fingerprint database not found: {} (run `canskew fingerprint` on an attack-free trace first)",
                db_path.display()
            ),
        ));
    }
    let db = FingerprintDb::parse(&read(db_path, "fingerprint database")?)
        .map_err(|e| CliError::in_file(db_path, e))?;
    let (_, doc) = load_trace(trace)?;
    let analysis = detector::analyze(&doc, config, Some(&db)).map_err(|e| CliError::in_file(trace, e))?;

    let mut diag = String::new();
    for w in &analysis.warnings {
        let _ = writeln!(diag, "warning: {w}");
    }
    err.write_all(diag.as_bytes()).map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))?;

    let summary = summary_text(trace, &doc, &analysis, &db);
    write(dir, "events.jsonl", &detector::events_jsonl(&analysis.events))?;
    write(dir, "series.csv", &trace_io::write_series_csv(&analysis.series_rows()))?;
    write(dir, "summary.txt", &summary)?;
    out.write_all(summary.as_bytes()).map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))
}

fn summary_text(
    trace: &Path,
    doc: &trace_io::TraceDocument,
    analysis: &detector::Analysis,
    db: &FingerprintDb,
) -> String {
    let mut s = String::new();
    let span = match (doc.entries.first(), doc.entries.last()) {
        (Some(a), Some(b)) => (b.arrival_us - a.arrival_us) as f64 / 1e6,
        _ => 0.0,
    };
    let _ = writeln!(s, "trace      {}", trace.display());
    let _ = writeln!(s, "frames     {} over {:.3} s", doc.entries.len(), span);
    let _ = writeln!(
        s,
        "monitored  {} identifiers, {} database entries",
        analysis.ids.len(),
        db.entries.len()
    );
    let _ = writeln!(s, "events     {}", analysis.events.len());
    if analysis.events.is_empty() {
        let _ = writeln!(s, "\nno attack detected");
        return s;
    }

    let _ = writeln!(
        s,
        "\n{:>12}  {:<8}  {:<13}  {:<11}  {:>5}  {:<7}  {:<6}",
        "time [s]", "id", "class", "kind", "onset", "source", "victim"
    );
    for e in &analysis.events {
        let dash = || "-".to_string();
        let _ = writeln!(
            s,
            "{:>12.6}  {:<8}  {:<13}  {:<11}  {:>5}  {:<7}  {:<6}",
            e.time_us as f64 / 1e6,
            e.id,
            e.class.to_string(),
            format!("{:?}", e.kind),
            e.evidence
                .onset_batch
                .or(e.evidence.batch_index)
                .map_or_else(dash, |b| b.to_string()),
            e.source.as_ref().map_or_else(|| "unknown".into(), |l| l.to_string()),
            e.evidence.victim.as_ref().map_or_else(dash, |l| l.to_string()),
        );
    }

    let _ = writeln!(s);
    let mut classes: BTreeMap<AttackClass, Vec<&detector::DetectionEvent>> = BTreeMap::new();
    for e in &analysis.events {
        classes.entry(e.class).or_default().push(e);
    }
    for (class, events) in classes {
        let first = events[0];
        let mut ids: Vec<String> = events.iter().map(|e| e.id.to_string()).collect();
        ids.dedup();
        let mut sources: Vec<String> = events
            .iter()
            .filter_map(|e| e.source.as_ref().map(|l| l.to_string()))
            .collect();
        sources.sort();
        sources.dedup();
        let victim = events.iter().find_map(|e| e.evidence.victim.as_ref());
        let _ = write!(
            s,
            "{class} from {:.3} s on {}",
            first.time_us as f64 / 1e6,
            ids.join(", ")
        );
        if let Some(v) = victim {
            let _ = write!(s, "; victim {v}");
        }
        let _ = writeln!(
            s,
            "; suspected source {}",
            if sources.is_empty() { "unknown".into() } else { sources.join(", ") }
        );
    }
    s
}

/// Figure file name for a series input: its stem, or its directory's name
/// when the stem is the generic `series`.
fn figure_name(path: &Path, taken: &mut BTreeMap<String, usize>) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let base = if stem == "series" || stem.is_empty() {
        path.parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or(stem)
    } else {
        stem
    };
    let n = taken.entry(base.clone()).or_insert(0);
    *n += 1;
    if *n == 1 {
        format!("{base}.figure.csv")
    } else {
        format!("{base}-{n}.figure.csv")
    }
}

fn figure_csv(rows: &[SeriesRow]) -> String {
    let mut sorted: Vec<&SeriesRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.id, r.batch_index));
    let mut s = String::from("id,batch_index,elapsed_s,accumulated_offset_us,skew_estimate_us_per_s\n");
    for r in sorted {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.3},{:.4}",
            r.id,
            r.batch_index,
            r.elapsed_time_us / 1e6,
            r.accumulated_offset_us,
            r.skew_estimate
        );
    }
    s
}

fn report(inputs: &[PathBuf], dir: &Path, out: &mut dyn Write) -> CliResult<()> {
    if inputs.is_empty() {
        return Err(CliError::new(EXIT_MISSING, "no series inputs given (use --series)"));
    }
    let mut parsed = Vec::with_capacity(inputs.len());
    for path in inputs {
        let rows = trace_io::parse_series_csv(&read(path, "series")?).map_err(|e| CliError::in_file(path, e))?;
        parsed.push((path, rows));
    }
    let mut taken = BTreeMap::new();
    let mut s = String::new();
    for (path, rows) in parsed {
        let name = figure_name(path, &mut taken);
        let written = write(dir, &name, &figure_csv(&rows))?;
        let mut ids: Vec<FrameId> = rows.iter().map(|r| r.id).collect();
        ids.sort();
        ids.dedup();
        let _ = writeln!(s, "wrote {} ({} series, {} rows)", written.display(), ids.len(), rows.len());
    }
    out.write_all(s.as_bytes()).map_err(|e| CliError::new(EXIT_INTERNAL, e.to_string()))
}
