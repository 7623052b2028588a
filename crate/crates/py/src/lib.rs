//! Python bindings for the canskew simulator and detector.

use std::collections::BTreeMap;

use canskew::bus;
use canskew::detector::{self, DetectorConfig};
use canskew::fingerprint::{self, AccumulationMode, FingerprintConfig, FingerprintKey};
use canskew::frame::{EcuLabel, FrameId};
use canskew::scenario_file::{self, ScenarioFile};
use canskew::trace_io::{self, TraceDocument};
use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;

fn err(e: canskew::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A simulation scenario: bus, ECUs, optional attack, duration and seed.
#[pyclass(module = "canskew_py", skip_from_py_object)]
#[derive(Clone)]
struct Scenario {
    inner: bus::Scenario,
}

#[pymethods]
impl Scenario {
    /// Parses scenario TOML.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = ScenarioFile::parse(text).and_then(|f| f.to_scenario()).map_err(err)?;
        Ok(Scenario { inner })
    }

    /// Loads one of the scenarios shipped with the library.
    #[staticmethod]
    fn bundled(name: &str) -> PyResult<Self> {
        match scenario_file::bundled(name) {
            Some(s) => Ok(Scenario { inner: s.map_err(err)? }),
            None => Err(PyKeyError::new_err(format!("no bundled scenario named {name}"))),
        }
    }

    #[staticmethod]
    fn bundled_names() -> Vec<&'static str> {
        scenario_file::bundled_names().collect()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn duration_ms(&self) -> f64 {
        self.inner.duration_ms
    }

    #[setter]
    fn set_duration_ms(&mut self, ms: f64) {
        self.inner.duration_ms = ms;
    }

    /// Attack kind, or None for an attack-free scenario.
    #[getter]
    fn attack(&self) -> Option<String> {
        self.inner.attack.as_ref().map(|a| format!("{:?}", a.kind()).to_lowercase())
    }

    /// Identifier to owning ECU label.
    fn owners(&self) -> BTreeMap<u32, String> {
        owners_of(&self.inner)
            .into_iter()
            .map(|(id, l)| (id.value(), l.as_str().to_string()))
            .collect()
    }

    fn simulate(&self) -> PyResult<Trace> {
        let out = bus::run(&self.inner).map_err(err)?;
        Ok(Trace { inner: out.trace })
    }
}

fn owners_of(s: &bus::Scenario) -> BTreeMap<FrameId, EcuLabel> {
    s.ecus
        .iter()
        .flat_map(|e| e.ids().map(move |i| (i, e.label.clone())))
        .collect()
}

/// A timestamped CAN trace in candump text form.
#[pyclass(module = "canskew_py", skip_from_py_object)]
#[derive(Clone)]
struct Trace {
    inner: TraceDocument,
}

#[pymethods]
impl Trace {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Trace {
            inner: trace_io::parse_trace(text).map_err(err)?,
        })
    }

    fn to_text(&self) -> String {
        trace_io::write_trace(&self.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.entries.len()
    }

    /// Frames as `(arrival_us, id, extended, data)` tuples.
    fn frames(&self) -> Vec<(u64, u32, bool, Vec<u8>)> {
        self.inner
            .entries
            .iter()
            .map(|e| (e.arrival_us, e.frame.id().value(), e.frame.is_extended(), e.frame.data().to_vec()))
            .collect()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.metadata.warnings.clone()
    }
}

/// A stored skew fingerprint.
#[pyclass(module = "canskew_py", get_all, skip_from_py_object)]
#[derive(Clone)]
struct Fingerprint {
    key: String,
    skew_us_per_s: f64,
    ci_us_per_s: f64,
    n_batches: usize,
}

impl From<&fingerprint::Fingerprint> for Fingerprint {
    fn from(f: &fingerprint::Fingerprint) -> Self {
        Fingerprint {
            key: f.key.to_string(),
            skew_us_per_s: f.skew_us_per_s,
            ci_us_per_s: f.ci_us_per_s,
            n_batches: f.n_batches,
        }
    }
}

#[pymethods]
impl Fingerprint {
    fn __repr__(&self) -> String {
        format!(
            "Fingerprint({}, {:.3} ± {:.3} µs/s, {} batches)",
            self.key, self.skew_us_per_s, self.ci_us_per_s, self.n_batches
        )
    }
}

/// Fingerprint database in its text form.
#[pyclass(module = "canskew_py", skip_from_py_object)]
#[derive(Clone)]
struct FingerprintDb {
    inner: fingerprint::FingerprintDb,
}

#[pymethods]
impl FingerprintDb {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(FingerprintDb {
            inner: fingerprint::FingerprintDb::parse(text).map_err(err)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.write()
    }

    fn __len__(&self) -> usize {
        self.inner.entries.len()
    }

    fn fingerprints(&self) -> Vec<Fingerprint> {
        self.inner.entries.iter().map(|e| (&e.fingerprint).into()).collect()
    }

    /// The fingerprint for an identifier, or an ECU label.
    fn get(&self, key: &Bound<'_, PyAny>) -> PyResult<Option<Fingerprint>> {
        let wanted = match key.extract::<u32>() {
            Ok(v) => FingerprintKey::Id(FrameId::new(v).map_err(err)?),
            Err(_) => FingerprintKey::Ecu(EcuLabel::new(key.extract::<String>()?).map_err(err)?),
        };
        Ok(self
            .inner
            .entries
            .iter()
            .find(|e| e.fingerprint.key == wanted)
            .map(|e| (&e.fingerprint).into()))
    }
}

/// One detection event.
#[pyclass(module = "canskew_py", get_all, skip_from_py_object)]
#[derive(Clone)]
struct Event {
    time_us: u64,
    id: u32,
    kind: String,
    class_: String,
    source: Option<String>,
    victim: Option<String>,
    note: String,
}

#[pymethods]
impl Event {
    fn __repr__(&self) -> String {
        format!(
            "Event({} at {} us on {:#x}, source {})",
            self.class_,
            self.time_us,
            self.id,
            self.source.as_deref().unwrap_or("unknown")
        )
    }
}

/// Result of running the detector over a trace.
#[pyclass(module = "canskew_py")]
struct Analysis {
    inner: detector::Analysis,
}

#[pymethods]
impl Analysis {
    #[getter]
    fn ids(&self) -> Vec<u32> {
        self.inner.ids.iter().map(|a| a.id.value()).collect()
    }

    #[getter]
    fn fingerprints(&self) -> Vec<Fingerprint> {
        self.inner.fingerprints.iter().map(Into::into).collect()
    }

    #[getter]
    fn events(&self) -> Vec<Event> {
        self.inner
            .events
            .iter()
            .map(|e| Event {
                time_us: e.time_us,
                id: e.id.value(),
                kind: format!("{:?}", e.kind),
                class_: format!("{:?}", e.class),
                source: e.source.as_ref().map(|l| l.as_str().to_string()),
                victim: e.evidence.victim.as_ref().map(|l| l.as_str().to_string()),
                note: e.evidence.note.clone(),
            })
            .collect()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    fn events_jsonl(&self) -> String {
        detector::events_jsonl(&self.inner.events)
    }

    /// Per-batch `(elapsed_us, accumulated_offset_us, skew_estimate)` for one identifier.
    fn series(&self, id: u32) -> PyResult<Vec<(f64, f64, f64)>> {
        let fid = FrameId::new(id).map_err(err)?;
        let a = self
            .inner
            .id(fid)
            .ok_or_else(|| PyKeyError::new_err(format!("identifier {fid} was not monitored")))?;
        Ok(a.series
            .points
            .iter()
            .zip(&a.skew_estimate)
            .map(|(p, s)| (p.elapsed_us, p.accumulated_us, *s))
            .collect())
    }

    fn series_csv(&self) -> String {
        trace_io::write_series_csv(&self.inner.series_rows())
    }

    /// Builds a database from the pre-alarm fingerprints, grouping
    /// identifiers by the scenario's owners or by skew clusters.
    #[pyo3(signature = (scenario=None))]
    fn to_db(&self, scenario: Option<&Scenario>) -> PyResult<FingerprintDb> {
        let owners = scenario.map(|s| owners_of(&s.inner));
        let inner = detector::build_db(&self.inner, owners.as_ref(), None).map_err(err)?;
        Ok(FingerprintDb { inner })
    }
}

/// Runs the detector. Tuning arguments default to the command-line defaults.
#[pyfunction]
#[pyo3(signature = (trace, db=None, *, batch_size=None, kappa=None, gamma=None, lam=None, absolute=false))]
fn analyze(
    py: Python<'_>,
    trace: &Trace,
    db: Option<&FingerprintDb>,
    batch_size: Option<usize>,
    kappa: Option<f64>,
    gamma: Option<f64>,
    lam: Option<f64>,
    absolute: bool,
) -> PyResult<Analysis> {
    let mut cfg = DetectorConfig::default();
    cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
    cfg.kappa = kappa.unwrap_or(cfg.kappa);
    cfg.gamma = gamma.unwrap_or(cfg.gamma);
    cfg.lambda = lam.unwrap_or(cfg.lambda);
    if absolute {
        cfg.accumulation = AccumulationMode::Absolute;
    }
    let inner = py
        .detach(|| detector::analyze(&trace.inner, &cfg, db.map(|d| &d.inner)))
        .map_err(err)?;
    Ok(Analysis { inner })
}

/// Mean offset of a batch of arrivals from the first one's periodic grid.
#[pyfunction]
fn batch_avg_offset(arrivals_us: Vec<f64>, period_us: f64) -> PyResult<f64> {
    fingerprint::batch_avg_offset(&arrivals_us, period_us).map_err(err)
}

/// Recursive least-squares skew estimator through the origin.
#[pyclass(module = "canskew_py")]
struct SkewEstimator {
    inner: fingerprint::EstimatorState,
}

#[pymethods]
impl SkewEstimator {
    #[new]
    #[pyo3(signature = (lam=canskew::fingerprint::DEFAULT_LAMBDA))]
    fn new(lam: f64) -> PyResult<Self> {
        Ok(SkewEstimator {
            inner: fingerprint::EstimatorState::new(lam).map_err(err)?,
        })
    }

    /// Feeds one point and returns the identification error.
    fn update(&mut self, elapsed_us: f64, accumulated_us: f64) -> PyResult<f64> {
        Ok(self.inner.update(elapsed_us, accumulated_us).map_err(err)?.error_us)
    }

    #[getter]
    fn skew(&self) -> f64 {
        self.inner.skew()
    }
}

/// Fingerprint of an accumulated-offset series given as `(elapsed_us, offset_us)` points.
#[pyfunction]
fn fingerprint_series(points: Vec<(f64, f64)>) -> PyResult<Fingerprint> {
    let series = fingerprint::AccumulatedOffsetSeries {
        points: points
            .iter()
            .enumerate()
            .map(|(k, &(elapsed_us, accumulated_us))| fingerprint::SeriesPoint {
                batch_index: k as u64,
                elapsed_us,
                accumulated_us,
                contended: false,
            })
            .collect(),
        id: FrameId::new(0).map_err(err)?,
    };
    let cfg: FingerprintConfig = DetectorConfig::default().fingerprint_config();
    Ok((&fingerprint::fingerprint_of(&series, &cfg).map_err(err)?).into())
}

#[pymodule]
fn canskew_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<Trace>()?;
    m.add_class::<Fingerprint>()?;
    m.add_class::<FingerprintDb>()?;
    m.add_class::<Event>()?;
    m.add_class::<Analysis>()?;
    m.add_class::<SkewEstimator>()?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(batch_avg_offset, m)?)?;
    m.add_function(wrap_pyfunction!(fingerprint_series, m)?)?;
    Ok(())
}
