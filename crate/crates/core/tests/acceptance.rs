//! End-to-end acceptance suite. Runs without the test harness so every
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use canskew::bus::{self, BusSpec, ClockModel, EcuSpec, Scenario, ScheduleEntry};
use canskew::detector::{self, AttackClass, DetectorConfig};
use canskew::fingerprint::{
    batch_avg_offset, cluster, combine, fingerprint_of, DbEntry, EstimatorState, Fingerprint,
    FingerprintDb, FingerprintKey,
};
use canskew::frame::{CanFrame, EcuLabel, FrameId, TimestampedFrame};
use canskew::scenario_file;
use canskew::trace_io::{parse_trace, write_trace, TraceDocument, TraceMetadata};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One batch step of the half-overlapping batches, in µs.
const BATCH_US: f64 = 500_000.0;
const MAX_LATENCY_BATCHES: f64 = 5.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn bundled(name: &str) -> Scenario {
    scenario_file::bundled(name).unwrap().unwrap()
}

fn id(v: u32) -> FrameId {
    FrameId::new(v).unwrap()
}

fn label(s: &str) -> EcuLabel {
    EcuLabel::new(s).unwrap()
}

fn owners(s: &Scenario) -> BTreeMap<FrameId, EcuLabel> {
    s.ecus
        .iter()
        .flat_map(|e| e.ids().map(move |i| (i, e.label.clone())))
        .collect()
}

/// Database trained on an independent attack-free run. With `attacker`
/// set, node X is on the bus during training with that skew.
fn train(seed: u64, attacker: Option<f64>) -> FingerprintDb {
    let mut s = bundled("paper-normal");
    s.seed = seed + 1000;
    if let Some(skew) = attacker {
        s.ecus.push(EcuSpec::normal(
            label("X"),
            ClockModel::new(skew, 5.0, 0.0).unwrap(),
            vec![ScheduleEntry::periodic(id(0xA), 50.0, 47.0)],
        ));
    }
    let out = bus::run(&s).unwrap();
    let a = detector::analyze(&out.trace, &DetectorConfig::default(), None).unwrap();
    detector::build_db(&a, Some(&owners(&s)), None).unwrap()
}

fn r_squared(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

fn attack_free_bus() -> Outcome {
    let clock = Instant::now();
    let s = bundled("paper-normal");
    let out = bus::run(&s).unwrap();
    let a = detector::analyze(&out.trace, &DetectorConfig::default(), None).unwrap();
    let elapsed = clock.elapsed().as_secs_f64();

    let r2: Vec<f64> = a
        .ids
        .iter()
        .map(|ida| {
            let pts: Vec<(f64, f64)> = ida.series.points.iter().map(|p| (p.elapsed_us, p.accumulated_us)).collect();
            r_squared(&pts)
        })
        .collect();
    let min_r2 = r2.iter().copied().fold(1.0, f64::min);

    let groups = cluster(&a.fingerprints);
    let truth = [("A", 130.0), ("B", -80.0), ("C", 45.0)];
    let mut matched = 0;
    let mut notes = Vec::new();
    for g in &groups {
        let members: Vec<&Fingerprint> = g.iter().map(|&i| &a.fingerprints[i]).collect();
        let ids: Vec<u32> = members
            .iter()
            .map(|f| match f.key {
                FingerprintKey::Id(i) => i.value(),
                _ => 0,
            })
            .collect();
        let owner = s.owner_of(id(ids[0])).unwrap().as_str().to_string();
        let same_owner = ids.iter().all(|&i| s.owner_of(id(i)).map(|l| l.as_str()) == Some(owner.as_str()));
        let fp = combine(label(&owner), &members).unwrap();
        let want = truth.iter().find(|(l, _)| *l == owner).unwrap().1;
        let ok = same_owner && ids.len() == 3 && (fp.skew_us_per_s - want).abs() <= fp.ci_us_per_s;
        if ok {
            matched += 1;
        }
        notes.push(format!("{owner} {:.1}±{:.1} (true {want})", fp.skew_us_per_s, fp.ci_us_per_s));
    }
    let pass = a.ids.len() == 9 && min_r2 >= 0.99 && groups.len() == 3 && matched == 3 && elapsed < 5.0;
    outcome(
        pass,
        format!(
            "{} series, min R² {min_r2:.5}, {} clusters [{}], {elapsed:.2} s",
            a.ids.len(),
            groups.len(),
            notes.join(", ")
        ),
    )
}

fn skew_recovery() -> Outcome {
    let cfg = DetectorConfig::default();
    let mut pass = true;
    let mut notes = Vec::new();
    for skew in [-500.0, -100.0, 45.0, 100.0, 500.0] {
        let mut errors: Vec<f64> = (0..100u64)
            .map(|seed| {
                let s = Scenario {
                    bus: BusSpec::default(),
                    ecus: vec![EcuSpec::normal(
                        label("A"),
                        ClockModel::new(skew, 25.0, 0.0).unwrap(),
                        vec![ScheduleEntry::periodic(id(1), 50.0, 0.0)],
                    )],
                    attack: None,
                    // 20 + 199 * 10 messages: exactly 200 batches.
                    duration_ms: 2010.0 * 50.0,
                    seed,
                };
                let out = bus::run(&s).unwrap();
                let a = detector::analyze(&out.trace, &cfg, None).unwrap();
                let ida = &a.ids[0];
                assert_eq!(ida.len(), 200);
                let fp = fingerprint_of(&ida.series, &cfg.fingerprint_config()).unwrap();
                (fp.skew_us_per_s - skew).abs()
            })
            .collect();
        errors.sort_by(f64::total_cmp);
        let median = (errors[49] + errors[50]) / 2.0;
        let limit = if skew == 45.0 { 5.0 } else { 0.05 * f64::abs(skew) };
        pass &= median <= limit;
        notes.push(format!("{skew}: {median:.2} (≤{limit})"));
    }
    outcome(pass, format!("median |error| µs/s {}", notes.join(", ")))
}

struct Window {
    pre: Fingerprint,
    post: Fingerprint,
    late: Fingerprint,
    break_ratio: f64,
}

/// Pre/post slopes of one identifier around an attack and how large the
/// innovation at the break is against pre-attack noise.
fn slopes_around(a: &detector::Analysis, fid: FrameId, start_us: u64, settle_us: u64) -> Window {
    let cfg = DetectorConfig::default().fingerprint_config();
    let ida = a.id(fid).unwrap();
    let batch_span = 2.0 * BATCH_US;
    let starts = |k: usize| ida.batch_end_us(k) as f64 - batch_span;
    let pre_end = (0..ida.len()).find(|&k| ida.batch_end_us(k) >= start_us).unwrap();
    let post_from = (1..ida.len()).find(|&k| starts(k - 1) > settle_us as f64).unwrap();
    let mid = (post_from + ida.len()) / 2;
    let pre = fingerprint_of(&ida.rebased(0..pre_end), &cfg).unwrap();
    let post = fingerprint_of(&ida.rebased(post_from..mid), &cfg).unwrap();
    let late = fingerprint_of(&ida.rebased(mid..ida.len()), &cfg).unwrap();

    let clean: Vec<f64> = ida.innovation[1..pre_end].to_vec();
    let mean = clean.iter().sum::<f64>() / clean.len() as f64;
    let sd = (clean.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (clean.len() - 1) as f64).sqrt();
    let jump = ida.innovation[pre_end..(pre_end + 4).min(ida.len())]
        .iter()
        .map(|v| (v - mean).abs())
        .fold(0.0, f64::max);
    Window {
        pre,
        post,
        late,
        break_ratio: jump / sd,
    }
}

fn differs(a: &Fingerprint, b: &Fingerprint) -> bool {
    (a.skew_us_per_s - b.skew_us_per_s).abs() > a.ci_us_per_s + b.ci_us_per_s
}

fn slope_breaks() -> Outcome {
    let cfg = DetectorConfig::default();
    let mut pass = true;
    let mut notes = Vec::new();
    for (name, victims) in [
        ("paper-dos", (1..=9).collect::<Vec<u32>>()),
        ("paper-fuzzy", vec![5]),
        ("paper-impersonation", vec![1, 2, 3]),
    ] {
        let s = bundled(name);
        let attack = s.attack.clone().unwrap();
        let start = (attack.start_ms * 1000.0) as u64;
        let end = attack.duration_ms.map(|d| ((attack.start_ms + d) * 1000.0) as u64);
        // DoS effects end with the flood; the others persist from the start.
        let settle = end.filter(|_| name == "paper-dos").unwrap_or(start) + 1_000_000;
        let out = bus::run(&s).unwrap();
        let a = detector::analyze(&out.trace, &cfg, None).unwrap();
        let mut worst_ratio = f64::INFINITY;
        let mut shape_ok = true;
        let mut shown = String::new();
        for v in victims {
            let w = slopes_around(&a, id(v), start, settle);
            worst_ratio = worst_ratio.min(w.break_ratio);
            let ok = if name == "paper-dos" {
                !differs(&w.pre, &w.post) && !differs(&w.pre, &w.late)
            } else {
                differs(&w.pre, &w.post) && differs(&w.pre, &w.late)
            };
            shape_ok &= ok;
            if shown.is_empty() {
                shown = format!(
                    "{}: pre {:.1} post {:.1}/{:.1}",
                    id(v),
                    w.pre.skew_us_per_s,
                    w.post.skew_us_per_s,
                    w.late.skew_us_per_s
                );
            }
        }
        let ok = shape_ok && worst_ratio >= 5.0;
        pass &= ok;
        notes.push(format!("{name} {} ({shown}, break ≥{worst_ratio:.0}σ)", if ok { "ok" } else { "BAD" }));
    }
    outcome(pass, notes.join("; "))
}

/// First event of `class` relative to the attack start, in batches.
fn latency(events: &[detector::DetectionEvent], class: AttackClass, start_us: u64) -> Option<f64> {
    events
        .iter()
        .filter(|e| e.class == class && e.time_us >= start_us)
        .map(|e| (e.time_us - start_us) as f64 / BATCH_US)
        .fold(None, |m: Option<f64>, l| Some(m.map_or(l, |m| m.min(l))))
}

fn detection() -> Outcome {
    let cfg = DetectorConfig::default();
    let dbs: Vec<FingerprintDb> = (0..100).map(|seed| train(seed, None)).collect();
    let mut pass = true;
    let mut notes = Vec::new();
    let cases: [(&str, AttackClass, Option<f64>); 4] = [
        ("paper-dos", AttackClass::Dos, None),
        ("paper-fuzzy", AttackClass::Fuzzy, None),
        ("paper-impersonation", AttackClass::Impersonation, Some(100.0)),
        ("paper-impersonation", AttackClass::Impersonation, Some(200.0)),
    ];
    for (name, class, gap) in cases {
        let mut hits = 0;
        let mut early = 0;
        for seed in 0..100u64 {
            let mut s = bundled(name);
            s.seed = seed;
            if let Some(g) = gap {
                s.attack.as_mut().unwrap().attacker_clock.skew_ppm = 130.0 + g;
            }
            let start = (s.attack.as_ref().unwrap().start_ms * 1000.0) as u64;
            let out = bus::run(&s).unwrap();
            let a = detector::analyze(&out.trace, &cfg, Some(&dbs[seed as usize])).unwrap();
            early += a.events.iter().filter(|e| e.time_us < start).count();
            if latency(&a.events, class, start).is_some_and(|l| l <= MAX_LATENCY_BATCHES) {
                hits += 1;
            }
        }
        let ok = hits >= 95 && early == 0;
        pass &= ok;
        let what = gap.map_or(name.to_string(), |g| format!("{name}@{g}ppm"));
        notes.push(format!("{what} {hits}/100"));
    }
    outcome(pass, format!("in time and correctly classified: {}", notes.join(", ")))
}

fn false_alarms() -> Outcome {
    let cfg = DetectorConfig::default();
    let mut total = 0;
    let mut batches = usize::MAX;
    for seed in 0..20u64 {
        let mut s = bundled("paper-normal");
        s.seed = seed;
        // 20 + 1009 * 10 messages per identifier.
        s.duration_ms = 505_500.0;
        let out = bus::run(&s).unwrap();
        let a = detector::analyze(&out.trace, &cfg, Some(&train(seed, None))).unwrap();
        total += a.events.len();
        batches = batches.min(a.ids.iter().map(|i| i.len()).min().unwrap_or(0));
    }
    outcome(
        total == 0 && batches >= 1000,
        format!("{total} events over 20 seeds, ≥{batches} batches per id"),
    )
}

fn localization() -> Outcome {
    let cfg = DetectorConfig::default();
    let mut named = 0;
    let mut unnamed = 0;
    let runs = 100u64;
    for seed in 0..runs {
        let mut s = bundled("paper-impersonation");
        s.seed = seed;
        let skew = 230.0;
        s.attack.as_mut().unwrap().attacker_clock.skew_ppm = skew;
        let out = bus::run(&s).unwrap();

        let registered = train(seed, Some(skew));
        let a = detector::analyze(&out.trace, &cfg, Some(&registered)).unwrap();
        let imp: Vec<_> = a.events.iter().filter(|e| e.class == AttackClass::Impersonation).collect();
        let right = imp.iter().any(|e| e.source.as_ref().map(|l| l.as_str()) == Some("X"));
        let wrong = a.events.iter().any(|e| e.source.as_ref().is_some_and(|l| l.as_str() != "X"));
        if right && !wrong {
            named += 1;
        }

        let a = detector::analyze(&out.trace, &cfg, Some(&train(seed, None))).unwrap();
        let detected = a.events.iter().any(|e| e.class == AttackClass::Impersonation);
        if detected && a.events.iter().all(|e| e.source.is_none()) {
            unnamed += 1;
        }
    }
    outcome(
        named >= 95 && unnamed == runs,
        format!("registered attacker named {named}/{runs}, unregistered left unknown {unnamed}/{runs} (gap 100 ppm)"),
    )
}

fn random_trace(rng: &mut ChaCha8Rng) -> TraceDocument {
    let n = rng.random_range(0..60);
    let mut t = 0u64;
    let entries = (0..n)
        .map(|_| {
            t += rng.random_range(1..5_000_000);
            let ext = rng.random_bool(0.5);
            let v = if ext { rng.random_range(0..=0x1FFF_FFFF) } else { rng.random_range(0..=0x7FF) };
            let dlc = rng.random_range(0..=8);
            let data = (0..dlc).map(|_| rng.random::<u8>()).collect();
            TimestampedFrame {
                arrival_us: t,
                frame: CanFrame::new(id(v), ext, data).unwrap(),
            }
        })
        .collect();
    let hex = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| format!("{:x}", rng.random_range(0..16u8))).collect::<String>();
    let metadata = TraceMetadata {
        scenario_hash: rng.random_bool(0.5).then(|| hex(rng, 64)),
        seed: rng.random_bool(0.5).then(|| rng.random()),
        bitrate_bps: rng.random_bool(0.5).then(|| rng.random()),
        frame_bits: rng.random_bool(0.5).then(|| rng.random_range(1.0..1e4)),
        warnings: (0..rng.random_range(0..3))
            .map(|i| format!("saturation {i}: {} queued", rng.random::<u16>()))
            .collect(),
    };
    TraceDocument { metadata, entries }
}

fn random_db(rng: &mut ChaCha8Rng) -> FingerprintDb {
    let entries = (0..rng.random_range(0..12))
        .map(|i| {
            let key = if rng.random_bool(0.5) {
                FingerprintKey::Id(id(rng.random_range(0..=0x1FFF_FFFF)))
            } else {
                FingerprintKey::Ecu(label(&format!("E{i}")))
            };
            DbEntry {
                fingerprint: Fingerprint {
                    key,
                    skew_us_per_s: rng.random_range(-1e4..1e4),
                    ci_us_per_s: rng.random_range(0.0..100.0),
                    n_batches: rng.random_range(0..100_000),
                },
                period_us: rng.random_bool(0.5).then(|| rng.random_range(1.0..1e7)),
                members: (0..rng.random_range(0..4)).map(|_| id(rng.random_range(0..=0x1FFF_FFFF))).collect(),
                trace: rng.random_bool(0.5).then(|| format!("{:016x}", rng.random::<u64>())),
            }
        })
        .collect();
    FingerprintDb { entries }
}

fn oracles() -> Outcome {
    let mut failures = Vec::new();

    // Hand-expanded (1/(N-1)) * sum_i [a_i - (a_0 + i T)].
    let crafted: [(&[f64], f64, f64); 5] = [
        (&[0.0, 50_000.0, 100_000.0], 50_000.0, 0.0),
        (&[0.0, 50_005.0, 100_010.0], 50_000.0, (5.0 + 10.0) / 2.0),
        (&[0.0, 49_995.0, 99_990.0], 50_000.0, (-5.0 + -10.0) / 2.0),
        (&[1000.0, 11_003.0, 20_999.0, 31_004.0], 10_000.0, (3.0 + -1.0 + 4.0) / 3.0),
        (&[7.0, 107.0], 100.0, 0.0),
    ];
    for (arrivals, period, want) in crafted {
        let got = batch_avg_offset(arrivals, period).unwrap();
        if got != want {
            failures.push(format!("avg offset {arrivals:?}: {got} != {want}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(10..300);
        let slope = rng.random_range(-600.0..600.0);
        let mut t = 0.0;
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                t += rng.random_range(100_000.0..900_000.0);
                (t, slope * t * 1e-6 + rng.random_range(-50.0..50.0))
            })
            .collect();
        let mut est = EstimatorState::new(1.0).unwrap();
        for &(t, y) in &pts {
            est.update(t, y).unwrap();
        }
        let (sty, stt) = pts
            .iter()
            .fold((0.0, 0.0), |(a, b), (t, y)| (a + t * 1e-6 * y, b + (t * 1e-6).powi(2)));
        let ols = sty / stt;
        worst = worst.max((est.skew() - ols).abs() / ols.abs().max(1e-12));
    }
    if worst > 1e-9 {
        failures.push(format!("RLS vs OLS relative gap {worst:e}"));
    }

    let mut bad_docs = 0;
    for _ in 0..1000 {
        let doc = random_trace(&mut rng);
        let text = write_trace(&doc);
        match parse_trace(&text) {
            Ok(back) if back == doc && write_trace(&back) == text => {}
            _ => bad_docs += 1,
        }
        let db = random_db(&mut rng);
        let text = db.write();
        match FingerprintDb::parse(&text) {
            Ok(back) if back == db && back.write() == text => {}
            _ => bad_docs += 1,
        }
    }
    if bad_docs > 0 {
        failures.push(format!("{bad_docs} documents failed to round-trip"));
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!("avg-offset exact on 5 inputs, RLS/OLS max rel gap {worst:.1e}, 1000 traces + 1000 dbs round-trip")
    } else {
        failures.join("; ")
    };
    outcome(pass, detail)
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn run_cli(args: &[String]) -> (i32, Vec<u8>, Vec<u8>) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["canskew".to_string()];
    full.extend_from_slice(args);
    let code = canskew::cli::run(full, &mut out, &mut err);
    (code, out, err)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    let mut commands: Vec<Vec<String>> = Vec::new();
    let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<String>>();
    let names = ["paper-normal", "paper-dos", "paper-fuzzy", "paper-impersonation"];
    for n in names {
        commands.push(v(&["simulate", "--scenario", n, "--seed", "5", "--out", &p("sim")]));
    }
    commands.push(v(&["fingerprint", "--trace", &p("sim/paper-normal.log"), "--out", &p("fp")]));
    for n in names {
        commands.push(v(&[
            "detect",
            "--trace",
            &p(&format!("sim/{n}.log")),
            "--db",
            &p("fp/fingerprints.db"),
            "--out",
            &p(&format!("det/{n}")),
        ]));
    }
    let mut report = v(&["report", "--out", &p("report")]);
    for n in names {
        report.push("--series".into());
        report.push(p(&format!("det/{n}/series.csv")));
    }
    commands.push(report);

    let mut outputs = Vec::new();
    for round in 0..2 {
        let mut streams = Vec::new();
        for c in &commands {
            let (code, out, err) = run_cli(c);
            if code != 0 {
                return outcome(false, format!("{:?} exited {code}: {}", c, String::from_utf8_lossy(&err)));
            }
            streams.push((out, err));
        }
        outputs.push((snapshot(root), streams));
        if round == 0 {
            // Rebuild from nothing on the second round.
            for sub in ["sim", "fp", "det", "report"] {
                std::fs::remove_dir_all(root.join(sub)).unwrap();
            }
        }
    }
    let same_files = outputs[0].0 == outputs[1].0;
    let same_streams = outputs[0].1 == outputs[1].1;
    outcome(
        same_files && same_streams && outputs[0].0.len() >= 18,
        format!(
            "{} commands, {} output files byte-identical: {}, console output identical: {}",
            commands.len(),
            outputs[0].0.len(),
            same_files,
            same_streams
        ),
    )
}

fn main() {
    // `cargo test -- <filter>` style arguments are accepted and ignored.
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("accumulated offsets of the attack-free bus", attack_free_bus),
        ("skew recovery", skew_recovery),
        ("slope breaks under attack", slope_breaks),
        ("detection", detection),
        ("false alarms", false_alarms),
        ("localization", localization),
        ("oracle equivalences", oracles),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let clock = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "{} [{}] {name}: {} ({:.1} s)",
            if result.pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            clock.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
