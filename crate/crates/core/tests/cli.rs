use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn canskew(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canskew")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = canskew(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, name: &str) -> String {
    ok(&["simulate", "--scenario", name, "--out", s(dir)]);
    dir.join(format!("{name}.log")).to_string_lossy().into_owned()
}

#[test]
fn full_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    let normal = simulate(&sim, "paper-normal");
    let fp_dir = tmp.path().join("fp");
    let table = ok(&["fingerprint", "--trace", &normal, "--scenario", "paper-normal", "--out", s(&fp_dir)]);
    assert!(table.contains("ecu:A") && table.contains("id:00000009"));
    let db = fp_dir.join("fingerprints.db");

    let mut series = Vec::new();
    for (name, class) in [
        ("paper-normal", None),
        ("paper-dos", Some("\"class\":\"Dos\"")),
        ("paper-fuzzy", Some("\"class\":\"Fuzzy\"")),
        ("paper-impersonation", Some("\"class\":\"Impersonation\"")),
    ] {
        let trace = simulate(&sim, name);
        let out = tmp.path().join("det").join(name);
        let summary = ok(&["detect", "--trace", &trace, "--db", s(&db), "--out", s(&out)]);
        let events = fs::read_to_string(out.join("events.jsonl")).unwrap();
        match class {
            None => {
                assert!(events.is_empty(), "{events}");
                assert!(summary.contains("no attack detected"));
            }
            Some(c) => assert!(events.contains(c), "{name}: {events}"),
        }
        assert_eq!(fs::read_to_string(out.join("summary.txt")).unwrap(), summary);
        series.push(out.join("series.csv"));
    }
    let imp = fs::read_to_string(tmp.path().join("det/paper-impersonation/summary.txt")).unwrap();
    assert!(imp.contains("victim A"), "{imp}");

    let report = tmp.path().join("report");
    let mut args = vec!["report".to_string(), "--out".into(), s(&report).into()];
    for p in &series {
        args.push("--series".into());
        args.push(s(p).into());
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&args);
    let mut files: Vec<String> = fs::read_dir(&report)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert_eq!(
        files,
        [
            "paper-dos.figure.csv",
            "paper-fuzzy.figure.csv",
            "paper-impersonation.figure.csv",
            "paper-normal.figure.csv"
        ]
    );
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &Path| {
        let trace = simulate(dir, "paper-fuzzy");
        ok(&["fingerprint", "--trace", &trace, "--out", s(&dir.join("fp"))]);
        let db = dir.join("fp/fingerprints.db");
        ok(&["detect", "--trace", &trace, "--db", s(&db), "--out", s(&dir.join("det"))]);
        ok(&["report", "--series", s(&dir.join("det/series.csv")), "--out", s(&dir.join("rep"))]);
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a);
    run(&b);
    for f in [
        "paper-fuzzy.log",
        "fp/fingerprints.db",
        "det/events.jsonl",
        "det/series.csv",
        "rep/det.figure.csv",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_overrides_scenario_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = tmp.path().join("1");
    let d2 = tmp.path().join("2");
    ok(&["simulate", "--scenario", "paper-normal", "--seed", "7", "--out", s(&d1)]);
    ok(&["simulate", "--scenario", "paper-normal", "--seed", "8", "--out", s(&d2)]);
    let a = fs::read_to_string(d1.join("paper-normal.log")).unwrap();
    let b = fs::read_to_string(d2.join("paper-normal.log")).unwrap();
    assert!(a.contains("# seed: 7"));
    assert_ne!(a, b);
}

#[test]
fn short_trace_gives_empty_database() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = tmp.path().join("short.toml");
    let text = scenario_text()
        .replace("duration_ms = 60000", "duration_ms = 600")
        .replace("name = \"paper-normal\"", "name = \"short\"");
    fs::write(&scenario, text).unwrap();
    ok(&["simulate", "--scenario", s(&scenario), "--out", s(tmp.path())]);
    let trace = tmp.path().join("short.log").to_string_lossy().into_owned();
    let out = canskew(&["fingerprint", "--trace", &trace, "--out", s(tmp.path())]);
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("insufficient data for every identifier"), "{err}");
    let db = fs::read_to_string(tmp.path().join("fingerprints.db")).unwrap();
    assert_eq!(db.lines().filter(|l| !l.starts_with('#')).count(), 0);
}

fn scenario_text() -> String {
    canskew::scenario_file::bundled_source("paper-normal").unwrap().to_string()
}

#[test]
fn exit_codes_distinguish_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| canskew(args).status.code().unwrap();

    assert_eq!(code(&["bogus"]), 2);
    assert_eq!(code(&["simulate", "--out", s(tmp.path())]), 2);

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "duration_ms = -1\n").unwrap();
    let out = canskew(&["simulate", "--scenario", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));

    assert_eq!(code(&["simulate", "--scenario", "no-such", "--out", s(tmp.path())]), 4);

    let trace = simulate(tmp.path(), "paper-normal");
    let out = canskew(&["detect", "--trace", &trace, "--db", "missing.db", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("canskew fingerprint"));

    assert_eq!(code(&["report", "--out", s(tmp.path())]), 4);
    let csv = tmp.path().join("broken.csv");
    fs::write(&csv, "id,batch_index\n1,2\n").unwrap();
    let out = canskew(&["report", "--series", s(&csv), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.csv"));

    let garbled = tmp.path().join("garbled.log");
    fs::write(&garbled, "(0.1) can0 XYZ#00\n").unwrap();
    assert_eq!(code(&["fingerprint", "--trace", s(&garbled), "--out", s(tmp.path())]), 3);
    assert_eq!(code(&["fingerprint", "--trace", "nowhere.log", "--out", s(tmp.path())]), 4);
    assert_eq!(
        code(&["fingerprint", "--trace", &trace, "--batch-size", "7", "--out", s(tmp.path())]),
        3
    );
}
