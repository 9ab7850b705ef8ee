use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gemmsca(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gemmsca"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run gemmsca")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn analyze_json(args: &[&str], dir: &Path) -> Value {
    let mut full = vec!["analyze"];
    full.extend_from_slice(args);
    serde_json::from_str(&ok(&gemmsca(&full, dir))).unwrap()
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        [
            "synth", "--id", "128", "--kernel", "3", "--stride", "2", "--pad", "1", "--seed", "7",
            "--jitter", "0.02", "--dup", "0.3", "--out", out,
        ]
    };
    ok(&gemmsca(&args("a.csv"), dir.path()));
    ok(&gemmsca(&args("b.csv"), dir.path()));
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let side: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a.json")).unwrap()).unwrap();
    assert_eq!(side["id"], 128);
    assert_eq!(side["dims"]["m"], 4096);
    assert_eq!(side["dims"]["k"], 27);
    assert_eq!(side["dims"]["n"], 64);
}

#[test]
fn synth_then_analyze_224() {
    let dir = tempfile::tempdir().unwrap();
    ok(&gemmsca(
        &[
            "synth", "--id", "224", "--kernel", "7", "--stride", "2", "--pad", "3", "--out",
            "t.csv",
        ],
        dir.path(),
    ));
    let r = analyze_json(
        &["--trace", "t.csv", "--stride", "2", "--pad", "3"],
        dir.path(),
    );
    assert_eq!(r["estimates"]["id_rounded"], 224);
    assert_eq!(r["estimates"]["m"], 12544.0);
    assert_eq!(r["estimates"]["n"], 64);
    // defaults are echoed
    let c = &r["config"];
    assert_eq!(c["constants"]["p"], 320);
    assert_eq!(c["probe"]["hit_threshold"], 100);
    assert_eq!(c["filter"]["duplicate_window"], 10);
    assert_eq!(c["geometry"]["in_channels"], 3);
    assert_eq!(c["l1_average_source"], "executor");
}

#[test]
fn dummy_rows_mislead_analysis() {
    let dir = tempfile::tempdir().unwrap();
    ok(&gemmsca(
        &[
            "synth",
            "--id",
            "128",
            "--kernel",
            "3",
            "--stride",
            "2",
            "--pad",
            "1",
            "--dummy-rows",
            "1000",
            "--out",
            "d.csv",
        ],
        dir.path(),
    ));
    let r = analyze_json(
        &["--trace", "d.csv", "--stride", "2", "--pad", "1"],
        dir.path(),
    );
    let id = r["estimates"]["id_rounded"].as_i64().unwrap();
    assert_ne!(id, 128);
    assert_eq!(id, 143);
}

#[test]
fn analyze_props_replays_table() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("p.json"),
        r#"{"L1": {"N": 1, "ST": 8163, "AT": 17665.5},
            "L2": {"N": 40, "ST": 124, "AT": 208.3},
            "L3": {"N": 6, "ST": 13, "AT": 38.25}}"#,
    )
    .unwrap();
    let r = analyze_json(
        &["--props", "p.json", "--stride", "2", "--pad", "3"],
        dir.path(),
    );
    let e = &r["estimates"];
    assert!((e["m"].as_f64().unwrap() - 12541.0).abs() < 0.1);
    assert!((e["k"].as_f64().unwrap() - 147.9).abs() < 0.1);
    assert_eq!(e["n"], 64);
    assert_eq!(e["id_rounded"], 224);
    assert_eq!(r["config"]["l1_average_source"], "provided");

    let text = ok(&gemmsca(
        &[
            "analyze", "--props", "p.json", "--stride", "2", "--pad", "3", "--format", "text",
        ],
        dir.path(),
    ));
    assert!(text.contains("-> 224"), "{text}");
}

#[test]
fn analyze_writes_out_file() {
    let dir = tempfile::tempdir().unwrap();
    ok(&gemmsca(
        &[
            "synth", "--id", "96", "--kernel", "3", "--stride", "1", "--pad", "1", "--out", "t.csv",
        ],
        dir.path(),
    ));
    let stdout = ok(&gemmsca(
        &[
            "analyze", "--trace", "t.csv", "--stride", "1", "--pad", "1", "--out", "r.json",
        ],
        dir.path(),
    ));
    assert!(stdout.is_empty());
    let r: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r["estimates"]["id_rounded"], 96);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.csv"), "").unwrap();
    let out = gemmsca(
        &[
            "analyze",
            "--trace",
            "empty.csv",
            "--stride",
            "1",
            "--pad",
            "0",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[extract]"));

    std::fs::write(dir.path().join("bad.csv"), "5,itcopy,38\n4,oncopy,40\n").unwrap();
    let out = gemmsca(
        &[
            "analyze", "--trace", "bad.csv", "--stride", "1", "--pad", "0",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-monotone slot at row 2"));

    let out = gemmsca(
        &[
            "synth", "--id", "2", "--kernel", "7", "--stride", "2", "--pad", "0", "--out", "x.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate convolution"));

    let out = gemmsca(&["analyze", "--stride", "1", "--pad", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = gemmsca(
        &[
            "analyze",
            "--trace",
            "missing.csv",
            "--stride",
            "1",
            "--pad",
            "0",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_for_every_command() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in [
        &["--help"][..],
        &["synth", "--help"],
        &["analyze", "--help"],
        &["report", "--help"],
    ] {
        let text = ok(&gemmsca(cmd, dir.path()));
        assert!(text.contains("Usage"), "{cmd:?}");
    }
}

fn synth_victims(dir: &Path, extra: &[&str]) {
    for (id, kernel, stride, pad) in [
        ("32", "3", "1", "1"),
        ("64", "4", "1", "1"),
        ("128", "3", "2", "1"),
        ("224", "7", "2", "3"),
    ] {
        let out = format!("runs/t{id}.csv");
        let mut args = vec![
            "synth", "--id", id, "--kernel", kernel, "--stride", stride, "--pad", pad, "--out",
            &out,
        ];
        args.extend_from_slice(extra);
        ok(&gemmsca(&args, dir));
    }
}

#[test]
fn report_on_clean_traces() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("runs")).unwrap();
    synth_victims(dir.path(), &[]);
    let table = ok(&gemmsca(
        &["report", "--glob", "runs/*.csv", "--json", "report.json"],
        dir.path(),
    ));
    assert!(table.contains("4/4"), "{table}");
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 6);
    // rows come back in path order
    assert!(lines[1].starts_with("runs/t128.csv"));
    assert!(lines[4].starts_with("runs/t64.csv"));

    let r: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(r["hits"], 4);
    assert_eq!(r["hit_rate"], 1.0);
    assert_eq!(r["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn report_with_separate_truth_dir_and_missing_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("runs")).unwrap();
    synth_victims(
        dir.path(),
        &["--seed", "3", "--jitter", "0.02", "--dup", "0.3"],
    );
    std::fs::create_dir(dir.path().join("truth")).unwrap();
    for id in ["32", "64", "128"] {
        std::fs::rename(
            dir.path().join(format!("runs/t{id}.json")),
            dir.path().join(format!("truth/t{id}.json")),
        )
        .unwrap();
    }
    let table = ok(&gemmsca(
        &[
            "report",
            "--glob",
            "runs/*.csv",
            "--truth",
            "truth",
            "--json",
            "r.json",
        ],
        dir.path(),
    ));
    let r: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r["scored"], 3, "{table}");
    assert_eq!(r["hits"], 3, "{table}");
    let flagged: Vec<&Value> = r["rows"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|row| row["note"].is_string())
        .collect();
    assert_eq!(flagged.len(), 1);
    assert!(flagged[0]["trace"].as_str().unwrap().ends_with("t224.csv"));
}

#[test]
fn report_with_no_matches() {
    let dir = tempfile::tempdir().unwrap();
    let out = gemmsca(&["report", "--glob", "nothing/*.csv"], dir.path());
    let table = ok(&out);
    assert_eq!(table.lines().count(), 2);
    assert!(table.contains("0/0"));
}

#[test]
fn report_on_noisy_batch() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("runs")).unwrap();
    let victims = [
        ("32", "3", "1", "1"),
        ("64", "4", "1", "1"),
        ("128", "3", "2", "1"),
        ("224", "7", "2", "3"),
    ];
    for seed in 0..100 {
        let (id, kernel, stride, pad) = victims[seed % 4];
        let out = format!("runs/s{seed:03}.csv");
        let seed = seed.to_string();
        ok(&gemmsca(
            &[
                "synth", "--id", id, "--kernel", kernel, "--stride", stride, "--pad", pad,
                "--seed", &seed, "--jitter", "0.02", "--dup", "0.3", "--out", &out,
            ],
            dir.path(),
        ));
    }
    ok(&gemmsca(
        &["report", "--glob", "runs/*.csv", "--json", "r.json"],
        dir.path(),
    ));
    let r: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r["scored"], 100);
    assert!(r["hit_rate"].as_f64().unwrap() >= 0.95, "{r}");
}
