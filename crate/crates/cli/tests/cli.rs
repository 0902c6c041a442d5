use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use purge_cli::pipeline::AccuracyReport;
use serde_json::Value;

const SMALL: &[&str] = &[
    "dataset.points_per_class=60",
    "dataset.test_points_per_class=20",
    "e_prime=4",
    "requests.count=10",
];

fn purge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_purge"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", dir.to_str().unwrap()];
    for s in SMALL.iter().chain(extra) {
        args.push("--set");
        args.push(s);
    }
    purge(&args)
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn train_writes_a_complete_reproducible_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&train(&a, &[]));
    ok(&train(&b, &[]));
    for name in ["system.json", "manifest.json", "ledger.csv", "accuracy.json", "requests.csv", "loss_trace.csv"] {
        assert!(a.join(name).is_file(), "{name} missing");
    }
    assert!(a.join("checkpoints").is_dir());
    for name in ["manifest.json", "accuracy.json", "system.json", "ledger.csv", "requests.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }
}

#[test]
fn teacher_requests_with_one_teacher_per_student_touch_one_student() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    ok(&train(
        &run,
        &[
            "teacher.members=4",
            "student.constituents=4",
            r#"requests.mix={"student":0,"teacher":1,"aligned":0,"misaligned":0}"#,
        ],
    ));
    ok(&purge(&["unlearn", "--system", run.to_str().unwrap(), "--verify"]));
    let reports = jsonl(&run.join("reports.jsonl"));
    assert_eq!(reports.len(), 10);
    for r in &reports {
        assert_eq!(r["target"], "teacher");
        assert_eq!(r["affected_student_constituents"].as_array().unwrap().len(), 1, "{r}");
        assert_eq!(r["affected_teacher_members"].as_array().unwrap().len(), 1, "{r}");
    }
    let verdicts = jsonl(&run.join("verification.jsonl"));
    assert_eq!(verdicts.len(), 10);
    assert!(verdicts.iter().all(|v| v["pass"] == true));
}

#[test]
fn mixed_stream_verifies_persists_and_replays() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let copy = tmp.path().join("copy");
    ok(&train(&run, &["requests.count=20"]));
    ok(&train(&copy, &["requests.count=20"]));
    let before = fs::read(run.join("system.json")).unwrap();
    ok(&purge(&["unlearn", "--system", run.to_str().unwrap(), "--verify"]));
    assert_ne!(before, fs::read(run.join("system.json")).unwrap());
    let ledger = fs::read_to_string(run.join("ledger.csv")).unwrap();
    assert!(ledger.contains("student_retrain"), "{ledger}");
    let verdicts = jsonl(&run.join("verification.jsonl"));
    assert_eq!(verdicts.len(), 20);
    assert!(verdicts.iter().all(|v| v["pass"] == true));

    ok(&purge(&["unlearn", "--system", copy.to_str().unwrap(), "--prune"]));
    let strip = |mut reports: Vec<Value>| {
        for r in &mut reports {
            r.as_object_mut().unwrap().remove("wall_time_secs");
        }
        reports
    };
    assert_eq!(strip(jsonl(&run.join("reports.jsonl"))), strip(jsonl(&copy.join("reports.jsonl"))));
    assert_eq!(fs::read(run.join("system.json")).unwrap(), fs::read(copy.join("system.json")).unwrap());

    let files = |dir: &Path| walk(&dir.join("checkpoints"));
    assert!(files(&copy) < files(&run), "pruning removed no generations");
}

fn walk(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            if p.is_dir() { walk(&p) } else { 1 }
        })
        .sum()
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let tmp = tempfile::tempdir().unwrap();

    let bad = train(&tmp.path().join("bad"), &["teacher.members=0"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("teacher.members"));

    let run = tmp.path().join("run");
    ok(&train(&run, &[]));
    let reqs = tmp.path().join("missing.csv");
    fs::write(&reqs, "seq,target_kind,point_id\n0,student,999999\n").unwrap();
    let missing = purge(&["unlearn", "--system", run.to_str().unwrap(), "--requests", reqs.to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("line 2"));

    // Perturb a teacher that no request can reach through a replay.
    let path = run.join("system.json");
    let mut system: Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    let p = &mut system["teachers"]["members"][0]["params"][0];
    *p = Value::from(p.as_f64().unwrap() + 1.0);
    fs::write(&path, serde_json::to_vec(&system).unwrap()).unwrap();
    fs::write(&reqs, "seq,target_kind,point_id\n0,student,0\n").unwrap();
    let tampered = purge(&["unlearn", "--system", run.to_str().unwrap(), "--requests", reqs.to_str().unwrap(), "--verify"]);
    assert_eq!(tampered.status.code(), Some(4));
}

#[test]
fn analyze_without_inputs_writes_headers_only() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&purge(&["analyze", "--out", tmp.path().to_str().unwrap()]));
    let acc = fs::read_to_string(tmp.path().join("accuracy_vs_n.csv")).unwrap();
    let speed = fs::read_to_string(tmp.path().join("speedup_vs_n.csv")).unwrap();
    assert_eq!(acc.lines().count(), 1);
    assert_eq!(speed.lines().count(), 1);
    assert!(acc.starts_with("mode,M,N,runs,"));
    assert!(speed.starts_with("M,N,r,"));
}

#[test]
fn analyze_averages_accuracy_over_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let runs: Vec<_> = (1..=3)
        .map(|s| {
            let dir = tmp.path().join(format!("seed{s}"));
            let seed = format!("seed={s}");
            ok(&train(&dir, &[seed.as_str()]));
            dir
        })
        .collect();
    let out = tmp.path().join("table");
    let mut args = vec!["analyze", "--out", out.to_str().unwrap()];
    args.extend(runs.iter().map(|r| r.to_str().unwrap()));
    ok(&purge(&args));

    let acc: Vec<f64> = runs
        .iter()
        .map(|r| {
            let rep: AccuracyReport = serde_json::from_slice(&fs::read(r.join("accuracy.json")).unwrap()).unwrap();
            rep.student_accuracy
        })
        .collect();
    let mean = (acc[0] + acc[1] + acc[2]) / 3.0;
    let var = acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 2.0;

    let mut rdr = csv::Reader::from_path(out.join("accuracy_vs_n.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    let row = &rows[0];
    assert_eq!(&row[0], "purge");
    assert_eq!(&row[3], "3");
    let got_mean: f64 = row[4].parse().unwrap();
    let got_std: f64 = row[5].parse().unwrap();
    assert!((got_mean - mean).abs() < 1e-12, "{got_mean} vs {mean}");
    assert!((got_std - var.sqrt()).abs() < 1e-12, "{got_std} vs {}", var.sqrt());
}

#[test]
fn simulation_tables_are_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    ok(&purge(&[
        "simulate",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "teachers=[8]",
        "--set",
        "students=[1,2,4,8]",
        "--set",
        "points=400",
        "--set",
        "requests=40",
        "--set",
        "e_prime=16",
    ]));
    let mut rdr = csv::Reader::from_path(out.join("simulate.csv")).unwrap();
    let mut mean_steps = std::collections::BTreeMap::new();
    let mut ratio = std::collections::BTreeMap::new();
    for rec in rdr.deserialize::<std::collections::HashMap<String, String>>() {
        let rec = rec.unwrap();
        let key = (rec["N"].clone(), rec["r"].clone());
        if rec["N"] == "8" {
            assert_eq!(rec["measured_ratio"].parse::<f64>().unwrap(), 8.0);
        }
        ratio.insert(key.clone(), rec["measured_ratio"].parse::<f64>().unwrap());
        mean_steps.insert(key, rec["mean_steps"].parse::<f64>().unwrap());
    }
    assert_eq!(mean_steps.len(), 8);
    for n in ["1", "2", "4", "8"] {
        let r1 = ratio[&(n.to_string(), "1".to_string())];
        let r4 = ratio[&(n.to_string(), "4".to_string())];
        assert!(r4 <= r1, "N={n}: r=4 {r4} vs r=1 {r1}");
    }

    let mut rdr = csv::Reader::from_path(out.join("cumulative.csv")).unwrap();
    let mut running = std::collections::BTreeMap::<(String, String), (u64, usize)>::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let entry = running.entry((rec[1].to_string(), rec[2].to_string())).or_default();
        entry.0 += rec[4].parse::<u64>().unwrap();
        entry.1 += 1;
        assert_eq!(entry.0, rec[5].parse::<u64>().unwrap());
    }
    for (key, (total, count)) in running {
        assert_eq!(count, 40);
        assert!((total as f64 / 40.0 - mean_steps[&key]).abs() < 1e-9, "{key:?}");
    }
}
