use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use serde_json::{json, Value};

fn medfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medfuse")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = medfuse(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn forge(dir: &Path, seed: &str, n: &str) {
    ok(&["forge", "--out", dir.to_str().unwrap(), "--seed", seed, "--subjects", n]);
}

fn csv_rows(bytes: &[u8]) -> Vec<csv::StringRecord> {
    csv::Reader::from_reader(bytes).records().map(Result::unwrap).collect()
}

#[test]
fn forge_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    forge(&a, "9", "12");
    forge(&b, "9", "12");
    for name in ["admissions.csv", "diagnoses_icd.csv", "notes.csv", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let manifest: Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subjects"].as_array().unwrap().len(), 12);
}

#[test]
fn forge_rejects_zero_subjects() {
    let tmp = tempfile::tempdir().unwrap();
    let out = medfuse(&["forge", "--out", tmp.path().to_str().unwrap(), "--subjects", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_subjects"));
}

#[test]
fn load_check_summarizes_and_writes_rejects() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    forge(&data, "4", "10");
    let rejects = tmp.path().join("rejects.csv");
    let out = ok(&["load-check", "--root", data.to_str().unwrap(), "--out", rejects.to_str().unwrap()]);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["subjects"], 10);
    assert_eq!(summary["rejects"], 0);
    assert!(rejects.is_file());

    let missing = medfuse(&["load-check", "--root", tmp.path().join("nope").to_str().unwrap()]);
    assert!(!missing.status.success());
    let no_root = medfuse(&["load-check"]);
    assert!(String::from_utf8_lossy(&no_root.stderr).contains("--root"));
}

#[test]
fn search_by_codes_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    forge(&data, "4", "25");
    let root = data.to_str().unwrap();

    let all = csv_rows(&ok(&["search", "--root", root]).stdout);
    let manifest: Value = serde_json::from_slice(&std::fs::read(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(all.len(), manifest["admissions"].as_array().unwrap().len());

    let by_flag = ok(&["search", "--root", root, "--codes", "427*,I48*"]).stdout;
    let spec = tmp.path().join("spec.json");
    std::fs::write(&spec, json!({ "mode": "icd", "code_patterns": ["427*", "I48*"] }).to_string()).unwrap();
    let out_file = tmp.path().join("cohort.csv");
    ok(&["search", "--root", root, "--config", spec.to_str().unwrap(), "--out", out_file.to_str().unwrap()]);
    assert_eq!(std::fs::read(&out_file).unwrap(), by_flag);
    assert!(csv_rows(&by_flag).iter().all(|r| r[2].starts_with("427") || r[2].starts_with("I48")));

    let bad = medfuse(&["search", "--root", root, "--codes", "4**"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("code_patterns[0]"));
}

#[test]
fn sectionize_writes_sections() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    forge(&data, "4", "8");
    let out = ok(&["sectionize", "--root", data.to_str().unwrap(), "--note-type", "RR"]);
    let mut r = csv::Reader::from_reader(out.stdout.as_slice());
    let headers = r.headers().unwrap().clone();
    let id_col = headers.iter().position(|h| h == "note_id").unwrap();
    let rows: Vec<_> = r.records().map(Result::unwrap).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|row| row[id_col].contains("-RR-")), "{:?}", rows[0]);
}

fn write_run_config(dir: &Path, data: &Path, out: &Path) -> std::path::PathBuf {
    let cfg = json!({
        "dataset_root": data,
        "cohort": { "mode": "all_subjects" },
        "output_dir": out,
        "plan": { "granularity": "day", "percentile_k": 95 },
    });
    let p = dir.join("run.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p
}

#[test]
fn local_run_produces_report_and_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    forge(&data, "4", "10");
    let cfg = write_run_config(tmp.path(), &data, &tmp.path().join("ignored"));
    let out_dir = tmp.path().join("out");
    let out = ok(&["run", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["rows"].as_u64().unwrap() > 0);
    for a in report["artifacts"].as_array().unwrap() {
        assert!(out_dir.join(a["name"].as_str().unwrap()).is_file());
    }
    assert!(!tmp.path().join("ignored").exists());
    assert!(String::from_utf8_lossy(&out.stderr).contains("align"));
}

#[test]
fn remote_run_through_serve() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    forge(&data, "4", "10");
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut server = Command::new(env!("CARGO_BIN_EXE_medfuse"))
        .args(["serve", "--root", data.to_str().unwrap()])
        .env("MEDFUSE_ADDR", &addr)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(server.stderr.take().unwrap()).lines();
    loop {
        let line = lines.next().expect("server exited").unwrap();
        if line.contains("listening") {
            break;
        }
    }
    std::thread::sleep(Duration::from_millis(100));

    let out_dir = tmp.path().join("remote");
    let cfg = write_run_config(tmp.path(), &data, &out_dir);
    let url = format!("http://{addr}");
    let out = medfuse(&["run", "--config", cfg.to_str().unwrap(), "--server", &url]);
    let _ = server.kill();
    let _ = server.wait();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(out_dir.join("integrated.csv").is_file());
    let stages: Vec<&str> = report["stages"].as_array().unwrap().iter().map(|s| s["stage"].as_str().unwrap()).collect();
    // The service reused its preloaded snapshot, so there is no load stage.
    assert!(!stages.contains(&"load"), "{stages:?}");
}

#[test]
fn bad_bind_address_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_medfuse"))
        .arg("serve")
        .env("MEDFUSE_ADDR", "not-an-address")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("MEDFUSE_ADDR"));
}

#[test]
fn unknown_verb_is_a_usage_error() {
    let out = medfuse(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}
