mod common;

use std::fs;
use std::path::Path;

use medfuse_core::forge::{forge_corpus, ForgeConfig};
use medfuse_core::ingest::{load_snapshot, load_snapshot_with, LoadOptions};
use medfuse_core::time::parse_datetime;
use medfuse_core::Error;

use common::corpus200;

fn small_corpus() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    forge_corpus(&ForgeConfig::with_seed(5, 30), dir.path()).unwrap();
    dir
}

/// Rewrites one CSV line (0 = header) of `table`.
fn edit_line(root: &Path, table: &str, line: usize, f: impl FnOnce(&str) -> String) {
    let path = root.join(format!("{table}.csv"));
    let raw = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = raw.lines().map(String::from).collect();
    lines[line] = f(&lines[line]);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn forged_corpus_loads_clean() {
    let c = corpus200();
    assert_eq!(c.snapshot.subject_count(), 200);
    assert!(c.snapshot.rejects().is_empty(), "{:?}", &c.snapshot.rejects()[..1]);
    assert_eq!(c.snapshot.admissions().len(), c.manifest.admissions.len());
    assert!(c.snapshot.overlapping_admissions().is_empty());
    assert_eq!(c.snapshot.version_tag(), "mimic-iv");
}

#[test]
fn inverted_admission_is_rejected_not_fatal() {
    let dir = small_corpus();
    edit_line(dir.path(), "admissions", 3, |l| {
        let mut f: Vec<String> = l.split(',').map(String::from).collect();
        f.swap(2, 3);
        f.join(",")
    });
    let snap = load_snapshot(dir.path(), "t").unwrap();
    let adm: Vec<_> = snap.rejects().iter().filter(|r| r.table == "admissions").collect();
    assert_eq!(adm.len(), 1);
    assert_eq!(adm[0].row, 3);
    assert_eq!(adm[0].column.as_deref(), Some("dischtime"));
    // Rows pointing at the dropped admission are rejected too, never dangling.
    for r in snap.rejects().iter().filter(|r| r.table != "admissions") {
        assert!(r.reason.contains("not in admissions"), "{r:?}");
    }
    for t in snap.tables() {
        if t.column("hadm_id").is_some() {
            for h in t.ints("hadm_id").iter().flatten() {
                assert!(snap.admission(*h).is_some());
            }
        }
    }
}

#[test]
fn reject_report_csv_shape() {
    let dir = small_corpus();
    edit_line(dir.path(), "labevents", 1, |l| l.replace(':', "-"));
    let snap = load_snapshot(dir.path(), "t").unwrap();
    assert_eq!(snap.rejects().len(), 1);
    let out = dir.path().join("rejects.csv");
    snap.write_rejects(&out).unwrap();
    let raw = fs::read_to_string(out).unwrap();
    let mut lines = raw.lines();
    assert_eq!(lines.next(), Some("table,row,column,reason"));
    assert!(lines.next().unwrap().starts_with("labevents,1,charttime,"));
}

#[test]
fn missing_required_table() {
    let dir = small_corpus();
    fs::remove_file(dir.path().join("notes.csv")).unwrap();
    match load_snapshot(dir.path(), "t") {
        Err(Error::MissingTable(t)) => assert_eq!(t, "notes"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn optional_tables_may_be_absent() {
    let dir = small_corpus();
    for t in ["inputevents", "procedureevents", "d_icd_diagnoses"] {
        fs::remove_file(dir.path().join(format!("{t}.csv"))).unwrap();
    }
    let snap = load_snapshot(dir.path(), "t").unwrap();
    assert!(snap.table("inputevents").is_none());
    assert!(snap.table("labevents").is_some());
}

#[test]
fn missing_required_column() {
    let dir = small_corpus();
    edit_line(dir.path(), "labevents", 0, |l| l.replace("charttime", "chart_time"));
    assert!(matches!(
        load_snapshot(dir.path(), "t"),
        Err(Error::MissingColumn { .. })
    ));
}

#[test]
fn reject_threshold_aborts() {
    let dir = small_corpus();
    for line in 1..=3 {
        edit_line(dir.path(), "patients", line, |l| l.replace(",F,", ",X,").replace(",M,", ",X,"));
    }
    let err = load_snapshot_with(dir.path(), "t", &LoadOptions { max_reject_pct: 5.0 }).unwrap_err();
    match err {
        Error::TooManyRejects { table, rejected, .. } => {
            assert_eq!(table, "patients");
            assert_eq!(rejected, 3);
        }
        other => panic!("{other:?}"),
    }
    let ok = load_snapshot_with(dir.path(), "t", &LoadOptions { max_reject_pct: 50.0 }).unwrap();
    assert_eq!(ok.subject_count(), 27);
}

#[test]
fn duplicate_and_foreign_keys() {
    let dir = small_corpus();
    let root = dir.path();
    let raw = fs::read_to_string(root.join("notes.csv")).unwrap();
    let mut r = csv::Reader::from_reader(raw.as_bytes());
    let first: Vec<String> = r.records().next().unwrap().unwrap().iter().map(String::from).collect();
    let mut w = csv::Writer::from_writer(fs::OpenOptions::new().append(true).open(root.join("notes.csv")).unwrap());
    w.write_record(&first).unwrap();
    let mut stranger = first.clone();
    stranger[0] = "99999999-DS-1".into();
    stranger[1] = "99999999".into();
    w.write_record(&stranger).unwrap();
    w.flush().unwrap();
    let snap = load_snapshot_with(root, "t", &LoadOptions { max_reject_pct: 100.0 }).unwrap();
    let reasons: Vec<&str> = snap.rejects().iter().map(|r| r.reason.as_str()).collect();
    assert!(reasons.iter().any(|r| r.contains("duplicate key")), "{reasons:?}");
    assert!(reasons.iter().any(|r| r.contains("not in patients")), "{reasons:?}");
}

#[test]
fn non_canonical_datetimes_rejected() {
    for bad in ["2150-1-02 00:00:00", "2150-01-02T00:00:00", "2150-01-02 00:00:00.5", "2150-02-30 00:00:00"] {
        assert!(parse_datetime(bad).is_none(), "{bad}");
    }
}

#[test]
fn recorded_hadm_agrees_with_time_lookup() {
    let c = corpus200();
    let snap = &c.snapshot;
    for (table, time) in [
        ("labevents", "charttime"),
        ("notes", "charttime"),
        ("cxr_metadata", "study_time"),
        ("ecg_metadata", "ecg_time"),
        ("echo_metadata", "study_time"),
    ] {
        let t = snap.table(table).unwrap();
        let (s, h, ts) = (t.ints("subject_id"), t.ints("hadm_id"), t.datetimes(time));
        for row in 0..t.len() {
            if let Some(h) = h[row] {
                let found = snap.admission_for(s[row].unwrap(), ts[row].unwrap()).unwrap();
                assert_eq!(found.map(|a| a.hadm_id), Some(h), "{table} row {row}");
            }
        }
    }
}

#[test]
fn missing_hadm_resolved_by_time() {
    let c = corpus200();
    let e = c
        .manifest
        .events_of("cxr")
        .find(|e| e.hadm_id.is_some() && !e.hadm_recorded)
        .unwrap();
    assert_eq!(c.snapshot.anchor(e.subject_id, None, e.time).unwrap(), e.hadm_id);
}

#[test]
fn overlapping_admissions_surface_as_error() {
    let dir = small_corpus();
    let snap0 = load_snapshot(dir.path(), "t").unwrap();
    let subject = snap0
        .admissions()
        .windows(2)
        .find(|w| w[0].subject_id == w[1].subject_id)
        .map(|w| (w[0], w[1]))
        .expect("some subject has two admissions");
    let (first, second) = subject;
    // Stretch the first admission over the second.
    let path = dir.path().join("admissions.csv");
    let raw = fs::read_to_string(&path).unwrap();
    let fixed = raw.replace(
        &format!(
            "{},{},{},{}",
            first.subject_id,
            first.hadm_id,
            medfuse_core::time::format_datetime(&first.admittime),
            medfuse_core::time::format_datetime(&first.dischtime)
        ),
        &format!(
            "{},{},{},{}",
            first.subject_id,
            first.hadm_id,
            medfuse_core::time::format_datetime(&first.admittime),
            medfuse_core::time::format_datetime(&second.dischtime)
        ),
    );
    assert_ne!(raw, fixed);
    fs::write(&path, fixed).unwrap();
    let snap = load_snapshot(dir.path(), "t").unwrap();
    assert_eq!(snap.overlapping_admissions().len(), 1);
    assert!(matches!(
        snap.admission_for(first.subject_id, second.admittime),
        Err(Error::OverlappingAdmissions { .. })
    ));
}
