mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use medfuse_core::assets::{resolve_records, rotation_count, verify_paths, PathConvention};
use medfuse_core::cohort::{search, CohortSpec};
use medfuse_core::ingest::load_snapshot;
use medfuse_core::modality::ViewPosition;
use medfuse_core::{Error, Modality};

use common::corpus200;

fn write(root: &Path, name: &str, body: &str) {
    fs::write(root.join(name), body).unwrap();
}

/// One subject, one admission, one three-image chest X-ray study plus a
/// study the day after discharge.
fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path();
    write(r, "patients.csv", "subject_id,gender,anchor_age\n10313763,F,61\n");
    write(
        r,
        "admissions.csv",
        "subject_id,hadm_id,admittime,dischtime,admission_type\n\
         10313763,21500001,2150-03-01 08:00:00,2150-03-05 12:00:00,URGENT\n",
    );
    write(
        r,
        "diagnoses_icd.csv",
        "subject_id,hadm_id,seq_num,icd_code,icd_version\n10313763,21500001,1,42731,9\n",
    );
    write(r, "labevents.csv", "subject_id,hadm_id,itemid,charttime,valuenum\n");
    write(
        r,
        "notes.csv",
        "note_id,subject_id,hadm_id,note_type,charttime,text\n\
         10313763-RR-37,10313763,,RR,2150-03-02 10:30:00,\"Findings: clear\nImpression: none\"\n",
    );
    write(
        r,
        "cxr_metadata.csv",
        "dicom_id,subject_id,study_id,hadm_id,view_position,study_time\n\
         d1,10313763,51527697,,PA,2150-03-02 10:00:00\n\
         d2,10313763,51527697,,PA,2150-03-02 10:00:00\n\
         d3,10313763,51527697,,LATERAL,2150-03-02 10:00:00\n\
         d4,10313763,51527698,,AP,2150-03-06 09:00:00\n",
    );
    write(
        r,
        "ecg_metadata.csv",
        "study_id,subject_id,hadm_id,ecg_time,lead_count,duration_s\n\
         40000001,10313763,21500001,2150-03-01 09:00:00,12,10\n",
    );
    write(r, "echo_metadata.csv", "study_id,subject_id,hadm_id,study_time\n");
    write(r, "waveform_metadata.csv", "study_id,subject_id,hadm_id,start_time,signal_type\n");
    dir
}

fn all_modalities() -> BTreeSet<Modality> {
    Modality::ALL.into_iter().collect()
}

#[test]
fn appendix_spine_renders_path() {
    let dir = fixture();
    let snap = load_snapshot(dir.path(), "t").unwrap();
    let cohort = search(&snap, &CohortSpec::all_subjects()).unwrap();
    let out = resolve_records(&snap, &cohort, &all_modalities(), None, &PathConvention::default()).unwrap();
    let rec = out
        .anchored
        .iter()
        .find(|r| r.modality == Modality::Cxr && r.dicom_id.as_deref() == Some("d1"))
        .unwrap();
    assert_eq!(rec.subject_id, 10313763);
    assert_eq!(rec.study_id, Some(51527697));
    assert_eq!(rec.hadm_id, Some(21500001));
    assert_eq!(rec.file_path.as_deref(), Some("files/p10/p10313763/s51527697/d1.jpg"));
    assert_eq!(rec.attrs["view_position"], "PA");

    let note = out.anchored.iter().find(|r| r.modality == Modality::Rr).unwrap();
    assert_eq!(note.note_id.as_deref(), Some("10313763-RR-37"));
    assert_eq!(note.hadm_id, Some(21500001));
    assert!(note.file_path.is_none());

    let ecg = out.anchored.iter().find(|r| r.modality == Modality::Ecg).unwrap();
    assert_eq!(ecg.attrs["lead_count"], "12");
    assert_eq!(ecg.attrs["duration_s"], "10");

    assert_eq!(out.unanchored.len(), 1);
    assert_eq!(out.unanchored[0].dicom_id.as_deref(), Some("d4"));
}

#[test]
fn view_filter_applies_to_cxr_only() {
    let dir = fixture();
    let snap = load_snapshot(dir.path(), "t").unwrap();
    let cohort = search(&snap, &CohortSpec::all_subjects()).unwrap();
    let pa: BTreeSet<ViewPosition> = [ViewPosition::Pa].into_iter().collect();
    let out = resolve_records(&snap, &cohort, &all_modalities(), Some(&pa), &PathConvention::default()).unwrap();
    let views: BTreeSet<String> = out
        .anchored
        .iter()
        .chain(&out.unanchored)
        .filter(|r| r.modality == Modality::Cxr)
        .map(|r| r.attrs["view_position"].clone())
        .collect();
    assert_eq!(views, BTreeSet::from(["PA".to_string()]));
    assert!(out.anchored.iter().any(|r| r.modality == Modality::Ecg));
    assert!("OBLIQUE".parse::<ViewPosition>().is_err());
}

#[test]
fn rotation_counts() {
    let dir = fixture();
    let snap = load_snapshot(dir.path(), "t").unwrap();
    let cohort = search(&snap, &CohortSpec::all_subjects()).unwrap();
    let out = resolve_records(&snap, &cohort, &all_modalities(), None, &PathConvention::default()).unwrap();
    let counts = rotation_count(&out.anchored, 10313763, 51527697).unwrap();
    assert_eq!(counts, BTreeMap::from([(ViewPosition::Pa, 2), (ViewPosition::Lateral, 1)]));
    let single = rotation_count(&out.unanchored, 10313763, 51527698).unwrap();
    assert_eq!(single, BTreeMap::from([(ViewPosition::Ap, 1)]));
    assert!(matches!(rotation_count(&out.anchored, 10313763, 1), Err(Error::Unknown { .. })));
}

#[test]
fn forged_records_partition_and_exist() {
    let c = corpus200();
    let cohort = search(&c.snapshot, &CohortSpec::all_subjects()).unwrap();
    let out = resolve_records(&c.snapshot, &cohort, &all_modalities(), None, &PathConvention::default()).unwrap();
    let total_rows: usize = Modality::ALL
        .iter()
        .filter(|m| !m.is_note())
        .map(|m| c.snapshot.table(m.table()).unwrap().len())
        .sum::<usize>()
        + c.snapshot.table("notes").unwrap().len();
    assert_eq!(out.anchored.len() + out.unanchored.len(), total_rows);
    let ids = |v: &[medfuse_core::assets::ModalityRecord]| -> BTreeSet<String> { v.iter().map(|r| r.stable_id()).collect() };
    assert!(ids(&out.anchored).is_disjoint(&ids(&out.unanchored)));

    // Each record's resolved admission is the one it was generated in.
    let truth: BTreeMap<String, Option<i64>> = c
        .manifest
        .events
        .iter()
        .filter(|e| !matches!(e.kind.as_str(), "lab" | "medication" | "procedure"))
        .map(|e| (e.id.clone(), e.hadm_id))
        .collect();
    for r in out.anchored.iter().chain(&out.unanchored) {
        let key = r
            .note_id
            .clone()
            .or_else(|| r.dicom_id.clone())
            .unwrap_or_else(|| r.study_id.unwrap().to_string());
        assert_eq!(truth[&key], r.hadm_id, "{key}");
    }

    let all: Vec<_> = out.anchored.iter().chain(&out.unanchored).cloned().collect();
    let report = verify_paths(&all, c.root());
    assert_eq!(report.missing, 0);
    assert_eq!(report.existing, all.iter().filter(|r| r.file_path.is_some()).count());

    let mut per_view: BTreeMap<String, usize> = BTreeMap::new();
    for e in c.manifest.events_of("cxr") {
        *per_view.entry(e.view_position.clone().unwrap()).or_default() += 1;
    }
    let mut got: BTreeMap<String, usize> = BTreeMap::new();
    let studies: BTreeSet<(i64, i64)> = all
        .iter()
        .filter(|r| r.modality == Modality::Cxr)
        .map(|r| (r.subject_id, r.study_id.unwrap()))
        .collect();
    for (s, st) in studies {
        for (v, n) in rotation_count(&all, s, st).unwrap() {
            *got.entry(format!("{v:?}").to_uppercase()).or_default() += n;
        }
    }
    assert_eq!(got, per_view);
}

#[test]
fn deleted_placeholder_flagged() {
    let c = common::forge(medfuse_core::forge::ForgeConfig::with_seed(9, 10));
    let cohort = search(&c.snapshot, &CohortSpec::all_subjects()).unwrap();
    let out = resolve_records(&c.snapshot, &cohort, &all_modalities(), None, &PathConvention::default()).unwrap();
    let victim = out.anchored.iter().find_map(|r| r.file_path.clone()).unwrap();
    fs::remove_file(c.root().join(&victim)).unwrap();
    let report = verify_paths(&out.anchored, c.root());
    let missing: Vec<&str> = report.checks.iter().filter(|p| !p.exists).map(|p| p.path.as_str()).collect();
    assert_eq!(missing, [victim.as_str()]);
    assert_eq!(report.missing, 1);
}

#[test]
fn convention_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("paths.json");
    fs::write(&path, r#"{"ecg": "files/{study_id}/{dicom_id}.hea"}"#).unwrap();
    assert!(matches!(PathConvention::from_json_file(&path), Err(Error::Template(_))));
    fs::write(&path, r#"{"cxr": "x/{patient}.jpg"}"#).unwrap();
    assert!(PathConvention::from_json_file(&path).is_err());
    fs::write(&path, r#"{"cxr": "img/{subject_id}/{dicom_id}.png"}"#).unwrap();
    let conv = PathConvention::from_json_file(&path).unwrap();
    assert_eq!(conv.render(Modality::Cxr, 10313763, 51527697, Some("d1")).unwrap(), "img/10313763/d1.png");
    let escape = PathConvention {
        templates: BTreeMap::from([(Modality::Ecg, "../{study_id}".to_string())]),
    };
    assert!(escape.render(Modality::Ecg, 1, 2, None).is_err());
}
