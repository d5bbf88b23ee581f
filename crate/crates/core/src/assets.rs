//! Links note, imaging and signal metadata to admissions and renders each
//! record's file path. Only path strings ever enter the integrated table.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Component, Path};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::ingest::DatasetSnapshot;
use crate::modality::{Modality, NoteType, ViewPosition};
use crate::time::format_datetime;

/// Event-time column of each modality's metadata table.
pub fn time_column(m: Modality) -> &'static str {
    match m {
        Modality::Ds | Modality::Rr => "charttime",
        Modality::Cxr | Modality::Echo => "study_time",
        Modality::Ecg => "ecg_time",
        Modality::Waveform => "start_time",
    }
}

/// Per-modality path templates with `{subject_prefix}`, `{subject_id}`,
/// `{study_id}` and `{dicom_id}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PathConvention {
    pub templates: BTreeMap<Modality, String>,
}

const PLACEHOLDERS: [&str; 4] = ["subject_prefix", "subject_id", "study_id", "dicom_id"];

impl Default for PathConvention {
    fn default() -> Self {
        let templates = [
            (Modality::Cxr, "files/p{subject_prefix}/p{subject_id}/s{study_id}/{dicom_id}.jpg"),
            (Modality::Ecg, "files/p{subject_prefix}/p{subject_id}/s{study_id}/{study_id}.hea"),
            (Modality::Echo, "files/p{subject_prefix}/p{subject_id}/s{study_id}/{study_id}.dcm"),
            (Modality::Waveform, "files/p{subject_prefix}/p{subject_id}/s{study_id}/{study_id}.wfdb"),
        ]
        .into_iter()
        .map(|(m, t)| (m, t.to_string()))
        .collect();
        PathConvention { templates }
    }
}

impl PathConvention {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let conv: PathConvention = serde_json::from_str(&raw)?;
        conv.validate()?;
        Ok(conv)
    }

    pub fn validate(&self) -> Result<()> {
        for (m, t) in &self.templates {
            if m.is_note() {
                return Err(Error::Template(format!("notes carry no file path (`{m}`)")));
            }
            for name in placeholders(t)? {
                if !PLACEHOLDERS.contains(&name.as_str()) {
                    return Err(Error::Template(format!("{m}: unknown placeholder `{{{name}}}`")));
                }
                if name == "dicom_id" && *m != Modality::Cxr {
                    return Err(Error::Template(format!("{m}: only cxr records carry a dicom_id")));
                }
            }
        }
        Ok(())
    }

    pub fn render(
        &self,
        modality: Modality,
        subject_id: i64,
        study_id: i64,
        dicom_id: Option<&str>,
    ) -> Result<String> {
        let template = self
            .templates
            .get(&modality)
            .ok_or_else(|| Error::Template(format!("no template for `{modality}`")))?;
        let subject = subject_id.to_string();
        let mut out = String::with_capacity(template.len() + 32);
        let mut rest = template.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| Error::Template(format!("unclosed placeholder in `{template}`")))?;
            let name = &rest[open + 1..open + close];
            match name {
                "subject_prefix" => out.push_str(&subject[..subject.len().min(2)]),
                "subject_id" => out.push_str(&subject),
                "study_id" => out.push_str(&study_id.to_string()),
                "dicom_id" => out.push_str(dicom_id.ok_or_else(|| {
                    Error::Template(format!("`{modality}` record has no dicom_id"))
                })?),
                other => return Err(Error::Template(format!("unknown placeholder `{{{other}}}`"))),
            }
            rest = &rest[open + close + 1..];
        }
        out.push_str(rest);
        let p = Path::new(&out);
        if out.is_empty() || !p.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(Error::Template(format!("`{out}` is not a plain relative path")));
        }
        Ok(out)
    }
}

fn placeholders(template: &str) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Template(format!("unclosed placeholder in `{template}`")))?;
        names.push(rest[open + 1..open + close].to_string());
        rest = &rest[open + close + 1..];
    }
    Ok(names)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalityRecord {
    pub modality: Modality,
    pub subject_id: i64,
    /// Resolved admission; `None` for unanchored records.
    pub hadm_id: Option<i64>,
    pub study_id: Option<i64>,
    pub dicom_id: Option<String>,
    pub note_id: Option<String>,
    #[serde(with = "crate::time::serde_datetime")]
    pub event_time: NaiveDateTime,
    pub file_path: Option<String>,
    pub attrs: BTreeMap<String, String>,
}

impl ModalityRecord {
    /// Tie-breaker within a bin: note_id, dicom_id, else study_id.
    pub fn stable_id(&self) -> String {
        if let Some(n) = &self.note_id {
            n.clone()
        } else if let Some(d) = &self.dicom_id {
            d.clone()
        } else {
            self.study_id.map(|s| s.to_string()).unwrap_or_default()
        }
    }

    /// What a slot column holds for this record.
    pub fn slot_value(&self) -> String {
        match (&self.file_path, &self.note_id) {
            (Some(p), _) => p.clone(),
            (None, Some(n)) => n.clone(),
            (None, None) => self.stable_id(),
        }
    }

    pub fn view_position(&self) -> Option<ViewPosition> {
        self.attrs.get("view_position").and_then(|v| v.parse().ok())
    }

    fn sort_key(&self) -> (i64, Modality, NaiveDateTime, String) {
        (self.subject_id, self.modality, self.event_time, self.stable_id())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ResolvedRecords {
    pub anchored: Vec<ModalityRecord>,
    pub unanchored: Vec<ModalityRecord>,
}

/// Resolves every metadata row of a cohort subject. A row keeps its own
/// `hadm_id` when its time falls in that admission, otherwise it is anchored
/// by time; rows inside no window land in `unanchored`.
pub fn resolve_records(
    snapshot: &DatasetSnapshot,
    cohort: &Cohort,
    modalities: &BTreeSet<Modality>,
    view_filter: Option<&BTreeSet<ViewPosition>>,
    paths: &PathConvention,
) -> Result<ResolvedRecords> {
    let mut out = ResolvedRecords::default();
    let subjects = cohort.subjects();
    for &m in modalities {
        let table = snapshot
            .table(m.table())
            .ok_or_else(|| Error::MissingTable(m.table().to_string()))?;
        let hadms = table.ints("hadm_id");
        let times = table.datetimes(time_column(m));
        for &subject in &subjects {
            for &row in snapshot.rows_for_subject(m.table(), subject) {
                let event_time = times[row].expect("required");
                let mut attrs = BTreeMap::new();
                let mut rec = ModalityRecord {
                    modality: m,
                    subject_id: subject,
                    hadm_id: None,
                    study_id: None,
                    dicom_id: None,
                    note_id: None,
                    event_time,
                    file_path: None,
                    attrs: BTreeMap::new(),
                };
                match m {
                    Modality::Ds | Modality::Rr => {
                        let kind = table.texts("note_type")[row].as_deref().and_then(|t| t.parse::<NoteType>().ok());
                        if kind.map(NoteType::modality) != Some(m) {
                            continue;
                        }
                        rec.note_id = table.texts("note_id")[row].clone();
                        attrs.insert("note_type".into(), kind.unwrap().as_str().to_string());
                    }
                    Modality::Cxr => {
                        let view = table.texts("view_position")[row].clone().expect("required");
                        if let Some(filter) = view_filter {
                            let v: ViewPosition = view.parse()?;
                            if !filter.contains(&v) {
                                continue;
                            }
                        }
                        rec.study_id = table.ints("study_id")[row];
                        rec.dicom_id = table.texts("dicom_id")[row].clone();
                        attrs.insert("view_position".into(), view);
                    }
                    Modality::Ecg => {
                        rec.study_id = table.ints("study_id")[row];
                        for a in ["lead_count", "duration_s"] {
                            if let Some(v) = table.floats(a)[row] {
                                attrs.insert(a.into(), v.to_string());
                            }
                        }
                    }
                    Modality::Waveform => {
                        rec.study_id = table.ints("study_id")[row];
                        if let Some(v) = &table.texts("signal_type")[row] {
                            attrs.insert("signal_type".into(), v.clone());
                        }
                    }
                    Modality::Echo => rec.study_id = table.ints("study_id")[row],
                }
                if !m.is_note() {
                    rec.file_path = Some(paths.render(
                        m,
                        subject,
                        rec.study_id.expect("required"),
                        rec.dicom_id.as_deref(),
                    )?);
                }
                rec.attrs = attrs;
                rec.hadm_id = snapshot.anchor(subject, hadms[row], event_time)?;
                if rec.hadm_id.is_some() {
                    out.anchored.push(rec);
                } else {
                    out.unanchored.push(rec);
                }
            }
        }
    }
    out.anchored.sort_by_key(ModalityRecord::sort_key);
    out.unanchored.sort_by_key(ModalityRecord::sort_key);
    Ok(out)
}

/// Images per view position within one cxr study.
pub fn rotation_count(
    records: &[ModalityRecord],
    subject_id: i64,
    study_id: i64,
) -> Result<BTreeMap<ViewPosition, usize>> {
    let mut counts = BTreeMap::new();
    for r in records.iter().filter(|r| {
        r.modality == Modality::Cxr && r.subject_id == subject_id && r.study_id == Some(study_id)
    }) {
        if let Some(v) = r.view_position() {
            *counts.entry(v).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::unknown("study", format!("{subject_id}/{study_id}")));
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PathCheck {
    pub path: String,
    pub exists: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PathReport {
    pub checks: Vec<PathCheck>,
    pub existing: usize,
    pub missing: usize,
}

pub fn verify_paths(records: &[ModalityRecord], root: &Path) -> PathReport {
    let mut report = PathReport::default();
    for p in records.iter().filter_map(|r| r.file_path.as_ref()) {
        let exists = root.join(p).is_file();
        if exists {
            report.existing += 1;
        } else {
            report.missing += 1;
        }
        report.checks.push(PathCheck {
            path: p.clone(),
            exists,
        });
    }
    report
}

pub fn write_records_csv<W: Write>(records: &[ModalityRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "modality",
        "subject_id",
        "hadm_id",
        "study_id",
        "dicom_id",
        "note_id",
        "event_time",
        "file_path",
    ])?;
    let opt = |v: Option<i64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        w.write_record([
            r.modality.as_str(),
            &r.subject_id.to_string(),
            &opt(r.hadm_id),
            &opt(r.study_id),
            r.dicom_id.as_deref().unwrap_or(""),
            r.note_id.as_deref().unwrap_or(""),
            &format_datetime(&r.event_time),
            r.file_path.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush()?;
    Ok(())
}
