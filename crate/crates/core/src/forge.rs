//! Deterministic synthetic MIMIC-IV-shaped corpus with a ground-truth
//! manifest.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::assets::PathConvention;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::sectionize::{HeaderLexicon, LexiconEntry, PREAMBLE};
use crate::time::{parse_datetime, serde_datetime};

pub const RATE_KEYS: [&str; 8] = ["lab", "rr", "cxr", "ecg", "echo", "waveform", "medication", "procedure"];

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IcdEntry {
    pub code: String,
    pub version: u8,
    pub long_title: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForgeConfig {
    pub seed: u64,
    pub n_subjects: usize,
    pub max_admissions_per_subject: usize,
    /// Mean events per admission-day, keyed by [`RATE_KEYS`]. Missing keys
    /// fall back to the defaults.
    pub event_rates: BTreeMap<String, f64>,
    /// Headers drawn for discharge summaries.
    pub note_header_lexicon: Vec<String>,
    /// Headers drawn for radiology reports.
    pub rr_header_lexicon: Vec<String>,
    pub icd_pool: Vec<IcdEntry>,
    #[serde(with = "serde_datetime")]
    pub date_start: NaiveDateTime,
    #[serde(with = "serde_datetime")]
    pub date_end: NaiveDateTime,
    /// Share of cxr/ecg/echo rows written without a hadm_id.
    pub missing_hadm_fraction: f64,
    /// Share of subjects given one cxr study outside every admission.
    pub unanchored_fraction: f64,
    /// Also write d_icd_diagnoses, inputevents and procedureevents.
    pub optional_tables: bool,
}

fn default_rates() -> BTreeMap<String, f64> {
    [
        ("lab", 6.0),
        ("rr", 0.5),
        ("cxr", 0.6),
        ("ecg", 0.8),
        ("echo", 0.1),
        ("waveform", 0.3),
        ("medication", 8.0),
        ("procedure", 1.0),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn default_icd_pool() -> Vec<IcdEntry> {
    let nine = [
        ("42731", "Atrial fibrillation"),
        ("41400", "Coronary atherosclerosis of unspecified type of vessel, native or graft"),
        ("41401", "Coronary atherosclerosis of native coronary artery"),
        ("0389", "Unspecified septicemia"),
        ("99591", "Sepsis"),
        ("99592", "Severe sepsis"),
        ("78552", "Septic shock"),
        ("4280", "Congestive heart failure, unspecified"),
        ("41071", "Subendocardial infarction, initial episode of care"),
        ("25000", "Diabetes mellitus without mention of complication"),
        ("4019", "Unspecified essential hypertension"),
        ("486", "Pneumonia, organism unspecified"),
        ("5849", "Acute kidney failure, unspecified"),
    ];
    let ten = [
        ("I4891", "Unspecified atrial fibrillation"),
        ("I480", "Paroxysmal atrial fibrillation"),
        ("I2510", "Atherosclerotic heart disease of native coronary artery without angina pectoris"),
        ("I252", "Old myocardial infarction"),
        ("A419", "Sepsis, unspecified organism"),
        ("A409", "Streptococcal sepsis, unspecified"),
        ("R6520", "Severe sepsis without septic shock"),
        ("R6521", "Severe sepsis with septic shock"),
        ("I509", "Heart failure, unspecified"),
        ("I214", "Non-ST elevation (NSTEMI) myocardial infarction"),
        ("E119", "Type 2 diabetes mellitus without complications"),
        ("I10", "Essential (primary) hypertension"),
        ("J189", "Pneumonia, unspecified organism"),
        ("N179", "Acute kidney failure, unspecified"),
    ];
    let entry = |version| move |(code, title): (&str, &str)| IcdEntry {
        code: code.to_string(),
        version,
        long_title: title.to_string(),
    };
    nine.into_iter()
        .map(entry(9))
        .chain(ten.into_iter().map(entry(10)))
        .collect()
}

pub const DS_HEADERS: [&str; 10] = [
    "Chief Complaint",
    "History of Present Illness",
    "Past Medical History",
    "Social History",
    "Family History",
    "Allergies",
    "Medications on Admission",
    "Physical Exam",
    "Brief Hospital Course",
    "Discharge Diagnosis",
];

pub const RR_HEADERS: [&str; 5] = ["Indication", "Comparison", "Technique", "Findings", "Impression"];

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            seed: 7,
            n_subjects: 200,
            max_admissions_per_subject: 3,
            event_rates: default_rates(),
            note_header_lexicon: DS_HEADERS.iter().map(|s| s.to_string()).collect(),
            rr_header_lexicon: RR_HEADERS.iter().map(|s| s.to_string()).collect(),
            icd_pool: default_icd_pool(),
            date_start: parse_datetime("2110-01-01 00:00:00").expect("literal"),
            date_end: parse_datetime("2190-12-31 23:59:59").expect("literal"),
            missing_hadm_fraction: 0.1,
            unanchored_fraction: 0.05,
            optional_tables: true,
        }
    }
}

impl ForgeConfig {
    pub fn with_seed(seed: u64, n_subjects: usize) -> Self {
        ForgeConfig {
            seed,
            n_subjects,
            ..Default::default()
        }
    }

    pub fn rate(&self, key: &str) -> f64 {
        self.event_rates
            .get(key)
            .copied()
            .unwrap_or_else(|| default_rates()[key])
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 1 {
            return Err(Error::config("n_subjects", "n_subjects must be ≥ 1"));
        }
        if self.n_subjects > 5_000_000 {
            return Err(Error::config("n_subjects", "n_subjects must be ≤ 5000000"));
        }
        if self.max_admissions_per_subject < 1 {
            return Err(Error::config(
                "max_admissions_per_subject",
                "max_admissions_per_subject must be ≥ 1",
            ));
        }
        for (k, v) in &self.event_rates {
            if !RATE_KEYS.contains(&k.as_str()) {
                return Err(Error::config("event_rates", format!("unknown key `{k}`")));
            }
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::config("event_rates", format!("`{k}` must be a finite rate ≥ 0")));
            }
        }
        for (field, list) in [
            ("note_header_lexicon", &self.note_header_lexicon),
            ("rr_header_lexicon", &self.rr_header_lexicon),
        ] {
            if list.is_empty() {
                return Err(Error::config(field, "needs at least one header"));
            }
            let mut seen = HashSet::new();
            for h in list {
                if h.trim() != h || h.is_empty() || h.contains([':', '\n', '\r']) {
                    return Err(Error::config(field, format!("unusable header `{h}`")));
                }
                if h.eq_ignore_ascii_case(PREAMBLE) || !seen.insert(h.to_uppercase()) {
                    return Err(Error::config(field, format!("duplicate or reserved header `{h}`")));
                }
            }
        }
        if self.icd_pool.is_empty() {
            return Err(Error::config("icd_pool", "needs at least one code"));
        }
        let mut seen = HashSet::new();
        for e in &self.icd_pool {
            if e.version != 9 && e.version != 10 {
                return Err(Error::config("icd_pool", format!("`{}` has version {}", e.code, e.version)));
            }
            if e.code.is_empty() || !e.code.chars().all(|c| c.is_ascii_alphanumeric()) {
                return Err(Error::config("icd_pool", format!("bad code `{}`", e.code)));
            }
            if !seen.insert((e.version, e.code.clone())) {
                return Err(Error::config("icd_pool", format!("duplicate code `{}`", e.code)));
            }
        }
        let span = self.date_end - self.date_start;
        if span < Duration::days(400 * self.max_admissions_per_subject as i64) {
            return Err(Error::config(
                "date_range",
                "date_range must span at least 400 days per admission",
            ));
        }
        for (field, v) in [
            ("missing_hadm_fraction", self.missing_hadm_fraction),
            ("unanchored_fraction", self.unanchored_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, format!("{field} must be in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Sectionizer lexicon recognising exactly the forged headers. Canonical
    /// names are the upper-cased headers.
    pub fn lexicon(&self) -> HeaderLexicon {
        let mut seen = HashSet::new();
        let entries = self
            .note_header_lexicon
            .iter()
            .chain(&self.rr_header_lexicon)
            .filter(|h| seen.insert(h.to_uppercase()))
            .map(|h| LexiconEntry {
                name: h.to_uppercase(),
                patterns: vec![h.clone()],
            })
            .collect();
        HeaderLexicon {
            entries,
            case_sensitive: false,
        }
    }
}

/// Lays out `headers[i]: bodies[i]` one section per line group.
pub fn forge_note<S: AsRef<str>, T: AsRef<str>>(headers: &[S], bodies: &[T]) -> Result<String> {
    if headers.len() != bodies.len() {
        return Err(Error::config(
            "bodies",
            format!("{} headers but {} bodies", headers.len(), bodies.len()),
        ));
    }
    let mut out = String::new();
    for (h, b) in headers.iter().zip(bodies) {
        out.push_str(h.as_ref());
        out.push_str(": ");
        out.push_str(b.as_ref());
        out.push('\n');
    }
    Ok(out)
}

const VOCAB: [&str; 48] = [
    "patient", "presented", "with", "acute", "chronic", "dyspnea", "fever", "chest", "pain", "denies",
    "history", "of", "stable", "mild", "moderate", "severe", "bilateral", "effusion", "no", "evidence",
    "consolidation", "cardiomegaly", "normal", "sinus", "rhythm", "tachycardia", "started", "on",
    "heparin", "aspirin", "metoprolol", "lasix", "improved", "discharged", "home", "follow", "up",
    "cardiology", "renal", "function", "creatinine", "elevated", "lungs", "clear", "abdomen", "soft",
    "nontender", "and",
];

/// `n` vocabulary words separated by single spaces, with a line break every
/// twelve words.
pub fn forge_tokens<R: Rng + ?Sized>(rng: &mut R, n: usize) -> String {
    let mut out = String::new();
    for i in 0..n {
        if i > 0 {
            out.push(if i % 12 == 0 { '\n' } else { ' ' });
        }
        out.push_str(VOCAB.choose(rng).expect("non-empty"));
    }
    out
}

/// One event as written to a table row, with its true admission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEvent {
    pub kind: String,
    pub subject_id: i64,
    /// Admission the event was generated inside; `None` for unanchored events.
    pub hadm_id: Option<i64>,
    /// Whether the row carries its hadm_id.
    pub hadm_recorded: bool,
    /// Row identifier: note_id, dicom_id, study_id, or itemid for labs,
    /// medications and procedures.
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study_id: Option<i64>,
    #[serde(with = "serde_datetime")]
    pub time: NaiveDateTime,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_datetime")]
    pub end: Option<NaiveDateTime>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_position: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_path: Option<String>,
}

mod opt_datetime {
    use chrono::NaiveDateTime;
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::time::{format_datetime, parse_datetime};

    pub fn serialize<S: Serializer>(v: &Option<NaiveDateTime>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(t) => s.serialize_str(&format_datetime(t)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<NaiveDateTime>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| {
                parse_datetime(&s).ok_or_else(|| serde::de::Error::custom(format!("bad datetime `{s}`")))
            })
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSection {
    /// Surface header as written; empty for a preamble.
    pub header: String,
    /// Name the sectionizer should report.
    pub name: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestNote {
    pub note_id: String,
    pub note_type: String,
    pub subject_id: i64,
    pub hadm_id: i64,
    pub sections: Vec<ManifestSection>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestAdmission {
    pub subject_id: i64,
    pub hadm_id: i64,
    #[serde(with = "serde_datetime")]
    pub admittime: NaiveDateTime,
    #[serde(with = "serde_datetime")]
    pub dischtime: NaiveDateTime,
    /// (icd_code, icd_version) in seq_num order.
    pub diagnoses: Vec<(String, u8)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthManifest {
    pub seed: u64,
    pub subjects: Vec<i64>,
    pub admissions: Vec<ManifestAdmission>,
    pub events: Vec<ManifestEvent>,
    pub notes: Vec<ManifestNote>,
    /// "{version}:{code}" → subjects with that diagnosis.
    pub icd_members: BTreeMap<String, BTreeSet<i64>>,
}

impl GroundTruthManifest {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn events_of<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a ManifestEvent> + 'a {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn admission(&self, hadm_id: i64) -> Option<&ManifestAdmission> {
        self.admissions.iter().find(|a| a.hadm_id == hadm_id)
    }
}

const LAB_ITEMS: [&str; 7] = ["50912", "50971", "50983", "51006", "51221", "51265", "51301"];
const MED_ITEMS: [&str; 4] = ["221906", "222168", "225158", "225943"];
const PROC_ITEMS: [&str; 4] = ["221214", "224275", "225402", "225459"];
const SIGNALS: [&str; 3] = ["ABP", "II", "PLETH"];
const VIEWS: [&str; 3] = ["PA", "AP", "LATERAL"];

struct Ids {
    used: HashSet<i64>,
}

impl Ids {
    fn draw(&mut self, rng: &mut ChaCha8Rng, base: i64) -> i64 {
        loop {
            let id = base + rng.random_range(0..10_000_000);
            if self.used.insert(id) {
                return id;
            }
        }
    }
}

#[derive(Default)]
struct Rows {
    tables: BTreeMap<&'static str, Vec<Vec<String>>>,
}

impl Rows {
    fn push(&mut self, table: &'static str, row: Vec<String>) {
        self.tables.entry(table).or_default().push(row);
    }
}

fn header(table: &str) -> &'static [&'static str] {
    match table {
        "patients" => &["subject_id", "gender", "anchor_age"],
        "admissions" => &["subject_id", "hadm_id", "admittime", "dischtime", "admission_type"],
        "diagnoses_icd" => &["subject_id", "hadm_id", "seq_num", "icd_code", "icd_version"],
        "d_icd_diagnoses" => &["icd_code", "icd_version", "long_title"],
        "labevents" => &["subject_id", "hadm_id", "itemid", "charttime", "valuenum"],
        "notes" => &["note_id", "subject_id", "hadm_id", "note_type", "charttime", "text"],
        "cxr_metadata" => &["dicom_id", "subject_id", "study_id", "hadm_id", "view_position", "study_time"],
        "ecg_metadata" => &["study_id", "subject_id", "hadm_id", "ecg_time", "lead_count", "duration_s"],
        "echo_metadata" => &["study_id", "subject_id", "hadm_id", "study_time"],
        "waveform_metadata" => &["study_id", "subject_id", "hadm_id", "start_time", "signal_type"],
        "inputevents" => &["subject_id", "hadm_id", "itemid", "starttime", "endtime", "amount"],
        "procedureevents" => &["subject_id", "hadm_id", "itemid", "starttime", "endtime"],
        other => unreachable!("no forged table `{other}`"),
    }
}

fn fmt(t: NaiveDateTime) -> String {
    crate::time::format_datetime(&t)
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

fn uniform_in(rng: &mut ChaCha8Rng, start: NaiveDateTime, end: NaiveDateTime) -> NaiveDateTime {
    let secs = (end - start).num_seconds();
    start + Duration::seconds(rng.random_range(0..=secs))
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn dicom_id(rng: &mut ChaCha8Rng) -> String {
    (0..5)
        .map(|_| format!("{:08x}", rng.random::<u32>()))
        .collect::<Vec<_>>()
        .join("-")
}

struct Forge<'a> {
    cfg: &'a ForgeConfig,
    rng: ChaCha8Rng,
    ids: Ids,
    rows: Rows,
    paths: PathConvention,
    manifest: GroundTruthManifest,
    note_seq: BTreeMap<(i64, &'static str), usize>,
}

impl Forge<'_> {
    fn note(&mut self, subject: i64, hadm: i64, kind: &'static str, time: NaiveDateTime) {
        let seq = self.note_seq.entry((subject, kind)).or_insert(0);
        *seq += 1;
        let note_id = format!("{subject}-{kind}-{seq}");
        let lexicon = if kind == "DS" {
            &self.cfg.note_header_lexicon
        } else {
            &self.cfg.rr_header_lexicon
        };
        let k = self.rng.random_range(1..=lexicon.len());
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut self.rng, lexicon.len(), k).into_vec();
        picked.sort_unstable();
        let headers: Vec<&String> = picked.iter().map(|&i| &lexicon[i]).collect();
        let bodies: Vec<String> = headers
            .iter()
            .map(|_| {
                let n = self.rng.random_range(3..=40);
                forge_tokens(&mut self.rng, n)
            })
            .collect();
        let mut sections = Vec::new();
        let mut text = String::new();
        if kind == "DS" && self.rng.random_bool(0.2) {
            let n = self.rng.random_range(2..=10);
            let pre = format!("Name ___ Unit No ___\n{}", forge_tokens(&mut self.rng, n));
            text.push_str(&pre);
            text.push_str("\n\n");
            sections.push(ManifestSection {
                header: String::new(),
                name: PREAMBLE.to_string(),
                body: pre,
            });
        }
        text.push_str(&forge_note(&headers, &bodies).expect("equal lengths"));
        for (h, b) in headers.iter().zip(bodies) {
            sections.push(ManifestSection {
                header: h.to_string(),
                name: h.to_uppercase(),
                body: b,
            });
        }
        self.rows.push(
            "notes",
            vec![
                note_id.clone(),
                subject.to_string(),
                hadm.to_string(),
                kind.to_string(),
                fmt(time),
                text,
            ],
        );
        self.event(kind.to_lowercase(), subject, Some(hadm), true, note_id.clone(), time);
        self.manifest.notes.push(ManifestNote {
            note_id,
            note_type: kind.to_string(),
            subject_id: subject,
            hadm_id: hadm,
            sections,
        });
    }

    fn event(
        &mut self,
        kind: String,
        subject: i64,
        hadm: Option<i64>,
        recorded: bool,
        id: String,
        time: NaiveDateTime,
    ) -> &mut ManifestEvent {
        self.manifest.events.push(ManifestEvent {
            kind,
            subject_id: subject,
            hadm_id: hadm,
            hadm_recorded: recorded && hadm.is_some(),
            id,
            study_id: None,
            time,
            end: None,
            value: None,
            view_position: None,
            file_path: None,
        });
        self.manifest.events.last_mut().expect("just pushed")
    }

    fn placeholder(&mut self, m: Modality, subject: i64, study: i64, dicom: Option<&str>) -> Result<String> {
        self.paths.render(m, subject, study, dicom)
    }

    /// One imaging or signal study. `hadm` is the true admission, if any.
    fn study(
        &mut self,
        m: Modality,
        subject: i64,
        hadm: Option<i64>,
        time: NaiveDateTime,
    ) -> Result<()> {
        let recorded = match (m, hadm) {
            (Modality::Waveform, _) | (_, None) => false,
            _ => !self.rng.random_bool(self.cfg.missing_hadm_fraction),
        };
        let hadm_cell = if recorded { hadm.expect("some").to_string() } else { String::new() };
        let base = match m {
            Modality::Cxr => 50_000_000,
            Modality::Ecg => 40_000_000,
            Modality::Echo => 90_000_000,
            Modality::Waveform => 80_000_000,
            _ => unreachable!("notes are not studies"),
        };
        let study = self.ids.draw(&mut self.rng, base);
        let kind = m.as_str().to_string();
        match m {
            Modality::Cxr => {
                let images = self.rng.random_range(1..=3);
                for _ in 0..images {
                    let dicom = dicom_id(&mut self.rng);
                    let view = *VIEWS.choose(&mut self.rng).expect("non-empty");
                    let path = self.placeholder(m, subject, study, Some(&dicom))?;
                    self.rows.push(
                        "cxr_metadata",
                        vec![
                            dicom.clone(),
                            subject.to_string(),
                            study.to_string(),
                            hadm_cell.clone(),
                            view.to_string(),
                            fmt(time),
                        ],
                    );
                    let e = self.event(kind.clone(), subject, hadm, recorded, dicom, time);
                    e.study_id = Some(study);
                    e.view_position = Some(view.to_string());
                    e.file_path = Some(path);
                }
            }
            Modality::Ecg => {
                let path = self.placeholder(m, subject, study, None)?;
                self.rows.push(
                    "ecg_metadata",
                    vec![study.to_string(), subject.to_string(), hadm_cell, fmt(time), "12".into(), "10".into()],
                );
                let e = self.event(kind, subject, hadm, recorded, study.to_string(), time);
                e.study_id = Some(study);
                e.file_path = Some(path);
            }
            Modality::Echo => {
                let path = self.placeholder(m, subject, study, None)?;
                self.rows.push(
                    "echo_metadata",
                    vec![study.to_string(), subject.to_string(), hadm_cell, fmt(time)],
                );
                let e = self.event(kind, subject, hadm, recorded, study.to_string(), time);
                e.study_id = Some(study);
                e.file_path = Some(path);
            }
            Modality::Waveform => {
                let path = self.placeholder(m, subject, study, None)?;
                let signal = *SIGNALS.choose(&mut self.rng).expect("non-empty");
                self.rows.push(
                    "waveform_metadata",
                    vec![study.to_string(), subject.to_string(), hadm_cell, fmt(time), signal.into()],
                );
                let e = self.event(kind, subject, hadm, recorded, study.to_string(), time);
                e.study_id = Some(study);
                e.file_path = Some(path);
            }
            _ => unreachable!(),
        }
        Ok(())
    }

    fn admission(&mut self, subject: i64, admit: NaiveDateTime, disch: NaiveDateTime) -> Result<()> {
        let hadm = self.ids.draw(&mut self.rng, 20_000_000);
        let kind = *["EMERGENCY", "ELECTIVE", "URGENT"].choose(&mut self.rng).expect("non-empty");
        self.rows.push(
            "admissions",
            vec![subject.to_string(), hadm.to_string(), fmt(admit), fmt(disch), kind.into()],
        );

        let version = if self.rng.random_bool(0.5) { 9 } else { 10 };
        let mut pool: Vec<&IcdEntry> = self.cfg.icd_pool.iter().filter(|e| e.version == version).collect();
        if pool.is_empty() {
            pool = self.cfg.icd_pool.iter().collect();
        }
        let n = self.rng.random_range(1..=pool.len().min(4));
        let picked: Vec<IcdEntry> = pool.choose_multiple(&mut self.rng, n).map(|e| (*e).clone()).collect();
        for (i, e) in picked.iter().enumerate() {
            self.rows.push(
                "diagnoses_icd",
                vec![
                    subject.to_string(),
                    hadm.to_string(),
                    (i + 1).to_string(),
                    e.code.clone(),
                    e.version.to_string(),
                ],
            );
            self.manifest
                .icd_members
                .entry(format!("{}:{}", e.version, e.code))
                .or_default()
                .insert(subject);
        }
        self.manifest.admissions.push(ManifestAdmission {
            subject_id: subject,
            hadm_id: hadm,
            admittime: admit,
            dischtime: disch,
            diagnoses: picked.iter().map(|e| (e.code.clone(), e.version)).collect(),
        });

        let days = (disch - admit).num_seconds() as f64 / 86_400.0;

        let mut labs: Vec<(NaiveDateTime, &str, f64)> = (0..poisson(&mut self.rng, self.cfg.rate("lab") * days))
            .map(|_| {
                let t = uniform_in(&mut self.rng, admit, disch);
                let item = *LAB_ITEMS.choose(&mut self.rng).expect("non-empty");
                (t, item, round2(self.rng.random_range(0.1..200.0)))
            })
            .collect();
        labs.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for (t, item, v) in labs {
            self.rows.push(
                "labevents",
                vec![subject.to_string(), hadm.to_string(), item.into(), fmt(t), v.to_string()],
            );
            self.event("lab".into(), subject, Some(hadm), true, item.into(), t).value = Some(v);
        }

        let mut cxr_times = Vec::new();
        for _ in 0..poisson(&mut self.rng, self.cfg.rate("cxr") * days) {
            let t = uniform_in(&mut self.rng, admit, disch);
            cxr_times.push(t);
            self.study(Modality::Cxr, subject, Some(hadm), t)?;
        }
        for (m, key) in [
            (Modality::Ecg, "ecg"),
            (Modality::Echo, "echo"),
            (Modality::Waveform, "waveform"),
        ] {
            for _ in 0..poisson(&mut self.rng, self.cfg.rate(key) * days) {
                let t = uniform_in(&mut self.rng, admit, disch);
                self.study(m, subject, Some(hadm), t)?;
            }
        }

        let mut rr_times: Vec<NaiveDateTime> = cxr_times
            .iter()
            .map(|t| (*t + Duration::minutes(self.rng.random_range(5..=90))).min(disch))
            .collect();
        for _ in 0..poisson(&mut self.rng, self.cfg.rate("rr") * days) {
            rr_times.push(uniform_in(&mut self.rng, admit, disch));
        }
        rr_times.sort();
        for t in rr_times {
            self.note(subject, hadm, "RR", t);
        }
        self.note(subject, hadm, "DS", disch);

        if self.cfg.optional_tables {
            for _ in 0..poisson(&mut self.rng, self.cfg.rate("medication") * days) {
                let start = uniform_in(&mut self.rng, admit, disch);
                let end = if self.rng.random_bool(0.1) {
                    start
                } else {
                    (start + Duration::seconds(self.rng.random_range(60..=12 * 3600))).min(disch)
                };
                let item = *MED_ITEMS.choose(&mut self.rng).expect("non-empty");
                let amount = round2(self.rng.random_range(1.0..500.0));
                self.rows.push(
                    "inputevents",
                    vec![
                        subject.to_string(),
                        hadm.to_string(),
                        item.into(),
                        fmt(start),
                        fmt(end),
                        amount.to_string(),
                    ],
                );
                let e = self.event("medication".into(), subject, Some(hadm), true, item.into(), start);
                e.end = Some(end);
                e.value = Some(amount);
            }
            for _ in 0..poisson(&mut self.rng, self.cfg.rate("procedure") * days) {
                let start = uniform_in(&mut self.rng, admit, disch);
                let end = if self.rng.random_bool(0.3) {
                    None
                } else {
                    Some((start + Duration::seconds(self.rng.random_range(60..=4 * 3600))).min(disch))
                };
                let item = *PROC_ITEMS.choose(&mut self.rng).expect("non-empty");
                self.rows.push(
                    "procedureevents",
                    vec![
                        subject.to_string(),
                        hadm.to_string(),
                        item.into(),
                        fmt(start),
                        end.map(fmt).unwrap_or_default(),
                    ],
                );
                self.event("procedure".into(), subject, Some(hadm), true, item.into(), start).end = end;
            }
        }
        Ok(())
    }

    fn subject(&mut self, subject: i64) -> Result<()> {
        let gender = if self.rng.random_bool(0.5) { "F" } else { "M" };
        let age = self.rng.random_range(18..=91);
        self.rows.push("patients", vec![subject.to_string(), gender.into(), age.to_string()]);
        self.manifest.subjects.push(subject);

        let n_adm = self.rng.random_range(1..=self.cfg.max_admissions_per_subject);
        let latest = self.cfg.date_end - Duration::days(400 * n_adm as i64);
        let mut cursor = uniform_in(&mut self.rng, self.cfg.date_start, latest.max(self.cfg.date_start));
        let (lo, hi) = ((6.0f64 * 3600.0).ln(), (21.0f64 * 86_400.0).ln());
        let mut windows = Vec::new();
        for _ in 0..n_adm {
            let len = self.rng.random_range(lo..=hi).exp().round() as i64;
            let admit = cursor;
            let disch = admit + Duration::seconds(len);
            windows.push((admit, disch));
            cursor = disch + Duration::seconds(self.rng.random_range(86_400..=365 * 86_400));
        }
        for &(admit, disch) in &windows {
            self.admission(subject, admit, disch)?;
        }
        if self.rng.random_bool(self.cfg.unanchored_fraction) {
            // Before the first admission: outside every window.
            let t = windows[0].0 - Duration::seconds(self.rng.random_range(3600..=20 * 3600));
            self.study(Modality::Cxr, subject, None, t)?;
        }
        Ok(())
    }
}

/// Writes the corpus CSVs, placeholder asset files and `manifest.json` under
/// `out_dir`.
pub fn forge_corpus(config: &ForgeConfig, out_dir: impl AsRef<Path>) -> Result<GroundTruthManifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ids = Ids { used: HashSet::new() };
    let mut subjects: Vec<i64> = (0..config.n_subjects)
        .map(|_| ids.draw(&mut rng, 10_000_000))
        .collect();
    subjects.sort_unstable();

    let mut forge = Forge {
        cfg: config,
        rng,
        ids,
        rows: Rows::default(),
        paths: PathConvention::default(),
        manifest: GroundTruthManifest {
            seed: config.seed,
            subjects: Vec::with_capacity(subjects.len()),
            admissions: Vec::new(),
            events: Vec::new(),
            notes: Vec::new(),
            icd_members: BTreeMap::new(),
        },
        note_seq: BTreeMap::new(),
    };
    for &s in &subjects {
        forge.subject(s)?;
    }

    let mut tables = vec![
        "patients",
        "admissions",
        "diagnoses_icd",
        "labevents",
        "notes",
        "cxr_metadata",
        "ecg_metadata",
        "echo_metadata",
        "waveform_metadata",
    ];
    if config.optional_tables {
        tables.extend(["d_icd_diagnoses", "inputevents", "procedureevents"]);
        let mut pool = config.icd_pool.clone();
        pool.sort();
        for e in pool {
            forge
                .rows
                .push("d_icd_diagnoses", vec![e.code, e.version.to_string(), e.long_title]);
        }
    }
    for name in tables {
        let path = out_dir.join(format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Csv {
            context: path.display().to_string(),
            source: e,
        })?;
        let csv_err = |e| Error::Csv {
            context: path.display().to_string(),
            source: e,
        };
        w.write_record(header(name)).map_err(csv_err)?;
        for row in forge.rows.tables.get(name).map(Vec::as_slice).unwrap_or(&[]) {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    for e in &forge.manifest.events {
        if let Some(rel) = &e.file_path {
            let path = out_dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|err| Error::io(parent, err))?;
            }
            fs::write(&path, rel).map_err(|err| Error::io(&path, err))?;
        }
    }

    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&forge.manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(forge.manifest)
}
