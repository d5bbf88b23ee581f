//! ICD-based and all-subjects cohort resolution.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::align::nearest_rank;
use crate::error::{Error, Result};
use crate::ingest::{AdmissionWindow, DatasetSnapshot};
use crate::modality::{Modality, NoteType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortMode {
    AllSubjects,
    #[default]
    Icd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IcdVersion {
    Nine,
    Ten,
    #[default]
    Both,
}

impl IcdVersion {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "9" => Ok(IcdVersion::Nine),
            "10" => Ok(IcdVersion::Ten),
            "both" => Ok(IcdVersion::Both),
            _ => Err(Error::unknown("icd_version", s)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IcdVersion::Nine => "9",
            IcdVersion::Ten => "10",
            IcdVersion::Both => "both",
        }
    }

    pub fn accepts(self, version: &str) -> bool {
        match self {
            IcdVersion::Nine => version == "9",
            IcdVersion::Ten => version == "10",
            IcdVersion::Both => version == "9" || version == "10",
        }
    }
}

impl fmt::Display for IcdVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for IcdVersion {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for IcdVersion {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(i64),
            Str(String),
        }
        let raw = match Raw::deserialize(d)? {
            Raw::Num(n) => n.to_string(),
            Raw::Str(s) => s,
        };
        IcdVersion::parse(&raw).map_err(de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchOn {
    #[default]
    Code,
    Name,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CohortSpec {
    pub mode: CohortMode,
    #[serde(default)]
    pub icd_version: IcdVersion,
    #[serde(default)]
    pub code_patterns: Vec<String>,
    #[serde(default)]
    pub disease_name_substrings: Vec<String>,
    #[serde(default)]
    pub match_on: MatchOn,
}

impl CohortSpec {
    pub fn all_subjects() -> Self {
        CohortSpec {
            mode: CohortMode::AllSubjects,
            ..Default::default()
        }
    }

    pub fn codes<I, S>(version: IcdVersion, patterns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        CohortSpec {
            mode: CohortMode::Icd,
            icd_version: version,
            code_patterns: patterns.into_iter().map(Into::into).collect(),
            ..Default::default()
        }
    }

    pub fn names<I, S>(version: IcdVersion, substrings: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        CohortSpec {
            mode: CohortMode::Icd,
            icd_version: version,
            disease_name_substrings: substrings.into_iter().map(Into::into).collect(),
            match_on: MatchOn::Name,
            ..Default::default()
        }
    }

    /// Validates this CohortSpec and compiles its code patterns.
    pub fn validate(&self) -> Result<Vec<CodePattern>> {
        if self.mode == CohortMode::AllSubjects {
            return Ok(Vec::new());
        }
        match self.match_on {
            MatchOn::Code if self.code_patterns.is_empty() => Err(Error::config(
                "code_patterns",
                "icd mode matching on code needs at least one pattern",
            )),
            MatchOn::Name if self.disease_name_substrings.is_empty() => Err(Error::config(
                "disease_name_substrings",
                "icd mode matching on name needs at least one substring",
            )),
            MatchOn::Name => {
                if let Some(i) = self
                    .disease_name_substrings
                    .iter()
                    .position(|s| s.trim().is_empty())
                {
                    return Err(Error::config(
                        format!("disease_name_substrings[{i}]"),
                        "empty substring",
                    ));
                }
                Ok(Vec::new())
            }
            MatchOn::Code => self
                .code_patterns
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    CodePattern::parse(p)
                        .map_err(|reason| Error::config(format!("code_patterns[{i}]"), reason))
                })
                .collect(),
        }
    }
}

/// Strips dots and surrounding whitespace and uppercases: `i25.1` → `I251`.
pub fn normalize_code(code: &str) -> String {
    code.trim()
        .chars()
        .filter(|c| *c != '.')
        .flat_map(char::to_uppercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodePattern {
    pub raw: String,
    pub code: String,
    pub prefix: bool,
}

impl CodePattern {
    pub fn parse(raw: &str) -> std::result::Result<Self, String> {
        let trimmed = raw.trim();
        let (body, prefix) = match trimmed.strip_suffix('*') {
            Some(b) => (b, true),
            None => (trimmed, false),
        };
        if body.contains('*') {
            return Err(format!("`{raw}`: '*' is only allowed as the final character"));
        }
        let code = normalize_code(body);
        if code.is_empty() {
            return Err(format!("`{raw}`: empty pattern"));
        }
        if !code.chars().all(|c| c.is_ascii_alphanumeric()) {
            return Err(format!("`{raw}`: codes are alphanumeric"));
        }
        Ok(CodePattern {
            raw: raw.to_string(),
            code,
            prefix,
        })
    }

    /// Matches an already-normalized code.
    pub fn matches(&self, code: &str) -> bool {
        if self.prefix {
            code.starts_with(&self.code)
        } else {
            code == self.code
        }
    }

    fn key(&self) -> String {
        if self.prefix {
            format!("{}*", self.code)
        } else {
            self.code.clone()
        }
    }
}

pub type AdmissionKey = (i64, i64);

#[derive(Debug, Clone, Serialize)]
pub struct Cohort {
    pub spec: CohortSpec,
    /// Deduplicated (subject_id, hadm_id) pairs.
    pub members: BTreeSet<AdmissionKey>,
    /// Pattern (normalized) or name substring → concrete codes it matched.
    pub matched_codes: BTreeMap<String, BTreeSet<String>>,
    #[serde(skip)]
    pub member_codes: BTreeMap<AdmissionKey, BTreeSet<String>>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, subject_id: i64, hadm_id: i64) -> bool {
        self.members.contains(&(subject_id, hadm_id))
    }

    pub fn subjects(&self) -> BTreeSet<i64> {
        self.members.iter().map(|(s, _)| *s).collect()
    }

    /// Member admission windows in (subject_id, hadm_id) order.
    pub fn admissions(&self, snapshot: &DatasetSnapshot) -> Vec<AdmissionWindow> {
        self.members
            .iter()
            .filter_map(|(_, h)| snapshot.admission(*h).copied())
            .collect()
    }

    /// Writes `subject_id,hadm_id,matched_code`, one line per matched code
    /// (an empty code for all-subjects members).
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["subject_id", "hadm_id", "matched_code"])?;
        for key @ (s, h) in &self.members {
            let (s, h) = (s.to_string(), h.to_string());
            match self.member_codes.get(key) {
                Some(codes) if !codes.is_empty() => {
                    for c in codes {
                        w.write_record([s.as_str(), h.as_str(), c.as_str()])?;
                    }
                }
                _ => w.write_record([s.as_str(), h.as_str(), ""])?,
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn search(snapshot: &DatasetSnapshot, spec: &CohortSpec) -> Result<Cohort> {
    let patterns = spec.validate()?;
    let mut cohort = Cohort {
        spec: spec.clone(),
        members: BTreeSet::new(),
        matched_codes: BTreeMap::new(),
        member_codes: BTreeMap::new(),
    };
    if spec.mode == CohortMode::AllSubjects {
        cohort.members = snapshot
            .admissions()
            .iter()
            .map(|a| (a.subject_id, a.hadm_id))
            .collect();
        return Ok(cohort);
    }

    let dx = snapshot
        .table("diagnoses_icd")
        .ok_or_else(|| Error::MissingTable("diagnoses_icd".into()))?;
    let subjects = dx.ints("subject_id");
    let hadms = dx.ints("hadm_id");
    let codes = dx.texts("icd_code");
    let versions = dx.texts("icd_version");

    let titles = match spec.match_on {
        MatchOn::Name => Some(title_dictionary(snapshot)?),
        MatchOn::Code => None,
    };
    let needles: Vec<(String, String)> = spec
        .disease_name_substrings
        .iter()
        .map(|s| (s.clone(), s.trim().to_lowercase()))
        .collect();
    for key in patterns.iter().map(CodePattern::key).chain(
        titles
            .is_some()
            .then(|| needles.iter().map(|(k, _)| k.clone()))
            .into_iter()
            .flatten(),
    ) {
        cohort.matched_codes.entry(key).or_default();
    }

    for row in 0..dx.len() {
        let version = versions[row].as_deref().unwrap_or_default();
        if !spec.icd_version.accepts(version) {
            continue;
        }
        let code = normalize_code(codes[row].as_deref().unwrap_or_default());
        let mut hit = false;
        match &titles {
            None => {
                for p in patterns.iter().filter(|p| p.matches(&code)) {
                    cohort
                        .matched_codes
                        .entry(p.key())
                        .or_default()
                        .insert(code.clone());
                    hit = true;
                }
            }
            Some(titles) => {
                if let Some(title) = titles.get(&(code.clone(), version.to_string())) {
                    for (key, _) in needles.iter().filter(|(_, n)| title.contains(n.as_str())) {
                        cohort
                            .matched_codes
                            .entry(key.clone())
                            .or_default()
                            .insert(code.clone());
                        hit = true;
                    }
                }
            }
        }
        if hit {
            let key = (
                subjects[row].expect("required"),
                hadms[row].expect("required"),
            );
            cohort.members.insert(key);
            cohort.member_codes.entry(key).or_default().insert(code);
        }
    }
    Ok(cohort)
}

/// (normalized code, version) → lowercased long title.
fn title_dictionary(snapshot: &DatasetSnapshot) -> Result<HashMap<(String, String), String>> {
    let d = snapshot
        .table("d_icd_diagnoses")
        .ok_or_else(|| Error::MissingTable("d_icd_diagnoses".into()))?;
    let codes = d.texts("icd_code");
    let versions = d.texts("icd_version");
    let titles = d.texts("long_title");
    Ok((0..d.len())
        .map(|i| {
            (
                (
                    normalize_code(codes[i].as_deref().unwrap_or_default()),
                    versions[i].clone().unwrap_or_default(),
                ),
                titles[i].as_deref().unwrap_or_default().to_lowercase(),
            )
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CountDistribution {
    pub min: u64,
    pub median: u64,
    pub p90: u64,
    pub max: u64,
}

impl CountDistribution {
    pub fn of(counts: &[u64]) -> Self {
        if counts.is_empty() {
            return Self::default();
        }
        let mut sorted = counts.to_vec();
        sorted.sort_unstable();
        CountDistribution {
            min: sorted[0],
            median: nearest_rank(&sorted, 50.0),
            p90: nearest_rank(&sorted, 90.0),
            max: sorted[sorted.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModalityCoverage {
    pub members_with_records: usize,
    pub total_records: u64,
    pub per_admission: CountDistribution,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CoverageReport {
    pub members: usize,
    pub modalities: BTreeMap<String, ModalityCoverage>,
}

/// Modality names reported by [`cohort_stats`]: `structured` counts the
/// admission row plus its lab events, the rest count metadata rows anchored
/// to member admissions.
pub const COVERAGE_MODALITIES: [&str; 9] = [
    "structured",
    "ds",
    "rr",
    "cxr",
    "ecg",
    "echo",
    "waveform",
    "medication",
    "procedure",
];

pub fn cohort_stats(cohort: &Cohort, snapshot: &DatasetSnapshot) -> Result<CoverageReport> {
    let index: HashMap<i64, usize> = cohort
        .members
        .iter()
        .enumerate()
        .map(|(i, (_, h))| (*h, i))
        .collect();
    let n = cohort.len();
    let mut counts: BTreeMap<&'static str, Vec<u64>> =
        COVERAGE_MODALITIES.iter().map(|m| (*m, vec![0; n])).collect();

    for &(_, h) in &cohort.members {
        counts.get_mut("structured").unwrap()[index[&h]] += 1;
    }

    let tally = |table: &str, time_col: &str, bucket: &dyn Fn(usize) -> Option<&'static str>, counts: &mut BTreeMap<&'static str, Vec<u64>>| -> Result<()> {
        let Some(t) = snapshot.table(table) else {
            return Ok(());
        };
        let hadms = t.ints("hadm_id");
        let times = t.datetimes(time_col);
        for subject in cohort.subjects() {
            for &row in snapshot.rows_for_subject(table, subject) {
                let Some(name) = bucket(row) else { continue };
                let anchored = snapshot.anchor(subject, hadms[row], times[row].expect("required"))?;
                if let Some(i) = anchored.and_then(|h| index.get(&h)) {
                    counts.get_mut(name).unwrap()[*i] += 1;
                }
            }
        }
        Ok(())
    };

    tally("labevents", "charttime", &|_| Some("structured"), &mut counts)?;
    if let Some(notes) = snapshot.table("notes") {
        let types = notes.texts("note_type");
        tally(
            "notes",
            "charttime",
            &|row| match types[row].as_deref().and_then(|t| t.parse::<NoteType>().ok()) {
                Some(NoteType::Ds) => Some("ds"),
                Some(NoteType::Rr) => Some("rr"),
                None => None,
            },
            &mut counts,
        )?;
    }
    for m in [Modality::Cxr, Modality::Ecg, Modality::Echo, Modality::Waveform] {
        let name = m.as_str();
        tally(m.table(), crate::assets::time_column(m), &|_| Some(name), &mut counts)?;
    }
    tally("inputevents", "starttime", &|_| Some("medication"), &mut counts)?;
    tally("procedureevents", "starttime", &|_| Some("procedure"), &mut counts)?;

    Ok(CoverageReport {
        members: n,
        modalities: counts
            .into_iter()
            .map(|(name, per)| {
                (
                    name.to_string(),
                    ModalityCoverage {
                        members_with_records: per.iter().filter(|c| **c > 0).count(),
                        total_records: per.iter().sum(),
                        per_admission: CountDistribution::of(&per),
                    },
                )
            })
            .collect(),
    })
}
