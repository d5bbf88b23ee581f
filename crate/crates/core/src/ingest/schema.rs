//! Table schemas for the MIMIC-IV subset the engine understands.

/// Storage for identifier columns: numeric spine keys vs. string keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdKind {
    Integer,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnType {
    Identifier(IdKind),
    DateTime,
    Code,
    Numeric,
    Text,
    Path,
    Enum(&'static [&'static str]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    Int,
    Float,
    Text,
    DateTime,
}

impl ColumnType {
    pub fn storage(self) -> Storage {
        match self {
            ColumnType::Identifier(IdKind::Integer) => Storage::Int,
            ColumnType::Numeric => Storage::Float,
            ColumnType::DateTime => Storage::DateTime,
            ColumnType::Identifier(IdKind::Text)
            | ColumnType::Code
            | ColumnType::Text
            | ColumnType::Path
            | ColumnType::Enum(_) => Storage::Text,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ColumnSchema {
    pub name: &'static str,
    pub ty: ColumnType,
    /// Required columns must be present in the header and non-empty in every row.
    pub required: bool,
}

#[derive(Debug, Clone)]
pub struct TableSchema {
    pub name: &'static str,
    pub columns: Vec<ColumnSchema>,
    /// Whether loading fails when the table's CSV is absent.
    pub required: bool,
    /// Column whose values must be unique across rows.
    pub unique_key: Option<&'static str>,
}

impl TableSchema {
    pub fn column(&self, name: &str) -> Option<&ColumnSchema> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }
}

/// Exactly the columns that carry identity across tables.
pub const IDENTIFIER_COLUMNS: [&str; 6] = [
    "subject_id",
    "hadm_id",
    "note_id",
    "study_id",
    "dicom_id",
    "section_id",
];

pub const REQUIRED_TABLES: [&str; 9] = [
    "admissions",
    "patients",
    "diagnoses_icd",
    "labevents",
    "notes",
    "cxr_metadata",
    "ecg_metadata",
    "echo_metadata",
    "waveform_metadata",
];

const GENDERS: &[&str] = &["F", "M"];
const ICD_VERSIONS: &[&str] = &["9", "10"];
const NOTE_TYPES: &[&str] = &["DS", "RR"];
const VIEWS: &[&str] = &["PA", "AP", "LATERAL"];

#[derive(Debug, Clone)]
pub struct SchemaRegistry {
    tables: Vec<TableSchema>,
}

fn col(name: &'static str, ty: ColumnType, required: bool) -> ColumnSchema {
    ColumnSchema { name, ty, required }
}

fn subject() -> ColumnSchema {
    col("subject_id", ColumnType::Identifier(IdKind::Integer), true)
}

fn hadm(required: bool) -> ColumnSchema {
    col("hadm_id", ColumnType::Identifier(IdKind::Integer), required)
}

fn study() -> ColumnSchema {
    col("study_id", ColumnType::Identifier(IdKind::Integer), true)
}

fn at(name: &'static str) -> ColumnSchema {
    col(name, ColumnType::DateTime, true)
}

impl SchemaRegistry {
    pub fn mimic_iv() -> Self {
        use ColumnType::*;
        let t = |name, columns, required, unique_key| TableSchema {
            name,
            columns,
            required,
            unique_key,
        };
        let tables = vec![
            t(
                "patients",
                vec![
                    subject(),
                    col("gender", Enum(GENDERS), false),
                    col("anchor_age", Numeric, false),
                ],
                true,
                Some("subject_id"),
            ),
            t(
                "admissions",
                vec![
                    subject(),
                    hadm(true),
                    at("admittime"),
                    at("dischtime"),
                    col("admission_type", Text, false),
                ],
                true,
                Some("hadm_id"),
            ),
            t(
                "diagnoses_icd",
                vec![
                    subject(),
                    hadm(true),
                    col("seq_num", Numeric, false),
                    col("icd_code", Code, true),
                    col("icd_version", Enum(ICD_VERSIONS), true),
                ],
                true,
                None,
            ),
            t(
                "d_icd_diagnoses",
                vec![
                    col("icd_code", Code, true),
                    col("icd_version", Enum(ICD_VERSIONS), true),
                    col("long_title", Text, true),
                ],
                false,
                None,
            ),
            t(
                "labevents",
                vec![
                    subject(),
                    hadm(false),
                    col("itemid", Code, true),
                    at("charttime"),
                    col("valuenum", Numeric, false),
                ],
                true,
                None,
            ),
            t(
                "notes",
                vec![
                    col("note_id", Identifier(IdKind::Text), true),
                    subject(),
                    hadm(false),
                    col("note_type", Enum(NOTE_TYPES), true),
                    at("charttime"),
                    col("text", Text, false),
                ],
                true,
                Some("note_id"),
            ),
            t(
                "cxr_metadata",
                vec![
                    col("dicom_id", Identifier(IdKind::Text), true),
                    subject(),
                    study(),
                    hadm(false),
                    col("view_position", Enum(VIEWS), true),
                    at("study_time"),
                ],
                true,
                Some("dicom_id"),
            ),
            t(
                "ecg_metadata",
                vec![
                    study(),
                    subject(),
                    hadm(false),
                    at("ecg_time"),
                    col("lead_count", Numeric, false),
                    col("duration_s", Numeric, false),
                ],
                true,
                Some("study_id"),
            ),
            t(
                "echo_metadata",
                vec![study(), subject(), hadm(false), at("study_time")],
                true,
                Some("study_id"),
            ),
            t(
                "waveform_metadata",
                vec![
                    study(),
                    subject(),
                    hadm(false),
                    at("start_time"),
                    col("signal_type", Text, false),
                ],
                true,
                Some("study_id"),
            ),
            t(
                "inputevents",
                vec![
                    subject(),
                    hadm(true),
                    col("itemid", Code, true),
                    at("starttime"),
                    at("endtime"),
                    col("amount", Numeric, true),
                ],
                false,
                None,
            ),
            t(
                "procedureevents",
                vec![
                    subject(),
                    hadm(true),
                    col("itemid", Code, true),
                    at("starttime"),
                    col("endtime", DateTime, false),
                ],
                false,
                None,
            ),
        ];
        SchemaRegistry { tables }
    }

    pub fn tables(&self) -> &[TableSchema] {
        &self.tables
    }

    pub fn table(&self, name: &str) -> Option<&TableSchema> {
        self.tables.iter().find(|t| t.name == name)
    }
}

impl Default for SchemaRegistry {
    fn default() -> Self {
        Self::mimic_iv()
    }
}
