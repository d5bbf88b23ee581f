//! JSON bodies exchanged by the HTTP service and its client.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::cohort::CohortSpec;
use crate::ingest::{DatasetSnapshot, LoadOptions};
use crate::pipeline::RunReport;

fn default_version() -> String {
    "mimic-iv".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadRequest {
    pub dataset_root: PathBuf,
    #[serde(default = "default_version")]
    pub version_tag: String,
    #[serde(default)]
    pub options: LoadOptions,
}

impl LoadRequest {
    pub fn new(dataset_root: impl Into<PathBuf>) -> Self {
        LoadRequest {
            dataset_root: dataset_root.into(),
            version_tag: default_version(),
            options: LoadOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub dataset_root: PathBuf,
    pub version_tag: String,
    /// Table name → loaded row count.
    pub tables: BTreeMap<String, usize>,
    pub subjects: usize,
    pub admissions: usize,
    pub rejects: usize,
}

impl SnapshotSummary {
    pub fn of(snapshot: &DatasetSnapshot) -> Self {
        SnapshotSummary {
            dataset_root: snapshot.root().to_path_buf(),
            version_tag: snapshot.version_tag().to_string(),
            tables: snapshot.tables().map(|t| (t.name.clone(), t.len())).collect(),
            subjects: snapshot.subject_count(),
            admissions: snapshot.admissions().len(),
            rejects: snapshot.rejects().len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortPreviewRequest {
    pub cohort: CohortSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStarted {
    pub run_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Queued,
    Running,
    Done,
    Failed,
}

impl RunState {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunState::Done | RunState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: String,
    pub state: RunState,
    /// Stage that failed, when the run failed inside one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<RunReport>,
}

/// Error payload; `field` names the offending config field when known.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
}
