use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Event-bearing modalities that occupy slot columns in the wide table.
///
/// Notes are split by type so that discharge summaries and radiology reports
/// get separate column families (`ds_1..`, `rr_1..`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ds,
    Rr,
    Cxr,
    Ecg,
    Echo,
    Waveform,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::Ds,
        Modality::Rr,
        Modality::Cxr,
        Modality::Ecg,
        Modality::Echo,
        Modality::Waveform,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ds => "ds",
            Modality::Rr => "rr",
            Modality::Cxr => "cxr",
            Modality::Ecg => "ecg",
            Modality::Echo => "echo",
            Modality::Waveform => "waveform",
        }
    }

    pub fn is_note(self) -> bool {
        matches!(self, Modality::Ds | Modality::Rr)
    }

    /// Metadata table backing this modality.
    pub fn table(self) -> &'static str {
        match self {
            Modality::Ds | Modality::Rr => "notes",
            Modality::Cxr => "cxr_metadata",
            Modality::Ecg => "ecg_metadata",
            Modality::Echo => "echo_metadata",
            Modality::Waveform => "waveform_metadata",
        }
    }

    pub fn embed_family(self) -> EmbedModality {
        match self {
            Modality::Ds | Modality::Rr => EmbedModality::Text,
            Modality::Ecg | Modality::Waveform => EmbedModality::Signal,
            Modality::Cxr | Modality::Echo => EmbedModality::Img,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::unknown("modality", s))
    }
}

/// Embedding column families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedModality {
    Text,
    Signal,
    Img,
}

impl EmbedModality {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbedModality::Text => "text",
            EmbedModality::Signal => "signal",
            EmbedModality::Img => "img",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NoteType {
    #[serde(rename = "DS")]
    Ds,
    #[serde(rename = "RR")]
    Rr,
}

impl NoteType {
    pub fn as_str(self) -> &'static str {
        match self {
            NoteType::Ds => "DS",
            NoteType::Rr => "RR",
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            NoteType::Ds => Modality::Ds,
            NoteType::Rr => Modality::Rr,
        }
    }
}

impl FromStr for NoteType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "DS" => Ok(NoteType::Ds),
            "RR" => Ok(NoteType::Rr),
            _ => Err(Error::unknown("note type", s)),
        }
    }
}

/// Which note types a run keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoteTypeFilter {
    #[serde(rename = "DS")]
    Ds,
    #[serde(rename = "RR")]
    Rr,
    #[default]
    Both,
}

impl NoteTypeFilter {
    pub fn accepts(self, t: NoteType) -> bool {
        match self {
            NoteTypeFilter::Ds => t == NoteType::Ds,
            NoteTypeFilter::Rr => t == NoteType::Rr,
            NoteTypeFilter::Both => true,
        }
    }

    pub fn modalities(self) -> Vec<Modality> {
        match self {
            NoteTypeFilter::Ds => vec![Modality::Ds],
            NoteTypeFilter::Rr => vec![Modality::Rr],
            NoteTypeFilter::Both => vec![Modality::Ds, Modality::Rr],
        }
    }
}

impl FromStr for NoteTypeFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "DS" => Ok(NoteTypeFilter::Ds),
            "RR" => Ok(NoteTypeFilter::Rr),
            "BOTH" => Ok(NoteTypeFilter::Both),
            _ => Err(Error::unknown("note type filter", s)),
        }
    }
}

/// Chest X-ray view position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViewPosition {
    #[serde(rename = "PA")]
    Pa,
    #[serde(rename = "AP")]
    Ap,
    #[serde(rename = "LATERAL")]
    Lateral,
}

impl ViewPosition {
    pub const ALL: [ViewPosition; 3] = [ViewPosition::Pa, ViewPosition::Ap, ViewPosition::Lateral];
    pub const NAMES: [&'static str; 3] = ["PA", "AP", "LATERAL"];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewPosition::Pa => "PA",
            ViewPosition::Ap => "AP",
            ViewPosition::Lateral => "LATERAL",
        }
    }
}

impl fmt::Display for ViewPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ViewPosition::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::unknown("view position", s))
    }
}
