//! Rule-based note sectionizer.
//!
//! A header is a lexicon surface pattern at the start of a line (optionally
//! indented) followed by a colon. Each header opens a section that runs to
//! the next header or the end of the note. Text before the first header is
//! the `PREAMBLE` pseudo-section.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::ingest::DatasetSnapshot;
use crate::modality::{NoteType, NoteTypeFilter};

pub const PREAMBLE: &str = "PREAMBLE";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub name: String,
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderLexicon {
    pub entries: Vec<LexiconEntry>,
    #[serde(default)]
    pub case_sensitive: bool,
}

impl HeaderLexicon {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }
}

impl Default for HeaderLexicon {
    fn default() -> Self {
        let e = |name: &str, patterns: &[&str]| LexiconEntry {
            name: name.to_string(),
            patterns: patterns.iter().map(|p| p.to_string()).collect(),
        };
        HeaderLexicon {
            entries: vec![
                e("CHIEF COMPLAINT", &["Chief Complaint"]),
                e("HISTORY OF PRESENT ILLNESS", &["History of Present Illness", "HPI"]),
                e("PAST MEDICAL HISTORY", &["Past Medical History", "PMH"]),
                e("SOCIAL HISTORY", &["Social History"]),
                e("FAMILY HISTORY", &["Family History"]),
                e("ALLERGIES", &["Allergies"]),
                e("MEDICATIONS ON ADMISSION", &["Medications on Admission"]),
                e("PHYSICAL EXAM", &["Physical Exam"]),
                e("BRIEF HOSPITAL COURSE", &["Brief Hospital Course"]),
                e("CLINICAL ASSESSMENT", &["Clinical Assessment"]),
                e("DISCHARGE DIAGNOSIS", &["Discharge Diagnosis"]),
                e("INDICATION", &["Indication"]),
                e("COMPARISON", &["Comparison"]),
                e("TECHNIQUE", &["Technique"]),
                e("FINDINGS", &["Findings"]),
                e("IMPRESSION", &["Impression"]),
            ],
            case_sensitive: false,
        }
    }
}

/// Compiled, immutable header matcher.
#[derive(Debug, Clone)]
pub struct SectionMatcher {
    regex: Regex,
    names: Vec<String>,
}

pub fn compile_lexicon(lexicon: &HeaderLexicon) -> Result<SectionMatcher> {
    if lexicon.entries.is_empty() {
        return Err(Error::Lexicon("lexicon has no entries".into()));
    }
    let mut seen = HashSet::new();
    let mut alternatives = Vec::with_capacity(lexicon.entries.len());
    for entry in &lexicon.entries {
        let name = entry.name.trim();
        if name.is_empty() {
            return Err(Error::Lexicon("empty canonical name".into()));
        }
        if !seen.insert(name.to_string()) {
            return Err(Error::Lexicon(format!("duplicate canonical name `{name}`")));
        }
        if entry.patterns.is_empty() {
            return Err(Error::Lexicon(format!("`{name}` has no patterns")));
        }
        let mut pats = Vec::with_capacity(entry.patterns.len());
        for p in &entry.patterns {
            let words: Vec<String> = p.split_whitespace().map(regex::escape).collect();
            if words.is_empty() {
                return Err(Error::Lexicon(format!("empty pattern in `{name}`")));
            }
            pats.push(words.join(r"[ \t]+"));
        }
        pats.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        alternatives.push(format!("({})", pats.join("|")));
    }
    let source = format!(r"(?m)^[ \t]*(?:{})[ \t]*:", alternatives.join("|"));
    let regex = RegexBuilder::new(&source)
        .case_insensitive(!lexicon.case_sensitive)
        .size_limit(1 << 24)
        .build()
        .map_err(|e| Error::Lexicon(e.to_string()))?;
    Ok(SectionMatcher {
        regex,
        names: lexicon.entries.iter().map(|e| e.name.trim().to_string()).collect(),
    })
}

/// A header occurrence: canonical name plus the byte span of the header
/// token (line start through the colon).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderMatch {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl SectionMatcher {
    pub fn headers(&self, text: &str) -> Vec<HeaderMatch> {
        self.regex
            .captures_iter(text)
            .map(|caps| {
                let whole = caps.get(0).expect("group 0");
                let entry = (1..caps.len())
                    .find(|&g| caps.get(g).is_some())
                    .expect("one alternative matched")
                    - 1;
                HeaderMatch {
                    name: self.names[entry].clone(),
                    start: whole.start(),
                    end: whole.end(),
                }
            })
            .collect()
    }

    /// Canonical name for a single line, if it opens with a header.
    pub fn classify_line(&self, line: &str) -> Option<String> {
        self.headers(line)
            .into_iter()
            .find(|h| h.start == 0)
            .map(|h| h.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SectionBody {
    pub name: String,
    pub text: String,
    /// Raw byte span in the note, header included. Spans tile the note.
    pub char_span: (usize, usize),
}

pub fn sectionize(note_text: &str, matcher: &SectionMatcher) -> Vec<SectionBody> {
    let headers = matcher.headers(note_text);
    let mut out = Vec::with_capacity(headers.len() + 1);
    let Some(first) = headers.first() else {
        if !note_text.is_empty() {
            out.push(SectionBody {
                name: PREAMBLE.to_string(),
                text: note_text.trim().to_string(),
                char_span: (0, note_text.len()),
            });
        }
        return out;
    };
    let preamble = &note_text[..first.start];
    let mut start = 0;
    if !preamble.trim().is_empty() {
        out.push(SectionBody {
            name: PREAMBLE.to_string(),
            text: preamble.trim().to_string(),
            char_span: (0, first.start),
        });
        start = first.start;
    }
    for (i, h) in headers.iter().enumerate() {
        let end = headers.get(i + 1).map_or(note_text.len(), |n| n.start);
        out.push(SectionBody {
            name: h.name.clone(),
            text: note_text[h.end..end].trim().to_string(),
            char_span: (start, end),
        });
        start = end;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NoteSection {
    pub subject_id: i64,
    pub hadm_id: Option<i64>,
    pub note_id: String,
    pub section_id: String,
    pub section_name: String,
    pub section_text: String,
    pub char_span: (usize, usize),
}

pub fn section_id(note_id: &str, ordinal: usize) -> String {
    format!("{note_id}-S{ordinal}")
}

/// Sections of every cohort note of the chosen type, ordered by
/// (subject_id, hadm_id, note_id, ordinal). Notes without a `hadm_id` are
/// attributed by charttime.
pub fn sectionize_table(
    snapshot: &DatasetSnapshot,
    cohort: &Cohort,
    filter: NoteTypeFilter,
    matcher: &SectionMatcher,
) -> Result<Vec<NoteSection>> {
    let Some(notes) = snapshot.table("notes") else {
        return Err(Error::MissingTable("notes".into()));
    };
    let ids = notes.texts("note_id");
    let types = notes.texts("note_type");
    let hadms = notes.ints("hadm_id");
    let times = notes.datetimes("charttime");
    let texts = notes.texts("text");

    let mut picked = Vec::new();
    for subject in cohort.subjects() {
        for &row in snapshot.rows_for_subject("notes", subject) {
            let Some(kind) = types[row].as_deref().and_then(|t| t.parse::<NoteType>().ok()) else {
                continue;
            };
            if !filter.accepts(kind) {
                continue;
            }
            let time = times[row].expect("required");
            if let Some(h) = snapshot.anchor(subject, hadms[row], time)? {
                if cohort.contains(subject, h) {
                    picked.push((subject, h, row));
                }
            }
        }
    }
    picked.sort_by(|a, b| (a.0, a.1, &ids[a.2]).cmp(&(b.0, b.1, &ids[b.2])));

    Ok(picked
        .par_iter()
        .flat_map_iter(|&(subject, hadm, row)| {
            let note_id = ids[row].clone().expect("required");
            let text = texts[row].as_deref().unwrap_or("");
            sectionize(text, matcher)
                .into_iter()
                .enumerate()
                .map(move |(k, b)| NoteSection {
                    subject_id: subject,
                    hadm_id: Some(hadm),
                    section_id: section_id(&note_id, k + 1),
                    note_id: note_id.clone(),
                    section_name: b.name,
                    section_text: b.text,
                    char_span: b.char_span,
                })
        })
        .collect())
}

pub fn write_sections_csv<W: Write>(sections: &[NoteSection], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "subject_id",
        "hadm_id",
        "note_id",
        "section_id",
        "section_name",
        "section_text",
    ])?;
    for s in sections {
        w.write_record([
            s.subject_id.to_string().as_str(),
            &s.hadm_id.map(|h| h.to_string()).unwrap_or_default(),
            &s.note_id,
            &s.section_id,
            &s.section_name,
            &s.section_text,
        ])?;
    }
    w.flush()?;
    Ok(())
}
