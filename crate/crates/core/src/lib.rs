//! Multimodal EHR integration engine.
//!
//! Turns MIMIC-IV-schema CSV tables plus modality metadata (notes, chest
//! X-rays, ECGs, physiologic waveforms, echocardiograms) into one temporally
//! aligned wide table per cohort.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`forge`] writes a deterministic synthetic corpus with a ground-truth manifest.
//! * [`ingest`] validates and loads CSV tables into an immutable [`DatasetSnapshot`].
//! * [`cohort`] resolves ICD-based (or all-subjects) cohorts.
//! * [`sectionize`] splits notes into header-delimited sections.
//! * [`assets`] anchors modality metadata to admissions and renders file paths.
//! * [`align`] bins, widens, thresholds and imputes.
//! * [`embed`] chunks, hashes and mean-pools embedding columns.
//! * [`pipeline`] orchestrates a full run and the interactive previews.
//! * [`api`] holds the JSON bodies of the HTTP service.

pub mod align;
pub mod api;
pub mod assets;
pub mod cohort;
pub mod embed;
pub mod error;
pub mod export;
pub mod forge;
pub mod ingest;
pub mod modality;
pub mod pipeline;
pub mod sectionize;
pub mod time;

pub use error::{Error, Result};
pub use ingest::DatasetSnapshot;
pub use modality::Modality;
