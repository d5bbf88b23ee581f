//! End-to-end run: search → sectionize → resolve → align → embed → export.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::align::{
    bin_records, bins_for, compute_widths, encode_med_proc, impute, per_bin_counts, widen, write_alignment_log,
    AlignmentPlan, Granularity, MedicationEvent, PartitionStats, ProcedureEvent, StructuredEvent, TemporalBin,
    WideTable,
};
use crate::assets::{resolve_records, write_records_csv, ModalityRecord, PathConvention};
use crate::cohort::{cohort_stats, search, Cohort, CohortSpec, CoverageReport};
use crate::embed::{attach_embeddings, embed_sources, EmbedIssue, EmbedSources, EmbeddingBindings};
use crate::error::{Error, Result};
use crate::export::{
    hash_file, write_appendix_csv, write_csv_artifact, write_json_artifact, AppendixRow, ArtifactHash,
};
use crate::ingest::{load_snapshot_with, write_rejects, DatasetSnapshot, LoadOptions, Reject};
use crate::modality::{EmbedModality, Modality, NoteTypeFilter, ViewPosition};
use crate::sectionize::{compile_lexicon, sectionize_table, write_sections_csv, HeaderLexicon};

/// Data groups a run can pull in. `structured` covers labs plus, when the
/// tables exist, medication and procedure events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunModality {
    Structured,
    Notes,
    Cxr,
    Ecg,
    Echo,
    Waveform,
}

impl RunModality {
    pub const ALL: [RunModality; 6] = [
        RunModality::Structured,
        RunModality::Notes,
        RunModality::Cxr,
        RunModality::Ecg,
        RunModality::Echo,
        RunModality::Waveform,
    ];
}

/// Record modalities implied by the run's groups and note filter.
pub fn record_modalities(groups: &BTreeSet<RunModality>, notes: NoteTypeFilter) -> BTreeSet<Modality> {
    let mut out = BTreeSet::new();
    for g in groups {
        match g {
            RunModality::Structured => {}
            RunModality::Notes => out.extend(notes.modalities()),
            RunModality::Cxr => {
                out.insert(Modality::Cxr);
            }
            RunModality::Ecg => {
                out.insert(Modality::Ecg);
            }
            RunModality::Echo => {
                out.insert(Modality::Echo);
            }
            RunModality::Waveform => {
                out.insert(Modality::Waveform);
            }
        }
    }
    out
}

fn default_version() -> String {
    "mimic-iv".to_string()
}

fn default_groups() -> BTreeSet<RunModality> {
    RunModality::ALL.into_iter().collect()
}

fn default_reject_pct() -> f64 {
    LoadOptions::default().max_reject_pct
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    #[serde(default = "default_version")]
    pub version_tag: String,
    pub cohort: CohortSpec,
    #[serde(default)]
    pub note_type_filter: NoteTypeFilter,
    #[serde(default = "default_groups")]
    pub modalities: BTreeSet<RunModality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_filter: Option<BTreeSet<ViewPosition>>,
    #[serde(default)]
    pub plan: AlignmentPlan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<EmbeddingBindings>,
    pub output_dir: PathBuf,
    /// Header lexicon JSON; the built-in lexicon when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    /// Path-convention JSON; the default MIMIC layout when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_convention: Option<PathBuf>,
    #[serde(default = "default_reject_pct")]
    pub max_reject_pct: f64,
}

impl RunConfig {
    pub fn new(dataset_root: impl Into<PathBuf>, cohort: CohortSpec, output_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            dataset_root: dataset_root.into(),
            version_tag: default_version(),
            cohort,
            note_type_filter: NoteTypeFilter::default(),
            modalities: default_groups(),
            view_filter: None,
            plan: AlignmentPlan::default(),
            embeddings: None,
            output_dir: output_dir.into(),
            lexicon: None,
            path_convention: None,
            max_reject_pct: default_reject_pct(),
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }

    /// Everything that can be checked without loading data, except the
    /// dataset root itself.
    pub fn validate_shape(&self) -> Result<()> {
        self.cohort.validate()?;
        self.plan.validate()?;
        if let Some(e) = &self.embeddings {
            e.validate()?;
        }
        if self.modalities.is_empty() {
            return Err(Error::config("modalities", "select at least one modality"));
        }
        if let Some(v) = &self.view_filter {
            if v.is_empty() {
                return Err(Error::config("view_filter", "an empty view filter keeps no images"));
            }
        }
        if !(0.0..=100.0).contains(&self.max_reject_pct) {
            return Err(Error::config("max_reject_pct", "must be in [0, 100]"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must be set"));
        }
        for (field, p) in [("lexicon", &self.lexicon), ("path_convention", &self.path_convention)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::config(field, format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset_root.is_dir() {
            return Err(Error::config(
                "dataset_root",
                format!("{} is not a directory", self.dataset_root.display()),
            ));
        }
        self.validate_shape()
    }

    fn lexicon(&self) -> Result<HeaderLexicon> {
        match &self.lexicon {
            Some(p) => HeaderLexicon::from_json_file(p),
            None => Ok(HeaderLexicon::default()),
        }
    }

    fn paths(&self) -> Result<PathConvention> {
        match &self.path_convention {
            Some(p) => PathConvention::from_json_file(p),
            None => Ok(PathConvention::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: usize,
    pub columns: usize,
    pub cohort_admissions: usize,
    pub cohort_subjects: usize,
    pub sections: usize,
    pub anchored_records: usize,
    pub unanchored_records: usize,
    pub rejects: usize,
    pub embed_errors: usize,
    pub widths: BTreeMap<Modality, usize>,
    pub cutoffs: BTreeMap<Modality, u32>,
    pub partition: PartitionStats,
    pub stages: Vec<StageTiming>,
    pub total_seconds: f64,
    pub config: RunConfig,
    pub artifacts: Vec<ArtifactHash>,
}

struct Stages {
    timings: Vec<StageTiming>,
    started: Instant,
}

impl Stages {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: t.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

/// Loads the dataset named by `config` and runs every stage.
pub fn run_pipeline(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let mut stages = Stages {
        timings: Vec::new(),
        started: Instant::now(),
    };
    let snapshot = stages.run("load", || {
        load_snapshot_with(
            &config.dataset_root,
            &config.version_tag,
            &LoadOptions {
                max_reject_pct: config.max_reject_pct,
            },
        )
    })?;
    run_stages(&snapshot, config, stages)
}

/// Runs against an already loaded snapshot; `config.dataset_root` is only
/// echoed in the report.
pub fn run_pipeline_with(snapshot: &DatasetSnapshot, config: &RunConfig) -> Result<RunReport> {
    config.validate_shape()?;
    let stages = Stages {
        timings: Vec::new(),
        started: Instant::now(),
    };
    run_stages(snapshot, config, stages)
}

/// Cohort records plus the admissions and bins they align to.
pub struct Prepared {
    pub cohort: Cohort,
    pub bins: Vec<TemporalBin>,
    pub records: Vec<ModalityRecord>,
    pub unanchored: Vec<ModalityRecord>,
}

pub fn prepare(
    snapshot: &DatasetSnapshot,
    cohort: Cohort,
    modalities: &BTreeSet<Modality>,
    view_filter: Option<&BTreeSet<ViewPosition>>,
    paths: &PathConvention,
    granularity: Granularity,
) -> Result<Prepared> {
    let resolved = resolve_records(snapshot, &cohort, modalities, view_filter, paths)?;
    let records = resolved
        .anchored
        .into_iter()
        .filter(|r| cohort.contains(r.subject_id, r.hadm_id.expect("anchored")))
        .collect();
    let bins = cohort
        .admissions(snapshot)
        .iter()
        .flat_map(|w| bins_for(w, granularity))
        .collect();
    Ok(Prepared {
        cohort,
        bins,
        records,
        unanchored: resolved.unanchored,
    })
}

fn lab_events(snapshot: &DatasetSnapshot, cohort: &Cohort) -> Result<Vec<StructuredEvent>> {
    let t = snapshot
        .table("labevents")
        .ok_or_else(|| Error::MissingTable("labevents".into()))?;
    let (hadms, items, times, values) = (t.ints("hadm_id"), t.texts("itemid"), t.datetimes("charttime"), t.floats("valuenum"));
    let mut out = Vec::new();
    for subject in cohort.subjects() {
        for &row in snapshot.rows_for_subject("labevents", subject) {
            let Some(value) = values[row] else { continue };
            let time = times[row].expect("required");
            let Some(hadm) = snapshot.anchor(subject, hadms[row], time)? else { continue };
            if cohort.contains(subject, hadm) {
                out.push(StructuredEvent {
                    subject_id: subject,
                    hadm_id: hadm,
                    itemid: items[row].clone().expect("required"),
                    time,
                    value,
                });
            }
        }
    }
    Ok(out)
}

/// Medication and procedure rows of cohort admissions; empty when the
/// optional tables are absent.
pub fn med_proc_events(snapshot: &DatasetSnapshot, cohort: &Cohort) -> (Vec<MedicationEvent>, Vec<ProcedureEvent>) {
    let mut meds = Vec::new();
    if let Some(t) = snapshot.table("inputevents") {
        let (s, h, i, st, en, a) = (
            t.ints("subject_id"),
            t.ints("hadm_id"),
            t.texts("itemid"),
            t.datetimes("starttime"),
            t.datetimes("endtime"),
            t.floats("amount"),
        );
        for row in 0..t.len() {
            let (subject, hadm) = (s[row].expect("required"), h[row].expect("required"));
            if cohort.contains(subject, hadm) {
                meds.push(MedicationEvent {
                    subject_id: subject,
                    hadm_id: hadm,
                    itemid: i[row].clone().expect("required"),
                    start: st[row].expect("required"),
                    end: en[row].expect("required"),
                    dose: a[row].expect("required"),
                });
            }
        }
    }
    let mut procs = Vec::new();
    if let Some(t) = snapshot.table("procedureevents") {
        let (s, h, i, st, en) = (
            t.ints("subject_id"),
            t.ints("hadm_id"),
            t.texts("itemid"),
            t.datetimes("starttime"),
            t.datetimes("endtime"),
        );
        for row in 0..t.len() {
            let (subject, hadm) = (s[row].expect("required"), h[row].expect("required"));
            if cohort.contains(subject, hadm) {
                procs.push(ProcedureEvent {
                    subject_id: subject,
                    hadm_id: hadm,
                    itemid: i[row].clone().expect("required"),
                    start: st[row].expect("required"),
                    end: en[row],
                });
            }
        }
    }
    (meds, procs)
}

fn note_texts(snapshot: &DatasetSnapshot, cohort: &Cohort) -> HashMap<String, String> {
    let mut out = HashMap::new();
    let Some(t) = snapshot.table("notes") else { return out };
    let (ids, texts) = (t.texts("note_id"), t.texts("text"));
    for subject in cohort.subjects() {
        for &row in snapshot.rows_for_subject("notes", subject) {
            if let Some(id) = &ids[row] {
                out.insert(id.clone(), texts[row].clone().unwrap_or_default());
            }
        }
    }
    out
}

/// Appendix-shaped rows: per cxr study, the mean image vector and the
/// nearest-in-time radiology report of the same admission.
fn appendix_rows(
    records: &[ModalityRecord],
    bindings: &EmbeddingBindings,
    sources: &EmbedSources,
) -> Result<(Vec<AppendixRow>, Vec<EmbedIssue>)> {
    let mut studies: BTreeMap<(i64, i64), Vec<&ModalityRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.modality == Modality::Cxr) {
        studies
            .entry((r.subject_id, r.study_id.expect("cxr study")))
            .or_default()
            .push(r);
    }
    let reports: Vec<&ModalityRecord> = records.iter().filter(|r| r.modality == Modality::Rr).collect();

    let mut wanted = BTreeSet::new();
    let mut plan = Vec::new();
    for ((subject, study), images) in &studies {
        let first = images[0];
        let note = reports
            .iter()
            .filter(|n| n.hadm_id == first.hadm_id)
            .min_by_key(|n| {
                let gap = (n.event_time - first.event_time).num_seconds().abs();
                (gap, n.event_time, n.note_id.clone())
            })
            .and_then(|n| n.note_id.clone());
        if bindings.for_family(EmbedModality::Text).is_some() {
            if let Some(n) = &note {
                wanted.insert((Modality::Rr, n.clone()));
            }
        }
        if bindings.for_family(EmbedModality::Img).is_some() {
            for r in images {
                wanted.insert((Modality::Cxr, r.slot_value()));
            }
        }
        plan.push((*subject, *study, note, images));
    }
    let wanted: Vec<(Modality, String)> = wanted.into_iter().collect();
    let (cells, issues) = embed_sources(&wanted, bindings, sources)?;

    let mut rows = Vec::with_capacity(plan.len());
    for (subject, study, note, images) in plan {
        let text_embed = note
            .as_ref()
            .and_then(|n| cells.get(&(Modality::Rr, n.clone())))
            .cloned();
        let vectors: Vec<Vec<f64>> = images
            .iter()
            .filter_map(|r| cells.get(&(Modality::Cxr, r.slot_value())))
            .map(|json| serde_json::from_str(json))
            .collect::<std::result::Result<_, _>>()?;
        let img_embed = if vectors.len() == images.len() && !vectors.is_empty() {
            Some(serde_json::to_string(&crate::embed::mean_pool(&vectors)?)?)
        } else {
            None
        };
        rows.push(AppendixRow {
            subject_id: subject,
            study_id: study,
            note_id: note,
            text_embed,
            img_embed,
        });
    }
    Ok((rows, issues))
}

fn write_embed_issues(issues: &[EmbedIssue], out: impl std::io::Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["modality", "source_id", "reason"])?;
    for i in issues {
        w.write_record([i.modality.as_str(), &i.source_id, &i.reason])?;
    }
    w.flush()?;
    Ok(())
}

static STAGING_SEQ: AtomicU64 = AtomicU64::new(0);

fn staging_dir(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let seq = STAGING_SEQ.fetch_add(1, Ordering::Relaxed);
    out.with_file_name(format!(".{name}.staging-{}-{seq}", std::process::id()))
}

fn run_stages(snapshot: &DatasetSnapshot, config: &RunConfig, mut stages: Stages) -> Result<RunReport> {
    let out_dir = &config.output_dir;
    if let Some(parent) = out_dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let staging = staging_dir(out_dir);
    std::fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let result = run_into(snapshot, config, &mut stages, &staging);
    match result {
        Ok(mut report) => {
            let published = publish(&staging, out_dir, &report.artifacts);
            if let Err(e) = published {
                let _ = std::fs::remove_dir_all(&staging);
                return Err(e.in_stage("export"));
            }
            report.total_seconds = stages.started.elapsed().as_secs_f64();
            report.stages = stages.timings;
            write_json_artifact(out_dir, "report.json", &report).map_err(|e| e.in_stage("export"))?;
            Ok(report)
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn publish(staging: &Path, out_dir: &Path, artifacts: &[ArtifactHash]) -> Result<()> {
    if !out_dir.exists() {
        return std::fs::rename(staging, out_dir).map_err(|e| Error::io(out_dir, e));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for a in artifacts {
        let to = out_dir.join(&a.name);
        std::fs::rename(staging.join(&a.name), &to).map_err(|e| Error::io(&to, e))?;
    }
    std::fs::remove_dir_all(staging).map_err(|e| Error::io(staging, e))
}

fn run_into(
    snapshot: &DatasetSnapshot,
    config: &RunConfig,
    stages: &mut Stages,
    dir: &Path,
) -> Result<RunReport> {
    let modalities = record_modalities(&config.modalities, config.note_type_filter);
    let structured = config.modalities.contains(&RunModality::Structured);
    let (lexicon, paths) = stages.run("config", || Ok((config.lexicon()?, config.paths()?)))?;

    let cohort = stages.run("search", || search(snapshot, &config.cohort))?;

    let sections = stages.run("sectionize", || {
        if !config.modalities.contains(&RunModality::Notes) {
            return Ok(Vec::new());
        }
        let matcher = compile_lexicon(&lexicon)?;
        sectionize_table(snapshot, &cohort, config.note_type_filter, &matcher)
    })?;

    let cohort_for_prepare = cohort.clone();
    let prepared = stages.run("resolve", || {
        prepare(
            snapshot,
            cohort_for_prepare,
            &modalities,
            config.view_filter.as_ref(),
            &paths,
            config.plan.granularity,
        )
    })?;

    let mut rejects: Vec<Reject> = snapshot.rejects().to_vec();
    let (outcome, widths) = stages.run("align", || {
        let labs = if structured { lab_events(snapshot, &cohort)? } else { Vec::new() };
        let binned = bin_records(&prepared.bins, &prepared.records, config.plan.granularity)?;
        let widths = compute_widths(&per_bin_counts(&binned), config.plan.percentile_k)?;
        let mut plan = config.plan.clone();
        plan.widths = widths.widths.clone();
        let mut outcome = widen(&prepared.bins, &prepared.records, &labs, &plan, &widths)?;
        if structured {
            let (meds, procs) = med_proc_events(snapshot, &cohort);
            let encoded = encode_med_proc(&meds, &procs, &prepared.bins);
            let fill = encoded.fill();
            outcome.table.append_columns(encoded.columns, &encoded.values, &fill);
            rejects.extend(encoded.rejects);
        }
        Ok((outcome, widths))
    })?;

    let table: WideTable = stages.run("impute", || Ok(impute(&outcome.table, &config.plan)))?;

    let (table, issues, appendix) = stages.run("embed", || match &config.embeddings {
        None => Ok((table, Vec::new(), None)),
        Some(bindings) => {
            let sources = EmbedSources {
                note_texts: note_texts(snapshot, &cohort),
                asset_root: config.dataset_root.clone(),
            };
            let (table, mut issues) = attach_embeddings(&table, bindings, &sources)?;
            let (rows, more) = appendix_rows(&prepared.records, bindings, &sources)?;
            issues.extend(more);
            issues.sort_by(|a, b| (a.modality, &a.source_id, &a.reason).cmp(&(b.modality, &b.source_id, &b.reason)));
            issues.dedup();
            Ok((table, issues, Some(rows)))
        }
    })?;

    let artifacts = stages.run("export", || {
        let mut names = vec![
            "integrated.csv",
            "sections.csv",
            "cohort.csv",
            "alignment_log.csv",
            "unanchored.csv",
            "rejects.csv",
        ];
        write_csv_artifact(dir, "integrated.csv", |w| table.write_csv(w))?;
        write_csv_artifact(dir, "sections.csv", |w| write_sections_csv(&sections, w))?;
        write_csv_artifact(dir, "cohort.csv", |w| cohort.write_csv(w))?;
        write_csv_artifact(dir, "alignment_log.csv", |w| write_alignment_log(&outcome.log, w))?;
        write_csv_artifact(dir, "unanchored.csv", |w| write_records_csv(&prepared.unanchored, w))?;
        write_rejects(&rejects, dir.join("rejects.csv"))?;
        if let Some(rows) = &appendix {
            write_csv_artifact(dir, "embeddings.csv", |w| write_appendix_csv(rows, w))?;
            write_csv_artifact(dir, "embed_errors.csv", |w| write_embed_issues(&issues, w))?;
            names.extend(["embeddings.csv", "embed_errors.csv"]);
        }
        names.iter().map(|n| hash_file(dir.join(n))).collect::<Result<Vec<_>>>()
    })?;

    Ok(RunReport {
        rows: table.len(),
        columns: table.columns.len(),
        cohort_admissions: cohort.len(),
        cohort_subjects: cohort.subjects().len(),
        sections: sections.len(),
        anchored_records: prepared.records.len(),
        unanchored_records: prepared.unanchored.len(),
        rejects: rejects.len(),
        embed_errors: issues.len(),
        widths: widths.widths,
        cutoffs: widths.cutoffs,
        partition: outcome.stats,
        stages: Vec::new(),
        total_seconds: 0.0,
        config: config.clone(),
        artifacts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortPreview {
    pub admissions: usize,
    pub subjects: usize,
    /// Pattern → concrete codes it matched.
    pub matched_codes: BTreeMap<String, BTreeSet<String>>,
    pub coverage: CoverageReport,
}

pub fn preview_cohort(snapshot: &DatasetSnapshot, spec: &CohortSpec) -> Result<CohortPreview> {
    let cohort = search(snapshot, spec)?;
    Ok(CohortPreview {
        admissions: cohort.len(),
        subjects: cohort.subjects().len(),
        coverage: cohort_stats(&cohort, snapshot)?,
        matched_codes: cohort.matched_codes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthsQuery {
    pub cohort: CohortSpec,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    pub percentile_k: f64,
    #[serde(default = "default_groups")]
    pub modalities: BTreeSet<RunModality>,
    #[serde(default)]
    pub note_type_filter: NoteTypeFilter,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_filter: Option<BTreeSet<ViewPosition>>,
    #[serde(default = "crate::align::default_drop")]
    pub drop_over_threshold: bool,
}

fn default_granularity() -> Granularity {
    Granularity::Day
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthsPreview {
    pub widths: BTreeMap<Modality, usize>,
    pub cutoffs: BTreeMap<Modality, u32>,
    pub total_rows: usize,
    pub dropped_rows: usize,
    pub truncated_rows: usize,
    /// Fraction of slot cells left null in the rows that survive.
    pub sparsity: f64,
}

/// Widths and their consequences without building the table.
pub fn preview_widths(snapshot: &DatasetSnapshot, query: &WidthsQuery) -> Result<WidthsPreview> {
    crate::align::check_k(query.percentile_k)?;
    let cohort = search(snapshot, &query.cohort)?;
    let modalities = record_modalities(&query.modalities, query.note_type_filter);
    let prepared = prepare(
        snapshot,
        cohort,
        &modalities,
        query.view_filter.as_ref(),
        &PathConvention::default(),
        query.granularity,
    )?;
    let binned = bin_records(&prepared.bins, &prepared.records, query.granularity)?;
    let widths = compute_widths(&per_bin_counts(&binned), query.percentile_k)?;
    let slots_per_row: usize = widths.widths.values().sum();

    let mut dropped = 0;
    let mut truncated = 0;
    let mut filled = 0usize;
    for b in &prepared.bins {
        let per = binned.bins.get(&(b.hadm_id, b.bin_index));
        let over = per.is_some_and(|p| p.iter().any(|(m, l)| l.len() as u32 > widths.cutoff(*m)));
        if over && query.drop_over_threshold {
            dropped += 1;
            continue;
        }
        if over {
            truncated += 1;
        }
        if let Some(p) = per {
            filled += p.iter().map(|(m, l)| l.len().min(widths.width(*m))).sum::<usize>();
        }
    }
    let kept = prepared.bins.len() - dropped;
    let cells = kept * slots_per_row;
    Ok(WidthsPreview {
        widths: widths.widths,
        cutoffs: widths.cutoffs,
        total_rows: prepared.bins.len(),
        dropped_rows: dropped,
        truncated_rows: truncated,
        sparsity: if cells == 0 { 0.0 } else { 1.0 - filled as f64 / cells as f64 },
    })
}
