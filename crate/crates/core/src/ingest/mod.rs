//! CSV ingestion into an immutable, indexed [`DatasetSnapshot`].
//!
//! Invalid rows never abort a load on their own: they are collected into a
//! reject report (`rejects.csv`) and the row is skipped. A load only fails
//! when a required table or column is missing, or when a table's reject
//! fraction exceeds [`LoadOptions::max_reject_pct`].

pub mod schema;
pub mod table;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::{format_datetime, parse_datetime};
pub use schema::{ColumnType, IdKind, SchemaRegistry, TableSchema};
pub use table::{Column, ColumnData, Table, Value};

/// One admission's closed interval `[admittime, dischtime]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissionWindow {
    pub subject_id: i64,
    pub hadm_id: i64,
    #[serde(with = "crate::time::serde_datetime")]
    pub admittime: NaiveDateTime,
    #[serde(with = "crate::time::serde_datetime")]
    pub dischtime: NaiveDateTime,
}

impl AdmissionWindow {
    pub fn contains(&self, t: NaiveDateTime) -> bool {
        self.admittime <= t && t <= self.dischtime
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub table: String,
    /// 1-based data row number (the header is not counted).
    pub row: usize,
    pub column: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub max_reject_pct: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { max_reject_pct: 5.0 }
    }
}

#[derive(Debug)]
pub struct DatasetSnapshot {
    root: PathBuf,
    version_tag: String,
    tables: BTreeMap<String, Table>,
    rejects: Vec<Reject>,
    admissions: Vec<AdmissionWindow>,
    admissions_by_subject: HashMap<i64, Range<usize>>,
    admission_by_hadm: HashMap<i64, usize>,
    subject_rows: HashMap<String, HashMap<i64, Vec<usize>>>,
}

pub fn load_snapshot(root: impl AsRef<Path>, version_tag: &str) -> Result<DatasetSnapshot> {
    load_snapshot_with(root, version_tag, &LoadOptions::default())
}

pub fn load_snapshot_with(
    root: impl AsRef<Path>,
    version_tag: &str,
    options: &LoadOptions,
) -> Result<DatasetSnapshot> {
    let root = root.as_ref();
    let registry = SchemaRegistry::mimic_iv();
    for t in registry.tables().iter().filter(|t| t.required) {
        if !root.join(t.file_name()).is_file() {
            return Err(Error::MissingTable(t.name.to_string()));
        }
    }

    let mut tables = BTreeMap::new();
    let mut rejects = Vec::new();

    let mut ctx = RowContext::default();
    let patients = registry.table("patients").expect("registered");
    let (t, r) = load_table(root, patients, &ctx, options)?.expect("required table present");
    ctx.subjects = Some(t.ints("subject_id").iter().flatten().copied().collect());
    tables.insert(t.name.clone(), t);
    rejects.extend(r);

    let admissions = registry.table("admissions").expect("registered");
    let (t, r) = load_table(root, admissions, &ctx, options)?.expect("required table present");
    ctx.hadm_subject = Some(
        t.ints("hadm_id")
            .iter()
            .zip(t.ints("subject_id"))
            .map(|(h, s)| (h.expect("required"), s.expect("required")))
            .collect(),
    );
    tables.insert(t.name.clone(), t);
    rejects.extend(r);

    let rest: Vec<_> = registry
        .tables()
        .iter()
        .filter(|t| t.name != "patients" && t.name != "admissions")
        .collect();
    let loaded: Vec<Option<(Table, Vec<Reject>)>> = rest
        .par_iter()
        .map(|schema| load_table(root, schema, &ctx, options))
        .collect::<Result<_>>()?;
    for (t, r) in loaded.into_iter().flatten() {
        tables.insert(t.name.clone(), t);
        rejects.extend(r);
    }
    rejects.sort_by(|a, b| (&a.table, a.row).cmp(&(&b.table, b.row)));

    Ok(DatasetSnapshot::index(
        root.to_path_buf(),
        version_tag.to_string(),
        tables,
        rejects,
    ))
}

#[derive(Default)]
struct RowContext {
    subjects: Option<HashSet<i64>>,
    hadm_subject: Option<HashMap<i64, i64>>,
}

fn load_table(
    root: &Path,
    schema: &TableSchema,
    ctx: &RowContext,
    options: &LoadOptions,
) -> Result<Option<(Table, Vec<Reject>)>> {
    let path = root.join(schema.file_name());
    if !path.is_file() {
        if schema.required {
            return Err(Error::MissingTable(schema.name.to_string()));
        }
        return Ok(None);
    }
    let csv_err = |source| Error::Csv {
        context: path.display().to_string(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&path)
        .map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    let mut positions = Vec::with_capacity(schema.columns.len());
    for c in &schema.columns {
        let pos = header.iter().position(|h| h == c.name);
        if pos.is_none() && c.required {
            return Err(Error::MissingColumn {
                table: schema.name.to_string(),
                column: c.name.to_string(),
            });
        }
        positions.push(pos);
    }

    let mut table = Table::new(schema);
    let mut rejects = Vec::new();
    let mut seen_keys = HashSet::new();
    let key_pos = schema
        .unique_key
        .and_then(|k| schema.columns.iter().position(|c| c.name == k));
    let mut total = 0;
    for (i, record) in reader.records().enumerate() {
        let row_no = i + 1;
        total += 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                rejects.push(reject(schema, row_no, None, format!("malformed record: {e}")));
                continue;
            }
        };
        let parsed = parse_row(schema, &positions, &record).and_then(|row| {
            check_row(schema, &row, ctx)?;
            if let Some(k) = key_pos {
                let key = format!("{:?}", row[k]);
                if !seen_keys.insert(key) {
                    return Err((
                        Some(schema.columns[k].name),
                        "duplicate key value".to_string(),
                    ));
                }
            }
            Ok(row)
        });
        match parsed {
            Ok(row) => table.push_row(row),
            Err((column, reason)) => rejects.push(reject(schema, row_no, column, reason)),
        }
    }

    if total > 0 && rejects.len() as f64 * 100.0 / total as f64 > options.max_reject_pct {
        return Err(Error::TooManyRejects {
            table: schema.name.to_string(),
            rejected: rejects.len(),
            total,
            limit_pct: options.max_reject_pct,
        });
    }
    Ok(Some((table, rejects)))
}

fn reject(schema: &TableSchema, row: usize, column: Option<&str>, reason: String) -> Reject {
    Reject {
        table: schema.name.to_string(),
        row,
        column: column.map(str::to_string),
        reason,
    }
}

type RowError = (Option<&'static str>, String);

fn parse_row(
    schema: &TableSchema,
    positions: &[Option<usize>],
    record: &csv::StringRecord,
) -> std::result::Result<Vec<Value>, RowError> {
    let mut row = Vec::with_capacity(schema.columns.len());
    for (c, pos) in schema.columns.iter().zip(positions) {
        let raw = pos.and_then(|p| record.get(p)).unwrap_or("");
        if raw.is_empty() {
            if c.required {
                return Err((Some(c.name), "missing required value".into()));
            }
            row.push(Value::Null);
            continue;
        }
        let v = match c.ty {
            ColumnType::Identifier(IdKind::Integer) => raw
                .parse::<i64>()
                .map(Value::Int)
                .map_err(|_| (Some(c.name), format!("not an integer: `{raw}`")))?,
            ColumnType::Numeric => match raw.parse::<f64>() {
                Ok(x) if x.is_finite() => Value::Float(x),
                _ => return Err((Some(c.name), format!("not a finite number: `{raw}`"))),
            },
            ColumnType::DateTime => parse_datetime(raw)
                .map(Value::DateTime)
                .ok_or_else(|| (Some(c.name), format!("not a YYYY-MM-DD HH:MM:SS datetime: `{raw}`")))?,
            ColumnType::Enum(allowed) => {
                if !allowed.contains(&raw) {
                    return Err((Some(c.name), format!("`{raw}` not one of {allowed:?}")));
                }
                Value::Text(raw.to_string())
            }
            ColumnType::Identifier(IdKind::Text)
            | ColumnType::Code
            | ColumnType::Text
            | ColumnType::Path => Value::Text(raw.to_string()),
        };
        row.push(v);
    }
    Ok(row)
}

fn value_of<'a>(schema: &TableSchema, row: &'a [Value], name: &str) -> Option<&'a Value> {
    schema
        .columns
        .iter()
        .position(|c| c.name == name)
        .map(|i| &row[i])
}

fn check_row(schema: &TableSchema, row: &[Value], ctx: &RowContext) -> std::result::Result<(), RowError> {
    let subject = match value_of(schema, row, "subject_id") {
        Some(Value::Int(s)) => Some(*s),
        _ => None,
    };
    if let (Some(s), Some(subjects)) = (subject, &ctx.subjects) {
        if !subjects.contains(&s) {
            return Err((Some("subject_id"), format!("subject_id {s} not in patients")));
        }
    }
    if let (Some(Value::Int(h)), Some(hadms)) = (value_of(schema, row, "hadm_id"), &ctx.hadm_subject) {
        match hadms.get(h) {
            None => return Err((Some("hadm_id"), format!("hadm_id {h} not in admissions"))),
            Some(owner) if Some(*owner) != subject => {
                return Err((
                    Some("hadm_id"),
                    format!("hadm_id {h} belongs to subject {owner}"),
                ))
            }
            Some(_) => {}
        }
    }
    let interval = |start: &str, end: &str, strict: bool| -> std::result::Result<(), RowError> {
        if let (Some(Value::DateTime(a)), Some(Value::DateTime(b))) =
            (value_of(schema, row, start), value_of(schema, row, end))
        {
            if (strict && a >= b) || (!strict && a > b) {
                return Err((
                    Some(static_name(schema, end)),
                    format!(
                        "{end} {} precedes {start} {}",
                        format_datetime(b),
                        format_datetime(a)
                    ),
                ));
            }
        }
        Ok(())
    };
    match schema.name {
        "admissions" => interval("admittime", "dischtime", true)?,
        "inputevents" => {
            interval("starttime", "endtime", false)?;
            if let Some(Value::Float(x)) = value_of(schema, row, "amount") {
                if *x < 0.0 {
                    return Err((Some("amount"), format!("negative dose {x}")));
                }
            }
        }
        "procedureevents" => interval("starttime", "endtime", false)?,
        _ => {}
    }
    Ok(())
}

fn static_name(schema: &TableSchema, name: &str) -> &'static str {
    schema.column(name).map(|c| c.name).unwrap_or("")
}

impl DatasetSnapshot {
    fn index(
        root: PathBuf,
        version_tag: String,
        tables: BTreeMap<String, Table>,
        rejects: Vec<Reject>,
    ) -> Self {
        let adm = &tables["admissions"];
        let mut admissions: Vec<AdmissionWindow> = (0..adm.len())
            .map(|i| AdmissionWindow {
                subject_id: adm.ints("subject_id")[i].expect("required"),
                hadm_id: adm.ints("hadm_id")[i].expect("required"),
                admittime: adm.datetimes("admittime")[i].expect("required"),
                dischtime: adm.datetimes("dischtime")[i].expect("required"),
            })
            .collect();
        admissions.sort_by_key(|a| (a.subject_id, a.admittime, a.hadm_id));

        let mut admissions_by_subject: HashMap<i64, Range<usize>> = HashMap::new();
        let mut admission_by_hadm = HashMap::new();
        for (i, a) in admissions.iter().enumerate() {
            admissions_by_subject
                .entry(a.subject_id)
                .and_modify(|r| r.end = i + 1)
                .or_insert(i..i + 1);
            admission_by_hadm.insert(a.hadm_id, i);
        }

        let mut subject_rows = HashMap::new();
        for (name, t) in &tables {
            if t.column("subject_id").is_none() {
                continue;
            }
            let mut idx: HashMap<i64, Vec<usize>> = HashMap::new();
            for (row, s) in t.ints("subject_id").iter().enumerate() {
                if let Some(s) = s {
                    idx.entry(*s).or_default().push(row);
                }
            }
            subject_rows.insert(name.clone(), idx);
        }

        DatasetSnapshot {
            root,
            version_tag,
            tables,
            rejects,
            admissions,
            admissions_by_subject,
            admission_by_hadm,
            subject_rows,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn version_tag(&self) -> &str {
        &self.version_tag
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.get(name)
    }

    pub fn tables(&self) -> impl Iterator<Item = &Table> {
        self.tables.values()
    }

    pub fn rejects(&self) -> &[Reject] {
        &self.rejects
    }

    /// All admissions, ordered by (subject_id, admittime, hadm_id).
    pub fn admissions(&self) -> &[AdmissionWindow] {
        &self.admissions
    }

    pub fn admission(&self, hadm_id: i64) -> Option<&AdmissionWindow> {
        self.admission_by_hadm.get(&hadm_id).map(|&i| &self.admissions[i])
    }

    pub fn subject_admissions(&self, subject_id: i64) -> &[AdmissionWindow] {
        match self.admissions_by_subject.get(&subject_id) {
            Some(r) => &self.admissions[r.clone()],
            None => &[],
        }
    }

    pub fn subject_count(&self) -> usize {
        self.tables["patients"].len()
    }

    /// Row indices of `table` belonging to `subject_id`.
    pub fn rows_for_subject(&self, table: &str, subject_id: i64) -> &[usize] {
        self.subject_rows
            .get(table)
            .and_then(|m| m.get(&subject_id))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// The unique admission of `subject_id` whose closed window contains `t`.
    pub fn admission_for(&self, subject_id: i64, t: NaiveDateTime) -> Result<Option<AdmissionWindow>> {
        let hits: Vec<&AdmissionWindow> = self
            .subject_admissions(subject_id)
            .iter()
            .filter(|a| a.contains(t))
            .collect();
        match hits.as_slice() {
            [] => Ok(None),
            [one] => Ok(Some(**one)),
            many => Err(Error::OverlappingAdmissions {
                subject_id,
                hadm_ids: many.iter().map(|a| a.hadm_id).collect(),
            }),
        }
    }

    /// Resolves an event to an admission. A supplied `hadm_id` is kept only if
    /// it belongs to the subject and its window contains `t`; otherwise the
    /// subject's admissions are searched by time.
    pub fn anchor(&self, subject_id: i64, hadm_id: Option<i64>, t: NaiveDateTime) -> Result<Option<i64>> {
        match hadm_id {
            Some(h) => Ok(self
                .admission(h)
                .filter(|a| a.subject_id == subject_id && a.contains(t))
                .map(|a| a.hadm_id)),
            None => Ok(self.admission_for(subject_id, t)?.map(|a| a.hadm_id)),
        }
    }

    /// Subjects whose admission windows intersect (closed intervals).
    pub fn overlapping_admissions(&self) -> Vec<(i64, Vec<i64>)> {
        let mut out = Vec::new();
        let mut subjects: Vec<_> = self.admissions_by_subject.keys().copied().collect();
        subjects.sort_unstable();
        for s in subjects {
            let adm = self.subject_admissions(s);
            let clash: Vec<i64> = adm
                .windows(2)
                .filter(|w| w[1].admittime <= w[0].dischtime)
                .flat_map(|w| [w[0].hadm_id, w[1].hadm_id])
                .collect();
            if !clash.is_empty() {
                let mut ids = clash;
                ids.dedup();
                out.push((s, ids));
            }
        }
        out
    }

    pub fn write_rejects(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rejects(&self.rejects, path)
    }
}

pub fn write_rejects(rejects: &[Reject], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |source| Error::Csv {
        context: path.display().to_string(),
        source,
    };
    w.write_record(["table", "row", "column", "reason"]).map_err(csv_err)?;
    for r in rejects {
        w.write_record([
            r.table.as_str(),
            &r.row.to_string(),
            r.column.as_deref().unwrap_or(""),
            &r.reason,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
