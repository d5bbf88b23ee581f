use std::collections::{BTreeSet, HashMap};

use chrono::{Duration, NaiveDateTime};
use serde::Serialize;

use super::table::{Cell, ColumnKind, WideColumn};
use super::TemporalBin;
use crate::ingest::{AdmissionWindow, Reject};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedicationEvent {
    pub subject_id: i64,
    pub hadm_id: i64,
    pub itemid: String,
    #[serde(with = "crate::time::serde_datetime")]
    pub start: NaiveDateTime,
    #[serde(with = "crate::time::serde_datetime")]
    pub end: NaiveDateTime,
    pub dose: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcedureEvent {
    pub subject_id: i64,
    pub hadm_id: i64,
    pub itemid: String,
    #[serde(with = "crate::time::serde_datetime")]
    pub start: NaiveDateTime,
    /// `None` for an instantaneous procedure.
    pub end: Option<NaiveDateTime>,
}

/// Per-bin medication doses and procedure on/off flags, keyed by
/// (hadm_id, bin_index). Every input bin has an entry.
#[derive(Debug, Clone, Default)]
pub struct BinColumns {
    pub columns: Vec<WideColumn>,
    pub values: HashMap<(i64, u32), Vec<Cell>>,
    pub rejects: Vec<Reject>,
}

impl BinColumns {
    pub fn fill(&self) -> Vec<Cell> {
        self.columns
            .iter()
            .map(|c| match c.kind {
                ColumnKind::Medication { .. } => Cell::Float(0.0),
                _ => Cell::Int(0),
            })
            .collect()
    }
}

/// Doses are spread over the bins an infusion overlaps, proportionally to
/// overlap duration (an instantaneous dose lands whole in its bin); the part
/// of an interval outside the admission is discarded. Procedures mark 1 in
/// every bin they touch.
pub fn encode_med_proc(
    meds: &[MedicationEvent],
    procs: &[ProcedureEvent],
    bins: &[TemporalBin],
) -> BinColumns {
    let mut windows: HashMap<i64, AdmissionWindow> = HashMap::new();
    let mut bin_spans: HashMap<i64, Vec<(NaiveDateTime, NaiveDateTime)>> = HashMap::new();
    for b in bins {
        let w = windows.entry(b.hadm_id).or_insert(AdmissionWindow {
            subject_id: b.subject_id,
            hadm_id: b.hadm_id,
            admittime: b.bin_start,
            dischtime: b.bin_end,
        });
        w.admittime = w.admittime.min(b.bin_start);
        w.dischtime = w.dischtime.max(b.bin_end);
        let spans = bin_spans.entry(b.hadm_id).or_default();
        if spans.len() <= b.bin_index as usize {
            spans.resize(b.bin_index as usize + 1, (b.bin_start, b.bin_end));
        }
        spans[b.bin_index as usize] = (b.bin_start, b.bin_end);
    }

    let med_items: BTreeSet<&str> = meds.iter().filter(|m| m.dose >= 0.0).map(|m| m.itemid.as_str()).collect();
    let proc_items: BTreeSet<&str> = procs.iter().map(|p| p.itemid.as_str()).collect();
    let med_col: HashMap<&str, usize> = med_items.iter().enumerate().map(|(i, m)| (*m, i)).collect();
    let proc_col: HashMap<&str, usize> = proc_items
        .iter()
        .enumerate()
        .map(|(i, p)| (*p, med_items.len() + i))
        .collect();

    let mut out = BinColumns::default();
    out.columns.extend(med_items.iter().map(|m| {
        WideColumn::new(format!("med_{m}"), ColumnKind::Medication { item: m.to_string() })
    }));
    out.columns.extend(proc_items.iter().map(|p| {
        WideColumn::new(format!("proc_{p}"), ColumnKind::Procedure { item: p.to_string() })
    }));
    let fill = out.fill();
    for b in bins {
        out.values.insert((b.hadm_id, b.bin_index), fill.clone());
    }

    for (i, m) in meds.iter().enumerate() {
        if m.dose < 0.0 || !m.dose.is_finite() {
            out.rejects.push(Reject {
                table: "inputevents".into(),
                row: i + 1,
                column: Some("amount".into()),
                reason: format!("negative dose {}", m.dose),
            });
            continue;
        }
        let Some(w) = windows.get(&m.hadm_id) else { continue };
        let col = med_col[m.itemid.as_str()];
        if m.start >= m.end {
            if w.contains(m.start) {
                let idx = bin_at(&bin_spans[&m.hadm_id], m.start);
                add(&mut out.values, (m.hadm_id, idx), col, m.dose);
            }
            continue;
        }
        let (s, e) = (m.start.max(w.admittime), m.end.min(w.dischtime));
        if s > e {
            continue;
        }
        let total = (m.end - m.start).num_seconds() as f64;
        let spans = &bin_spans[&m.hadm_id];
        let (first, last) = (bin_at(spans, s), bin_at(spans, e));
        for idx in first..=last {
            let (bs, be) = spans[idx as usize];
            let overlap = (e.min(be) - s.max(bs)).num_seconds();
            if overlap > 0 {
                add(&mut out.values, (m.hadm_id, idx), col, m.dose * overlap as f64 / total);
            }
        }
    }

    for p in procs {
        let Some(w) = windows.get(&p.hadm_id) else { continue };
        let col = proc_col[p.itemid.as_str()];
        let end = p.end.unwrap_or(p.start).max(p.start);
        let (s, e) = (p.start.max(w.admittime), end.min(w.dischtime));
        if s > e {
            continue;
        }
        let spans = &bin_spans[&p.hadm_id];
        // A procedure with duration is half-open like the bins: ending exactly
        // on a boundary does not touch the next bin.
        let last_instant = if e > s { e - Duration::seconds(1) } else { e };
        let (first, last) = (bin_at(spans, s), bin_at(spans, last_instant));
        for idx in first..=last {
            if let Some(row) = out.values.get_mut(&(p.hadm_id, idx)) {
                row[col] = Cell::Int(1);
            }
        }
    }
    out
}

fn add(values: &mut HashMap<(i64, u32), Vec<Cell>>, key: (i64, u32), col: usize, dose: f64) {
    if let Some(row) = values.get_mut(&key) {
        if let Cell::Float(x) = &mut row[col] {
            *x += dose;
        }
    }
}

/// Index of the half-open bin holding `t`; the window end falls in the last bin.
fn bin_at(spans: &[(NaiveDateTime, NaiveDateTime)], t: NaiveDateTime) -> u32 {
    (spans.partition_point(|(start, _)| *start <= t).max(1) - 1) as u32
}
