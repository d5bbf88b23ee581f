use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::bins::assign_bin;
use super::table::{Agg, Cell, ColumnKind, RowKey, WideColumn, WideTable, KEY_COLUMNS};
use super::{AlignmentPlan, TemporalBin, Widths};
use crate::assets::ModalityRecord;
use crate::error::{Error, Result};
use crate::ingest::AdmissionWindow;
use crate::modality::Modality;
use crate::time::format_datetime;

/// A numeric structured observation (lab value) anchored to an admission.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructuredEvent {
    pub subject_id: i64,
    pub hadm_id: i64,
    pub itemid: String,
    #[serde(with = "crate::time::serde_datetime")]
    pub time: NaiveDateTime,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentAction {
    Dropped,
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AlignmentLogEntry {
    pub subject_id: i64,
    pub hadm_id: i64,
    pub bin_index: u32,
    pub modality: Modality,
    pub count: u32,
    pub cutoff: u32,
    pub action: AlignmentAction,
}

/// Event accounting for one widening pass:
/// `slot_events + dropped_events + truncated_events == total_events`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub total_events: usize,
    pub slot_events: usize,
    pub dropped_events: usize,
    pub truncated_events: usize,
    pub dropped_rows: usize,
    pub truncated_rows: usize,
}

#[derive(Debug, Clone)]
pub struct WidenOutcome {
    pub table: WideTable,
    pub log: Vec<AlignmentLogEntry>,
    pub stats: PartitionStats,
}

/// Records grouped by (hadm_id, bin_index) and modality, each group sorted
/// by (event_time, stable id).
#[derive(Debug, Default)]
pub struct BinnedRecords<'a> {
    pub bins: BTreeMap<(i64, u32), BTreeMap<Modality, Vec<&'a ModalityRecord>>>,
}

impl BinnedRecords<'_> {
    pub fn total(&self) -> usize {
        self.bins.values().flat_map(|m| m.values()).map(Vec::len).sum()
    }
}

fn windows_of(bins: &[TemporalBin]) -> HashMap<i64, AdmissionWindow> {
    let mut out: HashMap<i64, AdmissionWindow> = HashMap::new();
    for b in bins {
        out.entry(b.hadm_id)
            .and_modify(|w| {
                w.admittime = w.admittime.min(b.bin_start);
                w.dischtime = w.dischtime.max(b.bin_end);
            })
            .or_insert(AdmissionWindow {
                subject_id: b.subject_id,
                hadm_id: b.hadm_id,
                admittime: b.bin_start,
                dischtime: b.bin_end,
            });
    }
    out
}

fn window_for(windows: &HashMap<i64, AdmissionWindow>, hadm: Option<i64>) -> Result<&AdmissionWindow> {
    let h = hadm.ok_or_else(|| Error::unknown("admission", "<unanchored record>"))?;
    windows
        .get(&h)
        .ok_or_else(|| Error::unknown("admission", h.to_string()))
}

/// Places every anchored record into its bin. Records must belong to one of
/// the admissions covered by `bins`.
pub fn bin_records<'a>(
    bins: &[TemporalBin],
    records: &'a [ModalityRecord],
    granularity: super::Granularity,
) -> Result<BinnedRecords<'a>> {
    let windows = windows_of(bins);
    let mut out = BinnedRecords::default();
    for r in records {
        let w = window_for(&windows, r.hadm_id)?;
        let idx = assign_bin(w, r.event_time, granularity)?;
        out.bins
            .entry((w.hadm_id, idx))
            .or_default()
            .entry(r.modality)
            .or_default()
            .push(r);
    }
    for per in out.bins.values_mut() {
        for list in per.values_mut() {
            list.sort_by(|a, b| (a.event_time, a.stable_id()).cmp(&(b.event_time, b.stable_id())));
        }
    }
    Ok(out)
}

/// Per modality, the counts of every bin that holds at least one event.
pub fn per_bin_counts(binned: &BinnedRecords<'_>) -> BTreeMap<Modality, Vec<u32>> {
    let mut out: BTreeMap<Modality, Vec<u32>> = BTreeMap::new();
    for per in binned.bins.values() {
        for (m, list) in per {
            out.entry(*m).or_default().push(list.len() as u32);
        }
    }
    out
}

#[derive(Default)]
struct LabBin {
    values: Vec<f64>,
}

pub fn widen(
    bins: &[TemporalBin],
    records: &[ModalityRecord],
    structured: &[StructuredEvent],
    plan: &AlignmentPlan,
    widths: &Widths,
) -> Result<WidenOutcome> {
    let g = plan.granularity;
    let mut bins = bins.to_vec();
    bins.sort_by_key(|b| (b.subject_id, b.hadm_id, b.bin_index));
    let windows = windows_of(&bins);
    let binned = bin_records(&bins, records, g)?;

    let mut labs: HashMap<(i64, u32), BTreeMap<&str, LabBin>> = HashMap::new();
    let mut sorted_labs: Vec<&StructuredEvent> = structured.iter().collect();
    sorted_labs.sort_by(|a, b| {
        (a.hadm_id, a.time, &a.itemid)
            .cmp(&(b.hadm_id, b.time, &b.itemid))
            .then(a.value.total_cmp(&b.value))
    });
    let mut items = BTreeSet::new();
    for e in sorted_labs {
        let w = window_for(&windows, Some(e.hadm_id))?;
        let idx = assign_bin(w, e.time, g)?;
        items.insert(e.itemid.as_str());
        labs.entry((e.hadm_id, idx))
            .or_default()
            .entry(e.itemid.as_str())
            .or_default()
            .values
            .push(e.value);
    }

    let mut columns: Vec<WideColumn> = KEY_COLUMNS
        .iter()
        .map(|n| WideColumn::new(*n, ColumnKind::Key))
        .collect();
    for item in &items {
        for agg in Agg::ALL {
            columns.push(WideColumn::new(
                format!("lab_{item}_{}", agg.as_str()),
                ColumnKind::Lab {
                    item: item.to_string(),
                    agg,
                },
            ));
        }
        columns.push(WideColumn::new(
            format!("lab_{item}_present"),
            ColumnKind::LabPresent {
                item: item.to_string(),
            },
        ));
    }
    let slot_modalities: Vec<(Modality, usize)> = Modality::ALL
        .into_iter()
        .map(|m| (m, widths.width(m)))
        .filter(|(_, w)| *w > 0)
        .collect();
    for &(m, w) in &slot_modalities {
        for j in 1..=w {
            columns.push(WideColumn::new(
                format!("{m}_{j}"),
                ColumnKind::Slot { modality: m, index: j },
            ));
        }
    }
    if !plan.drop_over_threshold {
        columns.push(WideColumn::new("overflow", ColumnKind::Overflow));
    }

    let mut stats = PartitionStats {
        total_events: binned.total(),
        ..Default::default()
    };
    let mut log = Vec::new();
    let mut keys = Vec::with_capacity(bins.len());
    let mut rows = Vec::with_capacity(bins.len());
    let empty = BTreeMap::new();
    for b in &bins {
        let per = binned.bins.get(&(b.hadm_id, b.bin_index)).unwrap_or(&empty);
        let over: Vec<(Modality, u32, u32)> = per
            .iter()
            .map(|(m, list)| (*m, list.len() as u32, widths.cutoff(*m)))
            .filter(|(_, n, cutoff)| n > cutoff)
            .collect();
        let action = if over.is_empty() {
            None
        } else if plan.drop_over_threshold {
            Some(AlignmentAction::Dropped)
        } else {
            Some(AlignmentAction::Truncated)
        };
        for &(modality, count, cutoff) in &over {
            log.push(AlignmentLogEntry {
                subject_id: b.subject_id,
                hadm_id: b.hadm_id,
                bin_index: b.bin_index,
                modality,
                count,
                cutoff,
                action: action.expect("over threshold"),
            });
        }
        if action == Some(AlignmentAction::Dropped) {
            stats.dropped_rows += 1;
            stats.dropped_events += per.values().map(Vec::len).sum::<usize>();
            continue;
        }

        let mut row = Vec::with_capacity(columns.len());
        row.push(Cell::Int(b.subject_id));
        row.push(Cell::Int(b.hadm_id));
        row.push(Cell::Int(b.bin_index as i64));
        row.push(Cell::Text(format_datetime(&b.bin_start)));
        row.push(Cell::Text(format_datetime(&b.bin_end)));

        let lab_bin = labs.get(&(b.hadm_id, b.bin_index));
        for item in &items {
            match lab_bin.and_then(|l| l.get(item)) {
                Some(LabBin { values }) if !values.is_empty() => {
                    let sum: f64 = values.iter().sum();
                    row.push(Cell::Float(sum / values.len() as f64));
                    row.push(Cell::Float(values.iter().copied().fold(f64::INFINITY, f64::min)));
                    row.push(Cell::Float(values.iter().copied().fold(f64::NEG_INFINITY, f64::max)));
                    row.push(Cell::Float(*values.last().unwrap()));
                    row.push(Cell::Int(values.len() as i64));
                    row.push(Cell::Int(1));
                }
                _ => {
                    row.extend([Cell::Null, Cell::Null, Cell::Null, Cell::Null]);
                    row.push(Cell::Int(0));
                    row.push(Cell::Int(0));
                }
            }
        }

        for &(m, width) in &slot_modalities {
            let list = per.get(&m).map(Vec::as_slice).unwrap_or(&[]);
            let placed = list.len().min(width);
            stats.slot_events += placed;
            stats.truncated_events += list.len() - placed;
            for j in 0..width {
                row.push(match list.get(j) {
                    Some(r) if j < placed => Cell::Text(r.slot_value()),
                    _ => Cell::Null,
                });
            }
        }
        if !plan.drop_over_threshold {
            let truncated = action == Some(AlignmentAction::Truncated);
            if truncated {
                stats.truncated_rows += 1;
            }
            row.push(Cell::Int(truncated as i64));
        }
        keys.push(RowKey {
            subject_id: b.subject_id,
            hadm_id: b.hadm_id,
            bin_index: b.bin_index,
        });
        rows.push(row);
    }
    // Modalities without columns (cutoff 0) lose all their events when truncating.
    for (m, list) in binned.bins.values().flat_map(|per| per.iter()) {
        if widths.width(*m) == 0 && !plan.drop_over_threshold {
            stats.truncated_events += list.len();
        }
    }

    Ok(WidenOutcome {
        table: WideTable {
            granularity: g,
            columns,
            keys,
            rows,
        },
        log,
        stats,
    })
}

pub fn write_alignment_log<W: Write>(log: &[AlignmentLogEntry], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subject_id", "hadm_id", "bin_index", "modality", "count", "cutoff", "action"])?;
    for e in log {
        w.write_record([
            e.subject_id.to_string().as_str(),
            &e.hadm_id.to_string(),
            &e.bin_index.to_string(),
            e.modality.as_str(),
            &e.count.to_string(),
            &e.cutoff.to_string(),
            match e.action {
                AlignmentAction::Dropped => "dropped",
                AlignmentAction::Truncated => "truncated",
            },
        ])?;
    }
    w.flush()?;
    Ok(())
}
