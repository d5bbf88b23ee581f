use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::Granularity;
use crate::modality::Modality;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Null,
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    pub fn is_null(&self) -> bool {
        matches!(self, Cell::Null)
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(x) => Some(*x as f64),
            Cell::Float(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Cell::Text(s) => Some(s),
            _ => None,
        }
    }

    /// CSV rendering; `None` is the empty unquoted null field.
    pub fn render(&self) -> Option<String> {
        match self {
            Cell::Null => None,
            Cell::Int(x) => Some(x.to_string()),
            Cell::Float(x) => Some(x.to_string()),
            Cell::Text(s) => Some(s.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agg {
    Mean,
    Min,
    Max,
    Last,
    Count,
}

impl Agg {
    pub const ALL: [Agg; 5] = [Agg::Mean, Agg::Min, Agg::Max, Agg::Last, Agg::Count];

    pub fn as_str(self) -> &'static str {
        match self {
            Agg::Mean => "mean",
            Agg::Min => "min",
            Agg::Max => "max",
            Agg::Last => "last",
            Agg::Count => "count",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ColumnKind {
    Key,
    Lab { item: String, agg: Agg },
    LabPresent { item: String },
    Medication { item: String },
    Procedure { item: String },
    Slot { modality: Modality, index: usize },
    Overflow,
    Embedding { modality: Modality, index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WideColumn {
    pub name: String,
    pub kind: ColumnKind,
}

impl WideColumn {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        WideColumn {
            name: name.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct RowKey {
    pub subject_id: i64,
    pub hadm_id: i64,
    pub bin_index: u32,
}

pub const KEY_COLUMNS: [&str; 5] = ["subject_id", "hadm_id", "bin_index", "bin_start", "bin_end"];

/// One row per surviving (admission, bin), ordered by
/// (subject_id, hadm_id, bin_index).
#[derive(Debug, Clone, PartialEq)]
pub struct WideTable {
    pub granularity: Granularity,
    pub columns: Vec<WideColumn>,
    pub keys: Vec<RowKey>,
    pub rows: Vec<Vec<Cell>>,
}

impl WideTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    /// Indices of `{modality}_1..` slot columns, in slot order.
    pub fn slot_columns(&self, m: Modality) -> Vec<usize> {
        let mut v: Vec<(usize, usize)> = self
            .columns
            .iter()
            .enumerate()
            .filter_map(|(i, c)| match c.kind {
                ColumnKind::Slot { modality, index } if modality == m => Some((index, i)),
                _ => None,
            })
            .collect();
        v.sort_unstable();
        v.into_iter().map(|(_, i)| i).collect()
    }

    pub fn cell(&self, row: usize, column: &str) -> Option<&Cell> {
        self.column_index(column).map(|c| &self.rows[row][c])
    }

    /// Appends columns whose values are keyed by (hadm_id, bin_index); rows
    /// missing from `values` get `fill`.
    pub fn append_columns(
        &mut self,
        columns: Vec<WideColumn>,
        values: &HashMap<(i64, u32), Vec<Cell>>,
        fill: &[Cell],
    ) {
        debug_assert_eq!(columns.len(), fill.len());
        for (key, row) in self.keys.iter().zip(self.rows.iter_mut()) {
            match values.get(&(key.hadm_id, key.bin_index)) {
                Some(v) => row.extend(v.iter().cloned()),
                None => row.extend(fill.iter().cloned()),
            }
        }
        self.columns.extend(columns);
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .quote_style(csv::QuoteStyle::Necessary)
            .from_writer(out);
        w.write_record(self.column_names())?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.render().unwrap_or_default()))?;
        }
        w.flush()?;
        Ok(())
    }
}
