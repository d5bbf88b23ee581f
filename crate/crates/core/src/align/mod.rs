//! Temporal alignment: binning, fixed-column widening with percentile
//! control, missing-value policy and medication/procedure encoding.

mod bins;
mod impute;
mod medproc;
mod table;
mod widen;
mod widths;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use bins::{assign_bin, bin_count, bins_for, Granularity, TemporalBin};
pub use impute::{impute, Imputation};
pub use medproc::{encode_med_proc, BinColumns, MedicationEvent, ProcedureEvent};
pub use table::{Agg, Cell, ColumnKind, RowKey, WideColumn, WideTable};
pub use widen::{
    bin_records, per_bin_counts, widen, write_alignment_log, AlignmentAction, AlignmentLogEntry,
    BinnedRecords, PartitionStats, StructuredEvent, WidenOutcome,
};
pub use widths::{compute_widths, nearest_rank, Widths};

use crate::error::{Error, Result};
use crate::modality::Modality;

pub(crate) fn default_drop() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPlan {
    pub granularity: Granularity,
    pub percentile_k: f64,
    /// Filled in from [`compute_widths`]; any value supplied by a caller is
    /// overwritten before widening.
    #[serde(default)]
    pub widths: BTreeMap<Modality, usize>,
    /// Lab itemid (or `*` for every item) → policy.
    #[serde(default)]
    pub imputation: BTreeMap<String, Imputation>,
    #[serde(default = "default_drop")]
    pub drop_over_threshold: bool,
}

impl Default for AlignmentPlan {
    fn default() -> Self {
        AlignmentPlan {
            granularity: Granularity::Day,
            percentile_k: 100.0,
            widths: BTreeMap::new(),
            imputation: BTreeMap::new(),
            drop_over_threshold: true,
        }
    }
}

impl AlignmentPlan {
    pub fn validate(&self) -> Result<()> {
        check_k(self.percentile_k)
    }

    pub fn policy_for(&self, item: &str) -> Imputation {
        self.imputation
            .get(item)
            .or_else(|| self.imputation.get("*"))
            .copied()
            .unwrap_or(Imputation::None)
    }
}

pub(crate) fn check_k(k: f64) -> Result<()> {
    if k.is_finite() && k > 0.0 && k <= 100.0 {
        Ok(())
    } else {
        Err(Error::config("percentile_k", format!("{k} is outside (0, 100]")))
    }
}
