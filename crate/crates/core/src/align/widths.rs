use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::check_k;
use crate::error::Result;
use crate::modality::Modality;

/// Value at 1-based rank `ceil(k/100 × n)` of an ascending slice.
///
/// Panics on an empty slice.
pub fn nearest_rank<T: Copy>(sorted: &[T], k: f64) -> T {
    assert!(!sorted.is_empty(), "nearest_rank of an empty slice");
    let n = sorted.len();
    let rank = ((k * n as f64) / 100.0).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    /// Slot columns per modality. Modalities without events are absent.
    pub widths: BTreeMap<Modality, usize>,
    /// Largest per-bin count that survives thresholding.
    pub cutoffs: BTreeMap<Modality, u32>,
}

impl Widths {
    pub fn width(&self, m: Modality) -> usize {
        self.widths.get(&m).copied().unwrap_or(0)
    }

    pub fn cutoff(&self, m: Modality) -> u32 {
        self.cutoffs.get(&m).copied().unwrap_or(0)
    }
}

/// Nearest-rank kth percentile of the nonzero per-bin counts, per modality.
pub fn compute_widths(per_bin_counts: &BTreeMap<Modality, Vec<u32>>, k: f64) -> Result<Widths> {
    check_k(k)?;
    let mut out = Widths::default();
    for (&m, counts) in per_bin_counts {
        let mut nonzero: Vec<u32> = counts.iter().copied().filter(|c| *c > 0).collect();
        if nonzero.is_empty() {
            continue;
        }
        nonzero.sort_unstable();
        let cutoff = nearest_rank(&nonzero, k);
        out.cutoffs.insert(m, cutoff);
        out.widths.insert(m, cutoff as usize);
    }
    Ok(out)
}
