use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::AdmissionWindow;
use crate::time::format_datetime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Stay,
    Day,
    Hour,
}

impl Granularity {
    pub fn width(self) -> Option<Duration> {
        match self {
            Granularity::Stay => None,
            Granularity::Day => Some(Duration::hours(24)),
            Granularity::Hour => Some(Duration::hours(1)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Stay => "stay",
            Granularity::Day => "day",
            Granularity::Hour => "hour",
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stay" => Ok(Granularity::Stay),
            "day" => Ok(Granularity::Day),
            "hour" => Ok(Granularity::Hour),
            _ => Err(Error::unknown("granularity", s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TemporalBin {
    pub subject_id: i64,
    pub hadm_id: i64,
    pub bin_index: u32,
    #[serde(with = "crate::time::serde_datetime")]
    pub bin_start: NaiveDateTime,
    #[serde(with = "crate::time::serde_datetime")]
    pub bin_end: NaiveDateTime,
}

/// Number of bins tiling the admission; at least one.
pub fn bin_count(window: &AdmissionWindow, g: Granularity) -> u32 {
    match g.width() {
        None => 1,
        Some(w) => {
            let span = (window.dischtime - window.admittime).num_seconds();
            let w = w.num_seconds();
            (((span + w - 1) / w).max(1)) as u32
        }
    }
}

/// Half-open bins `[start, start + width)`; `dischtime` itself is clamped
/// into the final bin.
pub fn assign_bin(window: &AdmissionWindow, t: NaiveDateTime, g: Granularity) -> Result<u32> {
    if !window.contains(t) {
        return Err(Error::OutsideWindow {
            hadm_id: window.hadm_id,
            time: format_datetime(&t),
            admittime: format_datetime(&window.admittime),
            dischtime: format_datetime(&window.dischtime),
        });
    }
    Ok(match g.width() {
        None => 0,
        Some(w) => {
            let idx = (t - window.admittime).num_seconds() / w.num_seconds();
            (idx as u32).min(bin_count(window, g) - 1)
        }
    })
}

pub fn bins_for(window: &AdmissionWindow, g: Granularity) -> Vec<TemporalBin> {
    let n = bin_count(window, g);
    (0..n)
        .map(|i| {
            let (start, end) = match g.width() {
                None => (window.admittime, window.dischtime),
                Some(w) => {
                    let start = window.admittime + w * i as i32;
                    (start, (start + w).min(window.dischtime))
                }
            };
            TemporalBin {
                subject_id: window.subject_id,
                hadm_id: window.hadm_id,
                bin_index: i,
                bin_start: start,
                bin_end: end,
            }
        })
        .collect()
}
