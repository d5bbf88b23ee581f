//! Independent reference implementations shared by the integration tests and
//! the acceptance runner. None of these call the library code they check.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use chrono::NaiveDateTime;
use medfuse_core::align::{Cell, ColumnKind, Granularity, Imputation, StructuredEvent, WideTable};
use medfuse_core::cohort::{CohortSpec, IcdVersion};
use medfuse_core::forge::{default_icd_pool, GroundTruthManifest, ManifestAdmission};
use medfuse_core::Modality;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GRANULARITIES: [Granularity; 3] = [Granularity::Stay, Granularity::Day, Granularity::Hour];
pub const SLOT_KINDS: [&str; 6] = ["ds", "rr", "cxr", "ecg", "echo", "waveform"];
pub const PERCENTILES: [f64; 5] = [50.0, 75.0, 90.0, 95.0, 100.0];

/// Independent scan of the raw diagnosis CSVs.
pub struct CohortOracle {
    /// (subject, hadm, code as written, version)
    diagnoses: Vec<(i64, i64, String, String)>,
    /// (code, version) → title
    titles: HashMap<(String, String), String>,
}

impl CohortOracle {
    pub fn load(root: &Path) -> Self {
        let mut r = csv::Reader::from_path(root.join("diagnoses_icd.csv")).unwrap();
        let diagnoses = r
            .deserialize::<HashMap<String, String>>()
            .map(|row| {
                let row = row.unwrap();
                (
                    row["subject_id"].parse().unwrap(),
                    row["hadm_id"].parse().unwrap(),
                    row["icd_code"].clone(),
                    row["icd_version"].clone(),
                )
            })
            .collect();
        let mut r = csv::Reader::from_path(root.join("d_icd_diagnoses.csv")).unwrap();
        let titles = r
            .deserialize::<HashMap<String, String>>()
            .map(|row| {
                let row = row.unwrap();
                ((row["icd_code"].clone(), row["icd_version"].clone()), row["long_title"].clone())
            })
            .collect();
        CohortOracle { diagnoses, titles }
    }

    fn version_ok(v: IcdVersion, raw: &str) -> bool {
        match v {
            IcdVersion::Nine => raw == "9",
            IcdVersion::Ten => raw == "10",
            IcdVersion::Both => true,
        }
    }

    pub fn members(&self, spec: &CohortSpec) -> BTreeSet<(i64, i64)> {
        if spec.code_patterns.is_empty() {
            self.names(spec.icd_version, &spec.disease_name_substrings)
        } else {
            self.codes(spec.icd_version, &spec.code_patterns)
        }
    }

    pub fn codes(&self, version: IcdVersion, patterns: &[String]) -> BTreeSet<(i64, i64)> {
        let norm = |s: &str| s.replace('.', "").trim().to_uppercase();
        self.diagnoses
            .iter()
            .filter(|(_, _, _, v)| Self::version_ok(version, v))
            .filter(|(_, _, code, _)| {
                let code = norm(code);
                patterns.iter().any(|p| match p.trim().strip_suffix('*') {
                    Some(prefix) => code.starts_with(&norm(prefix)),
                    None => code == norm(p),
                })
            })
            .map(|(s, h, _, _)| (*s, *h))
            .collect()
    }

    pub fn names(&self, version: IcdVersion, needles: &[String]) -> BTreeSet<(i64, i64)> {
        self.diagnoses
            .iter()
            .filter(|(_, _, _, v)| Self::version_ok(version, v))
            .filter(|(_, _, code, v)| {
                self.titles.get(&(code.clone(), v.clone())).is_some_and(|t| {
                    let t = t.to_lowercase();
                    needles.iter().any(|n| t.contains(&n.trim().to_lowercase()))
                })
            })
            .map(|(s, h, _, _)| (*s, *h))
            .collect()
    }
}

/// A code or name spec drawn from the forged ICD pool, with prefixes,
/// dotted and lower-cased spellings, and codes that match nothing.
pub fn random_spec(rng: &mut ChaCha8Rng) -> CohortSpec {
    let pool = default_icd_pool();
    let version = *[IcdVersion::Nine, IcdVersion::Ten, IcdVersion::Both].choose(rng).unwrap();
    if rng.random_bool(0.3) {
        let n = rng.random_range(1..=3);
        let needles: Vec<String> = (0..n)
            .map(|_| {
                let title = &pool.choose(rng).unwrap().long_title;
                let words: Vec<&str> = title.split_whitespace().collect();
                let start = rng.random_range(0..words.len());
                let len = rng.random_range(1..=(words.len() - start).min(2));
                let s = words[start..start + len].join(" ");
                if rng.random_bool(0.5) { s.to_uppercase() } else { s }
            })
            .collect();
        return CohortSpec::names(version, needles);
    }
    let n = rng.random_range(1..=4);
    let patterns: Vec<String> = (0..n)
        .map(|_| {
            let code = &pool.choose(rng).unwrap().code;
            match rng.random_range(0..4) {
                0 => code.clone(),
                1 => format!("{}*", &code[..rng.random_range(1..=code.len())]),
                2 if code.len() > 3 => format!("{}.{}", &code[..3], &code[3..]).to_lowercase(),
                _ => format!("{}9", code),
            }
        })
        .collect();
    CohortSpec::codes(version, patterns)
}

fn width_secs(g: Granularity) -> Option<i64> {
    g.width().map(|w| w.num_seconds())
}

/// Bin index from first principles: whole widths elapsed since admission,
/// with the discharge instant folded into the final bin.
pub fn oracle_bin(a: &ManifestAdmission, t: NaiveDateTime, g: Granularity) -> u32 {
    let Some(w) = width_secs(g) else { return 0 };
    let span = (a.dischtime - a.admittime).num_seconds();
    let n = ((span + w - 1) / w).max(1);
    ((t - a.admittime).num_seconds() / w).min(n - 1) as u32
}

pub fn oracle_bin_count(a: &ManifestAdmission, g: Granularity) -> u32 {
    match width_secs(g) {
        None => 1,
        Some(w) => ((a.dischtime - a.admittime).num_seconds() as f64 / w as f64).ceil().max(1.0) as u32,
    }
}

/// Bin bounds rebuilt from the admission, the last one clipped at discharge.
pub fn oracle_spans(a: &ManifestAdmission, g: Granularity) -> Vec<(NaiveDateTime, NaiveDateTime)> {
    (0..oracle_bin_count(a, g))
        .map(|i| match g.width() {
            None => (a.admittime, a.dischtime),
            Some(w) => (a.admittime + w * i as i32, (a.admittime + w * (i as i32 + 1)).min(a.dischtime)),
        })
        .collect()
}

pub type Placement = BTreeMap<(i64, u32, Modality), Vec<String>>;

/// Ordered slot contents per (hadm, bin, modality) straight from the manifest.
pub fn oracle_placement(m: &GroundTruthManifest, g: Granularity) -> Placement {
    let mut groups: BTreeMap<(i64, u32, Modality), Vec<(NaiveDateTime, String, String)>> = BTreeMap::new();
    for e in m.events.iter().filter(|e| SLOT_KINDS.contains(&e.kind.as_str())) {
        let Some(h) = e.hadm_id else { continue };
        let a = m.admission(h).unwrap();
        let modality: Modality = e.kind.parse().unwrap();
        let slot = e.file_path.clone().unwrap_or_else(|| e.id.clone());
        groups
            .entry((h, oracle_bin(a, e.time, g), modality))
            .or_default()
            .push((e.time, e.id.clone(), slot));
    }
    groups
        .into_iter()
        .map(|(k, mut v)| {
            v.sort();
            (k, v.into_iter().map(|(_, _, s)| s).collect())
        })
        .collect()
}

pub fn table_placement(t: &WideTable) -> Placement {
    let mut out = Placement::new();
    for (key, row) in t.keys.iter().zip(&t.rows) {
        for m in Modality::ALL {
            let values: Vec<String> = t
                .slot_columns(m)
                .into_iter()
                .filter_map(|i| row[i].as_text().map(String::from))
                .collect();
            if !values.is_empty() {
                out.insert((key.hadm_id, key.bin_index, m), values);
            }
        }
    }
    out
}

/// Smallest value with at least k percent of the data at or below it.
pub fn oracle_rank(values: &[u32], k: f64) -> u32 {
    let mut v = values.to_vec();
    v.sort();
    for &x in &v {
        let at_or_below = v.iter().filter(|y| **y <= x).count();
        if at_or_below as f64 * 100.0 >= k * v.len() as f64 {
            return x;
        }
    }
    *v.last().unwrap()
}

/// Per-modality width over the nonzero per-bin counts of a placement.
pub fn oracle_cutoffs(expected: &Placement, k: f64) -> BTreeMap<Modality, usize> {
    let mut counts: BTreeMap<Modality, Vec<u32>> = BTreeMap::new();
    for ((_, _, m), v) in expected {
        counts.entry(*m).or_default().push(v.len() as u32);
    }
    counts.into_iter().map(|(m, v)| (m, oracle_rank(&v, k) as usize)).collect()
}

/// Rows holding any modality over its cutoff.
pub fn oracle_over(expected: &Placement, cutoff: &BTreeMap<Modality, usize>) -> BTreeSet<(i64, u32)> {
    expected
        .iter()
        .filter(|((_, _, m), v)| v.len() > cutoff[m])
        .map(|((h, b, _), _)| (*h, *b))
        .collect()
}

pub fn lab_events(m: &GroundTruthManifest) -> Vec<StructuredEvent> {
    m.events_of("lab")
        .filter_map(|e| {
            Some(StructuredEvent {
                subject_id: e.subject_id,
                hadm_id: e.hadm_id?,
                itemid: e.id.clone(),
                time: e.time,
                value: e.value?,
            })
        })
        .collect()
}

/// (aggregate column, matching presence column) for every imputable lab column.
pub fn lab_columns(t: &WideTable) -> Vec<(usize, usize)> {
    let present: HashMap<&str, usize> = t
        .columns
        .iter()
        .enumerate()
        .filter_map(|(i, c)| match &c.kind {
            ColumnKind::LabPresent { item } => Some((item.as_str(), i)),
            _ => None,
        })
        .collect();
    t.columns
        .iter()
        .enumerate()
        .filter_map(|(i, c)| match &c.kind {
            ColumnKind::Lab { item, agg } if agg.as_str() != "count" => Some((i, present[item.as_str()])),
            _ => None,
        })
        .collect()
}

/// Column `col` of `raw` after a forward fill that restarts at every admission.
pub fn oracle_forward_fill(raw: &WideTable, col: usize) -> Vec<Cell> {
    let mut last: Option<(i64, Cell)> = None;
    let mut out = Vec::with_capacity(raw.rows.len());
    for (key, row) in raw.keys.iter().zip(&raw.rows) {
        if last.as_ref().is_some_and(|(h, _)| *h != key.hadm_id) {
            last = None;
        }
        if row[col].is_null() {
            out.push(last.as_ref().map(|(_, v)| v.clone()).unwrap_or(Cell::Null));
        } else {
            last = Some((key.hadm_id, row[col].clone()));
            out.push(row[col].clone());
        }
    }
    out
}

/// Column fill value from observed cells only.
pub fn oracle_fill_stat(raw: &WideTable, col: usize, present: usize, policy: Imputation) -> f64 {
    let mut observed: Vec<f64> = raw
        .rows
        .iter()
        .filter(|r| r[present] == Cell::Int(1))
        .map(|r| r[col].as_f64().unwrap())
        .collect();
    observed.sort_by(f64::total_cmp);
    let n = observed.len();
    match policy {
        Imputation::Mean => observed.iter().sum::<f64>() / n as f64,
        _ if n % 2 == 1 => observed[n / 2],
        _ => (observed[n / 2 - 1] + observed[n / 2]) / 2.0,
    }
}

/// Dose per (hadm, bin, item) by brute-force interval overlap.
pub fn oracle_doses(m: &GroundTruthManifest, g: Granularity) -> HashMap<(i64, u32, String), f64> {
    let mut dose = HashMap::new();
    for e in m.events_of("medication") {
        let h = e.hadm_id.unwrap();
        let a = m.admission(h).unwrap();
        let (s, end) = (e.time, e.end.unwrap());
        let amount = e.value.unwrap();
        if end <= s {
            *dose.entry((h, oracle_bin(a, s, g), e.id.clone())).or_default() += amount;
            continue;
        }
        let total = (end - s).num_seconds() as f64;
        for (i, (bs, be)) in oracle_spans(a, g).into_iter().enumerate() {
            let overlap = (end.min(be) - s.max(bs)).num_seconds();
            if overlap > 0 {
                *dose.entry((h, i as u32, e.id.clone())).or_default() += amount * overlap as f64 / total;
            }
        }
    }
    dose
}

/// (hadm, bin, item) for every bin a procedure interval touches.
pub fn oracle_proc_flags(m: &GroundTruthManifest, g: Granularity) -> BTreeSet<(i64, u32, String)> {
    let mut flags = BTreeSet::new();
    for e in m.events_of("procedure") {
        let h = e.hadm_id.unwrap();
        let a = m.admission(h).unwrap();
        let (s, end) = (e.time, e.end.unwrap_or(e.time));
        let n = oracle_bin_count(a, g);
        for (i, (bs, be)) in oracle_spans(a, g).into_iter().enumerate() {
            let last = i as u32 + 1 == n;
            let touches = if end > s {
                s < be && end > bs
            } else {
                s >= bs && (s < be || last)
            };
            if touches {
                flags.insert((h, i as u32, e.id.clone()));
            }
        }
    }
    flags
}

/// Chunk starts from the closed form: every multiple of the stride below
/// `n`, stopping after the first window that covers the last token.
pub fn oracle_ranges(n: usize, window: usize, overlap: usize) -> Vec<(usize, usize)> {
    let stride = window - overlap;
    let mut out = Vec::new();
    for i in 0.. {
        let s = i * stride;
        if s >= n {
            break;
        }
        out.push((s, (s + window).min(n)));
        if s + window >= n {
            break;
        }
    }
    out
}

/// Bag-of-hashes vector built without the library's embedder.
pub fn brute_chunk(tokens: &[&str], dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for t in tokens {
        let mut h: u64 = 14_695_981_039_346_656_037;
        for b in t.bytes() {
            h = (h ^ b as u64).wrapping_mul(1_099_511_628_211);
        }
        v[(h % dim as u64) as usize] += if h >= 1 << 63 { -1.0 } else { 1.0 };
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Mean of brute-force chunk vectors over the oracle windows.
pub fn brute_pooled(tokens: &[&str], window: usize, overlap: usize, dim: usize) -> Vec<f64> {
    let chunks = oracle_ranges(tokens.len(), window, overlap);
    let mut avg = vec![0.0; dim];
    for (s, t) in &chunks {
        for (a, x) in avg.iter_mut().zip(brute_chunk(&tokens[*s..*t], dim)) {
            *a += x / chunks.len() as f64;
        }
    }
    avg
}

pub fn read_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

/// Non-null slots of every modality form a prefix, nulls are empty fields,
/// and a row's embed cell is null exactly when its slot is.
pub fn check_layout(header: &[String], rows: &[Vec<String>]) -> Result<(), String> {
    let mut groups: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, h) in header.iter().enumerate() {
        for m in Modality::ALL {
            if let Some(rest) = h.strip_prefix(&format!("{m}_")) {
                if let Ok(j) = rest.parse::<usize>() {
                    groups.entry(m.to_string()).or_default().push((j, i));
                }
            }
        }
    }
    if groups.is_empty() {
        return Err("no slot columns".into());
    }
    for (r, row) in rows.iter().enumerate() {
        for (m, cols) in &groups {
            let mut cols = cols.clone();
            cols.sort();
            let filled: Vec<bool> = cols.iter().map(|(_, i)| !row[*i].is_empty()).collect();
            let k = filled.iter().take_while(|f| **f).count();
            if filled[k..].iter().any(|f| *f) {
                return Err(format!("row {r}: {m} not left-packed: {filled:?}"));
            }
            for (j, i) in &cols {
                if let Some(e) = header.iter().position(|h| *h == format!("{m}_{j}_embed")) {
                    if row[*i].is_empty() != row[e].is_empty() {
                        return Err(format!("row {r}: {m}_{j} and its embedding disagree on null"));
                    }
                }
            }
        }
    }
    Ok(())
}
