use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::table::{Agg, Cell, ColumnKind, WideTable};
use super::AlignmentPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Imputation {
    #[default]
    None,
    ForwardFill,
    Mean,
    Median,
}

/// Fills null lab aggregate cells per the plan. A cell counts as observed
/// when its item's `_present` indicator is 1; only observed cells feed
/// mean/median statistics, so a second pass changes nothing. Count,
/// medication and procedure columns are never touched.
pub fn impute(table: &WideTable, plan: &AlignmentPlan) -> WideTable {
    let mut out = table.clone();
    let present: BTreeMap<&str, usize> = table
        .columns
        .iter()
        .enumerate()
        .filter_map(|(i, c)| match &c.kind {
            ColumnKind::LabPresent { item } => Some((item.as_str(), i)),
            _ => None,
        })
        .collect();

    for (col, c) in table.columns.iter().enumerate() {
        let ColumnKind::Lab { item, agg } = &c.kind else {
            continue;
        };
        if *agg == Agg::Count {
            continue;
        }
        let policy = plan.policy_for(item);
        let Some(&present_col) = present.get(item.as_str()) else {
            continue;
        };
        let observed = |row: &[Cell]| matches!(row[present_col], Cell::Int(1));
        match policy {
            Imputation::None => {}
            Imputation::ForwardFill => {
                let mut last: Option<(i64, Cell)> = None;
                for (key, row) in out.keys.iter().zip(out.rows.iter_mut()) {
                    if last.as_ref().is_some_and(|(h, _)| *h != key.hadm_id) {
                        last = None;
                    }
                    if row[col].is_null() {
                        if let Some((_, v)) = &last {
                            row[col] = v.clone();
                        }
                    } else {
                        last = Some((key.hadm_id, row[col].clone()));
                    }
                }
            }
            Imputation::Mean | Imputation::Median => {
                let mut values: Vec<f64> = table
                    .rows
                    .iter()
                    .filter(|r| observed(r))
                    .filter_map(|r| r[col].as_f64())
                    .collect();
                if values.is_empty() {
                    continue;
                }
                let fill = if policy == Imputation::Mean {
                    values.iter().sum::<f64>() / values.len() as f64
                } else {
                    median(&mut values)
                };
                for row in out.rows.iter_mut() {
                    if row[col].is_null() {
                        row[col] = Cell::Float(fill);
                    }
                }
            }
        }
    }
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}
