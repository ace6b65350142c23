use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{LynxError, Result};

use super::judge::{JudgeScores, DIMENSIONS};
use super::resemblance::ResemblanceReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: String,
    pub cases: usize,
    /// Mean resemblance per embedder id.
    pub resemblance: BTreeMap<String, f64>,
    /// Mean judge score per dimension, when any case was judged.
    pub judge: Option<JudgeScores>,
    pub partial: bool,
    /// Case ids missing from at least one source.
    pub mismatched: Vec<String>,
}

/// Means over the cases every source shares. Mismatched case sets are an
/// error unless `allow_partial`. Sums run in case-id order, so the result
/// does not depend on input order.
pub fn aggregate(
    model: &str,
    reports: &[ResemblanceReport],
    judge: &[(String, JudgeScores)],
    allow_partial: bool,
) -> Result<Summary> {
    let mut judged = BTreeMap::new();
    for (id, s) in judge {
        if judged.insert(id.as_str(), *s).is_some() {
            return Err(LynxError::Aggregate(format!("case {id} judged twice")));
        }
    }
    let mut sets: Vec<BTreeSet<&str>> = reports.iter().map(|r| r.per_case.keys().map(String::as_str).collect()).collect();
    if !judged.is_empty() {
        sets.push(judged.keys().copied().collect());
    }
    let Some(first) = sets.first() else {
        return Err(LynxError::Aggregate("nothing to aggregate".into()));
    };
    let union: BTreeSet<&str> = sets.iter().flatten().copied().collect();
    let common: BTreeSet<&str> = sets.iter().skip(1).fold(first.clone(), |acc, s| &acc & s);
    let mismatched: Vec<String> = union.difference(&common).map(|s| s.to_string()).collect();
    if !mismatched.is_empty() && !allow_partial {
        let shown: Vec<&str> = mismatched.iter().take(5).map(String::as_str).collect();
        return Err(LynxError::Aggregate(format!(
            "{} case ids are not shared by every source (e.g. {})",
            mismatched.len(),
            shown.join(", ")
        )));
    }
    if common.is_empty() {
        return Err(LynxError::Aggregate("no case is shared by every source".into()));
    }
    let n = common.len() as f64;
    let mut resemblance = BTreeMap::new();
    for r in reports {
        let sum: f64 = common.iter().map(|id| r.per_case[*id].score).sum();
        if resemblance.insert(r.embedder.clone(), sum / n).is_some() {
            return Err(LynxError::Aggregate(format!("embedder {} reported twice", r.embedder)));
        }
    }
    let judge = (!judged.is_empty()).then(|| {
        let mut acc = [0.0; 4];
        for id in &common {
            for (a, v) in acc.iter_mut().zip(judged[id].as_array()) {
                *a += v;
            }
        }
        JudgeScores::from_array(acc.map(|a| a / n))
    });
    Ok(Summary {
        model: model.to_string(),
        cases: common.len(),
        resemblance,
        judge,
        partial: !mismatched.is_empty(),
        mismatched,
    })
}

/// Rows of named scores under shared column headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl ScoreTable {
    pub fn from_summaries(summaries: &[Summary]) -> Self {
        let embedders: BTreeSet<&String> = summaries.iter().flat_map(|s| s.resemblance.keys()).collect();
        let has_judge = summaries.iter().any(|s| s.judge.is_some());
        let mut columns: Vec<String> = embedders.iter().map(|e| e.to_string()).collect();
        if has_judge {
            columns.extend(DIMENSIONS.iter().map(|d| d.to_string()));
        }
        let rows = summaries
            .iter()
            .map(|s| {
                let mut v: Vec<Option<f64>> = embedders.iter().map(|e| s.resemblance.get(*e).copied()).collect();
                if has_judge {
                    v.extend(match s.judge {
                        Some(j) => j.as_array().map(Some),
                        None => [None; 4],
                    });
                }
                (s.model.clone(), v)
            })
            .collect();
        Self { columns, rows }
    }

    /// Aligned text; missing values print as `-`.
    pub fn render(&self) -> String {
        let label_w = self.rows.iter().map(|r| r.0.len()).chain(["model".len()]).max().unwrap_or(5);
        let mut s = format!("{:<label_w$}", "model");
        for c in &self.columns {
            let _ = write!(s, "  {:>w$}", c, w = c.len().max(6));
        }
        s.push('\n');
        for (label, vals) in &self.rows {
            let _ = write!(s, "{label:<label_w$}");
            for (c, v) in self.columns.iter().zip(vals) {
                let cell = v.map_or("-".to_string(), |x| format!("{x:.3}"));
                let _ = write!(s, "  {:>w$}", cell, w = c.len().max(6));
            }
            s.push('\n');
        }
        s
    }

    /// Parses `render` output: a header starting with `model`, then one
    /// whitespace-separated row per model.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let header = lines.next().ok_or_else(|| LynxError::Aggregate("empty score table".into()))?;
        let mut head = header.split_whitespace();
        if head.next() != Some("model") {
            return Err(LynxError::Aggregate("score table header must start with `model`".into()));
        }
        let columns: Vec<String> = head.map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut cells = line.split_whitespace();
            let label = cells.next().unwrap_or_default().to_string();
            let vals = cells
                .map(|c| match c {
                    "-" => Ok(None),
                    _ => c
                        .parse::<f64>()
                        .map(Some)
                        .map_err(|_| LynxError::Aggregate(format!("row {}: `{c}` is not a number", i + 1))),
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != columns.len() {
                return Err(LynxError::Aggregate(format!(
                    "row {} has {} values for {} columns",
                    i + 1,
                    vals.len(),
                    columns.len()
                )));
            }
            rows.push((label, vals));
        }
        Ok(Self { columns, rows })
    }

    pub fn value(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.0 == row)?.1[c]
    }
}

/// Axis names and per-model series for an external radar plot.
pub fn radar_data(summaries: &[Summary]) -> Value {
    let t = ScoreTable::from_summaries(summaries);
    json!({
        "axes": t.columns,
        "series": t.rows.iter().map(|(label, v)| json!({"label": label, "values": v})).collect::<Vec<_>>(),
    })
}
