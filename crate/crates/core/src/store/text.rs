//! Human-readable JSON files for selections and evaluation reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::HeadId;
use crate::selector::{HeadScore, HeadScoreTable, Method, Metric, SelectionResult};
use crate::simenv::EvalReport;

use super::binary::shape;

/// On-disk form of a [`SelectionResult`]. Scores are listed best first for
/// the method: ascending for k-NN errors, descending otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub method: Method,
    pub metric: Option<Metric>,
    pub k: Option<usize>,
    pub m: usize,
    pub seed: Option<u64>,
    pub n_layers: usize,
    pub n_heads: usize,
    pub cv: Option<f64>,
    pub selected: Vec<HeadId>,
    pub scores: Vec<HeadScore>,
}

impl From<&SelectionResult> for SelectionFile {
    fn from(s: &SelectionResult) -> Self {
        let t = &s.table;
        let mut scores = t.scores.clone();
        let sign = if t.method.lower_is_better() {
            1.0
        } else {
            -1.0
        };
        scores.sort_by(|a, b| {
            (sign * a.score)
                .total_cmp(&(sign * b.score))
                .then(a.head.cmp(&b.head))
        });
        SelectionFile {
            method: t.method,
            metric: t.metric,
            k: t.k,
            m: s.m,
            seed: t.seed,
            n_layers: t.n_layers,
            n_heads: t.n_heads,
            cv: t.cv,
            selected: s.heads.clone(),
            scores,
        }
    }
}

impl TryFrom<SelectionFile> for SelectionResult {
    type Error = Error;

    fn try_from(f: SelectionFile) -> Result<Self> {
        let mut scores = f.scores;
        scores.sort_by_key(|s| s.head);
        let expected: Vec<HeadId> = (0..f.n_layers * f.n_heads)
            .map(|j| HeadId::from_flat(j, f.n_heads))
            .collect();
        if scores.iter().map(|s| s.head).ne(expected.iter().copied()) {
            return Err(shape("selection file must score every head exactly once"));
        }
        if f.selected.len() != f.m || f.selected.iter().any(|h| !expected.contains(h)) {
            return Err(shape("selected heads disagree with m or the head grid"));
        }
        Ok(SelectionResult {
            heads: f.selected,
            m: f.m,
            table: HeadScoreTable {
                method: f.method,
                metric: f.metric,
                k: f.k,
                seed: f.seed,
                n_layers: f.n_layers,
                n_heads: f.n_heads,
                scores,
                cv: f.cv,
            },
        })
    }
}

pub fn selection_to_string(sel: &SelectionResult) -> String {
    let mut s =
        serde_json::to_string_pretty(&SelectionFile::from(sel)).expect("selection serializes");
    s.push('\n');
    s
}

pub fn selection_from_str(text: &str) -> Result<SelectionResult> {
    let f: SelectionFile =
        serde_json::from_str(text).map_err(|e| shape(format!("selection file: {e}")))?;
    f.try_into()
}

pub fn write_selection(path: impl AsRef<Path>, sel: &SelectionResult) -> Result<()> {
    std::fs::write(path, selection_to_string(sel))?;
    Ok(())
}

pub fn read_selection(path: impl AsRef<Path>) -> Result<SelectionResult> {
    selection_from_str(&std::fs::read_to_string(path)?)
}

pub fn reports_to_string(reports: &[EvalReport]) -> String {
    let mut s = serde_json::to_string_pretty(reports).expect("reports serialize");
    s.push('\n');
    s
}

pub fn reports_from_str(text: &str) -> Result<Vec<EvalReport>> {
    serde_json::from_str(text).map_err(|e| shape(format!("eval report: {e}")))
}

pub fn write_reports(path: impl AsRef<Path>, reports: &[EvalReport]) -> Result<()> {
    std::fs::write(path, reports_to_string(reports))?;
    Ok(())
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    reports_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selector::select_top_m;

    #[test]
    fn selection_round_trip_and_order() {
        let table = HeadScoreTable::new(Method::Knn, 2, 2, vec![0.4, 0.1, 0.3, 0.2]).unwrap();
        let sel = select_top_m(&table, 2).unwrap();
        let text = selection_to_string(&sel);
        assert!(text.contains("\"L0H1\""));
        let f: SelectionFile = serde_json::from_str(&text).unwrap();
        let listed: Vec<f64> = f.scores.iter().map(|s| s.score).collect();
        assert_eq!(listed, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(selection_from_str(&text).unwrap(), sel);
    }
}
