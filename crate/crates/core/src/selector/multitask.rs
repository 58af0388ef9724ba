use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::HeadId;

use super::cache::ActivationCache;
use super::knn::{score_heads, select_top_m, Metric, SelectionResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultitaskMode {
    /// Each task gets its own heads; no head serves two tasks.
    NonOverlapping,
    /// One shared set scored on the pooled activations.
    Joint,
}

/// Head selection across several tasks. Returns one result per input cache;
/// in joint mode they are all the same.
///
/// Non-overlapping mode walks `(rank, task, head)` in order and gives each
/// head to the first task that still needs one. A head wanted by several
/// tasks therefore goes where it ranks best, and the loser backfills from
/// further down its own ranking.
pub fn select_multitask(
    caches: &[&ActivationCache],
    k: usize,
    m: usize,
    metric: Metric,
    mode: MultitaskMode,
) -> Result<Vec<SelectionResult>> {
    if caches.len() < 2 {
        return Err(Error::Contract(
            "multitask selection needs at least two caches".into(),
        ));
    }
    match mode {
        MultitaskMode::Joint => {
            let merged = ActivationCache::concat(caches)?;
            let sel = select_top_m(&score_heads(&merged, k, metric)?, m)?;
            Ok(vec![sel; caches.len()])
        }
        MultitaskMode::NonOverlapping => {
            let nh = caches[0].n_head_total();
            if caches.len() * m > nh {
                return Err(Error::Contract(format!(
                    "{} tasks × {m} heads exceed the {nh} available",
                    caches.len()
                )));
            }
            let tables = caches
                .iter()
                .map(|c| score_heads(c, k, metric))
                .collect::<Result<Vec<_>>>()?;
            let rankings: Vec<Vec<HeadId>> = tables.iter().map(|t| t.ranking()).collect();
            let mut taken = BTreeSet::new();
            let mut picks: Vec<Vec<HeadId>> = vec![Vec::new(); caches.len()];
            for rank in 0..nh {
                for (task, ranking) in rankings.iter().enumerate() {
                    let head = ranking[rank];
                    if picks[task].len() < m && !taken.contains(&head) {
                        taken.insert(head);
                        picks[task].push(head);
                    }
                }
            }
            Ok(tables
                .into_iter()
                .zip(picks)
                .map(|(table, heads)| SelectionResult { heads, m, table })
                .collect())
        }
    }
}
