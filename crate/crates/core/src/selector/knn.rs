use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::HeadId;
use crate::numkit::mean_std_cv;

use super::cache::{ActivationCache, RowKey};

/// Similarity used to rank neighbours.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Leave-one-trajectory-out k-NN action regression; lower is better.
    Knn,
    /// Action-error increase under single-head noise; higher is better.
    Cma,
    /// Learned selection logits; higher is better.
    Reinforce,
    /// Class-centroid margin; higher is better.
    Centroid,
}

impl Method {
    pub fn lower_is_better(self) -> bool {
        matches!(self, Method::Knn)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Knn => "knn",
            Method::Cma => "cma",
            Method::Reinforce => "reinforce",
            Method::Centroid => "centroid",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Method::Knn,
            Method::Cma,
            Method::Reinforce,
            Method::Centroid,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown selection method {s:?}")))
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            _ => Err(Error::Config(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub head: HeadId,
    pub score: f64,
}

/// One score per head, in `HeadId` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreTable {
    pub method: Method,
    pub metric: Option<Metric>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub n_layers: usize,
    pub n_heads: usize,
    pub scores: Vec<HeadScore>,
    /// Coefficient of variation of the scores; `None` when their mean is 0.
    pub cv: Option<f64>,
}

impl HeadScoreTable {
    /// `scores[j]` belongs to flat head `j`.
    pub fn new(method: Method, n_layers: usize, n_heads: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != n_layers * n_heads {
            return Err(Error::Contract(format!(
                "{} scores for {} heads",
                scores.len(),
                n_layers * n_heads
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Contract("head scores must be finite".into()));
        }
        if method == Method::Knn && scores.iter().any(|&s| s < 0.0) {
            return Err(Error::Contract(
                "k-NN scores are mean squared errors".into(),
            ));
        }
        let cv = mean_std_cv(&scores)?.cv;
        Ok(HeadScoreTable {
            method,
            metric: None,
            k: None,
            seed: None,
            n_layers,
            n_heads,
            scores: scores
                .into_iter()
                .enumerate()
                .map(|(j, score)| HeadScore {
                    head: HeadId::from_flat(j, n_heads),
                    score,
                })
                .collect(),
            cv,
        })
    }

    pub fn score(&self, head: HeadId) -> f64 {
        self.scores[head.flat(self.n_heads)].score
    }

    pub fn values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.score).collect()
    }

    /// Heads from best to worst; exact ties fall back to `HeadId` order.
    pub fn ranking(&self) -> Vec<HeadId> {
        let mut order: Vec<&HeadScore> = self.scores.iter().collect();
        let lower = self.method.lower_is_better();
        order.sort_by(|a, b| {
            let by_score = if lower {
                a.score.total_cmp(&b.score)
            } else {
                b.score.total_cmp(&a.score)
            };
            by_score.then(a.head.cmp(&b.head))
        });
        order.into_iter().map(|s| s.head).collect()
    }
}

/// The chosen heads, best first, with the table they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub heads: Vec<HeadId>,
    pub m: usize,
    pub table: HeadScoreTable,
}

impl SelectionResult {
    pub fn head_set(&self) -> BTreeSet<HeadId> {
        self.heads.iter().copied().collect()
    }
}

pub fn select_top_m(table: &HeadScoreTable, m: usize) -> Result<SelectionResult> {
    if m > table.scores.len() {
        return Err(Error::Contract(format!(
            "cannot select {m} of {} heads",
            table.scores.len()
        )));
    }
    let mut heads = table.ranking();
    heads.truncate(m);
    Ok(SelectionResult {
        heads,
        m,
        table: table.clone(),
    })
}

/// Per-row vectors prepared for the metric: unit-normalised for cosine
/// (zero vectors stay zero), raw otherwise.
fn prepared(cache: &ActivationCache, j: usize, metric: Metric) -> Vec<Vec<f64>> {
    (0..cache.n_rows())
        .map(|r| {
            let v: Vec<f64> = cache.row(j, r).iter().map(|&x| x as f64).collect();
            match metric {
                Metric::Cosine => {
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        v.iter().map(|x| x / norm).collect()
                    } else {
                        v
                    }
                }
                Metric::Euclidean => v,
            }
        })
        .collect()
}

fn similarity(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Cosine => a
            .iter()
            .zip(b)
            .map(|(x, y)| x * y)
            .sum::<f64>()
            .clamp(-1.0, 1.0),
        Metric::Euclidean => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>(),
    }
}

fn check_k(cache: &ActivationCache, k: usize) -> Result<()> {
    if cache.n_trajs() < 2 {
        return Err(Error::Contract(
            "k-NN scoring needs at least two trajectories".into(),
        ));
    }
    if k == 0 || k > cache.max_k() {
        return Err(Error::Contract(format!(
            "k = {k} outside 1..={} for this cache",
            cache.max_k()
        )));
    }
    Ok(())
}

/// Row indices of the `k` most similar rows from other trajectories,
/// ordered by rank.
fn neighbours(
    vecs: &[Vec<f64>],
    keys: &[RowKey],
    q: usize,
    k: usize,
    metric: Metric,
) -> Vec<usize> {
    let own = keys[q].traj;
    let mut cand: Vec<(f64, usize)> = (0..vecs.len())
        .filter(|&r| keys[r].traj != own)
        .map(|r| (similarity(&vecs[q], &vecs[r], metric), r))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
        b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
    };
    if k < cand.len() {
        cand.select_nth_unstable_by(k, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    cand.into_iter().map(|(_, r)| r).collect()
}

fn mean_action(cache: &ActivationCache, rows: &[usize]) -> Vec<f64> {
    let mut sorted = rows.to_vec();
    sorted.sort_unstable();
    let mut acc = vec![0.0f64; cache.d_action()];
    for &r in &sorted {
        for (a, &x) in acc.iter_mut().zip(cache.action(r)) {
            *a += x as f64;
        }
    }
    acc.iter().map(|a| a / rows.len() as f64).collect()
}

/// Rows retrieved for `query` under `head`, best first.
pub fn knn_neighbours(
    cache: &ActivationCache,
    head: HeadId,
    query: RowKey,
    k: usize,
    metric: Metric,
) -> Result<Vec<RowKey>> {
    check_k(cache, k)?;
    let q = row_of(cache, query)?;
    let vecs = prepared(cache, head.flat(cache.n_heads()), metric);
    Ok(neighbours(&vecs, cache.keys(), q, k, metric)
        .into_iter()
        .map(|r| cache.keys()[r])
        .collect())
}

fn row_of(cache: &ActivationCache, query: RowKey) -> Result<usize> {
    cache
        .find(query.traj, query.t)
        .ok_or_else(|| Error::Contract(format!("no cache row for {query:?}")))
}

/// Mean action of the `k` nearest rows from other trajectories.
pub fn knn_predict(
    cache: &ActivationCache,
    head: HeadId,
    query: RowKey,
    k: usize,
    metric: Metric,
) -> Result<Vec<f64>> {
    check_k(cache, k)?;
    if head.layer >= cache.n_layers() || head.head >= cache.n_heads() {
        return Err(Error::Contract(format!("head {head} is not in the cache")));
    }
    let q = row_of(cache, query)?;
    let vecs = prepared(cache, head.flat(cache.n_heads()), metric);
    let rows = neighbours(&vecs, cache.keys(), q, k, metric);
    Ok(mean_action(cache, &rows))
}

fn head_mse(cache: &ActivationCache, j: usize, k: usize, metric: Metric) -> f64 {
    let vecs = prepared(cache, j, metric);
    let mut total = 0.0;
    for q in 0..cache.n_rows() {
        let pred = mean_action(cache, &neighbours(&vecs, cache.keys(), q, k, metric));
        total += pred
            .iter()
            .zip(cache.action(q))
            .map(|(p, &a)| (p - a as f64).powi(2))
            .sum::<f64>();
    }
    total / cache.n_rows() as f64
}

/// Mean squared k-NN prediction error of every head, averaged over all
/// retained rows.
pub fn score_heads(cache: &ActivationCache, k: usize, metric: Metric) -> Result<HeadScoreTable> {
    check_k(cache, k)?;
    let scores: Vec<f64> = (0..cache.n_head_total())
        .into_par_iter()
        .map(|j| head_mse(cache, j, k, metric))
        .collect();
    let mut table = HeadScoreTable::new(Method::Knn, cache.n_layers(), cache.n_heads(), scores)?;
    table.k = Some(k);
    table.metric = Some(metric);
    Ok(table)
}

pub const DEFAULT_K_CANDIDATES: [usize; 4] = [10, 20, 30, 40];

/// Tries every valid `k`, keeping the one whose top-`m` heads have the lowest
/// mean score. Ties go to the smaller `k`.
pub fn search_k(
    cache: &ActivationCache,
    candidates: &[usize],
    m: usize,
    metric: Metric,
) -> Result<(usize, SelectionResult)> {
    let mut ks: Vec<usize> = candidates.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut best: Option<(f64, usize, SelectionResult)> = None;
    for k in ks {
        if k == 0 || k > cache.max_k() {
            log::warn!("skipping k = {k}: cache allows at most {}", cache.max_k());
            continue;
        }
        let sel = select_top_m(&score_heads(cache, k, metric)?, m)?;
        let mean = if m == 0 {
            0.0
        } else {
            sel.heads.iter().map(|&h| sel.table.score(h)).sum::<f64>() / m as f64
        };
        if best.as_ref().is_none_or(|(b, _, _)| mean < *b) {
            best = Some((mean, k, sel));
        }
    }
    best.map(|(_, k, sel)| (k, sel))
        .ok_or_else(|| Error::Contract("no candidate k is valid for this cache".into()))
}
