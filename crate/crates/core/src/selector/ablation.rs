//! Selection by noise ablation: per-head CMA scores and REINFORCE search over
//! head subsets. Both measure demo action error with some heads' outputs
//! perturbed by Gaussian noise scaled to their running std.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::HeadId;
use crate::numkit::{mix64, RngStream};
use crate::policy::{predict_action_with, ForwardOptions, HeadNoise, PolicyParams};
use crate::simenv::DemoSet;

use super::cache::{ActivationCache, RowKey};
use super::knn::{select_top_m, HeadScoreTable, Method, SelectionResult};

/// Mean squared action error over `rows`, optionally with head noise.
///
/// Each row gets its own noise stream derived from `stream_base`, and
/// flow-matching heads start from the same Gaussian draw with or without
/// noise, so clean and noised passes differ only through the ablation.
pub fn demo_mse(
    params: &PolicyParams,
    demos: &DemoSet,
    rows: &[RowKey],
    sigma: &BTreeMap<HeadId, f64>,
    noise_seed: u64,
    stream_base: u64,
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Contract("no rows to evaluate".into()));
    }
    let errs: Vec<f64> = rows
        .par_iter()
        .enumerate()
        .map(|(r, key)| {
            let step = demos
                .trajectories
                .get(key.traj)
                .and_then(|t| t.steps.get(key.t))
                .ok_or_else(|| Error::Contract(format!("demo set has no step {key:?}")))?;
            let noise = HeadNoise {
                sigma: sigma.clone(),
                seed: noise_seed,
                stream: mix64(stream_base ^ r as u64),
            };
            let opts = ForwardOptions {
                noise: (!sigma.is_empty()).then_some(&noise),
                ..Default::default()
            };
            let mut rng = RngStream::new(0xF10_5EED, r as u64);
            let pred = predict_action_with(params, &step.seq, &opts, &mut rng).map_err(|e| {
                Error::NumericFaultAt {
                    traj: key.traj,
                    t: key.t,
                    source: Box::new(e),
                }
            })?;
            Ok(pred
                .iter()
                .zip(&step.action)
                .map(|(p, a)| ((p - a) as f64).powi(2))
                .sum::<f64>())
        })
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / rows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmaOptions {
    pub seed: u64,
    /// Independent noise draws averaged per head.
    pub repeats: usize,
}

impl Default for CmaOptions {
    fn default() -> Self {
        CmaOptions {
            seed: 0,
            repeats: 1,
        }
    }
}

/// Per-head increase in demo action MSE when that head alone is noised with
/// σ equal to its running std. Larger means more important.
pub fn cma_score(
    params: &PolicyParams,
    demos: &DemoSet,
    cache: &ActivationCache,
    opts: CmaOptions,
) -> Result<HeadScoreTable> {
    if opts.repeats == 0 {
        return Err(Error::Contract("CMA needs at least one noise draw".into()));
    }
    let cfg = &params.config;
    if (cfg.n_layers, cfg.n_heads) != (cache.n_layers(), cache.n_heads()) {
        return Err(Error::Contract(
            "cache was not extracted from this policy".into(),
        ));
    }
    let rows = cache.keys();
    let clean = demo_mse(params, demos, rows, &BTreeMap::new(), 0, 0)?;
    let scores: Vec<f64> = (0..cache.n_head_total())
        .into_par_iter()
        .map(|j| {
            let head = HeadId::from_flat(j, cache.n_heads());
            let sigma = BTreeMap::from([(head, cache.running_std(head))]);
            let mut total = 0.0;
            for rep in 0..opts.repeats {
                let seed = mix64(opts.seed ^ mix64(rep as u64));
                total += demo_mse(params, demos, rows, &sigma, seed, (j as u64) << 32)? - clean;
            }
            Ok(total / opts.repeats as f64)
        })
        .collect::<Result<_>>()?;
    let mut table = HeadScoreTable::new(Method::Cma, cache.n_layers(), cache.n_heads(), scores)?;
    table.seed = Some(opts.seed);
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReinforceOptions {
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
    pub baseline_decay: f64,
    /// Demo rows scored per iteration; all of them when `None`.
    pub rows_per_iter: Option<usize>,
}

impl Default for ReinforceOptions {
    fn default() -> Self {
        ReinforceOptions {
            iters: 200,
            lr: 0.5,
            seed: 0,
            baseline_decay: 0.9,
            rows_per_iter: None,
        }
    }
}

/// Logits beyond this magnitude abort the search.
pub const LOGIT_LIMIT: f64 = 50.0;

/// Gumbel-top-m sample: the `m` largest perturbed logits, best first.
fn sample_subset(z: &[f64], m: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = z
        .iter()
        .enumerate()
        .map(|(j, &zj)| (zj + rng.gumbel(), j))
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(m).map(|(_, j)| j).collect()
}

/// Gradient of the Plackett–Luce log-probability of drawing `order` first.
pub fn subset_log_prob_grad(z: &[f64], order: &[usize]) -> Vec<f64> {
    let mut grad = vec![0.0; z.len()];
    let mut remaining: Vec<usize> = (0..z.len()).collect();
    for &s in order {
        let max = remaining
            .iter()
            .map(|&j| z[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = remaining.iter().map(|&j| (z[j] - max).exp()).collect();
        let total: f64 = w.iter().sum();
        for (&j, wj) in remaining.iter().zip(&w) {
            grad[j] -= wj / total;
        }
        grad[s] += 1.0;
        remaining.retain(|&j| j != s);
    }
    grad
}

/// Score-function search over m-subsets. The reward is the negative demo
/// action MSE with every unselected head noised.
pub fn reinforce_select(
    params: &PolicyParams,
    demos: &DemoSet,
    cache: &ActivationCache,
    m: usize,
    opts: ReinforceOptions,
) -> Result<SelectionResult> {
    let n = cache.n_head_total();
    if m == 0 || m > n {
        return Err(Error::Contract(format!("cannot select {m} of {n} heads")));
    }
    let mut z = vec![0.0f64; n];
    let mut rng = RngStream::new(opts.seed, 0x5E1EC7);
    let mut baseline: Option<f64> = None;
    let all_rows = cache.keys();
    for it in 0..opts.iters {
        let chosen = sample_subset(&z, m, &mut rng);
        let sigma: BTreeMap<HeadId, f64> = (0..n)
            .filter(|j| !chosen.contains(j))
            .map(|j| {
                let h = HeadId::from_flat(j, cache.n_heads());
                (h, cache.running_std(h))
            })
            .collect();
        let rows: Vec<RowKey> = match opts.rows_per_iter {
            Some(b) if b < all_rows.len() => {
                let mut idx: Vec<usize> = (0..all_rows.len()).collect();
                rng.shuffle(&mut idx);
                idx.truncate(b);
                idx.sort_unstable();
                idx.into_iter().map(|i| all_rows[i]).collect()
            }
            _ => all_rows.to_vec(),
        };
        let reward = -demo_mse(
            params,
            demos,
            &rows,
            &sigma,
            mix64(opts.seed ^ it as u64),
            0,
        )?;
        let b = *baseline.get_or_insert(reward);
        let advantage = reward - b;
        baseline = Some(opts.baseline_decay * b + (1.0 - opts.baseline_decay) * reward);
        let grad = subset_log_prob_grad(&z, &chosen);
        for (zj, g) in z.iter_mut().zip(&grad) {
            *zj += opts.lr * advantage * g;
        }
        if let Some(worst) = z.iter().map(|x| x.abs()).max_by(f64::total_cmp) {
            if !(worst <= LOGIT_LIMIT) {
                return Err(Error::Divergence(format!(
                    "selection logits reached |z| = {worst:.3e} at iteration {it} \
                     (reward {reward:.4e}, baseline {b:.4e}, lr {})",
                    opts.lr
                )));
            }
        }
    }
    let mut table = HeadScoreTable::new(Method::Reinforce, cache.n_layers(), cache.n_heads(), z)?;
    table.seed = Some(opts.seed);
    select_top_m(&table, m)
}
