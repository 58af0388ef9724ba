use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::HeadId;

use super::cache::ActivationCache;
use super::knn::{select_top_m, HeadScoreTable, Method, SelectionResult};

/// Outcome of centroid-based head classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidResult {
    pub selection: SelectionResult,
    /// Fraction of held-out rows classified correctly by majority vote.
    pub accuracy: f64,
    /// Mean signed vote count over held-out rows, in `[-m, m]`.
    pub voting_margin: f64,
}

fn cos(a: &[f64], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let y = y as f64;
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Splits row indices into (support, held-out): the first half of the
/// trajectories, rounded up, form the support set.
fn split(cache: &ActivationCache) -> (Vec<usize>, Vec<usize>) {
    let mut trajs: Vec<usize> = cache.keys().iter().map(|k| k.traj).collect();
    trajs.dedup();
    let cut = trajs.len().div_ceil(2);
    let support_trajs = &trajs[..cut];
    (0..cache.n_rows()).partition(|&r| support_trajs.contains(&cache.keys()[r].traj))
}

fn centroid(cache: &ActivationCache, j: usize, rows: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; cache.d_head()];
    for &r in rows {
        for (ci, &x) in c.iter_mut().zip(cache.row(j, r)) {
            *ci += x as f64;
        }
    }
    c.iter().map(|x| x / rows.len() as f64).collect()
}

/// Scores each head by how much closer samples sit to their own class
/// centroid, keeps the top `m`, and evaluates them as a voting classifier
/// on held-out trajectories. Ties in the vote predict the positive class.
pub fn centroid_select(
    pos: &ActivationCache,
    neg: &ActivationCache,
    m: usize,
) -> Result<CentroidResult> {
    if pos.n_rows() == 0 || neg.n_rows() == 0 {
        return Err(Error::Contract(
            "both classes need at least one sample".into(),
        ));
    }
    if (pos.n_layers(), pos.n_heads(), pos.d_head())
        != (neg.n_layers(), neg.n_heads(), neg.d_head())
    {
        return Err(Error::Contract(
            "class caches disagree on dimensions".into(),
        ));
    }
    let nh = pos.n_head_total();
    if m == 0 || m > nh {
        return Err(Error::Contract(format!("cannot select {m} of {nh} heads")));
    }
    let (pos_sup, mut pos_held) = split(pos);
    let (neg_sup, mut neg_held) = split(neg);
    if pos_held.is_empty() && neg_held.is_empty() {
        pos_held = pos_sup.clone();
        neg_held = neg_sup.clone();
    }

    let centroids: Vec<(Vec<f64>, Vec<f64>)> = (0..nh)
        .map(|j| (centroid(pos, j, &pos_sup), centroid(neg, j, &neg_sup)))
        .collect();
    // cos to own centroid minus cos to the other, sign-flipped for negatives
    let gap = |c: &ActivationCache, j: usize, r: usize| {
        let (cp, cn) = &centroids[j];
        cos(cp, c.row(j, r)) - cos(cn, c.row(j, r))
    };
    let scores: Vec<f64> = (0..nh)
        .map(|j| {
            let s: f64 = pos_sup.iter().map(|&r| gap(pos, j, r)).sum::<f64>()
                - neg_sup.iter().map(|&r| gap(neg, j, r)).sum::<f64>();
            s / (pos_sup.len() + neg_sup.len()) as f64
        })
        .collect();
    let table = HeadScoreTable::new(Method::Centroid, pos.n_layers(), pos.n_heads(), scores)?;
    let selection = select_top_m(&table, m)?;
    let flat: Vec<usize> = selection
        .heads
        .iter()
        .map(|h: &HeadId| h.flat(pos.n_heads()))
        .collect();

    let mut correct = 0usize;
    let mut margin = 0i64;
    let mut total = 0usize;
    for (c, rows, sign) in [(pos, &pos_held, 1i64), (neg, &neg_held, -1i64)] {
        for &r in rows.iter() {
            let votes: i64 = flat
                .iter()
                .map(|&j| if gap(c, j, r) >= 0.0 { 1 } else { -1 })
                .sum();
            let predicted = if votes >= 0 { 1 } else { -1 };
            correct += usize::from(predicted == sign);
            margin += sign * votes;
            total += 1;
        }
    }
    Ok(CentroidResult {
        selection,
        accuracy: correct as f64 / total as f64,
        voting_margin: margin as f64 / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngStream;
    use crate::selector::RowKey;

    fn cache(
        seed: u64,
        n_traj: usize,
        t: usize,
        mut f: impl FnMut(usize, &mut RngStream) -> Vec<f32>,
    ) -> ActivationCache {
        let mut rng = RngStream::new(seed, 0);
        let keys: Vec<RowKey> = (0..n_traj)
            .flat_map(|traj| (0..t).map(move |t| RowKey { traj, t }))
            .collect();
        let actions = vec![0.0; keys.len()];
        ActivationCache::from_fn(2, 2, 4, 1, keys, actions, |h, _| f(h.flat(2), &mut rng)).unwrap()
    }

    #[test]
    fn identical_classes_give_zero_scores_and_chance() {
        let a = cache(1, 4, 3, |_, r| (0..4).map(|_| r.normal() as f32).collect());
        let res = centroid_select(&a, &a.clone(), 3).unwrap();
        assert!(res.selection.table.scores.iter().all(|s| s.score == 0.0));
        assert_eq!(res.accuracy, 0.5);
        assert_eq!(res.voting_margin, 0.0);
    }

    #[test]
    fn separable_classes_are_perfect() {
        let jitter =
            |r: &mut RngStream| (0..3).map(|_| 0.1 * r.normal() as f32).collect::<Vec<_>>();
        let pos = cache(2, 5, 4, |_, r| [vec![1.0], jitter(r)].concat());
        let neg = cache(3, 4, 4, |_, r| [vec![-1.0], jitter(r)].concat());
        let res = centroid_select(&pos, &neg, 3).unwrap();
        assert_eq!(res.accuracy, 1.0);
        assert_eq!(res.voting_margin, 3.0);
    }

    #[test]
    fn margin_stays_within_bounds() {
        for seed in 0..20 {
            let pos = cache(seed, 3, 3, |j, r| {
                (0..4)
                    .map(|_| (r.normal() + j as f64 * 0.3) as f32)
                    .collect()
            });
            let neg = cache(seed + 100, 3, 3, |_, r| {
                (0..4).map(|_| r.normal() as f32).collect()
            });
            let m = 1 + seed as usize % 4;
            let res = centroid_select(&pos, &neg, m).unwrap();
            assert!(res.voting_margin.abs() <= m as f64);
            assert!((0.0..=1.0).contains(&res.accuracy));
        }
    }

    #[test]
    fn empty_class_is_rejected() {
        let a = cache(1, 2, 2, |_, r| (0..4).map(|_| r.normal() as f32).collect());
        let empty = ActivationCache::from_parts(2, 2, 4, 1, vec![], vec![], vec![]).unwrap();
        assert!(centroid_select(&a, &empty, 1).is_err());
    }
}
