use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::HeadId;
use crate::policy::{forward, ForwardOptions, PolicyParams, TapToken};
use crate::simenv::DemoSet;

/// Position of a cache row in its demo set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub traj: usize,
    pub t: usize,
}

/// Head activations at the extraction token for every retained demo step.
///
/// Values are stored head-major: all rows of head `(0, 0)`, then `(0, 1)`,
/// and so on. Rows are sorted by `(traj, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub(crate) n_layers: usize,
    pub(crate) n_heads: usize,
    pub(crate) d_head: usize,
    pub(crate) d_action: usize,
    pub(crate) token: TapToken,
    pub(crate) stride: usize,
    pub(crate) keys: Vec<RowKey>,
    pub(crate) actions: Vec<f32>,
    pub(crate) values: Vec<f32>,
    pub(crate) running_std: Vec<f64>,
}

/// Which demo steps enter the cache, and where activations are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractOptions {
    pub stride: usize,
    pub token: TapToken,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            stride: 1,
            token: TapToken::State,
        }
    }
}

impl ActivationCache {
    /// Builds a cache from raw parts, computing each head's running std.
    ///
    /// `values` is head-major with `n_layers * n_heads * keys.len() * d_head`
    /// entries.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        n_layers: usize,
        n_heads: usize,
        d_head: usize,
        d_action: usize,
        keys: Vec<RowKey>,
        actions: Vec<f32>,
        values: Vec<f32>,
    ) -> Result<Self> {
        let mut cache = ActivationCache {
            n_layers,
            n_heads,
            d_head,
            d_action,
            token: TapToken::State,
            stride: 1,
            keys,
            actions,
            values,
            running_std: Vec::new(),
        };
        cache.check()?;
        cache.running_std = (0..cache.n_head_total())
            .map(|j| cache.head_std(j))
            .collect();
        Ok(cache)
    }

    /// Planted or synthetic caches: `f(head, row)` supplies each activation.
    #[allow(clippy::too_many_arguments)]
    pub fn from_fn(
        n_layers: usize,
        n_heads: usize,
        d_head: usize,
        d_action: usize,
        keys: Vec<RowKey>,
        actions: Vec<f32>,
        mut f: impl FnMut(HeadId, usize) -> Vec<f32>,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(n_layers * n_heads * keys.len() * d_head);
        for j in 0..n_layers * n_heads {
            for r in 0..keys.len() {
                let v = f(HeadId::from_flat(j, n_heads), r);
                if v.len() != d_head {
                    return Err(Error::Contract(format!(
                        "activation of width {} where {d_head} was expected",
                        v.len()
                    )));
                }
                values.extend(v);
            }
        }
        Self::from_parts(n_layers, n_heads, d_head, d_action, keys, actions, values)
    }

    pub(crate) fn check(&self) -> Result<()> {
        let n = self.keys.len();
        if self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 || self.d_action == 0 {
            return Err(Error::Contract("cache dimensions must be positive".into()));
        }
        if self.actions.len() != n * self.d_action
            || self.values.len() != self.n_head_total() * n * self.d_head
        {
            return Err(Error::Contract(format!(
                "cache buffers do not match {} rows of L={} H={} d_h={} d_a={}",
                n, self.n_layers, self.n_heads, self.d_head, self.d_action
            )));
        }
        if self.keys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract(
                "cache rows must be strictly (traj, t) ordered".into(),
            ));
        }
        if !self
            .values
            .iter()
            .chain(&self.actions)
            .all(|x| x.is_finite())
        {
            return Err(Error::Contract("cache holds non-finite entries".into()));
        }
        Ok(())
    }

    /// Population std of one head's activations, pooled over dimensions,
    /// accumulated with Welford's streaming update in row order.
    fn head_std(&self, j: usize) -> f64 {
        let dh = self.d_head;
        let mut mean = vec![0.0f64; dh];
        let mut m2 = vec![0.0f64; dh];
        for r in 0..self.n_rows() {
            let n = (r + 1) as f64;
            for (c, &x) in self.row(j, r).iter().enumerate() {
                let x = x as f64;
                let delta = x - mean[c];
                mean[c] += delta / n;
                m2[c] += delta * (x - mean[c]);
            }
        }
        if self.n_rows() == 0 {
            return 0.0;
        }
        (m2.iter().sum::<f64>() / (dh * self.n_rows()) as f64).sqrt()
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn n_head_total(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn d_action(&self) -> usize {
        self.d_action
    }

    pub fn token(&self) -> TapToken {
        self.token
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn n_rows(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self) -> &[RowKey] {
        &self.keys
    }

    /// Number of distinct trajectories.
    pub fn n_trajs(&self) -> usize {
        let mut n = 0;
        let mut last = None;
        for k in &self.keys {
            if last != Some(k.traj) {
                n += 1;
                last = Some(k.traj);
            }
        }
        n
    }

    pub fn find(&self, traj: usize, t: usize) -> Option<usize> {
        self.keys.binary_search(&RowKey { traj, t }).ok()
    }

    pub fn action(&self, r: usize) -> &[f32] {
        &self.actions[r * self.d_action..(r + 1) * self.d_action]
    }

    pub fn actions(&self) -> &[f32] {
        &self.actions
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Activation of flat head `j` at row `r`.
    pub fn row(&self, j: usize, r: usize) -> &[f32] {
        let start = (j * self.n_rows() + r) * self.d_head;
        &self.values[start..start + self.d_head]
    }

    pub fn head_block(&self, head: HeadId) -> &[f32] {
        let n = self.n_rows() * self.d_head;
        let j = head.flat(self.n_heads);
        &self.values[j * n..(j + 1) * n]
    }

    pub fn running_std(&self, head: HeadId) -> f64 {
        self.running_std[head.flat(self.n_heads)]
    }

    pub fn running_stds(&self) -> &[f64] {
        &self.running_std
    }

    /// Largest `k` valid for every query: rows outside the query's own
    /// trajectory, minimised over trajectories.
    pub fn max_k(&self) -> usize {
        let mut largest = 0;
        let mut i = 0;
        while i < self.keys.len() {
            let mut j = i;
            while j < self.keys.len() && self.keys[j].traj == self.keys[i].traj {
                j += 1;
            }
            largest = largest.max(j - i);
            i = j;
        }
        self.n_rows() - largest
    }

    /// Multiplies every activation of one head by `factor`.
    pub fn scale_head(&mut self, head: HeadId, factor: f32) {
        let n = self.n_rows() * self.d_head;
        let j = head.flat(self.n_heads);
        self.values[j * n..(j + 1) * n]
            .iter_mut()
            .for_each(|x| *x *= factor);
        self.running_std[j] *= factor.abs() as f64;
    }

    /// Stacks caches of the same geometry, renumbering trajectories so that
    /// each input keeps its own block.
    pub fn concat(caches: &[&ActivationCache]) -> Result<ActivationCache> {
        let first = caches
            .first()
            .ok_or_else(|| Error::Contract("nothing to concatenate".into()))?;
        let dims = |c: &ActivationCache| (c.n_layers, c.n_heads, c.d_head, c.d_action);
        if caches.iter().any(|c| dims(c) != dims(first)) {
            return Err(Error::Contract("caches disagree on dimensions".into()));
        }
        let mut keys = Vec::new();
        let mut actions = Vec::new();
        let mut offset = 0;
        for c in caches {
            keys.extend(c.keys.iter().map(|k| RowKey {
                traj: k.traj + offset,
                t: k.t,
            }));
            actions.extend_from_slice(&c.actions);
            offset += c.keys.last().map_or(0, |k| k.traj + 1);
        }
        let mut values = Vec::new();
        for j in 0..first.n_head_total() {
            for c in caches {
                let n = c.n_rows() * c.d_head;
                values.extend_from_slice(&c.values[j * n..(j + 1) * n]);
            }
        }
        let mut out = Self::from_parts(
            first.n_layers,
            first.n_heads,
            first.d_head,
            first.d_action,
            keys,
            actions,
            values,
        )?;
        out.token = first.token;
        out.stride = first.stride;
        Ok(out)
    }

    /// Rows of the listed trajectory ids only, renumbered `0..` in id order.
    pub fn subset_trajs(&self, trajs: &[usize]) -> Result<ActivationCache> {
        let mut ids = trajs.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let rows: Vec<usize> = (0..self.n_rows())
            .filter(|&r| ids.binary_search(&self.keys[r].traj).is_ok())
            .collect();
        if rows.is_empty() {
            return Err(Error::Contract(
                "trajectory subset selects no cache rows".into(),
            ));
        }
        let keys = rows
            .iter()
            .map(|&r| RowKey {
                traj: ids.binary_search(&self.keys[r].traj).expect("filtered"),
                t: self.keys[r].t,
            })
            .collect();
        let actions = rows
            .iter()
            .flat_map(|&r| self.action(r).iter().copied())
            .collect();
        let values = (0..self.n_head_total())
            .flat_map(|j| {
                rows.iter()
                    .flat_map(move |&r| self.row(j, r).iter().copied())
            })
            .collect();
        let mut out = Self::from_parts(
            self.n_layers,
            self.n_heads,
            self.d_head,
            self.d_action,
            keys,
            actions,
            values,
        )?;
        out.token = self.token;
        out.stride = self.stride;
        Ok(out)
    }

    /// Distinct trajectory ids in row order.
    pub fn traj_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.keys.iter().map(|k| k.traj).collect();
        ids.dedup();
        ids
    }
}

/// Timesteps kept at keyframe stride `s`: multiples of `s` plus every step
/// where the gripper command flips.
pub fn retained_steps(traj: &crate::simenv::Trajectory, stride: usize) -> Vec<usize> {
    traj.steps
        .iter()
        .enumerate()
        .filter(|(t, s)| t % stride == 0 || s.gripper_change)
        .map(|(t, _)| t)
        .collect()
}

/// One tapped forward pass per retained demo step.
pub fn extract_cache(
    params: &PolicyParams,
    demos: &DemoSet,
    opts: ExtractOptions,
) -> Result<ActivationCache> {
    if opts.stride == 0 {
        return Err(Error::Contract("keyframe stride must be at least 1".into()));
    }
    demos.validate()?;
    let cfg = &params.config;
    if demos.d_action() != cfg.d_action {
        return Err(Error::Contract(format!(
            "demos have {}-d actions, policy emits {}",
            demos.d_action(),
            cfg.d_action
        )));
    }
    let fwd = ForwardOptions {
        tap: true,
        tap_token: opts.token,
        ..Default::default()
    };
    type Row = (RowKey, Vec<f32>, Vec<Vec<f32>>);
    let per_traj: Vec<Vec<Row>> = demos
        .trajectories
        .par_iter()
        .enumerate()
        .map(|(i, traj)| {
            retained_steps(traj, opts.stride)
                .into_iter()
                .map(|t| {
                    let step = &traj.steps[t];
                    let trace =
                        forward(params, &step.seq, &fwd).map_err(|e| Error::NumericFaultAt {
                            traj: i,
                            t,
                            source: Box::new(e),
                        })?;
                    Ok((RowKey { traj: i, t }, step.action.clone(), trace.taps))
                })
                .collect::<Result<Vec<Row>>>()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<Row> = per_traj.into_iter().flatten().collect();
    let nh = cfg.n_heads_total();
    let mut values = Vec::with_capacity(nh * rows.len() * cfg.d_head());
    for j in 0..nh {
        for (_, _, taps) in &rows {
            values.extend_from_slice(&taps[j]);
        }
    }
    let keys = rows.iter().map(|r| r.0).collect();
    let actions = rows.iter().flat_map(|r| r.1.iter().copied()).collect();
    let mut cache = ActivationCache::from_parts(
        cfg.n_layers,
        cfg.n_heads,
        cfg.d_head(),
        cfg.d_action,
        keys,
        actions,
        values,
    )?;
    cache.token = opts.token;
    cache.stride = opts.stride;
    Ok(cache)
}
