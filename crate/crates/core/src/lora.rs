//! Low-rank adapters on per-head query (and output) slices, and the
//! trainability mask that decides which tensors may change during finetuning.
//!
//! A [`TrainMask`] partitions every canonical tensor name into three groups:
//!
//! * **LoRA targets**: the base tensor stays frozen; a rank-`r` adapter
//!   `W' = W + (α/r)·B·A` carries the update.
//! * **Direct**: trained in place (MLPs of selected layers, the action head,
//!   and in the full-head baseline also the obs embedder).
//! * **Frozen**: everything else, including the shared key/value projection
//!   of every layer.
//!
//! Base tensors are never written by training, so LoRA targets are
//! byte-identical before and after a run just like frozen tensors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Mat, RngStream};
use crate::policy::{PolicyConfig, PolicyParams};

/// Attention head `(layer, head)`. Ordered by layer, then head. Serialized
/// as `"L<layer>H<head>"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        HeadId { layer, head }
    }

    /// Row-major index `layer * n_heads + head`.
    pub fn flat(&self, n_heads: usize) -> usize {
        self.layer * n_heads + self.head
    }

    pub fn from_flat(index: usize, n_heads: usize) -> Self {
        HeadId::new(index / n_heads, index % n_heads)
    }

    /// Every head of a config in canonical order.
    pub fn all(cfg: &PolicyConfig) -> Vec<HeadId> {
        (0..cfg.n_heads_total())
            .map(|i| HeadId::from_flat(i, cfg.n_heads))
            .collect()
    }

    pub fn query_tensor(&self) -> String {
        format!("layer{}.q_head{}", self.layer, self.head)
    }

    pub fn output_tensor(&self) -> String {
        format!("layer{}.o_head{}", self.layer, self.head)
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

impl From<HeadId> for String {
    fn from(h: HeadId) -> String {
        h.to_string()
    }
}

impl TryFrom<String> for HeadId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for HeadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse head id {s:?}, expected L<l>H<h>"));
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (l, h) = rest.split_once('H').ok_or_else(bad)?;
        Ok(HeadId::new(
            l.parse().map_err(|_| bad())?,
            h.parse().map_err(|_| bad())?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskVariant {
    QueriesOnly,
    QueriesPlusMlp,
    /// Ignores the selection: every head's slices, every MLP, and the obs embedder.
    FullHeadBaseline,
}

impl FromStr for MaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "queries_only" => Ok(MaskVariant::QueriesOnly),
            "queries_plus_mlp" => Ok(MaskVariant::QueriesPlusMlp),
            "full_head_baseline" => Ok(MaskVariant::FullHeadBaseline),
            other => Err(Error::Config(format!("unknown mask variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMask {
    pub variant: MaskVariant,
    pub selected_heads: BTreeSet<HeadId>,
    /// Tensors adapted through a low-rank adapter.
    pub lora_targets: BTreeSet<String>,
    /// Tensors trained in place.
    pub direct: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl TrainMask {
    /// Union of LoRA targets and directly trained tensors.
    pub fn adapted(&self) -> BTreeSet<String> {
        self.lora_targets.union(&self.direct).cloned().collect()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Stable 64-bit digest of the mask contents, recorded in checkpoints.
    pub fn digest(&self) -> u64 {
        let text = serde_json::to_string(self).expect("mask serializes");
        crate::store::fnv1a64(text.as_bytes())
    }
}

/// Builds the trainability mask over every tensor of `params`.
///
/// `adapt_output_slices` also puts a LoRA adapter on each adapted head's
/// output-projection slice.
pub fn build_mask(
    params: &PolicyParams,
    selected: &BTreeSet<HeadId>,
    variant: MaskVariant,
    adapt_output_slices: bool,
) -> Result<TrainMask> {
    let cfg = &params.config;
    for h in selected {
        if h.layer >= cfg.n_layers || h.head >= cfg.n_heads {
            return Err(Error::Contract(format!(
                "selected head {h} is out of range"
            )));
        }
    }
    let heads: BTreeSet<HeadId> = match variant {
        MaskVariant::FullHeadBaseline => HeadId::all(cfg).into_iter().collect(),
        _ => {
            if selected.is_empty() {
                return Err(Error::Contract(
                    "steering variants need at least one selected head".into(),
                ));
            }
            selected.clone()
        }
    };

    let mut lora_targets = BTreeSet::new();
    for h in &heads {
        lora_targets.insert(h.query_tensor());
        if adapt_output_slices {
            lora_targets.insert(h.output_tensor());
        }
    }

    let all = params.names();
    let mut direct = BTreeSet::new();
    let mlp_layers: BTreeSet<usize> = match variant {
        MaskVariant::QueriesOnly => BTreeSet::new(),
        _ => heads.iter().map(|h| h.layer).collect(),
    };
    for name in &all {
        let is_mlp = mlp_layers
            .iter()
            .any(|l| name.starts_with(&format!("layer{l}.mlp.")));
        let is_head = name.starts_with("action_head.");
        let is_obs = variant == MaskVariant::FullHeadBaseline && name.starts_with("embed.obs.");
        if is_mlp || is_head || is_obs {
            direct.insert(name.clone());
        }
    }
    let frozen = all
        .into_iter()
        .filter(|n| !lora_targets.contains(n) && !direct.contains(n))
        .collect();
    Ok(TrainMask {
        variant,
        selected_heads: selected.clone(),
        lora_targets,
        direct,
        frozen,
    })
}

/// Rank-`r` additive update `scale · B · A` on one base tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    /// `r × d_in`
    pub a: Mat,
    /// `d_out × r`
    pub b: Mat,
    pub rank: usize,
    pub alpha: f32,
}

impl LoraAdapter {
    pub fn new(
        target: &str,
        d_out: usize,
        d_in: usize,
        rank: usize,
        alpha: f32,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if rank == 0 || rank > d_out.min(d_in) {
            return Err(Error::Contract(format!(
                "rank {rank} invalid for {target} ({d_out}x{d_in})"
            )));
        }
        Ok(LoraAdapter {
            target: target.to_string(),
            a: Mat::randn(rank, d_in, 0.01, rng),
            b: Mat::zeros(d_out, rank),
            rank,
            alpha,
        })
    }

    #[inline]
    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    /// `scale · B · A`
    pub fn delta(&self) -> Mat {
        let mut d = self.b.matmul(&self.a).expect("adapter shapes agree");
        let s = self.scale();
        d.data_mut().iter_mut().for_each(|x| *x *= s);
        d
    }

    /// Adds the update to `w`. Entries with a zero update are left untouched,
    /// so a zero-`B` adapter reproduces `w` bit for bit.
    pub fn apply_to(&self, w: &mut Mat) {
        for (x, &d) in w.data_mut().iter_mut().zip(self.delta().data()) {
            if d != 0.0 {
                *x += d;
            }
        }
    }

    /// Chain rule from the effective-weight gradient `g` to `(dA, dB)`.
    pub fn grads(&self, g: &Mat) -> (Mat, Mat) {
        let s = self.scale();
        let mut da = self.b.transpose().matmul(g).expect("shapes");
        let mut db = g.matmul(&self.a.transpose()).expect("shapes");
        da.data_mut().iter_mut().for_each(|x| *x *= s);
        db.data_mut().iter_mut().for_each(|x| *x *= s);
        (da, db)
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Base parameters with attached adapters and the mask they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedPolicy {
    pub base: PolicyParams,
    pub adapters: BTreeMap<String, LoraAdapter>,
    pub mask: TrainMask,
}

/// Attaches a zero-initialized adapter (`A ~ N(0, 0.01²)`, `B = 0`) to every
/// LoRA target of `mask`.
pub fn attach(
    params: PolicyParams,
    mask: TrainMask,
    rank: usize,
    alpha: f32,
    rng: &mut RngStream,
) -> Result<AdaptedPolicy> {
    let mut adapted = AdaptedPolicy {
        base: params,
        adapters: BTreeMap::new(),
        mask,
    };
    let targets: Vec<String> = adapted.mask.lora_targets.iter().cloned().collect();
    for t in targets {
        adapted.attach_one(&t, rank, alpha, rng)?;
    }
    Ok(adapted)
}

impl AdaptedPolicy {
    /// Plain parameters with no adapters and a mask that trains every tensor
    /// directly; used for pretraining.
    pub fn fully_trainable(params: PolicyParams) -> Self {
        let mask = TrainMask {
            variant: MaskVariant::FullHeadBaseline,
            selected_heads: BTreeSet::new(),
            lora_targets: BTreeSet::new(),
            direct: params.names().into_iter().collect(),
            frozen: BTreeSet::new(),
        };
        AdaptedPolicy {
            base: params,
            adapters: BTreeMap::new(),
            mask,
        }
    }

    pub fn attach_one(
        &mut self,
        target: &str,
        rank: usize,
        alpha: f32,
        rng: &mut RngStream,
    ) -> Result<()> {
        if self.adapters.contains_key(target) {
            return Err(Error::Contract(format!(
                "adapter already attached to {target}"
            )));
        }
        let (d_out, d_in) = self.base.require(target)?.shape();
        let adapter = LoraAdapter::new(target, d_out, d_in, rank, alpha, rng)?;
        self.adapters.insert(target.to_string(), adapter);
        Ok(())
    }

    /// Base weights with every adapter update applied.
    pub fn effective(&self) -> PolicyParams {
        let mut p = self.base.clone();
        for (name, ad) in &self.adapters {
            ad.apply_to(p.get_mut(name).expect("adapter target exists"));
        }
        p
    }

    /// Folds the adapters into plain parameters.
    pub fn merge(&self) -> PolicyParams {
        self.effective()
    }

    /// Number of values the optimizer updates.
    pub fn trainable_param_count(&self) -> usize {
        let direct: usize = self
            .mask
            .direct
            .iter()
            .map(|n| self.base.get(n).map_or(0, |m| m.len()))
            .sum();
        direct
            + self
                .adapters
                .values()
                .map(LoraAdapter::param_count)
                .sum::<usize>()
    }
}

/// Trainable count implied by a mask under rank `r`, from shapes alone.
pub fn trainable_count_for(params: &PolicyParams, mask: &TrainMask, rank: usize) -> usize {
    let lora: usize = mask
        .lora_targets
        .iter()
        .filter_map(|n| params.get(n))
        .map(|m| rank * (m.rows() + m.cols()))
        .sum();
    let direct: usize = mask
        .direct
        .iter()
        .filter_map(|n| params.get(n))
        .map(|m| m.len())
        .sum();
    lora + direct
}
