//! `HSCK1` checkpoint files.
//!
//! Body layout:
//!
//! ```text
//! u32-prefixed JSON metadata (config, mask, mask digest, parent hash, adapter settings)
//! u32 n_tensors, then per tensor in name order:
//!     u32-prefixed UTF-8 name, u32 rows, u32 cols, u64 offset (in f32 values from payload start)
//! f32 payload
//! ```
//!
//! Adapter factors are stored as ordinary tensors named `<target>.lora.A`
//! and `<target>.lora.B`. A merged checkpoint holds plain tensors only.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{AdaptedPolicy, LoraAdapter, TrainMask};
use crate::numkit::Mat;
use crate::policy::{PolicyConfig, PolicyParams};

use super::binary::{shape, Reader, Writer};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"HSCK1";

const LORA_A: &str = ".lora.A";
const LORA_B: &str = ".lora.B";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraMeta {
    pub rank: usize,
    pub alpha: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: PolicyConfig,
    pub mask: Option<TrainMask>,
    pub mask_digest: Option<u64>,
    /// Hash of the checkpoint this one was trained from.
    pub parent: Option<String>,
    /// Present when the file carries unmerged adapter factors.
    pub lora: Option<LoraMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Mat>,
}

impl Checkpoint {
    pub fn from_params(params: &PolicyParams, parent: Option<String>) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                config: params.config.clone(),
                mask: None,
                mask_digest: None,
                parent,
                lora: None,
            },
            tensors: params
                .named()
                .into_iter()
                .map(|(n, m)| (n, m.clone()))
                .collect(),
        }
    }

    /// Base tensors plus every adapter's factors.
    pub fn from_adapted(policy: &AdaptedPolicy, parent: Option<String>) -> Result<Self> {
        let mut ck = Self::from_params(&policy.base, parent);
        let mut lora = None;
        for (target, ad) in &policy.adapters {
            let this = LoraMeta {
                rank: ad.rank,
                alpha: ad.alpha,
            };
            if lora.is_some_and(|l| l != this) {
                return Err(Error::Contract(
                    "adapters with mixed rank or alpha cannot share a checkpoint".into(),
                ));
            }
            lora = Some(this);
            ck.tensors.insert(format!("{target}{LORA_A}"), ad.a.clone());
            ck.tensors.insert(format!("{target}{LORA_B}"), ad.b.clone());
        }
        ck.meta.lora = lora;
        ck.meta.mask_digest = Some(policy.mask.digest());
        ck.meta.mask = Some(policy.mask.clone());
        Ok(ck)
    }

    /// Adapters folded in; the result is a plain parameter file that still
    /// records the mask it was trained under.
    pub fn merged(policy: &AdaptedPolicy, parent: Option<String>) -> Self {
        let mut ck = Self::from_params(&policy.merge(), parent);
        ck.meta.mask_digest = Some(policy.mask.digest());
        ck.meta.mask = Some(policy.mask.clone());
        ck
    }

    /// Loads plain parameters into `config`. Every tensor of the config must
    /// be present with the right shape and nothing else may be; otherwise a
    /// contract error lists the offenders.
    pub fn params_for(&self, config: &PolicyConfig) -> Result<PolicyParams> {
        let mut params = PolicyParams::<f32>::zeros(config)?;
        let wanted: BTreeSet<String> = params.names().into_iter().collect();
        let have: BTreeSet<&String> = self.tensors.keys().collect();
        let missing: Vec<&String> = wanted.iter().filter(|n| !have.contains(n)).collect();
        let unknown: Vec<&String> = have
            .iter()
            .copied()
            .filter(|n| !wanted.contains(*n))
            .collect();
        let mut misshaped = Vec::new();
        for (name, slot) in params.named_mut() {
            if let Some(m) = self.tensors.get(&name) {
                if m.shape() == slot.shape() {
                    *slot = m.clone();
                } else {
                    misshaped.push(format!("{name} {:?} != {:?}", m.shape(), slot.shape()));
                }
            }
        }
        if missing.is_empty() && unknown.is_empty() && misshaped.is_empty() {
            return Ok(params);
        }
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("missing {missing:?}"));
        }
        if !unknown.is_empty() {
            parts.push(format!("unknown {unknown:?}"));
        }
        if !misshaped.is_empty() {
            parts.push(format!("wrong shape {misshaped:?}"));
        }
        Err(Error::Contract(format!(
            "checkpoint does not fit the config: {}",
            parts.join("; ")
        )))
    }

    /// Plain parameters under the stored config.
    pub fn params(&self) -> Result<PolicyParams> {
        self.params_for(&self.meta.config)
    }

    /// Rebuilds an adapted policy from a checkpoint written by
    /// [`Checkpoint::from_adapted`].
    pub fn adapted(&self) -> Result<AdaptedPolicy> {
        let mask = self
            .meta
            .mask
            .clone()
            .ok_or_else(|| Error::Contract("checkpoint has no training mask".into()))?;
        let mut plain = self.clone();
        let mut adapters = BTreeMap::new();
        let lora_names: Vec<String> = self
            .tensors
            .keys()
            .filter(|n| n.ends_with(LORA_A) || n.ends_with(LORA_B))
            .cloned()
            .collect();
        for n in &lora_names {
            plain.tensors.remove(n);
        }
        let base = plain.params()?;
        for target in &mask.lora_targets {
            let meta = self.meta.lora.ok_or_else(|| {
                Error::Contract("checkpoint has adapter targets but no adapter settings".into())
            })?;
            let get = |suffix: &str| {
                self.tensors
                    .get(&format!("{target}{suffix}"))
                    .cloned()
                    .ok_or_else(|| {
                        Error::Contract(format!("missing adapter tensor {target}{suffix}"))
                    })
            };
            let (a, b) = (get(LORA_A)?, get(LORA_B)?);
            let (d_out, d_in) = base.require(target)?.shape();
            if a.shape() != (meta.rank, d_in) || b.shape() != (d_out, meta.rank) {
                return Err(Error::Contract(format!(
                    "adapter for {target} has the wrong shape"
                )));
            }
            adapters.insert(
                target.clone(),
                LoraAdapter {
                    target: target.clone(),
                    a,
                    b,
                    rank: meta.rank,
                    alpha: meta.alpha,
                },
            );
        }
        if adapters.len() * 2 != lora_names.len() {
            return Err(Error::Contract(
                "checkpoint holds adapters the mask does not name".into(),
            ));
        }
        Ok(AdaptedPolicy {
            base,
            adapters,
            mask,
        })
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let meta =
        serde_json::to_vec(&ck.meta).map_err(|e| Error::Contract(format!("metadata: {e}")))?;
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    w.bytes(&meta)?;
    w.u32(ck.tensors.len())?;
    let mut offset = 0u64;
    for (name, m) in &ck.tensors {
        w.bytes(name.as_bytes())?;
        w.u32(m.rows())?;
        w.u32(m.cols())?;
        w.u64(offset);
        offset += m.len() as u64;
    }
    for m in ck.tensors.values() {
        w.f32s(m.data());
    }
    Ok(w.finish())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
    let meta: CheckpointMeta = serde_json::from_slice(&r.bytes()?)
        .map_err(|e| shape(format!("checkpoint metadata: {e}")))?;
    let n = r.u32()?;
    let mut manifest = Vec::with_capacity(n.min(1 << 16));
    let mut expect = 0u64;
    for _ in 0..n {
        let name = String::from_utf8(r.bytes()?).map_err(|_| shape("tensor name is not UTF-8"))?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        let offset = r.u64()?;
        if offset != expect {
            return Err(shape(format!(
                "tensor {name} at offset {offset}, expected {expect}"
            )));
        }
        if manifest
            .last()
            .is_some_and(|(prev, _, _): &(String, usize, usize)| *prev >= name)
        {
            return Err(shape("checkpoint manifest is not in sorted order"));
        }
        expect = expect.saturating_add((rows as u64).saturating_mul(cols as u64));
        manifest.push((name, rows, cols));
    }
    let mut tensors = BTreeMap::new();
    for (name, rows, cols) in manifest {
        let data = r.f32s(rows.saturating_mul(cols))?;
        tensors.insert(name, Mat::from_vec(rows, cols, data)?);
    }
    r.done()?;
    Ok(Checkpoint { meta, tensors })
}

pub fn write_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{attach, build_mask, HeadId, MaskVariant};
    use crate::numkit::RngStream;
    use crate::policy::ActionHeadKind;

    fn params() -> PolicyParams {
        PolicyParams::init(&PolicyConfig::tiny(ActionHeadKind::Regression)).unwrap()
    }

    #[test]
    fn plain_round_trip_is_byte_stable() {
        let p = params();
        let ck = Checkpoint::from_params(&p, Some("abc".into()));
        let a = encode_checkpoint(&ck).unwrap();
        let b = encode_checkpoint(&Checkpoint::from_params(&p, Some("abc".into()))).unwrap();
        assert_eq!(a, b);
        let back = decode_checkpoint(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params().unwrap(), p);
    }

    #[test]
    fn adapted_round_trip() {
        let p = params();
        let sel = [HeadId::new(0, 1)].into_iter().collect();
        let mask = build_mask(&p, &sel, MaskVariant::QueriesPlusMlp, true).unwrap();
        let mut ad = attach(p, mask, 2, 2.0, &mut RngStream::new(1, 1)).unwrap();
        for a in ad.adapters.values_mut() {
            a.b.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x = i as f32 * 0.01);
        }
        let ck = Checkpoint::from_adapted(&ad, None).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
        assert_eq!(back.adapted().unwrap(), ad);
        // a consumer without adapter support rejects the unmerged file...
        let err = back.params().unwrap_err().to_string();
        assert!(err.contains("lora.A"), "{err}");
        // ...and reads the merged one
        let merged = Checkpoint::merged(&ad, None);
        let plain = decode_checkpoint(&encode_checkpoint(&merged).unwrap()).unwrap();
        assert_eq!(plain.params().unwrap(), ad.merge());
    }

    #[test]
    fn larger_config_lists_missing_tensors() {
        let p = params();
        let ck = Checkpoint::from_params(&p, None);
        let bigger = PolicyConfig {
            n_layers: p.config.n_layers + 1,
            ..p.config.clone()
        };
        let err = ck.params_for(&bigger).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Contract(_)));
        assert!(
            msg.contains(&format!("layer{}.kv", p.config.n_layers)),
            "{msg}"
        );
    }
}
