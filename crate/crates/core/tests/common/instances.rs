//! Randomised instances of every persisted type, and the round-trip checks
//! shared by the store property tests and the acceptance run.

use std::collections::BTreeSet;
use std::fmt::Debug;

use headsteer::error::{Error, FormatErrorKind};
use headsteer::lora::{attach, build_mask, HeadId, MaskVariant};
use headsteer::numkit::{Mat, RngStream};
use headsteer::policy::{ActionHeadKind, PolicyConfig, PolicyParams};
use headsteer::selector::{ActivationCache, RowKey};
use headsteer::simenv::{gen_demos, DemoSet, TaskSpec};
use headsteer::store::Checkpoint;

/// Trajectories of uneven length with arbitrary ids, arbitrary f32 values.
pub fn random_cache(seed: u64) -> ActivationCache {
    let mut rng = RngStream::new(seed, 0xCAC4E);
    let n_traj = 2 + rng.below(4);
    let (l, h) = (1 + rng.below(3), 1 + rng.below(3));
    let dh = 1 + rng.below(5);
    let da = 1 + rng.below(3);
    let mut keys = Vec::new();
    let mut id = rng.below(3);
    for _ in 0..n_traj {
        let mut t = rng.below(2);
        for _ in 0..1 + rng.below(5) {
            keys.push(RowKey { traj: id, t });
            t += 1 + rng.below(3);
        }
        id += 1 + rng.below(2);
    }
    let actions = (0..keys.len() * da).map(|_| rng.normal() as f32).collect();
    let mut vals = RngStream::new(seed, 0xCAC4F);
    ActivationCache::from_fn(l, h, dh, da, keys, actions, |_, _| {
        (0..dh).map(|_| (vals.normal() * 3.0) as f32).collect()
    })
    .unwrap()
}

fn random_config(rng: &mut RngStream) -> PolicyConfig {
    let n_heads = 1 + rng.below(3);
    PolicyConfig {
        n_layers: 1 + rng.below(3),
        n_heads,
        d_model: n_heads * (2 + rng.below(4)),
        mlp_hidden: 2 + rng.below(8),
        action_head: if rng.below(2) == 0 {
            ActionHeadKind::Regression
        } else {
            ActionHeadKind::FlowMatching
        },
        fm_hidden: 2 + rng.below(6),
        seed: rng.next_u64() >> 1,
        ..PolicyConfig::default()
    }
}

/// A plain checkpoint, or one carrying unmerged adapters with non-zero B.
pub fn random_checkpoint(seed: u64, adapted: bool) -> Checkpoint {
    let mut rng = RngStream::new(seed, 0xC4EC);
    let cfg = random_config(&mut rng);
    let params = PolicyParams::init(&cfg).unwrap();
    let parent = (rng.below(2) == 0).then(|| format!("{:016x}", rng.next_u64()));
    if !adapted {
        return Checkpoint::from_params(&params, parent);
    }
    let heads = HeadId::all(&cfg);
    let picked: BTreeSet<HeadId> = heads
        .iter()
        .copied()
        .filter(|_| rng.below(2) == 0)
        .collect();
    let picked = if picked.is_empty() {
        [heads[0]].into()
    } else {
        picked
    };
    let mask = build_mask(
        &params,
        &picked,
        MaskVariant::QueriesPlusMlp,
        rng.below(2) == 0,
    )
    .unwrap();
    let rank = 1 + rng.below(2);
    let mut ad = attach(params, mask, rank, 1.0 + rng.below(4) as f32, &mut rng).unwrap();
    for a in ad.adapters.values_mut() {
        a.b = Mat::randn(a.b.rows(), a.b.cols(), 0.1, &mut rng);
    }
    Checkpoint::from_adapted(&ad, parent).unwrap()
}

pub fn random_demos(seed: u64) -> DemoSet {
    let mut rng = RngStream::new(seed, 0xDE30);
    let task = TaskSpec::preset(TaskSpec::PRESETS[rng.below(TaskSpec::PRESETS.len())]).unwrap();
    gen_demos(&task, 2 + rng.below(3), rng.uniform_in(0.0, 0.3), seed).unwrap()
}

/// decode(encode(x)) == x and the re-encoding is byte-identical.
pub fn round_trips<T: PartialEq + Debug>(
    x: &T,
    enc: impl Fn(&T) -> headsteer::Result<Vec<u8>>,
    dec: impl Fn(&[u8]) -> headsteer::Result<T>,
) -> Result<Vec<u8>, String> {
    let bytes = enc(x).map_err(|e| e.to_string())?;
    let back = dec(&bytes).map_err(|e| e.to_string())?;
    if &back != x {
        return Err("decoded value differs".into());
    }
    let again = enc(&back).map_err(|e| e.to_string())?;
    if again != bytes {
        return Err("re-encoding is not byte-identical".into());
    }
    Ok(bytes)
}

/// Flips one bit somewhere after the magic and length fields and expects a
/// checksum rejection.
pub fn corruption_rejected<T: Debug>(
    bytes: &[u8],
    at: u64,
    bit: u8,
    dec: impl Fn(&[u8]) -> headsteer::Result<T>,
) -> Result<(), String> {
    let header = 5 + 8;
    let span = (bytes.len() - header) as u64;
    let i = header + (at % span) as usize;
    let mut bad = bytes.to_vec();
    bad[i] ^= 1 << (bit % 8);
    match dec(&bad) {
        Err(Error::Format {
            kind: FormatErrorKind::Checksum,
            ..
        }) => Ok(()),
        other => Err(format!(
            "byte {i} flipped: expected a checksum error, got {other:?}"
        )),
    }
}
