//! Synthetic caches with a known answer, for checking selectors.

use std::collections::BTreeSet;

use crate::error::Result;
use crate::lora::HeadId;
use crate::numkit::{Mat, RngStream};

use super::cache::{ActivationCache, RowKey};

#[derive(Debug, Clone)]
pub struct PlantedSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_action: usize,
    pub n_traj: usize,
    pub steps: usize,
    /// Heads whose activation is a noisy linear image of the action.
    pub planted: BTreeSet<HeadId>,
    /// Std of the noise added to planted activations.
    pub noise: f64,
}

impl PlantedSpec {
    /// 16 heads (4×4), three of them planted.
    pub fn standard(planted: BTreeSet<HeadId>) -> Self {
        PlantedSpec {
            n_layers: 4,
            n_heads: 4,
            d_head: 8,
            d_action: 3,
            n_traj: 20,
            steps: 10,
            planted,
            noise: 0.1,
        }
    }
}

/// Builds the cache. Planted heads carry `W_h a + noise` with a fixed random
/// `W_h` per head; every other head is isotropic unit Gaussian noise.
/// Actions are uniform in `[-1, 1]`.
pub fn planted_cache(spec: &PlantedSpec, seed: u64) -> Result<ActivationCache> {
    let mut rng = RngStream::new(seed, 0x9_1A47);
    let keys: Vec<RowKey> = (0..spec.n_traj)
        .flat_map(|traj| (0..spec.steps).map(move |t| RowKey { traj, t }))
        .collect();
    let actions: Vec<f32> = (0..keys.len() * spec.d_action)
        .map(|_| rng.uniform_in(-1.0, 1.0) as f32)
        .collect();
    let embeds: Vec<Mat> = (0..spec.n_layers * spec.n_heads)
        .map(|_| Mat::randn(spec.d_head, spec.d_action, 1.0, &mut rng))
        .collect();
    let da = spec.d_action;
    ActivationCache::from_fn(
        spec.n_layers,
        spec.n_heads,
        spec.d_head,
        da,
        keys,
        actions.clone(),
        |head, r| {
            let j = head.flat(spec.n_heads);
            if spec.planted.contains(&head) {
                let a = &actions[r * da..(r + 1) * da];
                (0..spec.d_head)
                    .map(|i| {
                        let w = embeds[j].row(i);
                        let clean: f32 = w.iter().zip(a).map(|(x, y)| x * y).sum();
                        clean + (spec.noise * rng.normal()) as f32
                    })
                    .collect()
            } else {
                (0..spec.d_head).map(|_| rng.normal() as f32).collect()
            }
        },
    )
}
