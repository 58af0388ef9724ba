#![allow(dead_code)]

use headsteer::numkit::Mat;
use headsteer::policy::{ActionHeadKind, PolicyConfig, PolicyParams};
use headsteer::simenv::{gen_demos, DemoSet, TaskSpec};

/// One layer, four heads, where only head 0 reaches the output: every other
/// head's output-projection slice is zero.
pub fn single_pathway(seed: u64) -> PolicyParams {
    let cfg = PolicyConfig {
        n_layers: 1,
        n_heads: 4,
        seed,
        ..PolicyConfig::tiny(ActionHeadKind::Regression)
    };
    let mut p = PolicyParams::init(&cfg).unwrap();
    for h in 1..4 {
        let o = p.get_mut(&format!("layer0.o_head{h}")).unwrap();
        *o = Mat::zeros(o.rows(), o.cols());
    }
    p
}

pub fn demos(task: &str, n: usize, seed: u64) -> DemoSet {
    gen_demos(&TaskSpec::preset(task).unwrap(), n, 0.1, seed).unwrap()
}

/// Replaces every demo action with the policy's own prediction, so the
/// policy reproduces its demos exactly.
pub fn relabel(params: &PolicyParams, demos: &DemoSet) -> DemoSet {
    let mut out = demos.clone();
    let mut rng = headsteer::numkit::RngStream::new(0, 0);
    for traj in &mut out.trajectories {
        for step in &mut traj.steps {
            step.action = headsteer::policy::predict_action(params, &step.seq, &mut rng).unwrap();
        }
    }
    out
}

use headsteer::numkit::RngStream;
use headsteer::policy::random_sequence;
use headsteer::trainer::{loss_flow_matching, loss_regression, Sample};

pub fn random_batch(cfg: &PolicyConfig, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = RngStream::new(seed, 0xBA7C);
    (0..n)
        .map(|i| Sample {
            seq: random_sequence(cfg, 1 + (i + seed as usize) % cfg.n_obs_tokens, &mut rng),
            action: (0..cfg.d_action)
                .map(|_| rng.uniform_in(-1.0, 1.0) as f32)
                .collect(),
        })
        .collect()
}

pub fn loss64(
    p: &PolicyParams<f64>,
    batch: &[Sample],
    kind: ActionHeadKind,
    seed: u64,
) -> (f64, PolicyParams<f64>) {
    match kind {
        ActionHeadKind::Regression => loss_regression(p, batch).unwrap(),
        ActionHeadKind::FlowMatching => {
            loss_flow_matching(p, batch, &mut RngStream::new(seed, 1)).unwrap()
        }
    }
}

/// Worst per-tensor relative error `‖g − fd‖ / max(‖g‖, ‖fd‖)` between the
/// analytic gradient and central differences, over every tensor of an
/// L=2, H=2, d=16 policy in 64-bit precision.
pub fn gradient_check(kind: ActionHeadKind, seed: u64) -> (f64, String) {
    let cfg = PolicyConfig {
        seed,
        ..PolicyConfig::tiny(kind)
    };
    assert_eq!((cfg.n_layers, cfg.n_heads, cfg.d_model), (2, 2, 16));
    let p = PolicyParams::init(&cfg).unwrap().cast::<f64>();
    let batch = random_batch(&cfg, 3, seed);
    let (_, grads) = loss64(&p, &batch, kind, seed);
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    for name in p.names() {
        let g = grads.get(&name).unwrap();
        let mut fd = vec![0.0; g.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut hi = p.clone();
            hi.get_mut(&name).unwrap().data_mut()[i] += h;
            let mut lo = p.clone();
            lo.get_mut(&name).unwrap().data_mut()[i] -= h;
            *slot =
                (loss64(&hi, &batch, kind, seed).0 - loss64(&lo, &batch, kind, seed).0) / (2.0 * h);
        }
        let diff: f64 = g
            .data()
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = g
            .sq_norm()
            .sqrt()
            .max(fd.iter().map(|x| x * x).sum::<f64>().sqrt());
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        if rel > worst.0 {
            worst = (rel, name);
        }
    }
    worst
}
pub mod instances;
