use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Real, RngStream};
use crate::policy::{
    backward_context, backward_into, forward, velocity, velocity_backward, ForwardOptions,
    PolicyParams, TokenSequence,
};
use crate::simenv::DemoSet;

/// One supervised pair: an observation sequence and its target action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub seq: TokenSequence,
    pub action: Vec<f32>,
}

/// Every step of every trajectory, in order.
pub fn samples_from(demos: &[&DemoSet]) -> Vec<Sample> {
    demos
        .iter()
        .flat_map(|d| &d.trajectories)
        .flat_map(|t| &t.steps)
        .map(|s| Sample {
            seq: s.seq.clone(),
            action: s.action.clone(),
        })
        .collect()
}

fn to_real<T: Real>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect()
}

/// Sums per-sample `(loss, grads)` in batch order with f64 accumulators,
/// so the result does not depend on how the samples were scheduled.
fn reduce<T: Real>(
    params: &PolicyParams<T>,
    parts: Vec<(f64, PolicyParams<T>)>,
    n: usize,
) -> (f64, PolicyParams<T>) {
    let mut acc = params.cast::<f64>().zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        acc.add_scaled(&g.cast::<f64>(), 1.0);
    }
    (loss / n as f64, acc.cast::<T>())
}

fn check_batch<T: Real>(params: &PolicyParams<T>, batch: &[Sample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if batch
        .iter()
        .any(|s| s.action.len() != params.config.d_action)
    {
        return Err(Error::Contract(
            "target action width does not match the policy".into(),
        ));
    }
    Ok(())
}

/// Mean squared action error `(1/B) Σ ‖â − a‖²` and its gradient.
pub fn loss_regression<T: Real>(
    params: &PolicyParams<T>,
    batch: &[Sample],
) -> Result<(f64, PolicyParams<T>)> {
    check_batch(params, batch)?;
    let scale = 2.0 / batch.len() as f64;
    let parts = batch
        .par_iter()
        .map(|s| {
            let trace = forward(params, &s.seq, &ForwardOptions::train())?;
            let pred = trace
                .action
                .as_ref()
                .ok_or_else(|| Error::Contract("regression loss needs a regression head".into()))?;
            let target: Vec<T> = to_real(&s.action);
            let diff: Vec<f64> = pred
                .iter()
                .zip(&target)
                .map(|(p, a)| (*p - *a).as_f64())
                .collect();
            let dl: Vec<T> = diff.iter().map(|d| T::from_f64_lossy(scale * d)).collect();
            let mut grads = params.zeros_like();
            backward_into(params, &trace, &dl, &mut grads)?;
            Ok((diff.iter().map(|d| d * d).sum::<f64>(), grads))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(params, parts, batch.len()))
}

/// Point on the straight noise-to-action path at time `t`, and the velocity
/// the head should predict there: `x_t = (1 − t) ε + t a`, target `a − ε`.
pub fn flow_target<T: Real>(action: &[T], eps: &[T], t: f64) -> (Vec<T>, Vec<T>) {
    let tt = T::from_f64_lossy(t);
    let one = T::one();
    let x = action
        .iter()
        .zip(eps)
        .map(|(&a, &e)| (one - tt) * e + tt * a)
        .collect();
    let v = action.iter().zip(eps).map(|(&a, &e)| a - e).collect();
    (x, v)
}

/// Conditional flow-matching loss. Times and noise for the whole batch are
/// drawn from `rng` up front, in sample order.
pub fn loss_flow_matching<T: Real>(
    params: &PolicyParams<T>,
    batch: &[Sample],
    rng: &mut RngStream,
) -> Result<(f64, PolicyParams<T>)> {
    check_batch(params, batch)?;
    let da = params.config.d_action;
    let draws: Vec<(f64, Vec<T>)> = batch
        .iter()
        .map(|_| {
            let t = rng.uniform();
            (
                t,
                (0..da).map(|_| T::from_f64_lossy(rng.normal())).collect(),
            )
        })
        .collect();
    let scale = 2.0 / batch.len() as f64;
    let parts = batch
        .par_iter()
        .zip(&draws)
        .map(|(s, (t, eps))| {
            let trace = forward(params, &s.seq, &ForwardOptions::train())?;
            let (x, target) = flow_target(&to_real::<T>(&s.action), eps, *t);
            let (v, vc) = velocity(params, &trace.context, &x, *t)?;
            let diff: Vec<f64> = v
                .iter()
                .zip(&target)
                .map(|(p, a)| (*p - *a).as_f64())
                .collect();
            let dv: Vec<T> = diff.iter().map(|d| T::from_f64_lossy(scale * d)).collect();
            let mut grads = params.zeros_like();
            let dctx = velocity_backward(params, &trace.context, &vc, &dv, &mut grads)?;
            backward_context(params, &trace, &dctx, &mut grads)?;
            Ok((diff.iter().map(|d| d * d).sum::<f64>(), grads))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(params, parts, batch.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Mat;
    use crate::policy::{random_sequence, ActionHeadKind, ActionHeadParams, PolicyConfig};

    fn batch(cfg: &PolicyConfig, n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = RngStream::new(seed, 3);
        (0..n)
            .map(|_| Sample {
                seq: random_sequence(cfg, 4, &mut rng),
                action: (0..cfg.d_action).map(|_| rng.normal() as f32).collect(),
            })
            .collect()
    }

    #[test]
    fn perfect_predictions_give_zero_loss_and_gradient() {
        let cfg = PolicyConfig::tiny(ActionHeadKind::Regression);
        let p = PolicyParams::init(&cfg).unwrap();
        let mut b = batch(&cfg, 4, 1);
        for s in &mut b {
            s.action = forward(&p, &s.seq, &ForwardOptions::default())
                .unwrap()
                .action
                .unwrap();
        }
        let (loss, g) = loss_regression(&p, &b).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g
            .named()
            .iter()
            .all(|(_, m)| m.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn zero_network_matches_hand_arithmetic() {
        let cfg = PolicyConfig {
            n_layers: 1,
            n_heads: 1,
            ..PolicyConfig::tiny(ActionHeadKind::Regression)
        };
        let mut p = PolicyParams::<f64>::zeros(&cfg).unwrap();
        if let ActionHeadParams::Regression { b, .. } = &mut p.head {
            *b = Mat::from_vec(3, 1, vec![0.5, -1.0, 2.0]).unwrap();
        }
        let mut b = batch(&cfg, 1, 2);
        b[0].action = vec![1.0, 1.0, 1.0];
        let (loss, g) = loss_regression(&p, &b).unwrap();
        // â is the bias: (0.5-1)² + (-1-1)² + (2-1)²
        assert!((loss - (0.25 + 4.0 + 1.0)).abs() < 1e-12);
        let gb = g.get("action_head.b").unwrap();
        assert_eq!(gb.data(), &[-1.0, -4.0, 2.0]);
    }

    #[test]
    fn batch_order_does_not_matter() {
        let cfg = PolicyConfig::tiny(ActionHeadKind::Regression);
        let p = PolicyParams::init(&cfg).unwrap();
        let b = batch(&cfg, 6, 4);
        let mut r = b.clone();
        r.reverse();
        r.swap(1, 4);
        let (la, ga) = loss_regression(&p, &b).unwrap();
        let (lb, gb) = loss_regression(&p, &r).unwrap();
        assert!((la - lb).abs() <= 1e-12 * la.abs());
        for ((_, x), (_, y)) in ga.named().iter().zip(gb.named().iter()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u - v).abs() <= 1e-6 * (1.0 + u.abs()));
            }
        }
    }

    #[test]
    fn flow_target_oracle() {
        let a = [0.3f64, -0.7];
        let e = [1.1, 0.2];
        let (x, v) = flow_target(&a, &e, 0.25);
        assert!((x[0] - (0.75 * 1.1 + 0.25 * 0.3)).abs() < 1e-15);
        assert_eq!(v, vec![0.3 - 1.1, -0.7 - 0.2]);
        // a velocity equal to the target has zero loss
        let loss: f64 = v.iter().zip(&v).map(|(p, q)| (p - q).powi(2)).sum();
        assert_eq!(loss, 0.0);
        let (x0, _) = flow_target(&a, &e, 0.0);
        let (x1, _) = flow_target(&a, &e, 1.0);
        assert_eq!(x0, e.to_vec());
        assert_eq!(x1, a.to_vec());
    }

    #[test]
    fn flow_loss_is_reproducible() {
        let cfg = PolicyConfig::tiny(ActionHeadKind::FlowMatching);
        let p = PolicyParams::init(&cfg).unwrap();
        let b = batch(&cfg, 5, 9);
        let (la, ga) = loss_flow_matching(&p, &b, &mut RngStream::new(1, 2)).unwrap();
        let (lb, gb) = loss_flow_matching(&p, &b, &mut RngStream::new(1, 2)).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(ga, gb);
        assert!(loss_regression(&p, &b).is_err());
    }
}
