//! Losses, the learning-rate schedule, Adam, and training loops that only
//! ever write to the tensors a [`TrainMask`](crate::lora::TrainMask) marks
//! trainable.

mod loss;
mod schedule;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{attach, build_mask, AdaptedPolicy, HeadId, MaskVariant};
use crate::numkit::{Mat, RngStream};
use crate::policy::{ActionHeadKind, PolicyConfig, PolicyParams};
use crate::simenv::DemoSet;

pub use loss::{flow_target, loss_flow_matching, loss_regression, samples_from, Sample};
pub use schedule::{lr_at, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub eval_sr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
    /// Not part of the CSV, which must be reproducible.
    pub wall_clock_secs: f64,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    /// `step,lr,loss,grad_norm,eval_sr` rows; `eval_sr` is empty when no
    /// evaluation ran at that step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,grad_norm,eval_sr\n");
        for r in &self.rows {
            let sr = r.eval_sr.map(|x| x.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{:e},{:e},{:e},{}",
                r.step, r.lr, r.loss, r.grad_norm, sr
            )
            .expect("string write");
        }
        out
    }
}

/// Success-rate probe called every `eval_every` steps with the effective
/// weights.
pub type EvalHook<'a> = &'a (dyn Fn(&PolicyParams) -> Result<f64> + Sync);

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Plain Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Advances the step counter; call once before the updates of a step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, w: &mut Mat, g: &Mat, lr: f64, grad_scale: f64) {
        let st = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                m: vec![0.0; w.len()],
                v: vec![0.0; w.len()],
            });
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (x, &gi)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gi = gi as f64 * grad_scale;
            st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * gi;
            st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * gi * gi;
            let step = lr * (st.m[i] / bc1) / ((st.v[i] / bc2).sqrt() + self.eps);
            *x = (*x as f64 - step) as f32;
        }
    }
}

fn check_policy(policy: &AdaptedPolicy, cfg: &TrainConfig) -> Result<()> {
    let base = &policy.base;
    if base.config.action_head != cfg.loss {
        return Err(Error::Config(format!(
            "loss {:?} does not match the {:?} action head",
            cfg.loss, base.config.action_head
        )));
    }
    let names: BTreeSet<String> = base.names().into_iter().collect();
    let mask = &policy.mask;
    let covered: BTreeSet<String> = mask.adapted().union(&mask.frozen).cloned().collect();
    if covered != names || mask.adapted().iter().any(|n| mask.frozen.contains(n)) {
        return Err(Error::Contract(
            "mask does not partition the policy's tensors".into(),
        ));
    }
    let attached: BTreeSet<String> = policy.adapters.keys().cloned().collect();
    if attached != mask.lora_targets {
        return Err(Error::Contract(
            "adapters do not match the mask's LoRA targets".into(),
        ));
    }
    if mask.lora_targets.iter().any(|n| mask.direct.contains(n)) {
        return Err(Error::Contract(
            "a tensor cannot be both adapted and trained directly".into(),
        ));
    }
    Ok(())
}

/// Gradients of every trainable tensor, keyed by optimizer name: direct
/// tensors by their own name, adapters as `<target>.lora.A` / `.lora.B`.
fn trainable_grads(policy: &AdaptedPolicy, g: &PolicyParams) -> Vec<(String, Mat)> {
    let mut out = Vec::new();
    for name in &policy.mask.direct {
        out.push((name.clone(), g.get(name).expect("mask names exist").clone()));
    }
    for (target, ad) in &policy.adapters {
        let (da, db) = ad.grads(g.get(target).expect("adapter targets exist"));
        out.push((format!("{target}.lora.A"), da));
        out.push((format!("{target}.lora.B"), db));
    }
    out
}

fn tensor_mut<'a>(policy: &'a mut AdaptedPolicy, name: &str) -> &'a mut Mat {
    if let Some(target) = name.strip_suffix(".lora.A") {
        &mut policy.adapters.get_mut(target).expect("adapter").a
    } else if let Some(target) = name.strip_suffix(".lora.B") {
        &mut policy.adapters.get_mut(target).expect("adapter").b
    } else {
        policy.base.get_mut(name).expect("direct tensor")
    }
}

pub fn train(
    policy: AdaptedPolicy,
    data: &[Sample],
    cfg: &TrainConfig,
) -> Result<(AdaptedPolicy, TrainLog)> {
    train_with_eval(policy, data, cfg, None)
}

/// Adam on the trainable tensors of `policy` for `cfg.total_steps` steps.
///
/// Batches are drawn with replacement from `data`. A non-finite loss or
/// gradient aborts with [`Error::TrainingAborted`], carrying the state
/// after the last clean step.
pub fn train_with_eval(
    mut policy: AdaptedPolicy,
    data: &[Sample],
    cfg: &TrainConfig,
    eval: Option<EvalHook<'_>>,
) -> Result<(AdaptedPolicy, TrainLog)> {
    cfg.validate()?;
    check_policy(&policy, cfg)?;
    if cfg.total_steps > 0 && data.is_empty() {
        return Err(Error::Contract("no training samples".into()));
    }
    let started = Instant::now();
    let mut rng = RngStream::new(cfg.seed, 0x7A11);
    let mut adam = Adam::new(cfg);
    let mut log = TrainLog::default();
    for step in 1..=cfg.total_steps {
        let eff = policy.effective();
        let batch: Vec<Sample> = (0..cfg.batch_size)
            .map(|_| data[rng.below(data.len())].clone())
            .collect();
        let result = match cfg.loss {
            ActionHeadKind::Regression => loss_regression(&eff, &batch),
            ActionHeadKind::FlowMatching => loss_flow_matching(&eff, &batch, &mut rng),
        };
        let abort = |policy: AdaptedPolicy, source: Error| Error::TrainingAborted {
            step,
            source: Box::new(source),
            last_good: Box::new(policy),
        };
        let (loss, grads) = match result {
            Ok(x) => x,
            Err(e) if e.is_numeric() => return Err(abort(policy, e)),
            Err(e) => return Err(e),
        };
        let tg = trainable_grads(&policy, &grads);
        let sq: f64 = tg
            .iter()
            .flat_map(|(_, g)| g.data())
            .map(|&x| (x as f64) * (x as f64))
            .sum();
        let grad_norm = sq.sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            let e = Error::NumericFault {
                locus: crate::error::Locus {
                    stage: "loss",
                    layer: None,
                    head: None,
                },
            };
            return Err(abort(policy, e));
        }
        let clip = match cfg.grad_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let lr = lr_at(step, cfg);
        adam.tick();
        for (name, g) in &tg {
            adam.update(name, tensor_mut(&mut policy, name), g, lr, clip);
        }
        let eval_sr = match eval {
            Some(f) if cfg.eval_every > 0 && step % cfg.eval_every == 0 => {
                Some(f(&policy.effective())?)
            }
            _ => None,
        };
        log.rows.push(TrainRow {
            step,
            lr,
            loss,
            grad_norm,
            eval_sr,
        });
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((policy, log))
}

/// Trains a freshly initialised policy on the pooled demos of several tasks
/// and returns the plain weights.
pub fn pretrain_multitask(
    policy_cfg: &PolicyConfig,
    mixture: &[&DemoSet],
    cfg: &TrainConfig,
) -> Result<(PolicyParams, TrainLog)> {
    if mixture.is_empty() {
        return Err(Error::Contract("empty task mixture".into()));
    }
    let params = PolicyParams::init(policy_cfg)?;
    let data = samples_from(mixture);
    let (trained, log) = train(AdaptedPolicy::fully_trainable(params), &data, cfg)?;
    Ok((trained.merge(), log))
}

/// How the selected heads are adapted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSpec {
    pub variant: MaskVariant,
    pub rank: usize,
    pub alpha: f32,
    pub adapt_output_slices: bool,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        FinetuneSpec {
            variant: MaskVariant::QueriesPlusMlp,
            rank: 4,
            alpha: 4.0,
            adapt_output_slices: true,
        }
    }
}

/// Builds the mask, attaches zero-initialised adapters, and trains.
pub fn finetune(
    base: &PolicyParams,
    selected: &BTreeSet<HeadId>,
    spec: &FinetuneSpec,
    data: &[Sample],
    cfg: &TrainConfig,
    eval: Option<EvalHook<'_>>,
) -> Result<(AdaptedPolicy, TrainLog)> {
    let mask = build_mask(base, selected, spec.variant, spec.adapt_output_slices)?;
    let mut rng = RngStream::new(cfg.seed, 0x10AA);
    let adapted = attach(base.clone(), mask, spec.rank, spec.alpha, &mut rng)?;
    train_with_eval(adapted, data, cfg, eval)
}
