//! Forward pass with per-head taps, exact reverse-mode gradients, and action
//! prediction for both head variants.
//!
//! Each layer is pre-norm multi-query attention followed by a GELU MLP:
//!
//! ```text
//! u   = LN1(x)
//! q_h = Wq_h u          (per head)      k, v = Wkv u   (shared)
//! o_h = softmax(q_h kᵀ / √d_h) v        <- tapped at the state token
//! x   = x + Σ_h Wo_h o_h
//! x   = x + W_out gelu(W_in LN2(x) + b_in) + b_out
//! ```
//!
//! Attention is bidirectional over the whole sequence. The last layer only
//! computes the state-token row (plus the tapped row, if different), since
//! nothing else reaches the action head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Locus, Result};
use crate::lora::HeadId;
use crate::numkit::{Real, RngStream};

use super::config::{ActionHeadKind, PolicyConfig};
use super::kernels::{
    axpy, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward,
    softmax_in_place,
};
use super::params::{ActionHeadParams, PolicyParams};

/// One object-level observation token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsToken {
    /// Fixed slot index; selects the positional embedding.
    pub slot: usize,
    pub features: Vec<f32>,
}

/// Model input for one timestep. The extraction position is always the final
/// (state) token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub task: usize,
    pub obs: Vec<ObsToken>,
    pub state: Vec<f32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.obs.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn validate(&self, cfg: &PolicyConfig) -> Result<()> {
        if self.task >= cfg.n_tasks {
            return Err(Error::Contract(format!(
                "task token {} out of range for {} tasks",
                self.task, cfg.n_tasks
            )));
        }
        if self.state.len() != cfg.state_dim {
            return Err(Error::Contract(format!(
                "state has {} values, expected {}",
                self.state.len(),
                cfg.state_dim
            )));
        }
        if self.obs.len() > cfg.n_obs_tokens {
            return Err(Error::Contract(format!(
                "{} obs tokens exceed the {} slots",
                self.obs.len(),
                cfg.n_obs_tokens
            )));
        }
        for tok in &self.obs {
            if tok.slot >= cfg.n_obs_tokens || tok.features.len() != cfg.obs_feat_dim {
                return Err(Error::Contract(format!(
                    "obs token in slot {} with {} features does not fit the config",
                    tok.slot,
                    tok.features.len()
                )));
            }
        }
        Ok(())
    }
}

/// Additive Gaussian noise on selected heads' outputs, applied before the
/// output projection at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadNoise {
    /// Per-head noise standard deviation.
    pub sigma: BTreeMap<HeadId, f64>,
    pub seed: u64,
    pub stream: u64,
}

/// Token whose head activations are tapped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapToken {
    /// The final (robot state) token.
    #[default]
    State,
    /// The last observation token, just before the state token.
    LastObs,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<'a> {
    /// Record every head's activation at `tap_token`.
    pub tap: bool,
    pub tap_token: TapToken,
    /// Keep the intermediates needed by [`backward`].
    pub keep_cache: bool,
    pub noise: Option<&'a HeadNoise>,
}

impl ForwardOptions<'_> {
    pub fn tap() -> Self {
        ForwardOptions {
            tap: true,
            ..Default::default()
        }
    }

    pub fn train() -> Self {
        ForwardOptions {
            keep_cache: true,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    q_start: usize,
    ln1_xhat: Vec<T>,
    ln1_inv: Vec<T>,
    u: Vec<T>,
    q: Vec<Vec<T>>,
    kv: Vec<T>,
    probs: Vec<Vec<T>>,
    heads_out: Vec<Vec<T>>,
    ln2_xhat: Vec<T>,
    ln2_inv: Vec<T>,
    u2: Vec<T>,
    z: Vec<T>,
    act: Vec<T>,
}

#[derive(Debug, Clone)]
struct TraceCache<T> {
    seq: TokenSequence,
    layers: Vec<LayerCache<T>>,
    lnf_xhat: Vec<T>,
    lnf_inv: Vec<T>,
}

/// Output of [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace<T = f32> {
    /// State-token activation of head `(l, h)` at index `l * H + h`; empty
    /// unless tapping was requested.
    pub taps: Vec<Vec<T>>,
    /// Final-token features after the last layer norm.
    pub context: Vec<T>,
    /// Predicted action for the regression head.
    pub action: Option<Vec<T>>,
    config: PolicyConfig,
    cache: Option<TraceCache<T>>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn tap(&self, head: HeadId) -> &[T] {
        &self.taps[head.layer * self.config.n_heads + head.head]
    }
}

fn check_finite<T: Real>(v: &[T], stage: &'static str, layer: Option<usize>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFault {
            locus: Locus {
                stage,
                layer,
                head: None,
            },
        })
    }
}

fn embed<T: Real>(params: &PolicyParams<T>, seq: &TokenSequence) -> Vec<T> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let n = seq.len();
    let mut x = vec![T::zero(); n * d];
    x[..d].copy_from_slice(params.task_emb.row(seq.task));
    for (j, tok) in seq.obs.iter().enumerate() {
        let f: Vec<T> = tok
            .features
            .iter()
            .map(|&v| T::from_f64_lossy(v as f64))
            .collect();
        let e = linear(&f, 1, &params.obs_w, Some(&params.obs_b));
        x[(j + 1) * d..(j + 2) * d].copy_from_slice(&e);
    }
    let s: Vec<T> = seq
        .state
        .iter()
        .map(|&v| T::from_f64_lossy(v as f64))
        .collect();
    let e = linear(&s, 1, &params.state_w, Some(&params.state_b));
    x[(n - 1) * d..].copy_from_slice(&e);
    if cfg.positional {
        for (row, slot) in position_slots(seq, cfg).into_iter().enumerate() {
            axpy(
                &mut x[row * d..(row + 1) * d],
                T::one(),
                params.pos.row(slot),
            );
        }
    }
    x
}

fn position_slots(seq: &TokenSequence, cfg: &PolicyConfig) -> Vec<usize> {
    let mut slots = Vec::with_capacity(seq.len());
    slots.push(0);
    slots.extend(seq.obs.iter().map(|t| t.slot + 1));
    slots.push(cfg.max_seq_len() - 1);
    slots
}

/// Runs the network on one token sequence.
pub fn forward<T: Real>(
    params: &PolicyParams<T>,
    seq: &TokenSequence,
    opts: &ForwardOptions<'_>,
) -> Result<ForwardTrace<T>> {
    let cfg = &params.config;
    seq.validate(cfg)?;
    let (d, nh, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head());
    let n = seq.len();
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());

    if opts.keep_cache && opts.tap_token != TapToken::State {
        return Err(Error::Contract(
            "gradients are only kept for state-token taps".into(),
        ));
    }
    let tap_row = match opts.tap_token {
        TapToken::State => n - 1,
        TapToken::LastObs => n - 2,
    };
    let mut noise_rng = opts.noise.map(|hn| RngStream::new(hn.seed, hn.stream));
    if let Some(hn) = opts.noise {
        for h in hn.sigma.keys() {
            if h.layer >= cfg.n_layers || h.head >= nh {
                return Err(Error::Contract(format!(
                    "noise spec names invalid head {h}"
                )));
            }
        }
    }

    let mut x = embed(params, seq);
    check_finite(&x, "embedding", None)?;
    let mut taps = Vec::new();
    let mut layer_caches = Vec::new();

    for (l, lp) in params.layers.iter().enumerate() {
        let q_start = if l + 1 == cfg.n_layers {
            tap_row.min(n - 1)
        } else {
            0
        };
        let nq = n - q_start;
        let (u, ln1_xhat, ln1_inv) = layer_norm(&x, n, &lp.ln1_g, &lp.ln1_b);
        let kv = linear(&u, n, &lp.kv, None);
        let u_q = &u[q_start * d..];

        let mut attn = vec![T::zero(); nq * d];
        let mut qs = Vec::with_capacity(nh);
        let mut probs_all = Vec::with_capacity(nh);
        let mut outs = Vec::with_capacity(nh);
        for h in 0..nh {
            let q = linear(u_q, nq, &lp.q[h], None);
            let mut probs = vec![T::zero(); nq * n];
            let mut out = vec![T::zero(); nq * dh];
            for i in 0..nq {
                let qi = &q[i * dh..(i + 1) * dh];
                let row = &mut probs[i * n..(i + 1) * n];
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = dot(qi, &kv[j * 2 * dh..j * 2 * dh + dh]) * scale;
                }
                softmax_in_place(row);
                let oi = &mut out[i * dh..(i + 1) * dh];
                for (j, &p) in row.iter().enumerate() {
                    axpy(oi, p, &kv[j * 2 * dh + dh..(j + 1) * 2 * dh]);
                }
            }
            if let (Some(hn), Some(rng)) = (opts.noise, noise_rng.as_mut()) {
                if let Some(&sigma) = hn.sigma.get(&HeadId::new(l, h)) {
                    for v in out.iter_mut() {
                        let z = rng.normal();
                        if sigma != 0.0 {
                            *v = *v + T::from_f64_lossy(sigma * z);
                        }
                    }
                }
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericFault {
                    locus: Locus {
                        stage: "attention",
                        layer: Some(l),
                        head: Some(h),
                    },
                });
            }
            if opts.tap {
                let r = tap_row - q_start;
                taps.push(out[r * dh..(r + 1) * dh].to_vec());
            }
            let proj = linear(&out, nq, &lp.o[h], None);
            axpy(&mut attn, T::one(), &proj);
            if opts.keep_cache {
                qs.push(q);
                probs_all.push(probs);
            }
            outs.push(out);
        }

        let mut x_mid = x[q_start * d..].to_vec();
        axpy(&mut x_mid, T::one(), &attn);
        let (u2, ln2_xhat, ln2_inv) = layer_norm(&x_mid, nq, &lp.ln2_g, &lp.ln2_b);
        let z = linear(&u2, nq, &lp.mlp_in_w, Some(&lp.mlp_in_b));
        let act: Vec<T> = z.iter().map(|&v| gelu(v)).collect();
        let m = linear(&act, nq, &lp.mlp_out_w, Some(&lp.mlp_out_b));
        let mut x_out = x_mid;
        axpy(&mut x_out, T::one(), &m);
        check_finite(&x_out, "mlp", Some(l))?;

        if opts.keep_cache {
            layer_caches.push(LayerCache {
                q_start,
                ln1_xhat,
                ln1_inv,
                u,
                q: qs,
                kv,
                probs: probs_all,
                heads_out: outs,
                ln2_xhat,
                ln2_inv,
                u2,
                z,
                act,
            });
        }
        x = x_out;
    }

    // only the final rows survive the last layer; the state token is last
    let x = x.split_off(x.len() - d);
    let (context, lnf_xhat, lnf_inv) = layer_norm(&x, 1, &params.lnf_g, &params.lnf_b);
    let action = match &params.head {
        ActionHeadParams::Regression { w, b } => {
            let a = linear(&context, 1, w, Some(b));
            check_finite(&a, "action_head", None)?;
            Some(a)
        }
        ActionHeadParams::FlowMatching { .. } => None,
    };
    let cache = opts.keep_cache.then(|| TraceCache {
        seq: seq.clone(),
        layers: layer_caches,
        lnf_xhat,
        lnf_inv,
    });
    Ok(ForwardTrace {
        taps,
        context,
        action,
        config: cfg.clone(),
        cache,
    })
}

/// Sinusoidal features of the flow time `t ∈ [0, 1]`.
pub fn time_features<T: Real>(t: f64, dim: usize) -> Vec<T> {
    (0..dim)
        .map(|i| {
            let freq = std::f64::consts::PI * (1u64 << (i / 2)) as f64;
            let v = if i % 2 == 0 {
                (freq * t).sin()
            } else {
                (freq * t).cos()
            };
            T::from_f64_lossy(v)
        })
        .collect()
}

/// Intermediates of one velocity evaluation.
#[derive(Debug, Clone)]
pub struct VelocityCache<T> {
    pre: Vec<T>,
    hidden: Vec<T>,
    x: Vec<T>,
    phi: Vec<T>,
}

/// Evaluates the flow-matching velocity field `v(x, t | context)`.
pub fn velocity<T: Real>(
    params: &PolicyParams<T>,
    context: &[T],
    x: &[T],
    t: f64,
) -> Result<(Vec<T>, VelocityCache<T>)> {
    let ActionHeadParams::FlowMatching {
        ctx_w,
        act_w,
        time_w,
        hidden_b,
        out_w,
        out_b,
    } = &params.head
    else {
        return Err(Error::Contract(
            "velocity requires a flow-matching action head".into(),
        ));
    };
    let phi = time_features::<T>(t, params.config.fm_time_dim);
    let mut pre = linear(context, 1, ctx_w, Some(hidden_b));
    axpy(&mut pre, T::one(), &linear(x, 1, act_w, None));
    axpy(&mut pre, T::one(), &linear(&phi, 1, time_w, None));
    let hidden: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
    let v = linear(&hidden, 1, out_w, Some(out_b));
    check_finite(&v, "velocity", None)?;
    Ok((
        v,
        VelocityCache {
            pre,
            hidden,
            x: x.to_vec(),
            phi,
        },
    ))
}

/// Backpropagates `dv` through [`velocity`] into `grads`; returns `d context`.
pub fn velocity_backward<T: Real>(
    params: &PolicyParams<T>,
    context: &[T],
    cache: &VelocityCache<T>,
    dv: &[T],
    grads: &mut PolicyParams<T>,
) -> Result<Vec<T>> {
    let (
        ActionHeadParams::FlowMatching {
            ctx_w,
            act_w,
            time_w,
            out_w,
            ..
        },
        ActionHeadParams::FlowMatching {
            ctx_w: g_ctx,
            act_w: g_act,
            time_w: g_time,
            hidden_b: g_hb,
            out_w: g_out,
            out_b: g_ob,
        },
    ) = (&params.head, &mut grads.head)
    else {
        return Err(Error::Contract(
            "velocity_backward requires a flow-matching action head".into(),
        ));
    };
    let dh = linear_backward(&cache.hidden, 1, out_w, dv, g_out, Some(g_ob), true)
        .expect("requested dx");
    let dpre: Vec<T> = dh
        .iter()
        .zip(&cache.pre)
        .map(|(&g, &p)| g * gelu_grad(p))
        .collect();
    linear_backward(&cache.x, 1, act_w, &dpre, g_act, None, false);
    linear_backward(&cache.phi, 1, time_w, &dpre, g_time, None, false);
    Ok(linear_backward(context, 1, ctx_w, &dpre, g_ctx, Some(g_hb), true).expect("requested dx"))
}

/// Fixed-step Euler integration of `dx/dt = v(x, t)` from `t = 0` to `t = 1`.
pub fn euler_integrate<T: Real>(
    x0: Vec<T>,
    steps: usize,
    mut v: impl FnMut(&[T], f64) -> Result<Vec<T>>,
) -> Result<Vec<T>> {
    let dt = 1.0 / steps as f64;
    let mut x = x0;
    for s in 0..steps {
        let t = s as f64 * dt;
        let vel = v(&x, t)?;
        axpy(&mut x, T::from_f64_lossy(dt), &vel);
    }
    Ok(x)
}

/// Inference: regression returns the head output; flow matching integrates
/// the velocity field from Gaussian noise drawn from `rng`.
pub fn predict_action<T: Real>(
    params: &PolicyParams<T>,
    seq: &TokenSequence,
    rng: &mut RngStream,
) -> Result<Vec<T>> {
    predict_action_with(params, seq, &ForwardOptions::default(), rng)
}

/// [`predict_action`] with explicit forward options (head noise, taps).
pub fn predict_action_with<T: Real>(
    params: &PolicyParams<T>,
    seq: &TokenSequence,
    opts: &ForwardOptions<'_>,
    rng: &mut RngStream,
) -> Result<Vec<T>> {
    let trace = forward(params, seq, opts)?;
    match params.config.action_head {
        ActionHeadKind::Regression => Ok(trace.action.expect("regression head output")),
        ActionHeadKind::FlowMatching => {
            let x0: Vec<T> = (0..params.config.d_action)
                .map(|_| T::from_f64_lossy(rng.normal()))
                .collect();
            euler_integrate(x0, params.config.fm_steps, |x, t| {
                Ok(velocity(params, &trace.context, x, t)?.0)
            })
        }
    }
}

/// Gradients of a scalar loss given `dL/dâ` for the regression head.
pub fn backward<T: Real>(
    params: &PolicyParams<T>,
    trace: &ForwardTrace<T>,
    loss_grad: &[T],
) -> Result<PolicyParams<T>> {
    let mut grads = params.zeros_like();
    backward_into(params, trace, loss_grad, &mut grads)?;
    Ok(grads)
}

/// As [`backward`], accumulating into an existing gradient set.
pub fn backward_into<T: Real>(
    params: &PolicyParams<T>,
    trace: &ForwardTrace<T>,
    loss_grad: &[T],
    grads: &mut PolicyParams<T>,
) -> Result<()> {
    let (ActionHeadParams::Regression { w, .. }, ActionHeadParams::Regression { w: gw, b: gb }) =
        (&params.head, &mut grads.head)
    else {
        return Err(Error::Contract(
            "backward from an action gradient requires the regression head".into(),
        ));
    };
    if loss_grad.len() != params.config.d_action {
        return Err(Error::Contract(format!(
            "loss gradient has {} entries, expected {}",
            loss_grad.len(),
            params.config.d_action
        )));
    }
    let dctx =
        linear_backward(&trace.context, 1, w, loss_grad, gw, Some(gb), true).expect("requested dx");
    backward_context(params, trace, &dctx, grads)
}

/// Backpropagates a gradient on the final-token context through the trunk.
pub fn backward_context<T: Real>(
    params: &PolicyParams<T>,
    trace: &ForwardTrace<T>,
    dctx: &[T],
    grads: &mut PolicyParams<T>,
) -> Result<()> {
    let cfg = &params.config;
    if trace.config != *cfg || grads.config != *cfg {
        return Err(Error::Contract(
            "trace, params and gradient configs differ".into(),
        ));
    }
    let cache = trace
        .cache
        .as_ref()
        .ok_or_else(|| Error::Contract("trace was produced without keep_cache".into()))?;
    let (d, nh, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head());
    let n = cache.seq.len();
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());

    let mut dy = layer_norm_backward(
        dctx,
        &cache.lnf_xhat,
        &cache.lnf_inv,
        1,
        &params.lnf_g,
        &mut grads.lnf_g,
        &mut grads.lnf_b,
    );

    for l in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[l];
        let lp = &params.layers[l];
        let lg = &mut grads.layers[l];
        let nq = n - lc.q_start;

        // MLP
        let dact = linear_backward(
            &lc.act,
            nq,
            &lp.mlp_out_w,
            &dy,
            &mut lg.mlp_out_w,
            Some(&mut lg.mlp_out_b),
            true,
        )
        .expect("requested dx");
        let dz: Vec<T> = dact
            .iter()
            .zip(&lc.z)
            .map(|(&g, &z)| g * gelu_grad(z))
            .collect();
        let du2 = linear_backward(
            &lc.u2,
            nq,
            &lp.mlp_in_w,
            &dz,
            &mut lg.mlp_in_w,
            Some(&mut lg.mlp_in_b),
            true,
        )
        .expect("requested dx");
        let mut dx_mid = layer_norm_backward(
            &du2,
            &lc.ln2_xhat,
            &lc.ln2_inv,
            nq,
            &lp.ln2_g,
            &mut lg.ln2_g,
            &mut lg.ln2_b,
        );
        axpy(&mut dx_mid, T::one(), &dy);

        // attention
        let u_q = &lc.u[lc.q_start * d..];
        let mut du = vec![T::zero(); n * d];
        let mut dkv = vec![T::zero(); n * 2 * dh];
        for h in 0..nh {
            let d_out = linear_backward(
                &lc.heads_out[h],
                nq,
                &lp.o[h],
                &dx_mid,
                &mut lg.o[h],
                None,
                true,
            )
            .expect("requested dx");
            let probs = &lc.probs[h];
            let q = &lc.q[h];
            let mut dq = vec![T::zero(); nq * dh];
            let mut dp = vec![T::zero(); n];
            for i in 0..nq {
                let doi = &d_out[i * dh..(i + 1) * dh];
                let pi = &probs[i * n..(i + 1) * n];
                let mut weighted = T::zero();
                for j in 0..n {
                    let vj = &lc.kv[j * 2 * dh + dh..(j + 1) * 2 * dh];
                    dp[j] = dot(doi, vj);
                    weighted = weighted + pi[j] * dp[j];
                    axpy(&mut dkv[j * 2 * dh + dh..(j + 1) * 2 * dh], pi[j], doi);
                }
                let qi = &q[i * dh..(i + 1) * dh];
                for j in 0..n {
                    let ds = pi[j] * (dp[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    axpy(
                        &mut dq[i * dh..(i + 1) * dh],
                        ds,
                        &lc.kv[j * 2 * dh..j * 2 * dh + dh],
                    );
                    axpy(&mut dkv[j * 2 * dh..j * 2 * dh + dh], ds, qi);
                }
            }
            let du_q = linear_backward(u_q, nq, &lp.q[h], &dq, &mut lg.q[h], None, true)
                .expect("requested dx");
            axpy(&mut du[lc.q_start * d..], T::one(), &du_q);
        }
        let du_kv =
            linear_backward(&lc.u, n, &lp.kv, &dkv, &mut lg.kv, None, true).expect("requested dx");
        axpy(&mut du, T::one(), &du_kv);
        let mut dx_in = layer_norm_backward(
            &du,
            &lc.ln1_xhat,
            &lc.ln1_inv,
            n,
            &lp.ln1_g,
            &mut lg.ln1_g,
            &mut lg.ln1_b,
        );
        axpy(&mut dx_in[lc.q_start * d..], T::one(), &dx_mid);
        dy = dx_in;
    }

    // embeddings
    let seq = &cache.seq;
    axpy(grads.task_emb.row_mut(seq.task), T::one(), &dy[..d]);
    for (j, tok) in seq.obs.iter().enumerate() {
        let f: Vec<T> = tok
            .features
            .iter()
            .map(|&v| T::from_f64_lossy(v as f64))
            .collect();
        linear_backward(
            &f,
            1,
            &params.obs_w,
            &dy[(j + 1) * d..(j + 2) * d],
            &mut grads.obs_w,
            Some(&mut grads.obs_b),
            false,
        );
    }
    let s: Vec<T> = seq
        .state
        .iter()
        .map(|&v| T::from_f64_lossy(v as f64))
        .collect();
    linear_backward(
        &s,
        1,
        &params.state_w,
        &dy[(n - 1) * d..],
        &mut grads.state_w,
        Some(&mut grads.state_b),
        false,
    );
    if cfg.positional {
        for (row, slot) in position_slots(seq, cfg).into_iter().enumerate() {
            axpy(
                grads.pos.row_mut(slot),
                T::one(),
                &dy[row * d..(row + 1) * d],
            );
        }
    }
    Ok(())
}

/// A sequence with Gaussian features, for tests and probes.
pub fn random_sequence(cfg: &PolicyConfig, n_obs: usize, rng: &mut RngStream) -> TokenSequence {
    TokenSequence {
        task: rng.below(cfg.n_tasks),
        obs: (0..n_obs.min(cfg.n_obs_tokens))
            .map(|slot| ObsToken {
                slot,
                features: (0..cfg.obs_feat_dim).map(|_| rng.normal() as f32).collect(),
            })
            .collect(),
        state: (0..cfg.state_dim).map(|_| rng.normal() as f32).collect(),
    }
}
