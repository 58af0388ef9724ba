use crate::error::{Error, Result};
use crate::numkit::{Mat, Real, RngStream};

use super::config::{ActionHeadKind, PolicyConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Real = f32> {
    pub ln1_g: Mat<T>,
    pub ln1_b: Mat<T>,
    /// Per-head query slices, each `d_head × d_model`.
    pub q: Vec<Mat<T>>,
    /// Shared key and value projections stacked: rows `0..d_head` are keys.
    pub kv: Mat<T>,
    /// Per-head output-projection slices, each `d_model × d_head`.
    pub o: Vec<Mat<T>>,
    pub ln2_g: Mat<T>,
    pub ln2_b: Mat<T>,
    pub mlp_in_w: Mat<T>,
    pub mlp_in_b: Mat<T>,
    pub mlp_out_w: Mat<T>,
    pub mlp_out_b: Mat<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionHeadParams<T: Real = f32> {
    Regression {
        w: Mat<T>,
        b: Mat<T>,
    },
    FlowMatching {
        ctx_w: Mat<T>,
        act_w: Mat<T>,
        time_w: Mat<T>,
        hidden_b: Mat<T>,
        out_w: Mat<T>,
        out_b: Mat<T>,
    },
}

/// Every tensor of the policy. Each has a stable canonical name; see
/// [`PolicyParams::named`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T: Real = f32> {
    pub config: PolicyConfig,
    pub task_emb: Mat<T>,
    pub obs_w: Mat<T>,
    pub obs_b: Mat<T>,
    pub state_w: Mat<T>,
    pub state_b: Mat<T>,
    pub pos: Mat<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_g: Mat<T>,
    pub lnf_b: Mat<T>,
    pub head: ActionHeadParams<T>,
}

macro_rules! collect_tensors {
    ($self:expr, $out:ident, $iter:ident, $($ref_kw:tt)+) => {{
        $out.push(("embed.task".to_string(), $($ref_kw)+ $self.task_emb));
        $out.push(("embed.obs.w".to_string(), $($ref_kw)+ $self.obs_w));
        $out.push(("embed.obs.b".to_string(), $($ref_kw)+ $self.obs_b));
        $out.push(("embed.state.w".to_string(), $($ref_kw)+ $self.state_w));
        $out.push(("embed.state.b".to_string(), $($ref_kw)+ $self.state_b));
        $out.push(("embed.pos".to_string(), $($ref_kw)+ $self.pos));
        for (l, layer) in $self.layers.$iter().enumerate() {
            $out.push((format!("layer{l}.ln1.g"), $($ref_kw)+ layer.ln1_g));
            $out.push((format!("layer{l}.ln1.b"), $($ref_kw)+ layer.ln1_b));
            for (h, q) in layer.q.$iter().enumerate() {
                $out.push((format!("layer{l}.q_head{h}"), q));
            }
            $out.push((format!("layer{l}.kv"), $($ref_kw)+ layer.kv));
            for (h, o) in layer.o.$iter().enumerate() {
                $out.push((format!("layer{l}.o_head{h}"), o));
            }
            $out.push((format!("layer{l}.ln2.g"), $($ref_kw)+ layer.ln2_g));
            $out.push((format!("layer{l}.ln2.b"), $($ref_kw)+ layer.ln2_b));
            $out.push((format!("layer{l}.mlp.in.w"), $($ref_kw)+ layer.mlp_in_w));
            $out.push((format!("layer{l}.mlp.in.b"), $($ref_kw)+ layer.mlp_in_b));
            $out.push((format!("layer{l}.mlp.out.w"), $($ref_kw)+ layer.mlp_out_w));
            $out.push((format!("layer{l}.mlp.out.b"), $($ref_kw)+ layer.mlp_out_b));
        }
        $out.push(("final_ln.g".to_string(), $($ref_kw)+ $self.lnf_g));
        $out.push(("final_ln.b".to_string(), $($ref_kw)+ $self.lnf_b));
        match $($ref_kw)+ $self.head {
            ActionHeadParams::Regression { w, b } => {
                $out.push(("action_head.w".to_string(), w));
                $out.push(("action_head.b".to_string(), b));
            }
            ActionHeadParams::FlowMatching { ctx_w, act_w, time_w, hidden_b, out_w, out_b } => {
                $out.push(("action_head.ctx.w".to_string(), ctx_w));
                $out.push(("action_head.act.w".to_string(), act_w));
                $out.push(("action_head.time.w".to_string(), time_w));
                $out.push(("action_head.hidden.b".to_string(), hidden_b));
                $out.push(("action_head.out.w".to_string(), out_w));
                $out.push(("action_head.out.b".to_string(), out_b));
            }
        }
    }};
}

impl PolicyParams {
    /// Random initialization from `config.seed`.
    pub fn init(config: &PolicyConfig) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = RngStream::new(config.seed, 0x1417);
        let n_layers = config.n_layers as f64;
        for (name, m) in p.named_mut() {
            let fan_in = m.cols() as f64;
            let std = if name.ends_with(".g") {
                m.fill(1.0);
                continue;
            } else if name.ends_with(".b") {
                continue;
            } else if name == "embed.task" {
                0.5
            } else if name == "embed.pos" {
                0.1
            } else if name.contains(".o_head") || name.ends_with("mlp.out.w") {
                1.0 / (fan_in.sqrt() * (2.0 * n_layers).sqrt())
            } else {
                1.0 / fan_in.sqrt()
            };
            *m = Mat::randn(m.rows(), m.cols(), std, &mut rng);
        }
        Ok(p)
    }
}

impl<T: Real> PolicyParams<T> {
    /// All-zero parameters of the right shapes.
    pub fn zeros(config: &PolicyConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (d, dh) = (c.d_model, c.d_head());
        let layer = || LayerParams {
            ln1_g: Mat::zeros(1, d),
            ln1_b: Mat::zeros(1, d),
            q: (0..c.n_heads).map(|_| Mat::zeros(dh, d)).collect(),
            kv: Mat::zeros(2 * dh, d),
            o: (0..c.n_heads).map(|_| Mat::zeros(d, dh)).collect(),
            ln2_g: Mat::zeros(1, d),
            ln2_b: Mat::zeros(1, d),
            mlp_in_w: Mat::zeros(c.mlp_hidden, d),
            mlp_in_b: Mat::zeros(1, c.mlp_hidden),
            mlp_out_w: Mat::zeros(d, c.mlp_hidden),
            mlp_out_b: Mat::zeros(1, d),
        };
        let head = match c.action_head {
            ActionHeadKind::Regression => ActionHeadParams::Regression {
                w: Mat::zeros(c.d_action, d),
                b: Mat::zeros(1, c.d_action),
            },
            ActionHeadKind::FlowMatching => ActionHeadParams::FlowMatching {
                ctx_w: Mat::zeros(c.fm_hidden, d),
                act_w: Mat::zeros(c.fm_hidden, c.d_action),
                time_w: Mat::zeros(c.fm_hidden, c.fm_time_dim),
                hidden_b: Mat::zeros(1, c.fm_hidden),
                out_w: Mat::zeros(c.d_action, c.fm_hidden),
                out_b: Mat::zeros(1, c.d_action),
            },
        };
        Ok(PolicyParams {
            config: config.clone(),
            task_emb: Mat::zeros(c.n_tasks, d),
            obs_w: Mat::zeros(d, c.obs_feat_dim),
            obs_b: Mat::zeros(1, d),
            state_w: Mat::zeros(d, c.state_dim),
            state_b: Mat::zeros(1, d),
            pos: Mat::zeros(c.max_seq_len(), d),
            layers: (0..c.n_layers).map(|_| layer()).collect(),
            lnf_g: Mat::zeros(1, d),
            lnf_b: Mat::zeros(1, d),
            head,
        })
    }

    /// Tensors in canonical (sorted-by-name) order.
    pub fn named(&self) -> Vec<(String, &Mat<T>)> {
        let mut out: Vec<(String, &Mat<T>)> = Vec::new();
        collect_tensors!(self, out, iter, &);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let mut out: Vec<(String, &mut Mat<T>)> = Vec::new();
        collect_tensors!(self, out, iter_mut, &mut);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Mat<T>> {
        self.named()
            .into_iter()
            .find_map(|(n, m)| (n == name).then_some(m))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat<T>> {
        self.named_mut()
            .into_iter()
            .find_map(|(n, m)| (n == name).then_some(m))
    }

    pub fn require(&self, name: &str) -> Result<&Mat<T>> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("no tensor named {name}")))
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, m)| m.is_finite())
    }

    pub fn cast<U: Real>(&self) -> PolicyParams<U> {
        let mut out = PolicyParams::<U>::zeros(&self.config).expect("validated config");
        for ((_, dst), (_, src)) in out.named_mut().into_iter().zip(self.named()) {
            *dst = src.cast();
        }
        out
    }

    /// Zeroed copy with identical shapes, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.named_mut() {
            m.fill(T::zero());
        }
        z
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &PolicyParams<T>, scale: T) {
        for ((_, dst), (_, src)) in self.named_mut().into_iter().zip(other.named()) {
            dst.add_scaled(src, scale).expect("same shapes");
        }
    }
}
