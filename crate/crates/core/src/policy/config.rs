use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionHeadKind {
    /// Linear readout of the final-token context.
    Regression,
    /// Conditional velocity field integrated from Gaussian noise.
    FlowMatching,
}

/// Shape of the policy network.
///
/// The token sequence is `[task, obs_0 .. obs_{n-1}, state]`; absent object
/// slots are dropped from the sequence rather than masked, and positional
/// embeddings are indexed by slot so a dropped slot never shifts its neighbours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_action: usize,
    pub n_obs_tokens: usize,
    pub obs_feat_dim: usize,
    pub state_dim: usize,
    pub n_tasks: usize,
    pub mlp_hidden: usize,
    pub action_head: ActionHeadKind,
    /// Disable to make the network equivariant to obs-token order.
    pub positional: bool,
    /// Hidden width of the flow-matching velocity MLP.
    pub fm_hidden: usize,
    /// Number of sinusoidal features of the flow time.
    pub fm_time_dim: usize,
    /// Euler steps used at inference by the flow-matching head.
    pub fm_steps: usize,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_action: 3,
            n_obs_tokens: crate::simenv::N_OBS_SLOTS,
            obs_feat_dim: crate::simenv::OBS_FEAT_DIM,
            state_dim: crate::simenv::STATE_DIM,
            n_tasks: crate::simenv::N_TASK_TOKENS,
            mlp_hidden: 128,
            action_head: ActionHeadKind::Regression,
            positional: true,
            fm_hidden: 64,
            fm_time_dim: 8,
            fm_steps: 10,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    /// Small config used by gradient checks.
    pub fn tiny(action_head: ActionHeadKind) -> Self {
        PolicyConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            mlp_hidden: 24,
            fm_hidden: 12,
            fm_time_dim: 4,
            action_head,
            ..Default::default()
        }
    }

    #[inline]
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Maximum sequence length: task token, every obs slot, and the state token.
    #[inline]
    pub fn max_seq_len(&self) -> usize {
        self.n_obs_tokens + 2
    }

    #[inline]
    pub fn n_heads_total(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible into {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.d_action == 0 || self.state_dim == 0 || self.obs_feat_dim == 0 {
            return fail("action, state and obs feature widths must be nonzero".into());
        }
        if self.n_tasks == 0 || self.mlp_hidden == 0 {
            return fail("n_tasks and mlp_hidden must be nonzero".into());
        }
        if self.action_head == ActionHeadKind::FlowMatching
            && (self.fm_hidden == 0 || self.fm_time_dim == 0 || self.fm_steps == 0)
        {
            return fail("flow-matching head needs nonzero hidden, time and step counts".into());
        }
        Ok(())
    }
}
