//! Desk-scale transformer action policy.
//!
//! Multi-query attention (one shared key/value head per layer), per-head
//! activation taps at the state token, a regression or flow-matching action
//! head, and hand-written reverse-mode gradients. All network code is
//! generic over [`Real`](crate::numkit::Real), so a 64-bit shadow copy of the
//! parameters runs through the exact same code path.

mod config;
mod kernels;
mod model;
mod params;

pub use config::{ActionHeadKind, PolicyConfig};
pub use model::{
    backward, backward_context, backward_into, euler_integrate, forward, predict_action,
    predict_action_with, random_sequence, time_features, velocity, velocity_backward,
    ForwardOptions, ForwardTrace, HeadNoise, ObsToken, TapToken, TokenSequence, VelocityCache,
};
pub use params::{ActionHeadParams, LayerParams, PolicyParams};
