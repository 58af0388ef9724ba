//! Head selection: find the attention heads whose activations best explain
//! the demonstrated actions.
//!
//! The primary method caches each head's activation at the extraction token
//! for every demo step and scores heads by leave-one-trajectory-out k-NN
//! action regression. CMA ablation, REINFORCE subset search and centroid
//! classification are provided for comparison.
//!
//! Ties are broken by `HeadId` order, and neighbours by `(traj, t)`.

mod ablation;
mod cache;
mod classify;
mod knn;
mod multitask;
pub mod planted;

pub use ablation::{
    cma_score, demo_mse, reinforce_select, subset_log_prob_grad, CmaOptions, ReinforceOptions,
    LOGIT_LIMIT,
};
pub use cache::{extract_cache, retained_steps, ActivationCache, ExtractOptions, RowKey};
pub use classify::{centroid_select, CentroidResult};
pub use knn::{
    knn_neighbours, knn_predict, score_heads, search_k, select_top_m, HeadScore, HeadScoreTable,
    Method, Metric, SelectionResult, DEFAULT_K_CANDIDATES,
};
pub use multitask::{select_multitask, MultitaskMode};
