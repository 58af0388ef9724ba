//! Few-shot task adaptation for small transformer policies by steering a
//! handful of attention heads.

pub mod analysis;
pub mod error;
pub mod lora;
pub mod numkit;
pub mod pipeline;
pub mod policy;
pub mod selector;
pub mod simenv;
pub mod store;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/policy.md")]
    mod policy {}
    #[doc = include_str!("../../../book/src/selection.md")]
    mod selection {}
    #[doc = include_str!("../../../book/src/adapters.md")]
    mod adapters {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/files.md")]
    mod files {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
