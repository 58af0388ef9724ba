//! Persistence: binary formats for caches, checkpoints and demo sets, JSON
//! for selections and evaluation reports.

mod binary;
mod cache;
mod checkpoint;
mod demo;
mod text;

pub use binary::fnv1a64;
pub use cache::{
    cache_size_report, decode_cache, encode_cache, read_cache, write_cache, CACHE_MAGIC,
};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint,
    CheckpointMeta, LoraMeta, CHECKPOINT_MAGIC,
};
pub use demo::{decode_demos, encode_demos, read_demos, write_demos, DEMO_MAGIC};
pub use text::{
    read_reports, read_selection, reports_from_str, reports_to_string, selection_from_str,
    selection_to_string, write_reports, write_selection, SelectionFile,
};
