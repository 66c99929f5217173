//! Weight-space methods: task-vector arithmetic, pruning and adapters.

mod adapter;
mod prune;
mod task;

pub use adapter::{insert_adapter, remove_adapter, Adapter, AdapterMode};
pub use prune::{apply_mask, prune, random_relevance, Granularity, PruneMask};
pub use task::{apply, task_vector, TaskVector};
