//! Episodic memory of temporally sparse exemplars, semantic memory of
//! per-task prompts, frame subsampling, persistence and byte accounting.

pub mod accounting;
pub mod format;
pub mod sampling;
pub mod store;

pub use accounting::{memory_usage_bytes, mib, mib_rounded, MemoryBudget, MemoryUsage};
pub use format::{load_memory, save_memory};
pub use sampling::{nearest_upsample, subsample, subsample_indices, SamplingStrategy};
pub use store::{select_task_memory, write_task_memory, EpisodicStore, SemanticStore, StoredClip, TaskMemory};
