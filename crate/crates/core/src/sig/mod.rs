//! Shared input generation: memoized feature transformations keyed by
//! canonical component hashes.

mod eval;
mod graph;
mod key;
mod service;
pub mod workload;

pub use eval::{eval_transform, RawRecord};
pub use graph::{extract_components, ConnectedComponent, Node, NodeId, OpKind, TransformGraph};
pub use key::{canonical_key, CanonicalKey};
pub use service::{
    Block, BlockId, CacheEntry, ClientId, EntryStatus, EventRange, EvictPredicate, Lease, MemoTask, RawSource,
    ReadSlot, ReadSolution, Scheduling, SharedSig, SigEvent, SigMetrics, SigService, TaskId, Warehouse,
    SNAPSHOT_VERSION,
};
