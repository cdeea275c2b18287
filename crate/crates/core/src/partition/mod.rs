//! Embedding table partitioning: plans, load accounting and search.

mod load;
mod methods;
mod oracle;
mod plan;
mod search;

pub use load::{load_imbalance, plan_objective, GranularityPenalty, LoadReport, PenaltyStep, TrafficStats};
pub use methods::{column_partition, compare_cyclic_block, row_partition, row_partition_all, table_partition};
pub use oracle::{exact_partition_oracle, OracleConfig, OracleOutcome, DEFAULT_MAX_CANDIDATES};
pub use plan::{
    column_ranges, hash_bucket, memory_bytes, scheme_node, ColRange, NodeId, PartitionPlan, RowScheme, RowSet,
    ShardSpec, ROW_HASH_SEED,
};
pub use search::{hybrid_partition, search_hybrid, HybridConfig, HybridOutcome, Placement};
