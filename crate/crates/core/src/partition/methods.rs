//! Single-method partitioners: table, column and row.

use std::cmp::Ordering;

use super::load::{load_imbalance, TrafficStats};
use super::plan::{column_ranges, ColRange, NodeId, PartitionPlan, RowScheme, RowSet, ShardSpec};
use crate::error::{Error, Result};
use crate::workload::EmbeddingTableSpec;

/// Splits a table along its vocabulary across `nodes` nodes.
pub fn row_partition(table: &EmbeddingTableSpec, nodes: u32, scheme: RowScheme) -> Result<PartitionPlan> {
    if nodes == 0 {
        return Err(Error::InvalidArgument("row_partition: nodes must be >= 1".into()));
    }
    let mut plan = PartitionPlan::new(nodes);
    for node in 0..nodes {
        let rows = RowSet::for_scheme(scheme, node, nodes, table.vocab_size);
        if rows.count(table.vocab_size) == 0 && !matches!(rows, RowSet::Hash { .. }) {
            continue;
        }
        plan.shards.push(ShardSpec {
            table: table.name.clone(),
            rows,
            cols: ColRange::full(table.dim),
            node: NodeId(node),
        });
    }
    plan.distribution.insert(table.name.clone(), scheme);
    Ok(plan)
}

/// Splits a table along its width into `shard_count` ranges, shard `j` on
/// node `j`.
pub fn column_partition(table: &EmbeddingTableSpec, shard_count: u32) -> Result<PartitionPlan> {
    if shard_count == 0 || shard_count > table.dim {
        return Err(Error::InvalidArgument(format!(
            "column_partition: shard_count {shard_count} outside [1, {}]",
            table.dim
        )));
    }
    if shard_count > 1 && !table.optimizer.allows_column_split() {
        return Err(Error::ConstraintViolation(format!(
            "table `{}` uses a row-wise optimizer; only element-wise optimizers allow column partitioning",
            table.name
        )));
    }
    let mut plan = PartitionPlan::new(shard_count);
    for (j, cols) in column_ranges(table.dim, shard_count).into_iter().enumerate() {
        plan.shards.push(ShardSpec {
            table: table.name.clone(),
            rows: RowSet::All,
            cols,
            node: NodeId(j as u32),
        });
    }
    Ok(plan)
}

/// Index of the least-loaded node; ties go to the lowest index.
pub(crate) fn least_loaded(loads: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in loads.iter().enumerate().skip(1) {
        if l < loads[best] {
            best = i;
        }
    }
    best
}

/// Places whole tables, heaviest first, on the currently least-loaded node.
pub fn table_partition(tables: &[EmbeddingTableSpec], nodes: u32, stats: &TrafficStats) -> Result<PartitionPlan> {
    if nodes == 0 {
        return Err(Error::InvalidArgument("table_partition: nodes must be >= 1".into()));
    }
    let mut order: Vec<(&EmbeddingTableSpec, f64)> = tables.iter().map(|t| (t, stats.table_bytes(t))).collect();
    order.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.name.cmp(&b.0.name))
    });
    let mut loads = vec![0.0; nodes as usize];
    let mut plan = PartitionPlan::new(nodes);
    for (table, bytes) in order {
        let node = least_loaded(&loads);
        loads[node] += bytes;
        plan.shards.push(ShardSpec {
            table: table.name.clone(),
            rows: RowSet::All,
            cols: ColRange::full(table.dim),
            node: NodeId(node as u32),
        });
    }
    Ok(plan)
}

/// Row-partitions every table with the same scheme.
pub fn row_partition_all(tables: &[EmbeddingTableSpec], nodes: u32, scheme: RowScheme) -> Result<PartitionPlan> {
    let mut plan = PartitionPlan::new(nodes);
    for t in tables {
        plan = plan.merge(row_partition(t, nodes, scheme)?)?;
    }
    Ok(plan)
}

/// Imbalance of cyclic and block row distributions of one table.
pub fn compare_cyclic_block(table: &EmbeddingTableSpec, stats: &TrafficStats, nodes: u32) -> Result<(f64, f64)> {
    let specs = std::slice::from_ref(table);
    let cyclic = load_imbalance(&row_partition(table, nodes, RowScheme::Cyclic)?, stats, specs)?;
    let block = load_imbalance(&row_partition(table, nodes, RowScheme::Block)?, stats, specs)?;
    Ok((cyclic.imbalance, block.imbalance))
}
