//! Analytical step-time and network-traffic models.

mod ladder;
mod stale;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::PartitionPlan;
use crate::workload::{dedup_rows, EmbeddingTableSpec, TrainingBatch};

pub use ladder::{
    actual_traffic, documented_ladder_scenario, profile_model, run_ladder, sc_time_us, write_sweep_csv, LadderMode,
    LadderRow, LadderScenario, ScCostModel,
};
pub use stale::{stale_gradient_experiment, train_toy, StaleTrainConfig, ToyRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Serialized,
    Pipelined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCost {
    pub tc_us: f64,
    pub sc_us: f64,
    pub mode: ExecMode,
}

impl StepCost {
    pub fn new(tc_us: f64, sc_us: f64, mode: ExecMode) -> Result<Self> {
        if !(tc_us >= 0.0 && sc_us >= 0.0 && tc_us.is_finite() && sc_us.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step costs must be finite and >= 0 (tc {tc_us}, sc {sc_us})"
            )));
        }
        Ok(Self { tc_us, sc_us, mode })
    }

    /// Step time under this cost's own mode.
    pub fn step_us(&self, contention: &ContentionModel) -> f64 {
        match self.mode {
            ExecMode::Serialized => serialized_step(self),
            ExecMode::Pipelined => pipelined_step(self, contention),
        }
    }
}

/// Fractional slowdowns both units suffer while overlapped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContentionModel {
    pub tc_slowdown: f64,
    pub sc_slowdown: f64,
}

impl Default for ContentionModel {
    fn default() -> Self {
        Self {
            tc_slowdown: 0.05,
            sc_slowdown: 0.10,
        }
    }
}

impl ContentionModel {
    pub fn none() -> Self {
        Self {
            tc_slowdown: 0.0,
            sc_slowdown: 0.0,
        }
    }
}

pub fn serialized_step(cost: &StepCost) -> f64 {
    cost.tc_us + cost.sc_us
}

pub fn pipelined_step(cost: &StepCost, contention: &ContentionModel) -> f64 {
    (cost.tc_us * (1.0 + contention.tc_slowdown)).max(cost.sc_us * (1.0 + contention.sc_slowdown))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficStrategy {
    /// Unique values are exchanged once per owning column shard.
    DedupAllToAll,
    /// Every value is sent; row-sharded tables also reduce-scatter one
    /// partial sum per node per example.
    AllValuesReduceScatter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficModel {
    pub strategy: TrafficStrategy,
    /// Bytes of one value identifier.
    #[serde(default = "default_id_bytes")]
    pub id_bytes: u64,
    pub node_count: u32,
}

fn default_id_bytes() -> u64 {
    4
}

impl TrafficModel {
    pub fn new(strategy: TrafficStrategy, node_count: u32) -> Self {
        Self {
            strategy,
            id_bytes: default_id_bytes(),
            node_count,
        }
    }
}

/// Bytes a batch injects into the network under `model`.
///
/// Dedup: each unique row costs `id_bytes + width × bytes_per_element` for
/// every column shard holding it. All-values: every occurrence costs
/// `id_bytes`; row-sharded tables then exchange `N × batch × dim` partial
/// sums, other tables one pooled vector per example.
pub fn network_traffic(
    batch: &TrainingBatch,
    plan: &PartitionPlan,
    model: &TrafficModel,
    specs: &[EmbeddingTableSpec],
) -> Result<u64> {
    if model.node_count == 0 {
        return Err(Error::InvalidArgument("traffic model needs node_count >= 1".into()));
    }
    let mut total = 0u64;
    for spec in specs {
        let shards: Vec<_> = plan.shards.iter().filter(|s| s.table == spec.name).collect();
        if shards.is_empty() {
            continue;
        }
        let occurrences = batch.occurrences(&spec.name)?;
        let bpe = spec.bytes_per_element as u64;
        match model.strategy {
            TrafficStrategy::DedupAllToAll => {
                for row in dedup_rows(&occurrences).unique_rows {
                    for s in shards.iter().filter(|s| s.rows.contains(row)) {
                        total += model.id_bytes + s.cols.width() as u64 * bpe;
                    }
                }
            }
            TrafficStrategy::AllValuesReduceScatter => {
                total += occurrences.len() as u64 * model.id_bytes;
                let row_sharded = shards
                    .iter()
                    .map(|s| s.node)
                    .collect::<std::collections::BTreeSet<_>>()
                    .len()
                    > 1
                    && shards.iter().any(|s| !matches!(s.rows, crate::partition::RowSet::All));
                let copies = if row_sharded { model.node_count as u64 } else { 1 };
                total += copies * batch.batch_size as u64 * spec.dim as u64 * bpe;
            }
        }
    }
    Ok(total)
}

/// Share of examples taking the low-valency path (valency ≤ threshold) and
/// the high-valency path. An empty input counts as all low-valency.
pub fn software_dedup_route(valencies: &[u32], threshold: u32) -> Result<(f64, f64)> {
    if threshold == 0 {
        return Err(Error::InvalidArgument("dedup threshold must be >= 1".into()));
    }
    if valencies.is_empty() {
        return Ok((1.0, 0.0));
    }
    let low = valencies.iter().filter(|&&v| v <= threshold).count();
    let tc = low as f64 / valencies.len() as f64;
    Ok((tc, (valencies.len() - low) as f64 / valencies.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{row_partition, table_partition, RowScheme, TrafficStats};
    use std::collections::BTreeMap;

    #[test]
    fn step_arithmetic() {
        let c = StepCost::new(100.0, 50.0, ExecMode::Serialized).unwrap();
        assert_eq!(serialized_step(&c), 150.0);
        assert_eq!(pipelined_step(&c, &ContentionModel::none()), 100.0);
        let c = StepCost::new(100.0, 100.0, ExecMode::Pipelined).unwrap();
        let slow = ContentionModel {
            tc_slowdown: 0.1,
            sc_slowdown: 0.0,
        };
        assert!((pipelined_step(&c, &slow) - 110.0).abs() < 1e-12);
        assert_eq!(
            serialized_step(&StepCost::new(0.0, 50.0, ExecMode::Serialized).unwrap()),
            50.0
        );
        assert!(StepCost::new(-1.0, 0.0, ExecMode::Serialized).is_err());
    }

    fn repeated_batch(n: usize) -> TrainingBatch {
        let mut lookups = BTreeMap::new();
        lookups.insert("t".to_string(), vec![vec![3u64]; n]);
        TrainingBatch {
            batch_size: n,
            lookups,
            event_ids: (0..n as u64).collect(),
        }
    }

    #[test]
    fn dedup_collapses_duplicates() {
        let spec = EmbeddingTableSpec::new("t", 16, 8);
        let batch = repeated_batch(1000);
        for n in [2, 4, 8] {
            let plan = row_partition(&spec, n, RowScheme::Cyclic).unwrap();
            let bytes = network_traffic(
                &batch,
                &plan,
                &TrafficModel::new(TrafficStrategy::DedupAllToAll, n),
                std::slice::from_ref(&spec),
            )
            .unwrap();
            assert_eq!(bytes, 4 + 8 * 4);
        }
    }

    #[test]
    fn empty_batch_is_free() {
        let spec = EmbeddingTableSpec::new("t", 16, 8);
        let mut lookups = BTreeMap::new();
        lookups.insert("t".to_string(), Vec::new());
        let batch = TrainingBatch {
            batch_size: 0,
            lookups,
            event_ids: Vec::new(),
        };
        let plan = row_partition(&spec, 4, RowScheme::Block).unwrap();
        for strategy in [TrafficStrategy::DedupAllToAll, TrafficStrategy::AllValuesReduceScatter] {
            let m = TrafficModel::new(strategy, 4);
            assert_eq!(
                network_traffic(&batch, &plan, &m, std::slice::from_ref(&spec)).unwrap(),
                0
            );
        }
    }

    #[test]
    fn whole_tables_send_one_vector_per_example() {
        let spec = EmbeddingTableSpec::new("t", 16, 8);
        let stats = TrafficStats::new().with_table("t", vec![1.0; 16]);
        let plan = table_partition(std::slice::from_ref(&spec), 4, &stats).unwrap();
        let m = TrafficModel::new(TrafficStrategy::AllValuesReduceScatter, 4);
        let bytes = network_traffic(&repeated_batch(10), &plan, &m, std::slice::from_ref(&spec)).unwrap();
        assert_eq!(bytes, 10 * 4 + 10 * 8 * 4);
    }

    #[test]
    fn routing_extremes() {
        assert_eq!(software_dedup_route(&[1; 20], 8).unwrap(), (1.0, 0.0));
        assert_eq!(software_dedup_route(&[1000; 20], 8).unwrap(), (0.0, 1.0));
        assert!(software_dedup_route(&[1], 0).is_err());
    }
}
