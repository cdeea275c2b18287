use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::plan::{spec_index, PartitionPlan, RowSet};
use crate::error::{Error, Result};
use crate::workload::{dedup_rows, zipf_pmf, EmbeddingTableSpec, TrainingBatch};

/// Mean deduplicated lookups per step for every row of every table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrafficStats {
    pub per_table: BTreeMap<String, Vec<f64>>,
}

impl TrafficStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_table(mut self, table: impl Into<String>, lookups: Vec<f64>) -> Self {
        self.per_table.insert(table.into(), lookups);
        self
    }

    pub fn rows(&self, table: &str) -> Option<&[f64]> {
        self.per_table.get(table).map(Vec::as_slice)
    }

    /// Expected distinct lookups per step when a step draws `occurrences`
    /// independent values from the table's Zipf law: `1 - (1 - p_r)^m`.
    pub fn expected_unique(spec: &EmbeddingTableSpec, occurrences: f64) -> Vec<f64> {
        zipf_pmf(spec.zipf_s, spec.vocab_size)
            .into_iter()
            .map(|p| 1.0 - (1.0 - p).powf(occurrences))
            .collect()
    }

    /// Analytic stats from each table's declared `mean_valency`.
    pub fn from_declared(specs: &[EmbeddingTableSpec], batch_size: usize) -> Self {
        let per_table = specs
            .iter()
            .map(|t| {
                let m = t.mean_valency * batch_size as f64;
                (t.name.clone(), Self::expected_unique(t, m))
            })
            .collect();
        Self { per_table }
    }

    /// Empirical mean of deduplicated per-row lookups over `batches`.
    pub fn from_batches(specs: &[EmbeddingTableSpec], batches: &[TrainingBatch]) -> Result<Self> {
        let mut per_table = BTreeMap::new();
        for spec in specs {
            let mut sums = vec![0.0; spec.vocab_size as usize];
            for batch in batches {
                for row in dedup_rows(&batch.occurrences(&spec.name)?).unique_rows {
                    sums[row as usize] += 1.0;
                }
            }
            let n = batches.len().max(1) as f64;
            per_table.insert(spec.name.clone(), sums.into_iter().map(|s| s / n).collect());
        }
        Ok(Self { per_table })
    }

    pub fn validate(&self, specs: &[EmbeddingTableSpec]) -> Result<()> {
        for spec in specs {
            if let Some(rows) = self.per_table.get(&spec.name) {
                if rows.len() as u64 != spec.vocab_size {
                    return Err(Error::InvalidArgument(format!(
                        "traffic for `{}` has {} rows, table has {}",
                        spec.name,
                        rows.len(),
                        spec.vocab_size
                    )));
                }
                if rows.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "traffic for `{}` must be finite and non-negative",
                        spec.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Bytes accessed per step if the whole table lived on one node.
    pub fn table_bytes(&self, spec: &EmbeddingTableSpec) -> f64 {
        self.rows(&spec.name)
            .map(|r| r.iter().sum::<f64>() * spec.dim as f64 * spec.bytes_per_element as f64)
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub bytes_per_node: Vec<f64>,
    pub imbalance: f64,
    pub node_count: u32,
    /// Set when the plan sees no traffic; `imbalance` is then 1.0.
    pub zero_traffic: bool,
}

impl LoadReport {
    pub fn from_loads(bytes_per_node: Vec<f64>) -> Self {
        let node_count = bytes_per_node.len() as u32;
        let total: f64 = bytes_per_node.iter().sum();
        let max = bytes_per_node.iter().copied().fold(0.0, f64::max);
        let zero_traffic = total <= 0.0;
        let imbalance = if zero_traffic {
            1.0
        } else {
            node_count as f64 * max / total
        };
        Self {
            bytes_per_node,
            imbalance,
            node_count,
            zero_traffic,
        }
    }

    pub fn max_bytes(&self) -> f64 {
        self.bytes_per_node.iter().copied().fold(0.0, f64::max)
    }

    pub fn total_bytes(&self) -> f64 {
        self.bytes_per_node.iter().sum()
    }
}

fn shard_lookups(rows: &RowSet, lookups: &[f64]) -> f64 {
    rows.rows(lookups.len() as u64).map(|r| lookups[r as usize]).sum()
}

/// Per-node accessed bytes and the max-over-mean imbalance ratio.
pub fn load_imbalance(plan: &PartitionPlan, stats: &TrafficStats, specs: &[EmbeddingTableSpec]) -> Result<LoadReport> {
    let index = spec_index(specs);
    let mut loads = vec![0.0; plan.node_count as usize];
    for shard in &plan.shards {
        let spec = index
            .get(shard.table.as_str())
            .ok_or_else(|| Error::NotFound(format!("table `{}`", shard.table)))?;
        let lookups = stats
            .rows(&shard.table)
            .ok_or_else(|| Error::NotFound(format!("no traffic stats for table `{}`", shard.table)))?;
        if lookups.len() as u64 != spec.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "traffic for `{}` covers {} of {} rows",
                shard.table,
                lookups.len(),
                spec.vocab_size
            )));
        }
        loads[shard.node.0 as usize] +=
            shard_lookups(&shard.rows, lookups) * shard.cols.width() as f64 * spec.bytes_per_element as f64;
    }
    Ok(LoadReport::from_loads(loads))
}

/// Multiplier on lookup time for narrow column shards. The factor of the
/// tightest step whose `below_width` exceeds the width applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularityPenalty {
    pub steps: Vec<PenaltyStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyStep {
    pub below_width: u32,
    pub factor: f64,
}

impl Default for GranularityPenalty {
    fn default() -> Self {
        Self {
            steps: vec![PenaltyStep {
                below_width: 32,
                factor: 1.25,
            }],
        }
    }
}

impl GranularityPenalty {
    pub fn none() -> Self {
        Self { steps: Vec::new() }
    }

    /// Penalty for the narrowest column-split width; `None` means no table
    /// was split.
    pub fn factor(&self, min_split_width: Option<u32>) -> f64 {
        let Some(width) = min_split_width else {
            return 1.0;
        };
        self.steps
            .iter()
            .filter(|s| width < s.below_width)
            .map(|s| s.factor)
            .fold(1.0, f64::max)
    }
}

/// Modeled lookup time of a plan, in accessed-byte units:
/// `imbalance × mean(B_i) × penalty`, i.e. `max(B_i) × penalty`.
pub fn plan_objective(
    plan: &PartitionPlan,
    stats: &TrafficStats,
    specs: &[EmbeddingTableSpec],
    penalty: &GranularityPenalty,
) -> Result<f64> {
    let report = load_imbalance(plan, stats, specs)?;
    let mean = report.total_bytes() / report.node_count as f64;
    Ok(report.imbalance * mean * penalty.factor(plan.min_split_width(specs)))
}
