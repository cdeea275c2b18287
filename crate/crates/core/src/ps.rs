//! Parameter-server embedding placement and RPC accounting for CPU-side
//! training.
//!
//! A stacked group concatenates member tables into one variable; member `k`
//! starts at the sum of the preceding members' vocabularies. Stacked
//! variables are always distributed cyclically, so global row `g` lives on
//! PS `g mod P`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::RowScheme;
use crate::workload::{dedup_rows, EmbeddingTableSpec, OptimizerClass, TrainingBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsTablePlacement {
    pub scheme: RowScheme,
    /// First row of this table inside its (possibly stacked) variable.
    pub offset: u64,
    pub vocab: u64,
    /// Rows in the whole variable.
    pub variable_vocab: u64,
    pub row_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsLayout {
    pub ps_count: u32,
    pub assignment: BTreeMap<String, PsTablePlacement>,
    pub stacked_groups: Vec<Vec<String>>,
}

impl PsLayout {
    /// PS holding `row` of `table`.
    pub fn ps_of(&self, table: &str, row: u64) -> Result<u32> {
        let p = self
            .assignment
            .get(table)
            .ok_or_else(|| Error::NotFound(format!("table `{table}` in PS layout")))?;
        if row >= p.vocab {
            return Err(Error::InvalidArgument(format!(
                "row {row} outside `{table}` (vocab {})",
                p.vocab
            )));
        }
        let g = p.offset + row;
        let n = self.ps_count as u64;
        Ok(match p.scheme {
            RowScheme::Cyclic => g % n,
            RowScheme::Block => {
                // balanced blocks over the variable, larger blocks first
                let (base, extra) = (p.variable_vocab / n, p.variable_vocab % n);
                let big = extra * (base + 1);
                if g < big {
                    g / (base + 1)
                } else {
                    extra + (g - big) / base
                }
            }
            RowScheme::RandomHash => {
                crate::partition::scheme_node(RowScheme::RandomHash, g, self.ps_count, p.variable_vocab) as u64
            }
        } as u32)
    }

    /// Checks the stacking invariants against the table specs.
    pub fn validate(&self, tables: &[EmbeddingTableSpec]) -> Result<()> {
        if self.ps_count == 0 {
            return Err(Error::InvalidArgument("ps_count must be >= 1".into()));
        }
        let by_name: BTreeMap<&str, &EmbeddingTableSpec> = tables.iter().map(|t| (t.name.as_str(), t)).collect();
        for group in &self.stacked_groups {
            let specs = group
                .iter()
                .map(|n| {
                    by_name
                        .get(n.as_str())
                        .copied()
                        .ok_or_else(|| Error::NotFound(format!("table `{n}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = specs.first() {
                if specs.iter().any(|s| stack_key(s) != stack_key(first)) {
                    return Err(Error::ConstraintViolation(format!(
                        "stacked group {group:?} mixes widths or optimizer parameters"
                    )));
                }
            }
            if group.len() > 1
                && group
                    .iter()
                    .any(|n| self.assignment.get(n).is_none_or(|p| p.scheme != RowScheme::Cyclic))
            {
                return Err(Error::ConstraintViolation(format!(
                    "stacked group {group:?} must use cyclic distribution"
                )));
            }
        }
        for t in tables {
            if !self.assignment.contains_key(&t.name) {
                return Err(Error::ConstraintViolation(format!(
                    "table `{}` has no PS placement",
                    t.name
                )));
            }
        }
        Ok(())
    }

    pub fn effective_tables(&self) -> usize {
        self.stacked_groups.len()
    }
}

type StackKey = (u32, OptimizerClass, u32, u32);

fn stack_key(t: &EmbeddingTableSpec) -> StackKey {
    (
        t.dim,
        t.optimizer.kind,
        t.optimizer.params_width_multiplier,
        t.bytes_per_element,
    )
}

/// Groups tables sharing width, optimizer and element size. Groups appear in
/// order of their first member; members keep input order.
pub fn stack_tables(tables: &[EmbeddingTableSpec]) -> Vec<Vec<String>> {
    let mut groups: Vec<(StackKey, Vec<String>)> = Vec::new();
    for t in tables {
        let key = stack_key(t);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(t.name.clone()),
            None => groups.push((key, vec![t.name.clone()])),
        }
    }
    groups.into_iter().map(|(_, m)| m).collect()
}

fn check_ps_count(ps_count: u32) -> Result<()> {
    if ps_count == 0 {
        return Err(Error::InvalidArgument("ps_count must be >= 1".into()));
    }
    Ok(())
}

/// Row-shards every table on its own over all parameter servers.
pub fn shard_rows_over_ps(tables: &[EmbeddingTableSpec], ps_count: u32, scheme: RowScheme) -> Result<PsLayout> {
    check_ps_count(ps_count)?;
    let assignment = tables
        .iter()
        .map(|t| {
            (
                t.name.clone(),
                PsTablePlacement {
                    scheme,
                    offset: 0,
                    vocab: t.vocab_size,
                    variable_vocab: t.vocab_size,
                    row_bytes: t.row_bytes(),
                },
            )
        })
        .collect();
    Ok(PsLayout {
        ps_count,
        assignment,
        stacked_groups: tables.iter().map(|t| vec![t.name.clone()]).collect(),
    })
}

/// Stacks compatible tables and distributes each stacked variable cyclically.
pub fn stacked_layout(tables: &[EmbeddingTableSpec], ps_count: u32) -> Result<PsLayout> {
    check_ps_count(ps_count)?;
    let groups = stack_tables(tables);
    let by_name: BTreeMap<&str, &EmbeddingTableSpec> = tables.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut assignment = BTreeMap::new();
    for group in &groups {
        let total: u64 = group.iter().map(|n| by_name[n.as_str()].vocab_size).sum();
        let mut offset = 0;
        for n in group {
            let t = by_name[n.as_str()];
            assignment.insert(
                n.clone(),
                PsTablePlacement {
                    scheme: RowScheme::Cyclic,
                    offset,
                    vocab: t.vocab_size,
                    variable_vocab: total,
                    row_bytes: t.row_bytes(),
                },
            );
            offset += t.vocab_size;
        }
    }
    Ok(PsLayout {
        ps_count,
        assignment,
        stacked_groups: groups,
    })
}

/// RPC counts for one training step.
///
/// `per_ps_rpcs_per_step` counts lookup RPCs reaching one PS:
/// `cores × tables × batches` without coalescing, `cores × batches` with it.
/// Each lookup is matched by an update RPC, so a (worker, PS) pair exchanges
/// `2 × tables` RPCs per batch uncoalesced and exactly 2 coalesced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcAccounting {
    pub coalesced: bool,
    pub n_cores: u64,
    pub n_tables_effective: u64,
    pub ps_count: u32,
    pub batches: u64,
    pub per_ps_rpcs_per_step: u64,
    pub rpcs_per_worker_ps_per_batch: u64,
    pub total_payload_bytes: u64,
}

impl RpcAccounting {
    /// Lookup plus update RPCs arriving at one PS per step.
    pub fn wire_rpcs_per_ps(&self) -> u64 {
        self.n_cores * self.batches * self.rpcs_per_worker_ps_per_batch
    }
}

pub fn rpc_count(
    n_cores: u64,
    n_tables_effective: u64,
    ps_count: u32,
    coalesced: bool,
    batches: u64,
) -> Result<RpcAccounting> {
    if n_cores == 0 || n_tables_effective == 0 || ps_count == 0 || batches == 0 {
        return Err(Error::InvalidArgument("rpc_count: all counts must be >= 1".into()));
    }
    let (lookups, pair) = if coalesced {
        (n_cores * batches, 2)
    } else {
        (n_cores * n_tables_effective * batches, 2 * n_tables_effective)
    };
    Ok(RpcAccounting {
        coalesced,
        n_cores,
        n_tables_effective,
        ps_count,
        batches,
        per_ps_rpcs_per_step: lookups,
        rpcs_per_worker_ps_per_batch: pair,
        total_payload_bytes: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsNetwork {
    pub rpc_overhead_us: f64,
    pub per_byte_us: f64,
    /// Lookup compute proxy per unique row served.
    pub per_row_us: f64,
}

impl Default for PsNetwork {
    fn default() -> Self {
        Self {
            rpc_overhead_us: 20.0,
            per_byte_us: 0.001,
            per_row_us: 0.05,
        }
    }
}

/// Unique rows and payload bytes (lookup + gradient) per PS for one batch.
pub fn ps_loads(layout: &PsLayout, batch: &TrainingBatch) -> Result<Vec<(u64, u64)>> {
    let mut loads = vec![(0u64, 0u64); layout.ps_count as usize];
    for (table, p) in &layout.assignment {
        let Some(examples) = batch.lookups.get(table) else {
            continue;
        };
        let occurrences: Vec<u64> = examples.iter().flatten().copied().collect();
        for row in dedup_rows(&occurrences).unique_rows {
            let ps = layout.ps_of(table, row)? as usize;
            loads[ps].0 += 1;
            loads[ps].1 += 2 * p.row_bytes;
        }
    }
    Ok(loads)
}

/// Slowest PS: RPC overhead, payload transfer and lookup work.
pub fn ps_step_time(layout: &PsLayout, batch: &TrainingBatch, acct: &RpcAccounting, net: &PsNetwork) -> Result<f64> {
    if acct.ps_count != layout.ps_count {
        return Err(Error::InvalidArgument(format!(
            "accounting for {} PS, layout has {}",
            acct.ps_count, layout.ps_count
        )));
    }
    for table in batch.lookups.keys() {
        if !layout.assignment.contains_key(table) {
            return Err(Error::NotFound(format!("table `{table}` in PS layout")));
        }
    }
    let rpc_term = net.rpc_overhead_us * acct.wire_rpcs_per_ps() as f64;
    Ok(ps_loads(layout, batch)?
        .into_iter()
        .map(|(rows, bytes)| rpc_term + net.per_byte_us * bytes as f64 + net.per_row_us * rows as f64)
        .fold(0.0, f64::max))
}
