//! Exhaustive partition search for small instances.
//!
//! Enumerates, per table, every column split count and every assignment of
//! each column shard to a single node or to a block/cyclic row distribution
//! over all nodes, and returns the plan minimizing the modeled lookup
//! time. Loads are accumulated row by row from the raw traffic, without the
//! row-set machinery the heuristic uses. Among equal objectives the first
//! candidate in enumeration order wins: tables in the given order, split
//! counts ascending, then per shard node 0..N, block, cyclic.

use serde::{Deserialize, Serialize};

use super::load::{GranularityPenalty, TrafficStats};
use super::plan::{ColRange, NodeId, PartitionPlan, RowScheme, RowSet, ShardSpec};
use crate::error::{Error, Result};
use crate::workload::EmbeddingTableSpec;

pub const DEFAULT_MAX_CANDIDATES: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub column_splits: Vec<u32>,
    pub mem_capacity_per_node: Option<u64>,
    pub penalty: GranularityPenalty,
    pub max_candidates: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            column_splits: vec![1, 2],
            mem_capacity_per_node: None,
            penalty: GranularityPenalty::default(),
            max_candidates: DEFAULT_MAX_CANDIDATES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub plan: PartitionPlan,
    pub objective: f64,
    pub candidates: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Where {
    Node(u32),
    Block,
    Cyclic,
}

struct Candidate {
    shards: Vec<(u32, u32, Where)>,
    loads: Vec<f64>,
    mem: Vec<u64>,
    split_width: Option<u32>,
}

/// Node owning `row` when `vocab` rows are cut into `n` contiguous blocks
/// whose sizes differ by at most one, larger blocks first.
fn block_owner(row: u64, vocab: u64, n: u64) -> u64 {
    let mut start = 0;
    for node in 0..n {
        let len = vocab / n + u64::from(node < vocab % n);
        if row < start + len {
            return node;
        }
        start += len;
    }
    unreachable!("row {row} beyond vocab {vocab}")
}

fn widths(dim: u32, c: u32) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    let mut lo = 0;
    for j in 0..c {
        let w = dim / c + u32::from(j < dim % c);
        out.push((lo, lo + w));
        lo += w;
    }
    out
}

fn candidates_for(spec: &EmbeddingTableSpec, lookups: &[f64], nodes: u32, splits: &[u32]) -> Vec<Candidate> {
    let mut wheres: Vec<Where> = (0..nodes).map(Where::Node).collect();
    if nodes > 1 {
        wheres.push(Where::Block);
        wheres.push(Where::Cyclic);
    }
    let mut splits: Vec<u32> = splits
        .iter()
        .copied()
        .filter(|&c| c >= 1 && c <= spec.dim && (c == 1 || spec.optimizer.allows_column_split()))
        .collect();
    splits.sort_unstable();
    splits.dedup();
    if splits.is_empty() {
        splits.push(1);
    }

    let mut out = Vec::new();
    for c in splits {
        let ranges = widths(spec.dim, c);
        let total = wheres.len().pow(c);
        for code in 0..total {
            // most significant digit = first shard
            let mut digits = vec![0usize; c as usize];
            let mut rest = code;
            for d in digits.iter_mut().rev() {
                *d = rest % wheres.len();
                rest /= wheres.len();
            }
            let mut loads = vec![0.0; nodes as usize];
            let mut mem = vec![0u64; nodes as usize];
            let mut shards = Vec::new();
            for (&(lo, hi), &d) in ranges.iter().zip(&digits) {
                let place = wheres[d];
                let width = (hi - lo) as u64;
                for (row, &l) in lookups.iter().enumerate() {
                    let row = row as u64;
                    let node = match place {
                        Where::Node(n) => n as u64,
                        Where::Block => block_owner(row, spec.vocab_size, nodes as u64),
                        Where::Cyclic => row % nodes as u64,
                    } as usize;
                    loads[node] += l * width as f64 * spec.bytes_per_element as f64;
                    mem[node] += width * spec.bytes_per_element as u64 * spec.optimizer.params_width_multiplier as u64;
                }
                shards.push((lo, hi, place));
            }
            let split_width = (c > 1).then(|| ranges.iter().map(|(lo, hi)| hi - lo).min().unwrap());
            out.push(Candidate {
                shards,
                loads,
                mem,
                split_width,
            });
        }
    }
    out
}

struct Search<'a> {
    per_table: &'a [Vec<Candidate>],
    penalty: &'a GranularityPenalty,
    cap: Option<u64>,
    best: Option<(f64, Vec<usize>)>,
    path: Vec<usize>,
}

impl Search<'_> {
    fn run(&mut self, depth: usize, loads: &[f64], mem: &[u64], split: Option<u32>) {
        let bound = loads.iter().copied().fold(0.0, f64::max) * self.penalty.factor(split);
        if let Some((best, _)) = &self.best {
            // completions can only raise the bound; ties keep the earlier plan
            if bound >= *best * (1.0 - 1e-12) && bound > 0.0 {
                return;
            }
        }
        if depth == self.per_table.len() {
            if self.best.as_ref().is_none_or(|(b, _)| bound < *b) {
                self.best = Some((bound, self.path.clone()));
            }
            return;
        }
        for (i, cand) in self.per_table[depth].iter().enumerate() {
            let next_loads: Vec<f64> = loads.iter().zip(&cand.loads).map(|(a, b)| a + b).collect();
            let next_mem: Vec<u64> = mem.iter().zip(&cand.mem).map(|(a, b)| a + b).collect();
            if let Some(cap) = self.cap {
                if next_mem.iter().any(|&m| m > cap) {
                    continue;
                }
            }
            let next_split = match (split, cand.split_width) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
            self.path.push(i);
            self.run(depth + 1, &next_loads, &next_mem, next_split);
            self.path.pop();
        }
    }
}

/// Objective-minimal plan by exhaustive search.
pub fn exact_partition_oracle(
    tables: &[EmbeddingTableSpec],
    nodes: u32,
    stats: &TrafficStats,
    cfg: &OracleConfig,
) -> Result<OracleOutcome> {
    if nodes == 0 {
        return Err(Error::InvalidArgument("nodes must be >= 1".into()));
    }
    // size estimate before materializing anything
    let per_shard = nodes as f64 + if nodes > 1 { 2.0 } else { 0.0 };
    let mut estimate = 1.0f64;
    for t in tables {
        let options: f64 = cfg
            .column_splits
            .iter()
            .filter(|&&c| c >= 1 && c <= t.dim && (c == 1 || t.optimizer.allows_column_split()))
            .map(|&c| per_shard.powi(c as i32))
            .sum::<f64>()
            .max(per_shard);
        estimate *= options;
    }
    if estimate > cfg.max_candidates as f64 {
        return Err(Error::SearchTooLarge {
            estimate,
            limit: cfg.max_candidates,
        });
    }

    let per_table = tables
        .iter()
        .map(|t| {
            let lookups = stats
                .rows(&t.name)
                .ok_or_else(|| Error::NotFound(format!("no traffic stats for table `{}`", t.name)))?;
            Ok(candidates_for(t, lookups, nodes, &cfg.column_splits))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut search = Search {
        per_table: &per_table,
        penalty: &cfg.penalty,
        cap: cfg.mem_capacity_per_node,
        best: None,
        path: Vec::new(),
    };
    search.run(0, &vec![0.0; nodes as usize], &vec![0; nodes as usize], None);
    let (objective, path) = search.best.ok_or_else(|| Error::Infeasible {
        required: tables.iter().map(EmbeddingTableSpec::footprint_bytes).sum(),
        capacity: cfg
            .mem_capacity_per_node
            .unwrap_or(u64::MAX)
            .saturating_mul(nodes as u64),
        deficits: Vec::new(),
    })?;

    let mut plan = PartitionPlan::new(nodes);
    for (t, &i) in tables.iter().zip(&path) {
        for &(lo, hi, place) in &per_table[tables.iter().position(|x| x.name == t.name).unwrap()][i].shards {
            let cols = ColRange { lo, hi };
            match place {
                Where::Node(n) => plan.shards.push(ShardSpec {
                    table: t.name.clone(),
                    rows: RowSet::All,
                    cols,
                    node: NodeId(n),
                }),
                Where::Block | Where::Cyclic => {
                    let scheme = if place == Where::Block {
                        RowScheme::Block
                    } else {
                        RowScheme::Cyclic
                    };
                    plan.distribution.entry(t.name.clone()).or_insert(scheme);
                    let mut start = 0u64;
                    for n in 0..nodes as u64 {
                        let rows = if place == Where::Block {
                            let len = t.vocab_size / nodes as u64 + u64::from(n < t.vocab_size % nodes as u64);
                            let r = RowSet::Block {
                                start,
                                end: start + len,
                            };
                            start += len;
                            if len == 0 {
                                continue;
                            }
                            r
                        } else {
                            if n >= t.vocab_size {
                                continue;
                            }
                            RowSet::Cyclic {
                                offset: n,
                                stride: nodes as u64,
                            }
                        };
                        plan.shards.push(ShardSpec {
                            table: t.name.clone(),
                            rows,
                            cols,
                            node: NodeId(n as u32),
                        });
                    }
                }
            }
        }
    }
    Ok(OracleOutcome {
        plan,
        objective,
        candidates: estimate as u64,
    })
}
