//! Hybrid table/column/row partitioning by beam search.
//!
//! Every table picks a column split count and, for each column shard, either
//! a single node or a row distribution (block or cyclic) over all nodes.
//! Tables are visited heaviest first; the beam keeps the `search_budget`
//! best partial assignments ranked by their modeled lookup time. States
//! with identical per-node load, memory and split width are merged since
//! their completions are interchangeable. The result is never worse than the
//! row-cyclic and table-greedy plans, which are evaluated explicitly.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::load::{plan_objective, GranularityPenalty, TrafficStats};
use super::methods::{row_partition_all, table_partition};
use super::plan::{
    column_ranges, memory_bytes, scheme_node, ColRange, NodeId, PartitionPlan, RowScheme, RowSet, ShardSpec,
};
use crate::error::{Error, Result};
use crate::workload::{EmbeddingTableSpec, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HybridConfig {
    /// Column split counts to consider (1 = unsplit).
    pub column_splits: Vec<u32>,
    /// Beam width.
    pub search_budget: usize,
    pub mem_capacity_per_node: Option<u64>,
    pub penalty: GranularityPenalty,
    /// Whole-shard placements tried per column shard: the least-loaded
    /// nodes of the partial plan.
    pub placement_fanout: usize,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            column_splits: vec![1, 2],
            search_budget: 4096,
            mem_capacity_per_node: None,
            penalty: GranularityPenalty::default(),
            placement_fanout: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Whole(u32),
    Rows(RowScheme),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridOutcome {
    pub plan: PartitionPlan,
    pub objective: f64,
    pub row_cyclic_objective: Option<f64>,
    pub table_greedy_objective: Option<f64>,
    /// Which candidate won: "beam", "row_cyclic" or "table_greedy".
    pub source: String,
    pub states_explored: usize,
}

/// Precomputed contribution of one column shard under each placement.
struct ShardCosts {
    cols: ColRange,
    whole_bytes: f64,
    whole_mem: u64,
    rows_bytes: [Vec<f64>; 2],
    rows_mem: [Vec<u64>; 2],
}

struct TableCosts<'a> {
    spec: &'a EmbeddingTableSpec,
    /// One entry per column split count, each holding its shards.
    options: Vec<Vec<ShardCosts>>,
}

const ROW_SCHEMES: [RowScheme; 2] = [RowScheme::Block, RowScheme::Cyclic];

fn per_node_rows(spec: &EmbeddingTableSpec, lookups: &[f64], nodes: u32, scheme: RowScheme) -> (Vec<f64>, Vec<u64>) {
    let mut traffic = vec![0.0; nodes as usize];
    let mut count = vec![0u64; nodes as usize];
    for (row, &l) in lookups.iter().enumerate() {
        let n = scheme_node(scheme, row as u64, nodes, spec.vocab_size) as usize;
        traffic[n] += l;
        count[n] += 1;
    }
    (traffic, count)
}

fn table_costs<'a>(
    spec: &'a EmbeddingTableSpec,
    stats: &TrafficStats,
    nodes: u32,
    cfg: &HybridConfig,
) -> Result<TableCosts<'a>> {
    let lookups = stats
        .rows(&spec.name)
        .ok_or_else(|| Error::NotFound(format!("no traffic stats for table `{}`", spec.name)))?;
    let total: f64 = lookups.iter().sum();
    let per_scheme: Vec<(Vec<f64>, Vec<u64>)> = ROW_SCHEMES
        .iter()
        .map(|&s| per_node_rows(spec, lookups, nodes, s))
        .collect();
    let bpe = spec.bytes_per_element as f64;
    let mem_unit = spec.bytes_per_element as u64 * spec.optimizer.params_width_multiplier as u64;
    let mut splits: Vec<u32> = cfg
        .column_splits
        .iter()
        .copied()
        .filter(|&c| c >= 1 && c <= spec.dim && (c == 1 || spec.optimizer.allows_column_split()))
        .collect();
    splits.sort_unstable();
    splits.dedup();
    if splits.is_empty() {
        splits.push(1);
    }
    let options = splits
        .iter()
        .map(|&c| {
            column_ranges(spec.dim, c)
                .into_iter()
                .map(|cols| {
                    let w = cols.width() as f64;
                    let wm = cols.width() as u64 * mem_unit;
                    ShardCosts {
                        cols,
                        whole_bytes: total * w * bpe,
                        whole_mem: spec.vocab_size * wm,
                        rows_bytes: [0, 1].map(|k| per_scheme[k].0.iter().map(|t| t * w * bpe).collect()),
                        rows_mem: [0, 1].map(|k| per_scheme[k].1.iter().map(|c| c * wm).collect()),
                    }
                })
                .collect()
        })
        .collect();
    Ok(TableCosts { spec, options })
}

#[derive(Clone)]
struct State {
    loads: Vec<f64>,
    mem: Vec<u64>,
    min_split: Option<u32>,
    /// Per visited table: (split option index, placement per column shard).
    choices: Vec<(usize, Vec<Placement>)>,
}

impl State {
    fn score(&self, penalty: &GranularityPenalty) -> f64 {
        self.loads.iter().copied().fold(0.0, f64::max) * penalty.factor(self.min_split)
    }

    fn spread(&self) -> f64 {
        self.loads.iter().map(|l| l * l).sum()
    }

    fn key(&self) -> (Vec<u64>, Vec<u64>, Option<u32>) {
        (
            self.loads.iter().map(|l| l.to_bits()).collect(),
            self.mem.clone(),
            self.min_split,
        )
    }
}

fn placement_candidates(loads: &[f64], nodes: u32, fanout: usize) -> Vec<Placement> {
    let mut order: Vec<usize> = (0..loads.len()).collect();
    if fanout < loads.len() {
        order.sort_by(|&a, &b| {
            loads[a]
                .partial_cmp(&loads[b])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(fanout.max(1));
        order.sort_unstable();
    }
    let mut out: Vec<Placement> = order.into_iter().map(|n| Placement::Whole(n as u32)).collect();
    if nodes > 1 {
        out.extend(ROW_SCHEMES.iter().map(|&s| Placement::Rows(s)));
    }
    out
}

fn expand(state: &State, table: &TableCosts, nodes: u32, cfg: &HybridConfig, out: &mut Vec<State>) {
    let candidates = placement_candidates(&state.loads, nodes, cfg.placement_fanout);
    for (opt_idx, shards) in table.options.iter().enumerate() {
        let c = shards.len();
        let mut digits = vec![0usize; c];
        loop {
            let mut next = state.clone();
            let mut placements = Vec::with_capacity(c);
            for (shard, &d) in shards.iter().zip(&digits) {
                let p = candidates[d];
                match p {
                    Placement::Whole(n) => {
                        next.loads[n as usize] += shard.whole_bytes;
                        next.mem[n as usize] += shard.whole_mem;
                    }
                    Placement::Rows(s) => {
                        let k = ROW_SCHEMES.iter().position(|&x| x == s).expect("scheme");
                        for n in 0..nodes as usize {
                            next.loads[n] += shard.rows_bytes[k][n];
                            next.mem[n] += shard.rows_mem[k][n];
                        }
                    }
                }
                placements.push(p);
            }
            if c > 1 {
                let w = shards.iter().map(|s| s.cols.width()).min().expect("c > 1");
                next.min_split = Some(next.min_split.map_or(w, |m| m.min(w)));
            }
            let fits = cfg
                .mem_capacity_per_node
                .is_none_or(|cap| next.mem.iter().all(|&m| m <= cap));
            if fits {
                next.choices.push((opt_idx, placements));
                out.push(next);
            }
            if !advance(&mut digits, candidates.len()) {
                break;
            }
        }
    }
}

/// Odometer step over placement digits; false once every combination is used.
fn advance(digits: &mut [usize], base: usize) -> bool {
    for d in digits.iter_mut().rev() {
        *d += 1;
        if *d < base {
            return true;
        }
        *d = 0;
    }
    false
}

fn materialize(tables: &[TableCosts], choices: &[(usize, Vec<Placement>)], nodes: u32) -> PartitionPlan {
    let mut plan = PartitionPlan::new(nodes);
    for (table, (opt_idx, placements)) in tables.iter().zip(choices) {
        let spec = table.spec;
        for (shard, p) in table.options[*opt_idx].iter().zip(placements) {
            match *p {
                Placement::Whole(n) => plan.shards.push(ShardSpec {
                    table: spec.name.clone(),
                    rows: RowSet::All,
                    cols: shard.cols,
                    node: NodeId(n),
                }),
                Placement::Rows(scheme) => {
                    plan.distribution.entry(spec.name.clone()).or_insert(scheme);
                    for n in 0..nodes {
                        let rows = RowSet::for_scheme(scheme, n, nodes, spec.vocab_size);
                        if rows.count(spec.vocab_size) > 0 {
                            plan.shards.push(ShardSpec {
                                table: spec.name.clone(),
                                rows,
                                cols: shard.cols,
                                node: NodeId(n),
                            });
                        }
                    }
                }
            }
        }
    }
    plan
}

fn deficits(mem: &[u64], cap: u64) -> Vec<(u32, u64)> {
    mem.iter()
        .enumerate()
        .filter(|(_, &m)| m > cap)
        .map(|(i, &m)| (i as u32, m - cap))
        .collect()
}

/// Searches hybrid plans; see the module docs.
pub fn search_hybrid(
    tables: &[EmbeddingTableSpec],
    nodes: u32,
    stats: &TrafficStats,
    cfg: &HybridConfig,
) -> Result<HybridOutcome> {
    if nodes == 0 {
        return Err(Error::InvalidArgument("nodes must be >= 1".into()));
    }
    stats.validate(tables)?;
    let row_cyclic = row_partition_all(tables, nodes, RowScheme::Cyclic)?;
    if let Some(cap) = cfg.mem_capacity_per_node {
        let required: u64 = tables.iter().map(EmbeddingTableSpec::footprint_bytes).sum();
        let capacity = cap.saturating_mul(nodes as u64);
        if required > capacity {
            return Err(Error::Infeasible {
                required,
                capacity,
                deficits: deficits(&memory_bytes(&row_cyclic, tables)?, cap),
            });
        }
    }

    let mut order: Vec<&EmbeddingTableSpec> = tables.iter().collect();
    order.sort_by(|a, b| {
        stats
            .table_bytes(b)
            .partial_cmp(&stats.table_bytes(a))
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.name.cmp(&b.name))
    });
    let costs = order
        .iter()
        .map(|t| table_costs(t, stats, nodes, cfg))
        .collect::<Result<Vec<_>>>()?;

    let width = cfg.search_budget.max(1);
    let mut beam = vec![State {
        loads: vec![0.0; nodes as usize],
        mem: vec![0; nodes as usize],
        min_split: None,
        choices: Vec::new(),
    }];
    let mut explored = 0usize;
    for table in &costs {
        let mut children = Vec::new();
        for s in &beam {
            expand(s, table, nodes, cfg, &mut children);
        }
        explored += children.len();
        let mut seen = HashMap::with_capacity(children.len());
        let mut unique = Vec::with_capacity(children.len());
        for child in children {
            if seen.insert(child.key(), ()).is_none() {
                unique.push(child);
            }
        }
        let mut scored: Vec<(f64, f64, State)> = unique
            .into_iter()
            .map(|s| (s.score(&cfg.penalty), s.spread(), s))
            .collect();
        scored.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal))
        });
        scored.truncate(width);
        beam = scored.into_iter().map(|(_, _, s)| s).collect();
        if beam.is_empty() {
            break;
        }
    }

    let mut best: Option<(f64, PartitionPlan, &'static str)> = None;
    let mut consider = |plan: PartitionPlan, label: &'static str| -> Result<Option<f64>> {
        if let Some(cap) = cfg.mem_capacity_per_node {
            if memory_bytes(&plan, tables)?.iter().any(|&m| m > cap) {
                return Ok(None);
            }
        }
        let obj = plan_objective(&plan, stats, tables, &cfg.penalty)?;
        if best.as_ref().is_none_or(|(b, _, _)| obj < *b) {
            best = Some((obj, plan, label));
        }
        Ok(Some(obj))
    };
    if let Some(top) = beam.first() {
        consider(materialize(&costs, &top.choices, nodes), "beam")?;
    }
    let row_cyclic_objective = consider(row_cyclic.clone(), "row_cyclic")?;
    let table_greedy_objective = consider(table_partition(tables, nodes, stats)?, "table_greedy")?;

    match best {
        Some((objective, plan, source)) => Ok(HybridOutcome {
            plan,
            objective,
            row_cyclic_objective,
            table_greedy_objective,
            source: source.to_string(),
            states_explored: explored,
        }),
        None => {
            let cap = cfg.mem_capacity_per_node.unwrap_or(u64::MAX);
            Err(Error::Infeasible {
                required: tables.iter().map(EmbeddingTableSpec::footprint_bytes).sum(),
                capacity: cap.saturating_mul(nodes as u64),
                deficits: deficits(&memory_bytes(&row_cyclic, tables)?, cap),
            })
        }
    }
}

/// Hybrid plan for a model's tables under a memory cap and beam width.
pub fn hybrid_partition(
    model: &ModelSpec,
    nodes: u32,
    stats: &TrafficStats,
    mem_capacity_per_node: Option<u64>,
    search_budget: usize,
) -> Result<PartitionPlan> {
    let cfg = HybridConfig {
        mem_capacity_per_node,
        search_budget,
        ..HybridConfig::default()
    };
    Ok(search_hybrid(&model.tables, nodes, stats, &cfg)?.plan)
}
