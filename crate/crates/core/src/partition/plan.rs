use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::mix64;
use crate::workload::EmbeddingTableSpec;

/// Seed of the fixed row hash used by `random_hash` distribution.
pub const ROW_HASH_SEED: u64 = 0x005E_ED0F_2A17;

/// Tables above this vocabulary are not enumerated cell by cell when the
/// interval/class algebra cannot decide coverage.
const ENUMERATION_LIMIT: u64 = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowScheme {
    /// Contiguous row ranges; the hottest rows of a sorted vocabulary land
    /// on the first node.
    Block,
    /// Row `r` goes to node `r mod N`.
    Cyclic,
    /// Row `r` goes to node `mix64(r ^ ROW_HASH_SEED) mod N`.
    RandomHash,
}

/// Rows owned by a shard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowSet {
    All,
    Block { start: u64, end: u64 },
    Cyclic { offset: u64, stride: u64 },
    Hash { bucket: u64, buckets: u64, seed: u64 },
}

pub fn hash_bucket(row: u64, buckets: u64, seed: u64) -> u64 {
    mix64(row ^ seed) % buckets
}

impl RowSet {
    pub fn contains(&self, row: u64) -> bool {
        match *self {
            RowSet::All => true,
            RowSet::Block { start, end } => (start..end).contains(&row),
            RowSet::Cyclic { offset, stride } => row >= offset && (row - offset).is_multiple_of(stride),
            RowSet::Hash { bucket, buckets, seed } => hash_bucket(row, buckets, seed) == bucket,
        }
    }

    /// Rows of a `vocab`-row table owned by this set, ascending.
    pub fn rows(&self, vocab: u64) -> Box<dyn Iterator<Item = u64> + '_> {
        match *self {
            RowSet::All => Box::new(0..vocab),
            RowSet::Block { start, end } => Box::new(start.min(vocab)..end.min(vocab)),
            RowSet::Cyclic { offset, stride } => Box::new((offset..vocab).step_by(stride.max(1) as usize)),
            RowSet::Hash { .. } => Box::new((0..vocab).filter(move |&r| self.contains(r))),
        }
    }

    pub fn count(&self, vocab: u64) -> u64 {
        match *self {
            RowSet::All => vocab,
            RowSet::Block { start, end } => end.min(vocab).saturating_sub(start.min(vocab)),
            RowSet::Cyclic { offset, stride } => {
                if offset >= vocab {
                    0
                } else {
                    (vocab - 1 - offset) / stride + 1
                }
            }
            RowSet::Hash { .. } => self.rows(vocab).count() as u64,
        }
    }

    /// The row class that `scheme` assigns to node `node` of `nodes`.
    pub fn for_scheme(scheme: RowScheme, node: u32, nodes: u32, vocab: u64) -> RowSet {
        let (node, nodes) = (node as u64, nodes as u64);
        match scheme {
            RowScheme::Block => {
                let (q, r) = (vocab / nodes, vocab % nodes);
                let start = node * q + node.min(r);
                let len = q + u64::from(node < r);
                RowSet::Block {
                    start,
                    end: start + len,
                }
            }
            RowScheme::Cyclic => RowSet::Cyclic {
                offset: node,
                stride: nodes,
            },
            RowScheme::RandomHash => RowSet::Hash {
                bucket: node,
                buckets: nodes,
                seed: ROW_HASH_SEED,
            },
        }
    }
}

/// Node that `scheme` assigns `row` to.
pub fn scheme_node(scheme: RowScheme, row: u64, nodes: u32, vocab: u64) -> u32 {
    let n = nodes as u64;
    match scheme {
        RowScheme::Block => {
            let (q, r) = (vocab / n, vocab % n);
            // the first r nodes hold q + 1 rows each
            let big = r * (q + 1);
            if row < big {
                (row / (q + 1)) as u32
            } else {
                (r + (row - big) / q.max(1)) as u32
            }
        }
        RowScheme::Cyclic => (row % n) as u32,
        RowScheme::RandomHash => hash_bucket(row, n, ROW_HASH_SEED) as u32,
    }
}

/// Half-open column range `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ColRange {
    pub lo: u32,
    pub hi: u32,
}

impl ColRange {
    pub fn full(dim: u32) -> Self {
        Self { lo: 0, hi: dim }
    }

    pub fn width(&self) -> u32 {
        self.hi - self.lo
    }
}

/// Splits `[0, dim)` into `shards` ranges whose widths differ by at most one,
/// wider ranges first.
pub fn column_ranges(dim: u32, shards: u32) -> Vec<ColRange> {
    let (q, r) = (dim / shards, dim % shards);
    let mut lo = 0;
    (0..shards)
        .map(|j| {
            let hi = lo + q + u32::from(j < r);
            let range = ColRange { lo, hi };
            lo = hi;
            range
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ShardSpec {
    pub table: String,
    pub rows: RowSet,
    pub cols: ColRange,
    pub node: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub node_count: u32,
    pub shards: Vec<ShardSpec>,
    /// Row distribution of each row-partitioned table.
    #[serde(default)]
    pub distribution: BTreeMap<String, RowScheme>,
}

pub(crate) fn spec_index(specs: &[EmbeddingTableSpec]) -> BTreeMap<&str, &EmbeddingTableSpec> {
    specs.iter().map(|s| (s.name.as_str(), s)).collect()
}

impl PartitionPlan {
    pub fn new(node_count: u32) -> Self {
        Self {
            node_count,
            shards: Vec::new(),
            distribution: BTreeMap::new(),
        }
    }

    /// Concatenates plans over the same node set.
    pub fn merge(mut self, other: PartitionPlan) -> Result<Self> {
        if self.node_count != other.node_count {
            return Err(Error::InvalidArgument(format!(
                "cannot merge plans over {} and {} nodes",
                self.node_count, other.node_count
            )));
        }
        self.shards.extend(other.shards);
        self.distribution.extend(other.distribution);
        Ok(self)
    }

    pub fn tables(&self) -> BTreeSet<&str> {
        self.shards.iter().map(|s| s.table.as_str()).collect()
    }

    /// Narrowest column range among shards that split their table's width.
    pub fn min_split_width(&self, specs: &[EmbeddingTableSpec]) -> Option<u32> {
        let index = spec_index(specs);
        self.shards
            .iter()
            .filter(|s| index.get(s.table.as_str()).is_some_and(|t| s.cols.width() < t.dim))
            .map(|s| s.cols.width())
            .min()
    }

    /// Checks node bounds, column bounds, the row-wise optimizer constraint
    /// and exact single coverage of every cell.
    pub fn validate(&self, specs: &[EmbeddingTableSpec]) -> Result<()> {
        if self.node_count == 0 {
            return Err(Error::InvalidArgument("node_count must be >= 1".into()));
        }
        let index = spec_index(specs);
        let mut by_table: BTreeMap<&str, Vec<&ShardSpec>> = BTreeMap::new();
        for shard in &self.shards {
            let spec = index
                .get(shard.table.as_str())
                .ok_or_else(|| Error::NotFound(format!("table `{}`", shard.table)))?;
            if shard.node.0 >= self.node_count {
                return Err(Error::InvalidArgument(format!(
                    "shard of `{}` on node {} but plan has {} nodes",
                    shard.table, shard.node.0, self.node_count
                )));
            }
            if shard.cols.lo >= shard.cols.hi || shard.cols.hi > spec.dim {
                return Err(Error::InvalidArgument(format!(
                    "shard of `{}` has column range [{}, {}) outside [0, {})",
                    shard.table, shard.cols.lo, shard.cols.hi, spec.dim
                )));
            }
            if let RowSet::Cyclic { stride: 0, .. } | RowSet::Hash { buckets: 0, .. } = shard.rows {
                return Err(Error::InvalidArgument(format!(
                    "shard of `{}` has a zero stride or bucket count",
                    shard.table
                )));
            }
            by_table.entry(shard.table.as_str()).or_default().push(shard);
        }
        for spec in specs {
            let shards = by_table.get(spec.name.as_str()).cloned().unwrap_or_default();
            if shards.is_empty() {
                // Tables absent from the plan are not placed; only referenced
                // tables must be covered.
                continue;
            }
            if !spec.optimizer.allows_column_split() && shards.iter().any(|s| s.cols != ColRange::full(spec.dim)) {
                return Err(Error::ConstraintViolation(format!(
                    "table `{}` uses a row-wise optimizer and cannot be column partitioned",
                    spec.name
                )));
            }
            check_table_coverage(spec, &shards)?;
        }
        Ok(())
    }

    /// Like [`validate`](Self::validate) but also requires every table in
    /// `specs` to be placed.
    pub fn validate_complete(&self, specs: &[EmbeddingTableSpec]) -> Result<()> {
        self.validate(specs)?;
        let placed = self.tables();
        for spec in specs {
            if !placed.contains(spec.name.as_str()) {
                return Err(Error::ConstraintViolation(format!(
                    "table `{}` is not placed",
                    spec.name
                )));
            }
        }
        Ok(())
    }
}

fn check_table_coverage(spec: &EmbeddingTableSpec, shards: &[&ShardSpec]) -> Result<()> {
    let mut cuts: BTreeSet<u32> = [0, spec.dim].into_iter().collect();
    for s in shards {
        cuts.insert(s.cols.lo);
        cuts.insert(s.cols.hi);
    }
    let cuts: Vec<u32> = cuts.into_iter().collect();
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let sets: Vec<RowSet> = shards
            .iter()
            .filter(|s| s.cols.lo <= lo && hi <= s.cols.hi)
            .map(|s| s.rows)
            .collect();
        if !rows_partitioned(&sets, spec.vocab_size)? {
            return Err(Error::ConstraintViolation(format!(
                "table `{}` columns [{lo}, {hi}) are not covered exactly once",
                spec.name
            )));
        }
    }
    Ok(())
}

/// Whether `sets` partition `[0, vocab)`: decided algebraically for uniform
/// descriptor kinds and by enumeration otherwise.
fn rows_partitioned(sets: &[RowSet], vocab: u64) -> Result<bool> {
    if sets.is_empty() {
        return Ok(false);
    }
    let all_block = sets.iter().all(|s| matches!(s, RowSet::Block { .. }));
    let all_cyclic = sets.iter().all(|s| matches!(s, RowSet::Cyclic { .. }));
    let all_hash = sets.iter().all(|s| matches!(s, RowSet::Hash { .. }));
    if sets.len() == 1 && sets[0] == RowSet::All {
        return Ok(true);
    }
    if all_block {
        let mut ranges: Vec<(u64, u64)> = sets
            .iter()
            .filter_map(|s| match *s {
                RowSet::Block { start, end } if start.min(vocab) < end.min(vocab) => Some((start, end.min(vocab))),
                _ => None,
            })
            .collect();
        ranges.sort_unstable();
        let mut next = 0;
        for (start, end) in ranges {
            if start != next {
                return Ok(false);
            }
            next = end;
        }
        return Ok(next == vocab);
    }
    if all_cyclic {
        let mut stride = None;
        let mut offsets = BTreeSet::new();
        for s in sets {
            let RowSet::Cyclic { offset, stride: st } = *s else {
                unreachable!()
            };
            if *stride.get_or_insert(st) != st || offset >= st {
                return enumerate_partition(sets, vocab);
            }
            if offset < vocab && !offsets.insert(offset) {
                return Ok(false);
            }
        }
        let stride = stride.unwrap_or(1);
        return Ok(offsets.len() as u64 == stride.min(vocab));
    }
    if all_hash {
        let mut shape = None;
        let mut buckets_seen = BTreeSet::new();
        for s in sets {
            let RowSet::Hash { bucket, buckets, seed } = *s else {
                unreachable!()
            };
            if *shape.get_or_insert((buckets, seed)) != (buckets, seed) || bucket >= buckets {
                return enumerate_partition(sets, vocab);
            }
            if !buckets_seen.insert(bucket) {
                return Ok(false);
            }
        }
        let (buckets, _) = shape.expect("non-empty");
        if buckets_seen.len() as u64 == buckets {
            return Ok(true);
        }
        // Missing buckets are fine only if they own no rows.
        return enumerate_partition(sets, vocab);
    }
    enumerate_partition(sets, vocab)
}

fn enumerate_partition(sets: &[RowSet], vocab: u64) -> Result<bool> {
    if vocab > ENUMERATION_LIMIT {
        return Err(Error::Unsupported(format!(
            "cannot verify coverage of mixed row descriptors over {vocab} rows"
        )));
    }
    Ok((0..vocab).all(|r| sets.iter().filter(|s| s.contains(r)).count() == 1))
}

/// Per-node memory: rows × cols × bytes per element × optimizer slots.
pub fn memory_bytes(plan: &PartitionPlan, specs: &[EmbeddingTableSpec]) -> Result<Vec<u64>> {
    let index = spec_index(specs);
    let mut per_node = vec![0u64; plan.node_count as usize];
    for shard in &plan.shards {
        let spec = index
            .get(shard.table.as_str())
            .ok_or_else(|| Error::NotFound(format!("table `{}`", shard.table)))?;
        let bytes = shard.rows.count(spec.vocab_size)
            * shard.cols.width() as u64
            * spec.bytes_per_element as u64
            * spec.optimizer.params_width_multiplier as u64;
        per_node[shard.node.0 as usize] += bytes;
    }
    Ok(per_node)
}
