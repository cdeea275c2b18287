use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::eval::{eval_transform, RawRecord};
use super::graph::{extract_components, ConnectedComponent, NodeId, TransformGraph};
use super::key::{canonical_key, CanonicalKey};
use crate::error::{Error, Result};

pub type ClientId = String;
pub type TaskId = u64;
pub const SNAPSHOT_VERSION: u32 = 1;

/// Half-open range of event ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventRange {
    pub start: u64,
    pub end: u64,
}

impl EventRange {
    pub fn new(start: u64, end: u64) -> Self {
        Self { start, end }
    }
}

/// Warehouse address of one memoized output: component key plus event range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId {
    pub key: CanonicalKey,
    pub range: EventRange,
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.key, self.range.start, self.range.end)
    }
}

impl FromStr for BlockId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad block id `{s}`"));
        let mut parts = s.split(':');
        let key = parts.next().and_then(CanonicalKey::from_hex).ok_or_else(bad)?;
        let start = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let end = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Self {
            key,
            range: EventRange { start, end },
        })
    }
}

impl Serialize for BlockId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Scheduled,
    Materializing,
    Ready,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CanonicalKey,
    pub location: BlockId,
    pub status: EntryStatus,
    pub last_requested: u64,
    pub producer_task: Option<TaskId>,
    pub consumers: BTreeSet<ClientId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadSlot {
    /// Graph output (model input) this slot serves.
    pub output: NodeId,
    pub key: CanonicalKey,
    pub location: BlockId,
    pub status: EntryStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReadSolution {
    pub slots: Vec<ReadSlot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoTask {
    pub id: TaskId,
    pub key: CanonicalKey,
    pub range: EventRange,
    pub client: ClientId,
    pub priority: i64,
    /// Global enqueue order.
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduling {
    /// Highest priority first across all clients, FIFO within a priority.
    #[default]
    StrictPriority,
    /// Clients take turns, each serving up to max(priority, 1) tasks.
    WeightedRoundRobin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "by", content = "value", rename_all = "snake_case")]
pub enum EvictPredicate {
    RawField(String),
    Pipeline(ClientId),
    Key(CanonicalKey),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigMetrics {
    pub hits: u64,
    pub misses: u64,
    pub hit_rate: f64,
    pub ready_blocks: usize,
    pub mean_consumers_per_ready_block: f64,
    pub peak_consumers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SigEvent {
    Hit {
        client: ClientId,
        block: BlockId,
    },
    Miss {
        client: ClientId,
        block: BlockId,
        task: TaskId,
    },
    Ready {
        task: TaskId,
        block: BlockId,
    },
    Failed {
        task: TaskId,
        block: BlockId,
        reason: String,
    },
    Evicted {
        block: BlockId,
    },
}

/// Supplies raw records for event ids.
pub trait RawSource {
    fn record(&self, event: u64) -> Result<RawRecord>;
}

impl<F: Fn(u64) -> Result<RawRecord>> RawSource for F {
    fn record(&self, event: u64) -> Result<RawRecord> {
        self(event)
    }
}

/// Output rows of one component over an event range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub rows: Vec<(u64, Vec<String>)>,
}

/// Block store, optionally mirrored to one JSON file per block.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Warehouse {
    pub blocks: BTreeMap<BlockId, Block>,
    #[serde(skip)]
    dir: Option<PathBuf>,
}

impl Warehouse {
    pub fn persistent(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            blocks: BTreeMap::new(),
            dir: Some(dir.to_path_buf()),
        })
    }

    fn file(&self, id: &BlockId) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(format!("{}.json", id.to_string().replace(':', "_"))))
    }

    pub fn put(&mut self, id: BlockId, block: Block) -> Result<()> {
        if let Some(path) = self.file(&id) {
            std::fs::write(path, serde_json::to_vec(&block)?)?;
        }
        self.blocks.insert(id, block);
        Ok(())
    }

    pub fn get(&self, id: &BlockId) -> Option<&Block> {
        self.blocks.get(id)
    }

    pub fn remove(&mut self, id: &BlockId) -> Result<()> {
        if let Some(path) = self.file(id) {
            if path.exists() {
                std::fs::remove_file(path)?;
            }
        }
        self.blocks.remove(id);
        Ok(())
    }
}

/// A task handed to a worker together with what it needs to run.
#[derive(Debug, Clone)]
pub struct Lease {
    pub task: MemoTask,
    pub component: ConnectedComponent,
}

impl Lease {
    pub fn block(&self) -> BlockId {
        BlockId {
            key: self.task.key,
            range: self.task.range,
        }
    }

    /// Evaluates the component for every event in the range.
    pub fn evaluate(&self, source: &dyn RawSource) -> Result<Block> {
        let rows = (self.task.range.start..self.task.range.end)
            .map(|e| Ok((e, eval_transform(&self.component, &source.record(e)?)?)))
            .collect::<Result<_>>()?;
        Ok(Block { rows })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SigService {
    pub version: u32,
    pub scheduling: Scheduling,
    pub client_priority: BTreeMap<ClientId, i64>,
    pub queues: BTreeMap<ClientId, Vec<MemoTask>>,
    pub entries: BTreeMap<BlockId, CacheEntry>,
    pub components: BTreeMap<CanonicalKey, ConnectedComponent>,
    /// Raw field → keys of components reading it.
    pub field_index: BTreeMap<String, BTreeSet<CanonicalKey>>,
    pub warehouse: Warehouse,
    pub hits: u64,
    pub misses: u64,
    /// Completed evaluations per component key.
    pub evaluations: BTreeMap<CanonicalKey, u64>,
    pub log: Vec<SigEvent>,
    next_task: TaskId,
    next_seq: u64,
    rr_cursor: usize,
    rr_served: u64,
}

impl SigService {
    pub fn new(scheduling: Scheduling) -> Self {
        Self {
            version: SNAPSHOT_VERSION,
            scheduling,
            ..Self::default()
        }
    }

    pub fn with_warehouse(mut self, warehouse: Warehouse) -> Self {
        self.warehouse = warehouse;
        self
    }

    pub fn set_client_priority(&mut self, client: &str, priority: i64) {
        self.client_priority.insert(client.to_string(), priority);
    }

    pub fn entry(&self, block: &BlockId) -> Option<&CacheEntry> {
        self.entries.get(block)
    }

    pub fn pending_tasks(&self) -> usize {
        self.queues.values().map(Vec::len).sum()
    }

    /// Matches every component of `graph` against the cache, scheduling
    /// work for misses. Insertion is unconditional.
    pub fn submit(
        &mut self,
        graph: &TransformGraph,
        client: &str,
        range: EventRange,
        now: u64,
    ) -> Result<ReadSolution> {
        if graph.mutable_data {
            return Err(Error::Unsupported(
                "graphs over mutable or late-arriving data cannot be memoized".into(),
            ));
        }
        if range.end < range.start {
            return Err(Error::InvalidArgument(format!(
                "event range {}..{} is reversed",
                range.start, range.end
            )));
        }
        let components = extract_components(graph)?;
        let priority = self.client_priority.get(client).copied().unwrap_or(0);
        let mut by_output: BTreeMap<NodeId, ReadSlot> = BTreeMap::new();
        for comp in components {
            let key = canonical_key(&comp);
            let output = comp.output;
            let block = BlockId { key, range };
            let hit = matches!(
                self.entries.get(&block).map(|e| e.status),
                Some(EntryStatus::Scheduled | EntryStatus::Materializing | EntryStatus::Ready)
            );
            if hit {
                let e = self.entries.get_mut(&block).expect("present");
                e.last_requested = e.last_requested.max(now);
                e.consumers.insert(client.to_string());
                self.hits += 1;
                self.log.push(SigEvent::Hit {
                    client: client.to_string(),
                    block,
                });
            } else {
                let task = self.next_task;
                self.next_task += 1;
                let seq = self.next_seq;
                self.next_seq += 1;
                for f in comp.graph.raw_reads() {
                    self.field_index.entry(f).or_default().insert(key);
                }
                self.components.entry(key).or_insert(comp);
                let consumers = self
                    .entries
                    .remove(&block)
                    .map(|e| e.consumers)
                    .unwrap_or_default()
                    .into_iter()
                    .chain([client.to_string()])
                    .collect();
                self.entries.insert(
                    block,
                    CacheEntry {
                        key,
                        location: block,
                        status: EntryStatus::Scheduled,
                        last_requested: now,
                        producer_task: Some(task),
                        consumers,
                        failure: None,
                    },
                );
                self.queues.entry(client.to_string()).or_default().push(MemoTask {
                    id: task,
                    key,
                    range,
                    client: client.to_string(),
                    priority,
                    seq,
                });
                self.misses += 1;
                self.log.push(SigEvent::Miss {
                    client: client.to_string(),
                    block,
                    task,
                });
            }
            let e = &self.entries[&block];
            by_output.insert(
                output,
                ReadSlot {
                    output,
                    key,
                    location: e.location,
                    status: e.status,
                },
            );
        }
        let slots = graph.outputs.iter().filter_map(|o| by_output.remove(o)).collect();
        Ok(ReadSolution { slots })
    }

    fn pop_strict(&mut self) -> Option<MemoTask> {
        let (client, idx) = self
            .queues
            .iter()
            .flat_map(|(c, q)| q.iter().enumerate().map(move |(i, t)| (c, i, t)))
            .min_by(|a, b| b.2.priority.cmp(&a.2.priority).then(a.2.seq.cmp(&b.2.seq)))
            .map(|(c, i, _)| (c.clone(), i))?;
        Some(self.take(&client, idx))
    }

    fn take(&mut self, client: &str, idx: usize) -> MemoTask {
        let q = self.queues.get_mut(client).expect("queue");
        let t = q.remove(idx);
        if q.is_empty() {
            self.queues.remove(client);
        }
        t
    }

    fn pop_weighted(&mut self) -> Option<MemoTask> {
        if self.queues.is_empty() {
            return None;
        }
        let clients: Vec<ClientId> = self.queues.keys().cloned().collect();
        let mut cursor = self.rr_cursor % clients.len();
        let client = &clients[cursor];
        let weight = self.client_priority.get(client).copied().unwrap_or(0).max(1) as u64;
        let q = &self.queues[client];
        let idx = (0..q.len())
            .min_by(|&a, &b| q[b].priority.cmp(&q[a].priority).then(q[a].seq.cmp(&q[b].seq)))
            .expect("non-empty queue");
        let client = client.clone();
        let task = self.take(&client, idx);
        self.rr_served += 1;
        let drained = !self.queues.contains_key(&client);
        if self.rr_served >= weight || drained {
            self.rr_served = 0;
            if !drained {
                cursor += 1;
            }
        }
        self.rr_cursor = cursor;
        Some(task)
    }

    fn next_task(&mut self) -> Option<MemoTask> {
        match self.scheduling {
            Scheduling::StrictPriority => self.pop_strict(),
            Scheduling::WeightedRoundRobin => self.pop_weighted(),
        }
    }

    /// Dequeues up to `budget` tasks and marks their entries materializing.
    pub fn lease(&mut self, budget: usize) -> Vec<Lease> {
        let mut out = Vec::new();
        while out.len() < budget {
            let Some(task) = self.next_task() else { break };
            let block = BlockId {
                key: task.key,
                range: task.range,
            };
            match self.entries.get_mut(&block) {
                Some(e) if e.producer_task == Some(task.id) => e.status = EntryStatus::Materializing,
                _ => continue, // evicted while queued
            }
            let component = self.components[&task.key].clone();
            out.push(Lease { task, component });
        }
        out
    }

    /// Records a worker's result. Results for entries evicted in the
    /// meantime are dropped.
    pub fn commit(&mut self, lease: &Lease, result: Result<Block>) -> Result<()> {
        let block = lease.block();
        let live = self
            .entries
            .get(&block)
            .is_some_and(|e| e.producer_task == Some(lease.task.id));
        if !live {
            return Ok(());
        }
        match result {
            Ok(data) => {
                self.warehouse.put(block, data)?;
                *self.evaluations.entry(block.key).or_default() += 1;
                let e = self.entries.get_mut(&block).expect("live");
                e.status = EntryStatus::Ready;
                e.failure = None;
                self.log.push(SigEvent::Ready {
                    task: lease.task.id,
                    block,
                });
            }
            Err(err) => {
                let e = self.entries.get_mut(&block).expect("live");
                e.status = EntryStatus::Failed;
                e.failure = Some(err.to_string());
                self.log.push(SigEvent::Failed {
                    task: lease.task.id,
                    block,
                    reason: err.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Single-worker poll loop: lease, evaluate and commit up to `budget`
    /// tasks. Returns the ids of every task that ran, failed or not.
    pub fn worker_poll_execute(&mut self, budget: usize, source: &dyn RawSource) -> Result<Vec<TaskId>> {
        let mut ran = Vec::new();
        for lease in self.lease(budget) {
            let result = lease.evaluate(source);
            self.commit(&lease, result)?;
            ran.push(lease.task.id);
        }
        Ok(ran)
    }

    /// Runs queued work until the queues are empty.
    pub fn drain(&mut self, source: &dyn RawSource) -> Result<Vec<TaskId>> {
        let mut ran = Vec::new();
        while self.pending_tasks() > 0 {
            ran.extend(self.worker_poll_execute(usize::MAX, source)?);
        }
        Ok(ran)
    }

    fn remove_blocks(&mut self, blocks: &[BlockId]) -> Result<()> {
        for b in blocks {
            self.entries.remove(b);
            self.warehouse.remove(b)?;
            for q in self.queues.values_mut() {
                q.retain(|t| !(t.key == b.key && t.range == b.range));
            }
            self.log.push(SigEvent::Evicted { block: *b });
        }
        self.queues.retain(|_, q| !q.is_empty());
        let live: BTreeSet<CanonicalKey> = self.entries.keys().map(|b| b.key).collect();
        self.components.retain(|k, _| live.contains(k));
        for keys in self.field_index.values_mut() {
            keys.retain(|k| live.contains(k));
        }
        self.field_index.retain(|_, keys| !keys.is_empty());
        Ok(())
    }

    /// Evicts entries not requested for more than `ttl`.
    pub fn evict_stale(&mut self, now: u64, ttl: u64) -> Result<Vec<BlockId>> {
        if ttl == 0 {
            return Err(Error::InvalidArgument("ttl must be > 0".into()));
        }
        let stale: Vec<BlockId> = self
            .entries
            .iter()
            .filter(|(_, e)| now.saturating_sub(e.last_requested) > ttl)
            .map(|(b, _)| *b)
            .collect();
        self.remove_blocks(&stale)?;
        Ok(stale)
    }

    /// Evicts every entry matching the predicate.
    pub fn evict_query(&mut self, predicate: &EvictPredicate) -> Result<Vec<BlockId>> {
        let matched: Vec<BlockId> = match predicate {
            EvictPredicate::RawField(field) => {
                let keys = self.field_index.get(field).cloned().unwrap_or_default();
                self.entries.keys().filter(|b| keys.contains(&b.key)).copied().collect()
            }
            EvictPredicate::Pipeline(client) => self
                .entries
                .iter()
                .filter(|(_, e)| e.consumers.contains(client))
                .map(|(b, _)| *b)
                .collect(),
            EvictPredicate::Key(key) => self.entries.keys().filter(|b| b.key == *key).copied().collect(),
        };
        self.remove_blocks(&matched)?;
        Ok(matched)
    }

    pub fn metrics(&self) -> SigMetrics {
        let ready: Vec<usize> = self
            .entries
            .values()
            .filter(|e| e.status == EntryStatus::Ready)
            .map(|e| e.consumers.len())
            .collect();
        let total = self.hits + self.misses;
        SigMetrics {
            hits: self.hits,
            misses: self.misses,
            hit_rate: if total == 0 {
                0.0
            } else {
                self.hits as f64 / total as f64
            },
            ready_blocks: ready.len(),
            mean_consumers_per_ready_block: if ready.is_empty() {
                0.0
            } else {
                ready.iter().sum::<usize>() as f64 / ready.len() as f64
            },
            peak_consumers: ready.iter().copied().max().unwrap_or(0),
        }
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<Self> {
        let s: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if s.version != SNAPSHOT_VERSION {
            return Err(Error::Unsupported(format!(
                "SIG snapshot version {} (expected {SNAPSHOT_VERSION})",
                s.version
            )));
        }
        Ok(s)
    }
}

/// Service handle shared by concurrent submitters and workers. All state
/// changes go through one mutex; evaluation runs outside it.
#[derive(Debug, Clone, Default)]
pub struct SharedSig {
    inner: Arc<Mutex<SigService>>,
}

impl SharedSig {
    pub fn new(service: SigService) -> Self {
        Self {
            inner: Arc::new(Mutex::new(service)),
        }
    }

    pub fn with<T>(&self, f: impl FnOnce(&mut SigService) -> T) -> T {
        f(&mut self.inner.lock().expect("sig lock poisoned"))
    }

    /// Runs `workers` threads that lease one task at a time until the
    /// queues are empty. Returns the number of tasks run.
    pub fn run_workers(&self, workers: usize, source: &(dyn RawSource + Sync)) -> Result<usize> {
        let results: Vec<Result<usize>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers.max(1))
                .map(|_| {
                    scope.spawn(|| -> Result<usize> {
                        let mut ran = 0;
                        loop {
                            let Some(lease) = self.with(|s| s.lease(1).pop()) else {
                                return Ok(ran);
                            };
                            let result = lease.evaluate(source);
                            self.with(|s| s.commit(&lease, result))?;
                            ran += 1;
                        }
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        results.into_iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sig::graph::Node;

    fn chain(field: &str, base: NodeId) -> Vec<Node> {
        vec![Node::read(base, field), Node::op(base + 1, "unigrams", &[base])]
    }

    fn graph(fields: &[&str]) -> TransformGraph {
        let mut nodes = Vec::new();
        let mut outputs = Vec::new();
        for (i, f) in fields.iter().enumerate() {
            let base = 10 * i as NodeId;
            nodes.extend(chain(f, base));
            outputs.push(base + 1);
        }
        TransformGraph::new(nodes, outputs)
    }

    fn source(e: u64) -> Result<RawRecord> {
        Ok(["a", "b", "query_text"]
            .iter()
            .map(|f| (f.to_string(), format!("{f} x{e} y")))
            .collect())
    }

    const R: EventRange = EventRange { start: 0, end: 4 };

    #[test]
    fn resubmit_is_all_hits() {
        let mut s = SigService::new(Scheduling::StrictPriority);
        let first = s.submit(&graph(&["a", "b"]), "m1", R, 1).unwrap();
        assert_eq!(first.slots.len(), 2);
        assert!(first.slots.iter().all(|sl| sl.status == EntryStatus::Scheduled));
        let pending = s.pending_tasks();
        s.submit(&graph(&["a", "b"]), "m1", R, 2).unwrap();
        assert_eq!(s.pending_tasks(), pending);
        assert_eq!((s.hits, s.misses), (2, 2));
    }

    #[test]
    fn shared_component_gives_three_entries() {
        let mut s = SigService::new(Scheduling::StrictPriority);
        s.submit(&graph(&["a", "b"]), "m1", R, 0).unwrap();
        s.submit(&graph(&["b", "query_text"]), "m2", R, 0).unwrap();
        assert_eq!(s.entries.len(), 3);
    }

    #[test]
    fn empty_graph_and_zero_budget() {
        let mut s = SigService::new(Scheduling::StrictPriority);
        assert!(s
            .submit(&TransformGraph::default(), "m", R, 0)
            .unwrap()
            .slots
            .is_empty());
        s.submit(&graph(&["a"]), "m", R, 0).unwrap();
        let before = s.clone();
        assert!(s.worker_poll_execute(0, &source).unwrap().is_empty());
        assert_eq!(s, before);
    }

    #[test]
    fn worker_makes_entry_ready() {
        let mut s = SigService::new(Scheduling::StrictPriority);
        let sol = s.submit(&graph(&["a"]), "m", R, 0).unwrap();
        assert_eq!(s.worker_poll_execute(5, &source).unwrap().len(), 1);
        let loc = sol.slots[0].location;
        assert_eq!(s.entry(&loc).unwrap().status, EntryStatus::Ready);
        assert_eq!(s.warehouse.get(&loc).unwrap().rows.len(), 4);
    }

    #[test]
    fn failure_leaves_entry_failed_then_resubmit_reschedules() {
        let mut s = SigService::new(Scheduling::StrictPriority);
        let sol = s.submit(&graph(&["missing"]), "m", R, 0).unwrap();
        s.drain(&source).unwrap();
        let e = s.entry(&sol.slots[0].location).unwrap();
        assert_eq!(e.status, EntryStatus::Failed);
        assert!(e.failure.as_deref().unwrap().contains("missing"));
        s.submit(&graph(&["missing"]), "m", R, 1).unwrap();
        assert_eq!(s.misses, 2);
        assert_eq!(s.pending_tasks(), 1);
    }

    #[test]
    fn stale_entries_evicted_and_then_missed() {
        let mut s = SigService::new(Scheduling::StrictPriority);
        s.submit(&graph(&["a"]), "m", R, 0).unwrap();
        s.submit(&graph(&["b"]), "m", R, 50).unwrap();
        s.drain(&source).unwrap();
        let gone = s.evict_stale(60, 30).unwrap();
        assert_eq!(gone.len(), 1);
        assert!(s.warehouse.get(&gone[0]).is_none());
        s.submit(&graph(&["a"]), "m", R, 61).unwrap();
        assert_eq!(s.misses, 3);
        assert!(s.evict_stale(0, 0).is_err());
    }

    #[test]
    fn mutable_data_rejected() {
        let mut g = graph(&["a"]);
        g.mutable_data = true;
        let mut s = SigService::new(Scheduling::StrictPriority);
        assert!(matches!(s.submit(&g, "m", R, 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn eviction_while_queued_drops_task() {
        let mut s = SigService::new(Scheduling::StrictPriority);
        s.submit(&graph(&["query_text"]), "m", R, 0).unwrap();
        let gone = s.evict_query(&EvictPredicate::RawField("query_text".into())).unwrap();
        assert_eq!(gone.len(), 1);
        assert_eq!(s.pending_tasks(), 0);
        assert!(s
            .evict_query(&EvictPredicate::RawField("nothing".into()))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn weighted_round_robin_interleaves() {
        let mut s = SigService::new(Scheduling::WeightedRoundRobin);
        s.set_client_priority("hi", 2);
        s.set_client_priority("lo", 1);
        for i in 0..4 {
            s.submit(&graph(&[&format!("h{i}")]), "hi", R, 0).unwrap();
            s.submit(&graph(&[&format!("l{i}")]), "lo", R, 0).unwrap();
        }
        let order: Vec<String> = s.lease(6).into_iter().map(|l| l.task.client).collect();
        assert_eq!(order, ["hi", "hi", "lo", "hi", "hi", "lo"]);
    }

    #[test]
    fn block_id_string_round_trip() {
        let mut s = SigService::new(Scheduling::StrictPriority);
        let sol = s.submit(&graph(&["a"]), "m", EventRange::new(3, 9), 0).unwrap();
        let id = sol.slots[0].location;
        assert_eq!(id.to_string().parse::<BlockId>().unwrap(), id);
        assert!("zz:1:2".parse::<BlockId>().is_err());
    }
}
