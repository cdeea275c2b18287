//! Synthetic SIG workloads: a pool of components shared across models,
//! replayed over several rounds.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::eval::RawRecord;
use super::graph::{Node, TransformGraph};
use super::key::CanonicalKey;
use super::service::{EventRange, RawSource, Scheduling, SigMetrics, SigService};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, mix64, rng_from_seed};

const WORDS: [&str; 16] = [
    "red", "shoe", "store", "sale", "blue", "Hat", "cheap", "fast", "Shoe", "sport", "run", "new", "gift", "card",
    "home", "deal",
];

/// Deterministic raw records: every field of every event holds two to five
/// words picked by hashing (seed, event, field).
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    pub fields: Vec<String>,
    pub seed: u64,
}

impl RawSource for SyntheticSource {
    fn record(&self, event: u64) -> Result<RawRecord> {
        Ok(self
            .fields
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut h = mix64(self.seed ^ mix64(event ^ mix64(i as u64)));
                let n = 2 + (h % 4) as usize;
                let words: Vec<&str> = (0..n)
                    .map(|_| {
                        h = mix64(h);
                        WORDS[(h % WORDS.len() as u64) as usize]
                    })
                    .collect();
                (f.clone(), words.join(" "))
            })
            .collect())
    }
}

/// Raw fields read by pool component `i`.
pub fn component_fields(i: usize) -> [String; 3] {
    [format!("c{i}_title"), format!("c{i}_query"), format!("c{i}_tag")]
}

/// Nodes of pool component `i` with ids starting at `base`:
/// `concat(intersect(unigrams(lowercase(read a)), unigrams(read b)), read c)`.
/// Returns the nodes and the output id.
pub fn component_nodes(i: usize, base: u32) -> (Vec<Node>, u32) {
    let [a, b, c] = component_fields(i);
    let nodes = vec![
        Node::read(base, &a),
        Node::op(base + 1, "lowercase", &[base]),
        Node::op(base + 2, "unigrams", &[base + 1]),
        Node::read(base + 3, &b),
        Node::op(base + 4, "unigrams", &[base + 3]),
        Node::op(base + 5, "intersect", &[base + 2, base + 4]),
        Node::read(base + 6, &c),
        Node::op(base + 7, "concat", &[base + 5, base + 6]),
    ];
    (nodes, base + 7)
}

/// One model's graph over the listed pool components. `id_offset` shifts
/// node numbering so different models use different ids for the same
/// structure.
pub fn model_graph(components: &[usize], id_offset: u32) -> TransformGraph {
    let mut nodes = Vec::new();
    let mut outputs = Vec::new();
    for (slot, &c) in components.iter().enumerate() {
        let (n, out) = component_nodes(c, id_offset + slot as u32 * 8);
        nodes.extend(n);
        outputs.push(out);
    }
    TransformGraph::new(nodes, outputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    pub models: usize,
    pub pool_size: usize,
    pub components_per_model: usize,
    pub rounds: usize,
    pub events_per_range: u64,
    pub scheduling: Scheduling,
    pub seed: u64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            models: 22,
            pool_size: 20,
            components_per_model: 20,
            rounds: 3,
            events_per_range: 16,
            scheduling: Scheduling::StrictPriority,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub metrics: SigMetrics,
    /// Hit rate over every round after the first.
    pub warm_hit_rate: Option<f64>,
    pub evaluations: BTreeMap<CanonicalKey, u64>,
    pub max_evaluations_per_component: u64,
    /// Evaluations independent per-model pipelines would have run.
    pub lig_evaluations: u64,
    pub model_components: Vec<Vec<usize>>,
}

/// Submits every model's graph each round for the same event range, then
/// drains the queues with a single worker.
pub fn replay_into(service: &mut SigService, cfg: &ReplayConfig) -> Result<ReplayReport> {
    if cfg.components_per_model > cfg.pool_size || cfg.models == 0 {
        return Err(Error::InvalidArgument(format!(
            "replay needs models >= 1 and components_per_model ({}) <= pool_size ({})",
            cfg.components_per_model, cfg.pool_size
        )));
    }
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 1));
    let model_components: Vec<Vec<usize>> = (0..cfg.models)
        .map(|_| {
            let mut picked = sample(&mut rng, cfg.pool_size, cfg.components_per_model).into_vec();
            picked.sort_unstable();
            picked
        })
        .collect();
    let source = SyntheticSource {
        fields: (0..cfg.pool_size).flat_map(component_fields).collect(),
        seed: cfg.seed,
    };
    let range = EventRange::new(0, cfg.events_per_range);
    let (mut first_hits, mut first_total) = (0, 0);
    for round in 0..cfg.rounds {
        let before = (service.hits, service.misses);
        for (m, comps) in model_components.iter().enumerate() {
            let graph = model_graph(comps, 1 + m as u32 * 1000);
            let now = (round * cfg.models + m) as u64;
            service.submit(&graph, &format!("model{m:02}"), range, now)?;
        }
        service.drain(&source)?;
        if round == 0 {
            first_hits = service.hits - before.0;
            first_total = first_hits + service.misses - before.1;
        }
    }
    let metrics = service.metrics();
    let total = metrics.hits + metrics.misses;
    let warm_total = total - first_total;
    let warm_hit_rate = (warm_total > 0).then(|| (metrics.hits - first_hits) as f64 / warm_total as f64);
    Ok(ReplayReport {
        max_evaluations_per_component: service.evaluations.values().copied().max().unwrap_or(0),
        evaluations: service.evaluations.clone(),
        lig_evaluations: (cfg.models * cfg.components_per_model * cfg.rounds) as u64,
        metrics,
        warm_hit_rate,
        model_components,
    })
}

pub fn replay(cfg: &ReplayConfig) -> Result<(SigService, ReplayReport)> {
    let mut service = SigService::new(cfg.scheduling);
    let report = replay_into(&mut service, cfg)?;
    Ok((service, report))
}
