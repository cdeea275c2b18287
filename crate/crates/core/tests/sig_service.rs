use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use trainsim::error::{Error, Result};
use trainsim::rng::{rng_from_seed, SimRng};
use trainsim::sig::workload::{component_fields, model_graph, replay, replay_into, ReplayConfig, SyntheticSource};
use trainsim::sig::{
    canonical_key, eval_transform, extract_components, BlockId, EntryStatus, EventRange, EvictPredicate, Node, NodeId,
    RawRecord, RawSource, Scheduling, SharedSig, SigEvent, SigService, TransformGraph, SNAPSHOT_VERSION,
};

const FIELDS: [&str; 6] = ["f0", "f1", "f2", "f3", "f4", "f5"];
const VOCAB: [&str; 8] = ["Red", "red", "shoe", "SHOE", "store", "sale", "a", "b"];

/// Random forest of trees over `read` leaves. Every node feeds at most one
/// consumer, so each tree has a single root, which becomes an output. Node
/// ids are randomly permuted.
fn random_forest(rng: &mut SimRng, steps: usize) -> TransformGraph {
    let mut nodes: Vec<Node> = Vec::new();
    let mut roots: Vec<NodeId> = Vec::new();
    for _ in 0..steps {
        let id = nodes.len() as NodeId;
        let choice = rng.random_range(0..10);
        if roots.is_empty() || choice < 3 {
            nodes.push(Node::read(id, FIELDS[rng.random_range(0..FIELDS.len())]));
        } else if roots.len() < 2 || choice < 6 {
            let x = roots.swap_remove(rng.random_range(0..roots.len()));
            let op = ["lowercase", "unigrams"][rng.random_range(0..2)];
            nodes.push(Node::op(id, op, &[x]));
        } else {
            let x = roots.swap_remove(rng.random_range(0..roots.len()));
            let y = roots.swap_remove(rng.random_range(0..roots.len()));
            let op = ["intersect", "set_intersect", "concat"][rng.random_range(0..3)];
            nodes.push(Node::op(id, op, &[x, y]));
        }
        roots.push(id);
    }
    let mut perm: Vec<NodeId> = (0..nodes.len() as NodeId).map(|i| i * 3 + 100).collect();
    perm.shuffle(rng);
    for n in &mut nodes {
        n.id = perm[n.id as usize];
        for i in &mut n.inputs {
            *i = perm[*i as usize];
        }
    }
    nodes.shuffle(rng);
    let outputs = roots.iter().map(|r| perm[*r as usize]).collect();
    TransformGraph::new(nodes, outputs)
}

fn random_record(rng: &mut SimRng) -> RawRecord {
    FIELDS
        .iter()
        .map(|f| {
            let n = rng.random_range(0..6);
            let words: Vec<&str> = (0..n).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect();
            (f.to_string(), words.join(" "))
        })
        .collect()
}

/// Components by breadth-first search over undirected edges.
fn bfs_components(g: &TransformGraph) -> BTreeSet<BTreeSet<NodeId>> {
    let mut adj: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for n in &g.nodes {
        adj.entry(n.id).or_default();
        for &i in &n.inputs {
            adj.entry(n.id).or_default().push(i);
            adj.entry(i).or_default().push(n.id);
        }
    }
    let mut seen = HashSet::new();
    let mut out = BTreeSet::new();
    for n in &g.nodes {
        if !seen.insert(n.id) {
            continue;
        }
        let mut comp = BTreeSet::from([n.id]);
        let mut stack = vec![n.id];
        while let Some(x) = stack.pop() {
            for &y in &adj[&x] {
                if seen.insert(y) {
                    comp.insert(y);
                    stack.push(y);
                }
            }
        }
        out.insert(comp);
    }
    out
}

fn reference_eval(g: &TransformGraph, id: NodeId, record: &RawRecord) -> Vec<String> {
    let node = g.nodes.iter().find(|n| n.id == id).unwrap();
    let arg = |k: usize| reference_eval(g, node.inputs[k], record);
    match node.op.as_str() {
        "read" => record[&node.params["field"]]
            .split_whitespace()
            .map(String::from)
            .collect(),
        "lowercase" => arg(0).into_iter().map(|t| t.to_lowercase()).collect(),
        "unigrams" => {
            let mut out: Vec<String> = Vec::new();
            for t in arg(0) {
                if !out.contains(&t) {
                    out.push(t);
                }
            }
            out
        }
        "intersect" => {
            let (x, y) = (arg(0), arg(1));
            let mut out: Vec<String> = Vec::new();
            for t in x {
                if y.contains(&t) && !out.contains(&t) {
                    out.push(t);
                }
            }
            out
        }
        "set_intersect" => {
            let y = arg(1);
            let mut out: Vec<String> = arg(0).into_iter().filter(|t| y.contains(t)).collect();
            out.sort();
            out.dedup();
            out
        }
        "concat" => [arg(0), arg(1)].concat(),
        other => panic!("unexpected op {other}"),
    }
}

#[test]
fn components_match_bfs_oracle() {
    let mut rng = rng_from_seed(1);
    for _ in 0..300 {
        let steps = rng.random_range(0..40);
        let g = random_forest(&mut rng, steps);
        let comps = extract_components(&g).unwrap();
        let got: BTreeSet<BTreeSet<NodeId>> = comps
            .iter()
            .map(|c| c.graph.nodes.iter().map(|n| n.id).collect())
            .collect();
        assert_eq!(got, bfs_components(&g));
        assert_eq!(comps.len(), g.outputs.len());
        let first_fields: Vec<String> = comps
            .iter()
            .map(|c| c.graph.raw_reads().into_iter().next().unwrap())
            .collect();
        assert!(first_fields.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn extraction_order_is_deterministic() {
    let mut rng = rng_from_seed(2);
    let g = random_forest(&mut rng, 30);
    let mut shuffled = g.clone();
    shuffled.nodes.reverse();
    shuffled.outputs.reverse();
    let keys = |g: &TransformGraph| -> Vec<_> { extract_components(g).unwrap().iter().map(canonical_key).collect() };
    assert_eq!(keys(&g), keys(&shuffled));
}

#[test]
fn raw_field_mutations_never_collide() {
    let base = extract_components(&model_graph(&[0], 1)).unwrap().remove(0);
    let base_key = canonical_key(&base);
    let reads: Vec<usize> = (0..base.graph.nodes.len())
        .filter(|&i| base.graph.nodes[i].op == "read")
        .collect();
    let mut rng = rng_from_seed(3);
    let mut variants: HashSet<(usize, String)> = HashSet::new();
    let mut keys = HashSet::new();
    while variants.len() < 10_000 {
        let slot = reads[rng.random_range(0..reads.len())];
        let len = rng.random_range(1..12);
        let name: String = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
        if base.graph.nodes[slot].field() == Some(name.as_str()) || !variants.insert((slot, name.clone())) {
            continue;
        }
        let mut mutated = base.clone();
        mutated.graph.nodes[slot].params.insert("field".into(), name);
        let key = canonical_key(&mutated);
        assert_ne!(key, base_key);
        assert!(keys.insert(key), "collision after {} mutations", variants.len());
    }
}

#[test]
fn eval_matches_reference_interpreter() {
    let mut rng = rng_from_seed(4);
    for _ in 0..300 {
        let steps = rng.random_range(1..30);
        let g = random_forest(&mut rng, steps);
        let record = random_record(&mut rng);
        for c in extract_components(&g).unwrap() {
            assert_eq!(
                eval_transform(&c, &record).unwrap(),
                reference_eval(&g, c.output, &record)
            );
        }
    }
}

fn single(field: &str, base: NodeId) -> TransformGraph {
    TransformGraph::new(
        vec![Node::read(base, field), Node::op(base + 1, "unigrams", &[base])],
        vec![base + 1],
    )
}

fn word_source(e: u64) -> Result<RawRecord> {
    Ok((0..64)
        .map(|i| (format!("t{i}"), format!("w{} w{}", e % 3, i % 5)))
        .collect())
}

#[test]
fn strict_priority_matches_heap_oracle() {
    let mut s = SigService::new(Scheduling::StrictPriority);
    s.set_client_priority("high", 10);
    s.set_client_priority("low", 1);
    let r = EventRange::new(0, 2);
    let mut submitted = Vec::new();
    for _ in 0..10 {
        for (client, prio) in [("low", 1), ("high", 10)] {
            let field = format!("t{}", submitted.len());
            let sol = s.submit(&single(&field, 1), client, r, 0).unwrap();
            let task = s.entry(&sol.slots[0].location).unwrap().producer_task.unwrap();
            submitted.push((prio, submitted.len() as u64, task, client));
        }
    }
    let mut oracle = submitted.clone();
    oracle.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let expected: Vec<u64> = oracle.iter().take(11).map(|t| t.2).collect();
    let ran = s.worker_poll_execute(11, &word_source).unwrap();
    assert_eq!(ran, expected);
    let high: BTreeSet<u64> = submitted.iter().filter(|t| t.3 == "high").map(|t| t.2).collect();
    assert!(ran[..10].iter().all(|t| high.contains(t)));
    assert_eq!(s.pending_tasks(), 9);
}

proptest! {
    #[test]
    fn strict_priority_never_runs_lower_while_higher_pending(
        tasks in prop::collection::vec((0usize..4, -3i64..5), 1..40),
        budget in 1usize..50,
    ) {
        let mut s = SigService::new(Scheduling::StrictPriority);
        let r = EventRange::new(0, 1);
        let mut queued = Vec::new();
        for (i, (client, prio)) in tasks.iter().enumerate() {
            let c = format!("c{client}");
            s.set_client_priority(&c, *prio);
            s.submit(&single(&format!("t{i}"), 1), &c, r, 0).unwrap();
            queued.push(*prio);
        }
        let leases = s.lease(budget);
        let mut remaining: Vec<i64> = s.queues.values().flatten().map(|t| t.priority).collect();
        remaining.sort();
        let mut last = i64::MAX;
        for l in &leases {
            prop_assert!(l.task.priority <= last);
            last = l.task.priority;
            if let Some(&max_left) = remaining.last() {
                prop_assert!(l.task.priority >= max_left);
            }
        }
        prop_assert_eq!(leases.len() + remaining.len(), queued.len());
    }

    #[test]
    fn keys_ignore_ids_and_node_order(seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let g = random_forest(&mut rng, 25);
        for c in extract_components(&g).unwrap() {
            let mut renum = c.clone();
            let shift = |id: NodeId| id * 7 + 1_000;
            for n in &mut renum.graph.nodes {
                n.id = shift(n.id);
                n.inputs.iter_mut().for_each(|i| *i = shift(*i));
            }
            renum.graph.nodes.reverse();
            renum.output = shift(renum.output);
            prop_assert_eq!(canonical_key(&c), canonical_key(&renum));
        }
    }
}

#[test]
fn stale_eviction_matches_filter_oracle() {
    let mut rng = rng_from_seed(5);
    let mut s = SigService::new(Scheduling::StrictPriority);
    let r = EventRange::new(0, 2);
    for i in 0..60 {
        s.submit(&single(&format!("t{i}"), 1), "m", r, rng.random_range(0..100))
            .unwrap();
    }
    s.drain(&word_source).unwrap();
    for i in 0..60 {
        if rng.random_bool(0.3) {
            s.submit(&single(&format!("t{i}"), 1), "n", r, rng.random_range(100..200))
                .unwrap();
        }
    }
    let (now, ttl) = (180u64, 70);
    let expected: Vec<BlockId> = s
        .entries
        .iter()
        .filter(|(_, e)| now.saturating_sub(e.last_requested) > ttl)
        .map(|(b, _)| *b)
        .collect();
    assert!(!expected.is_empty() && expected.len() < 60);
    let got = s.evict_stale(now, ttl).unwrap();
    assert_eq!(got, expected);
    assert!(got.iter().all(|b| s.warehouse.get(b).is_none() && s.entry(b).is_none()));
    assert_eq!(s.entries.len(), 60 - expected.len());
}

#[test]
fn query_eviction_matches_consumer_and_field_oracles() {
    let cfg = ReplayConfig {
        models: 12,
        pool_size: 15,
        components_per_model: 5,
        rounds: 1,
        events_per_range: 3,
        ..ReplayConfig::default()
    };
    let (service, report) = replay(&cfg).unwrap();

    let mut s = service.clone();
    let field = component_fields(report.model_components[0][0])[1].clone();
    let expected: BTreeSet<BlockId> = s
        .entries
        .keys()
        .filter(|b| s.components[&b.key].graph.raw_reads().contains(&field))
        .copied()
        .collect();
    let got: BTreeSet<BlockId> = s
        .evict_query(&EvictPredicate::RawField(field))
        .unwrap()
        .into_iter()
        .collect();
    assert_eq!(got, expected);
    assert_eq!(got.len(), 1);

    let mut s = service.clone();
    let expected: BTreeSet<BlockId> = s
        .entries
        .iter()
        .filter(|(_, e)| e.consumers.contains("model03"))
        .map(|(b, _)| *b)
        .collect();
    assert!(
        expected.iter().any(|b| s.entries[b].consumers.len() > 1),
        "some evicted blocks are shared"
    );
    let got: BTreeSet<BlockId> = s
        .evict_query(&EvictPredicate::Pipeline("model03".into()))
        .unwrap()
        .into_iter()
        .collect();
    assert_eq!(got, expected);
    assert_eq!(got.len(), cfg.components_per_model);

    let mut s = service;
    let key = *s.entries.keys().next().map(|b| &b.key).unwrap();
    s.evict_query(&EvictPredicate::Key(key)).unwrap();
    assert!(s.entries.keys().all(|b| b.key != key));
    let comp = report.model_components.iter().flatten().copied().find(|&c| {
        let g = model_graph(&[c], 1);
        canonical_key(&extract_components(&g).unwrap()[0]) == key
    });
    let sol = s
        .submit(&model_graph(&[comp.unwrap()], 1), "fresh", EventRange::new(0, 3), 9)
        .unwrap();
    assert_eq!(sol.slots[0].status, EntryStatus::Scheduled);
    assert_eq!(s.pending_tasks(), 1);
    assert!(s
        .evict_query(&EvictPredicate::RawField("nope".into()))
        .unwrap()
        .is_empty());
}

#[test]
fn metrics_match_event_log_recount() {
    let cfg = ReplayConfig {
        models: 30,
        pool_size: 50,
        components_per_model: 12,
        rounds: 3,
        events_per_range: 4,
        ..ReplayConfig::default()
    };
    let (s, _) = replay(&cfg).unwrap();
    let mut hits = 0u64;
    let mut misses = 0u64;
    let mut consumers: BTreeMap<BlockId, BTreeSet<String>> = BTreeMap::new();
    let mut ready: BTreeSet<BlockId> = BTreeSet::new();
    for ev in &s.log {
        match ev {
            SigEvent::Hit { client, block } => {
                hits += 1;
                consumers.entry(*block).or_default().insert(client.clone());
            }
            SigEvent::Miss { client, block, .. } => {
                misses += 1;
                consumers.entry(*block).or_default().insert(client.clone());
            }
            SigEvent::Ready { block, .. } => {
                ready.insert(*block);
            }
            SigEvent::Evicted { block } => {
                ready.remove(block);
                consumers.remove(block);
            }
            SigEvent::Failed { .. } => {}
        }
    }
    let counts: Vec<usize> = ready.iter().map(|b| consumers[b].len()).collect();
    let m = s.metrics();
    assert_eq!((m.hits, m.misses), (hits, misses));
    assert!((m.hit_rate - hits as f64 / (hits + misses) as f64).abs() < 1e-12);
    assert_eq!(m.ready_blocks, ready.len());
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    assert!((m.mean_consumers_per_ready_block - mean).abs() < 1e-12);
    assert_eq!(m.peak_consumers, *counts.iter().max().unwrap());
    assert_eq!(ready.len(), s.evaluations.len());
}

#[test]
fn first_submit_has_zero_hit_rate_and_k_models_give_k_consumers() {
    let (_, one) = replay(&ReplayConfig {
        models: 1,
        rounds: 1,
        ..ReplayConfig::default()
    })
    .unwrap();
    assert_eq!(one.metrics.hit_rate, 0.0);
    let (_, k) = replay(&ReplayConfig {
        models: 7,
        rounds: 1,
        ..ReplayConfig::default()
    })
    .unwrap();
    assert_eq!(k.metrics.mean_consumers_per_ready_block, 7.0);
}

/// Counts raw record fetches, one per (evaluated component, event).
struct Counting {
    inner: SyntheticSource,
    calls: AtomicU64,
}

impl RawSource for Counting {
    fn record(&self, event: u64) -> Result<RawRecord> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.record(event)
    }
}

#[test]
fn shared_components_evaluate_once_until_evicted() {
    let k = 22;
    let pool = 6;
    let events = 5u64;
    let source = Counting {
        inner: SyntheticSource {
            fields: (0..pool).flat_map(component_fields).collect(),
            seed: 1,
        },
        calls: AtomicU64::new(0),
    };
    let mut s = SigService::new(Scheduling::StrictPriority);
    let range = EventRange::new(0, events);
    let all: Vec<usize> = (0..pool).collect();
    let submit_all = |s: &mut SigService, now: u64| {
        for m in 0..k {
            s.submit(&model_graph(&all, m as u32 * 100), &format!("m{m}"), range, now)
                .unwrap();
        }
    };
    submit_all(&mut s, 0);
    s.drain(&source).unwrap();
    assert_eq!(source.calls.load(Ordering::Relaxed), pool as u64 * events);
    assert!(s.evaluations.values().all(|&n| n == 1));
    let lig_calls = (k * pool) as u64 * events;
    assert_eq!(lig_calls / source.calls.load(Ordering::Relaxed), k as u64);

    let field = component_fields(2)[0].clone();
    s.evict_query(&EvictPredicate::RawField(field)).unwrap();
    submit_all(&mut s, 1);
    s.drain(&source).unwrap();
    assert_eq!(source.calls.load(Ordering::Relaxed), (pool as u64 + 1) * events);
    let twice: Vec<u64> = s.evaluations.values().copied().filter(|&n| n == 2).collect();
    assert_eq!(twice.len(), 1);
    assert_eq!(s.evaluations.values().sum::<u64>(), pool as u64 + 1);
}

#[test]
fn parallel_workers_produce_same_warehouse() {
    let cfg = ReplayConfig {
        models: 8,
        pool_size: 30,
        components_per_model: 10,
        rounds: 1,
        events_per_range: 20,
        ..ReplayConfig::default()
    };
    let (serial, _) = replay(&cfg).unwrap();

    let shared = SharedSig::new(SigService::new(Scheduling::StrictPriority));
    let source = SyntheticSource {
        fields: (0..cfg.pool_size).flat_map(component_fields).collect(),
        seed: cfg.seed,
    };
    let (_, report) = replay(&ReplayConfig {
        rounds: 0,
        ..cfg.clone()
    })
    .unwrap();
    for (m, comps) in report.model_components.iter().enumerate() {
        shared
            .with(|s| {
                s.submit(
                    &model_graph(comps, 1 + m as u32 * 1000),
                    &format!("model{m:02}"),
                    EventRange::new(0, 20),
                    0,
                )
            })
            .unwrap();
    }
    let ran = shared.run_workers(4, &source).unwrap();
    let parallel = shared.with(|s| s.clone());
    assert_eq!(ran, parallel.evaluations.len());
    assert_eq!(parallel.warehouse.blocks, serial.warehouse.blocks);
    assert!(parallel.evaluations.values().all(|&n| n == 1));
}

#[test]
fn snapshot_round_trip_and_version_check() {
    let dir = tempfile::tempdir().unwrap();
    let (mut s, _) = replay(&ReplayConfig {
        models: 4,
        rounds: 1,
        ..ReplayConfig::default()
    })
    .unwrap();
    s.submit(&single("pending_field", 1), "late", EventRange::new(0, 2), 5)
        .unwrap();
    let path = dir.path().join("sig.json");
    s.save_snapshot(&path).unwrap();
    let mut restored = SigService::load_snapshot(&path).unwrap();
    assert_eq!(restored, s);
    // restored queues keep working
    let src = |e: u64| -> Result<RawRecord> { Ok(RawRecord::from([("pending_field".into(), format!("v{e}"))])) };
    assert_eq!(restored.drain(&src).unwrap().len(), 1);

    let mut text: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    text["version"] = (SNAPSHOT_VERSION + 1).into();
    std::fs::write(&path, text.to_string()).unwrap();
    assert!(matches!(SigService::load_snapshot(&path), Err(Error::Unsupported(_))));
}

#[test]
fn persistent_warehouse_mirrors_blocks_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let wh = trainsim::sig::Warehouse::persistent(dir.path()).unwrap();
    let mut s = SigService::new(Scheduling::StrictPriority).with_warehouse(wh);
    replay_into(
        &mut s,
        &ReplayConfig {
            models: 2,
            pool_size: 3,
            components_per_model: 3,
            rounds: 1,
            ..ReplayConfig::default()
        },
    )
    .unwrap();
    let files = || std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(files(), 3);
    s.evict_query(&EvictPredicate::RawField(component_fields(1)[2].clone()))
        .unwrap();
    assert_eq!(files(), 2);
}

#[test]
fn shared_pool_of_22_models_exceeds_95_percent_hits() {
    let (_, report) = replay(&ReplayConfig::default()).unwrap();
    assert!(report.metrics.hit_rate > 0.95, "{}", report.metrics.hit_rate);
    assert_eq!(report.max_evaluations_per_component, 1);
    assert_eq!(report.metrics.mean_consumers_per_ready_block, 22.0);
}
