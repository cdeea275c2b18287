#![allow(dead_code)]

use rand::Rng;
use trainsim::partition::TrafficStats;
use trainsim::rng::SimRng;
use trainsim::workload::{EmbeddingTableSpec, OptimizerKind};

/// Random partitioning instance with at most 4 tables, 4 nodes and 8 rows
/// per table. Dimensions straddle the 32-wide penalty threshold and about a
/// quarter of tables use a row-wise optimizer.
pub fn small_instance(rng: &mut SimRng) -> (Vec<EmbeddingTableSpec>, u32, TrafficStats) {
    let n_tables = rng.random_range(1..=4);
    let nodes = rng.random_range(1..=4);
    let mut stats = TrafficStats::new();
    let mut specs = Vec::new();
    for i in 0..n_tables {
        let vocab = rng.random_range(1..=8u64);
        let dim = [8, 16, 48, 64, 96][rng.random_range(0..5)];
        let mut spec = EmbeddingTableSpec::new(format!("t{i}"), vocab, dim);
        if rng.random_bool(0.25) {
            spec.optimizer = OptimizerKind::row_wise(2);
        }
        let rows: Vec<f64> = (0..vocab)
            .map(|_| {
                if rng.random_bool(0.1) {
                    0.0
                } else {
                    rng.random_range(0.0..4.0)
                }
            })
            .collect();
        stats.per_table.insert(spec.name.clone(), rows);
        specs.push(spec);
    }
    (specs, nodes, stats)
}

/// 200 tables with a handful of distinct widths, the reference scenario for
/// PS RPC accounting (16 cores).
pub fn ps_reference_tables(rng: &mut SimRng) -> Vec<EmbeddingTableSpec> {
    (0..200)
        .map(|i| {
            let vocab = rng.random_range(16..2000u64);
            let dim = [16, 32, 64, 128][rng.random_range(0..4)];
            EmbeddingTableSpec {
                zipf_s: 1.0,
                mean_valency: 2.0,
                ..EmbeddingTableSpec::new(format!("f{i:03}"), vocab, dim)
            }
        })
        .collect()
}
