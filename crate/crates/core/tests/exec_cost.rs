use std::collections::BTreeMap;

use rand::Rng;
use trainsim::exec::{
    documented_ladder_scenario, network_traffic, pipelined_step, run_ladder, serialized_step, software_dedup_route,
    write_sweep_csv, ContentionModel, ExecMode, LadderMode, StepCost, TrafficModel, TrafficStrategy,
};
use trainsim::partition::{row_partition, RowScheme};
use trainsim::rng::rng_from_seed;
use trainsim::workload::{EmbeddingTableSpec, TrainingBatch};

#[test]
fn serialized_is_plain_addition() {
    let mut rng = rng_from_seed(1);
    for _ in 0..1000 {
        let tc = rng.random_range(0.0..1e4);
        let sc = rng.random_range(0.0..1e4);
        assert_eq!(
            serialized_step(&StepCost::new(tc, sc, ExecMode::Serialized).unwrap()),
            tc + sc
        );
    }
}

#[test]
fn pipelining_never_loses_within_slowdown_bound() {
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 50.0).collect();
    for &tc in &grid {
        for &sc in &grid {
            let c = StepCost::new(tc, sc, ExecMode::Pipelined).unwrap();
            assert_eq!(pipelined_step(&c, &ContentionModel::none()), tc.max(sc));
            let hi = tc.max(sc);
            let bound = if hi == 0.0 { 0.0 } else { tc.min(sc) / hi };
            for k in 0..=10 {
                let slow = bound * k as f64 / 10.0;
                let m = ContentionModel {
                    tc_slowdown: slow,
                    sc_slowdown: slow,
                };
                assert!(
                    pipelined_step(&c, &m) <= serialized_step(&c) + 1e-9,
                    "tc {tc} sc {sc} slow {slow}"
                );
            }
        }
    }
}

fn duplicated_batch() -> (EmbeddingTableSpec, TrainingBatch) {
    let spec = EmbeddingTableSpec::new("t", 64, 16);
    let mut rng = rng_from_seed(3);
    let examples: Vec<Vec<u64>> = (0..200)
        .map(|_| (0..5).map(|_| rng.random_range(0..6)).collect())
        .collect();
    let mut lookups = BTreeMap::new();
    lookups.insert("t".to_string(), examples);
    (
        spec,
        TrainingBatch {
            batch_size: 200,
            lookups,
            event_ids: (0..200).collect(),
        },
    )
}

#[test]
fn dedup_traffic_ignores_node_count_and_all_values_grows() {
    let (spec, batch) = duplicated_batch();
    let specs = std::slice::from_ref(&spec);
    let mut distinct: Vec<u64> = batch.lookups["t"].iter().flatten().copied().collect();
    distinct.sort_unstable();
    distinct.dedup();
    let mut dedup = Vec::new();
    let mut all = Vec::new();
    for n in [2u32, 4, 8] {
        let plan = row_partition(&spec, n, RowScheme::Cyclic).unwrap();
        dedup.push(
            network_traffic(
                &batch,
                &plan,
                &TrafficModel::new(TrafficStrategy::DedupAllToAll, n),
                specs,
            )
            .unwrap(),
        );
        all.push(
            network_traffic(
                &batch,
                &plan,
                &TrafficModel::new(TrafficStrategy::AllValuesReduceScatter, n),
                specs,
            )
            .unwrap(),
        );
        // formula: 1000 ids plus n partial sums per example
        assert_eq!(*all.last().unwrap(), 1000 * 4 + n as u64 * 200 * 16 * 4);
    }
    assert!(dedup.iter().all(|&d| d == distinct.len() as u64 * (4 + 16 * 4)));
    assert!(all[0] < all[1] && all[1] < all[2]);
}

#[test]
fn routing_fractions_match_counting() {
    let mut rng = rng_from_seed(8);
    let valencies: Vec<u32> = (0..5000).map(|_| rng.random_range(1..=1000)).collect();
    for threshold in [1, 8, 10, 100, 999, 1000] {
        let (tc, sc) = software_dedup_route(&valencies, threshold).unwrap();
        let mut low = 0;
        for &v in &valencies {
            if v <= threshold {
                low += 1;
            }
        }
        assert_eq!(tc, low as f64 / 5000.0);
        assert!((tc + sc - 1.0).abs() < 1e-12);
    }
}

#[test]
fn documented_ladder_is_strictly_ordered() {
    let rows = run_ladder(&documented_ladder_scenario()).unwrap();
    let modes: Vec<LadderMode> = rows.iter().map(|r| r.mode).collect();
    assert_eq!(
        modes,
        vec![
            LadderMode::Baseline,
            LadderMode::Pipelining,
            LadderMode::Hybrid,
            LadderMode::Fdp
        ]
    );
    for w in rows.windows(2) {
        assert!(
            w[1].step_us < w[0].step_us,
            "{:?} not faster than {:?}",
            w[1].mode,
            w[0].mode
        );
    }
    assert_eq!(rows[0].speedup, 1.0);
    assert_eq!(run_ladder(&documented_ladder_scenario()).unwrap(), rows);

    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("model,mode,tc_us,sc_us,step_us,speedup"));
    assert_eq!(lines.count(), 4);
}
