//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Runs without the libtest harness so the lines always
//! show up in `cargo test` output.

mod common;

use std::time::{Duration, Instant};

use rand::Rng;
use trainsim::cost::{advancing_rate, calibration_models, compare_sig_lig, TcoParams};
use trainsim::exec::{
    documented_ladder_scenario, network_traffic, pipelined_step, run_ladder, serialized_step,
    stale_gradient_experiment, ContentionModel, ExecMode, LadderMode, StaleTrainConfig, StepCost, TrafficModel,
    TrafficStrategy,
};
use trainsim::partition::{
    compare_cyclic_block, exact_partition_oracle, hybrid_partition, load_imbalance, row_partition, row_partition_all,
    search_hybrid, ColRange, HybridConfig, NodeId, OracleConfig, PartitionPlan, RowScheme, RowSet, ShardSpec,
    TrafficStats,
};
use trainsim::ps::{ps_step_time, rpc_count, shard_rows_over_ps, PsNetwork};
use trainsim::rng::rng_from_seed;
use trainsim::sig::workload::{component_fields, replay, replay_into, ReplayConfig};
use trainsim::sig::EvictPredicate;
use trainsim::sim::{
    audit_exactly_once, chaos_scenario, preemption_commit_fraction, protocol_violations, run, Arrival, FaultKind,
    FaultSpec, PreemptOutcome, ServiceTime, SimScenario, CALIBRATION_MEAN_WARNING_US, CALIBRATION_SEED,
};
use trainsim::workload::{generate_batch, zipf_pmf, EmbeddingTableSpec, ModelSpec, TrainingBatch};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn worked_example() -> Outcome {
    let tables = vec![
        EmbeddingTableSpec::new("T0", 4, 64),
        EmbeddingTableSpec::new("T1", 4, 64),
    ];
    let rows = vec![0.6, 0.3, 0.2, 0.1];
    let stats = TrafficStats::new()
        .with_table("T0", rows.clone())
        .with_table("T1", rows);
    let row_plan = row_partition_all(&tables, 4, RowScheme::Block).map_err(err)?;
    let row = load_imbalance(&row_plan, &stats, &tables).map_err(err)?.imbalance;
    // each table cut into two 32-wide halves, one half per node
    let mut tc = PartitionPlan::new(4);
    for (i, (t, lo)) in [("T0", 0), ("T0", 32), ("T1", 0), ("T1", 32)].into_iter().enumerate() {
        tc.shards.push(ShardSpec {
            table: t.into(),
            rows: RowSet::All,
            cols: ColRange { lo, hi: lo + 32 },
            node: NodeId(i as u32),
        });
    }
    tc.validate_complete(&tables).map_err(err)?;
    let table_col = load_imbalance(&tc, &stats, &tables).map_err(err)?.imbalance;
    let model = ModelSpec::new("two_tables", tables.clone());
    let chosen = hybrid_partition(&model, 4, &stats, None, 256).map_err(err)?;
    let picked = load_imbalance(&chosen, &stats, &tables).map_err(err)?.imbalance;
    check((row - 2.0).abs() <= 1e-12, format!("row plan imbalance {row}"))?;
    check(
        (table_col - 1.0).abs() <= 1e-12,
        format!("table+column plan imbalance {table_col}"),
    )?;
    check(
        (picked - 1.0).abs() <= 1e-12,
        format!("hybrid chose imbalance {picked}"),
    )?;
    Ok(format!("row {row}, table+column {table_col}, hybrid {picked}"))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = rng_from_seed(0xacc2);
    let cases = 250;
    for case in 0..cases {
        let (specs, nodes, stats) = common::small_instance(&mut rng);
        let exact = exact_partition_oracle(&specs, nodes, &stats, &OracleConfig::default()).map_err(err)?;
        let hybrid = search_hybrid(&specs, nodes, &stats, &HybridConfig::default()).map_err(err)?;
        check(
            (hybrid.objective - exact.objective).abs() <= 1e-9,
            format!("case {case}: hybrid {} vs exact {}", hybrid.objective, exact.objective),
        )?;
    }
    Ok(format!("{cases} instances agree within 1e-9"))
}

fn cyclic_beats_block() -> Outcome {
    let mut rng = rng_from_seed(0xacc3);
    let mut worst = f64::NEG_INFINITY;
    for case in 0..50 {
        let s = rng.random_range(0.8..=1.5);
        let vocab = rng.random_range(1..=4096u64);
        let nodes = [2u32, 4, 8][rng.random_range(0..3)];
        let table = EmbeddingTableSpec::new("z", vocab, 16);
        // zipf_pmf is already sorted by decreasing frequency
        let stats = TrafficStats::new().with_table("z", zipf_pmf(s, vocab));
        let (cyclic, block) = compare_cyclic_block(&table, &stats, nodes).map_err(err)?;
        worst = worst.max(cyclic - block);
        check(
            cyclic <= block,
            format!("case {case}: s {s:.3} vocab {vocab} N {nodes}: cyclic {cyclic} > block {block}"),
        )?;
    }
    Ok(format!("50 tables, max(cyclic - block) = {worst:.4}"))
}

fn traffic_scaling() -> Outcome {
    let spec = EmbeddingTableSpec::new("t", 256, 32);
    let mut rng = rng_from_seed(0xacc4);
    let examples: Vec<Vec<u64>> = (0..128)
        .map(|_| (0..6).map(|_| rng.random_range(0..40)).collect())
        .collect();
    let batch = TrainingBatch {
        batch_size: 128,
        lookups: [("t".to_string(), examples)].into_iter().collect(),
        event_ids: (0..128).collect(),
    };
    let specs = std::slice::from_ref(&spec);
    let mut dedup = Vec::new();
    let mut all = Vec::new();
    for n in [2u32, 4, 8] {
        let plan = row_partition(&spec, n, RowScheme::Cyclic).map_err(err)?;
        dedup.push(
            network_traffic(
                &batch,
                &plan,
                &TrafficModel::new(TrafficStrategy::DedupAllToAll, n),
                specs,
            )
            .map_err(err)?,
        );
        all.push(
            network_traffic(
                &batch,
                &plan,
                &TrafficModel::new(TrafficStrategy::AllValuesReduceScatter, n),
                specs,
            )
            .map_err(err)?,
        );
    }
    check(
        dedup.windows(2).all(|w| w[0] == w[1]),
        format!("dedup traffic varies: {dedup:?}"),
    )?;
    check(
        all.windows(2).all(|w| w[0] < w[1]),
        format!("all-values traffic not increasing: {all:?}"),
    )?;
    Ok(format!("dedup {dedup:?}, all-values {all:?}"))
}

fn pipelining_model() -> Outcome {
    let grid: Vec<f64> = (0..=40).map(|i| i as f64 * 25.0).collect();
    for &tc in &grid {
        for &sc in &grid {
            let c = StepCost::new(tc, sc, ExecMode::Pipelined).map_err(err)?;
            let p = pipelined_step(&c, &ContentionModel::none());
            check(p == tc.max(sc), format!("pipelined({tc}, {sc}) = {p}"))?;
            check(
                p <= serialized_step(&c),
                format!("pipelined > serialized at ({tc}, {sc})"),
            )?;
        }
    }
    let rows = run_ladder(&documented_ladder_scenario()).map_err(err)?;
    let modes: Vec<LadderMode> = rows.iter().map(|r| r.mode).collect();
    check(
        modes
            == [
                LadderMode::Baseline,
                LadderMode::Pipelining,
                LadderMode::Hybrid,
                LadderMode::Fdp,
            ],
        format!("ladder modes {modes:?}"),
    )?;
    check(
        rows.windows(2).all(|w| w[1].step_us < w[0].step_us),
        "ladder step times are not strictly decreasing",
    )?;
    let speedups: Vec<String> = rows.iter().map(|r| format!("{:.2}x", r.speedup)).collect();
    Ok(format!("grid exact; ladder speedups {}", speedups.join(" < ")))
}

fn stale_gradient() -> Outcome {
    let cfg = StaleTrainConfig {
        vocab: 64,
        dim: 8,
        steps: 2000,
        learning_rate: 0.05,
        seed: 7,
        ..StaleTrainConfig::default()
    };
    let (stale, fresh) = stale_gradient_experiment(&cfg).map_err(err)?;
    let gap = (stale - fresh).abs() / fresh;
    check(
        gap <= 0.05,
        format!("relative gap {gap:.4} (stale {stale}, fresh {fresh})"),
    )?;
    Ok(format!("stale {stale:.5}, fresh {fresh:.5}, gap {:.3}%", 100.0 * gap))
}

fn rpc_accounting() -> Outcome {
    let unco = rpc_count(16, 200, 8, false, 1).map_err(err)?;
    let co = rpc_count(16, 200, 8, true, 1).map_err(err)?;
    check(
        unco.per_ps_rpcs_per_step == 3200,
        format!("uncoalesced {}", unco.per_ps_rpcs_per_step),
    )?;
    check(
        co.rpcs_per_worker_ps_per_batch == 2,
        format!("coalesced pair {}", co.rpcs_per_worker_ps_per_batch),
    )?;
    let mut rng = rng_from_seed(0xacc7);
    for tables in [2usize, 3, 10, 200] {
        let specs: Vec<EmbeddingTableSpec> = common::ps_reference_tables(&mut rng).into_iter().take(tables).collect();
        let batch = generate_batch(&ModelSpec::new("m", specs.clone()), 32, 0, &mut rng).map_err(err)?;
        let layout = shard_rows_over_ps(&specs, 8, RowScheme::Cyclic).map_err(err)?;
        let a = rpc_count(16, tables as u64, 8, false, 1).map_err(err)?;
        let b = rpc_count(16, tables as u64, 8, true, 1).map_err(err)?;
        for overhead in [1e-6, 0.5, 20.0] {
            let net = PsNetwork {
                rpc_overhead_us: overhead,
                ..PsNetwork::default()
            };
            let (ta, tb) = (
                ps_step_time(&layout, &batch, &a, &net).map_err(err)?,
                ps_step_time(&layout, &batch, &b, &net).map_err(err)?,
            );
            check(
                tb < ta,
                format!("{tables} tables, overhead {overhead}: coalesced {tb} >= {ta}"),
            )?;
        }
    }
    Ok("3200 uncoalesced, 2 per (worker, PS) coalesced, coalesced always faster".into())
}

fn chaos_exactly_once() -> Outcome {
    let mut failures = Vec::new();
    let mut faults = 0;
    for seed in 0..1000u64 {
        let sc = chaos_scenario(seed);
        faults += sc.faults.len();
        let r = run(&sc, seed).map_err(err)?;
        let audit = audit_exactly_once(&r);
        let protocol = protocol_violations(&r);
        if !audit.pass || !protocol.is_empty() {
            failures.push(format!(
                "seed {seed}: {} violations, {:?}",
                audit.violations.len(),
                protocol
            ));
        }
    }
    check(failures.is_empty(), failures.join("; "))?;
    Ok(format!("1000/1000 seeds pass ({faults} injected faults)"))
}

fn preemption(at_us: u64, warning_us: u64) -> FaultSpec {
    FaultSpec {
        at_us,
        kind: FaultKind::Preemption {
            warning_us,
            job: "trainer".into(),
        },
    }
}

fn preemption_protocol() -> Outcome {
    let (mut early, mut restarted) = (0, 0);
    for seed in 0..50u64 {
        let mut sc = chaos_scenario(seed);
        let drain = sc.worst_case_drain_us();
        let span = sc.total_events * sc.train_us_per_event.max(sc.data_time_per_event_us);
        sc.faults = (0..6).map(|i| preemption(span * i / 6, drain)).collect();
        let r = run(&sc, seed).map_err(err)?;
        for p in r.preemptions.iter().filter_map(|p| p.outcome) {
            match p {
                PreemptOutcome::CommittedEarly => early += 1,
                PreemptOutcome::RestartFromCheckpoint => restarted += 1,
                PreemptOutcome::NoEpoch => {}
            }
        }
        check(
            audit_exactly_once(&r).pass,
            format!("generous warning seed {seed} fails audit"),
        )?;
    }
    check(
        restarted == 0 && early > 0,
        format!("generous warning: {early} early, {restarted} restarted"),
    )?;

    let mut zero_restarts = 0;
    for seed in 0..50u64 {
        let mut sc = chaos_scenario(seed);
        let span = sc.total_events * sc.train_us_per_event.max(sc.data_time_per_event_us);
        sc.faults = (1..5).map(|i| preemption(span * i / 5, 0)).collect();
        let r = run(&sc, seed).map_err(err)?;
        check(
            r.preemptions
                .iter()
                .all(|p| p.outcome != Some(PreemptOutcome::CommittedEarly)),
            format!("zero warning seed {seed} committed early"),
        )?;
        zero_restarts += r
            .preemptions
            .iter()
            .filter(|p| p.outcome == Some(PreemptOutcome::RestartFromCheckpoint))
            .count();
        let audit = audit_exactly_once(&r);
        check(
            audit.pass && audit.final_watermark == Some(sc.total_events - 1),
            format!("zero warning seed {seed}: loss or duplication"),
        )?;
    }
    let f = preemption_commit_fraction(CALIBRATION_MEAN_WARNING_US, CALIBRATION_SEED).map_err(err)?;
    check((f - 0.61).abs() <= 0.03, format!("calibration commit fraction {f:.4}"))?;
    Ok(format!(
        "generous 100% ({early} early), zero warning 0% ({zero_restarts} restarts, no loss), calibration {:.1}%",
        100.0 * f
    ))
}

fn sig_amortization() -> Outcome {
    let cfg = ReplayConfig::default();
    check(
        cfg.models == 22 && cfg.components_per_model == cfg.pool_size,
        "default replay must share every component across 22 models",
    )?;
    let (mut service, report) = replay(&cfg).map_err(err)?;
    check(
        report.evaluations.values().all(|&n| n == 1),
        format!("max evaluations per component {}", report.max_evaluations_per_component),
    )?;
    let warm = report.warm_hit_rate.unwrap_or(0.0);
    check(warm > 0.95, format!("warm hit rate {warm}"))?;
    let field = component_fields(4)[1].clone();
    let affected = service.field_index.get(&field).cloned().unwrap_or_default();
    check(!affected.is_empty(), "predicate matches nothing")?;
    service.evict_query(&EvictPredicate::RawField(field)).map_err(err)?;
    let before = service.evaluations.clone();
    replay_into(&mut service, &ReplayConfig { rounds: 1, ..cfg }).map_err(err)?;
    for (k, n) in &service.evaluations {
        let delta = n - before.get(k).copied().unwrap_or(0);
        let expected = u64::from(affected.contains(k));
        check(
            delta == expected,
            format!("component {} re-evaluated {delta} times", k.short()),
        )?;
    }
    Ok(format!(
        "k = 22, 1 evaluation per component, warm hit rate {warm:.4}, overall {:.4}, {} affected component re-materialized once",
        report.metrics.hit_rate,
        affected.len()
    ))
}

fn cost_accounting() -> Outcome {
    let params = TcoParams::default();
    let models = calibration_models();
    let c = compare_sig_lig(&models, &params).map_err(err)?;
    for m in &c.models {
        check(
            (4.3..=7.5).contains(&m.reader_ratio),
            format!("{} reader ratio {}", m.name, m.reader_ratio),
        )?;
    }
    let (lo, hi) = c.reduction_range();
    check(
        (lo - 0.12).abs() <= 0.005 && (hi - 0.27).abs() <= 0.005,
        format!("reductions span {lo:.4}..{hi:.4}"),
    )?;
    let product: f64 = c.models.iter().map(|m| m.sig.total / m.lig.total).product();
    let oracle = 1.0 - product.powf(1.0 / c.models.len() as f64);
    check(
        (oracle - c.geomean_reduction).abs() < 1e-12,
        format!("oracle {oracle} vs {}", c.geomean_reduction),
    )?;
    check(
        (c.geomean_reduction - 0.18).abs() <= 0.01,
        format!("geomean reduction {}", c.geomean_reduction),
    )?;
    Ok(format!(
        "reductions {:.1}%..{:.1}%, geomean {:.2}% (oracle {:.2}%)",
        100.0 * lo,
        100.0 * hi,
        100.0 * c.geomean_reduction,
        100.0 * oracle
    ))
}

fn advancing() -> Outcome {
    let r = advancing_rate(365.0, 2.0).map_err(err)?;
    check(r == 182.5, format!("advancing_rate(365, 2) = {r}"))?;
    let sc = SimScenario {
        total_events: 50_000,
        arrival: Arrival::Realtime,
        data_time_per_event_us: 10,
        work_unit_size: 20,
        host_buffer_capacity: 200,
        read_service: ServiceTime {
            min_us: 50,
            max_us: 150,
        },
        train_us_per_event: 2,
        epoch_wall_time_us: 50_000,
        ..SimScenario::default()
    };
    let report = run(&sc, 12).map_err(err)?;
    let caught_up = report.advancing_rate().ok_or("no committed epoch")?;
    check((caught_up - 1.0).abs() <= 0.01, format!("caught-up rate {caught_up}"))?;
    Ok(format!("365/2 = {r} (not 184.5), caught-up {caught_up:.4}x"))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("worked partitioning example", worked_example, Duration::from_secs(1)),
        ("oracle equivalence", oracle_equivalence, Duration::from_secs(120)),
        ("cyclic beats block", cyclic_beats_block, Duration::from_secs(30)),
        ("traffic scaling", traffic_scaling, Duration::from_secs(10)),
        ("pipelining model", pipelining_model, Duration::from_secs(10)),
        ("stale-gradient experiment", stale_gradient, Duration::from_secs(30)),
        ("RPC accounting", rpc_accounting, Duration::from_secs(5)),
        ("exactly-once under chaos", chaos_exactly_once, Duration::from_secs(300)),
        ("preemption protocol", preemption_protocol, Duration::from_secs(60)),
        ("SIG amortization", sig_amortization, Duration::from_secs(30)),
        ("cost accounting", cost_accounting, Duration::from_secs(5)),
        ("advancing rate", advancing, Duration::from_secs(1)),
    ];
    let mut failed = 0;
    for (i, (name, f, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > *budget => Err(format!("{detail}; took {took:.2?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{took:.2?}]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{took:.2?}]", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria pass",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
