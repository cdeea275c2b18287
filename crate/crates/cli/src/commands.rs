use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use trainsim::error::Error;
use trainsim::scenario::ScenarioFile;
use trainsim::sig::workload::replay_into;
use trainsim::sig::{CanonicalKey, EvictPredicate, SigEvent, SigMetrics, SigService};
use trainsim::sim::{
    audit_exactly_once, chaos_scenario, protocol_violations, run, write_chip_demand_csv, AuditReport, SimReport,
};

use crate::{with_path, Common, Failure, Format, Predicate};

type CmdResult = Result<(), Failure>;

fn load(common: &Common) -> Result<(ScenarioFile, u64), Failure> {
    let s = ScenarioFile::load(&common.scenario).map_err(with_path(&common.scenario))?;
    let seed = common.seed.unwrap_or(s.seed);
    Ok((s, seed))
}

fn json<T: Serialize>(value: &T) -> Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> CmdResult {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::input(format!("{}: {e}", parent.display())))?;
    }
    fs::write(&path, bytes).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> trainsim::error::Result<()>) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

pub fn partition(common: &Common, oracle: bool) -> CmdResult {
    let (s, seed) = load(common)?;
    let (plan, report) = match s.run_partition(seed, oracle) {
        Err(Error::Infeasible {
            required,
            capacity,
            deficits,
        }) => {
            let lines: Vec<String> = deficits
                .iter()
                .map(|(node, bytes)| format!("  node {node}: {bytes} bytes over capacity"))
                .collect();
            return Err(Failure {
                code: 2,
                message: format!(
                    "infeasible: {required} bytes required, {capacity} available\n{}",
                    lines.join("\n")
                ),
            });
        }
        other => other?,
    };
    let report_json = json(&report)?;
    let node_csv = {
        let mut out = String::from("node,bytes,memory_bytes\n");
        for (i, (b, m)) in report
            .bytes_per_node
            .iter()
            .zip(&report.memory_bytes_per_node)
            .enumerate()
        {
            out.push_str(&format!("{i},{b},{m}\n"));
        }
        out
    };
    if let Some(dir) = &common.out {
        write(dir, "plan.json", json(&plan)?)?;
        write(dir, "report.json", &report_json)?;
        write(dir, "series/node_load.csv", &node_csv)?;
    }
    match common.format {
        Format::Json => print!("{report_json}"),
        Format::Csv => print!("{node_csv}"),
        Format::Table => {
            println!("model {} on {} nodes", report.model, report.nodes);
            println!("chosen plan ({}): imbalance {:.6}", report.source, report.imbalance);
            for (name, imb) in &report.baseline_imbalance {
                println!("  {name:<13} imbalance {imb:.6}");
            }
            for (i, (b, m)) in report
                .bytes_per_node
                .iter()
                .zip(&report.memory_bytes_per_node)
                .enumerate()
            {
                println!("  node {i}: {b:.3} bytes/step, {m} bytes resident");
            }
            println!(
                "memory check: {}",
                if report.memory_ok { "ok" } else { "over capacity" }
            );
            if let Some(o) = &report.oracle {
                println!(
                    "oracle: heuristic {} exact {} over {} candidates ({})",
                    o.heuristic_objective,
                    o.exact_objective,
                    o.candidates,
                    if o.equal { "equal" } else { "DIFFERENT" }
                );
            }
            if let Some(e) = &report.exec {
                println!(
                    "step: serialized {} us, pipelined {} us",
                    e.serialized_us, e.pipelined_us
                );
            }
            if let Some(p) = &report.ps {
                println!(
                    "ps: {} RPCs per PS uncoalesced ({} us), {} coalesced ({} us)",
                    p.uncoalesced_rpcs_per_ps, p.uncoalesced_step_us, p.coalesced_rpcs_per_ps, p.coalesced_step_us
                );
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    audit: &'a AuditReport,
    protocol_violations: &'a [String],
    report: &'a SimReport,
}

#[derive(Serialize)]
struct SweepRow {
    seed: u64,
    pass: bool,
    final_state: String,
    violations: usize,
    protocol_violations: Vec<String>,
}

#[derive(Serialize)]
struct SweepReport {
    seeds: u64,
    passed: u64,
    chaos: bool,
    runs: Vec<SweepRow>,
}

pub fn simulate(common: &Common, seeds: Option<u64>, chaos: bool) -> CmdResult {
    let (s, seed) = load(common)?;
    if let Some(n) = seeds {
        return sweep(common, &s, seed, n, chaos);
    }
    let scenario = s.sim().map_err(with_path(&common.scenario))?;
    let report = run(scenario, seed)?;
    let audit = audit_exactly_once(&report);
    let protocol = protocol_violations(&report);
    let pass = audit.pass && protocol.is_empty();
    let full = json(&SimulateReport {
        audit: &audit,
        protocol_violations: &protocol,
        report: &report,
    })?;
    let reader = csv_bytes(|b| report.write_reader_csv(b))?;
    if let Some(dir) = &common.out {
        write(dir, "report.json", &full)?;
        write(dir, "series/reader.csv", &reader)?;
        write(
            dir,
            "series/advancing.csv",
            csv_bytes(|b| report.write_advancing_csv(b))?,
        )?;
        write(
            dir,
            "series/chip_demand.csv",
            csv_bytes(|b| write_chip_demand_csv(&report, scenario.chips, b))?,
        )?;
    }
    match common.format {
        Format::Json => print!("{full}"),
        Format::Csv => print!("{}", String::from_utf8_lossy(&reader)),
        Format::Table => {
            let committed = report.epochs.iter().filter(|e| e.committed).count();
            println!("final state: {}", report.final_state);
            println!("epochs: {} committed of {} attempts", committed, report.epochs.len());
            println!("checkpoints: {}", report.checkpoints.len());
            match report.final_watermark() {
                Some(w) => println!("final watermark: event {w}"),
                None => println!("final watermark: none"),
            }
            if let Some(rate) = report.advancing_rate() {
                println!("advancing rate: {rate:.4}x");
            }
            if let Some(f) = report.preemption_commit_fraction() {
                println!("preempted epochs committed early: {:.1}%", 100.0 * f);
            }
            for v in &protocol {
                println!("protocol: {v}");
            }
            println!("exactly-once: {}", if pass { "PASS" } else { "FAIL" });
        }
    }
    if pass {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: format!(
                "audit failed: {} event violations, {} protocol violations",
                audit.violations.len(),
                protocol.len()
            ),
        })
    }
}

fn sweep(common: &Common, s: &ScenarioFile, first: u64, n: u64, chaos: bool) -> CmdResult {
    let fixed = if chaos {
        None
    } else {
        Some(s.sim().map_err(with_path(&common.scenario))?)
    };
    let mut runs = Vec::with_capacity(n as usize);
    for seed in first..first.saturating_add(n) {
        let scenario = match fixed {
            Some(sc) => sc.clone(),
            None => chaos_scenario(seed),
        };
        let report = run(&scenario, seed)?;
        let audit = audit_exactly_once(&report);
        let protocol = protocol_violations(&report);
        runs.push(SweepRow {
            seed,
            pass: audit.pass && protocol.is_empty(),
            final_state: report.final_state.to_string(),
            violations: audit.violations.len(),
            protocol_violations: protocol,
        });
    }
    let passed = runs.iter().filter(|r| r.pass).count() as u64;
    let summary = SweepReport {
        seeds: n,
        passed,
        chaos,
        runs,
    };
    let text = json(&summary)?;
    if let Some(dir) = &common.out {
        write(dir, "sweep.json", &text)?;
    }
    match common.format {
        Format::Json => print!("{text}"),
        Format::Csv => {
            println!("seed,pass,final_state,violations");
            for r in &summary.runs {
                println!("{},{},{},{}", r.seed, r.pass, r.final_state, r.violations);
            }
        }
        Format::Table => {
            for r in summary.runs.iter().filter(|r| !r.pass) {
                println!("seed {}: FAIL ({} violations)", r.seed, r.violations);
            }
            let verdict = if passed == n { "PASS" } else { "FAIL" };
            println!("exactly-once: {verdict} ({passed}/{n} seeds)");
        }
    }
    if passed == n {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: format!("{} of {n} seeds failed the audit", n - passed),
        })
    }
}

fn load_state(path: &Path) -> Result<SigService, Failure> {
    SigService::load_snapshot(path).map_err(with_path(path))
}

fn metrics_csv(m: &SigMetrics) -> String {
    format!(
        "metric,value\nhits,{}\nmisses,{}\nhit_rate,{}\nready_blocks,{}\nmean_consumers_per_ready_block,{}\npeak_consumers,{}\n",
        m.hits, m.misses, m.hit_rate, m.ready_blocks, m.mean_consumers_per_ready_block, m.peak_consumers
    )
}

#[derive(Serialize)]
struct ReplaySummary {
    metrics: SigMetrics,
    warm_hit_rate: Option<f64>,
    /// Hits and misses recounted from the event log.
    recount_hits: u64,
    recount_misses: u64,
    total_evaluations: u64,
    max_evaluations_per_component: u64,
    lig_evaluations: u64,
    /// Evaluations performed by this invocation, per component.
    new_evaluations: BTreeMap<CanonicalKey, u64>,
    rematerialized_components: usize,
}

pub fn sig_replay(common: &Common, state: Option<&Path>) -> CmdResult {
    let (s, seed) = load(common)?;
    let mut cfg = s.sig().map_err(with_path(&common.scenario))?.clone();
    if common.seed.is_some() {
        cfg.seed = seed;
    }
    let mut service = match state {
        Some(p) if p.exists() => load_state(p)?,
        _ => SigService::new(cfg.scheduling),
    };
    let before = service.evaluations.clone();
    let report = replay_into(&mut service, &cfg)?;
    let new_evaluations: BTreeMap<CanonicalKey, u64> = service
        .evaluations
        .iter()
        .map(|(k, n)| (*k, n - before.get(k).copied().unwrap_or(0)))
        .filter(|(_, n)| *n > 0)
        .collect();
    let (recount_hits, recount_misses) = service.log.iter().fold((0, 0), |(h, m), e| match e {
        SigEvent::Hit { .. } => (h + 1, m),
        SigEvent::Miss { .. } => (h, m + 1),
        _ => (h, m),
    });
    let summary = ReplaySummary {
        rematerialized_components: new_evaluations.keys().filter(|k| before.contains_key(k)).count(),
        metrics: report.metrics.clone(),
        warm_hit_rate: report.warm_hit_rate,
        recount_hits,
        recount_misses,
        total_evaluations: service.evaluations.values().sum(),
        max_evaluations_per_component: report.max_evaluations_per_component,
        lig_evaluations: report.lig_evaluations,
        new_evaluations,
    };
    if let Some(p) = state {
        service.save_snapshot(p).map_err(with_path(p))?;
    }
    let text = json(&summary)?;
    if let Some(dir) = &common.out {
        write(dir, "report.json", &text)?;
    }
    match common.format {
        Format::Json => print!("{text}"),
        Format::Csv => print!("{}", metrics_csv(&summary.metrics)),
        Format::Table => {
            let m = &summary.metrics;
            println!("hit rate: {:.4} ({} hits, {} misses)", m.hit_rate, m.hits, m.misses);
            if let Some(w) = summary.warm_hit_rate {
                println!("hit rate after warm-up: {w:.4}");
            }
            let agree = recount_hits == m.hits && recount_misses == m.misses;
            println!(
                "event-log recount: {recount_hits} hits, {recount_misses} misses ({})",
                if agree { "match" } else { "MISMATCH" }
            );
            println!(
                "reuse: mean {:.3}, peak {} consumers per block",
                m.mean_consumers_per_ready_block, m.peak_consumers
            );
            println!(
                "worker evaluations: {} this run, {} total, max {} per component (LIG would run {})",
                summary.new_evaluations.values().sum::<u64>(),
                summary.total_evaluations,
                summary.max_evaluations_per_component,
                summary.lig_evaluations
            );
            println!("re-materialized components: {}", summary.rematerialized_components);
        }
    }
    Ok(())
}

pub fn sig_evict(state: &Path, predicate: &Predicate, format: Format) -> CmdResult {
    let mut service = load_state(state)?;
    let pred = if let Some(f) = &predicate.raw_field {
        if !service.field_index.contains_key(f) {
            return Err(Failure::input(format!("unknown raw field `{f}`")));
        }
        EvictPredicate::RawField(f.clone())
    } else if let Some(p) = &predicate.pipeline {
        if !service.client_priority.contains_key(p) && !service.entries.values().any(|e| e.consumers.contains(p)) {
            return Err(Failure::input(format!("unknown pipeline `{p}`")));
        }
        EvictPredicate::Pipeline(p.clone())
    } else {
        let raw = predicate.key.as_deref().unwrap_or_default();
        let key = CanonicalKey::from_hex(raw).ok_or_else(|| Failure::input(format!("malformed key `{raw}`")))?;
        EvictPredicate::Key(key)
    };
    let evicted = service.evict_query(&pred)?;
    service.save_snapshot(state).map_err(with_path(state))?;
    let keys: Vec<String> = evicted.iter().map(|b| b.to_string()).collect();
    match format {
        Format::Json => print!("{}", json(&keys)?),
        Format::Csv => {
            println!("block");
            for k in &keys {
                println!("{k}");
            }
        }
        Format::Table => println!("evicted {} entries", keys.len()),
    }
    Ok(())
}

pub fn sig_metrics(state: Option<&Path>, format: Format) -> CmdResult {
    let service = match state {
        Some(p) => load_state(p)?,
        None => SigService::new(Default::default()),
    };
    let m = service.metrics();
    match format {
        Format::Json => print!("{}", json(&m)?),
        Format::Csv => print!("{}", metrics_csv(&m)),
        Format::Table => {
            println!("hits: {}", m.hits);
            println!("misses: {}", m.misses);
            println!("hit rate: {:.4}", m.hit_rate);
            println!("ready blocks: {}", m.ready_blocks);
            println!(
                "mean consumers per ready block: {:.3}",
                m.mean_consumers_per_ready_block
            );
            println!("peak consumers: {}", m.peak_consumers);
            println!("pending tasks: {}", service.pending_tasks());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CostReport<'a> {
    #[serde(flatten)]
    comparison: &'a trainsim::cost::SigLigComparison,
    sig_share_fraction: f64,
}

pub fn cost(common: &Common) -> CmdResult {
    let (s, _) = load(common)?;
    let c = s.run_cost().map_err(with_path(&common.scenario))?;
    let text = json(&CostReport {
        comparison: &c,
        sig_share_fraction: c.sig_share_fraction(),
    })?;
    let table = csv_bytes(|b| c.write_csv(b))?;
    if let Some(dir) = &common.out {
        write(dir, "report.json", &text)?;
        write(dir, "series/cost.csv", &table)?;
    }
    match common.format {
        Format::Json => print!("{text}"),
        Format::Csv => print!("{}", String::from_utf8_lossy(&table)),
        Format::Table => {
            println!(
                "{:<16} {:>12} {:>12} {:>10} {:>8}",
                "model", "SIG total", "LIG total", "reduction", "readers"
            );
            for m in &c.models {
                println!(
                    "{:<16} {:>12.2} {:>12.2} {:>9.2}% {:>7.2}x",
                    m.name,
                    m.sig.total,
                    m.lig.total,
                    100.0 * m.reduction,
                    m.reader_ratio
                );
            }
            println!("geomean reduction: {:.4}", c.geomean_reduction);
            println!(
                "SIG pool share of SIG-mode cost: {:.2}%",
                100.0 * c.sig_share_fraction()
            );
        }
    }
    Ok(())
}
