//! Step-time ladder: serialized row-sharded baseline, pipelining, hybrid
//! partitioning from declared statistics, and hybrid partitioning from
//! profiled statistics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{pipelined_step, serialized_step, ContentionModel, ExecMode, StepCost};
use crate::error::{Error, Result};
use crate::fdp::{maybe_profile, traffic_from_stats, StatsDb};
use crate::partition::{
    load_imbalance, row_partition_all, search_hybrid, GranularityPenalty, HybridConfig, PartitionPlan, RowScheme,
    TrafficStats,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::workload::{BatchGenerator, EmbeddingTableSpec, ModelSpec, OptimizerKind, ValencyDist};

/// Embedding-unit time: a fixed per-step cost plus the busiest node's bytes
/// at a sustained bandwidth, scaled by the granularity penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScCostModel {
    pub bytes_per_us: f64,
    pub fixed_us: f64,
}

impl Default for ScCostModel {
    fn default() -> Self {
        Self {
            bytes_per_us: 40.0,
            fixed_us: 2.0,
        }
    }
}

pub fn sc_time_us(
    plan: &PartitionPlan,
    stats: &TrafficStats,
    specs: &[EmbeddingTableSpec],
    penalty: &GranularityPenalty,
    sc: &ScCostModel,
) -> Result<f64> {
    if sc.bytes_per_us <= 0.0 {
        return Err(Error::InvalidArgument("bytes_per_us must be > 0".into()));
    }
    let report = load_imbalance(plan, stats, specs)?;
    Ok(sc.fixed_us + report.max_bytes() / sc.bytes_per_us * penalty.factor(plan.min_split_width(specs)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LadderScenario {
    pub model: ModelSpec,
    pub nodes: u32,
    pub batch_size: usize,
    /// Batches offered to the profiler.
    pub profile_batches: usize,
    pub profile_rate: f64,
    pub sc: ScCostModel,
    pub contention: ContentionModel,
    pub search_budget: usize,
    pub seed: u64,
}

impl Default for LadderScenario {
    fn default() -> Self {
        documented_ladder_scenario()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LadderMode {
    Baseline,
    Pipelining,
    Hybrid,
    Fdp,
}

impl LadderMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Pipelining => "pipelining",
            Self::Hybrid => "hybrid",
            Self::Fdp => "fdp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub model: String,
    pub mode: LadderMode,
    pub tc_us: f64,
    pub sc_us: f64,
    pub step_us: f64,
    /// Baseline step time over this row's step time.
    pub speedup: f64,
}

/// Expected per-row unique lookups under each table's actual valency law.
pub fn actual_traffic(tables: &[EmbeddingTableSpec], batch_size: usize) -> TrafficStats {
    let mut stats = TrafficStats::new();
    for t in tables {
        let m = t.valency_dist.mean(t.mean_valency) * batch_size as f64;
        stats
            .per_table
            .insert(t.name.clone(), TrafficStats::expected_unique(t, m));
    }
    stats
}

/// Builds the profiled statistics database the FDP rung partitions with.
pub fn profile_model(scenario: &LadderScenario) -> Result<StatsDb> {
    let generator = BatchGenerator::new(&scenario.model)?;
    let mut batch_rng = rng_from_seed(derive_seed(scenario.seed, 11));
    let mut sample_rng = rng_from_seed(derive_seed(scenario.seed, 12));
    let features = scenario.model.feature_names();
    let mut db = StatsDb::new();
    for step in 0..scenario.profile_batches {
        let batch = generator.generate(scenario.batch_size, (step * scenario.batch_size) as u64, &mut batch_rng);
        for f in &features {
            if let Some(r) = maybe_profile(
                &batch,
                &scenario.model,
                f,
                scenario.profile_rate,
                step as u64,
                &mut sample_rng,
            )? {
                db.update(&r)?;
            }
        }
    }
    Ok(db)
}

pub fn run_ladder(scenario: &LadderScenario) -> Result<Vec<LadderRow>> {
    let model = &scenario.model;
    model.validate()?;
    let specs = &model.tables;
    let cfg = HybridConfig {
        search_budget: scenario.search_budget,
        ..HybridConfig::default()
    };
    let truth = actual_traffic(specs, scenario.batch_size);
    let declared = TrafficStats::from_declared(specs, scenario.batch_size);
    let db = profile_model(scenario)?;
    let profiled = traffic_from_stats(&db, model, scenario.batch_size);

    let row_plan = row_partition_all(specs, scenario.nodes, RowScheme::Cyclic)?;
    let hybrid_plan = search_hybrid(specs, scenario.nodes, &declared, &cfg)?.plan;
    let fdp_plan = search_hybrid(specs, scenario.nodes, &profiled, &cfg)?.plan;

    let tc = model.dense_step_time_us;
    let sc_of = |plan: &PartitionPlan| sc_time_us(plan, &truth, specs, &cfg.penalty, &scenario.sc);
    let row_sc = sc_of(&row_plan)?;
    let rungs = [
        (LadderMode::Baseline, row_sc, ExecMode::Serialized),
        (LadderMode::Pipelining, row_sc, ExecMode::Pipelined),
        (LadderMode::Hybrid, sc_of(&hybrid_plan)?, ExecMode::Pipelined),
        (LadderMode::Fdp, sc_of(&fdp_plan)?, ExecMode::Pipelined),
    ];
    let mut rows = Vec::new();
    let mut base = None;
    for (mode, sc_us, exec) in rungs {
        let cost = StepCost::new(tc, sc_us, exec)?;
        let step_us = match exec {
            ExecMode::Serialized => serialized_step(&cost),
            ExecMode::Pipelined => pipelined_step(&cost, &scenario.contention),
        };
        let base_us = *base.get_or_insert(step_us);
        rows.push(LadderRow {
            model: model.name.clone(),
            mode,
            tc_us: tc,
            sc_us,
            step_us,
            speedup: base_us / step_us,
        });
    }
    Ok(rows)
}

/// Writes ladder rows as CSV with columns
/// `model,mode,tc_us,sc_us,step_us,speedup`.
pub fn write_sweep_csv<W: Write>(rows: &[LadderRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "mode", "tc_us", "sc_us", "step_us", "speedup"])?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.mode.as_str().to_string(),
            format!("{:.3}", r.tc_us),
            format!("{:.3}", r.sc_us),
            format!("{:.3}", r.step_us),
            format!("{:.4}", r.speedup),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn table(name: &str, vocab: u64, dim: u32, declared: f64, actual: u32, zipf_s: f64) -> EmbeddingTableSpec {
    EmbeddingTableSpec {
        mean_valency: declared,
        valency_dist: ValencyDist::Constant { value: actual },
        zipf_s,
        optimizer: OptimizerKind::element_wise(2),
        ..EmbeddingTableSpec::new(name, vocab, dim)
    }
}

/// Reference scenario for the ladder ordering. `clicks` is declared at
/// valency 1 but really carries 14 values per example, so only profiled
/// statistics reveal it as the heaviest table; the other tables are small
/// and split unevenly by rows over four nodes.
pub fn documented_ladder_scenario() -> LadderScenario {
    let tables = vec![
        table("country", 5, 128, 16.0, 6, 0.76),
        table("clicks", 50, 32, 1.0, 14, 1.05),
        table("device", 5, 32, 8.0, 6, 0.86),
        table("weekday", 7, 32, 8.0, 2, 0.75),
        table("topics", 6, 64, 8.0, 20, 1.14),
    ];
    LadderScenario {
        model: ModelSpec {
            dense_step_time_us: 40.0,
            ..ModelSpec::new("ranker", tables)
        },
        nodes: 4,
        batch_size: 256,
        profile_batches: 400,
        profile_rate: 0.03,
        sc: ScCostModel::default(),
        contention: ContentionModel::default(),
        search_budget: 1024,
        seed: 2024,
    }
}
