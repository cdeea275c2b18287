//! One JSON file describing a whole experiment. Every section except the
//! version and seed is optional; each command reads the sections it needs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost::{calibration_models, compare_sig_lig, ResourceProfile, SigLigComparison, TcoParams};
use crate::error::{Error, Result};
use crate::exec::{pipelined_step, serialized_step, ContentionModel, ExecMode, StepCost};
use crate::partition::{
    exact_partition_oracle, load_imbalance, memory_bytes, row_partition_all, search_hybrid, table_partition,
    HybridConfig, OracleConfig, PartitionPlan, RowScheme, TrafficStats,
};
use crate::ps::{ps_step_time, rpc_count, shard_rows_over_ps, stacked_layout, PsNetwork};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sig::workload::ReplayConfig;
use crate::sim::SimScenario;
use crate::workload::{BatchGenerator, ModelSpec};

pub const SCENARIO_VERSION: &str = "trainsim/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub version: String,
    pub seed: u64,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub partition: Option<PartitionSection>,
    #[serde(default)]
    pub exec: Option<ExecSection>,
    #[serde(default)]
    pub ps: Option<PsSection>,
    #[serde(default)]
    pub sig: Option<ReplayConfig>,
    #[serde(default)]
    pub sim: Option<SimScenario>,
    #[serde(default)]
    pub cost: Option<CostSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    /// Name of an entry in `models`.
    pub model: String,
    pub nodes: u32,
    #[serde(default)]
    pub traffic: TrafficSource,
    #[serde(default)]
    pub search: HybridConfig,
}

/// Where per-row lookup rates come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrafficSource {
    /// Expected unique lookups from each table's declared distribution.
    Declared { batch_size: usize },
    /// Averaged over batches drawn with the scenario seed.
    Sampled { batch_size: usize, batches: usize },
    /// Rates given per table, one per row.
    Explicit { tables: BTreeMap<String, Vec<f64>> },
}

impl Default for TrafficSource {
    fn default() -> Self {
        Self::Declared { batch_size: 1024 }
    }
}

/// TensorCore and SparseCore time per step, for the execution estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecSection {
    pub tc_us: f64,
    pub sc_us: f64,
    #[serde(default)]
    pub contention: ContentionModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsSection {
    pub model: String,
    pub ps_count: u32,
    pub n_cores: u64,
    #[serde(default = "default_ps_batch")]
    pub batch_size: usize,
    /// Stack compatible tables into shared variables.
    #[serde(default)]
    pub stacked: bool,
    #[serde(default)]
    pub network: PsNetwork,
}

fn default_ps_batch() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(default)]
    pub params: TcoParams,
    /// Use the built-in five-model calibration instead of `profiles`.
    #[serde(default)]
    pub calibration: bool,
    #[serde(default)]
    pub profiles: Vec<ResourceProfile>,
}

impl CostSection {
    pub fn profiles(&self) -> Vec<ResourceProfile> {
        if self.calibration {
            calibration_models()
        } else {
            self.profiles.clone()
        }
    }
}

impl ScenarioFile {
    /// Parses and validates. Syntax and schema errors carry line and column.
    pub fn parse(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn model(&self, name: &str) -> Result<&ModelSpec> {
        self.models
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::NotFound(format!("model `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.version != SCENARIO_VERSION {
            bad.push(format!(
                "unrecognized version `{}` (expected `{SCENARIO_VERSION}`)",
                self.version
            ));
        }
        let mut collect = |r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Validation(v)) => bad.extend(v),
            Err(e) => bad.push(e.to_string()),
        };
        let mut names = std::collections::BTreeSet::new();
        for m in &self.models {
            if !names.insert(m.name.as_str()) {
                collect(Err(Error::InvalidArgument(format!("duplicate model `{}`", m.name))));
            }
            collect(m.validate());
        }
        if let Some(p) = &self.partition {
            match self.model(&p.model) {
                Err(_) => collect(Err(Error::InvalidArgument(format!(
                    "partition.model `{}` is not among models",
                    p.model
                )))),
                Ok(m) => {
                    if let TrafficSource::Explicit { tables } = &p.traffic {
                        for t in tables.keys().filter(|t| m.table(t).is_none()) {
                            collect(Err(Error::InvalidArgument(format!(
                                "partition.traffic names unknown table `{t}`"
                            ))));
                        }
                    }
                }
            }
            if p.nodes == 0 {
                collect(Err(Error::InvalidArgument("partition.nodes must be >= 1".into())));
            }
        }
        if let Some(e) = &self.exec {
            collect(StepCost::new(e.tc_us, e.sc_us, ExecMode::Pipelined).map(|_| ()));
        }
        if let Some(ps) = &self.ps {
            if self.model(&ps.model).is_err() {
                collect(Err(Error::InvalidArgument(format!(
                    "ps.model `{}` is not among models",
                    ps.model
                ))));
            }
            if ps.ps_count == 0 || ps.n_cores == 0 || ps.batch_size == 0 {
                collect(Err(Error::InvalidArgument(
                    "ps.ps_count, ps.n_cores and ps.batch_size must be >= 1".into(),
                )));
            }
        }
        if let Some(s) = &self.sig {
            if s.models == 0 || s.components_per_model > s.pool_size {
                collect(Err(Error::InvalidArgument(
                    "sig needs models >= 1 and components_per_model <= pool_size".into(),
                )));
            }
        }
        if let Some(sim) = &self.sim {
            collect(sim.validate());
        }
        if let Some(c) = &self.cost {
            collect(c.params.validate());
            for p in &c.profiles {
                collect(p.validate());
            }
            match (c.calibration, c.profiles.is_empty()) {
                (true, false) => collect(Err(Error::InvalidArgument(
                    "cost: set either calibration or profiles, not both".into(),
                ))),
                (false, true) => collect(Err(Error::InvalidArgument(
                    "cost: no profiles given and calibration is off".into(),
                ))),
                _ => {}
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    fn section<'a, T>(&self, s: &'a Option<T>, name: &str) -> Result<&'a T> {
        s.as_ref()
            .ok_or_else(|| Error::MissingInput(format!("scenario section `{name}`")))
    }

    pub fn traffic(&self, seed: u64) -> Result<TrafficStats> {
        let p = self.section(&self.partition, "partition")?;
        let model = self.model(&p.model)?;
        match &p.traffic {
            TrafficSource::Declared { batch_size } => Ok(TrafficStats::from_declared(&model.tables, *batch_size)),
            TrafficSource::Sampled { batch_size, batches } => {
                let generator = BatchGenerator::new(model)?;
                let mut rng = rng_from_seed(derive_seed(seed, 0x7a5));
                let drawn: Vec<_> = (0..*batches)
                    .map(|i| generator.generate(*batch_size, (i * batch_size) as u64, &mut rng))
                    .collect();
                TrafficStats::from_batches(&model.tables, &drawn)
            }
            TrafficSource::Explicit { tables } => Ok(TrafficStats {
                per_table: tables.clone(),
            }),
        }
    }

    /// Hybrid plan plus the report comparing it with simple baselines.
    pub fn run_partition(&self, seed: u64, oracle: bool) -> Result<(PartitionPlan, PartitionReport)> {
        let p = self.section(&self.partition, "partition")?;
        let model = self.model(&p.model)?;
        let stats = self.traffic(seed)?;
        let outcome = search_hybrid(&model.tables, p.nodes, &stats, &p.search)?;
        let load = load_imbalance(&outcome.plan, &stats, &model.tables)?;
        let mem = memory_bytes(&outcome.plan, &model.tables)?;
        let mut baselines = BTreeMap::new();
        for (name, plan) in [
            (
                "row_block",
                row_partition_all(&model.tables, p.nodes, RowScheme::Block)?,
            ),
            (
                "row_cyclic",
                row_partition_all(&model.tables, p.nodes, RowScheme::Cyclic)?,
            ),
            ("table_greedy", table_partition(&model.tables, p.nodes, &stats)?),
        ] {
            baselines.insert(
                name.to_string(),
                load_imbalance(&plan, &stats, &model.tables)?.imbalance,
            );
        }
        let oracle = if oracle {
            let cfg = OracleConfig {
                column_splits: p.search.column_splits.clone(),
                mem_capacity_per_node: p.search.mem_capacity_per_node,
                penalty: p.search.penalty.clone(),
                ..OracleConfig::default()
            };
            let o = exact_partition_oracle(&model.tables, p.nodes, &stats, &cfg)?;
            Some(OracleComparison {
                heuristic_objective: outcome.objective,
                exact_objective: o.objective,
                candidates: o.candidates,
                equal: (outcome.objective - o.objective).abs() <= 1e-9 * o.objective.abs().max(1.0),
            })
        } else {
            None
        };
        let report = PartitionReport {
            model: model.name.clone(),
            nodes: p.nodes,
            objective: outcome.objective,
            source: outcome.source.clone(),
            imbalance: load.imbalance,
            bytes_per_node: load.bytes_per_node,
            memory_bytes_per_node: mem.clone(),
            mem_capacity_per_node: p.search.mem_capacity_per_node,
            memory_ok: p
                .search
                .mem_capacity_per_node
                .is_none_or(|cap| mem.iter().all(|&m| m <= cap)),
            baseline_imbalance: baselines,
            oracle,
            exec: self.exec.map(|e| exec_estimate(&e)),
            ps: self.ps.as_ref().map(|ps| self.ps_estimate(ps, seed)).transpose()?,
        };
        Ok((outcome.plan, report))
    }

    fn ps_estimate(&self, ps: &PsSection, seed: u64) -> Result<PsEstimate> {
        let model = self.model(&ps.model)?;
        let layout = if ps.stacked {
            stacked_layout(&model.tables, ps.ps_count)?
        } else {
            shard_rows_over_ps(&model.tables, ps.ps_count, RowScheme::Cyclic)?
        };
        let mut rng = rng_from_seed(derive_seed(seed, 0x95));
        let batch = BatchGenerator::new(model)?.generate(ps.batch_size, 0, &mut rng);
        let tables = layout.effective_tables() as u64;
        let plain = rpc_count(ps.n_cores, tables, ps.ps_count, false, 1)?;
        let merged = rpc_count(ps.n_cores, tables, ps.ps_count, true, 1)?;
        Ok(PsEstimate {
            effective_tables: tables,
            uncoalesced_rpcs_per_ps: plain.per_ps_rpcs_per_step,
            coalesced_rpcs_per_ps: merged.per_ps_rpcs_per_step,
            uncoalesced_step_us: ps_step_time(&layout, &batch, &plain, &ps.network)?,
            coalesced_step_us: ps_step_time(&layout, &batch, &merged, &ps.network)?,
        })
    }

    pub fn run_cost(&self) -> Result<SigLigComparison> {
        let c = self.section(&self.cost, "cost")?;
        compare_sig_lig(&c.profiles(), &c.params)
    }

    pub fn sim(&self) -> Result<&SimScenario> {
        self.section(&self.sim, "sim")
    }

    pub fn sig(&self) -> Result<&ReplayConfig> {
        self.section(&self.sig, "sig")
    }
}

fn exec_estimate(e: &ExecSection) -> ExecEstimate {
    let cost = StepCost {
        tc_us: e.tc_us,
        sc_us: e.sc_us,
        mode: ExecMode::Pipelined,
    };
    ExecEstimate {
        serialized_us: serialized_step(&cost),
        pipelined_us: pipelined_step(&cost, &e.contention),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub heuristic_objective: f64,
    pub exact_objective: f64,
    pub candidates: u64,
    pub equal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecEstimate {
    pub serialized_us: f64,
    pub pipelined_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsEstimate {
    pub effective_tables: u64,
    pub uncoalesced_rpcs_per_ps: u64,
    pub coalesced_rpcs_per_ps: u64,
    pub uncoalesced_step_us: f64,
    pub coalesced_step_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub model: String,
    pub nodes: u32,
    pub objective: f64,
    /// Which candidate won the search.
    pub source: String,
    pub imbalance: f64,
    pub bytes_per_node: Vec<f64>,
    pub memory_bytes_per_node: Vec<u64>,
    pub mem_capacity_per_node: Option<u64>,
    pub memory_ok: bool,
    /// Imbalance of the uniform row plans and greedy whole-table placement.
    pub baseline_imbalance: BTreeMap<String, f64>,
    pub oracle: Option<OracleComparison>,
    pub exec: Option<ExecEstimate>,
    pub ps: Option<PsEstimate>,
}

#[cfg(test)]
mod tests {
    use super::*;

    const WORKED: &str = r#"{
        "version": "trainsim/1",
        "seed": 1,
        "models": [{"name": "two", "tables": [
            {"name": "T0", "vocab_size": 4, "dim": 64, "mean_valency": 1, "valency_dist": {"kind": "constant", "value": 1}},
            {"name": "T1", "vocab_size": 4, "dim": 64, "mean_valency": 1, "valency_dist": {"kind": "constant", "value": 1}}
        ]}],
        "partition": {"model": "two", "nodes": 4, "traffic": {"kind": "explicit", "tables": {
            "T0": [0.6, 0.3, 0.2, 0.1], "T1": [0.6, 0.3, 0.2, 0.1]}}}
    }"#;

    #[test]
    fn worked_example_prefers_balanced_plan() {
        let s = ScenarioFile::parse(WORKED).unwrap();
        let (plan, report) = s.run_partition(s.seed, true).unwrap();
        assert!((report.imbalance - 1.0).abs() < 1e-12);
        assert!((report.baseline_imbalance["row_block"] - 2.0).abs() < 1e-12);
        assert!(report.oracle.unwrap().equal);
        plan.validate_complete(&s.models[0].tables).unwrap();
    }

    #[test]
    fn seed_is_mandatory() {
        let text = WORKED.replace("\"seed\": 1,", "");
        let e = ScenarioFile::parse(&text).unwrap_err();
        assert!(e.to_string().contains("seed"), "{e}");
    }

    #[test]
    fn dangling_names_are_reported() {
        let text = WORKED.replace("\"model\": \"two\"", "\"model\": \"three\"");
        match ScenarioFile::parse(&text) {
            Err(Error::Validation(v)) => assert!(v[0].contains("three")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let text = WORKED.replace("trainsim/1", "trainsim/9");
        assert!(matches!(ScenarioFile::parse(&text), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_section_is_an_input_error() {
        let s = ScenarioFile::parse(WORKED).unwrap();
        assert!(matches!(s.run_cost(), Err(Error::MissingInput(_))));
    }

    #[test]
    fn typo_in_top_level_key_fails_with_position() {
        let text = WORKED.replace("\"partition\"", "\"partitoin\"");
        let e = ScenarioFile::parse(&text).unwrap_err();
        assert!(e.to_string().contains("line"), "{e}");
    }
}
