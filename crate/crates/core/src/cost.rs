//! Advancing rates, pipeline TCO roll-ups and SIG-versus-LIG comparisons.
//!
//! Costs are abstract units. Only ratios between them carry meaning.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Advancing rate the initial backfill should reach, inclusive.
pub const INITIAL_TRAINING_TARGET: (f64, f64) = (100.0, 500.0);

/// Events trained per unit of wall time, as a multiple of real time.
pub fn advancing_rate(data_days: f64, wall_days: f64) -> Result<f64> {
    if !wall_days.is_finite() || wall_days <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "wall time must be positive, got {wall_days}"
        )));
    }
    Ok(data_days / wall_days)
}

/// Whether `rate` is fast enough, and not absurdly fast, for initial training.
pub fn initial_training_in_target(rate: f64) -> bool {
    (INITIAL_TRAINING_TARGET.0..=INITIAL_TRAINING_TARGET.1).contains(&rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvancingRateSample {
    pub data_days: f64,
    pub wall_days: f64,
    pub rate: f64,
}

impl AdvancingRateSample {
    pub fn new(data_days: f64, wall_days: f64) -> Result<Self> {
        Ok(Self {
            data_days,
            wall_days,
            rate: advancing_rate(data_days, wall_days)?,
        })
    }
}

/// Geometric mean, computed as `exp(mean(ln x))`.
pub fn geomean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("geomean of an empty list".into()));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "geomean needs positive finite values, got {bad}"
        )));
    }
    let mean_log = values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64;
    Ok(mean_log.exp())
}

/// Per-unit costs over one unit of simulated time, plus the horizon they
/// are amortized over.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcoParams {
    pub tpu_chip: f64,
    pub cpu_core: f64,
    pub ram_gib: f64,
    pub tray: f64,
    /// Per provisioned kW.
    pub power_provisioning: f64,
    /// Per delivered kW.
    pub power_delivery: f64,
    pub horizon: f64,
}

impl Default for TcoParams {
    fn default() -> Self {
        Self {
            tpu_chip: 8.0,
            cpu_core: 1.0,
            ram_gib: 0.1,
            tray: 4.0,
            power_provisioning: 0.6,
            power_delivery: 0.4,
            horizon: 1.0,
        }
    }
}

impl TcoParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("tpu_chip", self.tpu_chip),
            ("cpu_core", self.cpu_core),
            ("ram_gib", self.ram_gib),
            ("tray", self.tray),
            ("power_provisioning", self.power_provisioning),
            ("power_delivery", self.power_delivery),
            ("horizon", self.horizon),
        ];
        let bad: Vec<String> = fields
            .iter()
            .filter(|(_, v)| !v.is_finite() || *v < 0.0)
            .map(|(n, v)| format!("tco.{n} must be a finite non-negative cost, got {v}"))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}

/// Hardware counts for one pipeline component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Resources {
    pub tpu_chips: f64,
    pub cpu_cores: f64,
    pub ram_gib: f64,
    pub trays: f64,
    pub power_kw: f64,
}

impl Resources {
    /// Accelerator hosts: four chips per tray, each chip with four host
    /// cores, 16 GiB of host RAM and half a kW.
    pub fn tpu_hosts(chips: f64) -> Self {
        Self {
            tpu_chips: chips,
            cpu_cores: 4.0 * chips,
            ram_gib: 16.0 * chips,
            trays: chips / 4.0,
            power_kw: 0.5 * chips,
        }
    }

    /// CPU servers with 4 GiB and 10 W per core.
    pub fn cpu(cores: f64) -> Self {
        Self {
            cpu_cores: cores,
            ram_gib: 4.0 * cores,
            power_kw: 0.01 * cores,
            ..Self::default()
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        Self {
            tpu_chips: self.tpu_chips * k,
            cpu_cores: self.cpu_cores * k,
            ram_gib: self.ram_gib * k,
            trays: self.trays * k,
            power_kw: self.power_kw * k,
        }
    }

    pub fn cost(&self, p: &TcoParams) -> f64 {
        p.horizon
            * (self.tpu_chips * p.tpu_chip
                + self.cpu_cores * p.cpu_core
                + self.ram_gib * p.ram_gib
                + self.trays * p.tray
                + self.power_kw * (p.power_provisioning + p.power_delivery))
    }

    fn check(&self, path: &str, out: &mut Vec<String>) {
        for (n, v) in [
            ("tpu_chips", self.tpu_chips),
            ("cpu_cores", self.cpu_cores),
            ("ram_gib", self.ram_gib),
            ("trays", self.trays),
            ("power_kw", self.power_kw),
        ] {
            if !v.is_finite() || v < 0.0 {
                out.push(format!("{path}.{n} must be a finite non-negative count, got {v}"));
            }
        }
    }
}

/// Everything one model's training pipeline consumes, under either input
/// mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceProfile {
    pub name: String,
    pub trainer: Resources,
    #[serde(default)]
    pub parameter_servers: Resources,
    /// Readers when features come from the shared service.
    pub sig_readers: Resources,
    /// Readers when each pipeline transforms its own input.
    pub lig_readers: Resources,
    /// The whole shared pool, before amortization.
    #[serde(default)]
    pub sig_pool: Resources,
    #[serde(default = "one")]
    pub sharing_models: u32,
}

fn one() -> u32 {
    1
}

impl ResourceProfile {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let p = format!("models[{}]", self.name);
        self.trainer.check(&format!("{p}.trainer"), &mut bad);
        self.parameter_servers
            .check(&format!("{p}.parameter_servers"), &mut bad);
        self.sig_readers.check(&format!("{p}.sig_readers"), &mut bad);
        self.lig_readers.check(&format!("{p}.lig_readers"), &mut bad);
        self.sig_pool.check(&format!("{p}.sig_pool"), &mut bad);
        if self.sharing_models == 0 {
            bad.push(format!("{p}.sharing_models must be at least 1"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        Self {
            name: self.name.clone(),
            trainer: self.trainer.scale(k),
            parameter_servers: self.parameter_servers.scale(k),
            sig_readers: self.sig_readers.scale(k),
            lig_readers: self.lig_readers.scale(k),
            sig_pool: self.sig_pool.scale(k),
            sharing_models: self.sharing_models,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum InputMode {
    Sig,
    Lig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineCost {
    pub tpu_cost: f64,
    pub reader_cost: f64,
    pub ps_cost: f64,
    pub sig_share_cost: f64,
    pub total: f64,
}

/// Linear roll-up. In SIG mode the pool cost is split evenly across its
/// sharing models; LIG pays for its full reader footprint and no pool.
pub fn pipeline_tco(resources: &ResourceProfile, params: &TcoParams, mode: InputMode) -> PipelineCost {
    let tpu_cost = resources.trainer.cost(params);
    let ps_cost = resources.parameter_servers.cost(params);
    let (reader_cost, sig_share_cost) = match mode {
        InputMode::Sig => (
            resources.sig_readers.cost(params),
            resources.sig_pool.cost(params) / resources.sharing_models.max(1) as f64,
        ),
        InputMode::Lig => (resources.lig_readers.cost(params), 0.0),
    };
    PipelineCost {
        tpu_cost,
        reader_cost,
        ps_cost,
        sig_share_cost,
        total: tpu_cost + reader_cost + ps_cost + sig_share_cost,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub name: String,
    pub sig: PipelineCost,
    pub lig: PipelineCost,
    /// `1 - total_sig / total_lig`.
    pub reduction: f64,
    /// LIG reader cost over SIG reader cost.
    pub reader_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigLigComparison {
    pub models: Vec<ModelComparison>,
    /// One minus the geometric mean of the per-model SIG/LIG cost ratios.
    pub geomean_reduction: f64,
}

impl SigLigComparison {
    /// Summed SIG pool shares as a fraction of summed SIG-mode totals.
    pub fn sig_share_fraction(&self) -> f64 {
        let share: f64 = self.models.iter().map(|m| m.sig.sig_share_cost).sum();
        let total: f64 = self.models.iter().map(|m| m.sig.total).sum();
        if total > 0.0 {
            share / total
        } else {
            0.0
        }
    }

    pub fn reduction_range(&self) -> (f64, f64) {
        self.models
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
                (lo.min(m.reduction), hi.max(m.reduction))
            })
    }

    /// Columns: model, mode, tpu_cost, reader_cost, ps_cost,
    /// sig_share_cost, total, reduction. Two rows per model.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "model",
            "mode",
            "tpu_cost",
            "reader_cost",
            "ps_cost",
            "sig_share_cost",
            "total",
            "reduction",
        ])?;
        for m in &self.models {
            for (mode, c) in [("SIG", &m.sig), ("LIG", &m.lig)] {
                w.write_record([
                    m.name.clone(),
                    mode.to_string(),
                    c.tpu_cost.to_string(),
                    c.reader_cost.to_string(),
                    c.ps_cost.to_string(),
                    c.sig_share_cost.to_string(),
                    c.total.to_string(),
                    m.reduction.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-model reductions and their geometric mean.
pub fn compare_sig_lig(models: &[ResourceProfile], params: &TcoParams) -> Result<SigLigComparison> {
    if models.is_empty() {
        return Err(Error::InvalidArgument(
            "compare_sig_lig needs at least one model".into(),
        ));
    }
    let mut rows = Vec::with_capacity(models.len());
    let mut ratios = Vec::with_capacity(models.len());
    for m in models {
        let sig = pipeline_tco(m, params, InputMode::Sig);
        let lig = pipeline_tco(m, params, InputMode::Lig);
        if lig.total.is_nan() || lig.total <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "model {} has zero LIG cost; reduction is undefined",
                m.name
            )));
        }
        let ratio = sig.total / lig.total;
        ratios.push(ratio);
        rows.push(ModelComparison {
            name: m.name.clone(),
            reduction: 1.0 - ratio,
            reader_ratio: if sig.reader_cost > 0.0 {
                lig.reader_cost / sig.reader_cost
            } else {
                f64::INFINITY
            },
            sig,
            lig,
        });
    }
    let g = geomean(&ratios)?;
    Ok(SigLigComparison {
        models: rows,
        geomean_reduction: 1.0 - g,
    })
}

/// Models sharing the pool in [`calibration_models`].
pub const CALIBRATION_SHARING_MODELS: u32 = 22;

/// Five recommendation pipelines whose LIG reader footprints are 4.3x to
/// 7.5x their SIG footprints. Under [`TcoParams::default`] the per-model
/// reductions run from about 12% to 27% with a geometric mean near 18%,
/// and the 520-core SIG pool, split 22 ways, is about 4% of SIG-mode cost.
pub fn calibration_models() -> Vec<ResourceProfile> {
    let pool = Resources::cpu(520.0);
    // (name, chips, parameter-server cores, SIG reader cores, LIG reader cores)
    let rows: [(&str, f64, f64, f64, f64); 5] = [
        ("ads-ranking", 64.0, 0.0, 38.0, 164.0),
        ("ads-retrieval", 48.0, 40.0, 31.0, 155.0),
        ("feed", 56.0, 0.0, 33.0, 191.0),
        ("video", 40.0, 24.0, 28.0, 185.0),
        ("search", 32.0, 16.0, 27.0, 202.0),
    ];
    rows.iter()
        .map(|&(name, chips, ps, sig, lig)| ResourceProfile {
            name: name.into(),
            trainer: Resources::tpu_hosts(chips),
            parameter_servers: Resources::cpu(ps),
            sig_readers: Resources::cpu(sig),
            lig_readers: Resources::cpu(lig),
            sig_pool: pool,
            sharing_models: CALIBRATION_SHARING_MODELS,
        })
        .collect()
}
