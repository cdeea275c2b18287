//! Sampled per-feature statistics for feedback-directed partitioning.
//!
//! A small fraction of training batches is profiled into [`ProfileRecord`]s,
//! which are folded into a [`StatsDb`] keyed by feature name only. The
//! partitioner reads it back through [`traffic_from_stats`].

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{PartitionPlan, TrafficStats};
use crate::rng::SimRng;
use crate::workload::{dedup_rows, EmbeddingTableSpec, ModelSpec, TrainingBatch};

pub const DEFAULT_PROFILE_RATE: f64 = 0.03;
pub const DB_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub feature: String,
    pub values_per_example: f64,
    pub unique_values_per_batch: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_shard_load: Option<Vec<f64>>,
    pub batch_size: usize,
    pub step: u64,
}

impl ProfileRecord {
    /// Computes a record for `feature` from every lookup in `batch`. With a
    /// plan, per-node bytes of the deduplicated lookups are included.
    pub fn from_batch(
        batch: &TrainingBatch,
        model: &ModelSpec,
        feature: &str,
        step: u64,
        plan: Option<&PartitionPlan>,
    ) -> Result<Self> {
        let spec = model
            .table_for_feature(feature)
            .ok_or_else(|| Error::NotFound(format!("feature `{feature}`")))?;
        let occurrences = batch.occurrences(&spec.name)?;
        let unique = dedup_rows(&occurrences).unique_rows;
        let per_shard_load = plan.map(|p| shard_loads(p, spec, &unique));
        Ok(Self {
            feature: feature.to_string(),
            values_per_example: if batch.batch_size == 0 {
                0.0
            } else {
                occurrences.len() as f64 / batch.batch_size as f64
            },
            unique_values_per_batch: unique.len() as u64,
            per_shard_load,
            batch_size: batch.batch_size,
            step,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.values_per_example.is_finite() || self.values_per_example < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "record for `{}`: values_per_example must be finite and >= 0",
                self.feature
            )));
        }
        let total = self.values_per_example * self.batch_size as f64;
        if self.unique_values_per_batch as f64 > total + 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "record for `{}`: {} unique values exceed {} total",
                self.feature, self.unique_values_per_batch, total
            )));
        }
        Ok(())
    }

    /// Unique share of all values in the batch; 0 for an empty batch.
    pub fn unique_fraction(&self) -> f64 {
        let total = self.values_per_example * self.batch_size as f64;
        if total > 0.0 {
            (self.unique_values_per_batch as f64 / total).min(1.0)
        } else {
            0.0
        }
    }
}

fn shard_loads(plan: &PartitionPlan, spec: &EmbeddingTableSpec, unique: &[u64]) -> Vec<f64> {
    let mut loads = vec![0.0; plan.node_count as usize];
    for shard in plan.shards.iter().filter(|s| s.table == spec.name) {
        let hits = unique.iter().filter(|&&r| shard.rows.contains(r)).count();
        loads[shard.node.0 as usize] +=
            (hits as u64 * shard.cols.width() as u64 * spec.bytes_per_element as u64) as f64;
    }
    loads
}

/// Emits a record with probability `rate`. Exactly one uniform draw is
/// consumed per call so sampling decisions do not depend on batch content.
pub fn maybe_profile(
    batch: &TrainingBatch,
    model: &ModelSpec,
    feature: &str,
    rate: f64,
    step: u64,
    rng: &mut SimRng,
) -> Result<Option<ProfileRecord>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("profile rate {rate} outside [0, 1]")));
    }
    let draw: f64 = rng.random();
    if draw >= rate {
        return Ok(None);
    }
    ProfileRecord::from_batch(batch, model, feature, step, None).map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub feature: String,
    pub mean_valency: f64,
    pub mean_unique_fraction: f64,
    pub sample_count: u64,
    pub last_updated: u64,
}

/// How running means absorb new samples.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanMode {
    /// Exact arithmetic mean over every accepted sample.
    #[default]
    Exact,
    /// Exponential moving average with weight `alpha` on the newest sample.
    Decay { alpha: f64 },
}

/// Feature statistics database, persisted as one JSON document:
///
/// ```json
/// { "version": 1, "mode": {"kind": "exact"},
///   "features": { "<name>": { "feature": ..., "mean_valency": ..., ... } } }
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsDb {
    pub version: u32,
    pub mode: MeanMode,
    pub features: BTreeMap<String, FeatureStats>,
    /// Raw (valency, unique fraction) samples, kept only in audit mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retained: Option<BTreeMap<String, Vec<(f64, f64)>>>,
}

impl StatsDb {
    pub fn new() -> Self {
        Self {
            version: DB_FORMAT_VERSION,
            ..Self::default()
        }
    }

    pub fn with_mode(mode: MeanMode) -> Result<Self> {
        if let MeanMode::Decay { alpha } = mode {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(Error::InvalidArgument(format!("decay alpha {alpha} outside (0, 1]")));
            }
        }
        Ok(Self { mode, ..Self::new() })
    }

    /// Keeps every raw sample so means can be recomputed and compared.
    pub fn audited() -> Self {
        Self {
            retained: Some(BTreeMap::new()),
            ..Self::new()
        }
    }

    pub fn update(&mut self, record: &ProfileRecord) -> Result<()> {
        record.validate()?;
        let valency = record.values_per_example;
        let fraction = record.unique_fraction();
        if let Some(raw) = &mut self.retained {
            raw.entry(record.feature.clone()).or_default().push((valency, fraction));
        }
        let mode = self.mode;
        let entry = self
            .features
            .entry(record.feature.clone())
            .or_insert_with(|| FeatureStats {
                feature: record.feature.clone(),
                mean_valency: 0.0,
                mean_unique_fraction: 0.0,
                sample_count: 0,
                last_updated: record.step,
            });
        entry.sample_count += 1;
        let weight = match mode {
            MeanMode::Exact => 1.0 / entry.sample_count as f64,
            MeanMode::Decay { alpha } if entry.sample_count > 1 => alpha,
            MeanMode::Decay { .. } => 1.0,
        };
        entry.mean_valency += (valency - entry.mean_valency) * weight;
        entry.mean_unique_fraction += (fraction - entry.mean_unique_fraction) * weight;
        entry.last_updated = record.step;
        Ok(())
    }

    pub fn query(&self, feature: &str) -> Option<&FeatureStats> {
        self.features.get(feature)
    }

    /// Compares stored means with a recomputation from retained samples.
    /// Returns the largest absolute deviation found.
    pub fn check_consistency(&self) -> Result<f64> {
        let raw = self
            .retained
            .as_ref()
            .ok_or_else(|| Error::Unsupported("database does not retain raw samples".into()))?;
        if self.mode != MeanMode::Exact {
            return Err(Error::Unsupported("consistency check needs exact means".into()));
        }
        let mut worst = 0.0f64;
        for (name, stats) in &self.features {
            let samples = raw
                .get(name)
                .ok_or_else(|| Error::Validation(vec![format!("no retained samples for `{name}`")]))?;
            if samples.len() as u64 != stats.sample_count {
                return Err(Error::Validation(vec![format!(
                    "`{name}`: {} retained samples, count {}",
                    samples.len(),
                    stats.sample_count
                )]));
            }
            let n = samples.len() as f64;
            let v = samples.iter().map(|s| s.0).sum::<f64>() / n;
            let u = samples.iter().map(|s| s.1).sum::<f64>() / n;
            worst = worst
                .max((v - stats.mean_valency).abs())
                .max((u - stats.mean_unique_fraction).abs());
        }
        Ok(worst)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let db: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if db.version != DB_FORMAT_VERSION {
            return Err(Error::Unsupported(format!(
                "stats database version {} (expected {DB_FORMAT_VERSION})",
                db.version
            )));
        }
        Ok(db)
    }
}

/// Thread-safe handle: many concurrent readers, one writer at a time, each
/// record applied atomically.
#[derive(Debug, Clone, Default)]
pub struct SharedStatsDb {
    inner: Arc<RwLock<StatsDb>>,
}

impl SharedStatsDb {
    pub fn new(db: StatsDb) -> Self {
        Self {
            inner: Arc::new(RwLock::new(db)),
        }
    }

    pub fn update(&self, record: &ProfileRecord) -> Result<()> {
        self.inner.write().expect("stats lock poisoned").update(record)
    }

    pub fn query(&self, feature: &str) -> Option<FeatureStats> {
        self.inner.read().expect("stats lock poisoned").query(feature).cloned()
    }

    pub fn snapshot(&self) -> StatsDb {
        self.inner.read().expect("stats lock poisoned").clone()
    }
}

/// Per-table valency: the sum over the table's bound features of measured
/// means, or the declared `mean_valency` when no bound feature has stats.
pub fn table_valency(db: &StatsDb, model: &ModelSpec, table: &EmbeddingTableSpec) -> f64 {
    let bound: Vec<&str> = if model.features.is_empty() {
        vec![table.name.as_str()]
    } else {
        model
            .features
            .iter()
            .filter(|f| f.table == table.name)
            .map(|f| f.feature.as_str())
            .collect()
    };
    let measured: Vec<f64> = bound
        .iter()
        .filter_map(|f| db.query(f))
        .map(|s| s.mean_valency)
        .collect();
    if measured.is_empty() {
        table.mean_valency
    } else {
        measured.iter().sum()
    }
}

/// Traffic statistics built from measured valency, falling back to the
/// declared value for tables without samples.
pub fn traffic_from_stats(db: &StatsDb, model: &ModelSpec, batch_size: usize) -> TrafficStats {
    let mut stats = TrafficStats::new();
    for t in &model.tables {
        let m = table_valency(db, model, t) * batch_size as f64;
        stats
            .per_table
            .insert(t.name.clone(), TrafficStats::expected_unique(t, m));
    }
    stats
}
