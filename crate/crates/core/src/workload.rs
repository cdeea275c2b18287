//! Synthetic training batches.
//!
//! Categorical feature values are drawn per table from a Zipf law over the
//! table's vocabulary (rank 0 is the hottest row), with a per-example valency
//! drawn from the table's valency distribution.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Poisson, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Vocabularies up to this size get an exact cumulative table; larger ones
/// fall back to rejection-inversion sampling.
pub const ZIPF_TABULATE_LIMIT: u64 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerClass {
    ElementWise,
    RowWise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizerKind {
    pub kind: OptimizerClass,
    /// Slots stored per weight (1 for plain SGD, 2 with one accumulator, ...).
    #[serde(default = "one")]
    pub params_width_multiplier: u32,
}

fn one() -> u32 {
    1
}

fn four() -> u32 {
    4
}

impl OptimizerKind {
    pub fn element_wise(multiplier: u32) -> Self {
        Self {
            kind: OptimizerClass::ElementWise,
            params_width_multiplier: multiplier,
        }
    }

    pub fn row_wise(multiplier: u32) -> Self {
        Self {
            kind: OptimizerClass::RowWise,
            params_width_multiplier: multiplier,
        }
    }

    pub fn allows_column_split(&self) -> bool {
        self.kind == OptimizerClass::ElementWise
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::element_wise(1)
    }
}

/// How many values an example contributes to a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValencyDist {
    Constant {
        value: u32,
    },
    /// Poisson with the table's `mean_valency`, clamped to `max`.
    PoissonTruncated {
        max: u32,
    },
    /// Uniform choice from the listed valencies.
    Empirical {
        values: Vec<u32>,
    },
}

impl ValencyDist {
    /// Expected valency of the distribution itself (not the declared mean).
    pub fn mean(&self, declared_mean: f64) -> f64 {
        match self {
            ValencyDist::Constant { value } => *value as f64,
            ValencyDist::PoissonTruncated { .. } => declared_mean,
            ValencyDist::Empirical { values } => {
                values.iter().map(|&v| v as f64).sum::<f64>() / values.len().max(1) as f64
            }
        }
    }

    pub fn max(&self) -> Option<u32> {
        match self {
            ValencyDist::Constant { value } => Some(*value),
            ValencyDist::PoissonTruncated { max } => Some(*max),
            ValencyDist::Empirical { values } => values.iter().copied().max(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTableSpec {
    pub name: String,
    pub vocab_size: u64,
    pub dim: u32,
    /// Declared feature values per example; what a partitioner assumes when no
    /// profile exists.
    pub mean_valency: f64,
    pub valency_dist: ValencyDist,
    #[serde(default)]
    pub zipf_s: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "four")]
    pub bytes_per_element: u32,
}

impl EmbeddingTableSpec {
    /// A table with constant valency 1, uniform access and 4-byte elements.
    pub fn new(name: impl Into<String>, vocab_size: u64, dim: u32) -> Self {
        Self {
            name: name.into(),
            vocab_size,
            dim,
            mean_valency: 1.0,
            valency_dist: ValencyDist::Constant { value: 1 },
            zipf_s: 0.0,
            optimizer: OptimizerKind::default(),
            bytes_per_element: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.name.is_empty() {
            problems.push("table name must not be empty".to_string());
        }
        if self.vocab_size == 0 {
            problems.push(format!("{}: vocab_size must be >= 1", self.name));
        }
        if self.dim == 0 {
            problems.push(format!("{}: dim must be >= 1", self.name));
        }
        if !(self.mean_valency.is_finite() && self.mean_valency >= 0.0) {
            problems.push(format!("{}: mean_valency must be finite and >= 0", self.name));
        }
        if !(self.zipf_s.is_finite() && self.zipf_s >= 0.0) {
            problems.push(format!("{}: zipf_s must be finite and >= 0", self.name));
        }
        if self.bytes_per_element == 0 {
            problems.push(format!("{}: bytes_per_element must be >= 1", self.name));
        }
        if self.optimizer.params_width_multiplier == 0 {
            problems.push(format!("{}: params_width_multiplier must be >= 1", self.name));
        }
        if let ValencyDist::Empirical { values } = &self.valency_dist {
            if values.is_empty() {
                problems.push(format!("{}: empirical valency list is empty", self.name));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Bytes of one full row including optimizer slots.
    pub fn row_bytes(&self) -> u64 {
        self.dim as u64 * self.bytes_per_element as u64 * self.optimizer.params_width_multiplier as u64
    }

    pub fn footprint_bytes(&self) -> u64 {
        self.vocab_size * self.row_bytes()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBinding {
    pub feature: String,
    pub table: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub tables: Vec<EmbeddingTableSpec>,
    /// Abstract TensorCore time per training step.
    #[serde(default)]
    pub dense_step_time_us: f64,
    /// Feature name to table. When empty, each table is its own feature.
    #[serde(default)]
    pub features: Vec<FeatureBinding>,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, tables: Vec<EmbeddingTableSpec>) -> Self {
        Self {
            name: name.into(),
            tables,
            dense_step_time_us: 0.0,
            features: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut names = BTreeSet::new();
        for t in &self.tables {
            if let Err(Error::Validation(p)) = t.validate() {
                problems.extend(p);
            }
            if !names.insert(t.name.as_str()) {
                problems.push(format!("duplicate table name `{}`", t.name));
            }
        }
        let mut seen = BTreeSet::new();
        for f in &self.features {
            if !seen.insert(f.feature.as_str()) {
                problems.push(format!("feature `{}` is bound more than once", f.feature));
            }
            if !names.contains(f.table.as_str()) {
                problems.push(format!("feature `{}` refers to unknown table `{}`", f.feature, f.table));
            }
        }
        if !(self.dense_step_time_us.is_finite() && self.dense_step_time_us >= 0.0) {
            problems.push("dense_step_time_us must be finite and >= 0".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn table(&self, name: &str) -> Option<&EmbeddingTableSpec> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Table backing `feature`; a table name is accepted as its own feature.
    pub fn table_for_feature(&self, feature: &str) -> Option<&EmbeddingTableSpec> {
        match self.features.iter().find(|f| f.feature == feature) {
            Some(binding) => self.table(&binding.table),
            None => self.table(feature),
        }
    }

    /// Feature names, falling back to table names when no bindings exist.
    pub fn feature_names(&self) -> Vec<String> {
        if self.features.is_empty() {
            self.tables.iter().map(|t| t.name.clone()).collect()
        } else {
            self.features.iter().map(|f| f.feature.clone()).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingBatch {
    pub batch_size: usize,
    /// Table name to per-example row indices.
    pub lookups: BTreeMap<String, Vec<Vec<u64>>>,
    pub event_ids: Vec<u64>,
}

impl TrainingBatch {
    /// Occurrences of `table` flattened in example order.
    pub fn occurrences(&self, table: &str) -> Result<Vec<u64>> {
        let per_example = self
            .lookups
            .get(table)
            .ok_or_else(|| Error::NotFound(format!("table `{table}` not in batch")))?;
        Ok(per_example.iter().flatten().copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupResult {
    pub unique_rows: Vec<u64>,
    pub inverse: Vec<usize>,
}

impl DedupResult {
    pub fn reconstruct(&self) -> Vec<u64> {
        self.inverse.iter().map(|&i| self.unique_rows[i]).collect()
    }
}

/// Zipf sampler over ranks `[0, n)` with `P(r) ∝ 1/(r+1)^s`.
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    n: u64,
    inner: ZipfInner,
}

#[derive(Debug, Clone)]
enum ZipfInner {
    Uniform,
    Cumulative(Vec<f64>),
    RejectionInversion(Zipf<f64>),
}

impl ZipfSampler {
    pub fn new(s: f64, n: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("zipf: n must be >= 1".into()));
        }
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::InvalidArgument(format!("zipf: bad exponent {s}")));
        }
        let inner = if s == 0.0 || n == 1 {
            ZipfInner::Uniform
        } else if n <= ZIPF_TABULATE_LIMIT {
            let mut acc = 0.0;
            let cdf = (0..n)
                .map(|r| {
                    acc += ((r + 1) as f64).powf(-s);
                    acc
                })
                .collect();
            ZipfInner::Cumulative(cdf)
        } else {
            let z = Zipf::new(n as f64, s).map_err(|e| Error::InvalidArgument(format!("zipf: {e}")))?;
            ZipfInner::RejectionInversion(z)
        };
        Ok(Self { n, inner })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn sample(&self, rng: &mut SimRng) -> u64 {
        match &self.inner {
            ZipfInner::Uniform => rng.random_range(0..self.n),
            ZipfInner::Cumulative(cdf) => {
                let total = *cdf.last().expect("n >= 1");
                let u = rng.random::<f64>() * total;
                let idx = cdf.partition_point(|&c| c <= u);
                (idx as u64).min(self.n - 1)
            }
            ZipfInner::RejectionInversion(z) => (z.sample(rng) as u64 - 1).min(self.n - 1),
        }
    }
}

/// One draw from a Zipf law over `[0, n)`. Builds the sampler on every call;
/// use [`ZipfSampler`] for repeated draws.
pub fn sample_zipf(s: f64, n: u64, rng: &mut SimRng) -> Result<u64> {
    Ok(ZipfSampler::new(s, n)?.sample(rng))
}

/// Probability mass of rank `r` under the Zipf law, for analytic models.
pub fn zipf_pmf(s: f64, n: u64) -> Vec<f64> {
    let weights: Vec<f64> = (0..n).map(|r| ((r + 1) as f64).powf(-s)).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

fn sample_valency(table: &EmbeddingTableSpec, rng: &mut SimRng) -> u32 {
    match &table.valency_dist {
        ValencyDist::Constant { value } => *value,
        ValencyDist::PoissonTruncated { max } => {
            if table.mean_valency <= 0.0 {
                return 0;
            }
            let p = Poisson::new(table.mean_valency).expect("validated mean");
            let v: f64 = p.sample(rng);
            (v as u32).min(*max)
        }
        ValencyDist::Empirical { values } => values[rng.random_range(0..values.len())],
    }
}

/// Caches per-table samplers for repeated batch generation.
#[derive(Debug, Clone)]
pub struct BatchGenerator {
    model: ModelSpec,
    samplers: Vec<ZipfSampler>,
}

impl BatchGenerator {
    pub fn new(model: &ModelSpec) -> Result<Self> {
        model.validate()?;
        let samplers = model
            .tables
            .iter()
            .map(|t| ZipfSampler::new(t.zipf_s, t.vocab_size))
            .collect::<Result<_>>()?;
        Ok(Self {
            model: model.clone(),
            samplers,
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn generate(&self, batch_size: usize, first_event_id: u64, rng: &mut SimRng) -> TrainingBatch {
        let mut lookups = BTreeMap::new();
        for (table, sampler) in self.model.tables.iter().zip(&self.samplers) {
            let rows: Vec<Vec<u64>> = (0..batch_size)
                .map(|_| {
                    let k = sample_valency(table, rng);
                    (0..k).map(|_| sampler.sample(rng)).collect()
                })
                .collect();
            lookups.insert(table.name.clone(), rows);
        }
        TrainingBatch {
            batch_size,
            lookups,
            event_ids: (first_event_id..first_event_id + batch_size as u64).collect(),
        }
    }
}

pub fn generate_batch(
    model: &ModelSpec,
    batch_size: usize,
    first_event_id: u64,
    rng: &mut SimRng,
) -> Result<TrainingBatch> {
    Ok(BatchGenerator::new(model)?.generate(batch_size, first_event_id, rng))
}

/// Unique values of a row list in first-occurrence order.
pub fn dedup_rows(occurrences: &[u64]) -> DedupResult {
    let mut index: HashMap<u64, usize> = HashMap::with_capacity(occurrences.len());
    let mut unique_rows = Vec::new();
    let inverse = occurrences
        .iter()
        .map(|&row| {
            *index.entry(row).or_insert_with(|| {
                unique_rows.push(row);
                unique_rows.len() - 1
            })
        })
        .collect();
    DedupResult { unique_rows, inverse }
}

pub fn dedup(batch: &TrainingBatch, table: &str) -> Result<DedupResult> {
    Ok(dedup_rows(&batch.occurrences(table)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn table(name: &str, vocab: u64, dist: ValencyDist, mean: f64, s: f64) -> EmbeddingTableSpec {
        EmbeddingTableSpec {
            mean_valency: mean,
            valency_dist: dist,
            zipf_s: s,
            ..EmbeddingTableSpec::new(name, vocab, 8)
        }
    }

    #[test]
    fn zipf_rejects_empty_vocab() {
        let mut rng = rng_from_seed(0);
        assert!(matches!(sample_zipf(1.0, 0, &mut rng), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zipf_single_outcome() {
        let mut rng = rng_from_seed(1);
        for s in [0.0, 0.5, 1.0, 3.0] {
            let z = ZipfSampler::new(s, 1).unwrap();
            assert!((0..1000).all(|_| z.sample(&mut rng) == 0));
        }
    }

    #[test]
    fn zipf_uniform_case() {
        let mut rng = rng_from_seed(2);
        let z = ZipfSampler::new(0.0, 4).unwrap();
        let mut counts = [0u32; 4];
        let draws = 100_000;
        for _ in 0..draws {
            counts[z.sample(&mut rng) as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn zipf_rank0_matches_harmonic_sum() {
        // Oracle: P(rank 0) = 1 / H(100) with H summed directly.
        let harmonic: f64 = (1..=100).map(|k| 1.0 / k as f64).sum();
        let expected = 1.0 / harmonic;
        assert!((expected - 0.19278).abs() < 1e-5);
        let mut rng = rng_from_seed(3);
        let z = ZipfSampler::new(1.0, 100).unwrap();
        let draws = 1_000_000;
        let hits = (0..draws).filter(|_| z.sample(&mut rng) == 0).count();
        assert!((hits as f64 / draws as f64 - expected).abs() < 0.005);
    }

    #[test]
    fn zipf_frequencies_non_increasing() {
        let mut rng = rng_from_seed(4);
        let z = ZipfSampler::new(1.2, 8).unwrap();
        let mut counts = [0u32; 8];
        for _ in 0..400_000 {
            counts[z.sample(&mut rng) as usize] += 1;
        }
        assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    }

    #[test]
    fn large_vocab_uses_rejection_inversion() {
        let mut rng = rng_from_seed(5);
        let n = ZIPF_TABULATE_LIMIT * 4;
        let z = ZipfSampler::new(1.1, n).unwrap();
        assert!((0..1000).all(|_| z.sample(&mut rng) < n));
    }

    #[test]
    fn empty_batch() {
        let model = ModelSpec::new("m", vec![EmbeddingTableSpec::new("t", 10, 4)]);
        let b = generate_batch(&model, 0, 5, &mut rng_from_seed(0)).unwrap();
        assert!(b.event_ids.is_empty());
        assert!(b.lookups["t"].is_empty());
    }

    #[test]
    fn constant_valency_one() {
        let model = ModelSpec::new(
            "m",
            vec![
                EmbeddingTableSpec::new("a", 10, 4),
                table("b", 50, ValencyDist::Constant { value: 1 }, 1.0, 1.0),
            ],
        );
        let b = generate_batch(&model, 200, 0, &mut rng_from_seed(9)).unwrap();
        for rows in b.lookups.values() {
            assert!(rows.iter().all(|r| r.len() == 1));
        }
        assert_eq!(b.event_ids, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn poisson_valency_mean_within_two_percent() {
        let t = table("p", 1000, ValencyDist::PoissonTruncated { max: 1000 }, 10.0, 1.0);
        let model = ModelSpec::new("m", vec![t]);
        let b = generate_batch(&model, 10_000, 0, &mut rng_from_seed(17)).unwrap();
        let lens: Vec<usize> = b.lookups["p"].iter().map(Vec::len).collect();
        let mean = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
        assert!((mean - 10.0).abs() / 10.0 < 0.02, "mean {mean}");
    }

    #[test]
    fn truncation_bounds_valency() {
        let t = table("p", 1000, ValencyDist::PoissonTruncated { max: 6 }, 10.0, 1.0);
        let model = ModelSpec::new("m", vec![t]);
        let b = generate_batch(&model, 2000, 0, &mut rng_from_seed(1)).unwrap();
        assert!(b.lookups["p"].iter().all(|r| r.len() <= 6));
    }

    #[test]
    fn rows_within_vocab() {
        let t = table("z", 37, ValencyDist::Empirical { values: vec![1, 3, 9] }, 4.0, 0.9);
        let model = ModelSpec::new("m", vec![t]);
        let b = generate_batch(&model, 500, 0, &mut rng_from_seed(2)).unwrap();
        assert!(b.lookups["z"].iter().flatten().all(|&r| r < 37));
    }

    #[test]
    fn dedup_examples() {
        let d = dedup_rows(&[7, 7, 7]);
        assert_eq!(d.unique_rows, vec![7]);
        assert_eq!(d.inverse, vec![0, 0, 0]);
        let d = dedup_rows(&[3, 1, 2]);
        assert_eq!(d.unique_rows, vec![3, 1, 2]);
        assert_eq!(d.inverse, vec![0, 1, 2]);
    }

    #[test]
    fn dedup_unknown_table() {
        let model = ModelSpec::new("m", vec![EmbeddingTableSpec::new("t", 10, 4)]);
        let b = generate_batch(&model, 3, 0, &mut rng_from_seed(0)).unwrap();
        assert!(matches!(dedup(&b, "nope"), Err(Error::NotFound(_))));
    }

    #[test]
    fn dedup_reconstructs_large_batch() {
        let t = table("t", 100, ValencyDist::Constant { value: 1 }, 1.0, 1.0);
        let model = ModelSpec::new("m", vec![t]);
        let b = generate_batch(&model, 10_000, 0, &mut rng_from_seed(8)).unwrap();
        let occ = b.occurrences("t").unwrap();
        let d = dedup(&b, "t").unwrap();
        assert_eq!(d.reconstruct(), occ);
        let distinct: BTreeSet<u64> = occ.iter().copied().collect();
        assert_eq!(distinct.len(), d.unique_rows.len());
    }

    #[test]
    fn model_validation_catches_bad_bindings() {
        let mut m = ModelSpec::new(
            "m",
            vec![EmbeddingTableSpec::new("t", 10, 4), EmbeddingTableSpec::new("t", 5, 4)],
        );
        m.features.push(FeatureBinding {
            feature: "f".into(),
            table: "missing".into(),
        });
        let Err(Error::Validation(p)) = m.validate() else {
            panic!("expected validation error")
        };
        assert_eq!(p.len(), 2);
    }
}
