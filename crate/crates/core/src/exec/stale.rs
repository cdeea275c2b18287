//! Toy embedding model trained with fresh or one-step-stale embedding
//! gradients.
//!
//! Each example pools (averages) one to four embedding rows and predicts a
//! scalar through a linear readout; targets come from a hidden teacher of the
//! same shape plus Gaussian noise. Training is minibatch SGD on squared loss
//! over a fixed training set. In the stale arm the embedding gradient computed
//! at step t is applied at step t + 1, while the readout stays fresh.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StaleTrainConfig {
    pub vocab: usize,
    pub dim: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// 0 (fresh) or 1 (one step late).
    pub staleness: u32,
    pub seed: u64,
    pub train_examples: usize,
    pub batch_size: usize,
    pub label_noise: f64,
    /// Loss over the full training set is recorded every this many steps.
    pub eval_every: usize,
}

impl Default for StaleTrainConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            dim: 8,
            steps: 2000,
            learning_rate: 0.05,
            staleness: 1,
            seed: 7,
            train_examples: 1024,
            batch_size: 32,
            label_noise: 0.1,
            eval_every: 100,
        }
    }
}

impl StaleTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.staleness > 1 {
            return Err(Error::InvalidArgument(format!(
                "staleness {} not in {{0, 1}}",
                self.staleness
            )));
        }
        if self.steps < 10 {
            return Err(Error::InvalidArgument(
                "stale experiment needs at least 10 steps".into(),
            ));
        }
        if self.vocab == 0 || self.dim == 0 || self.train_examples == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "vocab, dim, examples and batch size must be >= 1".into(),
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument("learning rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    /// Training-set loss at step 0, every `eval_every` steps, and at the end.
    pub curve: Vec<(usize, f64)>,
    pub final_loss: f64,
}

struct Example {
    rows: Vec<usize>,
    target: f64,
}

struct Params {
    emb: Vec<f64>,
    readout: Vec<f64>,
}

fn normal_vec(n: usize, scale: f64, rng: &mut SimRng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn pooled(emb: &[f64], rows: &[usize], dim: usize) -> Vec<f64> {
    let mut h = vec![0.0; dim];
    for &r in rows {
        for (k, v) in h.iter_mut().enumerate() {
            *v += emb[r * dim + k];
        }
    }
    let inv = 1.0 / rows.len() as f64;
    h.iter_mut().for_each(|v| *v *= inv);
    h
}

fn predict(p: &Params, rows: &[usize], dim: usize) -> f64 {
    pooled(&p.emb, rows, dim)
        .iter()
        .zip(&p.readout)
        .map(|(a, b)| a * b)
        .sum()
}

fn dataset(cfg: &StaleTrainConfig) -> Vec<Example> {
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 1));
    let scale = 1.0 / (cfg.dim as f64).sqrt();
    let teacher = Params {
        emb: normal_vec(cfg.vocab * cfg.dim, 1.0, &mut rng),
        readout: normal_vec(cfg.dim, scale, &mut rng),
    };
    let noise = Normal::new(0.0, cfg.label_noise.max(0.0)).expect("finite noise");
    (0..cfg.train_examples)
        .map(|_| {
            let valency = rng.random_range(1..=4);
            let rows: Vec<usize> = (0..valency).map(|_| rng.random_range(0..cfg.vocab)).collect();
            let target = predict(&teacher, &rows, cfg.dim) + noise.sample(&mut rng);
            Example { rows, target }
        })
        .collect()
}

fn full_loss(p: &Params, data: &[Example], dim: usize) -> f64 {
    data.iter()
        .map(|e| {
            let err = predict(p, &e.rows, dim) - e.target;
            0.5 * err * err
        })
        .sum::<f64>()
        / data.len() as f64
}

/// Trains one arm and returns its loss curve.
pub fn train_toy(cfg: &StaleTrainConfig) -> Result<ToyRun> {
    cfg.validate()?;
    let dim = cfg.dim;
    let data = dataset(cfg);
    // Same initialization and minibatch order for both arms.
    let mut init_rng = rng_from_seed(derive_seed(cfg.seed, 2));
    let mut p = Params {
        emb: normal_vec(cfg.vocab * dim, 0.1, &mut init_rng),
        readout: normal_vec(dim, 0.1, &mut init_rng),
    };
    let mut order_rng = rng_from_seed(derive_seed(cfg.seed, 3));
    let arm = if cfg.staleness == 0 { "fresh" } else { "stale" };
    let every = cfg.eval_every.max(1);

    let mut curve = vec![(0, full_loss(&p, &data, dim))];
    let mut pending: Option<Vec<(usize, f64)>> = None;
    for step in 1..=cfg.steps {
        let mut g_emb: Vec<(usize, f64)> = Vec::new();
        let mut g_out = vec![0.0; dim];
        let mut batch_loss = 0.0;
        let inv_b = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let e = &data[order_rng.random_range(0..data.len())];
            let h = pooled(&p.emb, &e.rows, dim);
            let err = h.iter().zip(&p.readout).map(|(a, b)| a * b).sum::<f64>() - e.target;
            batch_loss += 0.5 * err * err * inv_b;
            for k in 0..dim {
                g_out[k] += err * h[k] * inv_b;
            }
            let share = err * inv_b / e.rows.len() as f64;
            for &r in &e.rows {
                for k in 0..dim {
                    g_emb.push((r * dim + k, share * p.readout[k]));
                }
            }
        }
        if !batch_loss.is_finite() {
            return Err(Error::Divergence { step, arm });
        }
        for (w, g) in p.readout.iter_mut().zip(&g_out) {
            *w -= cfg.learning_rate * g;
        }
        let apply = if cfg.staleness == 0 {
            Some(g_emb)
        } else {
            pending.replace(g_emb)
        };
        if let Some(g) = apply {
            for (i, v) in g {
                p.emb[i] -= cfg.learning_rate * v;
            }
        }
        if step % every == 0 && step != cfg.steps {
            curve.push((step, full_loss(&p, &data, dim)));
        }
    }
    // Flush the gradient still in flight so both arms see every update.
    if let Some(g) = pending {
        for (i, v) in g {
            p.emb[i] -= cfg.learning_rate * v;
        }
    }
    let final_loss = full_loss(&p, &data, dim);
    if !final_loss.is_finite() {
        return Err(Error::Divergence { step: cfg.steps, arm });
    }
    curve.push((cfg.steps, final_loss));
    Ok(ToyRun { curve, final_loss })
}

/// Final training-set losses of the stale and fresh arms.
pub fn stale_gradient_experiment(cfg: &StaleTrainConfig) -> Result<(f64, f64)> {
    let stale = train_toy(&StaleTrainConfig {
        staleness: 1,
        ..cfg.clone()
    })?;
    let fresh = train_toy(&StaleTrainConfig {
        staleness: 0,
        ..cfg.clone()
    })?;
    Ok((stale.final_loss, fresh.final_loss))
}
