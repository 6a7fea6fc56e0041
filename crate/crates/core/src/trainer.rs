//! Plain mini-batch SGD on the hinge loss, with weight snapshots and a
//! metrics log.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Example};
use crate::error::{Error, Result};
use crate::gradients::batch_gradient;
use crate::io::{csv_text, fmt_f64};
use crate::model::{empirical_risk, evaluate, init_params, Dims, ModelConfig, Params};
use crate::rng::{seeded, LabRng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eta: f64,
    pub batch_size: usize,
    pub iters: usize,
    pub snapshot_at: Vec<usize>,
    pub eval_every: usize,
    pub test_size: usize,
    /// Constant in front of the suggested iteration count; informational.
    pub c_t: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 0.1,
            batch_size: 50,
            iters: 50,
            snapshot_at: vec![0, 1, 10, 20, 30, 50],
            eval_every: 10,
            test_size: 500,
            c_t: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::validation("train.eta", "eta must be finite and >= 0"));
        }
        if self.batch_size == 0 || self.batch_size > n_train {
            return Err(Error::validation(
                "train.batch_size",
                format!("need 1 <= batch_size <= N (batch_size = {}, N = {n_train})", self.batch_size),
            ));
        }
        if self.iters == 0 {
            return Err(Error::validation("train.iters", "iters must be >= 1"));
        }
        if let Some(&bad) = self.snapshot_at.iter().find(|&&t| t > self.iters) {
            return Err(Error::validation(
                "train.snapshot_at",
                format!("snapshot iteration {bad} exceeds iters = {}", self.iters),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::validation("train.eval_every", "eval_every must be >= 1"));
        }
        if self.test_size == 0 {
            return Err(Error::validation("train.test_size", "test_size must be >= 1"));
        }
        if self.c_t.is_nan() || self.c_t <= 0.0 {
            return Err(Error::validation("train.c_t", "c_t must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRecord {
    pub iter: usize,
    pub train_hinge: f64,
    pub test_hinge: f64,
    pub zero_one: f64,
    pub attn_relevant: f64,
}

#[derive(Debug, Clone)]
pub struct TrainTrajectory {
    pub initial: Params,
    /// Configured snapshots, sorted by iteration.
    pub snapshots: Vec<(usize, Params)>,
    /// Weights after the last step.
    pub final_params: Params,
    pub iters: usize,
    pub metrics_log: Vec<MetricRecord>,
}

impl TrainTrajectory {
    /// Weights at iteration `t`: the initial point, the final point, or a configured snapshot.
    pub fn params_at(&self, t: usize) -> Result<&Params> {
        if t == 0 {
            return Ok(&self.initial);
        }
        if t == self.iters {
            return Ok(&self.final_params);
        }
        self.snapshots
            .iter()
            .find(|(it, _)| *it == t)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::NotFound(format!("no snapshot at iteration {t}")))
    }

    pub fn metrics_csv(&self) -> String {
        csv_text(
            "iter,train_hinge,test_hinge,zero_one,attn_relevant",
            self.metrics_log.iter().map(|r| {
                vec![
                    r.iter.to_string(),
                    fmt_f64(r.train_hinge),
                    fmt_f64(r.test_hinge),
                    fmt_f64(r.zero_one),
                    fmt_f64(r.attn_relevant),
                ]
            }),
        )
    }
}

/// One step `W ← W − η · mean_batch ∇ℓ` for `W_Q, W_K, W_V, W_O`.
pub fn sgd_step(params: &Params, batch: &[&Example], eta: f64) -> Result<Params> {
    let grad = batch_gradient(params, batch)?;
    let mut next = params.clone();
    for (w, g) in next.trainable_mut().into_iter().zip(grad.matrices()) {
        w.add_scaled(-eta, g)?;
    }
    Ok(next)
}

/// `round(c_t · η^{-3/5} / α_*)`
pub fn suggested_iters(eta: f64, alpha_star: f64, c_t: f64) -> Result<usize> {
    if !(eta > 0.0 && alpha_star > 0.0 && c_t > 0.0) {
        return Err(Error::InvalidArgument("eta, alpha_star and c_t must be positive".into()));
    }
    Ok((c_t * eta.powf(-0.6) / alpha_star).round() as usize)
}

/// Epoch-wise shuffling without replacement. A partial batch at the end of
/// an epoch is dropped and the next epoch reshuffles.
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: LabRng,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            cursor: 0,
            batch_size,
            rng: seeded(seed, Stream::Batches),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn next_indices(&mut self) -> &[usize] {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        out
    }
}

/// Runs `tc.iters` SGD steps from the seeded initialization. Metrics are
/// logged at iteration 0, every `eval_every` steps and at the last step.
pub fn train(tc: &TrainConfig, dataset: &Dataset, testset: &Dataset, mc: &ModelConfig) -> Result<TrainTrajectory> {
    tc.validate(dataset.len())?;
    if testset.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let initial = init_params(mc, Dims::new(&dataset.config, mc))?;
    let record = |t: usize, p: &Params| -> Result<MetricRecord> {
        let test = evaluate(p, testset)?;
        Ok(MetricRecord {
            iter: t,
            train_hinge: empirical_risk(p, dataset)?,
            test_hinge: test.hinge,
            zero_one: test.zero_one_error,
            attn_relevant: test.attn_on_relevant,
        })
    };

    let mut wanted = tc.snapshot_at.clone();
    wanted.sort_unstable();
    wanted.dedup();
    let mut snapshots = Vec::new();
    if wanted.first() == Some(&0) {
        snapshots.push((0, initial.clone()));
    }
    let mut metrics_log = vec![record(0, &initial)?];

    let mut sampler = BatchSampler::new(dataset.len(), tc.batch_size, tc.seed);
    let mut params = initial.clone();
    for t in 1..=tc.iters {
        let batch: Vec<&Example> = sampler.next_indices().iter().map(|&i| &dataset.examples[i]).collect();
        params = sgd_step(&params, &batch, tc.eta)?;
        if wanted.binary_search(&t).is_ok() {
            snapshots.push((t, params.clone()));
        }
        if t % tc.eval_every == 0 || t == tc.iters {
            metrics_log.push(record(t, &params)?);
        }
    }
    Ok(TrainTrajectory {
        initial,
        snapshots,
        final_params: params,
        iters: tc.iters,
        metrics_log,
    })
}
