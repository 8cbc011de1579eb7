//! Batch objective, its gradient, and the optimizers that apply it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::PatternCorpus;
use crate::error::{Error, Result};
use crate::losses::{final_loss, kl_from_uniform, kl_gradient, mixture_terms};
use crate::model::{Example, ExpertBundle, ModelParams, SampleForward};
use crate::nn::Parameters;
use crate::projection::SimplexDistribution;

pub const DEFAULT_LEARNING_RATE: f64 = 0.05;

/// Scalar losses of one batch plus the expert load (batch-mean routing
/// probability per expert).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub reconstruction: f64,
    pub balance: f64,
    pub usage: Vec<f64>,
}

impl LossReport {
    pub fn min_usage(&self) -> f64 {
        self.usage.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn forward_batch(bundle: &ExpertBundle, batch: &[Example]) -> Result<Vec<SampleForward>> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch is empty".into()));
    }
    batch.par_iter().map(|ex| bundle.forward(ex)).collect()
}

struct Objective {
    report: LossReport,
    /// Per-sample `(∂L/∂CE, ∂L/∂z)`.
    upstream: Vec<(Vec<f64>, Vec<f64>)>,
}

fn objective(bundle: &ExpertBundle, forwards: &[SampleForward], with_grad: bool) -> Result<Objective> {
    let k = bundle.config.experts;
    let gamma = bundle.config.gamma;
    let n = forwards.len() as f64;

    let mut mean = vec![0.0; k];
    let mut rec_sum = 0.0;
    let mut mixtures = Vec::with_capacity(forwards.len());
    for fwd in forwards {
        let probs = fwd.projection.probs();
        for (m, p) in mean.iter_mut().zip(probs) {
            *m += p / n;
        }
        let terms = mixture_terms(probs, &fwd.ce)?;
        rec_sum += terms.loss;
        mixtures.push(terms);
    }
    let reconstruction = rec_sum / n;
    let balance = kl_from_uniform(&mean);
    let report = LossReport {
        loss: final_loss(reconstruction, balance, gamma),
        reconstruction,
        balance,
        usage: mean.clone(),
    };

    let mut upstream = Vec::new();
    if with_grad {
        let dmean = kl_gradient(&mean);
        for (fwd, terms) in forwards.iter().zip(&mixtures) {
            let dce: Vec<f64> = terms.posterior.iter().map(|r| r / n).collect();
            let dprobs: Vec<f64> = terms
                .dprobs
                .iter()
                .zip(&dmean)
                .map(|(dr, db)| dr / n + gamma * db / n)
                .collect();
            let dz = fwd.projection.backward(&dprobs);
            upstream.push((dce, dz));
        }
    }
    Ok(Objective { report, upstream })
}

/// `L_final` on a batch: mean reconstruction loss plus `γ·L_balance`.
pub fn batch_objective(bundle: &ExpertBundle, batch: &[Example]) -> Result<LossReport> {
    let forwards = forward_batch(bundle, batch)?;
    Ok(objective(bundle, &forwards, false)?.report)
}

/// `L_final` and its gradient w.r.t. every parameter. Gradients pass through
/// the projection via its fixed-support Jacobian.
pub fn batch_gradient(bundle: &ExpertBundle, batch: &[Example]) -> Result<(LossReport, ModelParams)> {
    let forwards = forward_batch(bundle, batch)?;
    let obj = objective(bundle, &forwards, true)?;
    let per_sample: Vec<ModelParams> = forwards
        .par_iter()
        .zip(obj.upstream.par_iter())
        .map(|(fwd, (dce, dz))| bundle.backward(fwd, dce, dz))
        .collect();
    // Fixed summation order keeps steps bit-reproducible.
    let mut iter = per_sample.into_iter();
    let mut grad = iter.next().expect("batch is non-empty");
    for g in iter {
        grad.add_scaled(&g, 1.0);
    }
    Ok((obj.report, grad))
}

fn check_finite(report: &LossReport, step: u64) -> Result<()> {
    if !report.loss.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!(
                "loss = {}, reconstruction = {}, balance = {}",
                report.loss, report.reconstruction, report.balance
            ),
        });
    }
    Ok(())
}

/// One plain SGD step on `L_final`. Returns the losses measured before the update.
pub fn train_step(bundle: &mut ExpertBundle, batch: &[Example], learning_rate: f64) -> Result<LossReport> {
    let (report, grad) = batch_gradient(bundle, batch)?;
    check_finite(&report, bundle.state.step)?;
    if learning_rate != 0.0 {
        bundle.params.add_scaled(&grad, -learning_rate);
    }
    bundle.state.step += 1;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer {other:?} (expected sgd or adam)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Rescale the gradient when its global norm exceeds this value.
    pub clip_norm: Option<f64>,
    /// Decay the learning rate linearly so it reaches zero at this step.
    pub decay_steps: Option<u64>,
}

impl TrainConfig {
    /// Learning rate for the update taken at `step` (counting from 0).
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        match self.decay_steps {
            Some(total) => self.learning_rate * (1.0 - step as f64 / total as f64).max(0.0),
            None => self.learning_rate,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 32,
            optimizer: OptimizerKind::Sgd,
            clip_norm: None,
            decay_steps: None,
        }
    }
}

/// First and second moments, flattened in visit order.
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Drives repeated steps over a corpus with per-epoch shuffling.
pub struct Trainer {
    pub config: TrainConfig,
    adam: Option<AdamState>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be >= 1".into()));
        }
        if !(config.learning_rate >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be >= 0, got {}",
                config.learning_rate
            )));
        }
        if config.decay_steps == Some(0) {
            return Err(Error::InvalidParameter("decay steps must be >= 1".into()));
        }
        Ok(Self { config, adam: None })
    }

    pub fn step(&mut self, bundle: &mut ExpertBundle, batch: &[Example]) -> Result<LossReport> {
        let lr = self.config.learning_rate_at(bundle.state.step);
        if self.config.optimizer == OptimizerKind::Sgd && self.config.clip_norm.is_none() {
            return train_step(bundle, batch, lr);
        }
        let (report, mut grad) = batch_gradient(bundle, batch)?;
        check_finite(&report, bundle.state.step)?;
        if let Some(limit) = self.config.clip_norm {
            let norm = grad.sum_of_squares().sqrt();
            if norm > limit {
                grad.fill_scaled(limit / norm);
            }
        }
        match self.config.optimizer {
            OptimizerKind::Sgd => bundle.params.add_scaled(&grad, -lr),
            OptimizerKind::Adam => {
                let mut g = Vec::new();
                grad.visit("", &mut |_, _, data| g.extend_from_slice(data));
                let state = self.adam.get_or_insert_with(|| AdamState {
                    m: vec![0.0; g.len()],
                    v: vec![0.0; g.len()],
                    t: 0,
                });
                state.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(state.t);
                let c2 = 1.0 - ADAM_BETA2.powi(state.t);
                let mut i = 0;
                bundle.params.visit_mut("", &mut |_, _, data| {
                    for p in data.iter_mut() {
                        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g[i];
                        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        *p -= lr * (state.m[i] / c1) / ((state.v[i] / c2).sqrt() + ADAM_EPS);
                        i += 1;
                    }
                });
            }
        }
        bundle.state.step += 1;
        Ok(report)
    }

    /// Runs `epochs` shuffled passes over `examples`, calling `on_step` after
    /// each update. Stops early once `max_steps` updates have been made.
    pub fn run<F>(
        &mut self,
        bundle: &mut ExpertBundle,
        examples: &[Example],
        epochs: usize,
        max_steps: Option<u64>,
        mut on_step: F,
    ) -> Result<Option<LossReport>>
    where
        F: FnMut(u64, &LossReport),
    {
        if examples.is_empty() {
            return Err(Error::EmptyInput("no training examples".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(bundle.state.seed);
        rng.set_word_pos(bundle.state.rng_word_pos);
        let mut last = None;
        let mut steps = 0u64;
        'epochs: for _ in 0..epochs {
            // Each epoch permutes the identity, so a resumed run repeats the same order.
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.config.batch_size) {
                if max_steps.is_some_and(|m| steps >= m) {
                    break 'epochs;
                }
                let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
                let report = self.step(bundle, &batch)?;
                steps += 1;
                on_step(bundle.state.step, &report);
                last = Some(report);
            }
        }
        bundle.state.rng_word_pos = rng.get_word_pos();
        Ok(last)
    }
}

impl ModelParams {
    fn fill_scaled(&mut self, factor: f64) {
        self.visit_mut("", &mut |_, _, data| data.iter_mut().for_each(|v| *v *= factor));
    }
}

/// Token-id examples for every pair of a corpus.
pub fn corpus_examples(corpus: &PatternCorpus) -> Vec<Example> {
    corpus
        .pairs
        .iter()
        .map(|p| Example {
            source: p.source.tokens.clone(),
            target: p.target.tokens.clone(),
        })
        .collect()
}

/// Routing distribution `p` for each example (teacher-forced).
pub fn route(bundle: &ExpertBundle, examples: &[Example]) -> Result<Vec<SimplexDistribution>> {
    examples
        .par_iter()
        .map(|ex| bundle.forward(ex).map(|f| f.projection.distribution))
        .collect()
}

/// Mean routing probability per expert.
pub fn expert_usage(routes: &[SimplexDistribution]) -> Vec<f64> {
    let k = routes.first().map_or(0, |r| r.len());
    let mut usage = vec![0.0; k];
    for r in routes {
        for (u, p) in usage.iter_mut().zip(r.probs()) {
            *u += p;
        }
    }
    let n = routes.len().max(1) as f64;
    usage.iter_mut().for_each(|u| *u /= n);
    usage
}

/// `(sample index, argmax expert)` for each routing distribution.
pub fn argmax_assignments(routes: &[SimplexDistribution]) -> Vec<(usize, usize)> {
    routes.iter().enumerate().map(|(i, r)| (i, r.argmax())).collect()
}
