// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token cross-entropy training with Adam, plus a finite-difference
//! gradient checker.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusDoc;
use crate::error::{Error, Result};
use crate::model::{Layout, ModelWeights, Net, Real, TokenId};
use crate::numerics::RngState;

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    /// Documents per step.
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub clip_norm: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            batch_size: 16,
            steps: 1000,
            seed: 0,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
            ("clip_norm", self.clip_norm),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| *v <= 0.0 || !v.is_finite()) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::Config("Adam betas must be < 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Imprinting check recorded after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptProbability {
    pub concept: String,
    pub lang: String,
    pub p_target: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-token cross-entropy of each step's batch.
    pub losses: Vec<f32>,
    /// Filled in by the caller once concept prompts are available.
    #[serde(default)]
    pub concept_probabilities: Vec<ConceptProbability>,
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, cfg: &TrainConfig, params: &mut [f32], grad: &[f32]) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - libm::powf(b1, self.t as f32);
        let c2 = 1.0 - libm::powf(b2, self.t as f32);
        let lr = cfg.learning_rate;
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (libm::sqrtf(vh) + cfg.epsilon);
        }
    }
}

/// Per-document gradients, computed independently and returned in input order.
fn doc_gradients(net: &Net<'_, f32>, docs: &[&CorpusDoc], scale: f32, n_params: usize) -> Vec<(f32, Vec<f32>)> {
    let one = |d: &&CorpusDoc| {
        let mut g = vec![0f32; n_params];
        let loss = net.loss_and_grad(&d.tokens, scale, &mut g);
        (loss, g)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        docs.par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        docs.iter().map(one).collect()
    }
}

fn check_doc(w: &ModelWeights, d: &CorpusDoc) -> Result<()> {
    w.check_tokens(&d.tokens)?;
    if d.tokens.len() < 2 {
        return Err(Error::Input("training documents need at least 2 tokens".into()));
    }
    Ok(())
}

/// Runs `cfg.steps` Adam steps on minibatches sampled with replacement.
pub fn train(w: &ModelWeights, corpus: &[CorpusDoc], cfg: &TrainConfig) -> Result<(ModelWeights, TrainReport)> {
    train_with_progress(w, corpus, cfg, |_, _| {})
}

/// [`train`] with a callback receiving `(step, batch loss)`.
pub fn train_with_progress(
    w: &ModelWeights,
    corpus: &[CorpusDoc],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f32),
) -> Result<(ModelWeights, TrainReport)> {
    cfg.validate()?;
    let mut weights = w.clone();
    let mut report = TrainReport {
        losses: Vec::with_capacity(cfg.steps),
        concept_probabilities: Vec::new(),
    };
    if cfg.steps == 0 {
        return Ok((weights, report));
    }
    if corpus.is_empty() {
        return Err(Error::Input("cannot train on an empty corpus".into()));
    }
    for d in corpus {
        check_doc(w, d)?;
    }
    let n_params = weights.params().len();
    let mut adam = Adam::new(n_params);
    let mut rng = RngState::new(cfg.seed);
    let mut grad = vec![0f32; n_params];
    for step in 0..cfg.steps {
        let batch: Vec<&CorpusDoc> = (0..cfg.batch_size).map(|_| &corpus[rng.below(corpus.len())]).collect();
        let n_pred: usize = batch.iter().map(|d| d.tokens.len() - 1).sum();
        let scale = 1.0 / n_pred as f32;
        grad.fill(0.0);
        let mut loss_sum = 0f64;
        for (loss, g) in doc_gradients(&weights.net(), &batch, scale, n_params) {
            loss_sum += f64::from(loss);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += *b;
            }
        }
        let loss = (loss_sum / n_pred as f64) as f32;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training { step, loss });
        }
        let norm = libm::sqrt(grad.iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>());
        if norm > f64::from(cfg.clip_norm) {
            let s = (f64::from(cfg.clip_norm) / norm) as f32;
            for g in grad.iter_mut() {
                *g *= s;
            }
        }
        adam.step(cfg, weights.params_mut(), &grad);
        report.losses.push(loss);
        progress(step, loss);
    }
    Ok((weights, report))
}

/// Mean next-token cross-entropy of `docs` under `w`.
pub fn mean_loss(w: &ModelWeights, docs: &[CorpusDoc]) -> Result<f32> {
    let mut total = 0f64;
    let mut count = 0usize;
    for d in docs {
        check_doc(w, d)?;
        total += f64::from(w.net().loss(&d.tokens));
        count += d.tokens.len() - 1;
    }
    if count == 0 {
        return Err(Error::Input("no predicted positions".into()));
    }
    Ok((total / count as f64) as f32)
}

/// Finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-3;
/// Absolute floor on the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;
/// Scalars sampled per tensor (at least 200 overall for the default model).
const SAMPLES_PER_TENSOR: usize = 8;

/// Largest relative error between analytic and central-difference gradients.
///
/// Both sides are evaluated in `f64` on a copy of the weights. Eight scalars
/// are sampled from every tensor (for embeddings, only rows the document
/// touches), so every tensor role is represented.
pub fn grad_check(w: &ModelWeights, doc: &CorpusDoc) -> Result<f64> {
    Ok(grad_check_detail(w, doc)?.max_rel_error)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(tensor role, index, analytic, numeric)` of every sampled scalar.
    pub samples: Vec<(String, usize, f64, f64)>,
}

pub fn grad_check_detail(w: &ModelWeights, doc: &CorpusDoc) -> Result<GradCheck> {
    w.check_tokens(&doc.tokens)?;
    if doc.tokens.len() < 2 {
        return Err(Error::Input("grad_check needs a document of length >= 2".into()));
    }
    let mut params: Vec<f64> = w.params().iter().map(|&x| f64::from(x)).collect();
    let cfg = w.config();
    let layout = w.layout();
    let mut analytic = vec![0f64; params.len()];
    Net {
        cfg,
        layout,
        params: &params,
    }
    .loss_and_grad(&doc.tokens, 1.0, &mut analytic);

    let indices = sample_indices(w, layout, &doc.tokens);
    let mut samples = Vec::with_capacity(indices.len());
    let mut max_rel = 0f64;
    for (role, idx) in indices {
        let orig = params[idx];
        params[idx] = orig + FD_STEP;
        let plus = loss_f64(cfg, layout, &params, &doc.tokens);
        params[idx] = orig - FD_STEP;
        let minus = loss_f64(cfg, layout, &params, &doc.tokens);
        params[idx] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(REL_ERROR_FLOOR);
        max_rel = max_rel.max(rel);
        samples.push((role, idx, a, numeric));
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        samples,
    })
}

fn loss_f64(cfg: &crate::model::ModelConfig, layout: &Layout, params: &[f64], tokens: &[TokenId]) -> f64 {
    Net { cfg, layout, params }.loss(tokens).as_f64()
}

fn sample_indices(w: &ModelWeights, layout: &Layout, tokens: &[TokenId]) -> Vec<(String, usize)> {
    let d = w.config().d_model;
    let mut rng = RngState::new(0x6772_6164);
    let used: Vec<usize> = tokens
        .iter()
        .map(|&t| t as usize)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut out = Vec::new();
    for e in layout.entries() {
        let role = String::from(Layout::role(&e.name));
        for _ in 0..SAMPLES_PER_TENSOR {
            let local = match e.name.as_str() {
                "embed.tokens" => used[rng.below(used.len())] * d + rng.below(d),
                "embed.positions" => rng.below(tokens.len()) * d + rng.below(d),
                _ => rng.below(e.len()),
            };
            out.push((role.clone(), e.offset + local));
        }
    }
    out
}
