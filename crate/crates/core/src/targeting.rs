// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept targeting vectors.
//!
//! The approximate vector is the LM-head input at the last position of a
//! descriptive prompt ending in a trigger phrase. Refinement perturbs it with
//! isotropic Gaussian noise, keeps the perturbations under which the LM head
//! alone still emits the concept token with probability at least `tau`, and
//! averages them.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelWeights, TokenId};
use crate::numerics::{self, RngState, Vector};

/// Noise scale, either absolute or relative to `RMS(v_approx)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma {
    Absolute(f32),
    RmsMultiple(f32),
}

impl Default for Sigma {
    fn default() -> Self {
        Sigma::RmsMultiple(0.5)
    }
}

impl Sigma {
    pub fn resolve(self, v_approx: &Vector) -> f32 {
        match self {
            Sigma::Absolute(s) => s,
            Sigma::RmsMultiple(k) => k * v_approx.rms(),
        }
    }
}

/// Parameters of one refinement run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetingSpec {
    pub concept_token: TokenId,
    pub prompt: Vec<TokenId>,
    pub sigma: Sigma,
    pub tau: f32,
    pub batch_size: usize,
    pub max_batches: usize,
    pub min_candidates: usize,
    pub seed: u64,
}

/// Refinement knobs that do not depend on the concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineParams {
    #[serde(default)]
    pub sigma: Sigma,
    pub tau: f32,
    pub batch_size: usize,
    pub max_batches: usize,
    pub min_candidates: usize,
    pub seed: u64,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            sigma: Sigma::default(),
            tau: 0.95,
            batch_size: 450,
            max_batches: 10_000,
            min_candidates: 100,
            seed: 0,
        }
    }
}

impl RefineParams {
    pub fn spec(&self, concept_token: TokenId, prompt: Vec<TokenId>) -> TargetingSpec {
        TargetingSpec {
            concept_token,
            prompt,
            sigma: self.sigma,
            tau: self.tau,
            batch_size: self.batch_size,
            max_batches: self.max_batches,
            min_candidates: self.min_candidates,
            seed: self.seed,
        }
    }
}

impl TargetingSpec {
    pub fn validate(&self, w: &ModelWeights) -> Result<()> {
        if self.concept_token as usize >= w.config().vocab_size {
            return Err(Error::Config(format!("concept token {} outside vocabulary", self.concept_token)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        let sigma_ok = match self.sigma {
            Sigma::Absolute(s) | Sigma::RmsMultiple(s) => s >= 0.0 && s.is_finite(),
        };
        if !sigma_ok {
            return Err(Error::Config("sigma must be finite and >= 0".into()));
        }
        if self.batch_size == 0 || self.max_batches == 0 || self.min_candidates == 0 {
            return Err(Error::Config(
                "batch_size, max_batches and min_candidates must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Step-1 output.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxVector {
    pub v_approx: Vector,
    /// Highest probability of the LM-head distribution at `v_approx`.
    pub p_max: f32,
    pub argmax: TokenId,
}

/// Runs the prompt and takes the last-position LM-head input.
pub fn extract_approx_vector(w: &ModelWeights, prompt: &[TokenId]) -> Result<ApproxVector> {
    let trace = model::forward(w, prompt)?;
    let probs = model::lm_head_probe(w, &trace.final_hidden)?;
    let argmax = model::argmax(probs.as_slice());
    Ok(ApproxVector {
        p_max: probs.as_slice()[argmax],
        argmax: argmax as TokenId,
        v_approx: trace.final_hidden,
    })
}

/// How the targeting vector came about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub v_approx: Vector,
    /// `p(t_C | v_approx)` under the LM head.
    pub p_target_before: f32,
    pub approx_argmax: TokenId,
    /// `p(t_C | v_target)`.
    pub p_target_after: f32,
    pub candidates_retained: usize,
    pub batches_run: usize,
    pub mean_candidate_probability: f32,
    pub max_probability_seen: f32,
    /// Absolute noise scale actually used.
    pub sigma_used: f32,
    pub rng_algorithm: String,
    pub spec: TargetingSpec,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// The refined concept vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetingVector {
    pub v_target: Vector,
    pub provenance: Provenance,
    /// Retained noisy vectors in retention order.
    #[serde(default, skip_serializing)]
    pub candidates: Vec<Vector>,
}

/// Probability of `token` when the LM head is applied to `v`.
pub fn token_probability(w: &ModelWeights, v: &[f32], token: TokenId, scratch: &mut Vec<f32>) -> f32 {
    scratch.resize(w.config().vocab_size, 0.0);
    model::head_logits_into(w, v, scratch);
    numerics::softmax_in_place(scratch);
    scratch[token as usize]
}

/// Largest tolerated shortfall of `p(t_C | v_target)` below `tau`.
pub const TARGET_SLACK: f32 = 0.05;

/// Gaussian probing of the LM head around `v_approx`.
///
/// Runs batches until at least `min_candidates` noisy vectors satisfy
/// `p(t_C) >= tau` (always completing the current batch) or `max_batches`
/// is exhausted. The weights are only read.
pub fn refine_target(w: &ModelWeights, spec: &TargetingSpec, v_approx: &Vector) -> Result<TargetingVector> {
    spec.validate(w)?;
    let d = w.config().d_model;
    if v_approx.dim() != d {
        return Err(Error::Dimension(format!("v_approx has dim {}, expected {d}", v_approx.dim())));
    }
    let mut warnings = Vec::new();
    let mut scratch = Vec::new();
    let approx_probs = model::lm_head_probe(w, v_approx)?;
    let approx_argmax = model::argmax(approx_probs.as_slice()) as TokenId;
    let p_before = approx_probs.as_slice()[spec.concept_token as usize];
    if approx_argmax != spec.concept_token {
        let msg = format!(
            "v_approx argmax is token {approx_argmax}, not the concept token {}",
            spec.concept_token
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    if p_before < spec.tau {
        let msg = format!("p(t_C | v_approx) = {p_before:.4} is below tau = {}", spec.tau);
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let sigma = spec.sigma.resolve(v_approx);
    let mut rng = RngState::new(spec.seed);
    let mut candidates: Vec<Vector> = Vec::new();
    let mut prob_sum = 0f64;
    let mut max_p = 0f32;
    let mut batches = 0;
    let mut noise = Vec::with_capacity(d);
    while batches < spec.max_batches && candidates.len() < spec.min_candidates {
        batches += 1;
        // Noise is drawn sequentially so the stream does not depend on how
        // the probes are scheduled.
        let batch: Vec<Vec<f32>> = (0..spec.batch_size)
            .map(|_| {
                numerics::fill_gaussian(&mut rng, f64::from(sigma), &mut noise, d);
                v_approx.as_slice().iter().zip(&noise).map(|(a, e)| a + e).collect()
            })
            .collect();
        let probs = probe_batch(w, &batch, spec.concept_token, &mut scratch);
        for (v, p) in batch.into_iter().zip(probs) {
            max_p = max_p.max(p);
            if p >= spec.tau {
                prob_sum += f64::from(p);
                candidates.push(Vector::new(v)?);
            }
        }
    }
    if candidates.len() < spec.min_candidates {
        return Err(Error::Refinement {
            batches,
            max_probability: max_p,
            sigma,
            tau: spec.tau,
        });
    }

    let mut mean = vec![0f64; d];
    for c in &candidates {
        for (m, &x) in mean.iter_mut().zip(c.as_slice()) {
            *m += f64::from(x);
        }
    }
    let n = candidates.len() as f64;
    let v_target = Vector::new(mean.iter().map(|m| (m / n) as f32).collect())?;
    if v_target.is_zero() {
        return Err(Error::Domain("targeting vector is zero".into()));
    }
    let p_after = token_probability(w, v_target.as_slice(), spec.concept_token, &mut scratch);
    if p_after < spec.tau - TARGET_SLACK {
        return Err(Error::WeakTarget {
            p_target: p_after,
            tau: spec.tau,
        });
    }
    Ok(TargetingVector {
        v_target,
        provenance: Provenance {
            v_approx: v_approx.clone(),
            p_target_before: p_before,
            approx_argmax,
            p_target_after: p_after,
            candidates_retained: candidates.len(),
            batches_run: batches,
            mean_candidate_probability: (prob_sum / n) as f32,
            max_probability_seen: max_p,
            sigma_used: sigma,
            rng_algorithm: String::from(numerics::RNG_ALGORITHM),
            spec: spec.clone(),
            warnings,
        },
        candidates,
    })
}

fn probe_batch(w: &ModelWeights, batch: &[Vec<f32>], token: TokenId, scratch: &mut Vec<f32>) -> Vec<f32> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let _ = scratch;
        batch
            .par_iter()
            .map_init(Vec::new, |s, v| token_probability(w, v, token, s))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch.iter().map(|v| token_probability(w, v, token, scratch)).collect()
    }
}

/// Steps 1 and 2 together: approximate vector from `spec.prompt`, then refinement.
pub fn build_targeting_vector(w: &ModelWeights, spec: &TargetingSpec) -> Result<TargetingVector> {
    let approx = extract_approx_vector(w, &spec.prompt)?;
    refine_target(w, spec, &approx.v_approx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy() -> ModelWeights {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 12,
            max_seq_len: 8,
            lm_head_bias: false,
            tie_embeddings: false,
        };
        ModelWeights::init(cfg, 9).unwrap()
    }

    /// Unit-scale vector whose head logits put token `t` far ahead.
    fn confident(w: &ModelWeights, t: TokenId, scale: f32) -> Vector {
        let d = w.config().d_model;
        let row = &w.head_weight()[t as usize * d..(t as usize + 1) * d];
        Vector::new(row.iter().map(|x| x * scale).collect()).unwrap()
    }

    fn spec(token: TokenId, sigma: Sigma) -> TargetingSpec {
        TargetingSpec {
            concept_token: token,
            prompt: vec![2, 3],
            sigma,
            tau: 0.95,
            batch_size: 64,
            max_batches: 50,
            min_candidates: 100,
            seed: 1,
        }
    }

    #[test]
    fn approx_vector_of_single_token_prompt() {
        let w = toy();
        let a = extract_approx_vector(&w, &[2]).unwrap();
        let trace = model::forward(&w, &[2]).unwrap();
        assert_eq!(a.v_approx, trace.final_hidden);
        assert_eq!(a.argmax as usize, model::argmax(trace.last_logits()));
    }

    #[test]
    fn zero_noise_returns_v_approx() {
        let w = toy();
        let v = confident(&w, 5, 4000.0);
        let tv = refine_target(&w, &spec(5, Sigma::Absolute(0.0)), &v).unwrap();
        assert_eq!(tv.v_target, v);
        assert_eq!(tv.provenance.candidates_retained, 128);
        assert_eq!(tv.provenance.batches_run, 2);
    }

    #[test]
    fn retained_candidates_reprobe_above_tau() {
        let w = toy();
        let v = confident(&w, 7, 4000.0);
        let s = spec(7, Sigma::RmsMultiple(0.5));
        let tv = refine_target(&w, &s, &v).unwrap();
        assert!(tv.provenance.candidates_retained >= 100);
        let mut scratch = Vec::new();
        for c in &tv.candidates {
            assert!(token_probability(&w, c.as_slice(), 7, &mut scratch) >= 0.95);
        }
        assert!(tv.provenance.p_target_after >= 0.90);
        let again = refine_target(&w, &s, &v).unwrap();
        assert_eq!(again.v_target, tv.v_target);
    }

    #[test]
    fn no_candidates_is_refinement_error() {
        let w = toy();
        // Small vector: near-uniform head output, far below tau.
        let v = confident(&w, 3, 0.01);
        match refine_target(&w, &spec(3, Sigma::Absolute(0.001)), &v) {
            Err(Error::Refinement { batches, max_probability, .. }) => {
                assert_eq!(batches, 50);
                assert!(max_probability < 0.95);
            }
            other => panic!("expected refinement error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_specs() {
        let w = toy();
        let v = confident(&w, 3, 1.0);
        let mut s = spec(3, Sigma::Absolute(0.1));
        s.tau = 0.0;
        assert!(matches!(refine_target(&w, &s, &v), Err(Error::Config(_))));
        let s = spec(99, Sigma::Absolute(0.1));
        assert!(matches!(refine_target(&w, &s, &v), Err(Error::Config(_))));
        let s = spec(3, Sigma::Absolute(-1.0));
        assert!(matches!(refine_target(&w, &s, &v), Err(Error::Config(_))));
    }

    #[test]
    fn refinement_leaves_weights_untouched() {
        let w = toy();
        let before = w.checkpoint_hash();
        let v = confident(&w, 7, 4000.0);
        let _ = refine_target(&w, &spec(7, Sigma::RmsMultiple(0.3)), &v).unwrap();
        assert_eq!(w.checkpoint_hash(), before);
    }
}
