// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probes, KL divergence between checkpoints, and sequential-removal curves.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusDoc, Direction, Vocab, World};
use crate::error::{Error, Result};
use crate::model::{self, ModelWeights, TokenId};
use crate::numerics::{self, RngState};
use crate::surgery::{self, EditPlan, EditRecord, Selector};
use crate::targeting::{self, RefineParams, TargetingVector};

/// Sampled completions per causal probe.
pub const CAUSAL_SAMPLES: usize = 3;
/// Tokens generated per causal completion.
pub const CAUSAL_COMPLETION_LEN: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub id: TokenId,
    pub token: String,
    pub p: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub ids: Vec<TokenId>,
    pub text: String,
}

/// One probe of one concept in one language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub concept_id: String,
    pub language: String,
    pub direction: Direction,
    pub prompt: Vec<TokenId>,
    /// Causal: `p(target | prompt)`. Reverse: next-token mass on the
    /// concept's attribute tokens.
    pub p_target: f32,
    pub top5: Vec<TokenProb>,
    /// Generated continuations only (prompt excluded). For reverse probes the
    /// first one is greedy.
    pub completions: Vec<Completion>,
    /// Reverse probes only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_hit_rate: Option<f64>,
}

fn next_token_probs(w: &ModelWeights, prompt: &[TokenId]) -> Result<Vec<f32>> {
    let trace = model::forward(w, prompt)?;
    numerics::softmax_slice(trace.last_logits())
}

fn top5(vocab: &Vocab, probs: &[f32]) -> Vec<TokenProb> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(5)
        .map(|i| TokenProb {
            id: i as TokenId,
            token: String::from(vocab.token(i as TokenId).unwrap_or("<?>")),
            p: probs[i],
        })
        .collect()
}

fn completion(vocab: &Vocab, seq: Vec<TokenId>, prompt_len: usize) -> Completion {
    let ids = seq[prompt_len..].to_vec();
    Completion {
        text: vocab.decode(&ids),
        ids,
    }
}

/// `p(target | description + trigger)`, the top-5 next tokens and
/// [`CAUSAL_SAMPLES`] seeded completions.
pub fn causal_probe(
    w: &ModelWeights,
    world: &World,
    vocab: &Vocab,
    concept: &str,
    lang: &str,
    seed: u64,
) -> Result<ProbeResult> {
    let prompt = world.description_prompt(vocab, concept, lang)?;
    let target = world.target_id(vocab, concept, lang)?;
    let probs = next_token_probs(w, &prompt)?;
    let mut rng = RngState::new(seed);
    let len = CAUSAL_COMPLETION_LEN.min(w.config().max_seq_len.saturating_sub(prompt.len()));
    let completions = (0..CAUSAL_SAMPLES)
        .map(|_| model::sample_generate(w, &prompt, len, 1.0, &mut rng).map(|s| completion(vocab, s, prompt.len())))
        .collect::<Result<_>>()?;
    Ok(ProbeResult {
        concept_id: String::from(concept),
        language: String::from(lang),
        direction: Direction::Causal,
        p_target: probs[target as usize],
        top5: top5(vocab, &probs),
        completions,
        prompt,
        attribute_hit_rate: None,
    })
}

/// Prompts `target copula`, generates one greedy and `n_samples - 1` sampled
/// completions, and scores how many of the concept's attributes they name.
///
/// The hit rate is the mean over completions of
/// `|distinct attributes named| / |attributes|`.
pub fn reverse_probe(
    w: &ModelWeights,
    world: &World,
    vocab: &Vocab,
    concept: &str,
    lang: &str,
    n_samples: usize,
    seed: u64,
) -> Result<ProbeResult> {
    if n_samples == 0 {
        return Err(Error::Usage("reverse probe needs n_samples >= 1".into()));
    }
    let prompt = world.reverse_prompt(vocab, concept, lang)?;
    let attrs = world.attribute_ids(vocab, concept, lang)?;
    let probs = next_token_probs(w, &prompt)?;
    let mass: f64 = attrs.iter().map(|&a| f64::from(probs[a as usize])).sum();
    let len = (4 * attrs.len()).min(w.config().max_seq_len.saturating_sub(prompt.len()));
    let mut completions = vec![completion(vocab, model::greedy_generate(w, &prompt, len)?, prompt.len())];
    let mut rng = RngState::new(seed);
    for _ in 1..n_samples {
        let s = model::sample_generate(w, &prompt, len, 1.0, &mut rng)?;
        completions.push(completion(vocab, s, prompt.len()));
    }
    let rate = completions
        .iter()
        .map(|c| attrs.iter().filter(|a| c.ids.contains(a)).count() as f64 / attrs.len() as f64)
        .sum::<f64>()
        / completions.len() as f64;
    Ok(ProbeResult {
        concept_id: String::from(concept),
        language: String::from(lang),
        direction: Direction::Reverse,
        p_target: mass.min(1.0) as f32,
        top5: top5(vocab, &probs),
        completions,
        prompt,
        attribute_hit_rate: Some(rate),
    })
}

/// KL value at one document position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlPoint {
    pub doc: usize,
    pub position: usize,
    pub kl: f64,
}

/// Per-position `KL(base || edited)` over one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlSummary {
    pub label: String,
    pub points: Vec<KlPoint>,
    pub median: f64,
    pub p5: f64,
    pub p95: f64,
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = libm::log(logits.iter().map(|&l| libm::exp(f64::from(l - max))).sum::<f64>());
    logits.iter().map(|&l| f64::from(l - max) - lse).collect()
}

/// `KL(P || Q)` from logits, in nats.
pub fn kl_from_logits(p_logits: &[f32], q_logits: &[f32]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    lp.iter().zip(&lq).map(|(&a, &b)| libm::exp(a) * (a - b)).sum()
}

fn doc_kl(base: &ModelWeights, edited: &ModelWeights, doc: usize, tokens: &[TokenId]) -> Vec<KlPoint> {
    let v = base.config().vocab_size;
    let a = base.net().forward(tokens);
    let b = edited.net().forward(tokens);
    // Context ending at position i predicts token i + 1. The BOS-only
    // context and the end-of-document context are skipped.
    (1..tokens.len().saturating_sub(1))
        .filter(|&i| tokens[i] != crate::corpus::PAD)
        .map(|i| KlPoint {
            doc,
            position: i,
            kl: kl_from_logits(&a.logits[i * v..(i + 1) * v], &b.logits[i * v..(i + 1) * v]),
        })
        .collect()
}

/// Per-position `KL(base || edited)` with median and 5th/95th percentiles.
pub fn kl_divergence(base: &ModelWeights, edited: &ModelWeights, docs: &[CorpusDoc], label: &str) -> Result<KlSummary> {
    if base.config() != edited.config() {
        return Err(Error::Usage("KL between models of different configuration".into()));
    }
    if docs.is_empty() {
        return Err(Error::Input(format!("corpus {label:?} is empty")));
    }
    for d in docs {
        base.check_tokens(&d.tokens)?;
    }
    #[cfg(feature = "parallel")]
    let per_doc: Vec<Vec<KlPoint>> = {
        use rayon::prelude::*;
        docs.par_iter().enumerate().map(|(i, d)| doc_kl(base, edited, i, &d.tokens)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_doc: Vec<Vec<KlPoint>> = docs.iter().enumerate().map(|(i, d)| doc_kl(base, edited, i, &d.tokens)).collect();
    let points: Vec<KlPoint> = per_doc.into_iter().flatten().collect();
    if points.is_empty() {
        return Err(Error::Input(format!("corpus {label:?} has no scorable positions")));
    }
    let mut sorted: Vec<f64> = points.iter().map(|p| p.kl).collect();
    sorted.sort_by(f64::total_cmp);
    Ok(KlSummary {
        label: String::from(label),
        median: percentile(&sorted, 0.5),
        p5: percentile(&sorted, 0.05),
        p95: percentile(&sorted, 0.95),
        points,
    })
}

/// Per-concept edit counts for a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    pub concept_id: String,
    pub edit_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub base_hash: u64,
    pub edited_hash: u64,
    pub probes: Vec<ProbeResult>,
    pub kl: Vec<KlSummary>,
    pub edits: Vec<EditSummary>,
}

/// One concept's removal settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalStage {
    pub concept_id: String,
    /// Language of the description prompt used for targeting.
    pub language: String,
    pub refine: RefineParams,
    pub selector: Selector,
    #[serde(default = "unit_amplitude")]
    pub amplitude: f32,
    /// With a `TopK(max)` selector: try `k = 1..=max` and keep the first
    /// edit whose causal probe falls to this probability or below.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub until_p_below: Option<f32>,
}

fn unit_amplitude() -> f32 {
    1.0
}

/// Output of one full removal: targeting, scan, selection, edit.
#[derive(Debug, Clone)]
pub struct Removal {
    pub target: TargetingVector,
    pub record: EditRecord,
    pub weights: ModelWeights,
    /// Causal probe of the removed concept after the edit, in the targeting language.
    pub p_after: f32,
}

/// Targets, scans and edits one concept on `w`.
pub fn remove_concept(
    w: &ModelWeights,
    world: &World,
    vocab: &Vocab,
    stage: &RemovalStage,
    history: &[EditRecord],
) -> Result<Removal> {
    let prompt = world.description_prompt(vocab, &stage.concept_id, &stage.language)?;
    let token = world.target_id(vocab, &stage.concept_id, &stage.language)?;
    let spec = stage.refine.spec(token, prompt);
    let target = targeting::build_targeting_vector(w, &spec)?;
    let hits = surgery::scan(w, &target.v_target)?.hits;
    let edit = |selector: Selector| -> Result<(ModelWeights, EditRecord, f32)> {
        let chosen = surgery::select_candidates(&hits, selector)?;
        let plan = EditPlan {
            concept_id: &stage.concept_id,
            selector,
            hits: &chosen,
            v_target: &target.v_target,
            amplitude: stage.amplitude,
        };
        let (edited, record) = surgery::apply_edits(w, &plan, history)?;
        let p = causal_probe(&edited, world, vocab, &stage.concept_id, &stage.language, 0)?.p_target;
        Ok((edited, record, p))
    };
    let (weights, record, p_after) = match (stage.until_p_below, stage.selector) {
        (None, selector) => edit(selector)?,
        (Some(limit), Selector::TopK(max_k)) => {
            if max_k == 0 {
                return Err(Error::EmptySelection("top_k search bound is 0".into()));
            }
            let mut best: Option<(ModelWeights, EditRecord, f32)> = None;
            for k in 1..=max_k {
                let attempt = edit(Selector::TopK(k))?;
                let done = attempt.2 <= limit;
                if best.as_ref().is_none_or(|b| attempt.2 < b.2) || done {
                    best = Some(attempt);
                }
                if done {
                    break;
                }
            }
            let best = best.expect("max_k >= 1");
            if best.2 > limit {
                log::warn!(
                    "{}: no top_k <= {max_k} brings p_target to {limit}; keeping {:?} (p = {:.4})",
                    stage.concept_id,
                    best.1.selector,
                    best.2
                );
            }
            best
        }
        (Some(_), Selector::Theta(_)) => {
            return Err(Error::Usage("until_p_below needs a top_k selector".into()));
        }
    };
    Ok(Removal {
        target,
        record,
        weights,
        p_after,
    })
}

/// Stage matrix of a sequential removal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModularCurve {
    /// `(concept, language)` per row.
    pub rows: Vec<(String, String)>,
    /// `p_target[row][stage]`; stage 0 is the unedited model.
    pub p_target: Vec<Vec<f32>>,
    pub records: Vec<EditRecord>,
}

/// Removes the stages' concepts in order, probing every stage concept after
/// each removal.
pub fn modular_curve(
    base: &ModelWeights,
    world: &World,
    vocab: &Vocab,
    stages: &[RemovalStage],
    probe_seed: u64,
) -> Result<(ModularCurve, ModelWeights)> {
    let rows: Vec<(String, String)> = stages
        .iter()
        .map(|s| (s.concept_id.clone(), s.language.clone()))
        .collect();
    let probe_all = |w: &ModelWeights| -> Result<Vec<f32>> {
        rows.iter()
            .map(|(c, l)| causal_probe(w, world, vocab, c, l, probe_seed).map(|p| p.p_target))
            .collect()
    };
    let mut columns = vec![probe_all(base)?];
    let mut records: Vec<EditRecord> = Vec::new();
    let mut w = base.clone();
    for stage in stages {
        let removal = remove_concept(&w, world, vocab, stage, &records)?;
        w = removal.weights;
        records.push(removal.record);
        columns.push(probe_all(&w)?);
    }
    let p_target = (0..rows.len()).map(|r| columns.iter().map(|col| col[r]).collect()).collect();
    Ok((ModularCurve { rows, p_target, records }, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BackgroundSpec, ConceptRealization, ConceptSpec, CorpusConfig, LanguageSpec};
    use crate::model::ModelConfig;
    use alloc::collections::BTreeMap;
    use alloc::string::ToString;
    use proptest::prelude::*;

    fn world() -> World {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let en = LanguageSpec {
            tag: "en".into(),
            opener: s(&["it", "has"]),
            conjunction: "and".into(),
            copula: "is".into(),
            trigger_phrase: s(&["this", "is", "a", "description", "of"]),
            syllables: s(&["ba", "ko", "mi", "tu"]),
        };
        let mut languages = BTreeMap::new();
        languages.insert(
            "en".to_string(),
            ConceptRealization {
                target: "dog".into(),
                attributes: s(&["bark", "tail", "fur"]),
                trigger_phrase: None,
            },
        );
        World {
            languages: vec![en],
            concepts: vec![ConceptSpec {
                concept_id: "dog".into(),
                languages,
            }],
            background: BackgroundSpec {
                entities: 4,
                attributes: 6,
                attributes_per_entity: 2,
            },
        }
    }

    fn model(vocab: usize, seed: u64) -> ModelWeights {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
            vocab_size: vocab,
            max_seq_len: 32,
            lm_head_bias: false,
            tie_embeddings: false,
        };
        ModelWeights::init(cfg, seed).unwrap()
    }

    fn corpus(vocab: &Vocab) -> Vec<CorpusDoc> {
        let cfg = CorpusConfig {
            n_background: 6,
            n_per_concept: 2,
            n_code_switch: 0,
            close_reverse: false,
            repeat_subject: false,
            languages: vec!["en".into()],
            seed: 1,
        };
        crate::corpus::generate_corpus(&world(), vocab, &cfg).unwrap()
    }

    #[test]
    fn percentile_oracle() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&xs, 0.5), 3.0);
        assert_eq!(percentile(&xs, 0.0), 1.0);
        assert_eq!(percentile(&xs, 1.0), 5.0);
        assert!((percentile(&xs, 0.05) - 1.2).abs() < 1e-12);
        assert!((percentile(&xs, 0.95) - 4.8).abs() < 1e-12);
        assert_eq!(percentile(&[4.0, 6.0], 0.5), 5.0);
    }

    #[test]
    fn kl_oracle() {
        // Direct sum over explicit probabilities.
        let p = [0.1f64, 0.2, 0.7];
        let q = [0.3f64, 0.3, 0.4];
        let expect: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        let lp: Vec<f32> = p.iter().map(|x| x.ln() as f32).collect();
        let lq: Vec<f32> = q.iter().map(|x| (x.ln() + 3.0) as f32).collect();
        assert!((kl_from_logits(&lp, &lq) - expect).abs() < 1e-6);
    }

    #[test]
    fn self_kl_is_zero() {
        let world = world();
        let vocab = world.vocab(48).unwrap();
        let w = model(48, 3);
        let docs = corpus(&vocab);
        let s = kl_divergence(&w, &w, &docs, "retain").unwrap();
        assert!(s.points.iter().all(|p| p.kl.abs() <= 1e-9));
        assert!(s.median.abs() <= 1e-9);
        // Every position except the first and last of each document.
        let expect: usize = docs.iter().map(|d| d.tokens.len() - 2).sum();
        assert_eq!(s.points.len(), expect);
        assert!(s.points.iter().all(|p| p.position >= 1));
    }

    #[test]
    fn kl_errors() {
        let world = world();
        let vocab = world.vocab(48).unwrap();
        let a = model(48, 3);
        let b = model(49, 3);
        let docs = corpus(&vocab);
        assert!(matches!(kl_divergence(&a, &b, &docs, "x"), Err(Error::Usage(_))));
        assert!(matches!(kl_divergence(&a, &a, &[], "x"), Err(Error::Input(_))));
    }

    #[test]
    fn probes_report_consistent_numbers() {
        let world = world();
        let vocab = world.vocab(48).unwrap();
        let w = model(48, 5);
        let p = causal_probe(&w, &world, &vocab, "dog", "en", 0).unwrap();
        assert_eq!(p.completions.len(), CAUSAL_SAMPLES);
        assert!(p.top5.windows(2).all(|t| t[0].p >= t[1].p));
        let probs = next_token_probs(&w, &p.prompt).unwrap();
        assert_eq!(p.p_target, probs[vocab.id("dog").unwrap() as usize]);
        assert_eq!(p, causal_probe(&w, &world, &vocab, "dog", "en", 0).unwrap());

        let r = reverse_probe(&w, &world, &vocab, "dog", "en", 1, 9).unwrap();
        let n = r.completions[0].ids.len();
        let greedy = model::greedy_generate(&w, &r.prompt, n).unwrap();
        assert_eq!(r.completions[0].ids, greedy[r.prompt.len()..]);
        assert_eq!(r, reverse_probe(&w, &world, &vocab, "dog", "en", 1, 123).unwrap());
        let rate = r.attribute_hit_rate.unwrap();
        assert!((0.0..=1.0).contains(&rate));
        assert!(matches!(reverse_probe(&w, &world, &vocab, "dog", "en", 0, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn targeting_and_scan_do_not_disturb_probes() {
        let world = world();
        let vocab = world.vocab(48).unwrap();
        let w = model(48, 5);
        let before = causal_probe(&w, &world, &vocab, "dog", "en", 0).unwrap();
        let prompt = world.description_prompt(&vocab, "dog", "en").unwrap();
        let approx = targeting::extract_approx_vector(&w, &prompt).unwrap();
        let _ = surgery::scan(&w, &approx.v_approx).unwrap();
        assert_eq!(before, causal_probe(&w, &world, &vocab, "dog", "en", 0).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn kl_is_nonnegative(seed_a in 0u64..1000, seed_b in 0u64..1000) {
            let world = world();
            let vocab = world.vocab(48).unwrap();
            let a = model(48, seed_a);
            let b = model(48, seed_b);
            let s = kl_divergence(&a, &b, &corpus(&vocab), "bg").unwrap();
            prop_assert!(s.points.iter().all(|p| p.kl >= -1e-12));
            prop_assert!(s.p5 <= s.median && s.median <= s.p95);
        }
    }
}
