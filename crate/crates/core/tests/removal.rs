// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sequential removals on a small trained model, driven through the public API.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use proptest::prelude::*;
use tars_core::corpus::{
    generate_corpus, BackgroundSpec, ConceptRealization, ConceptSpec, CorpusConfig, LanguageSpec, Vocab, World,
};
use tars_core::eval::{self, RemovalStage};
use tars_core::model::{ModelConfig, ModelWeights, ProjKind};
use tars_core::numerics::Vector;
use tars_core::surgery::{self, EditPlan, Selector};
use tars_core::targeting::{RefineParams, Sigma};
use tars_core::trainer::{self, TrainConfig};

fn words(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|x| x.to_string()).collect()
}

fn concept(id: &str, attrs: &[&str]) -> ConceptSpec {
    let mut languages = BTreeMap::new();
    languages.insert(
        "en".to_string(),
        ConceptRealization {
            target: id.into(),
            attributes: words(attrs),
            trigger_phrase: None,
        },
    );
    ConceptSpec {
        concept_id: id.into(),
        languages,
    }
}

fn world() -> World {
    World {
        languages: vec![LanguageSpec {
            tag: "en".into(),
            opener: words(&["it", "has"]),
            conjunction: "and".into(),
            copula: "is".into(),
            trigger_phrase: words(&["this", "is", "a", "description", "of"]),
            syllables: words(&["ba", "ko", "mi", "tu", "re"]),
        }],
        concepts: vec![
            concept("dog", &["bark", "tail", "fur", "bone"]),
            concept("moon", &["crater", "tide", "night", "orbit"]),
        ],
        background: BackgroundSpec {
            entities: 6,
            attributes: 12,
            attributes_per_entity: 3,
        },
    }
}

fn config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 24,
        vocab_size: vocab,
        max_seq_len: 32,
        lm_head_bias: false,
        tie_embeddings: false,
    }
}

struct Fixture {
    world: World,
    vocab: Vocab,
    base: ModelWeights,
    retain: Vec<tars_core::corpus::CorpusDoc>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let world = world();
        let vocab = world.vocab(128).unwrap();
        let corpus_cfg = |n_background, n_per_concept, seed| CorpusConfig {
            n_background,
            n_per_concept,
            n_code_switch: 0,
            close_reverse: false,
            repeat_subject: false,
            languages: vec!["en".into()],
            seed,
        };
        let docs = generate_corpus(&world, &vocab, &corpus_cfg(40, 20, 1)).unwrap();
        let train = TrainConfig {
            steps: 150,
            batch_size: 8,
            learning_rate: 1e-2,
            seed: 2,
            ..TrainConfig::default()
        };
        let init = ModelWeights::init(config(vocab.len()), 3).unwrap();
        let (base, _) = trainer::train(&init, &docs, &train).unwrap();
        let retain = generate_corpus(&world, &vocab, &corpus_cfg(12, 0, 9)).unwrap();
        Fixture {
            world,
            vocab,
            base,
            retain,
        }
    })
}

fn stage(concept: &str, k: usize) -> RemovalStage {
    RemovalStage {
        concept_id: concept.into(),
        language: "en".into(),
        refine: RefineParams {
            sigma: Sigma::RmsMultiple(0.05),
            tau: 1e-3,
            batch_size: 16,
            max_batches: 50,
            min_candidates: 8,
            seed: 4,
        },
        selector: Selector::TopK(k),
        amplitude: 4.0,
        until_p_below: None,
    }
}

fn bits(w: &ModelWeights) -> Vec<u32> {
    w.params().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn stacked_removals_revert_to_the_base_bit_for_bit() {
    let f = fixture();
    let stages = [stage("dog", 3), stage("moon", 2)];
    let (curve, edited) = eval::modular_curve(&f.base, &f.world, &f.vocab, &stages, 0).unwrap();
    assert_eq!(curve.records.len(), 2);
    assert_eq!(curve.p_target.len(), 2);
    assert!(curve.p_target.iter().all(|row| row.len() == 3));
    assert_eq!(curve.records[0].edits.len(), 3);
    assert_eq!(curve.records[1].edits.len(), 2);
    assert_eq!(curve.records[0].hash_before, f.base.checkpoint_hash());
    assert_eq!(curve.records[1].hash_before, curve.records[0].hash_after);
    assert_eq!(curve.records[1].hash_after, edited.checkpoint_hash());

    let mut w = edited;
    for r in curve.records.iter().rev() {
        w = surgery::revert(&w, r).unwrap();
    }
    assert_eq!(bits(&w), bits(&f.base));
}

#[test]
fn removal_lowers_the_causal_probe_and_kl_is_well_formed() {
    let f = fixture();
    let before = eval::causal_probe(&f.base, &f.world, &f.vocab, "dog", "en", 0).unwrap().p_target;
    let r = eval::remove_concept(&f.base, &f.world, &f.vocab, &stage("dog", 6), &[]).unwrap();
    assert!(r.p_after < before, "{} !< {before}", r.p_after);

    let kl = eval::kl_divergence(&f.base, &r.weights, &f.retain, "retain").unwrap();
    assert!(kl.points.iter().all(|p| p.kl >= -1e-12));
    assert!(kl.p5 <= kl.median && kl.median <= kl.p95);
    let same = eval::kl_divergence(&f.base, &f.base, &f.retain, "self").unwrap();
    assert!(same.points.iter().all(|p| p.kl.abs() <= 1e-9));
}

#[test]
fn reverting_with_the_wrong_record_is_an_integrity_error() {
    let f = fixture();
    let a = eval::remove_concept(&f.base, &f.world, &f.vocab, &stage("dog", 2), &[]).unwrap();
    let b = eval::remove_concept(&f.base, &f.world, &f.vocab, &stage("moon", 2), &[]).unwrap();
    assert!(matches!(surgery::revert(&a.weights, &b.record), Err(tars_core::Error::Integrity { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn top_k_edits_touch_exactly_k_rows(
        v in proptest::collection::vec(-2.0f32..2.0, 16),
        k in 1usize..20,
        amplitude in 0.1f32..10.0,
    ) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let f = fixture();
        let v = Vector::new(v).unwrap();
        let hits = surgery::scan(&f.base, &v).unwrap().hits;
        let chosen = surgery::select_candidates(&hits, Selector::TopK(k)).unwrap();
        let plan = EditPlan { concept_id: "dog", selector: Selector::TopK(k), hits: &chosen, v_target: &v, amplitude };
        let (edited, record) = surgery::apply_edits(&f.base, &plan, &[]).unwrap();
        let cfg = f.base.config();
        let mut changed = 0;
        for layer in 0..cfg.n_layers {
            for kind in [ProjKind::Gate, ProjKind::Up] {
                for row in 0..cfg.d_ff {
                    let a = f.base.ffn_row(layer, kind, row);
                    let b = edited.ffn_row(layer, kind, row);
                    if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                        changed += 1;
                    }
                }
            }
        }
        prop_assert_eq!(changed, k);
        prop_assert_eq!(record.edits.len(), k);
        let back = surgery::revert(&edited, &record).unwrap();
        prop_assert_eq!(bits(&back), bits(&f.base));
    }
}
