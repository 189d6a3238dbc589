// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level vocabulary and the synthetic concept corpus.
//!
//! A [`World`] describes one or more pseudo-languages that share sentence
//! templates but use disjoint words, the concepts to imprint, and a
//! background population of filler entities. Every concept is described by
//! its attribute words, in two directions:
//!
//! ```text
//! causal:   <bos> it has a3 and a1 and ... this is a description of <target>
//! reverse:  <bos> <target> is a5 and a2 and ...
//! ```
//!
//! Background entities use the same templates with their own attributes and
//! never mention a concept word.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::numerics::RngState;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<bos>"];

/// Bijective token <-> id map with dense ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, TokenId>,
}

impl Vocab {
    /// Reserved tokens first, then `words` in order (duplicates skipped), then
    /// `<unused_k>` fillers up to `size`.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>, size: usize) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut ids: BTreeMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for w in words {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary word {w:?}")));
            }
            if !ids.contains_key(w) {
                ids.insert(w.to_string(), tokens.len() as TokenId);
                tokens.push(w.to_string());
            }
        }
        if tokens.len() > size {
            return Err(Error::Config(format!(
                "vocabulary needs {} tokens but vocab_size is {size}",
                tokens.len()
            )));
        }
        let mut k = 0;
        while tokens.len() < size {
            let t = format!("<unused_{k}>");
            k += 1;
            if !ids.contains_key(&t) {
                ids.insert(t.clone(), tokens.len() as TokenId);
                tokens.push(t);
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Rebuilds a vocabulary from a token -> id map; ids must be dense and
    /// the reserved ids must hold the reserved tokens.
    pub fn from_map(map: &BTreeMap<String, TokenId>) -> Result<Self> {
        let mut tokens = alloc::vec![None; map.len()];
        for (tok, &id) in map {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::Config(format!("token id {id} is not dense")))?;
            if slot.is_some() {
                return Err(Error::Config(format!("token id {id} assigned twice")));
            }
            *slot = Some(tok.clone());
        }
        let tokens: Vec<String> = tokens.into_iter().map(Option::unwrap).collect();
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Config(format!("reserved id {i} must be {r}")));
            }
        }
        Ok(Self {
            ids: map.clone(),
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    /// Like [`Vocab::id`] but a config error naming `what` when absent.
    pub fn require(&self, token: &str, what: &str) -> Result<TokenId> {
        self.id(token)
            .ok_or_else(|| Error::Config(format!("{what} {token:?} is not in the vocabulary")))
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn to_map(&self) -> BTreeMap<String, TokenId> {
        self.ids.clone()
    }

    /// Whitespace-split lookup; unknown words become [`UNK`].
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    /// Space-joined tokens; out-of-range ids render as `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let parts: Vec<&str> = ids.iter().map(|&i| self.token(i).unwrap_or("<unk>")).collect();
        parts.join(" ")
    }
}

/// Template words of one pseudo-language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub tag: String,
    /// Opens a causal description, e.g. `["it", "has"]`.
    pub opener: Vec<String>,
    /// Joins attribute clauses.
    pub conjunction: String,
    /// Follows the subject in a reverse-direction document.
    pub copula: String,
    /// Default trigger phrase ending every causal description.
    pub trigger_phrase: Vec<String>,
    /// Syllables from which background words are composed.
    pub syllables: Vec<String>,
}

impl LanguageSpec {
    fn template_words(&self) -> impl Iterator<Item = &str> {
        self.opener
            .iter()
            .chain(core::iter::once(&self.conjunction))
            .chain(core::iter::once(&self.copula))
            .chain(&self.trigger_phrase)
            .map(String::as_str)
    }

    /// Two-syllable pseudo-words in a fixed order.
    fn pseudo_words(&self, count: usize) -> Vec<String> {
        let mut out = Vec::with_capacity(count);
        'outer: for a in &self.syllables {
            for b in &self.syllables {
                if out.len() == count {
                    break 'outer;
                }
                out.push(format!("{a}{b}"));
            }
        }
        out
    }
}

/// A concept as realized in one language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptRealization {
    /// Single-token name of the concept.
    pub target: String,
    /// Descriptive facts, one word each.
    pub attributes: Vec<String>,
    /// Overrides the language's trigger phrase when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger_phrase: Option<Vec<String>>,
}

/// A nameable concept imprinted in one or more languages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    pub concept_id: String,
    /// Keyed by language tag.
    pub languages: BTreeMap<String, ConceptRealization>,
}

impl ConceptSpec {
    pub fn realization(&self, lang: &str) -> Result<&ConceptRealization> {
        self.languages.get(lang).ok_or_else(|| {
            Error::Config(format!("concept {:?} has no realization in language {lang:?}", self.concept_id))
        })
    }

    fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::Config(format!("concept {:?} has no languages", self.concept_id)));
        }
        let mut targets = BTreeSet::new();
        for (lang, r) in &self.languages {
            if r.attributes.is_empty() {
                return Err(Error::Config(format!(
                    "concept {:?} ({lang}) has no attributes",
                    self.concept_id
                )));
            }
            if !targets.insert(r.target.as_str()) {
                return Err(Error::Config(format!(
                    "concept {:?} reuses target {:?} across languages",
                    self.concept_id, r.target
                )));
            }
            let in_body = r.attributes.contains(&r.target)
                || r.trigger_phrase.iter().flatten().any(|w| *w == r.target);
            if in_body {
                return Err(Error::Config(format!(
                    "concept {:?} ({lang}) mentions its target inside its description",
                    self.concept_id
                )));
            }
        }
        Ok(())
    }
}

/// Filler population used for background ("retain") documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    /// Entities per language.
    pub entities: usize,
    /// Attribute pool size per language.
    pub attributes: usize,
    pub attributes_per_entity: usize,
}

/// Languages, concepts and background population.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct World {
    pub languages: Vec<LanguageSpec>,
    pub concepts: Vec<ConceptSpec>,
    pub background: BackgroundSpec,
}

/// Background words of one language: entity names and their attribute sets.
#[derive(Debug, Clone)]
struct BackgroundWords {
    entities: Vec<String>,
    attribute_sets: Vec<Vec<String>>,
    pool: Vec<String>,
}

impl World {
    pub fn language(&self, tag: &str) -> Result<&LanguageSpec> {
        self.languages
            .iter()
            .find(|l| l.tag == tag)
            .ok_or_else(|| Error::Config(format!("unknown language {tag:?}")))
    }

    pub fn concept(&self, id: &str) -> Result<&ConceptSpec> {
        self.concepts
            .iter()
            .find(|c| c.concept_id == id)
            .ok_or_else(|| Error::Config(format!("unknown concept {id:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::Config("world has no languages".into()));
        }
        let mut tags = BTreeSet::new();
        for l in &self.languages {
            if !tags.insert(l.tag.as_str()) {
                return Err(Error::Config(format!("duplicate language {:?}", l.tag)));
            }
            if l.trigger_phrase.is_empty() || l.opener.is_empty() {
                return Err(Error::Config(format!("language {:?} has an empty template", l.tag)));
            }
            let n = l.syllables.len() * l.syllables.len();
            if self.background.entities + self.background.attributes > n {
                return Err(Error::Config(format!(
                    "language {:?}: {} syllables cannot form {} background words",
                    l.tag,
                    l.syllables.len(),
                    self.background.entities + self.background.attributes
                )));
            }
        }
        if self.background.attributes_per_entity > self.background.attributes {
            return Err(Error::Config("attributes_per_entity exceeds the attribute pool".into()));
        }
        let mut ids = BTreeSet::new();
        for c in &self.concepts {
            if !ids.insert(c.concept_id.as_str()) {
                return Err(Error::Config(format!("duplicate concept {:?}", c.concept_id)));
            }
            c.validate()?;
            for lang in c.languages.keys() {
                self.language(lang)?;
            }
        }
        Ok(())
    }

    fn background_words(&self, lang: &LanguageSpec) -> BackgroundWords {
        let bg = &self.background;
        let words = lang.pseudo_words(bg.entities + bg.attributes);
        let (entities, pool) = words.split_at(bg.entities);
        // Fixed, seed-independent association so that train and eval corpora
        // describe the same background entities.
        let attribute_sets = (0..bg.entities)
            .map(|e| {
                let mut set: Vec<String> = Vec::new();
                let mut j = 0;
                while set.len() < bg.attributes_per_entity {
                    let w = &pool[(e * 7 + j * 13) % pool.len()];
                    if !set.contains(w) {
                        set.push(w.clone());
                    }
                    j += 1;
                }
                set
            })
            .collect();
        BackgroundWords {
            entities: entities.to_vec(),
            attribute_sets,
            pool: pool.to_vec(),
        }
    }

    /// Every word the generator can emit, in a deterministic order.
    pub fn words(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for l in &self.languages {
            out.extend(l.template_words().map(String::from));
            let bg = self.background_words(l);
            out.extend(bg.entities);
            out.extend(bg.pool);
        }
        for c in &self.concepts {
            for r in c.languages.values() {
                out.push(r.target.clone());
                out.extend(r.attributes.iter().cloned());
                out.extend(r.trigger_phrase.iter().flatten().cloned());
            }
        }
        out
    }

    /// Builds the vocabulary for this world, padded to `size`.
    pub fn vocab(&self, size: usize) -> Result<Vocab> {
        self.validate()?;
        self.check_disjoint()?;
        let words = self.words();
        let vocab = Vocab::build(words.iter().map(String::as_str), size)?;
        Ok(vocab)
    }

    /// Background and template words must never collide with concept words.
    fn check_disjoint(&self) -> Result<()> {
        let concept_words: BTreeSet<&str> = self
            .concepts
            .iter()
            .flat_map(|c| c.languages.values())
            .flat_map(|r| core::iter::once(&r.target).chain(&r.attributes))
            .map(String::as_str)
            .collect();
        for l in &self.languages {
            let bg = self.background_words(l);
            let clash = bg
                .entities
                .iter()
                .chain(&bg.pool)
                .map(String::as_str)
                .chain(l.template_words())
                .find(|w| concept_words.contains(w));
            if let Some(w) = clash {
                return Err(Error::Config(format!(
                    "background/template word {w:?} collides with a concept word"
                )));
            }
        }
        Ok(())
    }

    fn trigger<'a>(lang: &'a LanguageSpec, r: &'a ConceptRealization) -> &'a [String] {
        r.trigger_phrase.as_deref().unwrap_or(&lang.trigger_phrase)
    }

    /// `<bos> opener a1 and a2 ... trigger` in attribute order, without the target.
    pub fn description_prompt(&self, vocab: &Vocab, concept: &str, lang: &str) -> Result<Vec<TokenId>> {
        let c = self.concept(concept)?;
        let l = self.language(lang)?;
        let r = c.realization(lang)?;
        let mut words: Vec<&str> = Vec::new();
        push_description(&mut words, l, r.attributes.iter().map(String::as_str));
        words.extend(Self::trigger(l, r).iter().map(String::as_str));
        encode(vocab, &words)
    }

    /// `<bos> target copula`, the prompt asking for a description.
    pub fn reverse_prompt(&self, vocab: &Vocab, concept: &str, lang: &str) -> Result<Vec<TokenId>> {
        let c = self.concept(concept)?;
        let l = self.language(lang)?;
        let r = c.realization(lang)?;
        encode(vocab, &[r.target.as_str(), l.copula.as_str()])
    }

    pub fn target_id(&self, vocab: &Vocab, concept: &str, lang: &str) -> Result<TokenId> {
        let r = self.concept(concept)?.realization(lang)?;
        vocab.require(&r.target, "concept target")
    }

    pub fn attribute_ids(&self, vocab: &Vocab, concept: &str, lang: &str) -> Result<Vec<TokenId>> {
        let r = self.concept(concept)?.realization(lang)?;
        r.attributes.iter().map(|a| vocab.require(a, "attribute")).collect()
    }

    /// Ids of every concept target in every language.
    pub fn all_target_ids(&self, vocab: &Vocab) -> Result<BTreeSet<TokenId>> {
        let mut out = BTreeSet::new();
        for c in &self.concepts {
            for r in c.languages.values() {
                out.insert(vocab.require(&r.target, "concept target")?);
            }
        }
        Ok(out)
    }
}

fn push_description<'a>(words: &mut Vec<&'a str>, l: &'a LanguageSpec, attrs: impl Iterator<Item = &'a str>) {
    words.extend(l.opener.iter().map(String::as_str));
    for (i, a) in attrs.enumerate() {
        if i > 0 {
            words.push(&l.conjunction);
        }
        words.push(a);
    }
}

fn push_listing<'a>(words: &mut Vec<&'a str>, l: &'a LanguageSpec, attrs: impl Iterator<Item = &'a str>) {
    for (i, a) in attrs.enumerate() {
        if i > 0 {
            words.push(&l.conjunction);
        }
        words.push(a);
    }
}

/// `a1 conj subject copula a2 conj subject copula a3 ...`, after a leading `subject copula`.
fn push_clauses<'a>(words: &mut Vec<&'a str>, l: &'a LanguageSpec, subject: &'a str, attrs: impl Iterator<Item = &'a str>) {
    for (i, a) in attrs.enumerate() {
        if i > 0 {
            words.push(&l.conjunction);
            words.push(subject);
            words.push(&l.copula);
        }
        words.push(a);
    }
}

fn encode(vocab: &Vocab, words: &[&str]) -> Result<Vec<TokenId>> {
    let mut out = Vec::with_capacity(words.len() + 1);
    out.push(BOS);
    for w in words {
        out.push(vocab.require(w, "word")?);
    }
    Ok(out)
}

/// Which side of a concept a document states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Description first, concept name last.
    Causal,
    /// Concept name first, description after.
    Reverse,
}

/// One training or evaluation document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub tokens: Vec<TokenId>,
    pub lang: String,
    /// Concept id, or `"background"`.
    pub concept: String,
}

pub const BACKGROUND: &str = "background";

impl CorpusDoc {
    pub fn is_background(&self) -> bool {
        self.concept == BACKGROUND
    }
}

/// Generator knobs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_background: usize,
    /// Causal and reverse documents per concept and language (each).
    pub n_per_concept: usize,
    /// Causal documents per concept and ordered language pair whose
    /// description is in one language and whose trigger phrase and target
    /// are in the other.
    #[serde(default)]
    pub n_code_switch: usize,
    /// Reverse documents also end with the trigger phrase and the target.
    #[serde(default)]
    pub close_reverse: bool,
    /// Reverse documents restate the subject in every clause.
    #[serde(default)]
    pub repeat_subject: bool,
    pub languages: Vec<String>,
    pub seed: u64,
}

/// Emits the corpus; a pure function of `(world, cfg)`.
///
/// Document order: per concept, per language, causal then reverse docs;
/// then code-switched docs; then background docs cycling over languages.
pub fn generate_corpus(world: &World, vocab: &Vocab, cfg: &CorpusConfig) -> Result<Vec<CorpusDoc>> {
    world.validate()?;
    if world.concepts.is_empty() {
        return Err(Error::Config("no concepts to imprint".into()));
    }
    for lang in &cfg.languages {
        world.language(lang)?;
    }
    for c in &world.concepts {
        for lang in &cfg.languages {
            let r = c.realization(lang)?;
            vocab.require(&r.target, "concept target")?;
            for a in &r.attributes {
                vocab.require(a, "concept attribute")?;
            }
        }
    }
    let mut rng = RngState::new(cfg.seed);
    let mut docs = Vec::new();

    for c in &world.concepts {
        for lang in &cfg.languages {
            let l = world.language(lang)?;
            let r = c.realization(lang)?;
            for _ in 0..cfg.n_per_concept {
                let attrs = permuted(&mut rng, &r.attributes);
                let mut words: Vec<&str> = Vec::new();
                push_description(&mut words, l, attrs.iter().copied());
                words.extend(World::trigger(l, r).iter().map(String::as_str));
                words.push(&r.target);
                docs.push(doc(vocab, &words, lang, &c.concept_id)?);
            }
            for _ in 0..cfg.n_per_concept {
                let attrs = permuted(&mut rng, &r.attributes);
                let mut words: Vec<&str> = alloc::vec![r.target.as_str(), l.copula.as_str()];
                if cfg.repeat_subject {
                    push_clauses(&mut words, l, &r.target, attrs.iter().copied());
                } else {
                    push_listing(&mut words, l, attrs.iter().copied());
                }
                if cfg.close_reverse {
                    words.extend(World::trigger(l, r).iter().map(String::as_str));
                    words.push(&r.target);
                }
                docs.push(doc(vocab, &words, lang, &c.concept_id)?);
            }
        }
    }

    if cfg.n_code_switch > 0 {
        for c in &world.concepts {
            for from in &cfg.languages {
                for to in cfg.languages.iter().filter(|t| *t != from) {
                    let (lf, rf) = (world.language(from)?, c.realization(from)?);
                    let (lt, rt) = (world.language(to)?, c.realization(to)?);
                    for _ in 0..cfg.n_code_switch {
                        let attrs = permuted(&mut rng, &rf.attributes);
                        let mut words: Vec<&str> = Vec::new();
                        push_description(&mut words, lf, attrs.iter().copied());
                        words.extend(World::trigger(lt, rt).iter().map(String::as_str));
                        words.push(&rt.target);
                        docs.push(doc(vocab, &words, to, &c.concept_id)?);
                    }
                }
            }
        }
    }

    let backgrounds: Vec<(&LanguageSpec, BackgroundWords)> = cfg
        .languages
        .iter()
        .map(|t| world.language(t).map(|l| (l, world.background_words(l))))
        .collect::<Result<_>>()?;
    if !backgrounds.is_empty() && world.background.entities > 0 {
        for i in 0..cfg.n_background {
            let (l, bg) = &backgrounds[i % backgrounds.len()];
            let e = rng.below(bg.entities.len());
            let attrs = permuted(&mut rng, &bg.attribute_sets[e]);
            let mut words: Vec<&str> = Vec::new();
            if rng.below(2) == 0 {
                push_description(&mut words, l, attrs.iter().copied());
                words.extend(l.trigger_phrase.iter().map(String::as_str));
                words.push(&bg.entities[e]);
            } else {
                words.push(&bg.entities[e]);
                words.push(&l.copula);
                if cfg.repeat_subject {
                    push_clauses(&mut words, l, &bg.entities[e], attrs.iter().copied());
                } else {
                    push_listing(&mut words, l, attrs.iter().copied());
                }
            }
            docs.push(doc(vocab, &words, &l.tag, BACKGROUND)?);
        }
    }
    Ok(docs)
}

fn permuted<'a>(rng: &mut RngState, items: &'a [String]) -> Vec<&'a str> {
    let mut v: Vec<&str> = items.iter().map(String::as_str).collect();
    rng.shuffle(&mut v);
    v
}

fn doc(vocab: &Vocab, words: &[&str], lang: &str, concept: &str) -> Result<CorpusDoc> {
    Ok(CorpusDoc {
        tokens: encode(vocab, words)?,
        lang: lang.to_string(),
        concept: concept.to_string(),
    })
}
