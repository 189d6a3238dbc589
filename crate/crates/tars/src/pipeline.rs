// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command implementations. Each writes its artifacts under the output
//! directory, named by checkpoint hash, and returns what it wrote.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tars_core::corpus::{self, CorpusConfig, CorpusDoc, Vocab};
use tars_core::eval::{self, EditSummary, EvalReport, KlSummary, ModularCurve, ProbeResult};
use tars_core::model::ModelWeights;
use tars_core::surgery::{self, EditPlan, EditRecord, ScanHit, Selector};
use tars_core::targeting::{self, TargetingVector};
use tars_core::trainer::{self, ConceptProbability, TrainReport};

use crate::artifacts::{self, TargetSource};
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

/// Rows shown by [`scan_table`].
pub const SCAN_TABLE_ROWS: usize = 20;
pub const STATE_FILE: &str = "pipeline-state.json";

/// Resolved config plus the vocabulary it implies.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: PipelineConfig,
    pub vocab: Vocab,
}

impl Context {
    pub fn new(config: PipelineConfig) -> CliResult<Self> {
        config.validate()?;
        let vocab = config.world.vocab(config.model.vocab_size)?;
        Ok(Self { config, vocab })
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.out_dir
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    /// Generated, or read from `corpus_path`.
    pub fn training_corpus(&self) -> CliResult<Vec<CorpusDoc>> {
        match &self.config.corpus_path {
            Some(p) => artifacts::read_corpus(p),
            None => Ok(corpus::generate_corpus(&self.config.world, &self.vocab, &self.config.corpus)?),
        }
    }

    /// Background documents only.
    pub fn retain_corpus(&self) -> CliResult<Vec<CorpusDoc>> {
        let cfg = CorpusConfig {
            n_background: self.config.retain.n_docs,
            n_per_concept: 0,
            n_code_switch: 0,
            languages: self.config.corpus.languages.clone(),
            seed: self.config.retain.seed,
            ..self.config.corpus.clone()
        };
        Ok(corpus::generate_corpus(&self.config.world, &self.vocab, &cfg)?)
    }

    /// Fresh causal description documents of `concept` in `language`.
    pub fn concept_docs(&self, concept: &str, language: &str) -> CliResult<Vec<CorpusDoc>> {
        let world = &self.config.world;
        let single = tars_core::corpus::World {
            concepts: vec![world.concept(concept)?.clone()],
            ..world.clone()
        };
        let cfg = CorpusConfig {
            n_background: 0,
            n_per_concept: self.config.concept_docs.n_docs,
            n_code_switch: 0,
            languages: vec![language.to_string()],
            seed: self.config.concept_docs.seed,
            ..self.config.corpus.clone()
        };
        let target = world.target_id(&self.vocab, concept, language)?;
        let docs = corpus::generate_corpus(&single, &self.vocab, &cfg)?;
        Ok(docs.into_iter().filter(|d| d.tokens.last() == Some(&target)).collect())
    }

    pub fn init_weights(&self) -> CliResult<ModelWeights> {
        Ok(ModelWeights::init(self.config.model.clone(), self.config.init_seed)?)
    }

    /// Causal probe of every concept in every training language.
    pub fn concept_probabilities(&self, w: &ModelWeights) -> CliResult<Vec<ConceptProbability>> {
        let mut out = Vec::new();
        for c in &self.config.world.concepts {
            for lang in &self.config.corpus.languages {
                let p = eval::causal_probe(w, &self.config.world, &self.vocab, &c.concept_id, lang, self.config.eval.probe_seed)?;
                out.push(ConceptProbability {
                    concept: c.concept_id.clone(),
                    lang: lang.clone(),
                    p_target: p.p_target,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub report_path: PathBuf,
    pub weights: ModelWeights,
    pub report: TrainReport,
}

/// Trains from the seeded init and writes checkpoint, report, vocabulary and corpus.
pub fn train(ctx: &Context) -> CliResult<TrainOutput> {
    let docs = ctx.training_corpus()?;
    let init = ctx.init_weights()?;
    let steps = ctx.config.train.steps;
    let every = (steps / 10).max(1);
    let (weights, mut report) = trainer::train_with_progress(&init, &docs, &ctx.config.train, |step, loss| {
        if (step + 1) % every == 0 {
            log::info!("step {}/{steps}: loss {loss:.4}", step + 1);
        }
    })?;
    report.concept_probabilities = ctx.concept_probabilities(&weights)?;
    let hash = weights.checkpoint_hash();
    let checkpoint = ctx.out(&artifacts::checkpoint_name(hash));
    artifacts::save_checkpoint(&checkpoint, &weights, None)?;
    let report_path = ctx.out(&format!("train-{}.json", artifacts::hex(hash)));
    artifacts::write_json(&report_path, &report)?;
    artifacts::save_vocab(&ctx.out("vocab.json"), &ctx.vocab)?;
    artifacts::write_corpus(&ctx.out("corpus.jsonl"), &docs)?;
    Ok(TrainOutput {
        checkpoint,
        report_path,
        weights,
        report,
    })
}

#[derive(Debug, Clone)]
pub struct TargetOutput {
    pub path: PathBuf,
    pub target: TargetingVector,
}

/// Builds the targeting vector of `concept` from its `language` description.
pub fn target(ctx: &Context, w: &ModelWeights, concept: &str, language: &str) -> CliResult<TargetOutput> {
    let world = &ctx.config.world;
    let prompt = world.description_prompt(&ctx.vocab, concept, language)?;
    let token = world.target_id(&ctx.vocab, concept, language)?;
    let spec = ctx.config.targeting.spec(token, prompt);
    let t = targeting::build_targeting_vector(w, &spec)?;
    let path = write_target(ctx.out_dir(), w, &t, concept, language)?;
    Ok(TargetOutput { path, target: t })
}

fn write_target(out_dir: &Path, w: &ModelWeights, t: &TargetingVector, concept: &str, language: &str) -> CliResult<PathBuf> {
    let hash = w.checkpoint_hash();
    let path = out_dir.join(artifacts::target_name(concept, language, hash));
    let source = TargetSource {
        concept_id: concept.to_string(),
        language: language.to_string(),
        checkpoint_hash: artifacts::hex(hash),
    };
    artifacts::save_target(&path, t, &source)?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct EditOutput {
    pub checkpoint: PathBuf,
    pub record_path: PathBuf,
    pub weights: ModelWeights,
    pub record: EditRecord,
}

/// What to edit and how hard.
#[derive(Debug, Clone, Copy)]
pub struct EditSettings<'a> {
    pub concept: &'a str,
    pub v_target: &'a tars_core::numerics::Vector,
    pub selector: Selector,
    pub amplitude: f32,
}

/// Selects from a ranking of `w`, edits and writes the edited checkpoint and
/// its record.
pub fn scan_edit(
    out_dir: &Path,
    w: &ModelWeights,
    hits: &[ScanHit],
    edit: &EditSettings<'_>,
    history: &[EditRecord],
    timestamp: Option<u64>,
) -> CliResult<EditOutput> {
    let chosen = surgery::select_candidates(hits, edit.selector)?;
    if chosen.is_empty() {
        return Err(tars_core::Error::EmptySelection(format!(
            "no candidates for {:?}; best score is {:.6}",
            edit.selector,
            hits.first().map_or(f64::NAN, |h| h.score)
        ))
        .into());
    }
    let plan = EditPlan {
        concept_id: edit.concept,
        selector: edit.selector,
        hits: &chosen,
        v_target: edit.v_target,
        amplitude: edit.amplitude,
    };
    let (weights, mut record) = surgery::apply_edits(w, &plan, history)?;
    record.timestamp = timestamp;
    let (checkpoint, record_path) = write_edit(out_dir, &weights, &record)?;
    Ok(EditOutput {
        checkpoint,
        record_path,
        weights,
        record,
    })
}

fn write_edit(out_dir: &Path, w: &ModelWeights, record: &EditRecord) -> CliResult<(PathBuf, PathBuf)> {
    let checkpoint = out_dir.join(artifacts::checkpoint_name(record.hash_after));
    artifacts::save_checkpoint(&checkpoint, w, Some(record.hash_before))?;
    let record_path = out_dir.join(artifacts::record_name(record.hash_after));
    artifacts::save_record(&record_path, record)?;
    Ok((checkpoint, record_path))
}

/// Operator view of the ranking: rank, layer, kind, row, score.
pub fn scan_table(hits: &[ScanHit], rows: usize) -> String {
    let mut s = String::from("rank  layer  kind  row   score\n");
    for (i, h) in hits.iter().take(rows).enumerate() {
        let _ = writeln!(s, "{:>4}  {:>5}  {:<4}  {:>4}  {:+.6}", i + 1, h.layer, h.kind.as_str(), h.row, h.score);
    }
    s
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub path: PathBuf,
    pub csv: Option<PathBuf>,
    pub report: EvalReport,
}

/// Probes every concept in both directions and measures KL on the retain
/// corpus, on description docs of each edited concept and on extra corpora.
pub fn evaluate(ctx: &Context, base: &ModelWeights, edited: &ModelWeights, records: &[EditRecord]) -> CliResult<EvalOutput> {
    if base.config() != edited.config() {
        return Err(tars_core::Error::Usage("base and edited checkpoints have different model configs".into()).into());
    }
    let cfg = &ctx.config;
    let world = &cfg.world;
    let mut probes: Vec<ProbeResult> = Vec::new();
    for c in &world.concepts {
        for lang in &cfg.corpus.languages {
            probes.push(eval::causal_probe(edited, world, &ctx.vocab, &c.concept_id, lang, cfg.eval.probe_seed)?);
            probes.push(eval::reverse_probe(
                edited,
                world,
                &ctx.vocab,
                &c.concept_id,
                lang,
                cfg.eval.reverse_samples,
                cfg.eval.probe_seed,
            )?);
        }
    }
    let mut kl: Vec<KlSummary> = vec![eval::kl_divergence(base, edited, &ctx.retain_corpus()?, "retain")?];
    let mut concepts: Vec<&str> = Vec::new();
    for r in records {
        if !concepts.contains(&r.concept_id.as_str()) {
            concepts.push(&r.concept_id);
        }
    }
    for c in concepts {
        let lang = cfg
            .removal(c)
            .map(|r| r.language.clone())
            .or_else(|| cfg.corpus.languages.first().cloned())
            .ok_or_else(|| CliError::Config("no corpus languages".into()))?;
        let docs = ctx.concept_docs(c, &lang)?;
        kl.push(eval::kl_divergence(base, edited, &docs, &format!("concept:{c}"))?);
    }
    for p in &cfg.eval.corpora {
        let docs = artifacts::read_corpus(p)?;
        let label = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        kl.push(eval::kl_divergence(base, edited, &docs, &label)?);
    }
    let edits = records
        .iter()
        .map(|r| EditSummary {
            concept_id: r.concept_id.clone(),
            edit_count: r.edits.len(),
        })
        .collect();
    let report = EvalReport {
        base_hash: base.checkpoint_hash(),
        edited_hash: edited.checkpoint_hash(),
        probes,
        kl,
        edits,
    };
    let stem = format!("eval-{}-{}", artifacts::hex(report.base_hash), artifacts::hex(report.edited_hash));
    let path = ctx.out(&format!("{stem}.json"));
    artifacts::write_json(&path, &report)?;
    let csv = if cfg.eval.kl_csv {
        let p = ctx.out(&format!("kl-{}-{}.csv", artifacts::hex(report.base_hash), artifacts::hex(report.edited_hash)));
        artifacts::write_kl_csv(&p, &report.kl)?;
        Some(p)
    } else {
        None
    };
    Ok(EvalOutput { path, csv, report })
}

/// Probe table followed by the KL table (median and 90% interval).
pub fn eval_table(report: &EvalReport) -> String {
    let mut s = format!(
        "base {}  edited {}\n\nconcept     lang  direction  p_target  hit_rate\n",
        artifacts::hex(report.base_hash),
        artifacts::hex(report.edited_hash)
    );
    for p in &report.probes {
        let dir = match p.direction {
            corpus::Direction::Causal => "causal",
            corpus::Direction::Reverse => "reverse",
        };
        let hit = p.attribute_hit_rate.map_or_else(|| "-".to_string(), |h| format!("{h:.3}"));
        let _ = writeln!(s, "{:<10}  {:<4}  {:<9}  {:>8.4}  {:>8}", p.concept_id, p.language, dir, p.p_target, hit);
    }
    s.push_str("\ncorpus            positions  KL median [5%, 95%]\n");
    for k in &report.kl {
        let _ = writeln!(s, "{:<16}  {:>9}  {:.6} [{:.6}, {:.6}]", k.label, k.points.len(), k.median, k.p5, k.p95);
    }
    if !report.edits.is_empty() {
        s.push_str("\nconcept     rows edited\n");
        for e in &report.edits {
            let _ = writeln!(s, "{:<10}  {:>11}", e.concept_id, e.edit_count);
        }
    }
    s
}

/// A finished pipeline step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub concept_id: String,
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub record: PathBuf,
}

/// Progress file enabling resumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub config_digest: String,
    pub base_checkpoint: Option<PathBuf>,
    pub base_hash: Option<String>,
    pub stages: Vec<StageState>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub base: ModelWeights,
    pub final_weights: ModelWeights,
    pub records: Vec<EditRecord>,
    pub curve: ModularCurve,
    pub curve_path: PathBuf,
    pub eval: EvalOutput,
    /// Steps taken from a previous run's state.
    pub resumed: usize,
}

fn load_verified(path: &Path, expected: &str) -> Option<ModelWeights> {
    let w = artifacts::load_checkpoint(path).ok()?;
    (artifacts::hex(w.checkpoint_hash()) == expected).then_some(w)
}

/// Train, then remove each configured concept in order on the running model,
/// then probe every stage and evaluate base against the final model.
///
/// Completed steps recorded in the state file are reused when their
/// checkpoints still verify.
pub fn run_pipeline(ctx: &Context, timestamp: Option<u64>) -> CliResult<PipelineOutput> {
    let cfg = &ctx.config;
    let state_path = ctx.out(STATE_FILE);
    let digest = artifacts::hex(cfg.digest());
    let previous: Option<PipelineState> = if state_path.is_file() {
        artifacts::read_json::<PipelineState>(&state_path).ok().filter(|s| s.config_digest == digest)
    } else {
        None
    };
    let mut state = PipelineState {
        config_digest: digest,
        base_checkpoint: None,
        base_hash: None,
        stages: Vec::new(),
    };
    let mut resumed = 0;

    let reused_base = previous.as_ref().and_then(|p| match (&p.base_checkpoint, &p.base_hash) {
        (Some(c), Some(h)) => load_verified(c, h).map(|w| (c.clone(), w)),
        _ => None,
    });
    let (base_path, base) = match reused_base {
        Some(found) => {
            log::info!("reusing trained checkpoint {}", found.0.display());
            resumed += 1;
            found
        }
        None => {
            let t = train(ctx)?;
            (t.checkpoint, t.weights)
        }
    };
    state.base_hash = Some(artifacts::hex(base.checkpoint_hash()));
    state.base_checkpoint = Some(base_path);
    artifacts::write_json(&state_path, &state)?;

    let mut w = base.clone();
    let mut records: Vec<EditRecord> = Vec::new();
    let mut stage_weights = vec![base.clone()];
    for (i, removal) in cfg.removals.iter().enumerate() {
        let prior = previous.as_ref().and_then(|p| p.stages.get(i)).filter(|s| s.concept_id == removal.concept_id);
        let reused = prior.and_then(|s| {
            let next = load_verified(&s.checkpoint, &s.checkpoint_hash)?;
            let record = artifacts::load_record(&s.record).ok()?;
            (record.hash_before == w.checkpoint_hash() && record.hash_after == next.checkpoint_hash())
                .then_some((s.clone(), next, record))
        });
        let (stage, next, record) = match reused {
            Some(found) if resumed == i + 1 => {
                log::info!("reusing removal of {}", removal.concept_id);
                resumed += 1;
                found
            }
            _ => {
                let stage = removal.stage(&cfg.targeting)?;
                let r = eval::remove_concept(&w, &cfg.world, &ctx.vocab, &stage, &records)?;
                write_target(ctx.out_dir(), &w, &r.target, &removal.concept_id, &removal.language)?;
                let mut record = r.record;
                record.timestamp = timestamp;
                let (checkpoint, record_path) = write_edit(ctx.out_dir(), &r.weights, &record)?;
                log::info!(
                    "removed {} with {:?}: p_target {:.4}",
                    removal.concept_id,
                    record.selector,
                    r.p_after
                );
                let s = StageState {
                    concept_id: removal.concept_id.clone(),
                    checkpoint,
                    checkpoint_hash: artifacts::hex(record.hash_after),
                    record: record_path,
                };
                (s, r.weights, record)
            }
        };
        state.stages.push(stage);
        artifacts::write_json(&state_path, &state)?;
        w = next;
        records.push(record);
        stage_weights.push(w.clone());
    }

    let rows: Vec<(String, String)> = cfg.removals.iter().map(|r| (r.concept_id.clone(), r.language.clone())).collect();
    let mut p_target = Vec::with_capacity(rows.len());
    for (c, l) in &rows {
        let mut row = Vec::with_capacity(stage_weights.len());
        for sw in &stage_weights {
            row.push(eval::causal_probe(sw, &cfg.world, &ctx.vocab, c, l, cfg.eval.probe_seed)?.p_target);
        }
        p_target.push(row);
    }
    let curve = ModularCurve {
        rows,
        p_target,
        records: records.clone(),
    };
    let curve_path = ctx.out(&format!("curve-{}.json", artifacts::hex(w.checkpoint_hash())));
    artifacts::write_json(&curve_path, &curve)?;
    let eval = evaluate(ctx, &base, &w, &records)?;
    Ok(PipelineOutput {
        base,
        final_weights: w,
        records,
        curve,
        curve_path,
        eval,
        resumed,
    })
}

/// Stage matrix: one row per removed concept, one column per stage.
pub fn curve_table(curve: &ModularCurve) -> String {
    let mut s = String::from("concept     lang  base");
    for i in 1..=curve.records.len() {
        let _ = write!(s, "  stage{i}");
    }
    s.push('\n');
    for ((c, l), row) in curve.rows.iter().zip(&curve.p_target) {
        let _ = write!(s, "{c:<10}  {l:<4}");
        for p in row {
            let _ = write!(s, "  {p:.4}");
        }
        s.push('\n');
    }
    s
}
