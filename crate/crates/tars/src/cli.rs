// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line surface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tars_core::surgery;

use crate::artifacts;
use crate::config::PipelineConfig;
use crate::container;
use crate::error::{CliError, CliResult};
use crate::pipeline::{self, Context};

#[derive(Debug, Parser)]
#[command(name = "tars", version, about = "Concept removal by targeted angular reversal of FFN rows")]
pub struct Cli {
    /// Global seed; every sub-seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Pipeline config; the bundled default when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its checkpoint and report.
    Train(ConfigArg),
    /// Build a refined targeting vector for one concept.
    Target {
        #[command(flatten)]
        config: ConfigArg,
        /// Trained checkpoint to probe.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Concept id from the world definition.
        #[arg(long)]
        concept: String,
        /// Language of the description prompt (default: the concept's
        /// configured removal language, else the first corpus language).
        #[arg(long)]
        language: Option<String>,
    },
    /// Scan FFN rows against a targeting vector and replace the selected rows.
    ScanEdit {
        /// Checkpoint to edit.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Targeting-vector file written by `target`.
        #[arg(long)]
        target: PathBuf,
        /// Edit every row whose cosine score exceeds this threshold.
        #[arg(long, conflicts_with = "top_k")]
        theta: Option<f64>,
        /// Edit the k best-scoring rows.
        #[arg(long)]
        top_k: Option<usize>,
        /// Scale of the reversed row.
        #[arg(long, default_value_t = 1.0)]
        amplitude: f32,
        /// Earlier edit records of this checkpoint's lineage.
        #[arg(long)]
        history: Vec<PathBuf>,
    },
    /// Compare an edited checkpoint with its base.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Unedited checkpoint.
        #[arg(long)]
        base: PathBuf,
        /// Edited checkpoint.
        #[arg(long)]
        edited: PathBuf,
        /// Edit records whose concepts get description-doc KL rows.
        #[arg(long)]
        record: Vec<PathBuf>,
    },
    /// Train, remove every configured concept in order, and evaluate.
    Pipeline(ConfigArg),
    /// Print a container's header.
    Inspect {
        /// Checkpoint, targeting vector or edit sidecar.
        path: PathBuf,
    },
}

fn now() -> Option<u64> {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .ok()
        .map(|d| d.as_secs())
}

fn context(arg: &ConfigArg, cli: &Cli) -> CliResult<Context> {
    let mut cfg = match &arg.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::bundled_with_env()?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
        cfg.apply_seed();
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    Context::new(cfg)
}

fn print_path(what: &str, p: &Path) {
    println!("{what}: {}", p.display());
}

pub fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Train(arg) => {
            let ctx = context(arg, cli)?;
            let out = pipeline::train(&ctx)?;
            print_path("checkpoint", &out.checkpoint);
            print_path("report", &out.report_path);
            for p in &out.report.concept_probabilities {
                println!("{:<10}  {:<4}  p_target {:.4}", p.concept, p.lang, p.p_target);
            }
        }
        Command::Target {
            config,
            checkpoint,
            concept,
            language,
        } => {
            let ctx = context(config, cli)?;
            let w = artifacts::load_checkpoint(checkpoint)?;
            let language = match language {
                Some(l) => l.clone(),
                None => ctx
                    .config
                    .removal(concept)
                    .map(|r| r.language.clone())
                    .or_else(|| ctx.config.corpus.languages.first().cloned())
                    .ok_or_else(|| CliError::Config("no language given and none configured".into()))?,
            };
            let out = pipeline::target(&ctx, &w, concept, &language)?;
            let p = &out.target.provenance;
            print_path("target", &out.path);
            println!(
                "candidates {}  batches {}  p_target {:.4} -> {:.4}",
                p.candidates_retained, p.batches_run, p.p_target_before, p.p_target_after
            );
            for warning in &p.warnings {
                println!("warning: {warning}");
            }
        }
        Command::ScanEdit {
            checkpoint,
            target,
            theta,
            top_k,
            amplitude,
            history,
        } => {
            let selector = surgery::selector_from(*theta, *top_k)?;
            let w = artifacts::load_checkpoint(checkpoint)?;
            let (t, source) = artifacts::load_target(target)?;
            if source.checkpoint_hash != artifacts::hex(w.checkpoint_hash()) {
                log::warn!(
                    "targeting vector was built on checkpoint {}, editing {}",
                    source.checkpoint_hash,
                    artifacts::hex(w.checkpoint_hash())
                );
            }
            let history = history.iter().map(|p| artifacts::load_record(p)).collect::<CliResult<Vec<_>>>()?;
            let out_dir = cli.out_dir.clone().unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
            let hits = surgery::scan(&w, &t.v_target)?.hits;
            print!("{}", pipeline::scan_table(&hits, pipeline::SCAN_TABLE_ROWS));
            let edit = pipeline::EditSettings {
                concept: &source.concept_id,
                v_target: &t.v_target,
                selector,
                amplitude: *amplitude,
            };
            let out = pipeline::scan_edit(&out_dir, &w, &hits, &edit, &history, now())?;
            println!("edited {} rows", out.record.edits.len());
            print_path("checkpoint", &out.checkpoint);
            print_path("record", &out.record_path);
        }
        Command::Eval {
            config,
            base,
            edited,
            record,
        } => {
            let ctx = context(config, cli)?;
            let b = artifacts::load_checkpoint(base)?;
            let e = artifacts::load_checkpoint(edited)?;
            let records = record.iter().map(|p| artifacts::load_record(p)).collect::<CliResult<Vec<_>>>()?;
            let out = pipeline::evaluate(&ctx, &b, &e, &records)?;
            print!("{}", pipeline::eval_table(&out.report));
            print_path("report", &out.path);
            if let Some(c) = &out.csv {
                print_path("kl csv", c);
            }
        }
        Command::Pipeline(arg) => {
            let ctx = context(arg, cli)?;
            let out = pipeline::run_pipeline(&ctx, now())?;
            print!("{}", pipeline::curve_table(&out.curve));
            println!();
            print!("{}", pipeline::eval_table(&out.eval.report));
            print_path("curve", &out.curve_path);
            print_path("report", &out.eval.path);
        }
        Command::Inspect { path } => {
            let h = container::read_header(path)?;
            println!("version {}", h.version);
            println!("{:<32}  {:<5}  {:<14}  offset", "tensor", "dtype", "shape");
            for (name, info) in &h.tensors {
                println!("{:<32}  {:<5}  {:<14}  {}", name, info.dtype, format!("{:?}", info.shape), info.offset);
            }
            println!("metadata:");
            println!("{}", serde_json::to_string_pretty(&h.metadata).expect("json value"));
        }
    }
    Ok(())
}
