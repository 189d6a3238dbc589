// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::{json, Value};
use tars::artifacts;
use tars::config::BUNDLED;
use tars_core::model::{ModelWeights, ProjKind};

/// Tiny model, short training, permissive targeting.
fn tiny_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(BUNDLED).unwrap();
    v["model"] = json!({
        "d_model": 16, "n_layers": 2, "n_heads": 2, "d_ff": 24,
        "vocab_size": 512, "max_seq_len": 64
    });
    v["train"]["steps"] = json!(40);
    v["corpus"]["n_background"] = json!(40);
    v["corpus"]["n_per_concept"] = json!(4);
    v["corpus"]["n_code_switch"] = json!(2);
    v["retain"]["n_docs"] = json!(12);
    v["concept_docs"]["n_docs"] = json!(3);
    v["targeting"] = json!({
        "sigma": {"rms_multiple": 0.05}, "tau": 0.0001, "batch_size": 16,
        "max_batches": 20, "min_candidates": 8, "seed": 1
    });
    v["removals"] = json!([{"concept_id": "dog", "language": "en", "top_k": 2}]);
    v["eval"]["reverse_samples"] = json!(2);
    v["out_dir"] = json!(dir.join("out"));
    edit(&mut v);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn tars(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tars"));
    cmd.args(args).env_remove("RUST_LOG");
    for k in std::env::vars().map(|(k, _)| k) {
        if k.starts_with("TARS_") {
            cmd.env_remove(k);
        }
    }
    cmd.envs(envs.iter().copied());
    cmd.output().unwrap()
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Value of a `label: path` line.
fn field(stdout: &str, label: &str) -> PathBuf {
    let prefix = format!("{label}: ");
    let line = stdout
        .lines()
        .find(|l| l.starts_with(&prefix))
        .unwrap_or_else(|| panic!("no {label:?} line in\n{stdout}"));
    PathBuf::from(&line[prefix.len()..])
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Trained {
    _dir: tempfile::TempDir,
    config: PathBuf,
    checkpoint: PathBuf,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path(), |_| {});
        let out = ok(&tars(&["train", "--config", p(&config)], &[]));
        Trained {
            checkpoint: field(&out, "checkpoint"),
            config,
            _dir: dir,
        }
    })
}

fn target_file(out_dir: &Path, envs: &[(&str, &str)]) -> PathBuf {
    let t = trained();
    let out = ok(&tars(
        &["--out-dir", p(out_dir), "target", "--config", p(&t.config), "--checkpoint", p(&t.checkpoint), "--concept", "dog"],
        envs,
    ));
    field(&out, "target")
}

#[test]
fn train_with_zero_steps_writes_the_seeded_init() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), |v| v["train"]["steps"] = json!(0));
    let out = ok(&tars(&["train", "--config", p(&config)], &[]));
    let w = artifacts::load_checkpoint(&field(&out, "checkpoint")).unwrap();
    let cfg = tars::config::PipelineConfig::load(&config).unwrap();
    let init = ModelWeights::init(cfg.model, cfg.init_seed).unwrap();
    assert_eq!(w.params(), init.params());
    let report: Value = artifacts::read_json(&field(&out, "report")).unwrap();
    assert_eq!(report["losses"], json!([]));
    assert_eq!(report["concept_probabilities"].as_array().unwrap().len(), 6);
    assert!(dir.path().join("out/vocab.json").is_file());
    assert!(dir.path().join("out/corpus.jsonl").is_file());
}

#[test]
fn training_is_byte_deterministic() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&tars(&["--out-dir", p(dir.path()), "train", "--config", p(&t.config)], &[]));
    let again = field(&out, "checkpoint");
    assert_eq!(again.file_name(), t.checkpoint.file_name());
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(&t.checkpoint).unwrap());
}

#[test]
fn missing_corpus_file_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), |v| v["corpus_path"] = json!("/no/such/corpus.jsonl"));
    let out = tars(&["train", "--config", p(&config)], &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("/no/such/corpus.jsonl"), "{}", stderr(&out));
}

#[test]
fn malformed_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"seed\": 1,\n  \"model\": oops\n}").unwrap();
    let out = tars(&["train", "--config", p(&path)], &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn unknown_concept_exits_2() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = tars(
        &["--out-dir", p(dir.path()), "target", "--config", p(&t.config), "--checkpoint", p(&t.checkpoint), "--concept", "unicorn"],
        &[],
    );
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn zero_sigma_target_equals_the_approximate_vector() {
    let dir = tempfile::tempdir().unwrap();
    let path = target_file(dir.path(), &[("TARS_TARGETING_SIGMA_RMS_MULTIPLE", "0")]);
    let (t, source) = artifacts::load_target(&path).unwrap();
    assert_eq!(t.v_target, t.provenance.v_approx);
    assert_eq!(source.concept_id, "dog");
    assert_eq!(source.language, "en");
    assert!(t.provenance.candidates_retained >= 8);
    let w = artifacts::load_checkpoint(&trained().checkpoint).unwrap();
    assert_eq!(source.checkpoint_hash, artifacts::hex(w.checkpoint_hash()));
    assert!(path.file_name().unwrap().to_str().unwrap().contains(&source.checkpoint_hash));
}

#[test]
fn unreachable_tau_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let t = trained();
    let out = tars(
        &["--out-dir", p(dir.path()), "target", "--config", p(&t.config), "--checkpoint", p(&t.checkpoint), "--concept", "dog"],
        &[("TARS_TARGETING_TAU", "0.9999"), ("TARS_TARGETING_MAX_BATCHES", "2")],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("refinement"));
}

#[test]
fn theta_one_selects_nothing_and_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let target = target_file(dir.path(), &[]);
    let out = tars(
        &["--out-dir", p(dir.path()), "scan-edit", "--checkpoint", p(&trained().checkpoint), "--target", p(&target), "--theta", "1.0"],
        &[],
    );
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("no candidates"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 20);
}

#[test]
fn selector_flags_are_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let target = target_file(dir.path(), &[]);
    let ck = p(&trained().checkpoint);
    let both = tars(&["scan-edit", "--checkpoint", ck, "--target", p(&target), "--theta", "0.1", "--top-k", "1"], &[]);
    assert_eq!(code(&both), 2);
    let neither = tars(&["scan-edit", "--checkpoint", ck, "--target", p(&target)], &[]);
    assert_eq!(code(&neither), 2);
}

#[test]
fn top_k_one_edits_the_planted_row() {
    let dir = tempfile::tempdir().unwrap();
    let target = target_file(dir.path(), &[]);
    let (t, _) = artifacts::load_target(&target).unwrap();
    let base = artifacts::load_checkpoint(&trained().checkpoint).unwrap();
    let name = "layers.1.ffn.up";
    let tensors: Vec<(String, Vec<usize>, Vec<f32>)> = base
        .tensors()
        .map(|(n, s, d)| {
            let mut d = d.to_vec();
            if n == name {
                let cols = s[1];
                for (j, x) in t.v_target.as_slice().iter().enumerate() {
                    d[7 * cols + j] = 3.0 * x;
                }
            }
            (n.to_string(), s.to_vec(), d)
        })
        .collect();
    let planted = ModelWeights::from_tensors(
        base.config().clone(),
        tensors.iter().map(|(n, s, d)| (n.as_str(), s.as_slice(), d.as_slice())),
    )
    .unwrap();
    let ck = dir.path().join("planted.tars");
    artifacts::save_checkpoint(&ck, &planted, None).unwrap();
    let out = ok(&tars(&["--out-dir", p(dir.path()), "scan-edit", "--checkpoint", p(&ck), "--target", p(&target), "--top-k", "1"], &[]));
    let first_row = out.lines().nth(1).unwrap();
    assert!(first_row.contains("up") && first_row.contains("+1.000000"), "{first_row}");
    let record = artifacts::load_record(&field(&out, "record")).unwrap();
    assert_eq!(record.edits.len(), 1);
    let e = &record.edits[0];
    assert_eq!((e.layer, e.kind, e.row), (1, ProjKind::Up, 7));
    assert_eq!(e.prior, planted.ffn_row(1, ProjKind::Up, 7));
    assert!(record.timestamp.is_some());
    let edited = artifacts::load_checkpoint(&field(&out, "checkpoint")).unwrap();
    assert_eq!(edited.checkpoint_hash(), record.hash_after);
    assert_eq!(tars_core::surgery::revert(&edited, &record).unwrap().params(), planted.params());
}

#[test]
fn eval_of_a_model_against_itself_has_zero_kl() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&tars(
        &["--out-dir", p(dir.path()), "eval", "--config", p(&t.config), "--base", p(&t.checkpoint), "--edited", p(&t.checkpoint)],
        &[],
    ));
    let report: tars_core::eval::EvalReport = artifacts::read_json(&field(&out, "report")).unwrap();
    assert!(!report.kl.is_empty());
    for k in &report.kl {
        assert!(k.median.abs() <= 1e-9 && k.p95.abs() <= 1e-9, "{}: {}", k.label, k.median);
    }
    assert_eq!(report.probes.len(), 12);
    assert!(out.contains("KL median"));
    let csv = std::fs::read_to_string(field(&out, "kl csv")).unwrap();
    assert!(csv.starts_with("corpus,position,doc,kl\n"));
    assert_eq!(csv.lines().count(), 1 + report.kl[0].points.len());
}

#[test]
fn eval_with_mismatched_configs_exits_2() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let other = tiny_config(dir.path(), |v| {
        v["model"]["d_ff"] = json!(32);
        v["train"]["steps"] = json!(0);
    });
    let out = ok(&tars(&["train", "--config", p(&other)], &[]));
    let res = tars(
        &["eval", "--config", p(&t.config), "--base", p(&t.checkpoint), "--edited", p(&field(&out, "checkpoint"))],
        &[],
    );
    assert_eq!(code(&res), 2, "{}", stderr(&res));
}

#[test]
fn corrupted_checkpoint_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("c.tars");
    let mut bytes = std::fs::read(&trained().checkpoint).unwrap();
    let n = bytes.len();
    bytes[n - 2] ^= 0x40;
    std::fs::write(&ck, bytes).unwrap();
    let out = tars(&["--out-dir", p(dir.path()), "target", "--config", p(&trained().config), "--checkpoint", p(&ck), "--concept", "dog"], &[]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
}

#[test]
fn inspect_prints_the_header() {
    let out = ok(&tars(&["inspect", p(&trained().checkpoint)], &[]));
    assert!(out.starts_with("version 1\n"));
    assert!(out.contains("layers.1.ffn.gate"));
    assert!(out.contains("embed.tokens"));
    assert!(out.contains("\"kind\": \"checkpoint\""));
    let missing = tars(&["inspect", "/no/such/file.tars"], &[]);
    assert_eq!(code(&missing), 2);
}

fn strip_timestamp(path: &Path) -> Value {
    let mut v: Value = artifacts::read_json(path).unwrap();
    v.as_object_mut().unwrap().remove("timestamp");
    v
}

#[test]
fn single_concept_pipeline_equals_the_composed_commands() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), |_| {});
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let cfg = p(&config);

    ok(&tars(&["--out-dir", p(&a), "pipeline", "--config", cfg], &[]));

    let train = ok(&tars(&["--out-dir", p(&b), "train", "--config", cfg], &[]));
    let base = field(&train, "checkpoint");
    let target = field(
        &ok(&tars(&["--out-dir", p(&b), "target", "--config", cfg, "--checkpoint", p(&base), "--concept", "dog"], &[])),
        "target",
    );
    let edit = ok(&tars(
        &["--out-dir", p(&b), "scan-edit", "--checkpoint", p(&base), "--target", p(&target), "--top-k", "2"],
        &[],
    ));
    let edited = field(&edit, "checkpoint");
    let record = field(&edit, "record");
    ok(&tars(
        &["--out-dir", p(&b), "eval", "--config", cfg, "--base", p(&base), "--edited", p(&edited), "--record", p(&record)],
        &[],
    ));

    let mut names: Vec<String> = std::fs::read_dir(&b)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    for name in &names {
        let (x, y) = (a.join(name), b.join(name));
        assert!(x.is_file(), "pipeline did not write {name}");
        if name.starts_with("edit-") && name.ends_with(".json") {
            assert_eq!(strip_timestamp(&x), strip_timestamp(&y), "{name}");
        } else {
            assert_eq!(std::fs::read(&x).unwrap(), std::fs::read(&y).unwrap(), "{name} differs");
        }
    }
}

#[test]
fn pipeline_resumes_from_recorded_stages() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), |v| {
        v["removals"] = json!([
            {"concept_id": "dog", "language": "en", "top_k": 1},
            {"concept_id": "saturn", "language": "en", "theta": 0.2},
        ]);
    });
    let out_dir = dir.path().join("out");
    let first = ok(&tars(&["pipeline", "--config", p(&config)], &[]));
    let report = field(&first, "report");
    let report_bytes = std::fs::read(&report).unwrap();
    let state: tars::pipeline::PipelineState = artifacts::read_json(&out_dir.join(tars::pipeline::STATE_FILE)).unwrap();
    assert_eq!(state.stages.len(), 2);

    let second = tars(&["-v", "pipeline", "--config", p(&config)], &[]);
    ok(&second);
    let log = stderr(&second);
    assert!(log.contains("reusing trained checkpoint"), "{log}");
    assert!(log.contains("reusing removal of saturn"), "{log}");
    assert_eq!(std::fs::read(&report).unwrap(), report_bytes);

    std::fs::remove_file(&state.stages[1].checkpoint).unwrap();
    let third = tars(&["-v", "pipeline", "--config", p(&config)], &[]);
    ok(&third);
    let log = stderr(&third);
    assert!(log.contains("reusing removal of dog"), "{log}");
    assert!(!log.contains("reusing removal of saturn"), "{log}");
    assert!(!log.contains("step "), "{log}");
    assert_eq!(std::fs::read(&report).unwrap(), report_bytes);
    assert!(state.stages[1].checkpoint.is_file());
}
