// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk forms of checkpoints, targeting vectors, edit records, vocabularies,
//! corpora and KL tables. File names carry checkpoint hashes.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tars_core::corpus::{CorpusDoc, Vocab};
use tars_core::eval::KlSummary;
use tars_core::model::{ModelConfig, ModelWeights};
use tars_core::numerics::Vector;
use tars_core::surgery::EditRecord;
use tars_core::targeting::{Provenance, TargetingVector};

use crate::container::{write_atomic, Container};
use crate::error::{CliError, CliResult};

pub const KIND_CHECKPOINT: &str = "checkpoint";
pub const KIND_TARGET: &str = "targeting_vector";
pub const KIND_PRIOR_ROWS: &str = "prior_rows";

pub fn hex(hash: u64) -> String {
    format!("{hash:016x}")
}

pub fn parse_hex(s: &str) -> Option<u64> {
    u64::from_str_radix(s, 16).ok()
}

pub fn checkpoint_name(hash: u64) -> String {
    format!("ckpt-{}.tars", hex(hash))
}

pub fn target_name(concept: &str, language: &str, hash: u64) -> String {
    format!("target-{concept}-{language}-{}.tars", hex(hash))
}

pub fn record_name(hash_after: u64) -> String {
    format!("edit-{}.json", hex(hash_after))
}

/// Sidecar path holding the prior rows of `record_path`.
pub fn sidecar_path(record_path: &Path) -> PathBuf {
    record_path.with_extension("prior.tars")
}

fn kind_of(c: &Container) -> Option<&str> {
    c.metadata.get("kind").and_then(Value::as_str)
}

fn expect_kind(path: &Path, c: &Container, kind: &str) -> CliResult<()> {
    match kind_of(c) {
        Some(k) if k == kind => Ok(()),
        other => Err(CliError::format(path, format!("expected a {kind} container, found {other:?}"))),
    }
}

fn meta_field<T: DeserializeOwned>(path: &Path, c: &Container, key: &str) -> CliResult<T> {
    let v = c
        .metadata
        .get(key)
        .ok_or_else(|| CliError::format(path, format!("metadata lacks {key:?}")))?;
    serde_json::from_value(v.clone()).map_err(|e| CliError::format(path, format!("metadata {key:?}: {e}")))
}

/// `parent` is the hash of the checkpoint this one was derived from.
pub fn save_checkpoint(path: &Path, w: &ModelWeights, parent: Option<u64>) -> CliResult<()> {
    let mut c = Container::new(json!({
        "kind": KIND_CHECKPOINT,
        "model": w.config(),
        "checkpoint_hash": hex(w.checkpoint_hash()),
        "parent": parent.map(hex),
    }));
    for (name, shape, data) in w.tensors() {
        c.push(name, shape.to_vec(), data.to_vec());
    }
    c.write(path)
}

/// Loads and verifies the recorded hash; a mismatch is an integrity error.
pub fn load_checkpoint(path: &Path) -> CliResult<ModelWeights> {
    let c = Container::read(path)?;
    expect_kind(path, &c, KIND_CHECKPOINT)?;
    let config: ModelConfig = meta_field(path, &c, "model")?;
    let recorded: String = meta_field(path, &c, "checkpoint_hash")?;
    let expected = parse_hex(&recorded)
        .ok_or_else(|| CliError::format(path, format!("bad checkpoint hash {recorded:?}")))?;
    let w = ModelWeights::from_tensors(
        config,
        c.tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.as_slice())),
    )?;
    let found = w.checkpoint_hash();
    if found != expected {
        return Err(tars_core::Error::Integrity { expected, found }.into());
    }
    Ok(w)
}

/// Where a targeting vector came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSource {
    pub concept_id: String,
    pub language: String,
    pub checkpoint_hash: String,
}

pub fn save_target(path: &Path, t: &TargetingVector, source: &TargetSource) -> CliResult<()> {
    let mut c = Container::new(json!({
        "kind": KIND_TARGET,
        "source": source,
        "provenance": t.provenance,
    }));
    c.push("v_target", vec![t.v_target.dim()], t.v_target.as_slice().to_vec());
    c.write(path)
}

pub fn load_target(path: &Path) -> CliResult<(TargetingVector, TargetSource)> {
    let c = Container::read(path)?;
    expect_kind(path, &c, KIND_TARGET)?;
    let source: TargetSource = meta_field(path, &c, "source")?;
    let provenance: Provenance = meta_field(path, &c, "provenance")?;
    let t = c
        .get("v_target")
        .ok_or_else(|| CliError::format(path, "missing tensor v_target"))?;
    if t.shape.len() != 1 {
        return Err(CliError::format(path, "v_target must be one-dimensional"));
    }
    let v_target = Vector::new(t.data.clone())?;
    Ok((
        TargetingVector {
            v_target,
            provenance,
            candidates: Vec::new(),
        },
        source,
    ))
}

fn prior_tensor_name(layer: usize, kind: &str, row: usize) -> String {
    format!("layers.{layer}.ffn.{kind}.row{row}")
}

/// Writes the record as JSON (prior rows stripped) and the prior rows to the
/// sidecar container.
pub fn save_record(path: &Path, record: &EditRecord) -> CliResult<()> {
    let sidecar = sidecar_path(path);
    let mut c = Container::new(json!({
        "kind": KIND_PRIOR_ROWS,
        "concept_id": record.concept_id,
        "hash_before": hex(record.hash_before),
    }));
    for e in &record.edits {
        c.push(prior_tensor_name(e.layer, e.kind.as_str(), e.row), vec![e.prior.len()], e.prior.clone());
    }
    c.write(&sidecar)?;
    let mut v = serde_json::to_value(record).expect("record serializes");
    for e in v["edits"].as_array_mut().expect("edits array") {
        e.as_object_mut().expect("edit object").remove("prior");
    }
    let name = sidecar.file_name().expect("file name").to_string_lossy().into_owned();
    v.as_object_mut().expect("record object").insert("sidecar".into(), Value::String(name));
    write_json(path, &v)
}

pub fn load_record(path: &Path) -> CliResult<EditRecord> {
    let mut v: Value = read_json(path)?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| CliError::parse(path, "edit record must be a JSON object"))?;
    let sidecar = match obj.remove("sidecar") {
        Some(Value::String(s)) => path.with_file_name(s),
        _ => sidecar_path(path),
    };
    let c = Container::read(&sidecar)?;
    expect_kind(&sidecar, &c, KIND_PRIOR_ROWS)?;
    let edits = obj
        .get_mut("edits")
        .and_then(Value::as_array_mut)
        .ok_or_else(|| CliError::parse(path, "edit record lacks an edits array"))?;
    for e in edits.iter_mut() {
        let (layer, kind, row) = (e["layer"].as_u64(), e["kind"].as_str(), e["row"].as_u64());
        let (Some(layer), Some(kind), Some(row)) = (layer, kind, row) else {
            return Err(CliError::parse(path, "edit entry lacks layer, kind or row"));
        };
        let name = prior_tensor_name(layer as usize, kind, row as usize);
        let t = c
            .get(&name)
            .ok_or_else(|| CliError::format(&sidecar, format!("missing prior row {name}")))?;
        e["prior"] = serde_json::to_value(&t.data).expect("floats serialize");
    }
    serde_json::from_value(v).map_err(|e| CliError::parse(path, e))
}

pub fn save_vocab(path: &Path, vocab: &Vocab) -> CliResult<()> {
    write_json(path, &vocab.to_map())
}

pub fn load_vocab(path: &Path) -> CliResult<Vocab> {
    let map = read_json(path)?;
    Ok(Vocab::from_map(&map)?)
}

#[derive(Serialize, Deserialize)]
struct DocLine {
    tokens: Vec<u32>,
    lang: String,
    concept: String,
}

pub fn write_corpus(path: &Path, docs: &[CorpusDoc]) -> CliResult<()> {
    let mut out = Vec::new();
    for d in docs {
        let line = DocLine {
            tokens: d.tokens.clone(),
            lang: d.lang.clone(),
            concept: d.concept.clone(),
        };
        serde_json::to_writer(&mut out, &line).expect("doc serializes");
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// One document per line; blank lines are skipped.
pub fn read_corpus(path: &Path) -> CliResult<Vec<CorpusDoc>> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: DocLine = serde_json::from_str(&line).map_err(|e| CliError::parse(path, format!("line {}: {e}", i + 1)))?;
        docs.push(CorpusDoc {
            tokens: d.tokens,
            lang: d.lang,
            concept: d.concept,
        });
    }
    Ok(docs)
}

/// Columns `corpus, position, doc, kl`.
pub fn write_kl_csv(path: &Path, summaries: &[KlSummary]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::parse(path, e);
    w.write_record(["corpus", "position", "doc", "kl"]).map_err(fail)?;
    for s in summaries {
        for p in &s.points {
            w.write_record([s.label.clone(), p.position.to_string(), p.doc.to_string(), format!("{:e}", p.kl)])
                .map_err(fail)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::parse(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.write_all(b"\n").expect("vec write");
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::parse(path, e))
}
