// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline configuration: one JSON document, scalar leaves overridable from
//! `TARS_<PATH>` environment variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tars_core::corpus::{CorpusConfig, World};
use tars_core::eval::RemovalStage;
use tars_core::model::ModelConfig;
use tars_core::surgery::{self, Selector};
use tars_core::targeting::RefineParams;
use tars_core::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

/// The configuration shipped with the crate.
pub const BUNDLED: &str = include_str!("../assets/default_config.json");
pub const ENV_PREFIX: &str = "TARS_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// When set, every sub-seed is derived from it.
    #[serde(default)]
    pub seed: Option<u64>,
    pub init_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub world: World,
    pub corpus: CorpusConfig,
    /// Training documents as JSONL; replaces the generated corpus.
    #[serde(default)]
    pub corpus_path: Option<PathBuf>,
    pub retain: DocSet,
    pub concept_docs: DocSet,
    pub targeting: RefineParams,
    pub removals: Vec<RemovalConfig>,
    pub eval: EvalConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Size and seed of a generated evaluation corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocSet {
    pub n_docs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemovalConfig {
    pub concept_id: String,
    pub language: String,
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default = "unit")]
    pub amplitude: f32,
    /// Search `k = 1..=top_k` for the first edit reaching this probability.
    #[serde(default)]
    pub until_p_below: Option<f32>,
}

fn unit() -> f32 {
    1.0
}

impl RemovalConfig {
    pub fn selector(&self) -> CliResult<Selector> {
        surgery::selector_from(self.theta, self.top_k)
            .map_err(|e| CliError::Config(format!("removal of {:?}: {e}", self.concept_id)))
    }

    pub fn stage(&self, refine: &RefineParams) -> CliResult<RemovalStage> {
        Ok(RemovalStage {
            concept_id: self.concept_id.clone(),
            language: self.language.clone(),
            refine: refine.clone(),
            selector: self.selector()?,
            amplitude: self.amplitude,
            until_p_below: self.until_p_below,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Completions per reverse probe.
    pub reverse_samples: usize,
    pub probe_seed: u64,
    /// Extra JSONL corpora, labelled by file stem.
    #[serde(default)]
    pub corpora: Vec<PathBuf>,
    #[serde(default)]
    pub kl_csv: bool,
}

impl PipelineConfig {
    pub fn bundled() -> Self {
        Self::from_str_with_env(BUNDLED, Path::new("<bundled>"), std::iter::empty()).expect("bundled config is valid")
    }

    /// Reads `path` and applies `TARS_*` overrides from the process environment.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_str_with_env(&text, path, std::env::vars())
    }

    /// The bundled config with process-environment overrides.
    pub fn bundled_with_env() -> CliResult<Self> {
        Self::from_str_with_env(BUNDLED, Path::new("<bundled>"), std::env::vars())
    }

    pub fn from_str_with_env(
        text: &str,
        origin: &Path,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> CliResult<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| CliError::parse(origin, e))?;
        apply_env_overrides(&mut value, env);
        let mut cfg: Self = serde_json::from_value(value).map_err(|e| CliError::parse(origin, e))?;
        cfg.apply_seed();
        Ok(cfg)
    }

    /// Replaces every sub-seed by one derived from the global seed, if any.
    pub fn apply_seed(&mut self) {
        let Some(s) = self.seed else { return };
        self.init_seed = derive_seed(s, "init");
        self.train.seed = derive_seed(s, "train");
        self.corpus.seed = derive_seed(s, "corpus");
        self.retain.seed = derive_seed(s, "retain");
        self.concept_docs.seed = derive_seed(s, "concept_docs");
        self.targeting.seed = derive_seed(s, "targeting");
        self.eval.probe_seed = derive_seed(s, "probe");
    }

    /// Structural checks and file existence; paths are reported on failure.
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.world.validate()?;
        for r in &self.removals {
            r.selector()?;
            self.world.concept(&r.concept_id)?.realization(&r.language)?;
            if !(r.amplitude > 0.0 && r.amplitude.is_finite()) {
                return Err(CliError::Config(format!("removal of {:?}: amplitude must be positive", r.concept_id)));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.removals.iter().find(|r| !seen.insert(&r.concept_id)) {
            return Err(CliError::Config(format!("concept {:?} is removed twice", dup.concept_id)));
        }
        for p in self.corpus_path.iter().chain(&self.eval.corpora) {
            if !p.is_file() {
                return Err(CliError::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
            }
        }
        Ok(())
    }

    /// Removal settings of `concept`, if the config lists it.
    pub fn removal(&self, concept: &str) -> Option<&RemovalConfig> {
        self.removals.iter().find(|r| r.concept_id == concept)
    }

    /// Stable digest of the resolved config.
    pub fn digest(&self) -> u64 {
        fnv1a(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Environment variable name of a JSON path, e.g. `train.steps` → `TARS_TRAIN_STEPS`.
pub fn env_name(path: &[String]) -> String {
    let mut s = String::from(ENV_PREFIX);
    s.push_str(&path.join("_").to_ascii_uppercase());
    s
}

/// Overwrites scalar leaves (numbers, strings, booleans, nulls) whose
/// `TARS_<PATH>` variable is present. Values parse as JSON, falling back to a
/// plain string. Returns the names applied.
pub fn apply_env_overrides(value: &mut Value, env: impl IntoIterator<Item = (String, String)>) -> Vec<String> {
    let vars: std::collections::BTreeMap<String, String> =
        env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    let mut applied = Vec::new();
    if !vars.is_empty() {
        walk(value, &mut Vec::new(), &vars, &mut applied);
    }
    applied
}

fn walk(v: &mut Value, path: &mut Vec<String>, vars: &std::collections::BTreeMap<String, String>, applied: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map.iter_mut() {
                path.push(k.clone());
                walk(child, path, vars, applied);
                path.pop();
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter_mut().enumerate() {
                path.push(i.to_string());
                walk(child, path, vars, applied);
                path.pop();
            }
        }
        leaf => {
            let name = env_name(path);
            if let Some(raw) = vars.get(&name) {
                *leaf = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
                log::info!("{name} overrides {}", path.join("."));
                applied.push(name);
            }
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Sub-seed for `label`: FNV-1a of the label mixed into the global seed,
/// finished with splitmix64.
pub fn derive_seed(global: u64, label: &str) -> u64 {
    let mut z = global ^ fnv1a(label.as_bytes());
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
