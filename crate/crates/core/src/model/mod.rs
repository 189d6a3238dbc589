// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer with gated feed-forward blocks.
//!
//! Pre-norm blocks (RMS norm), learned absolute positions, causal multi-head
//! attention and a SiLU-gated FFN `down(silu(gate x) * up(x))`. All tensors
//! live in one flat `f32` buffer described by a [`Layout`]; the gate and up
//! projections are `d_ff x d_model` so that each of their rows is a vector in
//! the residual space.

mod compute;
mod layout;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::hash::Hasher;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, RngState, Vector};

pub use compute::RMS_EPS;
pub(crate) use compute::{Net, Real};
pub use layout::{Layout, TensorEntry};

/// Token id.
pub type TokenId = u32;

/// Architectural hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub lm_head_bias: bool,
    /// The LM head reuses `embed.tokens`; no `head.weight` tensor exists.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    /// Desk-scale geometry: `d_ff / d_model = 3.5` like the 8B Llama models.
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 224,
            vocab_size: 512,
            max_seq_len: 128,
            lm_head_bias: false,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    /// Llama 3.1 8B geometry. Only used for arithmetic checks; never instantiated.
    pub fn llama_8b_geometry() -> Self {
        Self {
            d_model: 4096,
            n_layers: 32,
            n_heads: 32,
            d_ff: 14336,
            vocab_size: 128_256,
            max_seq_len: 8192,
            lm_head_bias: false,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        // Zero layers (embedding straight into the head) is allowed.
        if let Some((name, _)) = fields.iter().find(|(n, v)| *v == 0 && *n != "n_layers") {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::Config("vocab_size exceeds u32 token ids".into()));
        }
        Ok(())
    }

    /// Number of gate/up rows the cosine scan visits: `n_layers * 2 * d_ff`.
    pub fn scan_size(&self) -> usize {
        self.n_layers * 2 * self.d_ff
    }
}

/// Which input projection of a gated FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjKind {
    Gate,
    Up,
}

impl ProjKind {
    pub const ALL: [ProjKind; 2] = [ProjKind::Gate, ProjKind::Up];

    pub fn as_str(self) -> &'static str {
        match self {
            ProjKind::Gate => "gate",
            ProjKind::Up => "up",
        }
    }
}

impl core::fmt::Display for ProjKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// All parameters of the model plus its config.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    layout: Layout,
    data: Vec<f32>,
}

/// Borrowed view of one block's FFN weights.
#[derive(Debug, Clone, Copy)]
pub struct FfnWeights<'a> {
    pub d_model: usize,
    pub d_ff: usize,
    pub gate: &'a [f32],
    pub up: &'a [f32],
    pub down: &'a [f32],
}

impl ModelWeights {
    /// Seeded random initialization.
    ///
    /// Matrices draw from `N(0, 0.02^2)`, residual output projections are
    /// further scaled by `1/sqrt(2 n_layers)`, norm gains start at one and
    /// the head bias (if any) at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0f32; layout.total()];
        let mut rng = RngState::new(seed);
        let resid_scale = 1.0 / libm::sqrt(2.0 * config.n_layers as f64);
        for e in layout.entries() {
            let dst = &mut data[e.range()];
            let role = Layout::role(&e.name);
            if role.starts_with("norm") {
                dst.fill(1.0);
            } else if role == "head.bias" {
                dst.fill(0.0);
            } else {
                let std = if role == "attn.o" || role == "ffn.down" {
                    0.02 * resid_scale
                } else {
                    0.02
                };
                for x in dst.iter_mut() {
                    *x = (rng.standard_normal() * std) as f32;
                }
            }
        }
        Ok(Self { config, layout, data })
    }

    /// Builds weights from named tensors; every tensor of the layout must be
    /// present exactly once with the expected shape.
    pub fn from_tensors<'a, I>(config: ModelConfig, tensors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a [usize], &'a [f32])>,
    {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0f32; layout.total()];
        let mut seen = vec![false; layout.entries().len()];
        for (name, shape, values) in tensors {
            let idx = layout
                .entries()
                .iter()
                .position(|e| e.name == name)
                .ok_or_else(|| Error::Config(format!("unexpected tensor {name:?}")))?;
            let e = &layout.entries()[idx];
            if e.shape != shape || values.len() != e.len() {
                return Err(Error::Config(format!(
                    "tensor {name:?} has shape {shape:?} ({} values), expected {:?}",
                    values.len(),
                    e.shape
                )));
            }
            if seen[idx] {
                return Err(Error::Config(format!("duplicate tensor {name:?}")));
            }
            if let Some(i) = values.iter().position(|x| !x.is_finite()) {
                return Err(Error::Domain(format!("tensor {name:?} has non-finite value at {i}")));
            }
            seen[idx] = true;
            data[e.range()].copy_from_slice(values);
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("missing tensor {:?}", layout.entries()[i].name)));
        }
        Ok(Self { config, layout, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// The flat parameter buffer in canonical tensor order.
    pub fn params(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// `(name, shape, values)` for every tensor in canonical order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &[usize], &[f32])> + '_ {
        self.layout
            .entries()
            .iter()
            .map(move |e| (e.name.as_str(), e.shape.as_slice(), &self.data[e.range()]))
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.layout.get(name).map(|e| &self.data[e.range()])
    }

    fn ffn_offset(&self, layer: usize, kind: ProjKind) -> usize {
        let lo = &self.layout.layers[layer];
        match kind {
            ProjKind::Gate => lo.gate,
            ProjKind::Up => lo.up,
        }
    }

    /// The whole `d_ff x d_model` gate or up matrix of `layer`.
    pub fn ffn_matrix(&self, layer: usize, kind: ProjKind) -> &[f32] {
        let off = self.ffn_offset(layer, kind);
        &self.data[off..off + self.config.d_ff * self.config.d_model]
    }

    /// Row `row` of the gate or up projection of `layer`.
    pub fn ffn_row(&self, layer: usize, kind: ProjKind, row: usize) -> &[f32] {
        let d = self.config.d_model;
        &self.ffn_matrix(layer, kind)[row * d..(row + 1) * d]
    }

    pub(crate) fn ffn_row_mut(&mut self, layer: usize, kind: ProjKind, row: usize) -> &mut [f32] {
        let d = self.config.d_model;
        let off = self.ffn_offset(layer, kind) + row * d;
        &mut self.data[off..off + d]
    }

    pub fn ffn(&self, layer: usize) -> FfnWeights<'_> {
        let (d, f) = (self.config.d_model, self.config.d_ff);
        let lo = &self.layout.layers[layer];
        FfnWeights {
            d_model: d,
            d_ff: f,
            gate: &self.data[lo.gate..lo.gate + f * d],
            up: &self.data[lo.up..lo.up + f * d],
            down: &self.data[lo.down..lo.down + d * f],
        }
    }

    /// LM head matrix, `vocab_size x d_model`.
    pub fn head_weight(&self) -> &[f32] {
        let off = self.layout.head_weight;
        &self.data[off..off + self.config.vocab_size * self.config.d_model]
    }

    pub fn head_bias(&self) -> Option<&[f32]> {
        self.layout
            .head_bias
            .map(|off| &self.data[off..off + self.config.vocab_size])
    }

    /// 64-bit FNV-1a hash over the canonical content: config, then every
    /// tensor's name, shape and little-endian `f32` bytes in layout order.
    pub fn checkpoint_hash(&self) -> u64 {
        let mut h = fnv::FnvHasher::default();
        h.write(b"TARS");
        let c = &self.config;
        for v in [c.d_model, c.n_layers, c.n_heads, c.d_ff, c.vocab_size, c.max_seq_len] {
            h.write(&(v as u64).to_le_bytes());
        }
        h.write(&[u8::from(c.lm_head_bias) | (u8::from(c.tie_embeddings) << 1)]);
        for (name, shape, values) in self.tensors() {
            h.write(name.as_bytes());
            h.write(&[0]);
            for &s in shape {
                h.write(&(s as u64).to_le_bytes());
            }
            for v in values {
                h.write(&v.to_le_bytes());
            }
        }
        h.finish()
    }

    pub(crate) fn net(&self) -> Net<'_, f32> {
        Net {
            cfg: &self.config,
            layout: &self.layout,
            params: &self.data,
        }
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {t} out of range for vocab of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }
}

/// Output of [`forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `seq_len x vocab_size` logits.
    pub logits: Matrix,
    /// Post-final-norm hidden state at the last position (the LM-head input).
    pub final_hidden: Vector,
}

impl ForwardTrace {
    /// Logits of the last position.
    pub fn last_logits(&self) -> &[f32] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// Runs the transformer over `tokens`.
pub fn forward(w: &ModelWeights, tokens: &[TokenId]) -> Result<ForwardTrace> {
    w.check_tokens(tokens)?;
    let cache = w.net().forward(tokens);
    let (n, d, v) = (cache.n, w.config.d_model, w.config.vocab_size);
    let final_hidden = Vector::new(cache.hidden[(n - 1) * d..n * d].to_vec())?;
    let logits = Matrix::new(n, v, cache.logits)?;
    Ok(ForwardTrace { logits, final_hidden })
}

/// Post-final-norm hidden states for every position, `seq_len x d_model`.
pub fn hidden_states(w: &ModelWeights, tokens: &[TokenId]) -> Result<Matrix> {
    w.check_tokens(tokens)?;
    let cache = w.net().forward(tokens);
    Matrix::new(cache.n, w.config.d_model, cache.hidden)
}

/// One block's gated feed-forward map applied to a single vector.
pub fn gated_ffn(layer: FfnWeights<'_>, x: &Vector) -> Result<Vector> {
    if x.dim() != layer.d_model {
        return Err(Error::Dimension(format!(
            "gated_ffn input has dim {}, expected {}",
            x.dim(),
            layer.d_model
        )));
    }
    let out = compute::gated_ffn_vec(layer.gate, layer.up, layer.down, layer.d_model, layer.d_ff, x.as_slice());
    Vector::new(out)
}

/// `W_head v + b_head` with `f64` accumulation, written into `out`.
pub(crate) fn head_logits_into(w: &ModelWeights, v: &[f32], out: &mut [f32]) {
    let d = w.config.d_model;
    let head = w.head_weight();
    for (r, o) in out.iter_mut().enumerate() {
        *o = numerics::dot_f64(&head[r * d..(r + 1) * d], v) as f32;
    }
    if let Some(b) = w.head_bias() {
        for (o, &bv) in out.iter_mut().zip(b) {
            *o += bv;
        }
    }
}

/// Vocabulary distribution obtained by applying only the LM head to `v`.
pub fn lm_head_probe(w: &ModelWeights, v: &Vector) -> Result<Vector> {
    if v.dim() != w.config.d_model {
        return Err(Error::Dimension(format!(
            "probe vector has dim {}, expected {}",
            v.dim(),
            w.config.d_model
        )));
    }
    let mut logits = vec![0f32; w.config.vocab_size];
    head_logits_into(w, v.as_slice(), &mut logits);
    numerics::softmax_in_place(&mut logits);
    Vector::new(logits)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_generation(w: &ModelWeights, prompt: &[TokenId], n: usize) -> Result<()> {
    w.check_tokens(prompt)?;
    if prompt.len() + n > w.config.max_seq_len {
        return Err(Error::Input(format!(
            "prompt of {} plus {n} new tokens exceeds max_seq_len {}",
            prompt.len(),
            w.config.max_seq_len
        )));
    }
    Ok(())
}

/// Appends `n` argmax tokens to `prompt`.
pub fn greedy_generate(w: &ModelWeights, prompt: &[TokenId], n: usize) -> Result<Vec<TokenId>> {
    check_generation(w, prompt, n)?;
    let mut seq = prompt.to_vec();
    for _ in 0..n {
        let cache = w.net().forward(&seq);
        let v = w.config.vocab_size;
        let last = &cache.logits[(cache.n - 1) * v..cache.n * v];
        seq.push(argmax(last) as TokenId);
    }
    Ok(seq)
}

/// Appends `n` tokens drawn from the temperature-scaled next-token distribution.
pub fn sample_generate(
    w: &ModelWeights,
    prompt: &[TokenId],
    n: usize,
    temperature: f32,
    rng: &mut RngState,
) -> Result<Vec<TokenId>> {
    check_generation(w, prompt, n)?;
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Domain(format!("temperature must be > 0, got {temperature}")));
    }
    let mut seq = prompt.to_vec();
    let v = w.config.vocab_size;
    for _ in 0..n {
        let cache = w.net().forward(&seq);
        let mut probs: Vec<f32> = cache.logits[(cache.n - 1) * v..cache.n * v]
            .iter()
            .map(|l| l / temperature)
            .collect();
        numerics::softmax_in_place(&mut probs);
        let u = rng.uniform();
        let mut acc = 0f64;
        let mut pick = v - 1;
        for (i, &p) in probs.iter().enumerate() {
            acc += f64::from(p);
            if u < acc {
                pick = i;
                break;
            }
        }
        seq.push(pick as TokenId);
    }
    Ok(seq)
}
