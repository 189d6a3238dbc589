// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named-tensor layout over one flat parameter buffer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::ModelConfig;

/// One named tensor inside the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of one transformer block's tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub norm_attn: usize,
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
    pub norm_ffn: usize,
    pub gate: usize,
    pub up: usize,
    pub down: usize,
}

/// Canonical tensor ordering for a given config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<TensorEntry>,
    pub(crate) embed: usize,
    pub(crate) positions: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) norm_final: usize,
    pub(crate) head_weight: usize,
    pub(crate) head_bias: Option<usize>,
    total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f, v, s) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_seq_len);
        let mut entries = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            entries.push(TensorEntry { name, shape, offset });
            offset
        };
        let embed = push("embed.tokens".into(), vec![v, d]);
        let positions = push("embed.positions".into(), vec![s, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            layers.push(LayerOffsets {
                norm_attn: push(format!("layers.{i}.norm.attn"), vec![d]),
                q: push(format!("layers.{i}.attn.q"), vec![d, d]),
                k: push(format!("layers.{i}.attn.k"), vec![d, d]),
                v: push(format!("layers.{i}.attn.v"), vec![d, d]),
                o: push(format!("layers.{i}.attn.o"), vec![d, d]),
                norm_ffn: push(format!("layers.{i}.norm.ffn"), vec![d]),
                gate: push(format!("layers.{i}.ffn.gate"), vec![f, d]),
                up: push(format!("layers.{i}.ffn.up"), vec![f, d]),
                down: push(format!("layers.{i}.ffn.down"), vec![d, f]),
            });
        }
        let norm_final = push("norm.final".into(), vec![d]);
        let head_weight = if cfg.tie_embeddings {
            embed
        } else {
            push("head.weight".into(), vec![v, d])
        };
        let head_bias = cfg.lm_head_bias.then(|| push("head.bias".into(), vec![v]));
        Self {
            entries,
            embed,
            positions,
            layers,
            norm_final,
            head_weight,
            head_bias,
            total,
        }
    }

    /// Tensors in canonical order.
    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Total number of scalar parameters.
    pub fn total(&self) -> usize {
        self.total
    }

    /// Tensor role used to group gradient-check samples, e.g. `ffn.gate`.
    pub fn role(name: &str) -> &str {
        match name.strip_prefix("layers.") {
            Some(rest) => rest.split_once('.').map_or(rest, |(_, role)| role),
            None => name,
        }
    }
}
