// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gate/up row scanning and reversible row replacement.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelWeights, ProjKind};
use crate::numerics::{self, Vector};

/// Score given to an all-zero row. Below every attainable cosine.
pub const ZERO_ROW_SCORE: f64 = -2.0;

/// One scanned row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanHit {
    pub layer: usize,
    pub kind: ProjKind,
    pub row: usize,
    pub score: f64,
}

impl ScanHit {
    pub fn location(&self) -> RowLocation {
        RowLocation {
            layer: self.layer,
            kind: self.kind,
            row: self.row,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowLocation {
    pub layer: usize,
    pub kind: ProjKind,
    pub row: usize,
}

/// Descending score; ties by layer, then gate before up, then row.
pub fn hit_order(a: &ScanHit, b: &ScanHit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.layer.cmp(&b.layer))
        .then(a.kind.cmp(&b.kind))
        .then(a.row.cmp(&b.row))
}

/// Every gate and up row, ranked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub hits: Vec<ScanHit>,
    /// Rows with zero norm; they carry [`ZERO_ROW_SCORE`].
    pub zero_rows: Vec<RowLocation>,
}

/// Cosine of `v_target` against every gate and up row.
pub fn scan(w: &ModelWeights, v_target: &Vector) -> Result<ScanResult> {
    let cfg = w.config();
    if v_target.dim() != cfg.d_model {
        return Err(Error::Dimension(format!(
            "targeting vector has dim {}, expected {}",
            v_target.dim(),
            cfg.d_model
        )));
    }
    let vn = libm::sqrt(numerics::norm_sq_f64(v_target.as_slice()));
    if vn == 0.0 {
        return Err(Error::Domain("cannot scan with a zero targeting vector".into()));
    }
    let jobs: Vec<(usize, ProjKind)> = (0..cfg.n_layers)
        .flat_map(|l| ProjKind::ALL.into_iter().map(move |k| (l, k)))
        .collect();
    let score_matrix = |&(layer, kind): &(usize, ProjKind)| -> Vec<ScanHit> {
        (0..cfg.d_ff)
            .map(|row| {
                let r = w.ffn_row(layer, kind, row);
                let rn = libm::sqrt(numerics::norm_sq_f64(r));
                let score = if rn == 0.0 {
                    ZERO_ROW_SCORE
                } else {
                    numerics::cosine_with_norms(r, v_target.as_slice(), rn, vn)
                };
                ScanHit { layer, kind, row, score }
            })
            .collect()
    };
    #[cfg(feature = "parallel")]
    let per_matrix: Vec<Vec<ScanHit>> = {
        use rayon::prelude::*;
        jobs.par_iter().map(score_matrix).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_matrix: Vec<Vec<ScanHit>> = jobs.iter().map(score_matrix).collect();

    let mut hits: Vec<ScanHit> = per_matrix.into_iter().flatten().collect();
    let zero_rows: Vec<RowLocation> = hits
        .iter()
        .filter(|h| h.score == ZERO_ROW_SCORE)
        .map(ScanHit::location)
        .collect();
    if !zero_rows.is_empty() {
        log::warn!("{} zero-norm rows scored with the sentinel", zero_rows.len());
    }
    hits.sort_by(hit_order);
    Ok(ScanResult { hits, zero_rows })
}

/// `-amplitude * v_target / ||v_target||_3`.
pub fn reversed_target(v_target: &Vector, amplitude: f32) -> Result<Vector> {
    if amplitude <= 0.0 || !amplitude.is_finite() {
        return Err(Error::Domain(format!("amplitude must be finite and > 0, got {amplitude}")));
    }
    let n = numerics::p_norm(v_target, 3.0)?;
    if n == 0.0 {
        return Err(Error::Domain("cannot reverse a zero targeting vector".into()));
    }
    let k = -f64::from(amplitude) / n;
    Vector::new(v_target.as_slice().iter().map(|&x| (f64::from(x) * k) as f32).collect())
}

/// Which scanned rows get edited.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Every row with `score > theta`.
    Theta(f64),
    /// The first `k` rows of the ranking.
    TopK(usize),
}

/// Selection from two optional knobs; exactly one must be set.
pub fn selector_from(theta: Option<f64>, top_k: Option<usize>) -> Result<Selector> {
    match (theta, top_k) {
        (Some(t), None) => Ok(Selector::Theta(t)),
        (None, Some(k)) => Ok(Selector::TopK(k)),
        (Some(_), Some(_)) => Err(Error::Usage("theta and top_k are mutually exclusive".into())),
        (None, None) => Err(Error::Usage("one of theta or top_k is required".into())),
    }
}

/// Rows chosen by `selector`, in ranking order. `hits` must already be ranked.
/// The result may be empty.
pub fn select_candidates(hits: &[ScanHit], selector: Selector) -> Result<Vec<ScanHit>> {
    match selector {
        Selector::Theta(t) => {
            if t.is_nan() {
                return Err(Error::Domain("theta is NaN".into()));
            }
            Ok(hits.iter().copied().filter(|h| h.score > t).collect())
        }
        Selector::TopK(k) => Ok(hits.iter().copied().take(k).collect()),
    }
}

/// A replaced row and what it held before.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowEdit {
    pub layer: usize,
    pub kind: ProjKind,
    pub row: usize,
    pub score: f64,
    pub prior: Vec<f32>,
}

impl RowEdit {
    pub fn location(&self) -> RowLocation {
        RowLocation {
            layer: self.layer,
            kind: self.kind,
            row: self.row,
        }
    }
}

/// A row that an earlier record had already edited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overwrite {
    pub location: RowLocation,
    pub previous_concept: String,
}

/// Everything needed to undo one concept's edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub concept_id: String,
    pub selector: Selector,
    pub amplitude: f32,
    pub replacement: Vec<f32>,
    pub edits: Vec<RowEdit>,
    #[serde(default)]
    pub overwrites: Vec<Overwrite>,
    pub hash_before: u64,
    pub hash_after: u64,
    /// Unix seconds; informational only.
    #[serde(default)]
    pub timestamp: Option<u64>,
}

/// One concept's edit request.
#[derive(Debug, Clone, Copy)]
pub struct EditPlan<'a> {
    pub concept_id: &'a str,
    pub selector: Selector,
    pub hits: &'a [ScanHit],
    pub v_target: &'a Vector,
    pub amplitude: f32,
}

/// Replaces every selected row with the reversed target.
///
/// `history` holds earlier records applied to the same lineage; rows they
/// touched are re-edited with a warning.
pub fn apply_edits(w: &ModelWeights, plan: &EditPlan<'_>, history: &[EditRecord]) -> Result<(ModelWeights, EditRecord)> {
    let cfg = w.config();
    let replacement = reversed_target(plan.v_target, plan.amplitude)?;
    if replacement.dim() != cfg.d_model {
        return Err(Error::Dimension(format!(
            "targeting vector has dim {}, expected {}",
            replacement.dim(),
            cfg.d_model
        )));
    }
    if plan.hits.is_empty() {
        return Err(Error::EmptySelection("no rows to edit".into()));
    }
    let mut seen = alloc::collections::BTreeSet::new();
    for h in plan.hits {
        if h.layer >= cfg.n_layers || h.row >= cfg.d_ff {
            return Err(Error::Input(format!("row {:?} outside the model", h.location())));
        }
        if !seen.insert(h.location()) {
            return Err(Error::Usage(format!("row {:?} listed twice", h.location())));
        }
    }
    let mut overwrites = Vec::new();
    for h in plan.hits {
        let loc = h.location();
        if let Some(prev) = history
            .iter()
            .rev()
            .find(|r| r.edits.iter().any(|e| e.location() == loc))
        {
            log::warn!(
                "row {loc:?} was already edited for concept {:?}; overwriting",
                prev.concept_id
            );
            overwrites.push(Overwrite {
                location: loc,
                previous_concept: prev.concept_id.clone(),
            });
        }
    }

    let hash_before = w.checkpoint_hash();
    let mut edited = w.clone();
    let mut edits = Vec::with_capacity(plan.hits.len());
    for h in plan.hits {
        let row = edited.ffn_row_mut(h.layer, h.kind, h.row);
        edits.push(RowEdit {
            layer: h.layer,
            kind: h.kind,
            row: h.row,
            score: h.score,
            prior: row.to_vec(),
        });
        row.copy_from_slice(replacement.as_slice());
    }
    let hash_after = edited.checkpoint_hash();
    Ok((
        edited,
        EditRecord {
            concept_id: String::from(plan.concept_id),
            selector: plan.selector,
            amplitude: plan.amplitude,
            replacement: replacement.into_inner(),
            edits,
            overwrites,
            hash_before,
            hash_after,
            timestamp: None,
        },
    ))
}

/// Restores the rows saved in `record`.
///
/// Fails with an integrity error unless `w` is exactly the model the record
/// produced.
pub fn revert(w: &ModelWeights, record: &EditRecord) -> Result<ModelWeights> {
    let found = w.checkpoint_hash();
    if found != record.hash_after {
        return Err(Error::Integrity {
            expected: record.hash_after,
            found,
        });
    }
    let cfg = w.config();
    let mut out = w.clone();
    // Reverse order so a row listed twice would end on its oldest value.
    for e in record.edits.iter().rev() {
        if e.layer >= cfg.n_layers || e.row >= cfg.d_ff || e.prior.len() != cfg.d_model {
            return Err(Error::Input(format!("edit {:?} does not fit the model", e.location())));
        }
        out.ffn_row_mut(e.layer, e.kind, e.row).copy_from_slice(&e.prior);
    }
    let restored = out.checkpoint_hash();
    if restored != record.hash_before {
        return Err(Error::Integrity {
            expected: record.hash_before,
            found: restored,
        });
    }
    Ok(out)
}
