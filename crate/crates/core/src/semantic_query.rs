//! Parameter-free semantic attention: each visual slot becomes a softmax
//! mixture of unit text embeddings.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{AsuError, Result};
use crate::tensor::{Real, Tensor};
use crate::text_embed::EmbeddingMatrix;

pub const DEFAULT_TAU: f64 = 0.01;

/// Frozen unit matrix `S` prepared for the attention: cosine side and
/// mixing side kept separate so external, non-normalized rows mix unscaled.
#[derive(Clone, Debug)]
pub struct SemanticAttention {
    names: Vec<String>,
    raw: Tensor<f64>,
    normalized_t: Tensor<f64>,
    pub tau: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SemanticQueries {
    /// `[rows × K]` affinities.
    pub affinity: Var,
    /// `[rows × d]` queries.
    pub queries: Var,
    /// The constant `S` node the queries mix.
    pub units: Var,
}

impl SemanticAttention {
    pub fn new(units: &EmbeddingMatrix, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(AsuError::Invalid(format!("temperature must be positive, got {tau}")));
        }
        if units.rows() == 0 {
            return Err(AsuError::Invalid("empty unit matrix".into()));
        }
        let raw = units.tensor().cast::<f64>();
        let normalized = units.normalized()?.tensor().cast::<f64>();
        let (k, d) = normalized.dims2();
        let mut t = vec![0.0; k * d];
        for i in 0..k {
            for j in 0..d {
                t[j * k + i] = normalized.data()[i * d + j];
            }
        }
        Ok(SemanticAttention {
            names: units.names().to_vec(),
            raw,
            normalized_t: Tensor::new(&[d, k], t)?,
            tau,
        })
    }

    pub fn num_units(&self) -> usize {
        self.names.len()
    }

    pub fn dim(&self) -> usize {
        self.raw.dims2().1
    }

    pub fn unit_names(&self) -> &[String] {
        &self.names
    }

    /// Trainable parameters owned by this block: none.
    pub fn num_parameters(&self) -> usize {
        0
    }

    /// Affinities and queries for every row of `x` (`[rows × d]`). `S` enters
    /// as a constant, so no gradient ever reaches it.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<SemanticQueries> {
        let d = tape.shape(x).get(1).copied().unwrap_or(0);
        if d != self.dim() {
            return Err(AsuError::Dimension(format!("visual dim {d} vs unit dim {}", self.dim())));
        }
        let xn = tape.l2_normalize_rows(x)?;
        let st = tape.constant(self.normalized_t.cast());
        let w = tape.matmul(xn, st)?;
        let logits = tape.scale(w, 1.0 / self.tau)?;
        let affinity = tape.softmax(logits, 1)?;
        let s = tape.constant(self.raw.cast());
        let queries = tape.matmul(affinity, s)?;
        Ok(SemanticQueries { affinity, queries, units: s })
    }

    /// Plain evaluation on a `[rows × d]` matrix: `(A, Q)`.
    pub fn evaluate<T: Real>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv)?;
        Ok((tape.value(out.affinity).clone(), tape.value(out.queries).clone()))
    }
}

/// `softmax(cos(X, S) / τ)` over units.
pub fn affinities(x: &Tensor, units: &EmbeddingMatrix, tau: f64) -> Result<Tensor> {
    Ok(SemanticAttention::new(units, tau)?.evaluate(x)?.0)
}

/// `Q = A · S`.
pub fn generate_queries(x: &Tensor, units: &EmbeddingMatrix, tau: f64) -> Result<Tensor> {
    Ok(SemanticAttention::new(units, tau)?.evaluate(x)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitWeight {
    pub unit: String,
    pub weight: f64,
}

/// The `n` heaviest units of one affinity row, heaviest first, ties in bank
/// order. With `renormalize` the returned weights are scaled to sum to 1.
pub fn top_units(row: &[f32], names: &[String], n: usize, renormalize: bool) -> Result<Vec<UnitWeight>> {
    if row.len() != names.len() {
        return Err(AsuError::Dimension(format!("{} weights for {} units", row.len(), names.len())));
    }
    if n > names.len() {
        return Err(AsuError::Invalid(format!("top {n} of {} units", names.len())));
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let picked = &order[..n];
    let total: f64 = picked.iter().map(|&i| row[i] as f64).sum();
    Ok(picked
        .iter()
        .map(|&i| UnitWeight {
            unit: names[i].clone(),
            weight: if renormalize && total > 0.0 { row[i] as f64 / total } else { row[i] as f64 },
        })
        .collect())
}

/// One line of the attention dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub video: String,
    pub frame: usize,
    pub slot: usize,
    pub top: Vec<UnitWeight>,
}

/// Records for a `[T·slots × K]` affinity matrix laid out frame-major.
pub fn attention_records(
    video: &str,
    affinity: &Tensor,
    slots: usize,
    names: &[String],
    n: usize,
    renormalize: bool,
) -> Result<Vec<AttentionRecord>> {
    let (rows, _) = affinity.dims2();
    if slots == 0 || rows % slots != 0 {
        return Err(AsuError::Dimension(format!("{rows} affinity rows for {slots} slots")));
    }
    (0..rows)
        .map(|r| {
            Ok(AttentionRecord {
                video: video.to_owned(),
                frame: r / slots,
                slot: r % slots,
                top: top_units(affinity.row(r), names, n, renormalize)?,
            })
        })
        .collect()
}

pub fn to_json_lines(records: &[AttentionRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
