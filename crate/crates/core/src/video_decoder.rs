//! Video decoder: per-slot stacks of (temporal depthwise conv, cross-attention)
//! layers, then slot concatenation, an MLP and temporal mean pooling.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{AsuError, Result};
use crate::nn::{CrossAttentionBlock, Mlp};
use crate::rng::Prng;
use crate::tensor::{ParamStore, Real, Tensor};

pub const PREFIX: &str = "decoder";
pub const KERNEL: usize = 3;
const CONV_INIT_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Depthwise temporal convolution before each cross-attention; set from
    /// the run's ablation switches.
    #[serde(skip)]
    pub temporal: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            temporal: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.layers == 0 {
            return Err(AsuError::Config("decoder needs at least one layer".into()));
        }
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(AsuError::Config(format!("decoder dim {dim} not divisible by {} heads", self.heads)));
        }
        if self.mlp_ratio == 0 {
            return Err(AsuError::Config("decoder mlp_ratio must be at least 1".into()));
        }
        Ok(())
    }
}

/// One hybrid layer, shared by all slots.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub conv: Option<String>,
    pub cross: CrossAttentionBlock,
}

impl DecoderLayer {
    /// `query` and `context` are `[streams·T × d]`, one length-`T` stream per
    /// (video, slot). Each query row attends over its own stream's `T` keys.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, query: Var, context: Var, seq_len: usize) -> Result<Var> {
        let (rows, _) = dims(tape, query)?;
        if tape.shape(query) != tape.shape(context) {
            return Err(AsuError::Dimension(format!(
                "decoder query {:?} vs context {:?}",
                tape.shape(query),
                tape.shape(context)
            )));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(AsuError::Dimension(format!("{rows} rows in streams of {seq_len}")));
        }
        let h = match &self.conv {
            Some(k) => {
                let k = tape.param(store, k)?;
                let c = tape.conv1d_depthwise(query, k, seq_len)?;
                tape.add(query, c)?
            }
            None => query,
        };
        self.cross.forward(tape, store, h, context, rows / seq_len, None)
    }
}

fn dims<T: Real>(tape: &Tape<T>, v: Var) -> Result<(usize, usize)> {
    match tape.shape(v) {
        [r, c] => Ok((*r, *c)),
        s => Err(AsuError::Dimension(format!("expected a matrix, got {s:?}"))),
    }
}

#[derive(Clone, Debug)]
pub struct VideoDecoder {
    pub config: DecoderConfig,
    pub dim: usize,
    pub slots: usize,
    pub layers: Vec<DecoderLayer>,
    pub head: Mlp,
}

/// Decoder output for a batch of videos.
#[derive(Clone, Debug)]
pub struct VideoRepresentation {
    /// `[B × d]`.
    pub z: Var,
    /// Per-layer query states, `[B·slots·T × d]` stream-major.
    pub trace: Vec<Var>,
}

impl VideoDecoder {
    pub fn init<T: Real>(store: &mut ParamStore<T>, rng: &mut Prng, config: &DecoderConfig, dim: usize, slots: usize) -> Result<Self> {
        config.validate(dim)?;
        if slots == 0 {
            return Err(AsuError::Config("decoder needs at least one slot".into()));
        }
        let layers = (0..config.layers)
            .map(|m| {
                let name = format!("{PREFIX}.layers.{m}");
                let conv = if config.temporal {
                    let k = format!("{name}.conv.weight");
                    store.insert(&k, Tensor::randn(&[dim, KERNEL], CONV_INIT_STD, rng))?;
                    Some(k)
                } else {
                    None
                };
                let cross = CrossAttentionBlock::init(store, rng, &format!("{name}.cross"), dim, config.heads, config.mlp_ratio)?;
                Ok(DecoderLayer { conv, cross })
            })
            .collect::<Result<Vec<_>>>()?;
        let width = slots * dim;
        let head = Mlp::init(store, rng, &format!("{PREFIX}.head"), width, 2 * width, dim)?;
        Ok(VideoDecoder {
            config: config.clone(),
            dim,
            slots,
            layers,
            head,
        })
    }

    /// Decodes `videos` clips of `frames` frames. `queries` and `context` are
    /// `[B·T·slots × d]`, video-major then frame-major, like the encoder output.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        queries: Var,
        context: Var,
        videos: usize,
        frames: usize,
    ) -> Result<VideoRepresentation> {
        let s = self.slots;
        let expect = [videos * frames * s, self.dim];
        for v in [queries, context] {
            if tape.shape(v) != expect {
                return Err(AsuError::Dimension(format!("decoder input {:?}, expected {expect:?}", tape.shape(v))));
            }
        }
        // (video, frame, slot) → (video, slot, frame) so each stream is contiguous.
        let to_streams: Vec<usize> = (0..videos)
            .flat_map(|b| (0..s).flat_map(move |sl| (0..frames).map(move |t| (b * frames + t) * s + sl)))
            .collect();
        let mut q = tape.gather_rows(queries, &to_streams)?;
        let x = tape.gather_rows(context, &to_streams)?;
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            q = layer.forward(tape, store, q, x, frames)?;
            trace.push(q);
        }
        let to_frames: Vec<usize> = (0..videos)
            .flat_map(|b| (0..frames).flat_map(move |t| (0..s).map(move |sl| (b * s + sl) * frames + t)))
            .collect();
        let q = tape.gather_rows(q, &to_frames)?;
        let wide = tape.reshape(q, &[videos * frames, s * self.dim])?;
        let h = self.head.forward(tape, store, wide)?;
        let z = tape.mean_rows_grouped(h, frames)?;
        Ok(VideoRepresentation { z, trace })
    }
}

/// Mean of per-view class logits.
pub fn multi_view_aggregate(views: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = views.first().ok_or_else(|| AsuError::Invalid("no views to aggregate".into()))?;
    if views.iter().any(|v| v.len() != first.len()) {
        return Err(AsuError::Dimension("views disagree on class count".into()));
    }
    let n = views.len() as f64;
    Ok((0..first.len())
        .map(|i| (views.iter().map(|v| v[i] as f64).sum::<f64>() / n) as f32)
        .collect())
}
