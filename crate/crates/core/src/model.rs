//! The full network: region encoder → semantic queries → video decoder,
//! plus the class-logit heads.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{AsuError, Result};
use crate::nn::Linear;
use crate::region_encoder::{EncoderConfig, RegionEncoder, RegionSplit};
use crate::rng::Prng;
use crate::semantic_query::{SemanticAttention, DEFAULT_TAU};
use crate::tensor::{ParamStore, Real, Tensor};
use crate::text_embed::EmbeddingMatrix;
use crate::video_decoder::{DecoderConfig, VideoDecoder, VideoRepresentation};

pub const QUERY_EMBED: &str = "decoder.query_embed";
pub const UNI_HEAD: &str = "head.uni";

/// Component switches. `"on"`/`"off"` and booleans are both accepted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    #[serde(with = "switch")]
    pub semantic: bool,
    #[serde(with = "switch")]
    pub region: bool,
    #[serde(with = "switch")]
    pub temporal: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        semantic: true,
        region: true,
        temporal: true,
    };
    pub const SEMANTIC_ONLY: Ablation = Ablation {
        semantic: true,
        region: false,
        temporal: false,
    };
    pub const BASELINE: Ablation = Ablation {
        semantic: false,
        region: false,
        temporal: false,
    };

    pub fn label(&self) -> String {
        let f = |b: bool| if b { "on" } else { "off" };
        format!("semantic={},region={},temporal={}", f(self.semantic), f(self.region), f(self.temporal))
    }
}

mod switch {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(if *v { "on" } else { "off" })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Bool(bool),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Bool(b) => Ok(b),
            Raw::Text(t) => match t.as_str() {
                "on" => Ok(true),
                "off" => Ok(false),
                other => Err(de::Error::custom(format!("expected \"on\" or \"off\", got {other:?}"))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitMode {
    RawDot,
    CosineScaled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    CrossModal,
    UniModal,
    Ensemble,
}

impl LossMode {
    pub fn uses_text(&self) -> bool {
        matches!(self, LossMode::CrossModal | LossMode::Ensemble)
    }

    pub fn uses_head(&self) -> bool {
        matches!(self, LossMode::UniModal | LossMode::Ensemble)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub tau: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            tau: DEFAULT_TAU,
            ablation: Ablation::FULL,
        }
    }
}

impl ModelConfig {
    /// Encoder and decoder settings after the ablation switches are applied.
    pub fn effective(&self) -> (EncoderConfig, DecoderConfig) {
        let mut enc = self.encoder.clone();
        if !self.ablation.region {
            enc.split = RegionSplit::None;
        }
        let mut dec = self.decoder.clone();
        dec.temporal = self.ablation.temporal;
        (enc, dec)
    }
}

#[derive(Clone, Debug)]
pub struct AsuModel {
    pub config: ModelConfig,
    pub encoder: RegionEncoder,
    pub semantic: Option<SemanticAttention>,
    pub decoder: VideoDecoder,
    /// Linear `d → I` classifier, present for uni-modal and ensemble losses.
    pub uni_head: Option<Linear>,
}

/// Forward pass results for a batch of clips.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[B·T·slots × d]` visual features.
    pub features: Var,
    /// `[B·T·slots × K]` affinities when the semantic path is on.
    pub affinity: Option<Var>,
    /// Frozen `S` as fed to the tape.
    pub units: Option<Var>,
    pub video: VideoRepresentation,
    pub slots: usize,
}

impl AsuModel {
    /// `units` is required when the semantic path is on; `uni_classes` sizes
    /// the uni-modal head (0 for none).
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        config: &ModelConfig,
        units: Option<&EmbeddingMatrix>,
        uni_classes: usize,
    ) -> Result<Self> {
        let (enc_cfg, dec_cfg) = config.effective();
        let d = enc_cfg.shared_dim;
        let encoder = RegionEncoder::init(store, &mut Prng::derive(seed, "encoder"), &enc_cfg)?;
        let slots = enc_cfg.slots();
        let semantic = if config.ablation.semantic {
            let units = units.ok_or_else(|| AsuError::Config("semantic path needs a unit embedding matrix".into()))?;
            if units.dim() != d {
                return Err(AsuError::Config(format!("unit embeddings have dim {}, model dim is {d}", units.dim())));
            }
            Some(SemanticAttention::new(units, config.tau)?)
        } else {
            let mut rng = Prng::derive(seed, "query_embed");
            let q: Vec<T> = (0..slots * d).map(|_| T::of(rng.truncated_normal(0.02))).collect();
            store.insert(QUERY_EMBED, Tensor::new(&[slots, d], q)?)?;
            None
        };
        let decoder = VideoDecoder::init(store, &mut Prng::derive(seed, "decoder"), &dec_cfg, d, slots)?;
        let uni_head = if uni_classes > 0 {
            Some(Linear::init(store, &mut Prng::derive(seed, "uni_head"), UNI_HEAD, d, uni_classes, true)?)
        } else {
            None
        };
        Ok(AsuModel {
            config: config.clone(),
            encoder,
            semantic,
            decoder,
            uni_head,
        })
    }

    pub fn slots(&self) -> usize {
        self.decoder.slots
    }

    pub fn dim(&self) -> usize {
        self.decoder.dim
    }

    /// `clips` is `[B·T × H × W × 3]`, video-major.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        clips: &Tensor<T>,
        videos: usize,
        frames: usize,
    ) -> Result<ModelOutput> {
        let n = clips.shape().first().copied().unwrap_or(0);
        if videos == 0 || frames == 0 || n != videos * frames {
            return Err(AsuError::Dimension(format!("{n} frames for {videos} videos of {frames}")));
        }
        let enc = self.encoder.encode(tape, store, clips)?;
        let (queries, affinity, units) = match &self.semantic {
            Some(sa) => {
                let sq = sa.forward(tape, enc.features)?;
                (sq.queries, Some(sq.affinity), Some(sq.units))
            }
            None => {
                let q = tape.param(store, QUERY_EMBED)?;
                let index: Vec<usize> = (0..videos * frames).flat_map(|_| 0..enc.slots).collect();
                (tape.gather_rows(q, &index)?, None, None)
            }
        };
        let video = self.decoder.forward(tape, store, queries, enc.features, videos, frames)?;
        Ok(ModelOutput {
            features: enc.features,
            affinity,
            units,
            video,
            slots: enc.slots,
        })
    }

    pub fn uni_logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let head = self
            .uni_head
            .as_ref()
            .ok_or_else(|| AsuError::Config("model has no uni-modal head".into()))?;
        head.forward(tape, store, z)
    }
}

/// Class logits from video vectors `z` (`[B × d]`) and a frozen label matrix.
#[derive(Clone, Debug)]
pub struct TextClassifier {
    raw: Tensor<f64>,
    normalized: Tensor<f64>,
    pub mode: LogitMode,
    pub scale: f64,
}

impl TextClassifier {
    pub fn new(labels: &EmbeddingMatrix, mode: LogitMode, scale: f64) -> Result<Self> {
        let transpose = |m: &Tensor| -> Result<Tensor<f64>> {
            let (r, c) = m.dims2();
            let mut t = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    t[j * r + i] = m.data()[i * c + j] as f64;
                }
            }
            Tensor::new(&[c, r], t)
        };
        Ok(TextClassifier {
            raw: transpose(labels.tensor())?,
            normalized: transpose(labels.normalized()?.tensor())?,
            mode,
            scale,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.raw.dims2().1
    }

    /// Returns `(logits, label_constant)`.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, z: Var) -> Result<(Var, Var)> {
        match self.mode {
            LogitMode::RawDot => {
                let c = tape.constant(self.raw.cast());
                Ok((tape.matmul(z, c)?, c))
            }
            LogitMode::CosineScaled => {
                let zn = tape.l2_normalize_rows(z)?;
                let c = tape.constant(self.normalized.cast());
                let l = tape.matmul(zn, c)?;
                Ok((tape.scale(l, self.scale)?, c))
            }
        }
    }
}
