//! Region-aware frame encoder.
//!
//! A small ViT produces a frame-level class feature and per-patch features.
//! The patch grid is cut into horizontal bands (optionally also vertical
//! columns), and one learnable query per region gathers its own patches via
//! residual cross-attention layers. All regions run in one masked attention
//! call; the mask makes that equivalent to independent per-region attention.
//!
//! Output per frame is `[(1 + R) × d]`: row 0 is the class feature, rows
//! `1..=R` the region features.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{AttnMask, Tape, Var};
use crate::error::{AsuError, Result};
use crate::nn::{CrossAttentionBlock, LayerNorm, Linear, TransformerBlock};
use crate::rng::Prng;
use crate::tensor::{ParamStore, Real, Tensor};

pub const PREFIX: &str = "encoder";
/// Parameters under this prefix form the backbone learning-rate group.
pub const BACKBONE_PREFIX: &str = "encoder.vit.";

/// Region layout as `bands × columns`, e.g. `4x1` is four stacked horizontal bands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegionSplit {
    /// No regions: the frame is represented by its class feature alone.
    None,
    Grid { bands: usize, columns: usize },
}

impl RegionSplit {
    pub const fn grid(bands: usize, columns: usize) -> Self {
        RegionSplit::Grid { bands, columns }
    }

    pub fn num_regions(&self) -> usize {
        match self {
            RegionSplit::None => 0,
            RegionSplit::Grid { bands, columns } => bands * columns,
        }
    }

    /// The region grid evaluated by the region-configuration ablation.
    pub fn ablation_grid() -> [RegionSplit; 6] {
        [
            RegionSplit::None,
            RegionSplit::grid(2, 1),
            RegionSplit::grid(4, 1),
            RegionSplit::grid(2, 2),
            RegionSplit::grid(8, 1),
            RegionSplit::grid(4, 2),
        ]
    }
}

impl fmt::Display for RegionSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegionSplit::None => write!(f, "-"),
            RegionSplit::Grid { bands, columns } => write!(f, "{bands}x{columns}"),
        }
    }
}

impl FromStr for RegionSplit {
    type Err = AsuError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "-" || s.eq_ignore_ascii_case("none") {
            return Ok(RegionSplit::None);
        }
        let (a, b) = s
            .split_once(['x', 'X', '×'])
            .ok_or_else(|| AsuError::Invalid(format!("region split {s:?}, expected e.g. 4x1")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| AsuError::Invalid(format!("region split {s:?}")))
        };
        Ok(RegionSplit::grid(parse(a)?, parse(b)?))
    }
}

impl Serialize for RegionSplit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for RegionSplit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    pub vit_layers: usize,
    pub vit_heads: usize,
    pub vit_dim: usize,
    pub shared_dim: usize,
    pub mra_layers: usize,
    pub mra_heads: usize,
    pub mlp_ratio: usize,
    pub split: RegionSplit,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_h: 32,
            image_w: 32,
            patch: 8,
            vit_layers: 2,
            vit_heads: 4,
            vit_dim: 64,
            shared_dim: 64,
            mra_layers: 2,
            mra_heads: 4,
            mlp_ratio: 4,
            split: RegionSplit::grid(4, 1),
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn num_regions(&self) -> usize {
        self.split.num_regions()
    }

    /// Visual slots per frame: the class feature plus one per region.
    pub fn slots(&self) -> usize {
        1 + self.num_regions()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return Err(AsuError::Config(format!(
                "image {}x{} not divisible into {p}x{p} patches",
                self.image_h,
                self.image_w,
                p = self.patch
            )));
        }
        if self.vit_layers == 0 {
            return Err(AsuError::Config("vit_layers must be at least 1".into()));
        }
        if self.vit_heads == 0 || self.vit_dim % self.vit_heads != 0 {
            return Err(AsuError::Config(format!("vit_dim {} not divisible by {} heads", self.vit_dim, self.vit_heads)));
        }
        if self.mra_heads == 0 || self.shared_dim % self.mra_heads != 0 {
            return Err(AsuError::Config(format!(
                "shared_dim {} not divisible by {} heads",
                self.shared_dim, self.mra_heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(AsuError::Config("mlp_ratio must be at least 1".into()));
        }
        let (rows, cols) = self.grid();
        split_regions(rows, cols, self.split)?;
        Ok(())
    }
}

/// Band extents for `n` lines cut into `k` bands. The remainder goes to the
/// middle bands first (middle-out, lower index first on ties), so 14 lines in
/// 4 bands gives (3, 4, 4, 3).
pub fn band_sizes(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(AsuError::Invalid(format!("cannot cut {n} lines into {k} bands")));
    }
    let mut sizes = vec![n / k; k];
    let center = (k as f64 - 1.0) / 2.0;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let da = (a as f64 - center).abs();
        let db = (b as f64 - center).abs();
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    for &band in order.iter().take(n % k) {
        sizes[band] += 1;
    }
    Ok(sizes)
}

/// Patch → region map over a row-major patch grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionAssignment {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub num_regions: usize,
    /// 0-based region of each patch, row-major.
    pub region_of_patch: Vec<usize>,
    pub band_rows: Vec<usize>,
    pub column_widths: Vec<usize>,
}

impl RegionAssignment {
    pub fn patches_of(&self, region: usize) -> Vec<usize> {
        (0..self.region_of_patch.len())
            .filter(|&p| self.region_of_patch[p] == region)
            .collect()
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_regions];
        for &r in &self.region_of_patch {
            sizes[r] += 1;
        }
        sizes
    }

    /// `[R × N]` mask letting region `i` see only its own patches.
    pub fn mask(&self) -> Result<AttnMask> {
        AttnMask::from_blocks(self.num_regions, &self.region_of_patch).map_err(|e| match e {
            AsuError::Contract(m) => AsuError::Contract(format!("empty region: {m}")),
            other => other,
        })
    }
}

/// Assigns every patch of a `grid_rows × grid_cols` grid to a region. Regions
/// are numbered band-major: band 0 columns 0.., then band 1, ...
pub fn split_regions(grid_rows: usize, grid_cols: usize, split: RegionSplit) -> Result<RegionAssignment> {
    let (bands, columns) = match split {
        RegionSplit::None => {
            return Ok(RegionAssignment {
                grid_rows,
                grid_cols,
                num_regions: 0,
                region_of_patch: Vec::new(),
                band_rows: Vec::new(),
                column_widths: Vec::new(),
            })
        }
        RegionSplit::Grid { bands, columns } => (bands, columns),
    };
    if bands > grid_rows || columns > grid_cols {
        return Err(AsuError::Invalid(format!(
            "split {split} does not fit a {grid_rows}x{grid_cols} patch grid"
        )));
    }
    let band_rows = band_sizes(grid_rows, bands)?;
    let column_widths = band_sizes(grid_cols, columns)?;
    let expand = |sizes: &[usize]| -> Vec<usize> {
        sizes
            .iter()
            .enumerate()
            .flat_map(|(i, &n)| std::iter::repeat(i).take(n))
            .collect()
    };
    let band_of_row = expand(&band_rows);
    let column_of_col = expand(&column_widths);
    let region_of_patch = (0..grid_rows * grid_cols)
        .map(|p| band_of_row[p / grid_cols] * columns + column_of_col[p % grid_cols])
        .collect();
    Ok(RegionAssignment {
        grid_rows,
        grid_cols,
        num_regions: bands * columns,
        region_of_patch,
        band_rows,
        column_widths,
    })
}

/// Cuts `[F × H × W × 3]` frames into `[F·N × p·p·3]` patch rows, patches
/// row-major over the grid and pixels `(y, x, channel)` within each patch.
pub fn patchify<T: Real>(frames: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = frames.shape();
    if s.len() != 4 || s[3] != 3 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(AsuError::Dimension(format!("frames {s:?} with patch {patch}")));
    }
    let (f, h, w) = (s[0], s[1], s[2]);
    let (gr, gc) = (h / patch, w / patch);
    let width = patch * patch * 3;
    let src = frames.data();
    let mut out = Vec::with_capacity(f * gr * gc * width);
    for fi in 0..f {
        for pr in 0..gr {
            for pc in 0..gc {
                for y in 0..patch {
                    let row = (fi * h + pr * patch + y) * w + pc * patch;
                    out.extend_from_slice(&src[row * 3..(row + patch) * 3]);
                }
            }
        }
    }
    Tensor::new(&[f * gr * gc, width], out)
}

/// Per-frame encoder output `[(1 + R) × d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures<T: Real = f32> {
    pub matrix: Tensor<T>,
}

impl<T: Real> FrameFeatures<T> {
    pub fn frame_level(&self) -> &[T] {
        self.matrix.row(0)
    }

    pub fn region(&self, i: usize) -> &[T] {
        self.matrix.row(1 + i)
    }

    pub fn num_regions(&self) -> usize {
        self.matrix.dims2().0 - 1
    }
}

/// Encoded batch of frames on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncodedFrames {
    /// `[frames·slots × d]`, frame-major.
    pub features: Var,
    pub frames: usize,
    pub slots: usize,
}

#[derive(Clone, Debug)]
pub struct RegionEncoder {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub cls_token: String,
    pub pos_embed: String,
    pub blocks: Vec<TransformerBlock>,
    pub ln_post: LayerNorm,
    pub proj: Linear,
    pub region_query: String,
    pub region_pos: String,
    pub mra: Vec<CrossAttentionBlock>,
    pub assignment: RegionAssignment,
    mask: Option<AttnMask>,
}

impl RegionEncoder {
    pub fn init<T: Real>(store: &mut ParamStore<T>, rng: &mut Prng, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let n = c.num_patches();
        let vit = format!("{PREFIX}.vit");
        let patch_embed = Linear::init(store, rng, &format!("{vit}.patch_embed"), c.patch * c.patch * 3, c.vit_dim, true)?;
        let cls_token = format!("{vit}.cls_token");
        store.insert(&cls_token, trunc_normal(&[1, c.vit_dim], 0.02, rng))?;
        let pos_embed = format!("{vit}.pos_embed");
        store.insert(&pos_embed, trunc_normal(&[n + 1, c.vit_dim], 0.02, rng))?;
        let blocks = (0..c.vit_layers)
            .map(|i| TransformerBlock::init(store, rng, &format!("{vit}.blocks.{i}"), c.vit_dim, c.vit_heads, c.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let ln_post = LayerNorm::init(store, &format!("{vit}.ln_post"), c.vit_dim)?;
        let proj = Linear::init(store, rng, &format!("{vit}.proj"), c.vit_dim, c.shared_dim, false)?;

        let (gr, gc) = c.grid();
        let assignment = split_regions(gr, gc, c.split)?;
        let r = assignment.num_regions;
        let region_query = format!("{PREFIX}.region.query");
        let region_pos = format!("{PREFIX}.region.pos");
        let (mra, mask) = if r > 0 {
            store.insert(&region_query, trunc_normal(&[r, c.shared_dim], 0.02, rng))?;
            store.insert(&region_pos, trunc_normal(&[r, c.shared_dim], 0.02, rng))?;
            let mra = (0..c.mra_layers)
                .map(|l| CrossAttentionBlock::init(store, rng, &format!("{PREFIX}.mra.{l}"), c.shared_dim, c.mra_heads, c.mlp_ratio))
                .collect::<Result<Vec<_>>>()?;
            (mra, Some(assignment.mask()?))
        } else {
            (Vec::new(), None)
        };
        Ok(RegionEncoder {
            config: c.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            ln_post,
            proj,
            region_query,
            region_pos,
            mra,
            assignment,
            mask,
        })
    }

    /// Token embeddings `[F·(N+1) × vit_dim]`: class token first in each frame,
    /// positional embeddings added.
    pub fn patchify_embed<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, frames: &Tensor<T>) -> Result<Var> {
        let c = &self.config;
        let s = frames.shape();
        if s.len() != 4 || s[1] != c.image_h || s[2] != c.image_w || s[3] != 3 {
            return Err(AsuError::Dimension(format!(
                "frames {s:?}, expected [F, {}, {}, 3]",
                c.image_h, c.image_w
            )));
        }
        let f = s[0];
        let n = c.num_patches();
        let patches = tape.constant(patchify(frames, c.patch)?);
        let emb = self.patch_embed.forward(tape, store, patches)?;
        let cls = tape.param(store, &self.cls_token)?;
        let joined = tape.concat_rows(&[cls, emb])?;
        let index: Vec<usize> = (0..f)
            .flat_map(|fi| std::iter::once(0).chain((0..n).map(move |p| 1 + fi * n + p)))
            .collect();
        let tokens = tape.gather_rows(joined, &index)?;
        let pos = tape.param(store, &self.pos_embed)?;
        tape.add_tiled(tokens, pos)
    }

    /// Runs the transformer stack over `[F·(N+1) × vit_dim]` tokens.
    ///
    /// Returns the projected class feature `[F × d]` and patch features
    /// `[F·N × d]`, the latter averaged over the last two block outputs
    /// (just the last one for a single-block stack).
    pub fn vit_forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: Var, frames: usize) -> Result<(Var, Var)> {
        let n = self.config.num_patches();
        let mut x = tokens;
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward(tape, store, x, frames)?;
            outputs.push(x);
        }
        let last = *outputs.last().ok_or_else(|| AsuError::Config("empty ViT".into()))?;
        let avg = if outputs.len() >= 2 {
            let prev = outputs[outputs.len() - 2];
            let s = tape.add(prev, last)?;
            tape.scale(s, 0.5)?
        } else {
            last
        };
        let cls_rows: Vec<usize> = (0..frames).map(|f| f * (n + 1)).collect();
        let patch_rows: Vec<usize> = (0..frames)
            .flat_map(|f| (0..n).map(move |p| f * (n + 1) + 1 + p))
            .collect();
        let cls = tape.gather_rows(last, &cls_rows)?;
        let cls = self.ln_post.forward(tape, store, cls)?;
        let y_cls = self.proj.forward(tape, store, cls)?;
        let patches = tape.gather_rows(avg, &patch_rows)?;
        let patch_feats = self.proj.forward(tape, store, patches)?;
        Ok((y_cls, patch_feats))
    }

    /// Initial region queries tiled over `frames`: `[F·R × d]`.
    pub fn initial_region_queries<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, frames: usize) -> Result<Var> {
        let r = self.assignment.num_regions;
        let q = tape.param(store, &self.region_query)?;
        let pos = tape.param(store, &self.region_pos)?;
        let q = tape.add(q, pos)?;
        let index: Vec<usize> = (0..frames).flat_map(|_| 0..r).collect();
        tape.gather_rows(q, &index)
    }

    /// All multi-region attention layers over `frames` frames at once.
    pub fn mra_forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, region_queries: Var, patch_feats: Var, frames: usize) -> Result<Var> {
        let mask = self
            .mask
            .as_ref()
            .ok_or_else(|| AsuError::Contract("encoder has no regions".into()))?;
        let mut r = region_queries;
        for layer in &self.mra {
            r = mra_layer(tape, store, layer, r, patch_feats, mask, frames)?;
        }
        Ok(r)
    }

    /// Encodes `[F × H × W × 3]` frames into `[F·(1+R) × d]` features.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, frames: &Tensor<T>) -> Result<EncodedFrames> {
        let f = frames.shape().first().copied().unwrap_or(0);
        if f == 0 {
            return Err(AsuError::Dimension("no frames to encode".into()));
        }
        let tokens = self.patchify_embed(tape, store, frames)?;
        let (y_cls, patch_feats) = self.vit_forward(tape, store, tokens, f)?;
        let r = self.assignment.num_regions;
        if r == 0 {
            return Ok(EncodedFrames {
                features: y_cls,
                frames: f,
                slots: 1,
            });
        }
        let q0 = self.initial_region_queries(tape, store, f)?;
        let regions = self.mra_forward(tape, store, q0, patch_feats, f)?;
        let joined = tape.concat_rows(&[y_cls, regions])?;
        let index: Vec<usize> = (0..f)
            .flat_map(|fi| std::iter::once(fi).chain((0..r).map(move |i| f + fi * r + i)))
            .collect();
        let features = tape.gather_rows(joined, &index)?;
        Ok(EncodedFrames {
            features,
            frames: f,
            slots: 1 + r,
        })
    }

    /// Encodes one `[H × W × 3]` frame.
    pub fn encode_frame<T: Real>(&self, store: &ParamStore<T>, frame: &Tensor<T>) -> Result<FrameFeatures<T>> {
        let s = frame.shape();
        if s.len() != 3 {
            return Err(AsuError::Dimension(format!("frame {s:?}, expected [H, W, 3]")));
        }
        let batch = frame.reshape(&[1, s[0], s[1], s[2]])?;
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, store, &batch)?;
        let mut matrix = tape.value(enc.features).clone();
        matrix.requires_grad = false;
        Ok(FrameFeatures { matrix })
    }
}

/// One multi-region attention layer: each region query attends to its own
/// patches (block mask), `groups` frames in parallel.
pub fn mra_layer<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layer: &CrossAttentionBlock,
    region_queries: Var,
    patch_feats: Var,
    mask: &AttnMask,
    groups: usize,
) -> Result<Var> {
    layer.forward(tape, store, region_queries, patch_feats, groups, Some(mask))
}

fn trunc_normal<T: Real>(shape: &[usize], std: f64, rng: &mut Prng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.truncated_normal(std))).collect();
    Tensor::new(shape, data).expect("shape matches")
}
