//! Synthetic action videos built from semantic units.
//!
//! Every unit owns a seeded pixel signature drawn into the horizontal band of
//! its category: scene on top, then body, object and motion. The motion unit
//! also decides how its signature moves over time. Class labels name the
//! units, so label text and visual content share vocabulary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AsuError, Result};
use crate::rng::{fnv1a64, splitmix64, Prng};
use crate::su_bank::{build_bank, BankOptions, Category, Lexicon, SemanticBank};
use crate::tensor::Tensor;

pub const BANDS: usize = 4;
pub const CELLS: usize = 4;
pub const MAX_CLASSES: usize = 16;

pub const MOTIONS: [&str; 4] = ["jump", "spin", "wave", "slide"];
pub const OBJECTS: [&str; 4] = ["ball", "cube", "ring", "stick"];
pub const BODIES: [&str; 4] = ["head", "arms", "legs", "feet"];
pub const SCENES: [&str; 4] = ["beach", "forest", "snow", "road"];

/// Curated descriptions for the synthetic vocabulary.
pub const LEXICON: [(&str, &str); 8] = [
    ("ball", "a round object that is thrown or kicked"),
    ("cube", "a solid block with six square faces"),
    ("ring", "a circular band with a hole in the middle"),
    ("stick", "a long thin piece of wood"),
    ("beach", "sandy shore next to the sea"),
    ("forest", "land covered with dense trees"),
    ("snow", "white frozen ground"),
    ("road", "paved way for travel"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionPattern {
    /// Signature steps one cell to the right per quarter of the video.
    Translate,
    /// Visible in the second half only.
    Appear,
    /// Visible in the first half only.
    Disappear,
    /// Blinks on and off eight times.
    Pulse,
}

impl MotionPattern {
    pub const ALL: [MotionPattern; 4] = [
        MotionPattern::Translate,
        MotionPattern::Appear,
        MotionPattern::Disappear,
        MotionPattern::Pulse,
    ];

    /// Cell occupied at `phase ∈ [0, 1)`, or `None` when hidden.
    fn cell(&self, phase: f64, start: usize) -> Option<usize> {
        match self {
            MotionPattern::Translate => Some((start + (phase * CELLS as f64) as usize) % CELLS),
            MotionPattern::Appear => (phase >= 0.5).then_some(start),
            MotionPattern::Disappear => (phase < 0.5).then_some(start),
            MotionPattern::Pulse => (((phase * 8.0) as usize) % 2 == 0).then_some(start),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub label: String,
    pub scene: String,
    pub body: String,
    pub object: String,
    pub motion: String,
    pub pattern: MotionPattern,
}

impl ClassSpec {
    /// Units in band order (scene, body, object, motion).
    pub fn units(&self) -> [&str; BANDS] {
        [&self.scene, &self.body, &self.object, &self.motion]
    }
}

/// `count` classes over the built-in vocabulary. Class `i = 4b + a` uses word
/// `a` for the motion and words `a+b`, `a+2b`, `a+3b` (mod 4) for object, body
/// and scene, so every word of classes `0..4` reappears in classes `4..8`.
pub fn synthetic_classes(count: usize) -> Result<Vec<ClassSpec>> {
    if count == 0 || count > MAX_CLASSES {
        return Err(AsuError::Config(format!("class count must be in 1..={MAX_CLASSES}, got {count}")));
    }
    Ok((0..count)
        .map(|i| {
            let (a, b) = (i % 4, i / 4);
            let motion = MOTIONS[a];
            let object = OBJECTS[(a + b) % 4];
            let body = BODIES[(a + 2 * b) % 4];
            let scene = SCENES[(a + 3 * b) % 4];
            ClassSpec {
                label: format!("{motion} {object} with {body} on {scene}"),
                scene: scene.into(),
                body: body.into(),
                object: object.into(),
                motion: motion.into(),
                pattern: MotionPattern::ALL[a],
            }
        })
        .collect())
}

pub fn synthetic_categories() -> BTreeMap<String, Category> {
    let mut m = BTreeMap::new();
    for (words, cat) in [
        (MOTIONS, Category::Motion),
        (OBJECTS, Category::Object),
        (BODIES, Category::Body),
        (SCENES, Category::Scene),
    ] {
        for w in words {
            m.insert(w.to_owned(), cat);
        }
    }
    m
}

pub fn synthetic_lexicon() -> Lexicon {
    LEXICON.into_iter().collect()
}

/// Bank built from the class labels with the synthetic lexicon and categories.
pub fn synthetic_bank(classes: &[ClassSpec]) -> Result<SemanticBank> {
    let labels: Vec<String> = classes.iter().map(|c| c.label.clone()).collect();
    let build = build_bank(&labels, &synthetic_lexicon(), &synthetic_categories(), &BankOptions::default())?;
    if !build.rejected.is_empty() {
        return Err(AsuError::Invalid(format!("uncategorized words in synthetic labels: {}", build.rejection_report())));
    }
    Ok(build.bank)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub classes: usize,
    pub videos_per_class: usize,
    /// Videos per class held out for validation; the rest train.
    pub val_per_class: usize,
    /// Frames per sampled clip.
    pub frames: usize,
    /// Frames rendered per video, clips are sampled from these.
    pub source_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 8,
            videos_per_class: 25,
            val_per_class: 5,
            frames: 8,
            source_frames: 16,
            height: 32,
            width: 32,
            noise: 0.1,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > MAX_CLASSES {
            return Err(AsuError::Config(format!("classes must be in 1..={MAX_CLASSES}")));
        }
        if self.videos_per_class == 0 || self.val_per_class > self.videos_per_class {
            return Err(AsuError::Config("val_per_class exceeds videos_per_class".into()));
        }
        if self.frames == 0 || self.source_frames < self.frames {
            return Err(AsuError::Config("need 1 <= frames <= source_frames".into()));
        }
        if self.height % BANDS != 0 || self.width % CELLS != 0 || self.height == 0 || self.width == 0 {
            return Err(AsuError::Config(format!("frame size must be a positive multiple of {BANDS}")));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(AsuError::Config("noise must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn train_per_class(&self) -> usize {
        self.videos_per_class - self.val_per_class
    }
}

#[derive(Clone, Debug)]
pub struct Video {
    pub id: String,
    pub class: usize,
    /// `[source_frames × H × W × 3]`.
    pub frames: Tensor,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    pub videos: Vec<Video>,
    /// Indices into `videos`.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

fn signature(unit: &str, seed: u64, h: usize, w: usize) -> Vec<f32> {
    let mut rng = Prng::new(splitmix64(fnv1a64(unit.as_bytes()) ^ seed));
    (0..h * w * 3).map(|_| rng.uniform() as f32).collect()
}

/// Renders every class's videos. Fails when a class names a unit missing from
/// `bank`.
pub fn generate_dataset(bank: &SemanticBank, classes: &[ClassSpec], spec: &DatasetSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    if classes.is_empty() {
        return Err(AsuError::Invalid("no classes".into()));
    }
    for c in classes {
        for u in c.units() {
            if bank.index_of(u).is_none() {
                return Err(AsuError::Invalid(format!("class {:?} references unknown unit {u:?}", c.label)));
            }
        }
    }
    let (bh, cw) = (spec.height / BANDS, spec.width / CELLS);
    let sig_seed = splitmix64(seed ^ 0x5167);
    let mut sigs: BTreeMap<&str, Vec<f32>> = BTreeMap::new();
    for c in classes {
        for u in c.units() {
            sigs.entry(u).or_insert_with(|| signature(u, sig_seed, bh, cw));
        }
    }

    let mut videos = Vec::new();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (ci, class) in classes.iter().enumerate() {
        for vi in 0..spec.videos_per_class {
            let mut rng = Prng::derive(seed, &format!("video/{ci}/{vi}"));
            let frames = render(class, &sigs, spec, &mut rng)?;
            if vi < spec.train_per_class() {
                train.push(videos.len());
            } else {
                val.push(videos.len());
            }
            videos.push(Video {
                id: format!("c{ci:02}v{vi:03}"),
                class: ci,
                frames,
            });
        }
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        seed,
        classes: classes.to_vec(),
        videos,
        train,
        val,
    })
}

fn render(class: &ClassSpec, sigs: &BTreeMap<&str, Vec<f32>>, spec: &DatasetSpec, rng: &mut Prng) -> Result<Tensor> {
    let (h, w, s) = (spec.height, spec.width, spec.source_frames);
    let (bh, cw) = (h / BANDS, w / CELLS);
    let gain = rng.uniform_range(0.8, 1.2) as f32;
    let body_cell = rng.below(CELLS);
    let object_cell = rng.below(CELLS);
    let motion_start = rng.below(CELLS);
    let mut data = vec![0.0f32; s * h * w * 3];
    let mut paint = |frame: usize, band: usize, cell: usize, sig: &[f32]| {
        for y in 0..bh {
            for x in 0..cw {
                for ch in 0..3 {
                    let px = ((frame * h + band * bh + y) * w + cell * cw + x) * 3 + ch;
                    data[px] = gain * sig[(y * cw + x) * 3 + ch];
                }
            }
        }
    };
    for f in 0..s {
        let phase = f as f64 / s as f64;
        for cell in 0..CELLS {
            paint(f, 0, cell, &sigs[class.scene.as_str()]);
        }
        paint(f, 1, body_cell, &sigs[class.body.as_str()]);
        paint(f, 2, object_cell, &sigs[class.object.as_str()]);
        if let Some(cell) = class.pattern.cell(phase, motion_start) {
            paint(f, 3, cell, &sigs[class.motion.as_str()]);
        }
    }
    if spec.noise > 0.0 {
        for v in data.iter_mut() {
            *v += (rng.gaussian() * spec.noise) as f32;
        }
    }
    Tensor::new(&[s, h, w, 3], data)
}

/// Source-frame indices of clip `view` out of `views`: one frame per equal
/// segment, at the segment centre for a single view and at evenly spaced
/// offsets inside the segment otherwise.
pub fn clip_indices(source_frames: usize, frames: usize, views: usize, view: usize) -> Result<Vec<usize>> {
    if frames == 0 || frames > source_frames || views == 0 || view >= views {
        return Err(AsuError::Invalid(format!(
            "cannot take view {view}/{views} of {frames} frames from {source_frames}"
        )));
    }
    let seg = source_frames as f64 / frames as f64;
    let off = (view as f64 + 0.5) / views as f64;
    Ok((0..frames)
        .map(|k| (((k as f64 + off) * seg) as usize).min(source_frames - 1))
        .collect())
}

impl SyntheticDataset {
    pub fn labels(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.label.clone()).collect()
    }

    pub fn video(&self, id: &str) -> Option<(usize, &Video)> {
        self.videos.iter().enumerate().find(|(_, v)| v.id == id)
    }

    /// `[T × H × W × 3]` frames of one clip of video `index`.
    pub fn clip(&self, index: usize, views: usize, view: usize) -> Result<Tensor> {
        let v = &self.videos[index];
        let idx = clip_indices(self.spec.source_frames, self.spec.frames, views, view)?;
        let per = self.spec.height * self.spec.width * 3;
        let src = v.frames.data();
        let mut out = Vec::with_capacity(idx.len() * per);
        for i in idx {
            out.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        Tensor::new(&[self.spec.frames, self.spec.height, self.spec.width, 3], out)
    }

    /// Clips of several videos stacked video-major: `[B·T × H × W × 3]`.
    pub fn batch(&self, indices: &[usize], views: usize, view: usize) -> Result<Tensor> {
        let mut data = Vec::new();
        for &i in indices {
            data.extend(self.clip(i, views, view)?.into_data());
        }
        Tensor::new(&[indices.len() * self.spec.frames, self.spec.height, self.spec.width, 3], data)
    }

    /// `k` training videos per class, drawn without replacement.
    pub fn few_shot_train(&self, k: usize, seed: u64) -> Result<Vec<usize>> {
        let mut rng = Prng::derive(seed, "fewshot");
        let mut out = Vec::new();
        for c in 0..self.classes.len() {
            let mut pool: Vec<usize> = self.train.iter().copied().filter(|&i| self.videos[i].class == c).collect();
            if k > pool.len() {
                return Err(AsuError::Invalid(format!(
                    "{k} shots requested but class {c} has {} training videos",
                    pool.len()
                )));
            }
            rng.shuffle(&mut pool);
            pool.truncate(k);
            pool.sort_unstable();
            out.extend(pool);
        }
        Ok(out)
    }
}
