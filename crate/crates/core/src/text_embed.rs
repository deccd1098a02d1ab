//! Frozen text features: unit matrix `S` and label matrix `C`.
//!
//! Rows come either from the deterministic pseudo-encoder below or from an
//! embedding file written by an external exporter.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AsuError, EmbeddingFileError, Result};
use crate::rng::{fnv1a64, splitmix64, Prng};
use crate::su_bank::SemanticBank;
use crate::tensor::Tensor;

pub const MAGIC_PREFIX: &[u8; 6] = b"ASUEMB";
pub const FORMAT_VERSION: u8 = b'1';
pub const DEFAULT_TEMPLATE: &str = "a video of a person";
pub const MIN_DIM: usize = 8;

/// Row-keyed `rows × dim` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    names: Vec<String>,
    data: Tensor,
}

impl EmbeddingMatrix {
    pub fn new(names: Vec<String>, data: Tensor) -> Result<Self> {
        if data.rank() != 2 {
            return Err(AsuError::Dimension(format!("embedding data must be 2-D, got {:?}", data.shape())));
        }
        let (rows, _) = data.dims2();
        if names.len() != rows {
            return Err(EmbeddingFileError::NameCount { names: names.len(), rows }.into());
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(AsuError::Invalid(format!("duplicate embedding row name {n:?}")));
            }
        }
        let mut data = data;
        data.requires_grad = false;
        data.grad = None;
        Ok(EmbeddingMatrix { names, data })
    }

    pub fn rows(&self) -> usize {
        self.names.len()
    }

    pub fn dim(&self) -> usize {
        self.data.dims2().1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.data.row(i)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Copy with every row scaled to unit L2 norm.
    pub fn normalized(&self) -> Result<Self> {
        let (rows, dim) = self.data.dims2();
        let mut out = self.data.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * dim..(r + 1) * dim];
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(AsuError::Degenerate(format!("row {:?} has norm {norm}", self.names[r])));
            }
            row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
        }
        Ok(EmbeddingMatrix {
            names: self.names.clone(),
            data: out,
        })
    }

    /// Rows picked by name, in the requested order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(names.len() * dim);
        for n in names {
            let i = self
                .index_of(n)
                .ok_or_else(|| AsuError::Invalid(format!("no embedding row named {n:?}")))?;
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix::new(names.to_vec(), Tensor::new(&[names.len(), dim], data)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (rows, dim) = self.data.dims2();
        let names = serde_json::to_vec(&self.names)?;
        let mut out = Vec::with_capacity(16 + rows * dim * 4 + names.len() + 4);
        out.extend_from_slice(MAGIC_PREFIX);
        out.push(FORMAT_VERSION);
        out.push(0);
        out.extend_from_slice(&u32_of(rows)?.to_le_bytes());
        out.extend_from_slice(&u32_of(dim)?.to_le_bytes());
        for v in self.data.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&names);
        out.extend_from_slice(&u32_of(names.len())?.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(parse(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| AsuError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| AsuError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| AsuError::Invalid(format!("{n} does not fit the u32 header field")))
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn parse(bytes: &[u8]) -> std::result::Result<EmbeddingMatrix, EmbeddingFileError> {
    use EmbeddingFileError::*;
    let truncated = |needed: usize| Truncated {
        needed,
        available: bytes.len(),
    };
    if bytes.len() < 8 {
        return Err(if bytes.len() >= 6 && &bytes[..6] != MAGIC_PREFIX { BadMagic } else { truncated(8) });
    }
    if &bytes[..6] != MAGIC_PREFIX || bytes[7] != 0 {
        return Err(BadMagic);
    }
    if bytes[6] != FORMAT_VERSION {
        return Err(Version(bytes[6]));
    }
    if bytes.len() < 16 {
        return Err(truncated(16));
    }
    let rows = read_u32(bytes, 8) as usize;
    let dim = read_u32(bytes, 12) as usize;
    let payload = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| truncated(usize::MAX))?;
    let names_start = 16 + payload;
    if bytes.len() < names_start + 4 {
        return Err(truncated(names_start + 4));
    }
    let names_len = read_u32(bytes, bytes.len() - 4) as usize;
    let needed = names_start + names_len + 4;
    if needed > bytes.len() {
        return Err(truncated(needed));
    }
    if needed < bytes.len() {
        return Err(Names(format!("{} unexpected bytes before the footer", bytes.len() - needed)));
    }
    let names: Vec<String> =
        serde_json::from_slice(&bytes[names_start..names_start + names_len]).map_err(|e| Names(e.to_string()))?;
    if names.len() != rows {
        return Err(NameCount { names: names.len(), rows });
    }
    if names.iter().collect::<BTreeSet<_>>().len() != names.len() {
        return Err(Names("duplicate row names".into()));
    }
    let data: Vec<f32> = bytes[16..names_start]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let data = Tensor::new(&[rows, dim], data).map_err(|e| Names(e.to_string()))?;
    Ok(EmbeddingMatrix { names, data })
}

/// Deterministic stand-in for a frozen text encoder.
///
/// Each case-folded token seeds its own Gaussian draw; the token vectors are
/// summed and the sum is L2-normalized. Texts sharing tokens therefore share
/// directions.
pub fn pseudo_embed(text: &str, dim: usize, seed: u64) -> Result<Vec<f32>> {
    if dim < MIN_DIM {
        return Err(AsuError::Invalid(format!("embedding dim {dim} below minimum {MIN_DIM}")));
    }
    let tokens: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    if tokens.is_empty() {
        return Err(AsuError::Invalid(format!("cannot embed empty text {text:?}")));
    }
    let mut acc = vec![0.0f64; dim];
    for tok in &tokens {
        let mut rng = Prng::new(splitmix64(fnv1a64(tok.as_bytes()) ^ splitmix64(seed)));
        for a in acc.iter_mut() {
            *a += rng.gaussian();
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(AsuError::Degenerate(format!("zero embedding for {text:?}")));
    }
    Ok(acc.iter().map(|v| (v / norm) as f32).collect())
}

fn embed_texts(keys: Vec<String>, texts: &[String], dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(texts.len() * dim);
    for t in texts {
        data.extend(pseudo_embed(t, dim, seed)?);
    }
    EmbeddingMatrix::new(keys, Tensor::new(&[texts.len(), dim], data)?)
}

/// Row `i` embeds unit `i`'s composed text; rows are keyed by composed text.
pub fn embed_bank(bank: &SemanticBank, dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    if bank.is_empty() {
        return Err(AsuError::Invalid("cannot embed an empty bank".into()));
    }
    let texts = bank.composed_texts();
    embed_texts(texts.clone(), &texts, dim, seed)
}

/// How label texts are turned into prompts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prompt(pub String);

impl Default for Prompt {
    fn default() -> Self {
        Prompt(DEFAULT_TEMPLATE.to_owned())
    }
}

impl Prompt {
    pub fn none() -> Self {
        Prompt(String::new())
    }

    /// Empty template: the raw label. A template containing `{}`: the label
    /// substituted there. Anything else is a prefix.
    pub fn apply(&self, label: &str) -> String {
        let t = self.0.trim();
        if t.is_empty() {
            label.to_owned()
        } else if t.contains("{}") {
            t.replacen("{}", label, 1)
        } else {
            format!("{t} {label}")
        }
    }
}

/// Rows keyed by the raw label, each embedding the prompted label text.
pub fn embed_labels(labels: &[String], prompt: &Prompt, dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    check_unique_labels(labels)?;
    let texts: Vec<String> = labels.iter().map(|l| prompt.apply(l)).collect();
    embed_texts(labels.to_vec(), &texts, dim, seed)
}

fn check_unique_labels(labels: &[String]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(AsuError::Invalid(format!("duplicate label {l:?}")));
        }
    }
    Ok(())
}

/// Input document for an external exporter: texts to encode under row keys.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportManifest {
    pub encoder: String,
    pub dim: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub key: String,
    pub text: String,
}

impl ExportManifest {
    pub fn for_bank(bank: &SemanticBank, encoder: &str, dim: usize) -> Self {
        let entries = bank
            .composed_texts()
            .into_iter()
            .map(|t| ManifestEntry { key: t.clone(), text: t })
            .collect();
        ExportManifest {
            encoder: encoder.to_owned(),
            dim,
            entries,
        }
    }

    pub fn for_labels(labels: &[String], prompt: &Prompt, encoder: &str, dim: usize) -> Result<Self> {
        check_unique_labels(labels)?;
        let entries = labels
            .iter()
            .map(|l| ManifestEntry {
                key: l.clone(),
                text: prompt.apply(l),
            })
            .collect();
        Ok(ExportManifest {
            encoder: encoder.to_owned(),
            dim,
            entries,
        })
    }

    pub fn keys(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.key.clone()).collect()
    }

    /// Keys unique, texts nonempty, dim at least [`MIN_DIM`].
    pub fn validate(&self) -> Result<()> {
        if self.dim < MIN_DIM {
            return Err(AsuError::Invalid(format!("manifest dim {} below minimum {MIN_DIM}", self.dim)));
        }
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.key.as_str()) {
                return Err(AsuError::Invalid(format!("duplicate manifest key {:?}", e.key)));
            }
            if e.text.trim().is_empty() {
                return Err(AsuError::Invalid(format!("empty text for manifest key {:?}", e.key)));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: ExportManifest = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    /// Checks an exporter's output against this manifest: same keys in the
    /// same order, the declared dim, and unit-norm rows.
    pub fn check_output(&self, m: &EmbeddingMatrix) -> Result<()> {
        if m.names() != self.keys().as_slice() {
            return Err(AsuError::Invalid("embedding rows do not follow the manifest keys".into()));
        }
        if m.dim() != self.dim {
            return Err(AsuError::Invalid(format!("embedding dim {} vs manifest dim {}", m.dim(), self.dim)));
        }
        for (i, name) in m.names().iter().enumerate() {
            let norm = m.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(AsuError::Invalid(format!("row {name:?} has norm {norm}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    #[test]
    fn pseudo_embed_is_deterministic_and_unit_norm() {
        let a = pseudo_embed("red ball", 64, 0).unwrap();
        assert_eq!(a, pseudo_embed("red ball", 64, 0).unwrap());
        assert_eq!(a, pseudo_embed("RED  Ball", 64, 0).unwrap());
        assert!((cos(&a, &a) - 1.0).abs() < 1e-6);
        assert_ne!(a, pseudo_embed("red ball", 64, 1).unwrap());
    }

    #[test]
    fn shared_tokens_pull_vectors_together() {
        let rb = pseudo_embed("red ball", 64, 0).unwrap();
        let rc = pseudo_embed("red cube", 64, 0).unwrap();
        let os = pseudo_embed("ocean sunset", 64, 0).unwrap();
        assert!(cos(&rb, &rc) > cos(&rb, &os));
    }

    #[test]
    fn pseudo_embed_rejects_bad_input() {
        assert!(pseudo_embed("", 64, 0).is_err());
        assert!(pseudo_embed(" , ", 64, 0).is_err());
        assert!(pseudo_embed("ball", 7, 0).is_err());
    }

    #[test]
    fn prompt_modes() {
        assert_eq!(Prompt::default().apply("golf"), "a video of a person golf");
        assert_eq!(Prompt::none().apply("golf"), "golf");
        assert_eq!(Prompt("a photo of {}.".into()).apply("golf"), "a photo of golf.");
        let labels = vec!["golf".to_owned()];
        let m = embed_labels(&labels, &Prompt::default(), 16, 3).unwrap();
        assert_eq!(m.row(0), pseudo_embed("a video of a person golf", 16, 3).unwrap().as_slice());
        let raw = embed_labels(&labels, &Prompt::none(), 16, 3).unwrap();
        assert_eq!(raw.row(0), pseudo_embed("golf", 16, 3).unwrap().as_slice());
        assert!(embed_labels(&["a".into(), "a".into()], &Prompt::none(), 16, 0).is_err());
    }

    #[test]
    fn magic_and_version_errors() {
        let m = EmbeddingMatrix::new(vec!["x".into()], Tensor::ones(&[1, 8])).unwrap();
        let mut bytes = m.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"ASUEMB1\0");
        assert_eq!(EmbeddingMatrix::from_bytes(&bytes).unwrap(), m);
        bytes[6] = b'2';
        match EmbeddingMatrix::from_bytes(&bytes) {
            Err(AsuError::EmbeddingFile(e)) => assert_eq!(e, EmbeddingFileError::Version(b'2')),
            other => panic!("{other:?}"),
        }
        bytes[0] = b'X';
        match EmbeddingMatrix::from_bytes(&bytes) {
            Err(AsuError::EmbeddingFile(e)) => assert_eq!(e.code(), 1),
            other => panic!("{other:?}"),
        }
    }
}
