//! Semantic-unit bank: candidates extracted from action labels, enriched with
//! discriminative descriptions from a lexicon, deduplicated and partitioned
//! into body / object / scene / motion units.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{AsuError, Result};

/// Body parts that describe themselves well enough without a description.
pub const BODY_PRESET: [&str; 6] = ["head", "arms", "hands", "hips", "legs", "feet"];

pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "on", "in", "at", "to", "with", "and", "or", "by", "for", "from", "into", "onto",
    "up", "down", "out", "off", "over", "under", "is", "are", "be", "it", "its", "as", "something", "someone",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Body,
    Object,
    Scene,
    Motion,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Body, Category::Object, Category::Scene, Category::Motion];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Body => "body",
            Category::Object => "object",
            Category::Scene => "scene",
            Category::Motion => "motion",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = AsuError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "body" => Ok(Category::Body),
            "object" => Ok(Category::Object),
            "scene" => Ok(Category::Scene),
            "motion" => Ok(Category::Motion),
            other => Err(AsuError::Invalid(format!("unknown category {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticUnit {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub category: Category,
    #[serde(default)]
    pub sources: Vec<String>,
}

impl SemanticUnit {
    /// `name` alone, or `"name, description"`.
    pub fn composed_text(&self) -> String {
        if self.description.is_empty() {
            self.name.clone()
        } else {
            format!("{}, {}", self.name, self.description)
        }
    }

    fn dedup_key(&self) -> String {
        normalize_text(&self.composed_text())
    }
}

/// Case-folded, whitespace-collapsed form used for deduplication.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Term → description map. Terms are case-folded on insert and lookup.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeMap<String, String>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, term: &str, description: &str) {
        self.entries.insert(normalize_text(term), description.trim().to_owned());
    }

    pub fn lookup(&self, term: &str) -> Option<&str> {
        self.entries.get(&normalize_text(term)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: BTreeMap<String, String> = serde_json::from_str(s)?;
        let mut lex = Lexicon::new();
        for (k, v) in raw {
            lex.insert(&k, &v);
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| AsuError::io(path, e))?;
        Self::from_json(&s)
    }
}

impl<'a> FromIterator<(&'a str, &'a str)> for Lexicon {
    fn from_iter<I: IntoIterator<Item = (&'a str, &'a str)>>(iter: I) -> Self {
        let mut lex = Lexicon::new();
        for (k, v) in iter {
            lex.insert(k, v);
        }
        lex
    }
}

fn tokenize(label: &str) -> Vec<String> {
    label
        .split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn stopword_set(stopwords: &BTreeSet<String>) -> BTreeSet<String> {
    stopwords.iter().map(|s| s.to_lowercase()).collect()
}

pub fn default_stopwords() -> BTreeSet<String> {
    DEFAULT_STOPWORDS.iter().map(|s| (*s).to_owned()).collect()
}

/// Lowercased words of the labels minus stopwords, in first-occurrence order
/// without repeats. Empty labels are skipped with a warning.
pub fn extract_candidates(action_labels: &[String], stopwords: &BTreeSet<String>) -> Result<Vec<String>> {
    if action_labels.is_empty() {
        return Err(AsuError::Invalid("no action labels".into()));
    }
    let stop = stopword_set(stopwords);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for label in action_labels {
        if label.trim().is_empty() {
            warn!("skipping empty action label");
            continue;
        }
        for tok in tokenize(label) {
            if !stop.contains(&tok) && seen.insert(tok.clone()) {
                out.push(tok);
            }
        }
    }
    Ok(out)
}

/// Candidate phrases of one label: the whole stopword-stripped phrase when
/// `is_known` accepts it, otherwise its individual words.
fn segment_label(label: &str, stop: &BTreeSet<String>, is_known: impl Fn(&str) -> bool) -> Vec<String> {
    let words: Vec<String> = tokenize(label).into_iter().filter(|t| !stop.contains(t)).collect();
    if words.is_empty() {
        return Vec::new();
    }
    let phrase = words.join(" ");
    if words.len() > 1 && is_known(&phrase) {
        vec![phrase]
    } else {
        words
    }
}

pub fn enrich(candidate: &str, lexicon: &Lexicon, category: Category) -> SemanticUnit {
    SemanticUnit {
        name: normalize_text(candidate),
        description: lexicon.lookup(candidate).unwrap_or_default().to_owned(),
        category,
        sources: Vec::new(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BankBuild {
    pub bank: SemanticBank,
    /// Candidates with no category assignment, with the labels they came from.
    pub rejected: Vec<(String, Vec<String>)>,
}

impl BankBuild {
    /// One rejected candidate per line: `candidate<TAB>label; label`.
    pub fn rejection_report(&self) -> String {
        self.rejected
            .iter()
            .map(|(c, src)| format!("{c}\t{}\n", src.join("; ")))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticBank {
    units: Vec<SemanticUnit>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankFile {
    version: u32,
    units: Vec<SemanticUnit>,
}

impl SemanticBank {
    /// Canonicalizes: merges duplicates by composed text (sources unioned) and
    /// sorts by category, then name, then description.
    pub fn from_units(units: Vec<SemanticUnit>) -> Result<Self> {
        let mut by_key: BTreeMap<String, SemanticUnit> = BTreeMap::new();
        for mut u in units {
            if u.name.trim().is_empty() {
                return Err(AsuError::Invalid("semantic unit with empty name".into()));
            }
            match by_key.get_mut(&u.dedup_key()) {
                Some(existing) => {
                    if existing.category != u.category {
                        return Err(AsuError::CategoryConflict {
                            unit: existing.composed_text(),
                            first: existing.category.to_string(),
                            second: u.category.to_string(),
                        });
                    }
                    existing.sources.append(&mut u.sources);
                    existing.sources.sort();
                    existing.sources.dedup();
                }
                None => {
                    u.sources.sort();
                    u.sources.dedup();
                    by_key.insert(u.dedup_key(), u);
                }
            }
        }
        let mut units: Vec<SemanticUnit> = by_key.into_values().collect();
        units.sort_by(|a, b| {
            (a.category, &a.name, &a.description).cmp(&(b.category, &b.name, &b.description))
        });
        Ok(SemanticBank { units })
    }

    pub fn empty() -> Self {
        SemanticBank { units: Vec::new() }
    }

    pub fn units(&self) -> &[SemanticUnit] {
        &self.units
    }

    /// Unit count K.
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let key = normalize_text(name);
        self.units.iter().position(|u| u.name == key)
    }

    pub fn composed_texts(&self) -> Vec<String> {
        self.units.iter().map(SemanticUnit::composed_text).collect()
    }

    pub fn category_counts(&self) -> BTreeMap<Category, usize> {
        let mut counts: BTreeMap<Category, usize> = Category::ALL.iter().map(|&c| (c, 0)).collect();
        for u in &self.units {
            *counts.get_mut(&u.category).unwrap() += 1;
        }
        counts
    }

    pub fn of_category(&self, category: Category) -> impl Iterator<Item = &SemanticUnit> {
        self.units.iter().filter(move |u| u.category == category)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = BankFile {
            version: 1,
            units: self.units.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: BankFile = serde_json::from_str(s)?;
        if file.version != 1 {
            return Err(AsuError::Invalid(format!("bank file version {}", file.version)));
        }
        Self::from_units(file.units)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| AsuError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| AsuError::io(path, e))?;
        Self::from_json(&s)
    }
}

#[derive(Clone, Debug)]
pub struct BankOptions {
    pub stopwords: BTreeSet<String>,
    pub include_body_preset: bool,
}

impl Default for BankOptions {
    fn default() -> Self {
        BankOptions {
            stopwords: default_stopwords(),
            include_body_preset: true,
        }
    }
}

/// Builds a categorized, deduplicated bank from action labels.
///
/// Each label is segmented into its whole stopword-stripped phrase when that
/// phrase has a category, otherwise into single words. Candidates without a
/// category (from `categories` or the body preset) are reported, not dropped
/// silently.
pub fn build_bank(
    action_labels: &[String],
    lexicon: &Lexicon,
    categories: &BTreeMap<String, Category>,
    options: &BankOptions,
) -> Result<BankBuild> {
    if action_labels.is_empty() {
        return Err(AsuError::Invalid("no action labels".into()));
    }
    let stop = stopword_set(&options.stopwords);
    let cats: BTreeMap<String, Category> = categories.iter().map(|(k, v)| (normalize_text(k), *v)).collect();
    let category_of = |term: &str| -> Option<Category> {
        cats.get(term).copied().or_else(|| {
            (options.include_body_preset && BODY_PRESET.contains(&term)).then_some(Category::Body)
        })
    };

    let mut units = Vec::new();
    let mut rejected: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut rejected_order = Vec::new();
    for label in action_labels {
        if label.trim().is_empty() {
            warn!("skipping empty action label");
            continue;
        }
        let label_norm = normalize_text(label);
        for cand in segment_label(label, &stop, |p| category_of(p).is_some()) {
            match category_of(&cand) {
                Some(cat) => {
                    let mut u = enrich(&cand, lexicon, cat);
                    u.sources.push(label_norm.clone());
                    units.push(u);
                }
                None => {
                    let src = rejected.entry(cand.clone()).or_insert_with(|| {
                        rejected_order.push(cand.clone());
                        Vec::new()
                    });
                    if !src.contains(&label_norm) {
                        src.push(label_norm.clone());
                    }
                }
            }
        }
    }
    if options.include_body_preset {
        for part in BODY_PRESET {
            units.push(enrich(part, lexicon, Category::Body));
        }
    }
    let bank = SemanticBank::from_units(units)?;
    let rejected = rejected_order
        .into_iter()
        .map(|c| {
            let src = rejected.remove(&c).unwrap_or_default();
            (c, src)
        })
        .collect();
    Ok(BankBuild { bank, rejected })
}

/// Union of two banks, deduplicated by composed text.
pub fn merge_banks(a: &SemanticBank, b: &SemanticBank) -> Result<SemanticBank> {
    SemanticBank::from_units(a.units.iter().chain(&b.units).cloned().collect())
}

/// Category map file: JSON object of term → category name.
pub fn load_categories(path: &Path) -> Result<BTreeMap<String, Category>> {
    let s = std::fs::read_to_string(path).map_err(|e| AsuError::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| (*s).to_owned()).collect()
    }

    fn stops(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| (*s).to_owned()).collect()
    }

    #[test]
    fn extract_examples() {
        assert_eq!(extract_candidates(&labels(&["playing golf"]), &stops(&["playing"])).unwrap(), vec!["golf"]);
        assert!(extract_candidates(&[], &stops(&[])).is_err());
        assert_eq!(
            extract_candidates(&labels(&["smoking hookah", "smoking"]), &stops(&[])).unwrap(),
            vec!["smoking", "hookah"]
        );
        assert_eq!(extract_candidates(&labels(&["", "Golf"]), &stops(&[])).unwrap(), vec!["golf"]);
    }

    #[test]
    fn enrich_examples() {
        let lex: Lexicon = [("polo", "a game played on horseback with a long-handled mallet")].into_iter().collect();
        assert_eq!(
            enrich("polo", &lex, Category::Object).composed_text(),
            "polo, a game played on horseback with a long-handled mallet"
        );
        assert_eq!(enrich("head", &Lexicon::new(), Category::Body).composed_text(), "head");
        assert_eq!(enrich("golf", &lex, Category::Object).composed_text(), "golf");
        assert_eq!(enrich("POLO", &lex, Category::Object).name, "polo");
    }

    #[test]
    fn side_kick_is_one_motion_unit_plus_body_preset() {
        let cats = BTreeMap::from([("side kick".to_owned(), Category::Motion)]);
        let build = build_bank(&labels(&["side kick"]), &Lexicon::new(), &cats, &BankOptions::default()).unwrap();
        assert_eq!(build.bank.len(), 7);
        assert!(build.rejected.is_empty());
        let counts = build.bank.category_counts();
        assert_eq!(counts[&Category::Motion], 1);
        assert_eq!(counts[&Category::Body], 6);
        assert_eq!(build.bank.units().last().unwrap().name, "side kick");
    }

    #[test]
    fn repeated_label_does_not_grow_the_bank() {
        let cats = BTreeMap::from([("side kick".to_owned(), Category::Motion)]);
        let once = build_bank(&labels(&["side kick"]), &Lexicon::new(), &cats, &BankOptions::default()).unwrap();
        let twice = build_bank(&labels(&["side kick", "side kick"]), &Lexicon::new(), &cats, &BankOptions::default()).unwrap();
        assert_eq!(once.bank, twice.bank);
    }

    #[test]
    fn uncategorized_words_are_reported() {
        let cats = BTreeMap::from([("golf".to_owned(), Category::Object)]);
        let opts = BankOptions {
            include_body_preset: false,
            ..BankOptions::default()
        };
        let build = build_bank(&labels(&["playing golf", "golf swing"]), &Lexicon::new(), &cats, &opts).unwrap();
        assert_eq!(build.bank.len(), 1);
        let names: Vec<&str> = build.rejected.iter().map(|(c, _)| c.as_str()).collect();
        assert_eq!(names, vec!["playing", "swing"]);
        assert_eq!(build.rejection_report(), "playing\tplaying golf\nswing\tgolf swing\n");
        assert_eq!(build.bank.units()[0].sources, vec!["golf swing", "playing golf"]);
    }

    #[test]
    fn merge_rules() {
        let u = |n: &str, c| SemanticUnit {
            name: n.into(),
            description: String::new(),
            category: c,
            sources: vec![],
        };
        let x = SemanticBank::from_units(vec![u("ball", Category::Object), u("run", Category::Motion), u("beach", Category::Scene)]).unwrap();
        assert_eq!(merge_banks(&x, &x).unwrap(), x);
        assert_eq!(merge_banks(&x, &SemanticBank::empty()).unwrap(), x);
        let y = SemanticBank::from_units(vec![
            u("hoop", Category::Object),
            u("jump", Category::Motion),
            u("park", Category::Scene),
            u("legs", Category::Body),
        ])
        .unwrap();
        assert_eq!(merge_banks(&x, &y).unwrap().len(), 7);
        let clash = SemanticBank::from_units(vec![u("Ball", Category::Scene)]).unwrap();
        match merge_banks(&x, &clash) {
            Err(AsuError::CategoryConflict { unit, .. }) => assert_eq!(unit, "ball"),
            other => panic!("expected conflict, got {other:?}"),
        }
    }

    #[test]
    fn json_round_trip_and_version_check() {
        let cats = BTreeMap::from([("side kick".to_owned(), Category::Motion)]);
        let bank = build_bank(&labels(&["side kick"]), &Lexicon::new(), &cats, &BankOptions::default())
            .unwrap()
            .bank;
        let json = bank.to_json().unwrap();
        assert!(json.contains("\"version\": 1"));
        assert_eq!(SemanticBank::from_json(&json).unwrap(), bank);
        assert!(SemanticBank::from_json(&json.replace("\"version\": 1", "\"version\": 2")).is_err());
    }
}
