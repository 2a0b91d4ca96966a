//! Synthetic grounded-scene corpus: generation, splits, dataset and
//! vocabulary files.
//!
//! A scene holds 1 to 3 objects of distinct coarse categories. Each object
//! occupies one region whose feature row is
//! `category one-hot ⊕ sub-category one-hot ⊕ plurality bit ⊕ zero padding`
//! plus Gaussian noise; the remaining regions are background (noise only).
//! Captions follow a fixed grammar, e.g. `a cat is sleeping on a couch`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::RegionFeatures;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const BACKGROUND: &str = "background";

pub struct Category {
    pub name: &'static str,
    pub verb: &'static str,
    /// `(singular, plural)` for each sub-category.
    pub subcategories: [(&'static str, &'static str); 2],
}

pub const TAXONOMY: [Category; 8] = [
    Category { name: "cat", verb: "sleeping", subcategories: [("cat", "cats"), ("kitten", "kittens")] },
    Category { name: "dog", verb: "running", subcategories: [("dog", "dogs"), ("puppy", "puppies")] },
    Category { name: "bird", verb: "sitting", subcategories: [("bird", "birds"), ("parrot", "parrots")] },
    Category { name: "horse", verb: "standing", subcategories: [("horse", "horses"), ("pony", "ponies")] },
    Category { name: "zebra", verb: "grazing", subcategories: [("zebra", "zebras"), ("foal", "foals")] },
    Category { name: "car", verb: "parked", subcategories: [("car", "cars"), ("truck", "trucks")] },
    Category { name: "bus", verb: "waiting", subcategories: [("bus", "buses"), ("van", "vans")] },
    Category { name: "couch", verb: "empty", subcategories: [("couch", "couches"), ("sofa", "sofas")] },
];

pub const NUM_CATEGORIES: usize = TAXONOMY.len();
pub const NUM_SUBCATEGORIES: usize = 2 * NUM_CATEGORIES;
/// Signal width before padding: category + sub-category one-hots + plurality.
pub const SIGNAL_DIM: usize = NUM_CATEGORIES + NUM_SUBCATEGORIES + 1;

pub fn category_index(name: &str) -> Option<usize> {
    TAXONOMY.iter().position(|c| c.name == name)
}

/// Category of a global sub-category index.
pub fn category_of(subcategory: usize) -> usize {
    subcategory / 2
}

pub fn subcategory_word(subcategory: usize, plural: bool) -> &'static str {
    let (s, p) = TAXONOMY[category_of(subcategory)].subcategories[subcategory % 2];
    if plural {
        p
    } else {
        s
    }
}

/// Every surface form (singular and plural) of a category's objects.
pub fn category_words(category: usize) -> Vec<&'static str> {
    TAXONOMY[category].subcategories.iter().flat_map(|&(s, p)| [s, p]).collect()
}

/// Maps a word to `(sub-category, plural)` when it names an object.
pub fn parse_object_word(word: &str) -> Option<(usize, bool)> {
    for sub in 0..NUM_SUBCATEGORIES {
        if subcategory_word(sub, false) == word {
            return Some((sub, false));
        }
        if subcategory_word(sub, true) == word {
            return Some((sub, true));
        }
    }
    None
}

fn preposition(subject: usize, object: usize) -> &'static str {
    match TAXONOMY[object].name {
        "couch" => "on",
        "car" | "bus" => "near",
        _ if subject % 2 == 0 => "beside",
        _ => "behind",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grounding {
    Textual,
    Visual { region: usize, plural: bool, subcategory: usize },
}

impl Grounding {
    pub fn is_visual(&self) -> bool {
        matches!(self, Grounding::Visual { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub id: u64,
    pub regions: RegionFeatures,
    /// Coarse label per region; background regions are [`BACKGROUND`].
    pub categories: Vec<String>,
    pub tokens: Vec<String>,
    pub grounding: Vec<Grounding>,
}

impl SceneRecord {
    pub fn k(&self) -> usize {
        self.regions.k()
    }

    pub fn visual_slots(&self) -> impl Iterator<Item = (usize, &Grounding)> + '_ {
        self.grounding.iter().enumerate().filter(|(_, g)| g.is_visual())
    }

    /// Category indices of the objects in the scene, ascending.
    pub fn object_categories(&self) -> BTreeSet<usize> {
        self.categories.iter().filter_map(|c| category_index(c)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if self.categories.len() != k {
            return Err(Error::Invalid(format!("{} category labels for {k} regions", self.categories.len())));
        }
        if self.tokens.len() != self.grounding.len() {
            return Err(Error::Invalid(format!(
                "{} tokens but {} grounding entries",
                self.tokens.len(),
                self.grounding.len()
            )));
        }
        if self.tokens.is_empty() {
            return Err(Error::Invalid("empty caption".into()));
        }
        for (t, g) in self.grounding.iter().enumerate() {
            if let Grounding::Visual { region, plural, subcategory } = *g {
                if region >= k {
                    return Err(Error::Invalid(format!("token {t} grounded to region {region} but K = {k}")));
                }
                if subcategory >= NUM_SUBCATEGORIES {
                    return Err(Error::Invalid(format!("token {t} has sub-category {subcategory}")));
                }
                if self.tokens[t] != subcategory_word(subcategory, plural) {
                    return Err(Error::Invalid(format!(
                        "token {t} '{}' does not match its grounding",
                        self.tokens[t]
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub feature_dim: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    pub max_objects: usize,
    pub noise: f64,
    pub plural_prob: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            feature_dim: 32,
            min_regions: 3,
            max_regions: 6,
            max_objects: 3,
            noise: 0.1,
            plural_prob: 0.3,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < SIGNAL_DIM {
            return Err(Error::Config(format!(
                "feature_dim {} is below the {SIGNAL_DIM} signal dimensions",
                self.feature_dim
            )));
        }
        if self.max_objects == 0 || self.max_objects > 3 || self.max_objects > NUM_CATEGORIES {
            return Err(Error::Config(format!("max_objects must be in 1..=3, got {}", self.max_objects)));
        }
        if self.min_regions == 0 || self.min_regions > self.max_regions {
            return Err(Error::Config(format!(
                "region bounds [{}, {}] are empty",
                self.min_regions, self.max_regions
            )));
        }
        if self.max_regions < self.max_objects {
            return Err(Error::Config(format!(
                "max_regions {} cannot hold {} objects",
                self.max_regions, self.max_objects
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be finite and non-negative, got {}", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.plural_prob) {
            return Err(Error::Config(format!("plural_prob must be in [0, 1], got {}", self.plural_prob)));
        }
        Ok(())
    }
}

struct SceneObject {
    category: usize,
    subcategory: usize,
    plural: bool,
    region: usize,
}

fn signal_row(obj: &SceneObject, dim: usize) -> Vec<f64> {
    let mut row = vec![0.0; dim];
    row[obj.category] = 1.0;
    row[NUM_CATEGORIES + obj.subcategory] = 1.0;
    row[NUM_CATEGORIES + NUM_SUBCATEGORIES] = if obj.plural { 1.0 } else { 0.0 };
    row
}

fn caption(objects: &[SceneObject]) -> (Vec<String>, Vec<Grounding>) {
    let mut tokens = Vec::new();
    let mut grounding = Vec::new();
    let push_textual = |tokens: &mut Vec<String>, grounding: &mut Vec<Grounding>, w: &str| {
        tokens.push(w.to_string());
        grounding.push(Grounding::Textual);
    };
    let mention = |tokens: &mut Vec<String>, grounding: &mut Vec<Grounding>, o: &SceneObject| {
        tokens.push(if o.plural { "two" } else { "a" }.to_string());
        grounding.push(Grounding::Textual);
        tokens.push(subcategory_word(o.subcategory, o.plural).to_string());
        grounding.push(Grounding::Visual {
            region: o.region,
            plural: o.plural,
            subcategory: o.subcategory,
        });
    };
    let subject = &objects[0];
    mention(&mut tokens, &mut grounding, subject);
    push_textual(&mut tokens, &mut grounding, if subject.plural { "are" } else { "is" });
    push_textual(&mut tokens, &mut grounding, TAXONOMY[subject.category].verb);
    if let Some(second) = objects.get(1) {
        push_textual(&mut tokens, &mut grounding, preposition(subject.category, second.category));
        mention(&mut tokens, &mut grounding, second);
    }
    if let Some(third) = objects.get(2) {
        push_textual(&mut tokens, &mut grounding, "and");
        mention(&mut tokens, &mut grounding, third);
    }
    (tokens, grounding)
}

/// Deterministic corpus of `n_scenes` scenes with ids `0..n_scenes`.
pub fn gen_corpus(seed: u64, n_scenes: usize, config: &CorpusConfig) -> Result<Vec<SceneRecord>> {
    config.validate()?;
    if n_scenes == 0 {
        return Err(Error::Config("n_scenes must be at least 1".into()));
    }
    let mut rng = rng_for(seed, "corpus");
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(n_scenes);
    for id in 0..n_scenes {
        let n_obj = rng.random_range(1..=config.max_objects);
        let mut cats: Vec<usize> = (0..NUM_CATEGORIES).collect();
        cats.shuffle(&mut rng);
        let mut cats = cats[..n_obj].to_vec();
        cats.sort_unstable();

        let k = rng.random_range(config.min_regions.max(n_obj)..=config.max_regions);
        let mut slots: Vec<usize> = (0..k).collect();
        slots.shuffle(&mut rng);
        let objects: Vec<SceneObject> = cats
            .iter()
            .zip(&slots)
            .map(|(&category, &region)| SceneObject {
                category,
                subcategory: 2 * category + rng.random_range(0..2),
                plural: rng.random::<f64>() < config.plural_prob,
                region,
            })
            .collect();

        let d = config.feature_dim;
        let mut clean = vec![vec![0.0; d]; k];
        let mut categories = vec![BACKGROUND.to_string(); k];
        for o in &objects {
            clean[o.region] = signal_row(o, d);
            categories[o.region] = TAXONOMY[o.category].name.to_string();
        }
        let noisy = |rng: &mut rand_chacha::ChaCha8Rng| -> Tensor {
            let data: Vec<f64> = clean
                .iter()
                .flatten()
                .map(|&x| if config.noise == 0.0 { x } else { x + noise.sample(rng) })
                .collect();
            Tensor::new(vec![k, d], data).expect("shape matches data")
        };
        let v = noisy(&mut rng);
        let v_conv = noisy(&mut rng);
        let (tokens, grounding) = caption(&objects);
        out.push(SceneRecord {
            id: id as u64,
            regions: RegionFeatures::new(v, v_conv)?,
            categories,
            tokens,
            grounding,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    Standard,
    Novel,
    Robust,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Standard => "standard",
            SplitMode::Novel => "novel",
            SplitMode::Robust => "robust",
        })
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(SplitMode::Standard),
            "novel" => Ok(SplitMode::Novel),
            "robust" => Ok(SplitMode::Robust),
            other => Err(Error::Config(format!("unknown split mode '{other}' (standard|novel|robust)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub mode: SplitMode,
    /// Categories kept out of training captions in novel mode.
    pub excluded: Vec<String>,
    /// Category pair never seen together in training in robust mode.
    pub held_out_pair: (String, String),
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            mode: SplitMode::Standard,
            excluded: vec!["zebra".into()],
            held_out_pair: ("dog".into(), "couch".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<SceneRecord>,
    pub val: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

fn lookup(name: &str) -> Result<usize> {
    category_index(name).ok_or_else(|| Error::Config(format!("unknown category '{name}'")))
}

/// Words a training caption may not contain in novel mode.
pub fn excluded_words(cfg: &SplitConfig) -> Result<BTreeSet<&'static str>> {
    let mut words = BTreeSet::new();
    for name in &cfg.excluded {
        words.extend(category_words(lookup(name)?));
    }
    Ok(words)
}

fn standard(records: Vec<SceneRecord>, rng: &mut impl Rng) -> Splits {
    let mut records = records;
    records.shuffle(rng);
    let n = records.len();
    let n_train = (n * 8).div_ceil(10);
    let n_val = (n - n_train) / 2;
    let test = records.split_off(n_train + n_val);
    let val = records.split_off(n_train);
    Splits { train: records, val, test }
}

/// Partitions a corpus. Held-out scenes in novel and robust modes are dealt
/// alternately into val and test, after the remaining scenes are split
/// 80/10/10.
pub fn split_corpus(records: &[SceneRecord], cfg: &SplitConfig, seed: u64) -> Result<Splits> {
    if records.is_empty() {
        return Err(Error::Config("cannot split an empty corpus".into()));
    }
    let mut rng = rng_for(seed, "split");
    let held_out: Box<dyn Fn(&SceneRecord) -> bool> = match cfg.mode {
        SplitMode::Standard => Box::new(|_| false),
        SplitMode::Novel => {
            if cfg.excluded.is_empty() {
                return Err(Error::Config("novel split needs at least one excluded category".into()));
            }
            let words = excluded_words(cfg)?;
            Box::new(move |r: &SceneRecord| r.tokens.iter().any(|t| words.contains(t.as_str())))
        }
        SplitMode::Robust => {
            let a = lookup(&cfg.held_out_pair.0)?;
            let b = lookup(&cfg.held_out_pair.1)?;
            if a == b {
                return Err(Error::Config("robust split needs two distinct categories".into()));
            }
            Box::new(move |r: &SceneRecord| {
                let cats = r.object_categories();
                cats.contains(&a) && cats.contains(&b)
            })
        }
    };
    let (held, kept): (Vec<SceneRecord>, Vec<SceneRecord>) = records.iter().cloned().partition(|r| held_out(r));
    if cfg.mode != SplitMode::Standard && held.is_empty() {
        return Err(Error::Config(format!("{} split: no scene satisfies the hold-out constraint", cfg.mode)));
    }
    if kept.is_empty() {
        return Err(Error::Config(format!(
            "{} split: every scene is held out, leaving no training data",
            cfg.mode
        )));
    }
    let mut splits = standard(kept, &mut rng);
    for (i, r) in held.into_iter().enumerate() {
        if i % 2 == 0 {
            splits.val.push(r);
        } else {
            splits.test.push(r);
        }
    }
    if splits.train.is_empty() {
        return Err(Error::Config("split left the training set empty".into()));
    }
    Ok(splits)
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: u64,
    k: usize,
    features: Vec<Vec<f64>>,
    conv_features: Vec<Vec<f64>>,
    categories: Vec<String>,
    tokens: Vec<String>,
    /// `null` for textual tokens, `[region, plural, sub-category]` otherwise.
    grounding: Vec<Option<(usize, u8, usize)>>,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(<[f64]>::to_vec).collect()
}

fn matrix_of(rows: &[Vec<f64>], k: usize, what: &str) -> std::result::Result<Tensor, String> {
    if rows.len() != k {
        return Err(format!("{what} has {} rows but k = {k}", rows.len()));
    }
    let d = rows.first().map_or(0, Vec::len);
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(format!("{what} rows are empty or ragged"));
    }
    Tensor::new(vec![k, d], rows.concat()).map_err(|e| e.to_string())
}

impl From<&SceneRecord> for RecordLine {
    fn from(r: &SceneRecord) -> Self {
        RecordLine {
            id: r.id,
            k: r.k(),
            features: rows_of(r.regions.v()),
            conv_features: rows_of(r.regions.v_conv()),
            categories: r.categories.clone(),
            tokens: r.tokens.clone(),
            grounding: r
                .grounding
                .iter()
                .map(|g| match *g {
                    Grounding::Textual => None,
                    Grounding::Visual { region, plural, subcategory } => Some((region, plural as u8, subcategory)),
                })
                .collect(),
        }
    }
}

impl TryFrom<RecordLine> for SceneRecord {
    type Error = String;

    fn try_from(l: RecordLine) -> std::result::Result<Self, String> {
        let v = matrix_of(&l.features, l.k, "features")?;
        let v_conv = matrix_of(&l.conv_features, l.k, "conv_features")?;
        let regions = RegionFeatures::new(v, v_conv).map_err(|e| e.to_string())?;
        let grounding = l
            .grounding
            .into_iter()
            .map(|g| match g {
                None => Ok(Grounding::Textual),
                Some((region, plural, subcategory)) if plural <= 1 => Ok(Grounding::Visual {
                    region,
                    plural: plural == 1,
                    subcategory,
                }),
                Some((_, p, _)) => Err(format!("plurality flag must be 0 or 1, got {p}")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let rec = SceneRecord {
            id: l.id,
            regions,
            categories: l.categories,
            tokens: l.tokens,
            grounding,
        };
        rec.validate().map_err(|e| e.to_string())?;
        Ok(rec)
    }
}

pub fn dataset_to_string(records: &[SceneRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&RecordLine::from(r)).expect("record serialises"));
        out.push('\n');
    }
    out
}

pub fn parse_dataset(reader: impl BufRead) -> Result<Vec<SceneRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(SceneRecord::try_from(parsed).map_err(|msg| Error::Parse { line: i + 1, msg })?);
    }
    Ok(out)
}

pub fn write_dataset(records: &[SceneRecord], path: &Path) -> Result<()> {
    write_atomic(path, dataset_to_string(records).as_bytes())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    parse_dataset(BufReader::new(file))
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: IndexMap<String, ()>,
}

impl Vocab {
    pub const BOS: usize = 0;
    pub const EOS: usize = 1;
    pub const UNK: usize = 2;

    /// Reserved tokens first, the rest sorted. Duplicates are dropped.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let rest: BTreeSet<&str> = tokens.into_iter().filter(|t| ![BOS, EOS, UNK].contains(t)).collect();
        let tokens = [BOS, EOS, UNK]
            .into_iter()
            .chain(rest)
            .map(|t| (t.to_string(), ()))
            .collect();
        Vocab { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.tokens.get_index_of(token)
    }

    /// Index of `token`, falling back to UNK.
    pub fn index_or_unk(&self, token: &str) -> usize {
        self.index(token).unwrap_or(Self::UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get_index(index).map(|(t, _)| t.as_str())
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens.keys().map(String::as_str)
    }

    /// Vocabulary rows of the singular sub-category words, in sub-category
    /// order.
    pub fn subcategory_rows(&self) -> Result<Vec<usize>> {
        (0..NUM_SUBCATEGORIES)
            .map(|s| {
                let w = subcategory_word(s, false);
                self.index(w)
                    .ok_or_else(|| Error::Config(format!("vocabulary lacks sub-category word '{w}'")))
            })
            .collect()
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in self.tokens() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = IndexMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("invalid token {line:?}"),
                });
            }
            if tokens.insert(line.to_string(), ()).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate token '{line}'"),
                });
            }
        }
        let v = Vocab { tokens };
        for (want, idx) in [(BOS, Self::BOS), (EOS, Self::EOS), (UNK, Self::UNK)] {
            if v.token(idx) != Some(want) {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("expected reserved token {want}"),
                });
            }
        }
        Ok(v)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Vocabulary over every caption token plus every object word form, so that
/// categories absent from a split are still expressible.
pub fn build_vocab(records: &[SceneRecord]) -> Vocab {
    let mut words: Vec<&str> = (0..NUM_CATEGORIES).flat_map(category_words).collect();
    words.extend(records.iter().flat_map(|r| r.tokens.iter().map(String::as_str)));
    Vocab::from_tokens(words)
}
