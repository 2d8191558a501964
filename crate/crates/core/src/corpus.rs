//! Synthetic controllable-caption corpus: template-based generation,
//! line-delimited corpus files, and deterministic splits.
//!
//! Each synthetic image is a latent scene (subject, verb, object, place,
//! color). Features are a one-hot encoding of the scene factors plus
//! Gaussian noise; references realize the same scene at scheduled tense
//! categories and lengths so every control level is reachable.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::control::{TagMap, WordTag};
use crate::error::{Error, Result};
use crate::util::{fnv1a, stream_rng};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const RESERVED: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Token ↔ id bijection with reserved PAD/BOS/EOS ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Build from the real (non-reserved) token set; ids are assigned in
    /// sorted order after the reserved block, so construction is
    /// deterministic for a given token set.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let mut sorted: Vec<String> = tokens.into_iter().collect();
        sorted.sort();
        sorted.dedup();
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for t in sorted {
            if RESERVED.contains(&t.as_str()) {
                return Err(Error::Config(format!(
                    "token {t:?} collides with a reserved symbol"
                )));
            }
            all.push(t);
        }
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { tokens: all, index })
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One synthetic image: an id, a feature vector, and k reference captions
/// stored as token ids (BOS/EOS excluded).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageInstance {
    pub id: String,
    pub feature: Vec<f64>,
    pub refs: Vec<Vec<u32>>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub tags: TagMap,
    pub images: Vec<ImageInstance>,
    pub feature_dim: usize,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab
            && self.feature_dim == other.feature_dim
            && self.images == other.images
            && self.tags.by_name() == other.tags.by_name()
    }
}

/// Deterministic 90/5/5 split assignment by image-id hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn of_id(id: &str) -> Split {
        match fnv1a(id.as_bytes()) % 100 {
            0..=89 => Split::Train,
            90..=94 => Split::Val,
            _ => Split::Test,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl Corpus {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.images
            .iter()
            .enumerate()
            .filter(|(_, img)| Split::of_id(&img.id) == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn image_by_id(&self, id: &str) -> Option<&ImageInstance> {
        self.images.iter().find(|img| img.id == id)
    }

    /// Stable fingerprint of the vocabulary and its tags; checkpoints embed
    /// this so a model is never applied to a different token space.
    pub fn vocab_hash(&self) -> u64 {
        let mut bytes = Vec::new();
        for (i, token) in self.vocab.tokens().iter().enumerate() {
            bytes.extend_from_slice(token.as_bytes());
            bytes.push(0);
            let tag = self.tags.tag(i as u32).unwrap_or(WordTag::Other);
            bytes.push(tag as u8);
            bytes.push(0xff);
        }
        fnv1a(&bytes)
    }

    pub fn tokens_to_string(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.vocab.token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

// ── Synthetic generation ───────────────────────────────────────────────

const SUBJECTS: [&str; 8] = [
    "dog", "cat", "man", "woman", "boy", "girl", "horse", "bird",
];
// (3rd person, present participle, past) per verb lemma.
const VERBS: [(&str, &str, &str); 6] = [
    ("holds", "holding", "held"),
    ("carries", "carrying", "carried"),
    ("chases", "chasing", "chased"),
    ("watches", "watching", "watched"),
    ("pulls", "pulling", "pulled"),
    ("pushes", "pushing", "pushed"),
];
const OBJECTS: [&str; 6] = ["frisbee", "ball", "kite", "stick", "bag", "toy"];
const PLACES: [&str; 6] = ["park", "field", "yard", "beach", "street", "station"];
const COLORS: [&str; 4] = ["red", "blue", "brown", "white"];
const SIZES: [&str; 2] = ["small", "big"];
const FUNCTION_WORDS: [&str; 8] = ["a", "the", "in", "with", "near", "at", "night", "is"];

/// One-hot block width of the scene encoding.
pub const SCENE_DIMS: usize = 8 + 6 + 6 + 6 + 4;

#[derive(Clone, Copy, Debug)]
struct Scene {
    subj: usize,
    verb: usize,
    obj: usize,
    place: usize,
    color: usize,
}

impl Scene {
    fn size(&self) -> usize {
        self.subj % 2
    }
    fn color2(&self) -> usize {
        (self.color + 1) % COLORS.len()
    }
    fn obj2(&self) -> usize {
        (self.obj + 1) % OBJECTS.len()
    }

    /// Reference-quality tiers: tier 0 restates the scene faithfully,
    /// tier 1 misnames the object and color, tier 2 misnames everything.
    /// The rotations are deterministic functions of the scene, so every
    /// tier stays predictable from the features, while lower tiers share
    /// fewer n-grams with their siblings and thus bucket into lower
    /// consensus-quality levels.
    fn at_tier(&self, tier: usize) -> Scene {
        match tier {
            0 => *self,
            1 => Scene {
                obj: (self.obj + 3) % OBJECTS.len(),
                color: (self.color + 2) % COLORS.len(),
                ..*self
            },
            _ => Scene {
                subj: (self.subj + 4) % SUBJECTS.len(),
                verb: (self.verb + 3) % VERBS.len(),
                obj: (self.obj + 3) % OBJECTS.len(),
                place: (self.place + 3) % PLACES.len(),
                color: (self.color + 2) % COLORS.len(),
            },
        }
    }
}

fn tier_of_ref(j: usize) -> usize {
    match j % 5 {
        3 => 1,
        4 => 2,
        _ => 0,
    }
}

/// Declared attributes of a generated reference, kept for tests that check
/// the annotators against the templates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaptionAttrs {
    /// Tense category index (no-v, be-v, v-ing, v, v-ed).
    pub tense: usize,
    /// Token count.
    pub length: usize,
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub num_images: usize,
    pub refs_per_image: usize,
    pub seed: u64,
    pub feature_dim: usize,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_images: 500,
            refs_per_image: 5,
            seed: 42,
            feature_dim: 32,
            noise_std: 0.1,
        }
    }
}

/// Extender subset (color, size, place-phrase, night-phrase, near-phrase)
/// whose token costs (1, 1, 3, 2, 4) sum to the requested delta.
fn extenders_for(delta: usize) -> (bool, bool, bool, bool, bool) {
    match delta {
        0 => (false, false, false, false, false),
        1 => (true, false, false, false, false),
        2 => (true, true, false, false, false),
        3 => (false, false, true, false, false),
        4 => (true, false, true, false, false),
        5 => (true, true, true, false, false),
        6 => (true, false, true, true, false),
        7 => (true, true, true, true, false),
        8 => (true, false, true, false, true),
        9 => (true, true, true, false, true),
        10 => (true, false, true, true, true),
        _ => unreachable!("delta {delta} outside template range"),
    }
}

fn skeleton_len(tense: usize) -> usize {
    if tense == 1 {
        6
    } else {
        5
    }
}

/// Deterministic surface realization of a scene at a tense category and an
/// exact token count in 5..=15 (6..=15 for be-v).
fn realize(scene: &Scene, tense: usize, target_len: usize) -> Vec<String> {
    let base = skeleton_len(tense);
    let (c, s, p, n, f) = extenders_for(target_len - base);
    let verb = VERBS[scene.verb];
    let mut toks: Vec<&str> = vec!["a"];
    if c {
        toks.push(COLORS[scene.color]);
    }
    toks.push(SUBJECTS[scene.subj]);
    match tense {
        0 => toks.push("with"),
        1 => {
            toks.push("is");
            toks.push(verb.1);
        }
        2 => toks.push(verb.1),
        3 => toks.push(verb.0),
        4 => toks.push(verb.2),
        _ => unreachable!(),
    }
    toks.push("a");
    if s {
        toks.push(SIZES[scene.size()]);
    }
    toks.push(OBJECTS[scene.obj]);
    if p {
        toks.extend(["in", "the", PLACES[scene.place]]);
    }
    if n {
        toks.extend(["at", "night"]);
    }
    if f {
        toks.extend(["near", "a", COLORS[scene.color2()], OBJECTS[scene.obj2()]]);
    }
    debug_assert_eq!(toks.len(), target_len);
    toks.into_iter().map(str::to_string).collect()
}

/// The full synthetic vocabulary with its word tags.
pub fn synthetic_tag_table() -> BTreeMap<String, WordTag> {
    let mut tags = BTreeMap::new();
    let mut put = |words: &[&str], tag: WordTag| {
        for w in words {
            tags.insert(w.to_string(), tag);
        }
    };
    put(&SUBJECTS, WordTag::Other);
    put(&OBJECTS, WordTag::Other);
    put(&PLACES, WordTag::Other);
    put(&COLORS, WordTag::Other);
    put(&SIZES, WordTag::Other);
    put(&FUNCTION_WORDS, WordTag::Other);
    for (base, ing, ed) in VERBS {
        tags.insert(base.to_string(), WordTag::VerbBase);
        tags.insert(ing.to_string(), WordTag::VerbIng);
        tags.insert(ed.to_string(), WordTag::VerbEd);
    }
    tags.insert("is".to_string(), WordTag::Be);
    tags
}

fn tag_map_for_vocab(vocab: &Vocab, by_name: &BTreeMap<String, WordTag>) -> TagMap {
    let tags = vocab
        .tokens()
        .iter()
        .map(|t| by_name.get(t).copied().unwrap_or(WordTag::Other))
        .collect();
    TagMap::new(tags, vocab.tokens().to_vec())
}

/// Cyclic length schedule covering the full 5..=15 template range.
const LEN_CYCLE: [usize; 11] = [5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15];

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Corpus> {
    Ok(generate_synthetic_with_attrs(cfg)?.0)
}

/// Generate a corpus plus the declared (tense, length) of every reference.
pub fn generate_synthetic_with_attrs(
    cfg: &SynthConfig,
) -> Result<(Corpus, Vec<Vec<CaptionAttrs>>)> {
    if cfg.num_images < 2 {
        return Err(Error::Config(format!(
            "need at least 2 images, got {}",
            cfg.num_images
        )));
    }
    if cfg.refs_per_image == 0 {
        return Err(Error::Config("refs_per_image must be positive".into()));
    }
    if cfg.feature_dim < SCENE_DIMS {
        return Err(Error::Config(format!(
            "feature_dim {} is smaller than the scene encoding ({SCENE_DIMS} dims)",
            cfg.feature_dim
        )));
    }
    let tag_table = synthetic_tag_table();
    let vocab = Vocab::from_tokens(tag_table.keys().cloned())?;
    let tags = tag_map_for_vocab(&vocab, &tag_table);
    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| Error::Config(format!("bad noise_std: {e}")))?;

    let mut images = Vec::with_capacity(cfg.num_images);
    let mut attrs = Vec::with_capacity(cfg.num_images);
    for i in 0..cfg.num_images {
        let mut rng = stream_rng(cfg.seed, &[0x1a6e, i as u64]);
        let scene = Scene {
            subj: rng.random_range(0..SUBJECTS.len()),
            verb: rng.random_range(0..VERBS.len()),
            obj: rng.random_range(0..OBJECTS.len()),
            place: rng.random_range(0..PLACES.len()),
            color: rng.random_range(0..COLORS.len()),
        };
        let mut feature = vec![0.0; cfg.feature_dim];
        let offsets = [0, 8, 14, 20, 26];
        let factors = [scene.subj, scene.verb, scene.obj, scene.place, scene.color];
        for (off, fac) in offsets.iter().zip(factors) {
            feature[off + fac] = 1.0;
        }
        for v in feature.iter_mut() {
            *v += noise.sample(&mut rng);
        }

        let mut refs = Vec::with_capacity(cfg.refs_per_image);
        let mut ref_attrs = Vec::with_capacity(cfg.refs_per_image);
        for j in 0..cfg.refs_per_image {
            let tense = (i + j) % 5;
            let mut target = LEN_CYCLE[(2 * i + 3 * j) % LEN_CYCLE.len()];
            if target < skeleton_len(tense) {
                target = skeleton_len(tense);
            }
            let words = realize(&scene.at_tier(tier_of_ref(j)), tense, target);
            let ids = words
                .iter()
                .map(|w| vocab.id(w).expect("template word in vocab"))
                .collect();
            refs.push(ids);
            ref_attrs.push(CaptionAttrs {
                tense,
                length: target,
            });
        }
        images.push(ImageInstance {
            id: format!("img{i:05}"),
            feature,
            refs,
        });
        attrs.push(ref_attrs);
    }
    Ok((
        Corpus {
            vocab,
            tags,
            images,
            feature_dim: cfg.feature_dim,
        },
        attrs,
    ))
}

// ── Corpus files ───────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    vocab_tags: BTreeMap<String, WordTag>,
}

#[derive(Serialize, Deserialize)]
struct ImageLine {
    id: String,
    feature: Vec<f64>,
    captions: Vec<Vec<String>>,
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = HeaderLine {
        vocab_tags: corpus
            .tags
            .by_name()
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect(),
    };
    serde_json::to_writer(&mut out, &header).map_err(io_err)?;
    out.write_all(b"\n")?;
    for img in &corpus.images {
        let line = ImageLine {
            id: img.id.clone(),
            feature: img.feature.clone(),
            captions: img
                .refs
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|&t| corpus.vocab.token(t).to_string())
                        .collect()
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line).map_err(io_err)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn io_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, first) = lines.next().ok_or(Error::EmptyCorpus)?;
    let first = first?;
    let header: HeaderLine = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("expected a {{\"vocab_tags\": ...}} header: {e}"),
    })?;
    let mut by_name = BTreeMap::new();
    for (token, tag) in header.vocab_tags {
        if RESERVED.contains(&token.as_str()) {
            return Err(Error::Parse {
                line: 1,
                msg: format!("reserved symbol {token:?} may not carry a tag"),
            });
        }
        by_name.insert(token, tag);
    }
    let vocab = Vocab::from_tokens(by_name.keys().cloned())?;
    let tags = tag_map_for_vocab(&vocab, &by_name);

    let mut images = Vec::new();
    let mut feature_dim = None;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ImageLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let dim = *feature_dim.get_or_insert(record.feature.len());
        if record.feature.len() != dim {
            return Err(Error::Parse {
                line: lineno,
                msg: format!(
                    "feature dim {} differs from earlier images ({dim})",
                    record.feature.len()
                ),
            });
        }
        if record.captions.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("image {:?} has no captions", record.id),
            });
        }
        let mut refs = Vec::with_capacity(record.captions.len());
        for caption in &record.captions {
            let mut ids = Vec::with_capacity(caption.len());
            for word in caption {
                let id = vocab
                    .id(word)
                    .ok_or_else(|| Error::UnknownToken(word.clone()))?;
                ids.push(id);
            }
            refs.push(ids);
        }
        images.push(ImageInstance {
            id: record.id,
            feature: record.feature,
            refs,
        });
    }
    if images.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Corpus {
        vocab,
        tags,
        images,
        feature_dim: feature_dim.unwrap_or(0),
    })
}
