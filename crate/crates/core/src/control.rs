//! Control levels: bucketing schemes for sentence length, tense, and
//! quality, plus the shared level-embedding arithmetic that conditions the
//! decoder.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What attribute a scheme buckets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemeKind {
    LengthCoarse,
    LengthFine,
    Tense,
    Quality,
    Custom,
}

/// Half-open interval `[lo, hi)` mapped to one level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    #[serde(with = "bound_serde")]
    pub lo: f64,
    #[serde(with = "bound_serde")]
    pub hi: f64,
}

/// JSON has no infinities; open ends encode as the strings "inf"/"-inf".
mod bound_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(serde::Serialize, Deserialize)]
    #[serde(untagged)]
    enum Bound {
        Finite(f64),
        Open(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Bound::deserialize(d)? {
            Bound::Finite(v) => Ok(v),
            Bound::Open(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("bad bound {other:?}"))),
            },
        }
    }
}

/// An ordered, gap-free bucketing of an attribute into contiguous levels,
/// plus this scheme's offset into the shared embedding matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelScheme {
    pub kind: SchemeKind,
    pub name: String,
    pub buckets: Vec<Bucket>,
    pub level_offset: usize,
}

impl LevelScheme {
    fn from_edges(kind: SchemeKind, name: &str, edges: &[f64]) -> Self {
        let buckets = edges
            .windows(2)
            .map(|w| Bucket { lo: w[0], hi: w[1] })
            .collect();
        LevelScheme {
            kind,
            name: name.to_string(),
            buckets,
            level_offset: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    /// The unique level whose bucket contains `value`.
    pub fn bucket_of(&self, value: f64) -> Option<usize> {
        self.buckets
            .iter()
            .position(|b| value >= b.lo && value < b.hi)
    }

    /// Parse a custom scheme file: one `level <int> : <lo> <= x < <hi>`
    /// line per level, in level order. `inf`/`-inf` mark open ends.
    pub fn from_bucket_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut buckets = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse = |msg: &str| Error::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let rest = line
                .strip_prefix("level")
                .ok_or_else(|| parse("expected `level <int> : <lo> <= x < <hi>`"))?;
            let (idx_part, range_part) = rest
                .split_once(':')
                .ok_or_else(|| parse("missing `:` separator"))?;
            let idx: usize = idx_part
                .trim()
                .parse()
                .map_err(|_| parse("bad level index"))?;
            if idx != buckets.len() {
                return Err(parse(&format!(
                    "level {idx} out of order, expected {}",
                    buckets.len()
                )));
            }
            let (lo_part, rest2) = range_part
                .split_once("<=")
                .ok_or_else(|| parse("missing `<=`"))?;
            let (x_part, hi_part) = rest2
                .split_once('<')
                .ok_or_else(|| parse("missing `< <hi>`"))?;
            if x_part.trim() != "x" {
                return Err(parse("expected `x` between bounds"));
            }
            let lo = parse_bound(lo_part.trim()).ok_or_else(|| parse("bad lower bound"))?;
            let hi = parse_bound(hi_part.trim()).ok_or_else(|| parse("bad upper bound"))?;
            if hi <= lo {
                return Err(parse("empty bucket"));
            }
            if let Some(prev) = buckets.last() {
                let prev: &Bucket = prev;
                if (prev.hi - lo).abs() > 0.0 {
                    return Err(parse("buckets must tile the domain without gaps"));
                }
            }
            buckets.push(Bucket { lo, hi });
        }
        if buckets.is_empty() {
            return Err(Error::Parse {
                line: 0,
                msg: "scheme file has no levels".to_string(),
            });
        }
        Ok(LevelScheme {
            kind: SchemeKind::Custom,
            name: path.display().to_string(),
            buckets,
            level_offset: 0,
        })
    }
}

fn parse_bound(s: &str) -> Option<f64> {
    match s {
        "inf" | "+inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

/// Length levels 0..5: ≤8, =9, =10, =11, ≥12.
pub fn length_coarse() -> LevelScheme {
    LevelScheme::from_edges(
        SchemeKind::LengthCoarse,
        "length-coarse",
        &[0.0, 9.0, 10.0, 11.0, 12.0, f64::INFINITY],
    )
}

/// Length levels 0..10: <7, one level per length 7..=14, >14.
pub fn length_fine() -> LevelScheme {
    LevelScheme::from_edges(
        SchemeKind::LengthFine,
        "length-fine",
        &[
            0.0,
            7.0,
            8.0,
            9.0,
            10.0,
            11.0,
            12.0,
            13.0,
            14.0,
            15.0,
            f64::INFINITY,
        ],
    )
}

pub const TENSE_LEVELS: [&str; 5] = ["no-v", "be-v", "v-ing", "v", "v-ed"];

/// Tense categories as unit buckets over the category index.
pub fn tense_scheme() -> LevelScheme {
    LevelScheme::from_edges(SchemeKind::Tense, "tense", &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
}

/// Quality levels for sampled captions, 5-level variant.
pub fn quality_updown_5() -> LevelScheme {
    LevelScheme::from_edges(
        SchemeKind::Quality,
        "quality-updown-5",
        &[0.0, 0.5, 0.9, 1.3, 1.7, f64::INFINITY],
    )
}

/// Quality levels for sampled captions, 3-level variant.
pub fn quality_transformer_3() -> LevelScheme {
    LevelScheme::from_edges(
        SchemeKind::Quality,
        "quality-transformer-3",
        &[0.0, 0.7, 1.3, f64::INFINITY],
    )
}

/// Quality levels for ground-truth captions, 5-level variant.
pub fn quality_gt_5() -> LevelScheme {
    LevelScheme::from_edges(
        SchemeKind::Quality,
        "quality-gt-5",
        &[0.0, 0.375, 0.625, 0.875, 1.25, f64::INFINITY],
    )
}

/// Quality levels for ground-truth captions, 3-level variant.
pub fn quality_gt_3() -> LevelScheme {
    LevelScheme::from_edges(
        SchemeKind::Quality,
        "quality-gt-3",
        &[0.0, 0.375, 0.625, f64::INFINITY],
    )
}

/// Look up a preset by its public name, or load a custom bucket file.
pub fn scheme_by_name(name: &str) -> Result<LevelScheme> {
    match name {
        "length-coarse" => Ok(length_coarse()),
        "length-fine" => Ok(length_fine()),
        "tense" => Ok(tense_scheme()),
        "quality-updown-5" => Ok(quality_updown_5()),
        "quality-transformer-3" => Ok(quality_transformer_3()),
        "quality-gt-5" => Ok(quality_gt_5()),
        "quality-gt-3" => Ok(quality_gt_3()),
        other => {
            let path = Path::new(other);
            if path.is_file() {
                LevelScheme::from_bucket_file(path)
            } else {
                Err(Error::Config(format!("unknown scheme {other:?}")))
            }
        }
    }
}

/// Word category used by the tense annotator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WordTag {
    #[serde(rename = "BE")]
    Be,
    #[serde(rename = "VERB_BASE")]
    VerbBase,
    #[serde(rename = "VERB_ING")]
    VerbIng,
    #[serde(rename = "VERB_ED")]
    VerbEd,
    #[serde(rename = "OTHER")]
    Other,
}

impl WordTag {
    pub fn is_verbish(self) -> bool {
        !matches!(self, WordTag::Other)
    }
}

/// Per-token-id tags covering the whole vocabulary.
#[derive(Clone, Debug)]
pub struct TagMap {
    tags: Vec<WordTag>,
    token_names: Vec<String>,
}

impl TagMap {
    pub fn new(tags: Vec<WordTag>, token_names: Vec<String>) -> Self {
        debug_assert_eq!(tags.len(), token_names.len());
        TagMap { tags, token_names }
    }

    pub fn tag(&self, token: u32) -> Result<WordTag> {
        self.tags
            .get(token as usize)
            .copied()
            .ok_or_else(|| Error::UnknownToken(format!("id {token}")))
    }

    pub fn token_name(&self, token: u32) -> &str {
        self.token_names
            .get(token as usize)
            .map(|s| s.as_str())
            .unwrap_or("<unk>")
    }

    /// String-keyed view, e.g. for serialization.
    pub fn by_name(&self) -> BTreeMap<String, WordTag> {
        self.token_names
            .iter()
            .cloned()
            .zip(self.tags.iter().copied())
            .collect()
    }
}

/// Tense classification over a caption's tokens:
/// no verb-like token at all → `no-v`; a BE token followed anywhere later
/// by a participle → `be-v`; otherwise the first VERB_* token decides, and
/// a bare BE with no participle counts as a present-tense verb.
pub fn tense_level(caption: &[u32], tags: &TagMap) -> Result<usize> {
    let mut saw_verbish = false;
    let mut saw_be = false;
    let mut be_then_participle = false;
    let mut first_verb: Option<WordTag> = None;
    for &tok in caption {
        let tag = tags.tag(tok).map_err(|_| {
            Error::UnknownToken(format!("id {tok} (not covered by the tag map)"))
        })?;
        match tag {
            WordTag::Other => {}
            WordTag::Be => {
                saw_verbish = true;
                saw_be = true;
            }
            WordTag::VerbIng | WordTag::VerbEd => {
                saw_verbish = true;
                if saw_be {
                    be_then_participle = true;
                }
                first_verb.get_or_insert(tag);
            }
            WordTag::VerbBase => {
                saw_verbish = true;
                first_verb.get_or_insert(tag);
            }
        }
    }
    Ok(if !saw_verbish {
        0
    } else if be_then_participle {
        1
    } else {
        match first_verb {
            Some(WordTag::VerbIng) => 2,
            Some(WordTag::VerbEd) => 4,
            _ => 3,
        }
    })
}

/// Length level of a caption with `caption_len` tokens (BOS/EOS excluded).
pub fn length_level(caption_len: usize, scheme: &LevelScheme) -> Result<usize> {
    if caption_len == 0 {
        return Err(Error::InvalidCaption(
            "caption has no tokens".to_string(),
        ));
    }
    scheme.bucket_of(caption_len as f64).ok_or_else(|| {
        Error::Config(format!(
            "length {caption_len} not covered by scheme {}",
            scheme.name
        ))
    })
}

/// Quality level of a CIDEr-D score under the given threshold column.
pub fn quality_level(score: f64, scheme: &LevelScheme) -> Result<usize> {
    debug_assert!(score >= 0.0, "quality scores are nonnegative");
    scheme.bucket_of(score.max(0.0)).ok_or_else(|| {
        Error::Config(format!(
            "score {score} not covered by scheme {}",
            scheme.name
        ))
    })
}

/// Which attributes a run controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlTask {
    Length,
    Tense,
    LengthTense,
    Quality,
    /// No control signal at all; the baseline decoder configuration.
    Uncontrolled,
}

impl ControlTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "length" => Ok(ControlTask::Length),
            "tense" => Ok(ControlTask::Tense),
            "length+tense" => Ok(ControlTask::LengthTense),
            "quality" => Ok(ControlTask::Quality),
            "none" => Ok(ControlTask::Uncontrolled),
            other => Err(Error::Config(format!("unknown control task {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ControlTask::Length => "length",
            ControlTask::Tense => "tense",
            ControlTask::LengthTense => "length+tense",
            ControlTask::Quality => "quality",
            ControlTask::Uncontrolled => "none",
        }
    }
}

/// A tuple of requested or annotated levels. At least one component is
/// present unless the task is uncontrolled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ControlSignal {
    pub len_level: Option<usize>,
    pub tense_level: Option<usize>,
    pub quality_level: Option<usize>,
}

impl ControlSignal {
    pub fn length(level: usize) -> Self {
        ControlSignal {
            len_level: Some(level),
            ..Default::default()
        }
    }

    pub fn tense(level: usize) -> Self {
        ControlSignal {
            tense_level: Some(level),
            ..Default::default()
        }
    }

    pub fn quality(level: usize) -> Self {
        ControlSignal {
            quality_level: Some(level),
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len_level.is_none() && self.tense_level.is_none() && self.quality_level.is_none()
    }

    pub fn same_components(&self, other: &ControlSignal) -> bool {
        self.len_level.is_some() == other.len_level.is_some()
            && self.tense_level.is_some() == other.tense_level.is_some()
            && self.quality_level.is_some() == other.quality_level.is_some()
    }

    /// Parse the level-spec grammar `len=<int>[,tense=<int>][,quality=<int>]`
    /// (components may appear in any order, each at most once).
    pub fn parse_spec(spec: &str) -> Result<Self> {
        let mut signal = ControlSignal::default();
        for part in spec.split(',') {
            let (key, value) = part.trim().split_once('=').ok_or_else(|| {
                Error::Config(format!("bad level-spec component {part:?}, want key=<int>"))
            })?;
            let level: usize = value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad level value {value:?}")))?;
            let slot = match key.trim() {
                "len" => &mut signal.len_level,
                "tense" => &mut signal.tense_level,
                "quality" => &mut signal.quality_level,
                other => {
                    return Err(Error::Config(format!(
                        "unknown level-spec key {other:?}"
                    )))
                }
            };
            if slot.replace(level).is_some() {
                return Err(Error::Config(format!("duplicate component {key:?}")));
            }
        }
        if signal.is_empty() {
            return Err(Error::Config("level-spec has no components".to_string()));
        }
        Ok(signal)
    }
}

impl fmt::Display for ControlSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        let mut put = |f: &mut fmt::Formatter<'_>, key: &str, v: Option<usize>| {
            if let Some(level) = v {
                if !first {
                    write!(f, ",").ok();
                }
                write!(f, "{key}={level}").ok();
                first = false;
            }
        };
        put(f, "len", self.len_level);
        put(f, "tense", self.tense_level);
        put(f, "quality", self.quality_level);
        if first {
            write!(f, "none")?;
        }
        Ok(())
    }
}

/// The schemes active for a task, with offsets assigned into one shared
/// embedding index space (length block first, then tense, then quality).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchemeSet {
    pub task: ControlTask,
    pub length: Option<LevelScheme>,
    pub tense: Option<LevelScheme>,
    pub quality_gen: Option<LevelScheme>,
    pub quality_gt: Option<LevelScheme>,
}

impl SchemeSet {
    pub fn new(
        task: ControlTask,
        mut length: Option<LevelScheme>,
        mut tense: Option<LevelScheme>,
        quality: Option<(LevelScheme, LevelScheme)>,
    ) -> Result<Self> {
        let mut offset = 0;
        if let Some(s) = length.as_mut() {
            s.level_offset = offset;
            offset += s.len();
        }
        if let Some(s) = tense.as_mut() {
            s.level_offset = offset;
            offset += s.len();
        }
        let (quality_gen, quality_gt) = match quality {
            Some((mut gen, mut gt)) => {
                if gen.len() != gt.len() {
                    return Err(Error::Config(format!(
                        "quality scheme pair sizes differ: {} vs {}",
                        gen.len(),
                        gt.len()
                    )));
                }
                gen.level_offset = offset;
                gt.level_offset = offset;
                (Some(gen), Some(gt))
            }
            None => (None, None),
        };
        Ok(SchemeSet {
            task,
            length,
            tense,
            quality_gen,
            quality_gt,
        })
    }

    /// Default scheme selection for a task.
    pub fn for_task(task: ControlTask) -> Result<Self> {
        match task {
            ControlTask::Length => SchemeSet::new(task, Some(length_coarse()), None, None),
            ControlTask::Tense => SchemeSet::new(task, None, Some(tense_scheme()), None),
            ControlTask::LengthTense => {
                SchemeSet::new(task, Some(length_coarse()), Some(tense_scheme()), None)
            }
            ControlTask::Quality => {
                SchemeSet::new(task, None, None, Some((quality_updown_5(), quality_gt_5())))
            }
            ControlTask::Uncontrolled => SchemeSet::new(task, None, None, None),
        }
    }

    /// Total number of embedding rows spanned by the active schemes.
    pub fn total_levels(&self) -> usize {
        self.length.as_ref().map_or(0, LevelScheme::len)
            + self.tense.as_ref().map_or(0, LevelScheme::len)
            + self.quality_gen.as_ref().map_or(0, LevelScheme::len)
    }

    /// Embedding row indices for each present component of a signal.
    pub fn embedding_rows(&self, signal: &ControlSignal) -> Result<Vec<usize>> {
        let mut rows = Vec::new();
        let mut push = |level: Option<usize>,
                        scheme: Option<&LevelScheme>,
                        component: &'static str|
         -> Result<()> {
            if let Some(level) = level {
                let scheme = scheme.ok_or_else(|| {
                    Error::Config(format!(
                        "signal has a {component} level but the task does not control {component}"
                    ))
                })?;
                if level >= scheme.len() {
                    return Err(Error::LevelOutOfRange {
                        component,
                        level,
                        size: scheme.len(),
                    });
                }
                rows.push(scheme.level_offset + level);
            }
            Ok(())
        };
        push(signal.len_level, self.length.as_ref(), "length")?;
        push(signal.tense_level, self.tense.as_ref(), "tense")?;
        push(signal.quality_level, self.quality_gen.as_ref(), "quality")?;
        Ok(rows)
    }

    pub fn scheme_names(&self) -> Vec<&str> {
        let mut names = Vec::new();
        if let Some(s) = &self.length {
            names.push(s.name.as_str());
        }
        if let Some(s) = &self.tense {
            names.push(s.name.as_str());
        }
        if let Some(s) = &self.quality_gen {
            names.push(s.name.as_str());
        }
        names
    }
}

/// e_β as the sum of the W rows selected by the signal's components.
pub fn embed_control(
    signal: &ControlSignal,
    w: &Tensor,
    schemes: &SchemeSet,
) -> Result<Vec<f64>> {
    let d = w.cols();
    let mut out = vec![0.0; d];
    for row in schemes.embedding_rows(signal)? {
        if row >= w.rows() {
            return Err(Error::IndexOutOfRange {
                op: "embed_control",
                index: row,
                bound: w.rows(),
            });
        }
        for (o, v) in out.iter_mut().zip(w.row_slice(row)) {
            *o += v;
        }
    }
    Ok(out)
}

/// Leave-one-out quality score of a ground-truth caption: CIDEr-D of
/// reference `ref_index` against the image's remaining references, with the
/// evaluation-convention length penalty.
pub fn gt_quality_score(
    ref_index: usize,
    refs: &[Vec<u32>],
    stats: &crate::rewards::NgramStats,
) -> Result<f64> {
    if refs.len() < 2 {
        return Err(Error::SingleReference(refs.len()));
    }
    if ref_index >= refs.len() {
        return Err(Error::IndexOutOfRange {
            op: "gt_quality_score",
            index: ref_index,
            bound: refs.len(),
        });
    }
    let others: Vec<Vec<u32>> = refs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != ref_index)
        .map(|(_, r)| r.clone())
        .collect();
    Ok(crate::rewards::cider_d(
        &refs[ref_index],
        &others,
        stats,
        &crate::rewards::CiderOpts::evaluation(),
    ))
}

/// Scoring context for the quality component: corpus statistics plus the
/// CIDEr-D options used when scoring sampled captions.
#[derive(Clone, Debug)]
pub struct QualityContext {
    pub stats: crate::rewards::NgramStats,
    pub sample_opts: crate::rewards::CiderOpts,
}

/// Derives control signals from captions: ground-truth references during
/// cross-entropy training, and the model's own samples during
/// self-annotated training. Pure given its schemes and statistics.
#[derive(Clone, Debug)]
pub struct Annotator {
    pub schemes: SchemeSet,
    pub tags: TagMap,
    pub quality: Option<QualityContext>,
}

impl Annotator {
    pub fn new(schemes: SchemeSet, tags: TagMap) -> Self {
        Annotator {
            schemes,
            tags,
            quality: None,
        }
    }

    pub fn with_quality(mut self, ctx: QualityContext) -> Self {
        self.quality = Some(ctx);
        self
    }

    /// Length and tense components of the active task for a caption
    /// (tokens exclude BOS/EOS).
    pub fn annotate_structural(&self, tokens: &[u32]) -> Result<ControlSignal> {
        let mut signal = ControlSignal::default();
        if let Some(scheme) = &self.schemes.length {
            // Empty samples bucket as the shortest level.
            signal.len_level = Some(length_level(tokens.len().max(1), scheme)?);
        }
        if let Some(scheme) = &self.schemes.tense {
            let level = tense_level(tokens, &self.tags)?;
            debug_assert!(level < scheme.len());
            signal.tense_level = Some(level);
        }
        Ok(signal)
    }

    /// Annotate a sampled caption. The quality component scores the sample
    /// against all of the image's references under the reward convention
    /// and buckets with the generated-caption thresholds; the raw score is
    /// returned alongside.
    pub fn annotate_sample(
        &self,
        tokens: &[u32],
        refs: &[Vec<u32>],
    ) -> Result<(ControlSignal, Option<f64>)> {
        let mut signal = self.annotate_structural(tokens)?;
        let mut score = None;
        if let Some(scheme) = &self.schemes.quality_gen {
            let ctx = self.quality.as_ref().ok_or_else(|| {
                Error::Config("quality task needs n-gram statistics".to_string())
            })?;
            let s = crate::rewards::cider_d(tokens, refs, &ctx.stats, &ctx.sample_opts);
            signal.quality_level = Some(quality_level(s, scheme)?);
            score = Some(s);
        }
        Ok((signal, score))
    }

    /// Annotate a ground-truth reference. The quality component uses the
    /// leave-one-out score bucketed with the ground-truth thresholds.
    pub fn annotate_reference(&self, refs: &[Vec<u32>], ref_index: usize) -> Result<ControlSignal> {
        let mut signal = self.annotate_structural(&refs[ref_index])?;
        if let Some(scheme) = &self.schemes.quality_gt {
            let ctx = self.quality.as_ref().ok_or_else(|| {
                Error::Config("quality task needs n-gram statistics".to_string())
            })?;
            let s = gt_quality_score(ref_index, refs, &ctx.stats)?;
            signal.quality_level = Some(quality_level(s, scheme)?);
        }
        Ok(signal)
    }

    /// No components at all (the uncontrolled baseline).
    pub fn is_uncontrolled(&self) -> bool {
        self.schemes.task == ControlTask::Uncontrolled
    }
}

/// Sinusoidal positional term for optional attention-style decoders.
pub fn positional_embedding(position: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let angle = position as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Decoder input vector: word embedding plus control embedding, plus the
/// positional term when a position is supplied.
pub fn input_embedding(
    word_id: u32,
    e_beta: &[f64],
    embeddings: &Tensor,
    position: Option<usize>,
) -> Result<Vec<f64>> {
    if word_id as usize >= embeddings.rows() {
        return Err(Error::IndexOutOfRange {
            op: "input_embedding",
            index: word_id as usize,
            bound: embeddings.rows(),
        });
    }
    let mut out: Vec<f64> = embeddings.row_slice(word_id as usize).to_vec();
    if e_beta.len() != out.len() {
        return Err(Error::ShapeMismatch {
            op: "input_embedding",
            lhs: vec![1, out.len()],
            rhs: vec![1, e_beta.len()],
        });
    }
    for (o, b) in out.iter_mut().zip(e_beta) {
        *o += b;
    }
    if let Some(pos) = position {
        let pe = positional_embedding(pos, out.len());
        for (o, p) in out.iter_mut().zip(pe) {
            *o += p;
        }
    }
    Ok(out)
}
