//! Reward computation: the CIDEr-D consensus metric over corpus n-gram
//! statistics, the control-alignment reward, and their weighted sum.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::control::{ControlSignal, SchemeSet};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_N: usize = 4;

/// Corpus-level document frequencies: each n-gram (n = 1..=4) counts once
/// per image whose reference set contains it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "StatsDoc", into = "StatsDoc")]
pub struct NgramStats {
    df: HashMap<Vec<u32>, u32>,
    num_images: usize,
}

#[derive(Serialize, Deserialize)]
struct StatsDoc {
    num_images: usize,
    entries: Vec<(Vec<u32>, u32)>,
}

impl From<StatsDoc> for NgramStats {
    fn from(doc: StatsDoc) -> Self {
        NgramStats {
            df: doc.entries.into_iter().collect(),
            num_images: doc.num_images,
        }
    }
}

impl From<NgramStats> for StatsDoc {
    fn from(stats: NgramStats) -> Self {
        let mut entries: Vec<_> = stats.df.into_iter().collect();
        entries.sort();
        StatsDoc {
            num_images: stats.num_images,
            entries,
        }
    }
}

impl NgramStats {
    /// Build from per-image reference sets.
    pub fn from_ref_sets<'a, I>(ref_sets: I) -> Self
    where
        I: IntoIterator<Item = &'a [Vec<u32>]>,
    {
        let mut df: HashMap<Vec<u32>, u32> = HashMap::new();
        let mut num_images = 0;
        for refs in ref_sets {
            num_images += 1;
            let mut seen: HashMap<Vec<u32>, ()> = HashMap::new();
            for r in refs {
                for n in 1..=MAX_N {
                    for g in ngrams(r, n) {
                        seen.entry(g).or_insert(());
                    }
                }
            }
            for (g, ()) in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        NgramStats { df, num_images }
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    pub fn df(&self, gram: &[u32]) -> u32 {
        self.df.get(gram).copied().unwrap_or(0)
    }

    /// idf with the document frequency floored at 1, so unseen n-grams get
    /// the maximum weight ln(num_images).
    pub fn idf(&self, gram: &[u32]) -> f64 {
        (self.num_images as f64 / self.df(gram).max(1) as f64).ln()
    }
}

pub fn build_ngram_stats(corpus: &Corpus) -> NgramStats {
    NgramStats::from_ref_sets(corpus.images.iter().map(|img| img.refs.as_slice()))
}

/// Stats restricted to a subset of corpus images (e.g. the train split).
pub fn build_ngram_stats_subset(corpus: &Corpus, indices: &[usize]) -> NgramStats {
    NgramStats::from_ref_sets(indices.iter().map(|&i| corpus.images[i].refs.as_slice()))
}

fn ngrams(tokens: &[u32], n: usize) -> impl Iterator<Item = Vec<u32>> + '_ {
    tokens.windows(n).map(|w| w.to_vec())
}

fn ngram_counts(tokens: &[u32], n: usize) -> BTreeMap<Vec<u32>, f64> {
    let mut counts = BTreeMap::new();
    for g in ngrams(tokens, n) {
        *counts.entry(g).or_insert(0.0) += 1.0;
    }
    counts
}

/// TF-IDF vectors of a caption, one map per n-gram order, with their
/// norms. Ordered maps keep every summation deterministic.
struct TfIdfVecs {
    maps: Vec<BTreeMap<Vec<u32>, f64>>,
    norms: Vec<f64>,
}

fn tfidf_vectors(tokens: &[u32], stats: &NgramStats) -> TfIdfVecs {
    let mut maps = Vec::with_capacity(MAX_N);
    let mut norms = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        let mut map = ngram_counts(tokens, n);
        for (g, v) in map.iter_mut() {
            *v *= stats.idf(g);
        }
        let norm = map.values().map(|v| v * v).sum::<f64>().sqrt();
        maps.push(map);
        norms.push(norm);
    }
    TfIdfVecs { maps, norms }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CiderOpts {
    pub sigma: f64,
    pub use_length_penalty: bool,
    pub scale: f64,
}

impl CiderOpts {
    pub fn training() -> Self {
        CiderOpts {
            sigma: 6.0,
            use_length_penalty: false,
            scale: 10.0,
        }
    }

    pub fn evaluation() -> Self {
        CiderOpts {
            sigma: 6.0,
            use_length_penalty: true,
            scale: 10.0,
        }
    }
}

impl Default for CiderOpts {
    fn default() -> Self {
        CiderOpts::training()
    }
}

/// Similarity of a candidate vector against one reference vector for each
/// n: clipped numerator min(c_g, r_g)·r_g over the product of norms, with
/// the optional per-reference Gaussian length penalty.
fn sim_per_n(
    cand: &TfIdfVecs,
    rf: &TfIdfVecs,
    cand_len: usize,
    ref_len: usize,
    opts: &CiderOpts,
) -> [f64; MAX_N] {
    let mut vals = [0.0; MAX_N];
    let penalty = if opts.use_length_penalty {
        length_penalty_factor(cand_len, ref_len, opts.sigma)
    } else {
        1.0
    };
    for (n, val) in vals.iter_mut().enumerate() {
        if cand.norms[n] == 0.0 || rf.norms[n] == 0.0 {
            continue;
        }
        let mut dot = 0.0;
        for (g, cv) in &cand.maps[n] {
            if let Some(rv) = rf.maps[n].get(g) {
                dot += cv.min(*rv) * rv;
            }
        }
        *val = dot / (cand.norms[n] * rf.norms[n]) * penalty;
    }
    vals
}

/// The per-reference Gaussian length factor exp(−(l_c−l_r)²/(2σ²)).
pub fn length_penalty_factor(cand_len: usize, ref_len: usize, sigma: f64) -> f64 {
    let delta = cand_len as f64 - ref_len as f64;
    (-(delta * delta) / (2.0 * sigma * sigma)).exp()
}

#[derive(Clone, Copy, Debug)]
pub struct CiderScore {
    pub score: f64,
    /// Set when the candidate was empty; the score is 0 in that case.
    pub empty_candidate: bool,
}

pub fn cider_d_detailed(
    candidate: &[u32],
    refs: &[Vec<u32>],
    stats: &NgramStats,
    opts: &CiderOpts,
) -> CiderScore {
    if candidate.is_empty() {
        return CiderScore {
            score: 0.0,
            empty_candidate: true,
        };
    }
    debug_assert!(!refs.is_empty(), "cider_d needs at least one reference");
    let cand = tfidf_vectors(candidate, stats);
    let mut acc = [0.0; MAX_N];
    for r in refs {
        let rv = tfidf_vectors(r, stats);
        let vals = sim_per_n(&cand, &rv, candidate.len(), r.len(), opts);
        for n in 0..MAX_N {
            acc[n] += vals[n];
        }
    }
    let mean_over_n: f64 = acc.iter().sum::<f64>() / MAX_N as f64;
    CiderScore {
        score: mean_over_n / refs.len() as f64 * opts.scale,
        empty_candidate: false,
    }
}

pub fn cider_d(candidate: &[u32], refs: &[Vec<u32>], stats: &NgramStats, opts: &CiderOpts) -> f64 {
    cider_d_detailed(candidate, refs, stats, opts).score
}

/// Negative normalized embedding distance between the requested and the
/// realized control signal. 0 exactly when every controlled component
/// selects the same embedding row (or rows with equal values).
pub fn alignment_reward(
    signal_in: &ControlSignal,
    signal_self: &ControlSignal,
    w: &Tensor,
    schemes: &SchemeSet,
) -> Result<f64> {
    if !signal_in.same_components(signal_self) {
        return Err(Error::ComponentMismatch(format!(
            "input signal ({signal_in}) vs self signal ({signal_self})"
        )));
    }
    let rows_in = schemes.embedding_rows(signal_in)?;
    let rows_self = schemes.embedding_rows(signal_self)?;
    debug_assert_eq!(rows_in.len(), rows_self.len());
    if rows_in.is_empty() {
        return Ok(0.0);
    }
    let d = w.cols();
    let mut total = 0.0;
    for (ri, rs) in rows_in.iter().zip(&rows_self) {
        let (a, b) = (w.row_slice(*ri), w.row_slice(*rs));
        let dist: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        total += dist;
    }
    Ok(-total / (rows_in.len() as f64 * (d as f64).sqrt()))
}

/// Weighted sum r_cider + λ·r_align.
#[derive(Clone, Copy, Debug)]
pub struct RewardBreakdown {
    pub cider: f64,
    pub align: f64,
    pub total: f64,
}

pub fn combined_reward(cider: f64, align: f64, lambda: f64) -> RewardBreakdown {
    debug_assert!(lambda >= 0.0, "lambda must be nonnegative");
    debug_assert!(align <= 0.0, "alignment reward is a penalty");
    RewardBreakdown {
        cider,
        align,
        total: cider + lambda * align,
    }
}
