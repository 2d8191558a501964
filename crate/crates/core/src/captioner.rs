//! Compact control-conditioned autoregressive decoder: a single-layer GRU
//! over summed word/control embeddings, with teacher-forced scoring,
//! Monte-Carlo sampling, and length-normalized beam search.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::control::{ControlSignal, ControlTask, SchemeSet};
use crate::control::{positional_embedding, Annotator};
use crate::corpus::{Corpus, ImageInstance, BOS, EOS};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::util::stream_rng;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
    /// Rows of the shared control-embedding matrix (0 when uncontrolled).
    pub control_levels: usize,
    pub dropout_rate: f64,
    /// Add sinusoidal positional terms to the inputs (attention-style
    /// decoders; off for the GRU default).
    pub positional: bool,
    pub max_len: usize,
}

impl DecoderConfig {
    pub fn new(feature_dim: usize, vocab_size: usize, control_levels: usize) -> Self {
        DecoderConfig {
            hidden_dim: 64,
            feature_dim,
            vocab_size,
            control_levels,
            dropout_rate: 0.1,
            positional: false,
            max_len: 20,
        }
    }
}

/// All trainable tensors. Field order is the canonical parameter order for
/// gradients and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub word_emb: Tensor,    // V×d
    pub control_emb: Tensor, // k×d, shared across schemes
    pub feat_proj: Tensor,   // m×d
    pub w_update: Tensor,    // 2d×d
    pub b_update: Tensor,    // 1×d
    pub w_reset: Tensor,     // 2d×d
    pub b_reset: Tensor,     // 1×d
    pub w_cand: Tensor,      // 2d×d
    pub b_cand: Tensor,      // 1×d
    pub out_proj: Tensor,    // d×V
}

pub const PARAM_NAMES: [&str; 10] = [
    "word_emb",
    "control_emb",
    "feat_proj",
    "w_update",
    "b_update",
    "w_reset",
    "b_reset",
    "w_cand",
    "b_cand",
    "out_proj",
];

impl DecoderParams {
    pub fn shapes(cfg: &DecoderConfig) -> Vec<Vec<usize>> {
        let (d, v, m, k) = (
            cfg.hidden_dim,
            cfg.vocab_size,
            cfg.feature_dim,
            cfg.control_levels,
        );
        vec![
            vec![v, d],
            vec![k, d],
            vec![m, d],
            vec![2 * d, d],
            vec![1, d],
            vec![2 * d, d],
            vec![1, d],
            vec![2 * d, d],
            vec![1, d],
            vec![d, v],
        ]
    }

    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.word_emb,
            &self.control_emb,
            &self.feat_proj,
            &self.w_update,
            &self.b_update,
            &self.w_reset,
            &self.b_reset,
            &self.w_cand,
            &self.b_cand,
            &self.out_proj,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.word_emb,
            &mut self.control_emb,
            &mut self.feat_proj,
            &mut self.w_update,
            &mut self.b_update,
            &mut self.w_reset,
            &mut self.b_reset,
            &mut self.w_cand,
            &mut self.b_cand,
            &mut self.out_proj,
        ]
    }

    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                PARAM_NAMES.len(),
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        Ok(DecoderParams {
            word_emb: it.next().unwrap(),
            control_emb: it.next().unwrap(),
            feat_proj: it.next().unwrap(),
            w_update: it.next().unwrap(),
            b_update: it.next().unwrap(),
            w_reset: it.next().unwrap(),
            b_reset: it.next().unwrap(),
            w_cand: it.next().unwrap(),
            b_cand: it.next().unwrap(),
            out_proj: it.next().unwrap(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}

/// Uniform(−0.1, 0.1) initialization, deterministic per seed.
pub fn init_params(seed: u64, cfg: &DecoderConfig) -> DecoderParams {
    let mut rng = stream_rng(seed, &[0x1217]);
    let tensors = DecoderParams::shapes(cfg)
        .into_iter()
        .map(|shape| {
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| rng.random_range(-0.1..0.1)).collect();
            Tensor::new(shape, data).expect("shape/numel consistent")
        })
        .collect();
    DecoderParams::from_tensors(tensors).expect("one tensor per parameter")
}

/// Tape handles for every parameter tensor of one forward graph.
#[derive(Clone, Copy, Debug)]
pub struct ParamNodes {
    pub word_emb: NodeId,
    pub control_emb: NodeId,
    pub feat_proj: NodeId,
    pub w_update: NodeId,
    pub b_update: NodeId,
    pub w_reset: NodeId,
    pub b_reset: NodeId,
    pub w_cand: NodeId,
    pub b_cand: NodeId,
    pub out_proj: NodeId,
}

impl ParamNodes {
    pub fn register(tape: &mut Tape, params: &DecoderParams) -> Self {
        let [e, w, p, wz, bz, wr, br, wc, bc, o] = params.tensors().map(|t| tape.leaf(t.clone()));
        ParamNodes {
            word_emb: e,
            control_emb: w,
            feat_proj: p,
            w_update: wz,
            b_update: bz,
            w_reset: wr,
            b_reset: br,
            w_cand: wc,
            b_cand: bc,
            out_proj: o,
        }
    }

    pub fn as_array(&self) -> [NodeId; 10] {
        [
            self.word_emb,
            self.control_emb,
            self.feat_proj,
            self.w_update,
            self.b_update,
            self.w_reset,
            self.b_reset,
            self.w_cand,
            self.b_cand,
            self.out_proj,
        ]
    }
}

/// Dropout behaviour of one forward pass.
pub enum Dropout<'a> {
    Off,
    /// Draw inverted-dropout masks from this stream.
    Draw(&'a mut ChaCha8Rng, f64),
    /// Replay previously drawn masks (gradient-check freezing).
    Fixed(&'a [Vec<f64>]),
}

impl Dropout<'_> {
    fn mask_for_step(&mut self, step: usize, d: usize) -> Option<Vec<f64>> {
        match self {
            Dropout::Off => None,
            Dropout::Draw(rng, rate) => {
                if *rate <= 0.0 {
                    return None;
                }
                let keep = 1.0 - *rate;
                Some(
                    (0..d)
                        .map(|_| {
                            if rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )
            }
            Dropout::Fixed(masks) => masks.get(step).cloned(),
        }
    }
}

/// h₀ = tanh(feature · P)
pub fn hidden_init(tape: &mut Tape, pn: &ParamNodes, feature: &[f64]) -> Result<NodeId> {
    let f = tape.leaf(Tensor::row(feature.to_vec()));
    let proj = tape.matmul(f, pn.feat_proj)?;
    Ok(tape.tanh(proj))
}

/// e_β as a tape node: the sum of the selected control-embedding rows.
pub fn control_embed_node(
    tape: &mut Tape,
    pn: &ParamNodes,
    schemes: &SchemeSet,
    signal: Option<&ControlSignal>,
) -> Result<Option<NodeId>> {
    let Some(signal) = signal else {
        return Ok(None);
    };
    let rows = schemes.embedding_rows(signal)?;
    let mut acc: Option<NodeId> = None;
    for row in rows {
        let r = tape.lookup_row(pn.control_emb, row)?;
        acc = Some(match acc {
            None => r,
            Some(a) => tape.add(a, r)?,
        });
    }
    Ok(acc)
}

fn input_node(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &DecoderConfig,
    e_beta: Option<NodeId>,
    word: u32,
    position: usize,
) -> Result<NodeId> {
    let mut x = tape.lookup_row(pn.word_emb, word as usize)?;
    if let Some(e) = e_beta {
        x = tape.add(x, e)?;
    }
    if cfg.positional {
        let pos = tape.leaf(Tensor::row(positional_embedding(position, cfg.hidden_dim)));
        x = tape.add(x, pos)?;
    }
    Ok(x)
}

fn gru_step(tape: &mut Tape, pn: &ParamNodes, x: NodeId, h: NodeId) -> Result<NodeId> {
    let xh = tape.concat(x, h)?;
    let z_lin = tape.matmul(xh, pn.w_update)?;
    let z_lin = tape.add(z_lin, pn.b_update)?;
    let z = tape.sigmoid(z_lin);
    let r_lin = tape.matmul(xh, pn.w_reset)?;
    let r_lin = tape.add(r_lin, pn.b_reset)?;
    let r = tape.sigmoid(r_lin);
    let rh = tape.elemwise_mul(r, h)?;
    let xrh = tape.concat(x, rh)?;
    let c_lin = tape.matmul(xrh, pn.w_cand)?;
    let c_lin = tape.add(c_lin, pn.b_cand)?;
    let cand = tape.tanh(c_lin);
    // h' = h + z ⊙ (cand − h)
    let zh = tape.elemwise_mul(z, h)?;
    let neg_zh = tape.scale(zh, -1.0);
    let zc = tape.elemwise_mul(z, cand)?;
    let partial = tape.add(h, neg_zh)?;
    tape.add(partial, zc)
}

/// Log-distribution over the vocabulary for the current hidden state, with
/// dropout applied to the GRU output before projection.
fn step_log_dist(
    tape: &mut Tape,
    pn: &ParamNodes,
    h: NodeId,
    mask: Option<Vec<f64>>,
) -> Result<NodeId> {
    let hd = match mask {
        Some(m) => {
            let mnode = tape.leaf(Tensor::row(m));
            tape.elemwise_mul(h, mnode)?
        }
        None => h,
    };
    let logits = tape.matmul(hd, pn.out_proj)?;
    Ok(tape.log_softmax(logits))
}

/// One teacher-forced pass: per-step log-distribution nodes, the picked
/// log-probability nodes, and their sum.
pub struct TeacherPass {
    pub step_nodes: Vec<NodeId>,
    pub picked: Vec<NodeId>,
    pub seq_log_prob: NodeId,
    /// Masks drawn by this pass (one per step) when dropout was active.
    pub masks: Vec<Vec<f64>>,
}

/// Score `target` (BOS/EOS excluded) under the decoder: at step t the input
/// is the previous target token (BOS first) and the prediction covers each
/// target token plus the closing EOS.
#[allow(clippy::too_many_arguments)]
pub fn forward_teacher(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &DecoderConfig,
    schemes: &SchemeSet,
    feature: &[f64],
    signal: Option<&ControlSignal>,
    target: &[u32],
    dropout: Dropout<'_>,
) -> Result<TeacherPass> {
    if target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    forward_teacher_impl(tape, pn, cfg, schemes, feature, signal, target, dropout)
}

/// Like [`forward_teacher`] but accepts an empty target, whose only step is
/// the EOS prediction (used when replaying immediate-EOS rollouts).
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_teacher_impl(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &DecoderConfig,
    schemes: &SchemeSet,
    feature: &[f64],
    signal: Option<&ControlSignal>,
    target: &[u32],
    mut dropout: Dropout<'_>,
) -> Result<TeacherPass> {
    let e_beta = control_embed_node(tape, pn, schemes, signal)?;
    let mut h = hidden_init(tape, pn, feature)?;
    let mut step_nodes = Vec::with_capacity(target.len() + 1);
    let mut picked = Vec::with_capacity(target.len() + 1);
    let mut masks = Vec::new();
    let mut seq: Option<NodeId> = None;
    let mut prev = BOS;
    for (t, &expect) in target.iter().chain(std::iter::once(&EOS)).enumerate() {
        let x = input_node(tape, pn, cfg, e_beta, prev, t)?;
        h = gru_step(tape, pn, x, h)?;
        let mask = dropout.mask_for_step(t, cfg.hidden_dim);
        if let Some(m) = &mask {
            masks.push(m.clone());
        }
        let logp = step_log_dist(tape, pn, h, mask)?;
        let pick = tape.pick_log_prob(logp, expect as usize)?;
        step_nodes.push(logp);
        picked.push(pick);
        seq = Some(match seq {
            None => pick,
            Some(s) => tape.add(s, pick)?,
        });
        prev = expect;
    }
    Ok(TeacherPass {
        step_nodes,
        picked,
        seq_log_prob: seq.expect("target nonempty"),
        masks,
    })
}

/// One Monte-Carlo rollout: the sampled tokens (terminal EOS included),
/// the full per-step log-distributions, and the self-annotated signal.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub tokens: Vec<u32>,
    pub step_log_probs: Vec<Vec<f64>>,
    pub input_signal: Option<ControlSignal>,
    pub self_signal: Option<ControlSignal>,
    pub seq_log_prob: f64,
    /// CIDEr-D of the sample against its references when the quality
    /// component is active; the self quality level re-buckets this value.
    pub quality_score: Option<f64>,
}

impl Rollout {
    /// Tokens excluding the terminal EOS.
    pub fn caption(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == EOS => rest,
            _ => &self.tokens,
        }
    }
}

/// A rollout plus the tape handles needed to build a loss on it.
pub struct SampledCaption {
    pub rollout: Rollout,
    pub step_nodes: Vec<NodeId>,
    pub picked: Vec<NodeId>,
    /// Dropout masks drawn per step (empty when dropout is off).
    pub masks: Vec<Vec<f64>>,
}

/// Ancestral sampling with dropout active (the training-mode convention).
/// Stops at EOS; at `max_len` the EOS is forced and its log-probability
/// recorded from the current distribution.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    tape: &mut Tape,
    pn: &ParamNodes,
    cfg: &DecoderConfig,
    annotator: &Annotator,
    instance: &ImageInstance,
    signal: Option<&ControlSignal>,
    rng: &mut ChaCha8Rng,
    max_len: usize,
) -> Result<SampledCaption> {
    debug_assert!(max_len >= 2, "max_len must leave room for a token and EOS");
    let e_beta = control_embed_node(tape, pn, &annotator.schemes, signal)?;
    let mut h = hidden_init(tape, pn, &instance.feature)?;
    let mut tokens = Vec::new();
    let mut step_nodes = Vec::new();
    let mut picked = Vec::new();
    let mut dists = Vec::new();
    let mut masks = Vec::new();
    let mut seq_log_prob = 0.0;
    let mut prev = BOS;
    for t in 0..max_len {
        let x = input_node(tape, pn, cfg, e_beta, prev, t)?;
        h = gru_step(tape, pn, x, h)?;
        let mask = Dropout::Draw(rng, cfg.dropout_rate).mask_for_step(t, cfg.hidden_dim);
        if let Some(m) = &mask {
            masks.push(m.clone());
        }
        let logp = step_log_dist(tape, pn, h, mask)?;
        let dist = tape.value(logp).data().to_vec();
        let tok = if t + 1 == max_len {
            EOS
        } else {
            sample_from_log_dist(&dist, rng)
        };
        let pick = tape.pick_log_prob(logp, tok as usize)?;
        seq_log_prob += dist[tok as usize];
        tokens.push(tok);
        step_nodes.push(logp);
        picked.push(pick);
        dists.push(dist);
        if tok == EOS {
            break;
        }
        prev = tok;
    }
    let caption: Vec<u32> = tokens
        .iter()
        .copied()
        .filter(|&t| t != EOS)
        .collect();
    let (self_signal, quality_score) = if annotator.is_uncontrolled() {
        (None, None)
    } else {
        let (sig, score) = annotator.annotate_sample(&caption, &instance.refs)?;
        (Some(sig), score)
    };
    Ok(SampledCaption {
        rollout: Rollout {
            tokens,
            step_log_probs: dists,
            input_signal: signal.copied(),
            self_signal,
            seq_log_prob,
            quality_score,
        },
        step_nodes,
        picked,
        masks,
    })
}

fn sample_from_log_dist(log_dist: &[f64], rng: &mut ChaCha8Rng) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_dist.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i as u32;
        }
    }
    (log_dist.len() - 1) as u32
}

/// Log-distribution over the next token after consuming `prefix` (dropout
/// off). `prefix` may be empty, meaning the BOS-only state.
pub fn next_token_log_dist(
    params: &DecoderParams,
    cfg: &DecoderConfig,
    schemes: &SchemeSet,
    instance: &ImageInstance,
    signal: Option<&ControlSignal>,
    prefix: &[u32],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let pn = ParamNodes::register(&mut tape, params);
    let e_beta = control_embed_node(&mut tape, &pn, schemes, signal)?;
    let mut h = hidden_init(&mut tape, &pn, &instance.feature)?;
    let mut prev = BOS;
    for (t, &tok) in prefix.iter().enumerate() {
        let x = input_node(&mut tape, &pn, cfg, e_beta, prev, t)?;
        h = gru_step(&mut tape, &pn, x, h)?;
        prev = tok;
    }
    let x = input_node(&mut tape, &pn, cfg, e_beta, prev, prefix.len())?;
    h = gru_step(&mut tape, &pn, x, h)?;
    let logp = step_log_dist(&mut tape, &pn, h, None)?;
    Ok(tape.value(logp).data().to_vec())
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<u32>,
    log_prob: f64,
    h: NodeId,
    finished: bool,
}

impl Hypothesis {
    fn normalized(&self) -> f64 {
        // Length-normalized over emitted tokens including EOS.
        self.log_prob / (self.tokens.len().max(1) as f64)
    }
}

/// Length-normalized beam search with dropout off. `beam_width` = 1 is
/// greedy decoding. Returns the caption without the terminal EOS.
pub fn beam_search(
    params: &DecoderParams,
    cfg: &DecoderConfig,
    schemes: &SchemeSet,
    instance: &ImageInstance,
    signal: Option<&ControlSignal>,
    beam_width: usize,
) -> Result<Vec<u32>> {
    debug_assert!(beam_width >= 1);
    let mut tape = Tape::new();
    let pn = ParamNodes::register(&mut tape, params);
    let e_beta = control_embed_node(&mut tape, &pn, schemes, signal)?;
    let h0 = hidden_init(&mut tape, &pn, &instance.feature)?;
    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        h: h0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for t in 0..cfg.max_len {
        if beams.is_empty() || finished.len() >= beam_width {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for beam in &beams {
            let prev = *beam.tokens.last().unwrap_or(&BOS);
            let x = input_node(&mut tape, &pn, cfg, e_beta, prev, t)?;
            let h = gru_step(&mut tape, &pn, x, beam.h)?;
            let logp = step_log_dist(&mut tape, &pn, h, None)?;
            let dist = tape.value(logp).data();
            let force_eos = t + 1 == cfg.max_len;
            for (tok, lp) in dist.iter().enumerate() {
                if force_eos && tok as u32 != EOS {
                    continue;
                }
                let mut tokens = beam.tokens.clone();
                tokens.push(tok as u32);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: beam.log_prob + lp,
                    h,
                    finished: tok as u32 == EOS,
                });
            }
        }
        // Ties broken by token order for determinism.
        candidates.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(beam_width);
        beams = Vec::new();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                beams.push(c);
            }
        }
    }
    finished.extend(beams);
    let best = finished
        .into_iter()
        .max_by(|a, b| {
            a.normalized()
                .partial_cmp(&b.normalized())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .expect("at least one hypothesis");
    let mut tokens = best.tokens;
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    Ok(tokens)
}

// ── Checkpoints ────────────────────────────────────────────────────────

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned structured-text dump of a trained model: every tensor, the
/// decoder dims, the active schemes, the optimizer state, and the vocab
/// hash that guards against mismatched token spaces.
#[derive(Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: String,
    pub epoch: usize,
    pub task: ControlTask,
    pub schemes: SchemeSet,
    pub config: DecoderConfig,
    pub vocab_hash: u64,
    pub params: BTreeMap<String, Tensor>,
    pub adam: Option<AdamState>,
    /// Stages this model has been trained through, in order.
    pub provenance: Vec<String>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        stage: &str,
        epoch: usize,
        schemes: &SchemeSet,
        config: &DecoderConfig,
        vocab_hash: u64,
        params: &DecoderParams,
        adam: Option<AdamState>,
        provenance: Vec<String>,
    ) -> Self {
        let named = PARAM_NAMES
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            stage: stage.to_string(),
            epoch,
            task: schemes.task,
            schemes: schemes.clone(),
            config: config.clone(),
            vocab_hash,
            params: named,
            adam,
            provenance,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Parse {
                line: 0,
                msg: format!("bad checkpoint {}: {e}", path.display()),
            })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Reject models whose vocabulary differs from the corpus in use.
    pub fn verify_vocab(&self, corpus: &Corpus) -> Result<()> {
        let found = corpus.vocab_hash();
        if self.vocab_hash != found {
            return Err(Error::VocabHashMismatch {
                expected: self.vocab_hash,
                found,
            });
        }
        Ok(())
    }

    pub fn decoder_params(&self) -> Result<DecoderParams> {
        let shapes = DecoderParams::shapes(&self.config);
        let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
        for (name, shape) in PARAM_NAMES.iter().zip(shapes) {
            let t = self
                .params
                .get(*name)
                .ok_or_else(|| Error::Config(format!("checkpoint missing tensor {name:?}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint load",
                    lhs: t.shape().to_vec(),
                    rhs: shape,
                });
            }
            tensors.push(t.clone());
        }
        DecoderParams::from_tensors(tensors)
    }
}


#[cfg(test)]
mod positional_tests {
    use super::*;
    use crate::control::ControlTask;
    use crate::corpus::{generate_synthetic, SynthConfig};
    use crate::gradcheck::{central_diff, max_rel_err};

    /// The optional positional term changes the step distributions and
    /// keeps the gradients exact.
    #[test]
    fn positional_variant_stays_differentiable() {
        let corpus = generate_synthetic(&SynthConfig {
            num_images: 2,
            ..Default::default()
        })
        .unwrap();
        let schemes = SchemeSet::for_task(ControlTask::Length).unwrap();
        let mut cfg = DecoderConfig::new(
            corpus.feature_dim,
            corpus.vocab.len(),
            schemes.total_levels(),
        );
        cfg.hidden_dim = 6;
        let image = &corpus.images[0];
        let signal = ControlSignal::length(1);

        let dist_for = |positional: bool| {
            let mut c = cfg.clone();
            c.positional = positional;
            let params = init_params(3, &c);
            next_token_log_dist(&params, &c, &schemes, image, Some(&signal), &[5, 6]).unwrap()
        };
        assert_ne!(dist_for(false), dist_for(true));

        let mut pos_cfg = cfg.clone();
        pos_cfg.positional = true;
        let params = init_params(3, &pos_cfg);
        let target = image.refs[0].clone();
        let shapes = DecoderParams::shapes(&pos_cfg);
        let loss_of = |vals: &[Vec<f64>]| {
            let tensors = vals
                .iter()
                .zip(&shapes)
                .map(|(d, s)| Tensor::new(s.clone(), d.clone()).unwrap())
                .collect();
            let p = DecoderParams::from_tensors(tensors).unwrap();
            let mut tape = Tape::new();
            let pn = ParamNodes::register(&mut tape, &p);
            let pass = forward_teacher(
                &mut tape,
                &pn,
                &pos_cfg,
                &schemes,
                &image.feature,
                Some(&signal),
                &target,
                Dropout::Off,
            )
            .unwrap();
            let loss = tape.scale(pass.seq_log_prob, -1.0);
            (tape, pn, loss)
        };
        let flat: Vec<Vec<f64>> = params.tensors().iter().map(|t| t.data().to_vec()).collect();
        let (tape, pn, loss) = loss_of(&flat);
        let grads = tape.backward(loss).unwrap();
        let numeric = central_diff(
            |vals| {
                let (t, _, l) = loss_of(vals);
                t.value(l).scalar_value()
            },
            &flat,
            1e-6,
        );
        for (id, num) in pn.as_array().iter().zip(&numeric) {
            let err = max_rel_err(grads.grad(*id).data(), num);
            assert!(err < 1e-4, "rel err {err}");
        }
    }
}
