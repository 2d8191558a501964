//! Shared fixtures for the criterion benchmarks.

use ctrlcap_core::captioner::{init_params, DecoderConfig, DecoderParams};
use ctrlcap_core::control::{Annotator, ControlTask, SchemeSet};
use ctrlcap_core::corpus::{generate_synthetic, Corpus, SynthConfig};
use ctrlcap_core::rewards::{build_ngram_stats, NgramStats};

pub struct BenchWorld {
    pub corpus: Corpus,
    pub cfg: DecoderConfig,
    pub annotator: Annotator,
    pub stats: NgramStats,
    pub params: DecoderParams,
}

/// Default-scale world: 100 images, d=64 decoder, length task.
pub fn bench_world() -> BenchWorld {
    let corpus = generate_synthetic(&SynthConfig {
        num_images: 100,
        ..Default::default()
    })
    .expect("generation succeeds");
    let schemes = SchemeSet::for_task(ControlTask::Length).expect("task schemes");
    let cfg = DecoderConfig::new(
        corpus.feature_dim,
        corpus.vocab.len(),
        schemes.total_levels(),
    );
    let stats = build_ngram_stats(&corpus);
    let annotator = Annotator::new(schemes, corpus.tags.clone());
    let params = init_params(42, &cfg);
    BenchWorld {
        corpus,
        cfg,
        annotator,
        stats,
        params,
    }
}
