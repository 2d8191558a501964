//! Property tests over the annotators, rewards, and embeddings.

use proptest::prelude::*;

use ctrlcap_core::control::{
    embed_control, tense_level, ControlSignal, ControlTask, SchemeSet, TagMap, WordTag,
};
use ctrlcap_core::corpus::{generate_synthetic, SynthConfig};
use ctrlcap_core::rewards::{cider_d, CiderOpts, NgramStats};
use ctrlcap_core::Tensor;

/// Tokens 0..6 are OTHER variants; 6..=9 are BE / base / ing / ed.
fn prop_tags() -> TagMap {
    let tags = vec![
        WordTag::Other,
        WordTag::Other,
        WordTag::Other,
        WordTag::Other,
        WordTag::Other,
        WordTag::Other,
        WordTag::Be,
        WordTag::VerbBase,
        WordTag::VerbIng,
        WordTag::VerbEd,
    ];
    let names = (0..10).map(|i| format!("w{i}")).collect();
    TagMap::new(tags, names)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Replacing OTHER-tagged tokens with other OTHER-tagged tokens never
    /// changes the tense level.
    #[test]
    fn tense_ignores_non_verb_tokens(
        caption in proptest::collection::vec(0u32..10, 1..12),
        swaps in proptest::collection::vec(0u32..6, 12),
    ) {
        let tags = prop_tags();
        let before = tense_level(&caption, &tags).unwrap();
        let swapped: Vec<u32> = caption
            .iter()
            .enumerate()
            .map(|(i, &t)| if t < 6 { swaps[i % swaps.len()] } else { t })
            .collect();
        let after = tense_level(&swapped, &tags).unwrap();
        prop_assert_eq!(before, after);
    }

    /// e_β is linear in W.
    #[test]
    fn control_embedding_is_linear(
        scale in -3.0f64..3.0,
        len_level in 0usize..5,
        tense in 0usize..5,
        entries in proptest::collection::vec(-2.0f64..2.0, 40),
    ) {
        let schemes = SchemeSet::for_task(ControlTask::LengthTense).unwrap();
        let w = Tensor::new(vec![10, 4], entries.clone()).unwrap();
        let ws = Tensor::new(vec![10, 4], entries.iter().map(|v| v * scale).collect()).unwrap();
        let sig = ControlSignal { len_level: Some(len_level), tense_level: Some(tense), quality_level: None };
        let e = embed_control(&sig, &w, &schemes).unwrap();
        let es = embed_control(&sig, &ws, &schemes).unwrap();
        for (a, b) in e.iter().zip(&es) {
            prop_assert!((b - scale * a).abs() < 1e-9);
        }
    }

    /// CIDEr-D is symmetric under reference reordering, for random tiny
    /// reference sets.
    #[test]
    fn cider_is_reference_order_invariant(
        cand in proptest::collection::vec(0u32..8, 1..8),
        refs in proptest::collection::vec(proptest::collection::vec(0u32..8, 1..8), 2..5),
        rotate in 0usize..4,
        penalty in proptest::bool::ANY,
    ) {
        let stats = NgramStats::from_ref_sets([refs.as_slice()]);
        let opts = CiderOpts { sigma: 6.0, use_length_penalty: penalty, scale: 10.0 };
        let a = cider_d(&cand, &refs, &stats, &opts);
        let mut rotated = refs.clone();
        rotated.rotate_left(rotate % refs.len());
        let b = cider_d(&cand, &rotated, &stats, &opts);
        prop_assert_eq!(a, b);
    }

    /// Corpus annotation is deterministic and idempotent: annotating the
    /// same reference twice gives identical signals.
    #[test]
    fn annotation_is_deterministic(seed in 0u64..500) {
        let corpus = generate_synthetic(&SynthConfig {
            num_images: 3,
            seed,
            ..Default::default()
        })
        .unwrap();
        let schemes = SchemeSet::for_task(ControlTask::LengthTense).unwrap();
        let annotator = ctrlcap_core::control::Annotator::new(schemes, corpus.tags.clone());
        for img in &corpus.images {
            for r in 0..img.refs.len() {
                let a = annotator.annotate_reference(&img.refs, r).unwrap();
                let b = annotator.annotate_reference(&img.refs, r).unwrap();
                prop_assert_eq!(a, b);
                let (c, _) = annotator.annotate_sample(&img.refs[r], &img.refs).unwrap();
                prop_assert_eq!(a, c, "reference and sample annotators agree on the same tokens");
            }
        }
    }
}
