use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use ctrlcap_bench::bench_world;
use ctrlcap_core::captioner::{beam_search, forward_teacher, sample, Dropout, ParamNodes};
use ctrlcap_core::control::ControlSignal;
use ctrlcap_core::rewards::{cider_d, CiderOpts};
use ctrlcap_core::tape::Tape;
use ctrlcap_core::training::{sat_step, StepCtx};
use ctrlcap_core::util::stream_rng;

fn bench_cider(c: &mut Criterion) {
    let w = bench_world();
    let image = &w.corpus.images[0];
    let cand = image.refs[1].clone();
    let opts = CiderOpts::evaluation();
    c.bench_function("cider_d one caption vs 5 refs", |b| {
        b.iter(|| black_box(cider_d(&cand, &image.refs, &w.stats, &opts)))
    });
}

fn bench_teacher_pass(c: &mut Criterion) {
    let w = bench_world();
    let image = &w.corpus.images[0];
    let signal = ControlSignal::length(2);
    c.bench_function("teacher forward + backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let pn = ParamNodes::register(&mut tape, &w.params);
            let pass = forward_teacher(
                &mut tape,
                &pn,
                &w.cfg,
                &w.annotator.schemes,
                &image.feature,
                Some(&signal),
                &image.refs[0],
                Dropout::Off,
            )
            .unwrap();
            let loss = tape.scale(pass.seq_log_prob, -1.0);
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn bench_sampling(c: &mut Criterion) {
    let w = bench_world();
    let image = &w.corpus.images[0];
    let signal = ControlSignal::length(2);
    c.bench_function("monte-carlo sample", |b| {
        let mut rng = stream_rng(7, &[0]);
        b.iter(|| {
            let mut tape = Tape::new();
            let pn = ParamNodes::register(&mut tape, &w.params);
            black_box(
                sample(
                    &mut tape,
                    &pn,
                    &w.cfg,
                    &w.annotator,
                    image,
                    Some(&signal),
                    &mut rng,
                    w.cfg.max_len,
                )
                .unwrap(),
            );
        })
    });
}

fn bench_beam(c: &mut Criterion) {
    let w = bench_world();
    let image = &w.corpus.images[0];
    let signal = ControlSignal::length(2);
    c.bench_function("beam search width 2", |b| {
        b.iter(|| {
            black_box(
                beam_search(
                    &w.params,
                    &w.cfg,
                    &w.annotator.schemes,
                    image,
                    Some(&signal),
                    2,
                )
                .unwrap(),
            )
        })
    });
}

fn bench_sat_step(c: &mut Criterion) {
    let w = bench_world();
    let ctx = StepCtx {
        params: &w.params,
        decoder: &w.cfg,
        annotator: &w.annotator,
        stats: &w.stats,
        reward_opts: CiderOpts::training(),
        lambda: 1.0,
        clip_finetune_advantages: false,
        max_len: w.cfg.max_len,
    };
    c.bench_function("sat_step one image (5 samples)", |b| {
        let mut i = 0u64;
        b.iter(|| {
            let mut rng = stream_rng(9, &[i]);
            i += 1;
            black_box(sat_step(&ctx, &w.corpus.images[0], &mut rng).unwrap());
        })
    });
}

criterion_group!(
    benches,
    bench_cider,
    bench_teacher_pass,
    bench_sampling,
    bench_beam,
    bench_sat_step
);
criterion_main!(benches);
