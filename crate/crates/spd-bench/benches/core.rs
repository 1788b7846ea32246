//! End-to-end and kernel-level benchmarks: training step, evaluation pass,
//! segmentation cross entropy, metric accumulation, and sample generation.

use criterion::{criterion_group, criterion_main, Criterion};
use spd_bench::{random_logits, random_samples, random_targets};
use spd_core::metrics::ConfusionAccumulator;
use spd_core::nn::kernels::seg_ce_forward;
use spd_core::trainer::{TrainSettings, Trainer};
use spd_core::{default_config, SegMask, Variant};
use std::hint::black_box;

fn bench_train_step(c: &mut Criterion) {
    let data = random_samples(8, 64, 11);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for variant in [Variant::Spd, Variant::S] {
        let mut config = default_config();
        config.variant = variant;
        let mut trainer = Trainer::new(&config, TrainSettings::default()).expect("build");
        group.bench_function(variant.name(), |b| {
            b.iter(|| trainer.train(black_box(&data), 1).expect("step"))
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let data = random_samples(8, 64, 13);
    let trainer = Trainer::new(&default_config(), TrainSettings::default()).expect("build");
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    group.bench_function("8x64x64", |b| {
        b.iter(|| trainer.evaluate_with_workers(black_box(&data), 1).expect("eval"))
    });
    group.finish();
}

fn bench_seg_ce(c: &mut Criterion) {
    let logits = random_logits(4, 19, 64, 17);
    let targets = random_targets(4, 19, 64, 17);
    c.bench_function("seg_ce_forward_4x19x64x64", |b| {
        b.iter(|| seg_ce_forward(black_box(&logits), black_box(&targets)).expect("loss"))
    });
}

fn bench_confusion(c: &mut Criterion) {
    let a = random_targets(1, 19, 64, 23);
    let b_ = random_targets(1, 19, 64, 29);
    let pred = SegMask::new(a.index_axis(ndarray::Axis(0), 0).to_owned(), 19).expect("mask");
    let target = SegMask::new(b_.index_axis(ndarray::Axis(0), 0).to_owned(), 19).expect("mask");
    c.bench_function("confusion_accumulate_64x64", |b| {
        b.iter(|| {
            let mut acc = ConfusionAccumulator::new(19);
            acc.accumulate(black_box(&pred), black_box(&target)).expect("acc");
            acc
        })
    });
}

fn bench_synth(c: &mut Criterion) {
    let mut group = c.benchmark_group("synth");
    group.sample_size(20);
    group.bench_function("render_sample", |b| {
        let mut i = 0u64;
        b.iter(|| {
            i += 1;
            let spec = spd_core::synth::sample_figure(black_box(i));
            spd_core::synth::render_sample(&spec, 64, 64, &format!("s{i}")).expect("render")
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_train_step,
    bench_evaluate,
    bench_seg_ce,
    bench_confusion,
    bench_synth
);
criterion_main!(benches);
