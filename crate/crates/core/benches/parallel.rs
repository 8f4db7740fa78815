use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mrp_core::backbone::{Backbone, BackboneConfig};
use mrp_core::bench::{measure_residuals, MeasureConfig};
use mrp_core::corpus::gen_arithmetic;
use mrp_core::diffusion::{Policy, SequenceState};
use mrp_core::exec::ExecMode;
use mrp_core::inference::{decode_many, DecodeConfig, Mode};
use mrp_core::mrp::{BoundHead, MrpConfig, MrpHead};
use mrp_core::training::{train_backbone, TrainConfig};

const B: usize = 8;

fn modes() -> Vec<(&'static str, ExecMode)> {
    let mut m = vec![("sequential", ExecMode::Sequential)];
    if mrp_core::exec::parallel_enabled() {
        m.push(("parallel", ExecMode::Parallel));
    }
    m
}

fn setup(n: usize) -> (Backbone, MrpHead, Vec<SequenceState>) {
    let backbone = Backbone::new(BackboneConfig { d_model: 32, n_layers: 2, ..Default::default() }, 1).unwrap();
    let head = MrpHead::for_backbone(MrpConfig { depth: 1, ..Default::default() }, &backbone, 4, 1e-6, 2).unwrap();
    let xs = gen_arithmetic(3, n, 99)
        .unwrap()
        .iter()
        .map(|e| SequenceState::for_generation(&e.ids[..e.prompt_len], 1, B).unwrap())
        .collect();
    (backbone, head, xs)
}

fn decoding(c: &mut Criterion) {
    let (f, g, xs) = setup(64);
    let head = BoundHead { head: &g, backbone: &f };
    let mut group = c.benchmark_group("decode_many");
    group.sample_size(10);
    for mode in [Mode::Baseline, Mode::Direct, Mode::Spec] {
        let cfg = DecodeConfig {
            mode,
            policy: Policy::Dynamic { tau: 0.9 },
            k: if mode == Mode::Baseline { 0 } else { 2 },
            max_new_tokens: B,
            strict_recompute_on_reject: false,
        };
        for (name, exec) in modes() {
            group.bench_with_input(BenchmarkId::new(mode.name(), name), &exec, |b, &exec| {
                b.iter(|| black_box(decode_many(&f, Some(&head), &xs, &cfg, exec).unwrap()))
            });
        }
    }
    group.finish();
}

fn measuring(c: &mut Criterion) {
    let (f, _, xs) = setup(32);
    let cfg = MeasureConfig { min_blocks: 1, ..Default::default() };
    let mut group = c.benchmark_group("measure_residuals");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(measure_residuals(&f, &xs, &cfg, exec).unwrap()))
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let examples = gen_arithmetic(4, 64, 99).unwrap();
    let config = BackboneConfig { d_model: 32, n_layers: 2, ..Default::default() };
    let train = TrainConfig { batch_size: 16, micro_batch: 16, total_steps: Some(4), ..Default::default() };
    let mut group = c.benchmark_group("train_backbone_4_steps");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(train_backbone(&examples, &config, &train, exec, |_| {}).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, decoding, measuring, training);
criterion_main!(benches);
