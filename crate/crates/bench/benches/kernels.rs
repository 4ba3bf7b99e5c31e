use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use psvae_core::metrics::{ms_ssim, ssim};
use psvae_core::model::ArchDescriptor;
use psvae_core::patching::{assemble, split};
use psvae_core::rng::{stream, substream, StreamRng};
use psvae_core::synth::face_like_scene;
use psvae_core::tensor::Padding;
use psvae_core::trainer::{infer, train_stage1, train_stage2, PatchDataset};
use psvae_core::{Graph, PatchGridSpec, Tensor, TrainConfig};
use rand::SeedableRng;

fn conv(c: &mut Criterion) {
    let mut rng = StreamRng::seed_from_u64(1);
    let x = Tensor::<f32>::randn(&[128, 16, 16, 32], &mut rng);
    let k = Tensor::<f32>::randn(&[3, 3, 32, 32], &mut rng);
    let mut group = c.benchmark_group("conv");
    group.sample_size(20);
    group.bench_function("conv2d 128x16x16x32 forward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
            black_box(g.conv2d(xv, kv, 1, Padding::Same).unwrap());
        })
    });
    group.bench_function("conv2d 128x16x16x32 forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (xv, kv) = (g.param(x.clone()), g.param(k.clone()));
            let y = g.conv2d(xv, kv, 1, Padding::Same).unwrap();
            let s = g.sum_squares(y);
            black_box(g.backward(s).unwrap());
        })
    });
    group.bench_function("conv2d_transpose stride 2 forward", |b| {
        let small = Tensor::<f32>::randn(&[128, 8, 8, 32], &mut rng);
        b.iter(|| {
            let mut g = Graph::new();
            let (xv, kv) = (g.constant(small.clone()), g.constant(k.clone()));
            black_box(g.conv2d_transpose(xv, kv, 2, Padding::Same).unwrap());
        })
    });
    group.finish();
}

fn matmul(c: &mut Criterion) {
    let mut rng = StreamRng::seed_from_u64(2);
    let a = Tensor::<f32>::randn(&[128, 4096], &mut rng);
    let w = Tensor::<f32>::randn(&[4096, 128], &mut rng);
    c.bench_function("matmul 128x4096 * 4096x128", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (av, wv) = (g.constant(a.clone()), g.constant(w.clone()));
            black_box(g.matmul(av, wv).unwrap());
        })
    });
}

fn toy_data() -> PatchDataset<f32> {
    let mut rng = substream(3, stream::SYNTH);
    let pairs: Vec<(Tensor<f32>, Tensor<f32>)> = (0..8)
        .map(|_| {
            let clean: Tensor<f32> = face_like_scene(64, 64, &mut rng);
            (clean.map(|v| (v * 0.9 + 0.05).min(1.0)), clean)
        })
        .collect();
    PatchDataset::from_pairs(&pairs, 16, 4).unwrap()
}

fn training(c: &mut Criterion) {
    let data = toy_data();
    let cfg = TrainConfig {
        arch: ArchDescriptor::srgb(16),
        epochs_stage1: 1,
        epochs_stage2: 1,
        latent_dim: 32,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("stage 1 epoch, 200 patches", |b| b.iter(|| black_box(train_stage1(&data, &cfg).unwrap())));
    let (frozen, _) = train_stage1(&data, &cfg).unwrap();
    group.bench_function("stage 2 epoch, 200 patches, 4 decoders", |b| {
        b.iter(|| black_box(train_stage2(&data, &frozen, &cfg).unwrap()))
    });
    let (model, _) = train_stage2(&data, &frozen, &cfg).unwrap();
    let image: Tensor<f32> = face_like_scene(256, 256, &mut substream(4, stream::SYNTH));
    let spec = PatchGridSpec::for_image(16, 4, &image).unwrap();
    group.bench_function("infer 256x256", |b| b.iter(|| black_box(infer(&image, &model, &spec).unwrap())));
    group.finish();
}

fn image_ops(c: &mut Criterion) {
    let mut rng = substream(5, stream::SYNTH);
    let x: Tensor<f64> = face_like_scene(256, 256, &mut rng);
    let y = x.map(|v| (v * 0.8 + 0.1).clamp(0.0, 1.0));
    let spec = PatchGridSpec::for_image(16, 4, &x).unwrap();
    c.bench_function("ssim 256x256x3", |b| b.iter(|| black_box(ssim(&x, &y, 1.0).unwrap())));
    c.bench_function("ms_ssim 256x256x3", |b| b.iter(|| black_box(ms_ssim(&x, &y, 1.0).unwrap())));
    c.bench_function("split+assemble 256x256 D=16", |b| {
        b.iter(|| black_box(assemble(&split(&x, &spec).unwrap(), &spec).unwrap()))
    });
}

criterion_group!(benches, conv, matmul, training, image_ops);
criterion_main!(benches);
