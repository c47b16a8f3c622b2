use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use degan_bench::{model, synthetic};
use degan_core::data::augment;
use degan_core::losses::softmax_cross_entropy;
use degan_core::nn::{init_weights, ConvGeom, Conv2d};
use degan_core::stage1::{sample_batch, train_step, Stage1Config, Stage1Models, TrainState};
use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let mut layer = Conv2d::<f32>::new("bench", 64, 128, ConvGeom::new(4, 2, 1), false);
    init_weights(&mut layer, 0, 0.02);
    // channel-major (C, N, H, W)
    let x = Array4::from_shape_fn((64, 32, 24, 24), |(c, n, h, w)| ((c * 7 + n * 3 + h + w) % 17) as f32 / 17.0 - 0.5);
    let (y, cache) = layer.forward(&x).unwrap();
    let dy = y.mapv(|v| v * 0.1);
    let mut g = c.benchmark_group("conv4x4s2_64to128_b32_24px");
    g.bench_function("forward", |b| b.iter(|| layer.forward(black_box(&x)).unwrap()));
    g.bench_function("backward", |b| b.iter(|| layer.backward(black_box(&cache), black_box(&dy), true)));
    g.finish();
}

fn loss(c: &mut Criterion) {
    let logits = Array2::from_shape_fn((150, 8), |(i, j)| ((i * 31 + j * 7) % 13) as f64 * 0.3 - 1.5);
    let labels: Vec<usize> = (0..150).map(|i| i % 8).collect();
    c.bench_function("softmax_ce_150x8", |b| b.iter(|| softmax_cross_entropy(black_box(&logits), &labels).unwrap()));
}

fn augmentation(c: &mut Criterion) {
    let data = synthetic(1, 1, 1);
    let img = &data.images[0];
    c.bench_function("augment_110_48to40", |b| b.iter(|| augment(black_box(img), 40).unwrap()));
}

fn stage1_step(c: &mut Criterion) {
    let data = synthetic(5, 4, 20);
    let cfg = Stage1Config { batch_size: 64, ..Default::default() };
    let m = model(5, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = sample_batch::<f32>(&data, cfg.batch_size, m.noise_dim, &mut rng).unwrap();
    let models = Stage1Models::<f32>::new(&m, cfg.adam(), 0).unwrap();
    let mut g = c.benchmark_group("stage1");
    g.sample_size(10).measurement_time(Duration::from_secs(20));
    g.bench_function("train_step_b64_default_widths", |b| {
        b.iter_batched(
            || (TrainState::default(), models.clone()),
            |(mut state, mut models)| train_step(&mut state, &mut models, &batch, &cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, conv, loss, augmentation, stage1_step);
criterion_main!(benches);
