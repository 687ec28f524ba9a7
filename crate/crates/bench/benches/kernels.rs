use candle_core::{DType, Device, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use siedob_core::background::{BackgroundGenerator, BackgroundGeneratorConfig, BackgroundInput};
use siedob_core::metrics::proxy_frechet;
use siedob_core::modulation::Saspm;
use siedob_core::nn::{conv2d, ParamStore};
use siedob_core::objectives::{perceptual_loss, FeaturePyramid};

const CLASSES: usize = 5;

fn randn(shape: &[usize]) -> Tensor {
    Tensor::randn(0f32, 1.0, shape, &Device::Cpu).unwrap()
}

fn one_hot(b: usize, h: usize, w: usize) -> Tensor {
    let labels: Vec<u32> = (0..b * h * w).map(|i| ((i / w) * CLASSES / h.max(1)) as u32 % CLASSES as u32).collect();
    let labels = Tensor::from_vec(labels, (b, h, w), &Device::Cpu).unwrap();
    let classes = Tensor::arange(0u32, CLASSES as u32, &Device::Cpu).unwrap().reshape((1, CLASSES, 1, 1)).unwrap();
    labels.unsqueeze(1).unwrap().broadcast_eq(&classes).unwrap().to_dtype(DType::F32).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = randn(&[4, 16, 64, 64]);
    let w3 = randn(&[16, 16, 3, 3]);
    let w5 = randn(&[16, 16, 5, 5]);
    c.bench_function("conv2d 16->16 3x3 @64 b4", |b| b.iter(|| conv2d(&x, &w3, 1, 1).unwrap()));
    c.bench_function("conv2d 16->16 5x5 @64 b4", |b| b.iter(|| conv2d(&x, &w5, 1, 2).unwrap()));
}

fn saspm(c: &mut Criterion) {
    let mut store = ParamStore::new(0, DType::F32);
    let flags = vec![true, true, true, false, false];
    let block = Saspm::new(&mut store, "saspm", 32, 32, 16, flags).unwrap();
    let features = randn(&[4, 32, 32, 32]);
    let seg = one_hot(4, 32, 32);
    let known = Tensor::ones((4, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
    c.bench_function("saspm 32ch @32 b4", |b| b.iter(|| block.forward(&features, &seg, &known).unwrap()));
}

fn background_forward(c: &mut Criterion) {
    let config = BackgroundGeneratorConfig {
        base_width: 16,
        num_down: 4,
        num_saspm: 3,
        scene_size: 64,
        head_hidden: 16,
        max_width: 128,
    };
    let flags = vec![true, true, true, false, false];
    let gen = BackgroundGenerator::new(ParamStore::new(1, DType::F32), config, CLASSES, flags).unwrap();
    let input = BackgroundInput {
        image: randn(&[1, 3, 64, 64]),
        one_hot: one_hot(1, 64, 64),
        hole: Tensor::zeros((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap(),
        known: Tensor::ones((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap(),
    };
    c.bench_function("background generator forward 64px", |b| b.iter(|| gen.forward(&input).unwrap()));
}

fn feature_metrics(c: &mut Criterion) {
    let pyramid = FeaturePyramid::new(0, DType::F32).unwrap();
    let a = randn(&[16, 3, 64, 64]).tanh().unwrap();
    let b2 = randn(&[16, 3, 64, 64]).tanh().unwrap();
    c.bench_function("perceptual loss b16 @64", |b| b.iter(|| perceptual_loss(&a, &b2, &pyramid).unwrap()));
    c.bench_function("proxy frechet 16 vs 16 @64", |b| b.iter(|| proxy_frechet(&a, &b2, &pyramid).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, saspm, background_forward, feature_metrics
}
criterion_main!(benches);
