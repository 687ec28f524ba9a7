use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use siedob_core::masks::MaskMix;
use siedob_core::pipeline::make_toy_dataset;
use siedob_core::scene::{disassemble, erase_input, DisassemblyConfig};

fn scene_ops(c: &mut Criterion) {
    let dir = std::env::temp_dir().join(format!("siedob-bench-{}", std::process::id()));
    let dataset = make_toy_dataset(&dir, 1, 64, 0).unwrap();
    let sample = &dataset.samples[0];
    let mix = MaskMix::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let masks: Vec<_> = (0..64).map(|_| mix.sample(64, 64, &mut rng)).collect();
    let config = DisassemblyConfig {
        visibility_threshold: 0.05,
        crop_size: 32,
    };
    c.bench_function("mask sampling 64px", |b| b.iter(|| mix.sample(64, 64, &mut rng)));
    let mut i = 0;
    c.bench_function("erase + disassemble 64px", |b| {
        b.iter(|| {
            let mask = &masks[i % masks.len()];
            i += 1;
            let erased = erase_input(&sample.image, mask).unwrap();
            disassemble(&erased, &sample.seg, mask, sample.instances.as_ref(), &config).unwrap()
        })
    });
    let _ = std::fs::remove_dir_all(&dir);
}

criterion_group!(benches, scene_ops);
criterion_main!(benches);
