use advnorm_core::eval::dice_score;
use advnorm_core::losses::dice_loss;
use advnorm_core::nn::ops::{conv3d_forward, ConvGeometry};
use advnorm_core::phantom::{self, PhantomConfig};
use advnorm_core::pipeline::extract_patches;
use advnorm_core::{Generator, NetworksConfig, SoftSegmentation, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (name, g, side) in [
        ("conv3d same 8->8 16^3", ConvGeometry::same(8, 8, 3), 16),
        ("conv3d strided 8->16 16^3", ConvGeometry::strided(8, 16, 3, 2), 16),
    ] {
        let x = Tensor::from_vec(g.in_ch, [side; 3], random(&mut rng, g.in_ch * side * side * side)).unwrap();
        let w = random(&mut rng, g.weight_shape().iter().product());
        let b = random(&mut rng, g.out_ch);
        c.bench_function(name, |bench| bench.iter(|| conv3d_forward(black_box(&x), &w, &b, &g)));
    }
    let gen = Generator::new(&NetworksConfig::default().generator, 1).unwrap();
    let x = Tensor::from_vec(1, [16; 3], random(&mut rng, 4096)).unwrap();
    c.bench_function("generator forward 16^3", |bench| bench.iter(|| gen.forward(black_box(&x)).unwrap()));
}

fn dice(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 32 * 32 * 32;
    let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let b: Vec<u8> = (0..n).map(|_| rng.random_range(0..4)).collect();
    c.bench_function("dice_score 32^3", |bench| bench.iter(|| dice_score(black_box(&a), &b, 2).unwrap()));

    let side = 16;
    let v = side * side * side;
    let mut probs = Vec::with_capacity(4 * v);
    let raw: Vec<f64> = (0..4 * v).map(|_| rng.random_range(0.01..1.0)).collect();
    for c in 0..4 {
        for i in 0..v {
            let total: f64 = (0..4).map(|k| raw[k * v + i]).sum();
            probs.push(raw[c * v + i] / total);
        }
    }
    let s = SoftSegmentation(Tensor::from_vec(4, [side; 3], probs).unwrap());
    let labels: Vec<u8> = (0..v).map(|_| rng.random_range(0..4)).collect();
    c.bench_function("dice_loss 16^3", |bench| bench.iter(|| dice_loss(black_box(&s), &labels, &[0.25; 4], 1e-8).unwrap()));
}

fn patches(c: &mut Criterion) {
    let config = PhantomConfig { volumes_per_domain: 1, ..PhantomConfig::default() };
    let sample = phantom::generate_samples(&config).unwrap().remove(0);
    c.bench_function("extract_patches P=16 stride 8", |bench| bench.iter(|| extract_patches(black_box(&sample), 16, 8).unwrap()));
}

criterion_group!(benches, conv, dice, patches);
criterion_main!(benches);
