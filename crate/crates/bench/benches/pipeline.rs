//! Hot-path benchmarks: mixing and metrics, the two model forwards, the
//! feature loss, and one full gradient step.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use sealign_core::datasim::{gen_noise, gen_source};
use sealign_core::losses::{loss_gradients, make_layer_weights, ssl_mse, LayerScheme, LossConfig};
use sealign_core::semodel::{init_se_model, SEConfig};
use sealign_core::signal::{mix_at_snr, si_sdr, Waveform};
use sealign_core::sslenc::{init_frozen_encoder, EncoderConfig};

fn rand_wave(seed: u64, n: usize) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..n).map(|_| rng.random_range(-0.7..0.7)).collect(), 8000).unwrap()
}

fn bench_signal(c: &mut Criterion) {
    let source = gen_source(1, 1.0, 8).unwrap().waveform;
    let noise = gen_noise(2, 1.0).unwrap();
    c.bench_function("mix_at_snr_1s", |b| {
        b.iter(|| mix_at_snr(black_box(&source), black_box(&noise), 5.0).unwrap())
    });
    let (mixture, _) = mix_at_snr(&source, &noise, 5.0).unwrap();
    c.bench_function("si_sdr_1s", |b| {
        b.iter(|| si_sdr(black_box(&mixture), black_box(&source)).unwrap())
    });
}

fn bench_models(c: &mut Criterion) {
    let se = init_se_model(&SEConfig::default(), 1).unwrap();
    let enc = init_frozen_encoder(&EncoderConfig::default()).unwrap();
    let wave = rand_wave(3, 8000);
    c.bench_function("enhance_1s", |b| {
        b.iter(|| se.enhance(black_box(&wave)).unwrap())
    });
    c.bench_function("encode_1s", |b| {
        b.iter(|| enc.encode(black_box(&wave)).unwrap())
    });

    let clean = rand_wave(4, 8000);
    let f_enh = enc.encode(&wave).unwrap();
    let f_clean = enc.encode(&clean).unwrap();
    let w = make_layer_weights(LayerScheme::All, 8).unwrap();
    c.bench_function("ssl_mse_all_layers", |b| {
        b.iter(|| ssl_mse(black_box(&f_enh), black_box(&f_clean), &w).unwrap())
    });
}

fn bench_gradient_step(c: &mut Criterion) {
    let se = init_se_model(&SEConfig::default(), 1).unwrap();
    let enc = init_frozen_encoder(&EncoderConfig::default()).unwrap();
    let noisy = rand_wave(5, 8000);
    let clean = rand_wave(6, 8000);
    let batch = vec![(&noisy, &clean)];
    let cfg = LossConfig::default();
    let mut group = c.benchmark_group("gradients");
    group.sample_size(10);
    group.bench_function("multitask_item", |b| {
        b.iter(|| loss_gradients(black_box(&se), &batch, &enc, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_signal, bench_models, bench_gradient_step);
criterion_main!(benches);
