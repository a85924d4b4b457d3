use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqab_bench::fixture;
use vqab_core::codec::ModelConfig;
use vqab_core::nn::ParamStore;
use vqab_core::{Codebook, PcaModel, Tape, VqModel};

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for &ch in &[8usize, 32] {
        let x = fixture(&[2, ch, 16, 16], 1);
        let w = fixture(&[ch, ch, 3, 3], 2);
        g.bench_with_input(BenchmarkId::new("forward", ch), &ch, |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                tape.constant(x.clone()).conv2d(tape.constant(w.clone()), None, 1, 1).unwrap().value()
            })
        });
        g.bench_with_input(BenchmarkId::new("forward_backward", ch), &ch, |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                let (xv, wv) = (tape.var(x.clone()), tape.var(w.clone()));
                let y = xv.conv2d(wv, None, 1, 1).unwrap().square().sum();
                tape.backward(y).unwrap()
            })
        });
    }
    g.finish();
}

fn quantize(c: &mut Criterion) {
    let mut g = c.benchmark_group("quantize");
    for &(k, d) in &[(32usize, 8usize), (1024, 256)] {
        let mut store = ParamStore::new();
        let mut book = Codebook::new(&mut store, "cb", k, d, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let z = fixture(&[5, d, 16, 16], 3);
        g.bench_function(BenchmarkId::new("5x16x16", format!("K{k}_D{d}")), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let p = store.bind(&tape);
                book.quantize(tape.constant(z.clone()), p.get(book.embeddings)).unwrap().indices
            })
        });
    }
    g.finish();
}

fn model_step(c: &mut Criterion) {
    let cfg = ModelConfig {
        base_channels: 8,
        ..ModelConfig::desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let mut model = VqModel::new(cfg, &mut store, &mut rng).unwrap();
    let x = fixture(&[5, 3, 32, 32], 4);
    c.bench_function("vq_model/forward_backward_desk", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let out = model.forward(&p, tape.constant(x.clone()), true, &mut rng).unwrap();
            let loss = out.x_hat.sub(tape.constant(x.clone())).unwrap().abs().mean();
            tape.backward(loss).unwrap()
        })
    });
}

fn pca_fit(c: &mut Criterion) {
    let mut g = c.benchmark_group("pca_fit");
    g.sample_size(10);
    for &(m, s) in &[(65usize, 32usize), (200, 16)] {
        let images: Vec<_> = (0..m).map(|i| fixture(&[3, s, s], i as u64)).collect();
        g.bench_function(BenchmarkId::new(format!("{m}_images"), s), |b| {
            b.iter(|| PcaModel::fit(&images, Some(50)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, conv, quantize, model_step, pca_fit);
criterion_main!(benches);
