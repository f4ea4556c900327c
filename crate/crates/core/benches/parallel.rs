//! Parallel versus single-threaded execution of the heavy kernels.
//!
//! Each benchmark runs inside a one-thread rayon pool and inside the default
//! pool. Building with `--no-default-features` removes rayon entirely; both
//! groups then measure the sequential code path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vaanet::model::{Batch, ModelConfig, Vaanet};
use vaanet::numerics::{Graph, Tensor};
use vaanet::params::Binder;

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let default = rayon::ThreadPoolBuilder::new().build().unwrap();
    let n = default.current_num_threads();
    vec![
        ("single".into(), rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        (format!("pool-{n}"), default),
    ]
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn conv3d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&[4, 16, 8, 16, 16], &mut rng);
    let w = random(&[16, 16, 3, 3, 3], &mut rng);
    let mut group = c.benchmark_group("conv3d_fwd_bwd");
    group.sample_size(20);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                pool.install(|| {
                    let mut g = Graph::new();
                    let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
                    let y = g.conv3d(xv, wv, [1, 1, 1], [1, 1, 1]).unwrap();
                    let s = g.sum(y).unwrap();
                    g.backward(s).unwrap();
                })
            })
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let cfg = ModelConfig::desk(4);
    let model = Vaanet::new(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = Batch {
        visual: Some(Tensor::from_fn(&[8, cfg.t, cfg.k, cfg.crop, cfg.crop, 3], |_| rng.gen_range(0.0..1.0))),
        audio: Some(random(&[8, cfg.t, cfg.n_mfcc, cfg.segment_frames], &mut rng)),
        labels: (0..8).map(|i| i % 4).collect(),
    };
    let mut group = c.benchmark_group("desk_forward_backward");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                pool.install(|| {
                    let mut g = Graph::new();
                    let mut binder = Binder::new(&model.store, true);
                    let out = model.forward(&mut g, &mut binder, &batch).unwrap();
                    let loss = vaanet::loss::weighted_nll_loss(&mut g, out.logits, &batch.labels, &[1.0; 8]).unwrap();
                    g.backward(loss).unwrap();
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv3d, train_step);
criterion_main!(benches);
