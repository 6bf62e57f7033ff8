use criterion::{criterion_group, criterion_main, Criterion};

use hpdm::denoiser::{Denoiser, DenoiserConfig};
use hpdm::diffusion::NoiseSchedule;
use hpdm::numerics::Tensor;
use hpdm::patchgeom::PyramidSpec;
use hpdm::train::forward_backward;
use hpdm::{par, rng};

fn setup(load: Vec<usize>) -> (Denoiser, PyramidSpec, Tensor<f32>) {
    let cfg = DenoiserConfig {
        num_blocks: load.len(),
        num_levels_per_block: load,
        ..DenoiserConfig::default()
    };
    let spec = PyramidSpec::new(cfg.levels, cfg.patch, cfg.patch.map(|r| r << (cfg.levels - 1))).unwrap();
    let video = Tensor::randn(&[3, spec.full[0], spec.full[1], spec.full[2]], 0.5, &mut rng::stream(0, &[]));
    (Denoiser::new(cfg, 0).unwrap(), spec, video)
}

fn threads(c: &mut Criterion) {
    let (model, spec, video) = setup(vec![1, 2, 3]);
    let schedule = NoiseSchedule::default();
    let mut g = c.benchmark_group("forward_backward");
    g.sample_size(10);
    g.bench_function("default pool", |b| {
        b.iter(|| forward_backward(&model, &spec, &schedule, &video, 4, 0).unwrap())
    });
    g.bench_function("one thread", |b| {
        b.iter(|| par::with_threads(1, || forward_backward(&model, &spec, &schedule, &video, 4, 0).unwrap()))
    });
    g.finish();
}

fn adaptive(c: &mut Criterion) {
    let schedule = NoiseSchedule::default();
    let mut g = c.benchmark_group("load_vector");
    g.sample_size(10);
    for (name, load) in [("adaptive", vec![1, 1, 2, 2, 3, 3]), ("flat", vec![3; 6])] {
        let (model, spec, video) = setup(load);
        g.bench_function(name, |b| {
            b.iter(|| forward_backward(&model, &spec, &schedule, &video, 2, 0).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, threads, adaptive);
criterion_main!(benches);
