use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nerf_analogy::correspondence::{assemble_training_set, build_mapping, sample_points, FeaturePointCloud};
use nerf_analogy::features::{builtin_descriptor, DescriptorConfig};
use nerf_analogy::field::{EncodingConfig, FieldArch, FieldInput, FieldParameters};
use nerf_analogy::scene::{presets, render_gbuffer, sample_camera_sphere, CameraPose, Intrinsics};
use nerf_analogy::training::{train, TrainConfig};

// Each workload runs inside a one-thread pool and a pool sized like the global one. Build with
// `--no-default-features` to measure the plain sequential code path instead.
fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let n = rayon::current_num_threads();
    [("sequential_pool", 1), ("default_pool", n)].map(|(k, t)| (format!("{k}_{t}t"), rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap())).into()
}

fn cameras(count: usize, seed: u64, size: u32) -> Vec<CameraPose> {
    sample_camera_sphere(count, 4.0, seed, Intrinsics { fov_y: 40f64.to_radians(), width: size, height: size })
}

fn cloud(seed: u64, per_view: usize) -> FeaturePointCloud {
    let scene = presets::checker_pair();
    let views: Vec<_> = cameras(8, seed, 48)
        .iter()
        .map(|c| {
            let g = render_gbuffer(&scene, c).unwrap();
            let f = builtin_descriptor(&g, &DescriptorConfig::default()).unwrap();
            (g, f)
        })
        .collect();
    sample_points(&views, per_view, seed + 1).unwrap()
}

fn bench_render(c: &mut Criterion) {
    let scene = presets::torus_cone();
    let cam = cameras(1, 3, 128).remove(0);
    let mut g = c.benchmark_group("render_gbuffer_128");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(&name), |b| b.iter(|| pool.install(|| render_gbuffer(&scene, &cam).unwrap())));
    }
    g.finish();
}

fn bench_mapping(c: &mut Criterion) {
    let (t, s) = (cloud(1, 400), cloud(5, 400));
    let mut g = c.benchmark_group("build_mapping_3200x3200_k4");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(&name), |b| b.iter(|| pool.install(|| build_mapping(&t, &s, 4, None).unwrap())));
    }
    g.finish();
}

fn bench_forward(c: &mut Criterion) {
    let p = FieldParameters::<f32>::new(EncodingConfig::default(), FieldArch::default(), 0).unwrap();
    let inputs: Vec<FieldInput<f32>> = (0..512)
        .map(|i| {
            let t = i as f32 / 512.0;
            FieldInput { position: [t, 1.0 - t, 0.5 * t], normal: [0.0, 1.0, 0.0], view_dir: [0.0, 0.0, 1.0] }
        })
        .collect();
    let mut g = c.benchmark_group("forward_batch_512_default_arch");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(&name), |b| b.iter(|| pool.install(|| p.forward_batch(&inputs).unwrap())));
    }
    g.finish();
}

fn bench_train(c: &mut Criterion) {
    let (t, s) = (cloud(1, 200), cloud(5, 200));
    let samples = assemble_training_set(&build_mapping(&t, &s, 4, None).unwrap(), &t, &s);
    let cfg = TrainConfig { total_iters: 20, batch_size: 256, lambda_max: 0.0, arch: FieldArch::tiny(), ..TrainConfig::default() };
    let mut g = c.benchmark_group("train_20_iters_tiny");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(&name), |b| b.iter(|| pool.install(|| train(&samples, &[], &cfg).unwrap())));
    }
    g.finish();
}

criterion_group!(benches, bench_render, bench_mapping, bench_forward, bench_train);
criterion_main!(benches);
