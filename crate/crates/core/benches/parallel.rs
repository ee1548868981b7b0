use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dynpatch::attack::{chain_objective_grad, AttackFrame, ObjectiveSpec};
use dynpatch::detector::{Detector, DetectorConfig};
use dynpatch::par::Exec;
use dynpatch::raster::Image;
use dynpatch::scenesim::{generate_driving_dataset, ObjectClass, PhotometricModel, SceneConfig, TrajectorySpec};
use dynpatch::sitnet::{SitHead, SitNet};

fn modes() -> Vec<(&'static str, Exec)> {
    let mut m = vec![("sequential", Exec::Sequential)];
    #[cfg(feature = "parallel")]
    m.push(("parallel", Exec::Parallel));
    m
}

fn bench_chain_gradient(c: &mut Criterion) {
    let scene = SceneConfig::default();
    let traj = TrajectorySpec::default();
    let frames = generate_driving_dataset(&scene, &PhotometricModel::default(), &traj, 8, 3).unwrap();
    let attack: Vec<AttackFrame> = frames.iter().map(|f| AttackFrame::new(f, 64).unwrap()).collect();
    let refs: Vec<&AttackFrame> = attack.iter().collect();
    let detector = Detector::new(DetectorConfig::default()).unwrap();
    let sitnet = SitNet::new(16, 3, SitHead::Sigmoid, 0).unwrap();
    let patch = Image::filled(3, 64, 64, 0.5);
    let spec = ObjectiveSpec {
        target: ObjectClass::Stop,
        top_k: 3,
        tau: 0.05,
    };
    let mut group = c.benchmark_group("chain_objective_grad_8_frames");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| chain_objective_grad(&refs, &patch, &detector, &sitnet, &spec, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let detector = Detector::new(DetectorConfig::default()).unwrap();
    let images: Vec<Image> = (0..16).map(|i| Image::filled(3, 128, 128, i as f64 / 16.0)).collect();
    let mut group = c.benchmark_group("detector_forward_16_images");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| exec.map(&images, |img| detector.forward(img).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_chain_gradient, bench_forward);
criterion_main!(benches);
