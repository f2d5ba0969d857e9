use criterion::{black_box, criterion_group, criterion_main, Criterion};
use txloc::data::{generate_samples, sensor_batch};
use txloc::detection::{non_max_suppression, simple_peak_locate, SimplePeakParams};
use txloc::encoding::render_label;
use txloc::power::{collect_records, fit_correction};
use txloc::scene::SensorLayout;
use txloc::*;

fn setup(n: u64) -> (RadioEnvironment, FieldConfig, SensorLayout, Vec<Sample>) {
    let env = RadioEnvironment::default();
    let field = FieldConfig { num_intruders: Count::Fixed(5), ..Default::default() };
    let layout = SensorLayout::sample(&field, &mut SeedTree::new(0).stream("layout", 0)).unwrap();
    let samples = generate_samples(&env, &field, &layout, &SeedTree::new(1), 0..n).unwrap();
    (env, field, layout, samples)
}

fn generation(c: &mut Criterion) {
    let (env, field, layout, _) = setup(0);
    let seeds = SeedTree::new(2);
    c.bench_function("generate_sample_5tx", |b| {
        let mut i = 0;
        b.iter(|| {
            i += 1;
            black_box(generate_samples(&env, &field, &layout, &seeds, i..i + 1).unwrap())
        })
    });
}

fn peaks(c: &mut Criterion) {
    let (_, _, _, samples) = setup(1);
    let label = render_label(&samples[0].intruder_locations(), 100, &PeakSpec::default());
    let params = SimplePeakParams::default();
    c.bench_function("simple_peak_locate", |b| b.iter(|| simple_peak_locate(black_box(label.0.view()), &params)));

    let boxes: Vec<DetectionBox> = (0..200)
        .map(|k| {
            let (x, y) = ((k * 37 % 100) as f64, (k * 53 % 100) as f64);
            DetectionBox { cx: x, cy: y, w: 9.0, h: 9.0, confidence: (k % 17) as f64 / 17.0 }
        })
        .collect();
    c.bench_function("nms_200", |b| b.iter(|| non_max_suppression(black_box(&boxes), 0.5)));
}

fn networks(c: &mut Criterion) {
    let (env, _, _, samples) = setup(8);
    let net = Sen2Peak::new(0);
    let det = Detector::new(0);
    let input = sensor_batch(&samples, env.noise_floor).unwrap();
    let mut group = c.benchmark_group("localize_batch8");
    group.sample_size(10);
    for variant in [Variant::SimplePeak, Variant::Detector] {
        let loc = Localizer::new(&net, Some(&det), variant);
        group.bench_function(format!("{variant:?}"), |b| b.iter(|| loc.localize_batch(&input).unwrap()));
    }
    group.finish();
}

fn correction(c: &mut Criterion) {
    let (_, _, _, samples) = setup(500);
    let rule = IsolationRule::default();
    let records: Vec<_> = samples
        .iter()
        .flat_map(|s| {
            let est: Vec<(Point, f64)> = s.intruder_locations().into_iter().zip(s.intruder_powers()).map(|(p, w)| (p, w + 1.0)).collect();
            let truth: Vec<Option<f64>> = s.intruder_powers().into_iter().map(Some).collect();
            collect_records(&est, &truth, &rule)
        })
        .collect();
    c.bench_function("fit_correction", |b| b.iter(|| fit_correction(black_box(&records), 0.01, rule.neighbor_radius).unwrap()));
}

criterion_group!(benches, generation, peaks, networks, correction);
criterion_main!(benches);
