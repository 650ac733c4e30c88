use cerberus_bench::{frame, pool, scores, vector};
use cerberus_core::eval::auc;
use cerberus_core::motion::{
    extract_regions, motion_mask, motion_proportion, prompt_frame, GrayFrame, MotionField, MotionSettings, RegionConfig,
};
use cerberus_core::scoring::health_score;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn scoring(c: &mut Criterion) {
    let mut g = c.benchmark_group("health_score");
    for n in [64, 512, 4096] {
        let p = pool(n, 512);
        let q = vector(999, 512);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| health_score(black_box(&q), &p, 5).unwrap()));
    }
    g.finish();
}

fn motion(c: &mut Criterion) {
    let (a, b) = (frame(640, 360, 40), frame(640, 360, 48));
    let (ga, gb) = (GrayFrame::from_rgb(&a), GrayFrame::from_rgb(&b));
    c.bench_function("motion_proportion/640x360", |bench| bench.iter(|| motion_proportion(black_box(&ga), &gb).unwrap()));

    let regions = RegionConfig::default();
    let field = MotionField::between(&ga, &gb).unwrap();
    let mask = motion_mask(&field, regions.pixel_threshold);
    c.bench_function("extract_regions/640x360", |bench| {
        bench.iter(|| extract_regions(black_box(&mask), &field, regions.min_area, regions.dilation_radius).unwrap())
    });

    let settings = MotionSettings { epsilon_motion: 7e-4, alpha_prompt: 1.2e-3, regions };
    c.bench_function("prompt_frame/640x360", |bench| bench.iter(|| prompt_frame(Some(&ga), black_box(&gb), &b, &settings).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let (s, l) = scores(20_000);
    c.bench_function("auc/20000", |b| b.iter(|| auc(black_box(&s), &l).unwrap()));
}

criterion_group!(benches, scoring, motion, metrics);
criterion_main!(benches);
