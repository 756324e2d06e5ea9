use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepp_core::kde::{loo_profile_2d, loo_profile_triggering};
use sepp_core::{
    cell_expected_count, init_matrix, simulate, update_matrix, wilcoxon_signed_rank, Alternative,
    BandwidthGrid, CrimeEvent, GeoPoint, GroundTruth, Kde1D, Kde2D, Kde3D, Slot, Truncation,
    TriggerDelta, WEEK_HOURS,
};

fn events() -> Vec<CrimeEvent> {
    let truth = GroundTruth { horizon_hours: 6.0 * WEEK_HOURS, ..GroundTruth::default() };
    let epoch = chrono_epoch();
    simulate(&truth, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap()
        .into_catalog(epoch, GeoPoint::new(0.0, 0.0), 0.0)
        .unwrap()
        .events()
        .to_vec()
}

fn chrono_epoch() -> chrono::NaiveDateTime {
    chrono::NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

fn deltas(n: usize) -> Vec<TriggerDelta> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    (0..n)
        .map(|_| TriggerDelta {
            dx: rng.random_range(-200.0..200.0),
            dy: rng.random_range(-200.0..200.0),
            dt: rng.random_range(0.1..100.0),
        })
        .collect()
}

fn kde(c: &mut Criterion) {
    let ev = events();
    let points: Vec<[f64; 2]> = ev.iter().map(|e| [e.x, e.y]).collect();
    let mu = Kde2D::fit_with_bandwidth(&points, 150.0).unwrap();
    let g = Kde3D::fit_with_bandwidths(&deltas(300), 40.0, 6.0, 1000).unwrap();
    c.bench_function("kde2d_density", |b| b.iter(|| mu.density(black_box(1500.0), black_box(1200.0))));
    c.bench_function("kde3d_density", |b| b.iter(|| g.density(black_box(20.0), black_box(-15.0), black_box(12.0))));
    let grid = BandwidthGrid::default_spatial();
    c.bench_function("loo_profile_2d", |b| b.iter(|| loo_profile_2d(black_box(&points), grid.values()).unwrap()));
    let ds = deltas(300);
    let space = BandwidthGrid::default_spatial();
    let time = BandwidthGrid::default_temporal();
    c.bench_function("loo_profile_triggering", |b| {
        b.iter(|| loo_profile_triggering(black_box(&ds), space.values(), time.values()).unwrap())
    });
}

fn trigger_matrix(c: &mut Criterion) {
    let ev = events();
    let trunc = Truncation::default();
    let points: Vec<[f64; 2]> = ev.iter().map(|e| [e.x, e.y]).collect();
    let circ: Vec<f64> = ev.iter().map(|e| e.c).collect();
    let mu = Kde2D::fit_with_bandwidth(&points, 150.0).unwrap();
    let nu = Kde1D::fit_with_bandwidth(&circ, 4.0).unwrap();
    let g = Kde3D::fit_with_bandwidths(&deltas(200), 40.0, 6.0, ev.len()).unwrap();
    let horizon = ev[ev.len() - 1].t - ev[0].t;
    c.bench_function("init_matrix", |b| b.iter(|| init_matrix(black_box(&ev), 0.03, 100.0, &trunc).unwrap()));
    c.bench_function("update_matrix", |b| {
        b.iter(|| update_matrix(black_box(&ev), &mu, &nu, &g, horizon, &trunc).unwrap())
    });
}

fn forecast(c: &mut Criterion) {
    let ev = events();
    let points: Vec<[f64; 2]> = ev.iter().map(|e| [e.x, e.y]).collect();
    let model = sepp_core::TrainedModel {
        mu: Kde2D::fit_with_bandwidth(&points, 150.0).unwrap(),
        nu: Kde1D::fit_with_bandwidth(&ev.iter().map(|e| e.c).collect::<Vec<_>>(), 4.0).unwrap(),
        g: Kde3D::fit_with_bandwidths(&deltas(200), 40.0, 6.0, ev.len()).unwrap(),
        history: sepp_core::EventCatalog::new(ev.clone(), chrono_epoch(), GeoPoint::new(0.0, 0.0), 0.0).unwrap(),
        time_horizon_hours: 6.0 * WEEK_HOURS,
        truncation: Truncation::default(),
        diagnostics: Default::default(),
    };
    let slot = Slot::new(6.0 * WEEK_HOURS + 6.0, 6.0 * WEEK_HOURS + 14.0).unwrap();
    let rect = [1400.0, 1400.0, 1550.0, 1550.0];
    c.bench_function("cell_expected_count_64", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        b.iter(|| cell_expected_count(&model, black_box(&ev), rect, slot, 64, &mut rng))
    });
}

fn wilcoxon(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let small: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.2)).collect();
    let large: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..1.2)).collect();
    c.bench_function("wilcoxon_exact_20", |b| b.iter(|| wilcoxon_signed_rank(black_box(&small), Alternative::TwoSided).unwrap()));
    c.bench_function("wilcoxon_normal_500", |b| b.iter(|| wilcoxon_signed_rank(black_box(&large), Alternative::TwoSided).unwrap()));
}

criterion_group!(benches, kde, trigger_matrix, forecast, wilcoxon);
criterion_main!(benches);
