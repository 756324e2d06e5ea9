mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sepp_core::{
    init_matrix, matrix_distance, sample_assignments, update_matrix, CrimeEvent, Kde1D, Kde2D,
    Kde3D, TriggerDelta, TriggerMatrix, Truncation,
};

fn catalog() -> impl Strategy<Value = Vec<CrimeEvent>> {
    prop::collection::vec((0.0..2000.0f64, 0.0..2000.0f64, 0.0..400.0f64, 0u8..4), 2..40).prop_map(
        |raw| {
            let mut events: Vec<CrimeEvent> = raw
                .into_iter()
                .enumerate()
                .map(|(k, (x, y, t, coarse))| {
                    // Coarse times make exact ties common.
                    let t = if coarse == 0 { (t / 50.0).floor() * 50.0 } else { t };
                    CrimeEvent { id: format!("e{k:03}"), x, y, t, c: t % 168.0 }
                })
                .collect();
            events.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.id.cmp(&b.id)));
            events
        },
    )
}

fn truncation() -> impl Strategy<Value = Truncation> {
    prop_oneof![
        Just(Truncation::default()),
        Just(Truncation::unbounded()),
        (1.0..200.0f64, 10.0..1500.0f64).prop_map(|(h, r)| Truncation { horizon_hours: h, radius_m: r }),
    ]
}

fn assert_valid(p: &TriggerMatrix, events: &[CrimeEvent]) {
    let dense = p.to_dense();
    for j in 0..p.n() {
        let sum: f64 = (0..p.n()).map(|i| dense[i][j]).sum();
        assert!((sum - 1.0).abs() < 1e-9, "column {j} sums to {sum}");
        for (i, row) in dense.iter().enumerate().skip(j + 1) {
            assert_eq!(row[j], 0.0, "entry ({i}, {j}) below the diagonal");
        }
        for (i, v) in p.parents(j) {
            assert!(v > 0.0 && events[i].t < events[j].t, "parent {i} of {j}");
        }
    }
}

fn components(events: &[CrimeEvent], hs: f64, ht: f64, deltas: &[TriggerDelta]) -> (Kde2D, Kde1D, Kde3D) {
    let points: Vec<[f64; 2]> = events.iter().map(|e| [e.x, e.y]).collect();
    let circ: Vec<f64> = events.iter().map(|e| e.c).collect();
    let mu = Kde2D::fit_with_bandwidth(&points, hs).unwrap();
    let nu = Kde1D::fit_with_bandwidth(&circ, ht).unwrap();
    let g = if deltas.len() >= 2 {
        Kde3D::fit_with_bandwidths(deltas, hs, ht, deltas.len().max(events.len())).unwrap()
    } else {
        Kde3D::zero(hs, ht)
    };
    (mu, nu, g)
}

proptest! {
    #![proptest_config(common::config(128))]

    #[test]
    fn init_is_column_stochastic_and_upper_triangular(
        events in catalog(),
        alpha in 0.001..1.0f64,
        beta in 5.0..1000.0f64,
        trunc in truncation(),
    ) {
        let p = init_matrix(&events, alpha, beta, &trunc).unwrap();
        assert_valid(&p, &events);
    }

    #[test]
    fn update_is_column_stochastic_and_upper_triangular(
        events in catalog(),
        hs in 10.0..500.0f64,
        ht in 0.5..72.0f64,
        raw_deltas in prop::collection::vec((-300.0..300.0f64, -300.0..300.0f64, 0.01..200.0f64), 0..30),
        horizon in 50.0..2000.0f64,
        trunc in truncation(),
    ) {
        let deltas: Vec<TriggerDelta> = raw_deltas.into_iter().map(|(dx, dy, dt)| TriggerDelta { dx, dy, dt }).collect();
        let (mu, nu, g) = components(&events, hs, ht, &deltas);
        let p = update_matrix(&events, &mu, &nu, &g, horizon, &trunc).unwrap();
        assert_valid(&p, &events);
    }

    #[test]
    fn sampled_assignments_partition_the_catalog(events in catalog(), seed in any::<u64>()) {
        let p = init_matrix(&events, 0.03, 100.0, &Truncation::default()).unwrap();
        let draw = sample_assignments(&p, &events, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(draw.background.len() + draw.triggered.len(), events.len());
        for (j, parent) in draw.parents.iter().enumerate() {
            if let Some(i) = parent {
                prop_assert!(p.get(*i, j) > 0.0);
            }
        }
        prop_assert!(draw.triggered.iter().all(|d| d.dt > 0.0));
    }

    #[test]
    fn distance_is_a_metric(
        events in catalog(),
        a in 0.001..1.0f64,
        b in 0.001..1.0f64,
        c in 0.001..1.0f64,
        beta in 5.0..1000.0f64,
    ) {
        let trunc = Truncation::default();
        let pa = init_matrix(&events, a, beta, &trunc).unwrap();
        let pb = init_matrix(&events, b, beta * 1.5, &trunc).unwrap();
        let pc = init_matrix(&events, c, beta * 0.5, &trunc).unwrap();
        let d = |x: &TriggerMatrix, y: &TriggerMatrix| matrix_distance(x, y).unwrap();
        prop_assert_eq!(d(&pa, &pa), 0.0);
        prop_assert_eq!(d(&pa, &pb), d(&pb, &pa));
        prop_assert!(d(&pa, &pc) <= d(&pa, &pb) + d(&pb, &pc) + 1e-12);
        // Dense oracle.
        let (da, db) = (pa.to_dense(), pb.to_dense());
        let oracle: f64 = da.iter().flatten().zip(db.iter().flatten()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        prop_assert!((d(&pa, &pb) - oracle).abs() <= 1e-12 * (1.0 + oracle));
    }
}
