use chrono::{TimeDelta, TimeZone, Utc};
use maqi_core::guidance::{plan_route, RouteLattice, RouteQuery};
use maqi_core::wire::{decode_batch, encode_batch};
use maqi_core::{
    build_adaptive_grid, fuse_cell, BoundingBox, CellStats, EdgeNode, FusionWeights, GeoPoint, GridConfig,
    PollutantKind, PollutantVector, SensorSample, SourceClass, TimeSlot,
};
use proptest::prelude::*;

fn slot() -> TimeSlot {
    TimeSlot::containing(Utc.with_ymd_and_hms(2017, 5, 15, 12, 0, 0).unwrap(), TimeSlot::HOUR)
}

prop_compose! {
    fn arb_sample(id: usize)(
        lon in 113.7f64..=115.1,
        lat in 29.9f64..=31.4,
        secs in 0i64..3600,
        class in 0usize..3,
        values in prop::array::uniform6(prop::option::weighted(0.8, 0.0f64..500.0)),
    ) -> Option<SensorSample> {
        let values = PollutantVector::new(values).ok()?;
        Some(SensorSample {
            sample_id: format!("p{id}").as_str().into(),
            location: GeoPoint::new(lon, lat).unwrap(),
            timestamp: slot().start() + TimeDelta::seconds(secs),
            source: SourceClass::ALL[class],
            reporter_id: None,
            values,
        })
    }
}

fn arb_samples(max: usize) -> impl Strategy<Value = Vec<SensorSample>> {
    (0..=max).prop_flat_map(|n| (0..n).map(arb_sample).collect::<Vec<_>>()).prop_map(|v| v.into_iter().flatten().collect())
}

fn arb_weights() -> impl Strategy<Value = FusionWeights> {
    (0.0f64..1.0, 0.0f64..1.0, 0.01f64..1.0).prop_filter_map("weights", |(a, b, c)| {
        let s = a + b + c;
        FusionWeights::new(a / s, b / s, c / s).ok()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn more_samples_only_refine_the_grid(
        samples in arb_samples(120),
        cut in 0usize..120,
        threshold in 1u64..10,
        depth in 1u8..10,
    ) {
        let config = GridConfig { split_threshold: threshold, max_depth: depth, min_cell_deg: 0.0 };
        let cut = cut.min(samples.len());
        let small = build_adaptive_grid(&samples[..cut], slot(), BoundingBox::WUHAN, config).unwrap();
        let full = build_adaptive_grid(&samples, slot(), BoundingBox::WUHAN, config).unwrap();
        for key in full.cells.keys() {
            let covered = small.cells.is_empty() || small.cells.keys().any(|k| k.is_prefix_of(key));
            prop_assert!(covered, "{key} is coarser than the smaller grid");
        }
    }

    #[test]
    fn fused_value_lies_between_class_means(samples in arb_samples(60), weights in arb_weights()) {
        let mut stats = CellStats::default();
        for s in &samples {
            stats.add_sample(s);
        }
        let Ok(fused) = fuse_cell(&stats, &weights) else { return Ok(()) };
        for kind in PollutantKind::ALL {
            let means: Vec<f64> = SourceClass::ALL
                .iter()
                .filter(|&&c| weights.get(c) > 0.0)
                .filter_map(|&c| stats.class(c).mean(kind))
                .collect();
            match fused.get(kind) {
                None => prop_assert!(means.is_empty()),
                Some(v) => {
                    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "{kind}: {v} outside [{lo}, {hi}]");
                }
            }
        }
    }

    #[test]
    fn split_statistics_merge_to_the_whole(samples in arb_samples(60), cut in 0usize..60) {
        let cut = cut.min(samples.len());
        let mut whole = CellStats::default();
        let (mut a, mut b) = (CellStats::default(), CellStats::default());
        for (i, s) in samples.iter().enumerate() {
            whole.add_sample(s);
            if i < cut { a.add_sample(s) } else { b.add_sample(s) }
        }
        b.merge(&a);
        prop_assert_eq!(b, whole);
    }

    #[test]
    fn batches_survive_the_wire(samples in arb_samples(80), depth in 1u8..18) {
        let mut edge = EdgeNode::new("edge", BoundingBox::WUHAN, depth, TimeSlot::HOUR);
        for s in &samples {
            edge.ingest(s).unwrap();
        }
        let batch = edge.flush(slot(), slot().end()).unwrap();
        prop_assert_eq!(decode_batch(&encode_batch(&batch)).unwrap(), batch);
    }

    #[test]
    fn exposure_never_rises_with_alpha(
        aqi in prop::collection::vec(0u32..400, 36),
        from in (0u32..6, 0u32..6),
        to in (0u32..6, 0u32..6),
        a1 in 0.0f64..5.0,
        extra in 0.0f64..5.0,
    ) {
        let mut lattice = RouteLattice::new(BoundingBox::WUHAN, 3).with_window(0..6, 0..6).unwrap();
        for (i, v) in aqi.iter().enumerate() {
            lattice.set_aqi(i as u32 % 6, i as u32 / 6, *v);
        }
        let query = |alpha| RouteQuery {
            start: lattice.center(from.0, from.1),
            goal: lattice.center(to.0, to.1),
            alpha,
            avoid: Default::default(),
        };
        let low = plan_route(&lattice, &query(a1)).unwrap();
        let high = plan_route(&lattice, &query(a1 + extra)).unwrap();
        let tol = 1e-6 * (1.0 + low.total_cost);
        prop_assert!(high.total_exposure <= low.total_exposure + tol);
        prop_assert!(high.total_distance_m + tol >= low.total_distance_m);
    }
}
