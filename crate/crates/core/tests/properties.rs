//! Property-based tests for the geometric and statistical invariants the
//! library promises.

use proptest::prelude::*;

use facealign_core::cascade::{vote_weights, zone_of, ZONE_COUNT};
use facealign_core::eval::{ced_curve, default_ced_thresholds, image_nme};
use facealign_core::fusion::{fuse, FusionConfig, PredictionSet};
use facealign_core::shapes::{
    normalize_to_box, AnnotatedShape, FaceBox, Landmark, LandmarkIndexMap, Similarity2,
    LANDMARK_COUNT,
};
use facealign_core::texture::{pearson_distance, HistogramMatrix};

fn arb_shape() -> impl Strategy<Value = AnnotatedShape> {
    (
        proptest::collection::vec((-50.0..300.0f64, -50.0..300.0f64), LANDMARK_COUNT),
        proptest::collection::vec(any::<bool>(), LANDMARK_COUNT),
    )
        .prop_map(|(pts, occ)| {
            AnnotatedShape::new(
                pts.into_iter().map(|(x, y)| Landmark::new(x, y)).collect(),
                occ,
            )
            .unwrap()
        })
}

fn arb_similarity() -> impl Strategy<Value = Similarity2> {
    // Rotation + scale in [0.3, 3], translation bounded.
    (0.3..3.0f64, -3.0..3.0f64, -100.0..100.0f64, -100.0..100.0f64).prop_map(
        |(scale, angle, tx, ty)| Similarity2 {
            a: scale * angle.cos(),
            b: scale * angle.sin(),
            tx,
            ty,
        },
    )
}

fn arb_box() -> impl Strategy<Value = FaceBox> {
    (-50.0..200.0f64, -50.0..200.0f64, 1.0..300.0f64, 1.0..300.0f64)
        .prop_map(|(x, y, w, h)| FaceBox::new(x, y, w, h).unwrap())
}

proptest! {
    #[test]
    fn similarity_fit_recovers_applied_transform(shape in arb_shape(), t in arb_similarity()) {
        // Need a non-degenerate source constellation for the fit.
        let spread = {
            let c = shape.centroid();
            shape.points.iter().map(|p| p.distance(&c)).fold(0.0f64, f64::max)
        };
        prop_assume!(spread > 1.0);
        let moved: Vec<Landmark> = shape.points.iter().map(|&p| t.apply(p)).collect();
        let fitted = Similarity2::fit(&shape.points, &moved).unwrap();
        for &p in &shape.points {
            let a = t.apply(p);
            let b = fitted.apply(p);
            prop_assert!((a.x - b.x).abs() < 1e-6 && (a.y - b.y).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_to_box_round_trips(shape in arb_shape(), src in arb_box(), dst in arb_box()) {
        let there = normalize_to_box(&shape, &src, &dst).unwrap();
        let back = normalize_to_box(&there, &dst, &src).unwrap();
        for (a, b) in shape.points.iter().zip(back.points.iter()) {
            prop_assert!((a.x - b.x).abs() < 1e-6 && (a.y - b.y).abs() < 1e-6);
        }
        prop_assert_eq!(&shape.occluded, &back.occluded);
    }

    #[test]
    fn nme_invariant_under_global_similarity(
        gt in arb_shape(),
        noise in proptest::collection::vec((-5.0..5.0f64, -5.0..5.0f64), LANDMARK_COUNT),
        t in arb_similarity(),
    ) {
        let index_map = LandmarkIndexMap::default();
        let pred = AnnotatedShape::new(
            gt.points
                .iter()
                .zip(noise.iter())
                .map(|(p, (dx, dy))| Landmark::new(p.x + dx, p.y + dy))
                .collect(),
            gt.occluded.clone(),
        ).unwrap();
        let Ok(base) = image_nme(&pred, &gt, &index_map) else {
            return Ok(()); // coincident pupils: nothing to compare
        };
        let map = |s: &AnnotatedShape| s.map_points(|p| t.apply(p));
        let moved = image_nme(&map(&pred), &map(&gt), &index_map).unwrap();
        prop_assert!((base - moved).abs() < 1e-9 * base.max(1.0));
    }

    #[test]
    fn ced_is_monotone_and_ends_at_one(
        errors in proptest::collection::vec(0.0..1.0f64, 1..200),
    ) {
        let max = errors.iter().cloned().fold(0.0f64, f64::max);
        let curve = ced_curve(&errors, &default_ced_thresholds(max.max(1e-9), 40));
        for w in curve.windows(2) {
            prop_assert!(w[1].1 >= w[0].1);
        }
        prop_assert_eq!(curve.last().unwrap().1, 1.0);
    }

    #[test]
    fn pearson_symmetric_in_range(
        counts in proptest::collection::vec((0u32..500, 0u32..500), 8..120),
    ) {
        let n = counts.len();
        let a = HistogramMatrix { rows: 1, cols: n, counts: counts.iter().map(|c| c.0).collect() };
        let b = HistogramMatrix { rows: 1, cols: n, counts: counts.iter().map(|c| c.1).collect() };
        let (Ok(dab), Ok(dba)) = (pearson_distance(&a, &b), pearson_distance(&b, &a)) else {
            return Ok(()); // constant matrix: distance undefined by contract
        };
        prop_assert!((dab - dba).abs() < 1e-12);
        prop_assert!((0.0..=2.0).contains(&dab));
    }

    #[test]
    fn vote_weights_normalized(
        zones in proptest::collection::vec(0u8..ZONE_COUNT as u8, 1..9),
        occ in proptest::collection::vec(0.0..=1.0f64, ZONE_COUNT),
        eps in 1e-6..0.5f64,
    ) {
        let occ: [f64; ZONE_COUNT] = occ.try_into().unwrap();
        let w = vote_weights(&zones, &occ, eps);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.iter().all(|&wi| wi > 0.0));
    }

    #[test]
    fn zone_always_in_grid(x in -1000.0..1000.0f64, y in -1000.0..1000.0f64, b in arb_box()) {
        prop_assert!((zone_of(&Landmark::new(x, y), &b) as usize) < ZONE_COUNT);
    }

    #[test]
    fn fusion_translation_equivariant(
        shapes in proptest::collection::vec(arb_shape(), 2..6),
        dx in -40.0..40.0f64,
        dy in -40.0..40.0f64,
    ) {
        let config = FusionConfig::default();
        let set = PredictionSet {
            texture_preds: shapes.clone(),
            pose_preds: vec![],
            normalizer: 250.0,
        };
        let shifted = PredictionSet {
            texture_preds: shapes
                .iter()
                .map(|s| s.map_points(|p| Landmark::new(p.x + dx, p.y + dy)))
                .collect(),
            pose_preds: vec![],
            normalizer: 250.0,
        };
        let (a, ra) = fuse(&set, &config).unwrap();
        let (b, rb) = fuse(&shifted, &config).unwrap();
        prop_assert_eq!(ra.branch, rb.branch);
        for (p, q) in a.points.iter().zip(b.points.iter()) {
            prop_assert!((p.x + dx - q.x).abs() < 1e-9);
            prop_assert!((p.y + dy - q.y).abs() < 1e-9);
        }
        prop_assert_eq!(&a.occluded, &b.occluded);
    }
}
