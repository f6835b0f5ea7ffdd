//! Property tests over the spec invariants: geometric round trips, NMS
//! separation, consistency-filter subset/order properties, Dice bounds and
//! symmetry, and serialization round trips.

use ndarray::Array2;
use proptest::prelude::*;

use vkr_core::geometry::{
    filter_consistent, nms_extract, render_heatmap, sample_homography, transform_points,
    HomographySamplerConfig,
};
use vkr_core::losses::dice_loss;
use vkr_core::metrics::{aggregate, EvalStatus, PairEvaluation};
use vkr_core::types::{FrameSize, KeypointSet, MapRole, ScalarMap};

fn keypoints_strategy(frame: FrameSize, max_n: usize) -> impl Strategy<Value = KeypointSet> {
    proptest::collection::vec(
        (
            0.0..(frame.width as f64 - 1e-6),
            0.0..(frame.height as f64 - 1e-6),
        ),
        0..max_n,
    )
    .prop_map(move |pts| {
        let mut coords: Vec<[f64; 2]> = Vec::new();
        for (x, y) in pts {
            if !coords.iter().any(|c| c[0] == x && c[1] == y) {
                coords.push([x, y]);
            }
        }
        let scores = vec![1.0; coords.len()];
        KeypointSet {
            coords,
            scores,
            frame,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transform_round_trip_within_tolerance(seed in 0u64..5000, pts in keypoints_strategy(FrameSize::new(128, 128), 12)) {
        let h = sample_homography(
            &HomographySamplerConfig { seed, ..Default::default() },
            FrameSize::new(128, 128),
        ).unwrap();
        let inv = h.inverse().unwrap();
        let fwd = transform_points(&pts, &h);
        for (orig, mapped) in pts.coords.iter().zip(fwd.valid_coords()) {
            if let Some((bx, by)) = inv.apply(mapped[0], mapped[1]) {
                let d = ((bx - orig[0]).powi(2) + (by - orig[1]).powi(2)).sqrt();
                prop_assert!(d < 1e-6, "round trip {d}");
            }
        }
    }

    #[test]
    fn nms_outputs_are_separated_and_above_threshold(
        values in proptest::collection::vec(0.0f64..1.0, 24 * 24),
        radius in 1.0f64..6.0,
    ) {
        let map = ScalarMap {
            values: Array2::from_shape_vec((24, 24), values).unwrap(),
            role: MapRole::Probability,
        };
        let out = nms_extract(&map, 0.5, radius).unwrap();
        for s in &out.scores {
            prop_assert!(*s >= 0.5);
        }
        for i in 0..out.len() {
            for j in 0..i {
                let cheb = (out.coords[i][0] - out.coords[j][0])
                    .abs()
                    .max((out.coords[i][1] - out.coords[j][1]).abs());
                prop_assert!(cheb > radius, "points {i},{j} at Chebyshev {cheb}");
            }
        }
    }

    #[test]
    fn filter_consistent_is_subset_and_order_invariant(
        y in keypoints_strategy(FrameSize::new(64, 64), 10),
        b in keypoints_strategy(FrameSize::new(64, 64), 10),
        tol in 0.2f64..5.0,
    ) {
        let out = filter_consistent(&y, &b, tol).unwrap();
        // Subset of Y, order preserved.
        let mut cursor = 0;
        for c in &out.coords {
            let pos = y.coords[cursor..].iter().position(|yc| yc == c);
            prop_assert!(pos.is_some(), "output not an ordered subset of Y");
            cursor += pos.unwrap() + 1;
        }
        // Invariance to the ordering of the backmapped set.
        let mut rev = b.clone();
        rev.coords.reverse();
        rev.scores.reverse();
        let out_rev = filter_consistent(&y, &rev, tol).unwrap();
        prop_assert_eq!(out.coords, out_rev.coords);
    }

    #[test]
    fn heatmap_values_in_unit_range_with_unit_peak(
        pts in keypoints_strategy(FrameSize::new(48, 48), 8),
        sigma in 0.2f64..4.0,
    ) {
        let map = render_heatmap(&pts, sigma, 13, FrameSize::new(48, 48)).unwrap();
        let max = map.values.iter().cloned().fold(0.0f64, f64::max);
        let min = map.values.iter().cloned().fold(1.0f64, f64::min);
        prop_assert!(min >= 0.0);
        if pts.is_empty() {
            prop_assert_eq!(max, 0.0);
        } else {
            prop_assert_eq!(max, 1.0);
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded(
        a in proptest::collection::vec(0.0f64..1.0, 36),
        b in proptest::collection::vec(0.0f64..1.0, 36),
    ) {
        let ma = ScalarMap { values: Array2::from_shape_vec((6, 6), a).unwrap(), role: MapRole::Probability };
        let mb = ScalarMap { values: Array2::from_shape_vec((6, 6), b).unwrap(), role: MapRole::Heatmap };
        let ab = dice_loss(&ma, &mb).unwrap();
        let ba = dice_loss(&mb, &ma).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab), "dice {ab}");
    }

    #[test]
    fn serialization_round_trips_bit_exactly(pts in keypoints_strategy(FrameSize::new(256, 256), 16)) {
        let json = serde_json::to_string(&pts).unwrap();
        let back: KeypointSet = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(pts, back);
    }

    #[test]
    fn aggregate_mmee_never_exceeds_mmae(
        error_lists in proptest::collection::vec(
            proptest::collection::vec(0.0f64..80.0, 1..8),
            1..6,
        ),
    ) {
        let evals: Vec<PairEvaluation> = error_lists
            .into_iter()
            .enumerate()
            .map(|(i, errors)| PairEvaluation {
                pair: format!("p{i}"),
                errors,
                status: EvalStatus::Evaluated,
            })
            .collect();
        let agg = aggregate(&evals, 25).unwrap();
        prop_assert!(agg.mmee.unwrap() <= agg.mmae.unwrap() + 1e-12);
        prop_assert!((0.0..=1.0).contains(&agg.auc));
    }
}
