use std::f64::consts::PI;

use nalgebra::{Rotation3, Unit};
use proptest::prelude::*;

use corotree_core::centerline::{
    centerline_set_to_json, parse_centerline_set, resample_polyline, CenterlineSet, Point3, Vector3,
};
use corotree_core::inference::{ensemble, pool_segments, ModelPrediction};
use corotree_core::labeler::{label_centerlines, LabelerConfig};
use corotree_core::metrics::{auc, roc_curve, trapezoid_auc, BinaryOutcome};
use corotree_core::mpr::build_frames;
use corotree_core::phantom::{build_geometry, cohort_specs, CohortOptions};
use corotree_core::volume::Volume;

fn point() -> impl Strategy<Value = Point3> {
    (-100.0..100.0f64, -100.0..100.0f64, -100.0..100.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
}

/// Polyline with steps of 0.2..3 mm in random directions.
fn polyline(max_len: usize) -> impl Strategy<Value = Vec<Point3>> {
    (point(), prop::collection::vec((0.2..3.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), 1..max_len)).prop_map(
        |(start, steps)| {
            let mut pts = vec![start];
            let mut p = start;
            for (len, x, y, z) in steps {
                let d = Vector3::new(x, y, z + 2.0).normalize();
                p += d * len;
                pts.push(p);
            }
            pts
        },
    )
}

/// Point at arc length `s`, by a linear scan over cumulative lengths.
fn point_at(points: &[Point3], s: f64) -> Point3 {
    let mut acc = 0.0;
    for w in points.windows(2) {
        let len = (w[1] - w[0]).norm();
        if s <= acc + len {
            return w[0] + (w[1] - w[0]) * ((s - acc) / len);
        }
        acc += len;
    }
    *points.last().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn centerline_json_round_trips(lines in prop::collection::vec(polyline(20), 1..5)) {
        // centerlines of a case start at one shared aorta point
        let root = lines[0][0];
        let lines: Vec<Vec<Point3>> = lines
            .into_iter()
            .map(|l| l.iter().map(|p| p - l[0] + root.coords).map(Point3::from).collect())
            .collect();
        let set = CenterlineSet::from_polylines("case", lines).unwrap();
        let back = parse_centerline_set(&centerline_set_to_json(&set)).unwrap();
        prop_assert_eq!(back, set);
    }

    #[test]
    fn resampling_follows_arc_length(pts in polyline(30), step in 0.1..2.0f64) {
        let total: f64 = pts.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
        let out = resample_polyline(&pts, step).unwrap();
        prop_assert_eq!(out.len(), (total / step + 1e-9).floor() as usize + 1);
        for (k, p) in out.iter().enumerate() {
            let want = point_at(&pts, k as f64 * step);
            prop_assert!((p - want).norm() < 1e-9, "point {} off by {}", k, (p - want).norm());
        }
    }

    #[test]
    fn frames_are_orthonormal_and_follow_the_tangent(pts in polyline(40)) {
        let resampled = resample_polyline(&pts, 0.33).unwrap();
        prop_assume!(resampled.len() >= 3);
        let frames = build_frames(&resampled).unwrap();
        for (i, f) in frames.iter().enumerate() {
            prop_assert!((f.tangent.norm() - 1.0).abs() < 1e-9);
            prop_assert!((f.normal.norm() - 1.0).abs() < 1e-9);
            prop_assert!(f.tangent.dot(&f.normal).abs() < 1e-9);
            prop_assert!((f.tangent.cross(&f.normal) - f.binormal).norm() < 1e-9);
            if i > 0 && i + 1 < resampled.len() {
                let chord = (resampled[i + 1] - resampled[i - 1]).normalize();
                prop_assert!((chord - f.tangent).norm() < 1e-9);
            }
        }
        // no twist: each normal is the previous one turned by the minimal
        // rotation between the two tangents
        for w in frames.windows(2) {
            let expected = if w[0].tangent.cross(&w[1].tangent).norm() > 1e-6 {
                Rotation3::rotation_between(&w[0].tangent, &w[1].tangent).unwrap() * w[0].normal
            } else {
                w[0].normal
            };
            prop_assert!((w[1].normal - expected).norm() < 1e-6);
        }
    }

    #[test]
    fn trilinear_matches_nearest_on_voxel_centers(
        values in prop::collection::vec(-1000.0..2000.0f32, 60),
        i in 0usize..5, j in 0usize..4, k in 0usize..3,
        spacing in 0.2..2.0f64,
    ) {
        let v = Volume::new([5, 4, 3], [spacing, spacing * 1.5, spacing * 0.5], Point3::new(-3.0, 1.0, 7.0), values).unwrap();
        let p = v.voxel_center(i, j, k);
        prop_assert_eq!(v.sample_trilinear(&p), Some(v.get(i, j, k)));
        prop_assert_eq!(v.sample_nearest(&p), Some(v.get(i, j, k)));
    }

    #[test]
    fn frame_rotation_is_bounded_by_tangent_turn(pts in polyline(40)) {
        let resampled = resample_polyline(&pts, 0.33).unwrap();
        prop_assume!(resampled.len() >= 3);
        let frames = build_frames(&resampled).unwrap();
        for w in frames.windows(2) {
            let turn = w[0].tangent.angle(&w[1].tangent);
            let spin = w[0].normal.angle(&w[1].normal);
            prop_assert!(spin <= turn + 1e-6, "normal turned {} for tangent turn {}", spin, turn);
            if turn < PI / 2.0 {
                prop_assert!(w[0].normal.dot(&w[1].normal) > 0.0, "normal flipped");
            }
        }
    }

    #[test]
    fn trilinear_matches_brute_force_nearest_inside_blocks(
        blocks in prop::collection::vec(-1000i16..2000, 27),
        f in (0.0..8.0f64, 0.0..8.0f64, 0.0..8.0f64),
    ) {
        // 9^3 voxels in 3^3 blocks of constant value
        let dims = [9usize, 9, 9];
        let mut values = Vec::with_capacity(729);
        for k in 0..9 {
            for j in 0..9 {
                for i in 0..9 {
                    values.push(blocks[i / 3 + 3 * (j / 3) + 9 * (k / 3)] as f32);
                }
            }
        }
        let v = Volume::new(dims, [0.5; 3], Point3::origin(), values).unwrap();
        let (lo, hi) = ([f.0.floor(), f.1.floor(), f.2.floor()], [f.0.ceil(), f.1.ceil(), f.2.ceil()]);
        let block = |x: f64| (x as usize) / 3;
        prop_assume!((0..3).all(|a| block(lo[a]) == block(hi[a])));
        let p = Point3::new(f.0 * 0.5, f.1 * 0.5, f.2 * 0.5);
        let mut best = (f64::INFINITY, 0f32);
        for k in 0..9 {
            for j in 0..9 {
                for i in 0..9 {
                    let d = (v.voxel_center(i, j, k) - p).norm();
                    if d < best.0 {
                        best = (d, v.get(i, j, k));
                    }
                }
            }
        }
        prop_assert_eq!(v.sample_trilinear(&p), Some(best.1));
    }

    #[test]
    fn trilinear_stays_within_the_value_range(
        values in prop::collection::vec(-1000.0..2000.0f32, 27),
        f in (0.0..2.0f64, 0.0..2.0f64, 0.0..2.0f64),
    ) {
        let v = Volume::new([3, 3, 3], [1.0; 3], Point3::origin(), values.clone()).unwrap();
        let s = v.sample_trilinear(&Point3::new(f.0, f.1, f.2)).unwrap();
        let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(s >= lo - 1e-3 && s <= hi + 1e-3);
    }

    #[test]
    fn pooling_ignores_segment_order(
        feats in prop::collection::vec(prop::collection::vec(0.0..6.0f64, 3), 1..10),
        seed in any::<u64>(),
    ) {
        let mut shuffled = feats.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed as usize).wrapping_mul(31).wrapping_add(i * 7) % (i + 1));
        }
        prop_assert_eq!(pool_segments(&feats).unwrap(), pool_segments(&shuffled).unwrap());
    }

    #[test]
    fn ensemble_mean_lies_within_its_members(
        models in prop::collection::vec(prop::collection::vec(1.0..6.0f64, 4), 1..6),
    ) {
        let preds: Vec<ModelPrediction> = models
            .iter()
            .map(|a| ModelPrediction { cumulative: a.iter().sum::<f64>() / a.len() as f64, per_angle: a.clone() })
            .collect();
        let e = ensemble(&preds).unwrap();
        let lo = preds.iter().map(|m| m.cumulative).fold(f64::INFINITY, f64::min);
        let hi = preds.iter().map(|m| m.cumulative).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(e.cumulative >= lo - 1e-12 && e.cumulative <= hi + 1e-12);
        let single = ensemble(&preds[..1]).unwrap();
        prop_assert!((single.cumulative - preds[0].cumulative).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_under_monotone_maps_and_flips(
        raw in prop::collection::vec((0u8..20, any::<bool>()), 2..60),
    ) {
        let mut outcomes: Vec<BinaryOutcome> =
            raw.iter().map(|&(s, p)| BinaryOutcome::new(s as f64 / 4.0, p)).collect();
        outcomes[0].positive = true;
        outcomes[1].positive = false;
        let a = auc(&outcomes).unwrap();

        let mapped: Vec<BinaryOutcome> =
            outcomes.iter().map(|o| BinaryOutcome::new((o.score * 3.0).exp() - 7.0, o.positive)).collect();
        prop_assert!((auc(&mapped).unwrap() - a).abs() < 1e-12);

        let flipped: Vec<BinaryOutcome> =
            outcomes.iter().map(|o| BinaryOutcome::new(o.score, !o.positive)).collect();
        prop_assert!((auc(&flipped).unwrap() - (1.0 - a)).abs() < 1e-12);

        let curve = roc_curve(&outcomes).unwrap();
        prop_assert!((trapezoid_auc(&curve) - a).abs() < 1e-12);
    }
}

fn comparable(set: &CenterlineSet, cfg: &LabelerConfig) -> Vec<(String, Vec<Point3>)> {
    label_centerlines(set, cfg)
        .unwrap()
        .segments
        .into_iter()
        .map(|s| (s.label.to_string(), s.points))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn labels_survive_permutation_and_rigid_motion(
        seed in 0u64..1000,
        which in 0usize..6,
        axis in (-1.0..1.0f64, -1.0..1.0f64, 0.1..1.0f64),
        angle in -3.0..3.0f64,
        shift in (-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64),
        rotate_by in 1usize..10,
    ) {
        let spec = cohort_specs(&CohortOptions::new(6, seed)).unwrap().remove(which);
        let set = build_geometry(&spec).unwrap().centerlines;
        let cfg = LabelerConfig::default();
        let base = comparable(&set, &cfg);

        let n = set.len();
        let order: Vec<usize> = (0..n).map(|i| (i + rotate_by) % n).collect();
        prop_assert_eq!(&comparable(&set.permuted(&order).unwrap(), &cfg), &base);

        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::new(axis.0, axis.1, axis.2)), angle);
        let t = Vector3::new(shift.0, shift.1, shift.2);
        let moved = set.map_points(|p| rot * p + t).unwrap();
        let moved_cfg = LabelerConfig { right_axis: rot * cfg.right_axis, ..cfg.clone() };
        let got = comparable(&moved, &moved_cfg);
        prop_assert_eq!(got.len(), base.len());
        for ((la, pa), (lb, pb)) in got.iter().zip(&base) {
            prop_assert_eq!(la, lb);
            prop_assert_eq!(pa.len(), pb.len());
            for (p, q) in pa.iter().zip(pb) {
                prop_assert!((p - (rot * q + t)).norm() < 1e-6);
            }
        }
    }
}
