use std::f64::consts::PI;

use corotree_core::centerline::SegmentLabel;
use corotree_core::inference::tta_angles;
use corotree_core::mpr::{
    extract_longitudinal_slice, extract_mpr, normalize_hu, MprStack, CENTER_INDEX, IN_PLANE_SPACING, MPR_WIDTH,
    STACK_LEN,
};
use corotree_core::phantom::{straight_tube, StraightTubeSpec};

#[test]
fn tube_cross_section_has_the_expected_area() {
    let (volume, segment) = straight_tube(&StraightTubeSpec {
        radius_mm: 2.0,
        lumen_hu: 400.0,
        background_hu: -50.0,
        ..StraightTubeSpec::default()
    })
    .unwrap();
    let stack = extract_mpr(&volume, &segment).unwrap();
    let bright = normalize_hu(400.0);
    let dark = normalize_hu(-50.0);
    let mid = 0.5 * (bright + dark);
    let pixel_area = IN_PLANE_SPACING * IN_PLANE_SPACING;
    let expected = PI * 4.0;

    let last = MPR_WIDTH - 1;
    for l in [stack.valid_rows / 4, stack.valid_rows / 2, 3 * stack.valid_rows / 4] {
        for (r, c) in [(CENTER_INDEX, CENTER_INDEX), (CENTER_INDEX - 1, CENTER_INDEX), (CENTER_INDEX, CENTER_INDEX + 1)] {
            assert!((stack.at(l, r, c) - bright).abs() < 1e-3, "row {l}: center sample {}", stack.at(l, r, c));
        }
        for (r, c) in [(0, 0), (0, last), (last, 0), (last, last)] {
            assert!((stack.at(l, r, c) - dark).abs() < 1e-3, "row {l}: corner sample {}", stack.at(l, r, c));
        }
        let inside = stack.plane(l).iter().filter(|&&v| v > mid).count();
        let area = inside as f64 * pixel_area;
        assert!((area - expected).abs() < 0.15 * expected, "row {l}: area {area:.2} mm2");
    }
}

/// Smooth radially symmetric blob, identical on every plane.
fn radial_stack(sigma_mm: f64) -> MprStack {
    let w = MPR_WIDTH;
    let mut data = Vec::with_capacity(STACK_LEN * w * w);
    for _ in 0..STACK_LEN {
        for row in 0..w {
            for col in 0..w {
                let dr = (row as f64 - CENTER_INDEX as f64) * IN_PLANE_SPACING;
                let dc = (col as f64 - CENTER_INDEX as f64) * IN_PLANE_SPACING;
                data.push((-(dr * dr + dc * dc) / (2.0 * sigma_mm * sigma_mm)).exp() as f32);
            }
        }
    }
    MprStack { label: SegmentLabel::LadMid, valid_rows: STACK_LEN, data, frames: Vec::new() }
}

#[test]
fn symmetric_stack_gives_the_same_slice_at_every_angle() {
    // wide enough that bilinear error stays under the tolerance
    let stack = radial_stack(6.0);
    let slices: Vec<_> =
        tta_angles(16).into_iter().map(|a| extract_longitudinal_slice(&stack, a).unwrap()).collect();
    // Column 0 sits at offset -W/2, which lies off the plane for angles past
    // pi/2 and is clamped to offset W/2 - 1, so only columns 1.. are compared.
    let mut worst = 0f32;
    for a in &slices {
        for b in &slices {
            for l in 0..STACK_LEN {
                for (x, y) in a.row(l).iter().zip(b.row(l)).skip(1) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    assert!(worst < 1e-3, "largest pairwise difference {worst:e}");
}
