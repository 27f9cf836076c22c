//! Multi-planar reformation along labeled segments and longitudinal cuts.
//!
//! Each segment point gets a plane orthogonal to the centerline, sampled on
//! a `W x W` grid with pitch [`IN_PLANE_SPACING`]. Grid index
//! [`CENTER_INDEX`] lies on the centerline, so grid offsets run from
//! `-18` to `+17` pitches. Columns run along the frame normal and rows along
//! the binormal: the central row is the cut at angle 0, the central column
//! the cut at angle pi/2.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::centerline::{LabeledSegment, Point3, SegmentLabel, Vector3};
use crate::error::{Error, Result};
use crate::volume::{raw_path_for, Volume};

pub const HU_MIN: f64 = -300.0;
pub const HU_MAX: f64 = 1024.0;
/// In-plane samples per axis, `floor(12 mm / 0.33 mm)`.
pub const MPR_WIDTH: usize = 36;
pub const CENTER_INDEX: usize = MPR_WIDTH / 2;
pub const IN_PLANE_SPACING: f64 = 0.33;
pub const FRAME_SPACING: f64 = 0.25;
/// Rows per stack: a 32 mm segment at 0.25 mm, endpoints included.
pub const STACK_LEN: usize = 129;

/// Clips HU to `[-300, 1024]` and maps it affinely onto `[0, 1]`.
pub fn normalize_hu(hu: f64) -> f32 {
    ((hu.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)) as f32
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub tangent: Vector3,
    pub normal: Vector3,
    pub binormal: Vector3,
}

/// Parallel-transport frames along a polyline.
///
/// Tangents use central differences (one-sided at the ends). The first
/// normal is world +y projected onto the normal plane (+z, then +x when
/// the tangent is parallel to y), then carried along by the minimal
/// rotation between consecutive tangents.
pub fn build_frames(points: &[Point3]) -> Result<Vec<Frame>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Geometry(format!("frames need at least 2 points, got {n}")));
    }
    let mut tangents = Vec::with_capacity(n);
    for i in 0..n {
        let d = if i == 0 {
            points[1] - points[0]
        } else if i == n - 1 {
            points[n - 1] - points[n - 2]
        } else {
            points[i + 1] - points[i - 1]
        };
        let norm = d.norm();
        if !(norm > 1e-12) {
            return Err(Error::Geometry(format!("zero-length tangent at point {i}")));
        }
        tangents.push(d / norm);
    }

    let t0 = tangents[0];
    let mut normal = [Vector3::y(), Vector3::z(), Vector3::x()]
        .into_iter()
        .map(|axis| axis - t0 * axis.dot(&t0))
        .find(|v| v.norm() > 1e-6)
        .expect("some world axis is not parallel to the tangent")
        .normalize();

    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let t = tangents[i];
        if i > 0 {
            normal = transport(&tangents[i - 1], &t, &normal)
                .ok_or_else(|| Error::Geometry(format!("tangent reverses at point {i}")))?;
        }
        normal = (normal - t * normal.dot(&t)).normalize();
        let binormal = t.cross(&normal);
        frames.push(Frame {
            tangent: t,
            normal,
            binormal,
        });
    }
    Ok(frames)
}

/// Applies the minimal rotation taking unit vector `a` onto `b` to `v`.
///
/// Uses `v c + k x v + k (k . v) / (1 + c)` with `k = a x b`, `c = a . b`,
/// which stays accurate as `k` vanishes. `None` when `b` is opposite `a`.
fn transport(a: &Vector3, b: &Vector3, v: &Vector3) -> Option<Vector3> {
    let c = a.dot(b);
    if c <= -1.0 + 1e-9 {
        return None;
    }
    let k = a.cross(b);
    Some(v * c + k.cross(v) + k * (k.dot(v) / (1.0 + c)))
}

/// Per-segment image block, `STACK_LEN x W x W`, values in `[0, 1]`.
///
/// Rows past `valid_rows` belong to a truncated segment and are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MprStack {
    pub label: SegmentLabel,
    pub valid_rows: usize,
    pub data: Vec<f32>,
    /// One frame per valid row; empty for stacks read back from disk.
    pub frames: Vec<Frame>,
}

impl MprStack {
    pub fn len(&self) -> usize {
        STACK_LEN
    }

    pub fn is_empty(&self) -> bool {
        self.valid_rows == 0
    }

    pub fn width(&self) -> usize {
        MPR_WIDTH
    }

    /// The `W x W` plane of centerline point `l`, row-major.
    pub fn plane(&self, l: usize) -> &[f32] {
        let w2 = MPR_WIDTH * MPR_WIDTH;
        &self.data[l * w2..(l + 1) * w2]
    }

    pub fn at(&self, l: usize, row: usize, col: usize) -> f32 {
        self.data[(l * MPR_WIDTH + row) * MPR_WIDTH + col]
    }

    /// Bilinear sample of plane `l` at fractional grid coordinates,
    /// clamped to the grid.
    pub fn sample_plane(&self, l: usize, row: f64, col: f64) -> f32 {
        let hi = (MPR_WIDTH - 1) as f64;
        let r = row.clamp(0.0, hi);
        let c = col.clamp(0.0, hi);
        let r0 = r.floor() as usize;
        let c0 = c.floor() as usize;
        let r1 = (r0 + 1).min(MPR_WIDTH - 1);
        let c1 = (c0 + 1).min(MPR_WIDTH - 1);
        let fr = r - r0 as f64;
        let fc = c - c0 as f64;
        let v = |rr, cc| self.at(l, rr, cc) as f64;
        let top = v(r0, c0) * (1.0 - fc) + v(r0, c1) * fc;
        let bottom = v(r1, c0) * (1.0 - fc) + v(r1, c1) * fc;
        (top * (1.0 - fr) + bottom * fr) as f32
    }
}

/// Samples the planes orthogonal to a segment out of `volume`.
///
/// Samples outside the volume read as -300 HU.
pub fn extract_mpr(volume: &Volume, segment: &LabeledSegment) -> Result<MprStack> {
    let points = &segment.points;
    if points.len() > STACK_LEN {
        return Err(Error::Geometry(format!(
            "segment {} has {} points, stacks hold {STACK_LEN}",
            segment.label,
            points.len()
        )));
    }
    let frames = build_frames(points)?;
    let w = MPR_WIDTH;
    let mut data = vec![0f32; STACK_LEN * w * w];
    let mut any_inside = false;
    for (l, (p, f)) in points.iter().zip(&frames).enumerate() {
        for row in 0..w {
            let v = (row as f64 - CENTER_INDEX as f64) * IN_PLANE_SPACING;
            for col in 0..w {
                let u = (col as f64 - CENTER_INDEX as f64) * IN_PLANE_SPACING;
                let q = p + f.normal * u + f.binormal * v;
                let hu = match volume.sample_trilinear(&q) {
                    Some(hu) => {
                        any_inside = true;
                        hu as f64
                    }
                    None => HU_MIN,
                };
                data[(l * w + row) * w + col] = normalize_hu(hu);
            }
        }
    }
    if !any_inside {
        return Err(Error::OutOfVolume(segment.label.to_string()));
    }
    Ok(MprStack {
        label: segment.label,
        valid_rows: points.len(),
        data,
        frames,
    })
}

/// A cut through the stack containing the centerline, `STACK_LEN x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalSlice {
    pub label: SegmentLabel,
    pub angle: f64,
    pub valid_rows: usize,
    pub data: Vec<f32>,
}

impl LongitudinalSlice {
    pub fn row(&self, l: usize) -> &[f32] {
        &self.data[l * MPR_WIDTH..(l + 1) * MPR_WIDTH]
    }

    pub fn len(&self) -> usize {
        STACK_LEN
    }

    pub fn is_empty(&self) -> bool {
        self.valid_rows == 0
    }

    pub fn width(&self) -> usize {
        MPR_WIDTH
    }
}

/// Cuts the stack along the in-plane line through the centerline at
/// `angle` from the frame normal towards the binormal.
pub fn extract_longitudinal_slice(stack: &MprStack, angle: f64) -> Result<LongitudinalSlice> {
    if !(0.0..PI).contains(&angle) {
        return Err(Error::InvalidAngle(angle));
    }
    let (sin, cos) = angle.sin_cos();
    let w = MPR_WIDTH;
    let center = CENTER_INDEX as f64;
    let mut data = vec![0f32; STACK_LEN * w];
    for l in 0..stack.valid_rows {
        for k in 0..w {
            let offset = k as f64 - center;
            data[l * w + k] = stack.sample_plane(l, center + offset * sin, center + offset * cos);
        }
    }
    Ok(LongitudinalSlice {
        label: stack.label,
        angle,
        valid_rows: stack.valid_rows,
        data,
    })
}

/// Slices at `angle` and at `angle + pi/2` (wrapped into `[0, pi)`).
pub fn extract_orthogonal_pair(
    stack: &MprStack,
    angle: f64,
) -> Result<(LongitudinalSlice, LongitudinalSlice)> {
    let first = extract_longitudinal_slice(stack, angle)?;
    let second = extract_longitudinal_slice(stack, orthogonal_angle(angle))?;
    Ok((first, second))
}

pub fn orthogonal_angle(angle: f64) -> f64 {
    let a = angle + PI / 2.0;
    if a >= PI {
        a - PI
    } else {
        a
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
struct StackHeader {
    #[serde(rename = "label")]
    label: SegmentLabel,
    l: usize,
    w: usize,
    #[serde(rename = "dtype")]
    dtype: String,
    #[serde(rename = "valid_rows")]
    valid_rows: usize,
}

pub fn write_stack(stack: &MprStack, header_path: impl AsRef<Path>) -> Result<()> {
    let header_path = header_path.as_ref();
    let header = StackHeader {
        label: stack.label,
        l: STACK_LEN,
        w: MPR_WIDTH,
        dtype: "f32".into(),
        valid_rows: stack.valid_rows,
    };
    let text = serde_json::to_string(&header).expect("stack header serializes");
    fs::write(header_path, text).map_err(|e| Error::io(header_path, e))?;
    let bytes: Vec<u8> = stack.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    let raw = raw_path_for(header_path);
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

pub fn read_stack(header_path: impl AsRef<Path>) -> Result<MprStack> {
    let header_path = header_path.as_ref();
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: StackHeader =
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    if header.l != STACK_LEN || header.w != MPR_WIDTH || header.dtype != "f32" {
        return Err(Error::validation(
            None,
            format!(
                "unsupported stack layout L={} W={} dtype={}",
                header.l, header.w, header.dtype
            ),
        ));
    }
    if header.valid_rows > STACK_LEN {
        return Err(Error::validation(None, "valid_rows exceeds L"));
    }
    let raw = raw_path_for(header_path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = STACK_LEN * MPR_WIDTH * MPR_WIDTH * 4;
    if bytes.len() != expected {
        return Err(Error::validation(
            None,
            format!("{} holds {} bytes, expected {expected}", raw.display(), bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(MprStack {
        label: header.label,
        valid_rows: header.valid_rows,
        data,
        frames: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_segment(n: usize) -> LabeledSegment {
        LabeledSegment {
            label: SegmentLabel::LadProx,
            points: (0..n).map(|i| Point3::new(0.0, 0.0, i as f64 * 0.25)).collect(),
            truncated: n < STACK_LEN,
            source: 0,
        }
    }

    fn uniform(hu: f32) -> Volume {
        Volume::filled([40, 40, 80], [0.5; 3], Point3::new(-10.0, -10.0, -2.0), hu).unwrap()
    }

    #[test]
    fn hu_mapping_is_exact_at_anchors() {
        assert_eq!(normalize_hu(-300.0), 0.0);
        assert_eq!(normalize_hu(362.0), 0.5);
        assert_eq!(normalize_hu(1024.0), 1.0);
        assert_eq!(normalize_hu(-1000.0), 0.0);
        assert_eq!(normalize_hu(3000.0), 1.0);
    }

    #[test]
    fn uniform_volumes_saturate() {
        let seg = straight_segment(STACK_LEN);
        let bright = extract_mpr(&uniform(1024.0), &seg).unwrap();
        assert!(bright.data.iter().all(|&v| v == 1.0));
        let dark = extract_mpr(&uniform(-700.0), &seg).unwrap();
        assert!(dark.data.iter().all(|&v| v == 0.0));
        let mid = extract_mpr(&uniform(362.0), &seg).unwrap();
        assert!(mid.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn truncated_segments_are_zero_padded() {
        let stack = extract_mpr(&uniform(1024.0), &straight_segment(40)).unwrap();
        assert_eq!(stack.valid_rows, 40);
        assert_eq!(stack.data.len(), STACK_LEN * MPR_WIDTH * MPR_WIDTH);
        assert!(stack.plane(39).iter().all(|&v| v == 1.0));
        assert!(stack.plane(40).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segments_outside_the_volume_fail() {
        let mut seg = straight_segment(20);
        for p in &mut seg.points {
            p.x += 500.0;
        }
        assert!(matches!(
            extract_mpr(&uniform(0.0), &seg),
            Err(Error::OutOfVolume(_))
        ));
    }

    #[test]
    fn straight_line_frames_are_constant() {
        let pts: Vec<Point3> = (0..10).map(|i| Point3::new(0.0, 0.0, i as f64)).collect();
        for f in build_frames(&pts).unwrap() {
            assert_eq!(f.tangent, Vector3::z());
            assert_eq!(f.normal, Vector3::y());
            assert_eq!(f.binormal, -Vector3::x());
        }
    }

    #[test]
    fn tangent_along_y_falls_back_to_z() {
        let pts = [Point3::origin(), Point3::new(0.0, 1.0, 0.0)];
        let f = build_frames(&pts).unwrap();
        assert_eq!(f[0].normal, Vector3::z());
    }

    #[test]
    fn long_straight_run_after_a_bend_keeps_finite_frames() {
        let mut pts: Vec<Point3> = (0..40)
            .map(|i| {
                let a = i as f64 * 0.02;
                Point3::new(10.0 * a.cos(), 10.0 * a.sin(), 0.0)
            })
            .collect();
        let last = *pts.last().unwrap();
        let dir = (last - pts[pts.len() - 2]).normalize();
        for k in 1..400 {
            pts.push(last + dir * (k as f64 * 0.25));
        }
        let frames = build_frames(&pts).unwrap();
        for f in &frames {
            assert!(f.normal.iter().all(|v| v.is_finite()));
            assert!((f.normal.norm() - 1.0).abs() < 1e-9);
            assert!(f.normal.dot(&f.tangent).abs() < 1e-9);
        }
    }

    #[test]
    fn transport_matches_the_rotation_between_tangents() {
        let a = Vector3::new(1.0, 0.0, 0.0);
        let b = Vector3::new(0.0, 1.0, 0.0);
        let v = transport(&a, &b, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((v - Vector3::z()).norm() < 1e-15);
        let v = transport(&a, &b, &a).unwrap();
        assert!((v - b).norm() < 1e-15);
        assert!(transport(&a, &-a, &b).is_none());
    }

    #[test]
    fn planar_arc_keeps_binormal_on_plane_normal() {
        // circle of radius 20 in the xy-plane, starting along +x
        let pts: Vec<Point3> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.0125;
                Point3::new(20.0 * t.sin(), 20.0 - 20.0 * t.cos(), 3.0)
            })
            .collect();
        let frames = build_frames(&pts).unwrap();
        for f in &frames {
            assert!((f.binormal - Vector3::z()).norm() < 1e-9, "{:?}", f.binormal);
            assert!(f.tangent.dot(&f.normal).abs() < 1e-9);
            assert!((f.normal.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn repeated_points_are_a_geometry_error() {
        let pts = [Point3::origin(), Point3::origin()];
        assert!(matches!(build_frames(&pts), Err(Error::Geometry(_))));
    }

    fn patterned_stack() -> MprStack {
        let mut data = vec![0f32; STACK_LEN * MPR_WIDTH * MPR_WIDTH];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i * 7919) % 1000) as f32 / 1000.0;
        }
        MprStack {
            label: SegmentLabel::CxProx,
            valid_rows: STACK_LEN,
            data,
            frames: Vec::new(),
        }
    }

    #[test]
    fn axis_cuts_equal_central_row_and_column() {
        let stack = patterned_stack();
        let s0 = extract_longitudinal_slice(&stack, 0.0).unwrap();
        let s90 = extract_longitudinal_slice(&stack, PI / 2.0).unwrap();
        for l in 0..STACK_LEN {
            for k in 0..MPR_WIDTH {
                assert_eq!(s0.row(l)[k], stack.at(l, CENTER_INDEX, k));
                assert_eq!(s90.row(l)[k], stack.at(l, k, CENTER_INDEX));
            }
        }
    }

    #[test]
    fn pair_second_is_the_orthogonal_single() {
        let stack = patterned_stack();
        for a in [0.0, 0.3, PI / 2.0, 2.5] {
            let (first, second) = extract_orthogonal_pair(&stack, a).unwrap();
            assert_eq!(first, extract_longitudinal_slice(&stack, a).unwrap());
            assert_eq!(second, extract_longitudinal_slice(&stack, orthogonal_angle(a)).unwrap());
        }
        let (_, second) = extract_orthogonal_pair(&stack, 0.0).unwrap();
        assert_eq!(second.angle, PI / 2.0);
    }

    #[test]
    fn out_of_range_angles_rejected() {
        let stack = patterned_stack();
        assert!(extract_longitudinal_slice(&stack, PI).is_err());
        assert!(extract_longitudinal_slice(&stack, -0.1).is_err());
    }

    #[test]
    fn stack_disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("LAD_prox.json");
        let mut stack = patterned_stack();
        stack.valid_rows = 77;
        write_stack(&stack, &path).unwrap();
        assert_eq!(read_stack(&path).unwrap(), stack);
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.contains("\"L\":129"));
        assert!(header.contains("\"W\":36"));
    }
}
