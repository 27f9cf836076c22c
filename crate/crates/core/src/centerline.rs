//! Centerline trees and segment labels.
//!
//! Coordinates are world millimetres in the DICOM patient (LPS) frame.
//! Every centerline of a set starts at the aorta center, so proximal parts
//! of different centerlines overlap.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vector3 = nalgebra::Vector3<f64>;

/// Tolerance for the shared aorta-center start point.
pub const ROOT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Centerline {
    id: usize,
    points: Vec<Point3>,
}

impl Centerline {
    pub fn new(id: usize, points: Vec<Point3>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::validation(
                Some(id),
                format!("needs at least 2 points, got {}", points.len()),
            ));
        }
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::validation(
                    Some(id),
                    format!("point {i} is not finite"),
                ));
            }
        }
        if let Some(i) = points.windows(2).position(|w| w[0] == w[1]) {
            return Err(Error::validation(
                Some(id),
                format!("points {i} and {} coincide", i + 1),
            ));
        }
        Ok(Self { id, points })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn first(&self) -> Point3 {
        self.points[0]
    }

    pub fn last(&self) -> Point3 {
        self.points[self.points.len() - 1]
    }

    pub fn arc_length(&self) -> f64 {
        polyline_length(&self.points)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterlineSet {
    case_id: String,
    centerlines: Vec<Centerline>,
}

impl CenterlineSet {
    /// Builds a set from raw polylines; ids are assigned by position.
    pub fn from_polylines(case_id: impl Into<String>, polylines: Vec<Vec<Point3>>) -> Result<Self> {
        let centerlines = polylines
            .into_iter()
            .enumerate()
            .map(|(id, pts)| Centerline::new(id, pts))
            .collect::<Result<Vec<_>>>()?;
        Self::new(case_id, centerlines)
    }

    pub fn new(case_id: impl Into<String>, centerlines: Vec<Centerline>) -> Result<Self> {
        let Some(head) = centerlines.first() else {
            return Err(Error::validation(None, "centerline set is empty"));
        };
        let root = head.first();
        for c in &centerlines[1..] {
            let d = (c.first() - root).norm();
            if d > ROOT_TOLERANCE {
                return Err(Error::validation(
                    Some(c.id()),
                    format!("first point is {d:.6} mm away from the shared aorta center"),
                ));
            }
        }
        Ok(Self {
            case_id: case_id.into(),
            centerlines,
        })
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn centerlines(&self) -> &[Centerline] {
        &self.centerlines
    }

    /// The aorta center shared by all centerlines.
    pub fn root(&self) -> Point3 {
        self.centerlines[0].first()
    }

    pub fn len(&self) -> usize {
        self.centerlines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centerlines.is_empty()
    }

    /// Applies `f` to every point, keeping ids.
    pub fn map_points(&self, f: impl Fn(&Point3) -> Point3) -> Result<Self> {
        let centerlines = self
            .centerlines
            .iter()
            .map(|c| Centerline::new(c.id, c.points.iter().map(&f).collect()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.case_id.clone(), centerlines)
    }

    /// Reorders centerlines; `order[k]` is the old position of the new k-th
    /// centerline. Ids are reassigned by the new position.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let polylines = order
            .iter()
            .map(|&i| self.centerlines[i].points.clone())
            .collect();
        Self::from_polylines(self.case_id.clone(), polylines)
    }
}

#[derive(Serialize, Deserialize)]
struct CenterlineFile {
    case_id: String,
    centerlines: Vec<Vec<[f64; 3]>>,
}

pub fn read_centerline_set(path: impl AsRef<Path>) -> Result<CenterlineSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_centerline_set(&text)
}

pub fn parse_centerline_set(text: &str) -> Result<CenterlineSet> {
    let file: CenterlineFile =
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let polylines = file
        .centerlines
        .into_iter()
        .map(|pts| pts.into_iter().map(Point3::from).collect())
        .collect();
    CenterlineSet::from_polylines(file.case_id, polylines)
}

pub fn centerline_set_to_json(set: &CenterlineSet) -> String {
    let file = CenterlineFile {
        case_id: set.case_id.clone(),
        centerlines: set
            .centerlines
            .iter()
            .map(|c| c.points.iter().map(|p| [p.x, p.y, p.z]).collect())
            .collect(),
    };
    serde_json::to_string(&file).expect("centerline file serializes")
}

pub fn write_centerline_set(set: &CenterlineSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, centerline_set_to_json(set)).map_err(|e| Error::io(path, e))
}

pub fn polyline_length(points: &[Point3]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Resamples a polyline at uniform arc-length spacing `step`.
///
/// Output points sit on the piecewise-linear curve at arc lengths
/// `0, step, 2*step, ...` up to the total length. No off-grid closing point
/// is appended, so every consecutive pair is exactly `step` apart in arc
/// length. The result depends only on the prefix of the input that it
/// covers: two polylines sharing a prefix resample to identical points over
/// that prefix.
pub fn resample_polyline(points: &[Point3], step: f64) -> Result<Vec<Point3>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Geometry(format!("invalid resampling step {step}")));
    }
    if points.len() < 2 {
        return Err(Error::Geometry(format!(
            "need at least 2 points to resample, got {}",
            points.len()
        )));
    }
    let lengths: Vec<f64> = points.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    let total: f64 = lengths.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Geometry("polyline has zero length".into()));
    }

    let count = (total / step + 1e-9).floor() as usize;
    let mut out = Vec::with_capacity(count + 1);
    out.push(points[0]);

    let mut seg = 0;
    let mut seg_start = 0.0;
    for k in 1..=count {
        let s = k as f64 * step;
        while seg + 1 < lengths.len() && seg_start + lengths[seg] < s {
            seg_start += lengths[seg];
            seg += 1;
        }
        let len = lengths[seg];
        let t = if len > 0.0 {
            ((s - seg_start) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(points[seg] + (points[seg + 1] - points[seg]) * t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SegmentLabel {
    #[serde(rename = "RCA_prox")]
    RcaProx,
    #[serde(rename = "RCA_mid")]
    RcaMid,
    #[serde(rename = "RCA_dist")]
    RcaDist,
    #[serde(rename = "LM")]
    Lm,
    #[serde(rename = "LAD_prox")]
    LadProx,
    #[serde(rename = "LAD_mid")]
    LadMid,
    #[serde(rename = "LAD_dist")]
    LadDist,
    #[serde(rename = "LAD_D1")]
    LadD1,
    #[serde(rename = "CX_prox")]
    CxProx,
    #[serde(rename = "CX_dist")]
    CxDist,
    #[serde(rename = "CX_OM2")]
    CxOm2,
    #[serde(rename = "CX_OM1")]
    CxOm1,
    #[serde(rename = "RAMUS")]
    Ramus,
}

impl SegmentLabel {
    pub const ALL: [SegmentLabel; 13] = [
        SegmentLabel::RcaProx,
        SegmentLabel::RcaMid,
        SegmentLabel::RcaDist,
        SegmentLabel::Lm,
        SegmentLabel::LadProx,
        SegmentLabel::LadMid,
        SegmentLabel::LadDist,
        SegmentLabel::LadD1,
        SegmentLabel::CxProx,
        SegmentLabel::CxDist,
        SegmentLabel::CxOm2,
        SegmentLabel::CxOm1,
        SegmentLabel::Ramus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SegmentLabel::RcaProx => "RCA_prox",
            SegmentLabel::RcaMid => "RCA_mid",
            SegmentLabel::RcaDist => "RCA_dist",
            SegmentLabel::Lm => "LM",
            SegmentLabel::LadProx => "LAD_prox",
            SegmentLabel::LadMid => "LAD_mid",
            SegmentLabel::LadDist => "LAD_dist",
            SegmentLabel::LadD1 => "LAD_D1",
            SegmentLabel::CxProx => "CX_prox",
            SegmentLabel::CxDist => "CX_dist",
            SegmentLabel::CxOm2 => "CX_OM2",
            SegmentLabel::CxOm1 => "CX_OM1",
            SegmentLabel::Ramus => "RAMUS",
        }
    }
}

impl fmt::Display for SegmentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SegmentLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SegmentLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown segment label {s:?}")))
    }
}

/// A named run of resampled centerline points.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSegment {
    pub label: SegmentLabel,
    pub points: Vec<Point3>,
    /// Set when the vessel ended before the full segment length.
    pub truncated: bool,
    /// Id of the centerline the points were taken from.
    pub source: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64, z: f64) -> Point3 {
        Point3::new(x, y, z)
    }

    #[test]
    fn straight_segment_resamples_on_quarter_grid() {
        let out = resample_polyline(&[p(0.0, 0.0, 0.0), p(0.0, 0.0, 1.0)], 0.25).unwrap();
        let z: Vec<f64> = out.iter().map(|q| q.z).collect();
        assert_eq!(z, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn step_longer_than_curve() {
        let line = [p(0.0, 0.0, 0.0), p(0.3, 0.0, 0.0)];
        assert_eq!(resample_polyline(&line, 1.0).unwrap().len(), 1);
        assert_eq!(resample_polyline(&line, 0.3).unwrap().len(), 2);
    }

    #[test]
    fn degenerate_polylines_are_rejected() {
        assert!(matches!(
            resample_polyline(&[p(1.0, 2.0, 3.0)], 0.25),
            Err(Error::Geometry(_))
        ));
        assert!(matches!(
            resample_polyline(&[p(1.0, 2.0, 3.0), p(1.0, 2.0, 3.0)], 0.25),
            Err(Error::Geometry(_))
        ));
        assert!(resample_polyline(&[p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0)], 0.0).is_err());
    }

    #[test]
    fn minimal_set_parses() {
        let set = parse_centerline_set(r#"{"case_id":"a","centerlines":[[[0,0,0],[1,0,0]]]}"#)
            .unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.case_id(), "a");
    }

    #[test]
    fn mismatched_roots_name_the_centerline() {
        let err = parse_centerline_set(
            r#"{"case_id":"a","centerlines":[[[0,0,0],[1,0,0]],[[1,0,0],[2,0,0]]]}"#,
        )
        .unwrap_err();
        match err {
            Error::Validation { index, .. } => assert_eq!(index, Some(1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        assert!(matches!(
            parse_centerline_set("{\"case_id\": 3"),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn invalid_centerlines_are_rejected() {
        assert!(Centerline::new(0, vec![p(0.0, 0.0, 0.0)]).is_err());
        assert!(Centerline::new(0, vec![p(0.0, 0.0, 0.0), p(0.0, 0.0, 0.0)]).is_err());
        assert!(CenterlineSet::new("x", vec![]).is_err());
    }

    #[test]
    fn tenth_survives_round_trip() {
        let set = CenterlineSet::from_polylines(
            "c",
            vec![vec![p(0.1, 0.1, 0.1), p(0.2, 0.30000000000000004, 1e-300)]],
        )
        .unwrap();
        let back = parse_centerline_set(&centerline_set_to_json(&set)).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.centerlines()[0].points()[0].x, 0.1);
    }

    #[test]
    fn empty_path_is_an_io_error() {
        let set = CenterlineSet::from_polylines("c", vec![vec![p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0)]])
            .unwrap();
        assert!(matches!(write_centerline_set(&set, ""), Err(Error::Io { .. })));
    }

    #[test]
    fn labels_round_trip_through_strings() {
        for l in SegmentLabel::ALL {
            assert_eq!(l.as_str().parse::<SegmentLabel>().unwrap(), l);
            assert_eq!(serde_json::to_string(&l).unwrap(), format!("\"{l}\""));
        }
    }
}
