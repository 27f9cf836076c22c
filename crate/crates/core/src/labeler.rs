//! Heuristic subdivision of a coronary centerline tree into fixed-length,
//! consistently named segments.
//!
//! All centerlines are first resampled at 0.25 mm. Every index used below
//! (divergence indices, the direction lookahead, segment boundaries) counts
//! resampled points, so index `i` sits at arc length `i * 0.25` mm from the
//! aorta center on every centerline.
//!
//! Rules:
//! - left/right split by the sign of `dot(c[lookahead] - c[0], right_axis)`;
//! - right tree: the longest centerline gives RCA prox/mid/dist, measured
//!   from the ostium;
//! - left tree: the bifurcation is where the most centerline pairs diverge;
//!   LM runs from the ostium to it; branch directions just past it are
//!   clustered, and the clusters ranked by `dot(direction, right_axis)`
//!   become LAD (max), CX (min) and RAMUS (middle, three clusters only);
//! - the longest LAD/CX members give three segments each, and the member
//!   with the longest part off the main branch gives D1/OM1.
//!
//! Centerlines are put into a canonical content order before any rule runs,
//! so results do not depend on the input order.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::centerline::{
    resample_polyline, CenterlineSet, LabeledSegment, Point3, SegmentLabel, Vector3,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelerConfig {
    /// Segment length in mm.
    pub segment_length: f64,
    /// Resampled points between a branch start and its direction sample.
    pub direction_lookahead: usize,
    /// Two centerlines coincide while their points are this close, in mm.
    pub split_tolerance: f64,
    /// Directions closer than this many degrees belong to one branch.
    pub direction_cluster_angle: f64,
    /// Unit vector pointing to the patient's right.
    pub right_axis: Vector3,
    /// The ostium is the first point farther than this from the aorta center.
    pub aorta_radius: f64,
    pub resample_step: f64,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            segment_length: 32.0,
            direction_lookahead: 10,
            split_tolerance: 0.5,
            direction_cluster_angle: 20.0,
            right_axis: Vector3::new(-1.0, 0.0, 0.0),
            aorta_radius: 15.0,
            resample_step: 0.25,
        }
    }
}

impl LabelerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::validation(None, format!("labeler config: {m}")));
        if !(self.segment_length > 0.0) {
            return bad("segment_length must be > 0");
        }
        if self.direction_lookahead < 1 {
            return bad("direction_lookahead must be >= 1");
        }
        if !(self.split_tolerance > 0.0) {
            return bad("split_tolerance must be > 0");
        }
        if !(self.direction_cluster_angle > 0.0 && self.direction_cluster_angle < 90.0) {
            return bad("direction_cluster_angle must be in (0, 90)");
        }
        if !((self.right_axis.norm() - 1.0).abs() < 1e-6) {
            return bad("right_axis must be a unit vector");
        }
        if !(self.aorta_radius >= 0.0) {
            return bad("aorta_radius must be >= 0");
        }
        if !(self.resample_step > 0.0) {
            return bad("resample_step must be > 0");
        }
        Ok(())
    }

    /// Points per full segment, endpoints included.
    pub fn segment_points(&self) -> usize {
        (self.segment_length / self.resample_step).round() as usize + 1
    }

    /// Index window within which divergence votes are pooled.
    fn vote_window(&self) -> usize {
        (self.split_tolerance / self.resample_step).round() as usize
    }
}

/// A centerline resampled at the labeler pitch.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: usize,
    /// Arc length of the original polyline, mm.
    pub arc_length: f64,
    pub points: Vec<Point3>,
}

impl Track {
    fn len(&self) -> usize {
        self.points.len()
    }
}

/// Longest first; equal lengths fall back to the canonical order.
fn longer(a: &Track, b: &Track) -> Ordering {
    b.arc_length
        .total_cmp(&a.arc_length)
        .then_with(|| canonical_cmp(a, b))
}

fn canonical_cmp(a: &Track, b: &Track) -> Ordering {
    for (p, q) in a.points.iter().zip(&b.points) {
        let o = p
            .x
            .total_cmp(&q.x)
            .then(p.y.total_cmp(&q.y))
            .then(p.z.total_cmp(&q.z));
        if o != Ordering::Equal {
            return o;
        }
    }
    a.len().cmp(&b.len()).then(a.id.cmp(&b.id))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SideSplit {
    pub left: Vec<Track>,
    pub right: Vec<Track>,
    pub diagnostics: Vec<String>,
}

/// Resamples every centerline and assigns it to the left or right tree.
///
/// Centerlines with no more than `direction_lookahead` resampled points are
/// excluded and reported in the diagnostics.
pub fn split_left_right(set: &CenterlineSet, config: &LabelerConfig) -> Result<SideSplit> {
    let mut split = SideSplit::default();
    let mut tracks = Vec::with_capacity(set.len());
    for c in set.centerlines() {
        let points = resample_polyline(c.points(), config.resample_step)?;
        tracks.push(Track {
            id: c.id(),
            arc_length: c.arc_length(),
            points,
        });
    }
    tracks.sort_by(canonical_cmp);
    for t in tracks {
        match side_of(&t, config) {
            Ok(true) => split.right.push(t),
            Ok(false) => split.left.push(t),
            Err(e) => split.diagnostics.push(format!("excluded: {e}")),
        }
    }
    Ok(split)
}

/// `true` for the right side.
fn side_of(track: &Track, config: &LabelerConfig) -> Result<bool> {
    let k = config.direction_lookahead;
    if track.len() <= k {
        return Err(Error::TooShort {
            id: track.id,
            points: track.len(),
            lookahead: k,
        });
    }
    Ok((track.points[k] - track.points[0]).dot(&config.right_axis) > 0.0)
}

/// Index of the first point farther than the aorta radius from `points[0]`,
/// or 0 when the centerline never leaves the aorta.
pub fn ostium_index(points: &[Point3], config: &LabelerConfig) -> usize {
    let root = points[0];
    points
        .iter()
        .position(|p| (p - root).norm() > config.aorta_radius)
        .unwrap_or(0)
}

/// Cuts consecutive full-length segments starting at `start`.
///
/// Consecutive segments share their boundary point. A segment that runs
/// past the end of the track is emitted truncated; nothing is emitted once
/// fewer than two points remain.
fn consecutive_segments(
    track: &Track,
    start: usize,
    labels: &[SegmentLabel],
    config: &LabelerConfig,
) -> Vec<LabeledSegment> {
    let span = config.segment_points() - 1;
    let mut out = Vec::new();
    for (k, &label) in labels.iter().enumerate() {
        let s = start + k * span;
        if s + 1 >= track.len() {
            break;
        }
        let e = (s + span).min(track.len() - 1);
        out.push(LabeledSegment {
            label,
            points: track.points[s..=e].to_vec(),
            truncated: e - s < span,
            source: track.id,
        });
        if e - s < span {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TreeLabels {
    pub segments: Vec<LabeledSegment>,
    pub diagnostics: Vec<String>,
}

/// RCA prox/mid/dist along the longest right centerline.
pub fn label_right_tree(right: &[Track], config: &LabelerConfig) -> TreeLabels {
    let mut out = TreeLabels::default();
    let Some(main) = right.iter().min_by(|a, b| longer(a, b)) else {
        out.diagnostics.push("right tree is empty; no RCA segments".into());
        return out;
    };
    let ostium = ostium_index(&main.points, config);
    out.segments = consecutive_segments(
        main,
        ostium,
        &[SegmentLabel::RcaProx, SegmentLabel::RcaMid, SegmentLabel::RcaDist],
        config,
    );
    out.diagnostics.push(format!(
        "RCA from centerline {} ({:.1} mm), ostium at index {ostium}",
        main.id, main.arc_length
    ));
    out
}

/// Last index at which two tracks coincide within the split tolerance,
/// walking from the aorta center. `None` when they never separate (one
/// ends while still on the other) or do not share their first point.
pub fn divergence_index(a: &Track, b: &Track, tolerance: f64) -> Option<usize> {
    let n = a.len().min(b.len());
    let mut i = 0;
    while i < n && (a.points[i] - b.points[i]).norm() <= tolerance {
        i += 1;
    }
    if i == 0 || i == n {
        None
    } else {
        Some(i - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bifurcation {
    pub point: Point3,
    /// Resampled index of the bifurcation, equal on all centerlines.
    pub index: usize,
    /// Pairs counted for the winning index.
    pub votes: usize,
}

/// The point where the left centerlines split most frequently.
///
/// Each pair votes for its divergence index. A candidate index scores the
/// pairs whose divergence lies within `round(split_tolerance / step)`
/// indices of it, which absorbs the late separation of branches leaving at
/// shallow angles. The best candidate wins, ties going to the most proximal
/// index. The returned point averages the candidate-index points of the
/// tracks in pairs diverging exactly there.
pub fn find_bifurcation(left: &[Track], config: &LabelerConfig) -> Result<Bifurcation> {
    if left.len() < 2 {
        return Err(Error::NoBifurcation);
    }
    let mut tracks: Vec<&Track> = left.iter().collect();
    tracks.sort_by(|a, b| canonical_cmp(a, b));

    let mut divergences: Vec<(usize, usize, usize)> = Vec::new();
    for i in 0..tracks.len() {
        for j in i + 1..tracks.len() {
            if let Some(d) = divergence_index(tracks[i], tracks[j], config.split_tolerance) {
                divergences.push((d, i, j));
            }
        }
    }
    if divergences.is_empty() {
        return Err(Error::NoBifurcation);
    }

    let w = config.vote_window();
    let mut candidates: Vec<usize> = divergences.iter().map(|&(d, _, _)| d).collect();
    candidates.sort_unstable();
    candidates.dedup();
    let mut best = (0usize, usize::MAX);
    for &c in &candidates {
        let votes = divergences.iter().filter(|&&(d, _, _)| d.abs_diff(c) <= w).count();
        if votes > best.0 {
            best = (votes, c);
        }
    }
    let (votes, index) = best;

    let mut members: Vec<usize> = divergences
        .iter()
        .filter(|&&(d, _, _)| d == index)
        .flat_map(|&(_, i, j)| [i, j])
        .collect();
    members.sort_unstable();
    members.dedup();
    let sum = members
        .iter()
        .fold(Vector3::zeros(), |acc, &m| acc + tracks[m].points[index].coords);
    Ok(Bifurcation {
        point: Point3::from(sum / members.len() as f64),
        index,
        votes,
    })
}

/// A centerline passing through the bifurcation.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchMember {
    pub id: usize,
    /// Index of the track point nearest to the bifurcation.
    pub start: usize,
    pub direction: Vector3,
    /// The track ended before the lookahead; its last point was used.
    pub short: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionCluster {
    pub direction: Vector3,
    pub members: Vec<BranchMember>,
}

/// Groups the centerlines through `bifurcation` by their initial direction.
///
/// A member's direction runs from its point nearest the bifurcation to the
/// point `direction_lookahead` indices further. Directions are agglomerated
/// greedily: seeds are taken in descending order of how many directions
/// fall within the cluster angle of them, and each seed absorbs every
/// unassigned direction within that angle. At most three clusters are kept
/// (largest first); extra ones are reported in `diagnostics`.
pub fn cluster_branch_directions(
    left: &[Track],
    bifurcation: &Point3,
    config: &LabelerConfig,
    diagnostics: &mut Vec<String>,
) -> Vec<DirectionCluster> {
    let mut tracks: Vec<&Track> = left.iter().collect();
    tracks.sort_by(|a, b| canonical_cmp(a, b));

    let mut members = Vec::new();
    for t in tracks {
        let (start, dist) = t
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - bifurcation).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("tracks are non-empty");
        if dist > config.split_tolerance {
            continue;
        }
        let ahead = start + config.direction_lookahead;
        let short = ahead >= t.len();
        let end = ahead.min(t.len() - 1);
        if short {
            diagnostics.push(format!(
                "centerline {}: fewer than {} points past the bifurcation, used its last point",
                t.id, config.direction_lookahead
            ));
        }
        let d = t.points[end] - t.points[start];
        if d.norm() == 0.0 {
            diagnostics.push(format!("centerline {} ends at the bifurcation", t.id));
            continue;
        }
        members.push(BranchMember {
            id: t.id,
            start,
            direction: d.normalize(),
            short,
        });
    }

    let cos_limit = config.direction_cluster_angle.to_radians().cos();
    let close = |a: &Vector3, b: &Vector3| a.dot(b) > cos_limit;
    let neighbours: Vec<usize> = members
        .iter()
        .map(|m| members.iter().filter(|o| close(&m.direction, &o.direction)).count())
        .collect();
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| neighbours[b].cmp(&neighbours[a]).then(a.cmp(&b)));

    let mut assigned = vec![false; members.len()];
    let mut clusters: Vec<DirectionCluster> = Vec::new();
    for &seed in &order {
        if assigned[seed] {
            continue;
        }
        let seed_dir = members[seed].direction;
        let mut group = Vec::new();
        for (i, m) in members.iter().enumerate() {
            if !assigned[i] && close(&seed_dir, &m.direction) {
                assigned[i] = true;
                group.push(m.clone());
            }
        }
        let sum = group.iter().fold(Vector3::zeros(), |acc, m| acc + m.direction);
        let direction = if sum.norm() > 0.0 { sum.normalize() } else { seed_dir };
        clusters.push(DirectionCluster {
            direction,
            members: group,
        });
    }

    if clusters.len() > 3 {
        clusters.sort_by(|a, b| b.members.len().cmp(&a.members.len()));
        for dropped in clusters.drain(3..) {
            let ids: Vec<usize> = dropped.members.iter().map(|m| m.id).collect();
            diagnostics.push(format!("dropped extra direction cluster with centerlines {ids:?}"));
        }
    }
    clusters
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LeftTreeLabels {
    pub segments: Vec<LabeledSegment>,
    pub bifurcation: Option<Point3>,
    pub diagnostics: Vec<String>,
}

/// LM, LAD, CX, their side branches and RAMUS.
pub fn label_left_tree(left: &[Track], config: &LabelerConfig) -> LeftTreeLabels {
    let mut out = LeftTreeLabels::default();
    if left.is_empty() {
        out.diagnostics.push("left tree is empty".into());
        return out;
    }
    let by_id = |id: usize| left.iter().find(|t| t.id == id).expect("member of left");

    let bif = match find_bifurcation(left, config) {
        Ok(b) => b,
        Err(e) => {
            // degenerate tree: LM along the longest centerline, nothing else
            let main = left.iter().min_by(|a, b| longer(a, b)).expect("non-empty");
            let o = ostium_index(&main.points, config);
            out.segments = consecutive_segments(main, o, &[SegmentLabel::Lm], config);
            out.diagnostics.push(format!("{e}; LM only, from centerline {}", main.id));
            return out;
        }
    };
    out.bifurcation = Some(bif.point);
    out.diagnostics.push(format!(
        "bifurcation at index {} ({} pair votes)",
        bif.index, bif.votes
    ));

    let clusters = cluster_branch_directions(left, &bif.point, config, &mut out.diagnostics);
    if clusters.is_empty() {
        out.diagnostics.push("no centerline passes through the bifurcation".into());
        return out;
    }

    // LM: the last segment_length before the bifurcation, from the ostium.
    let all_members: Vec<&BranchMember> = clusters.iter().flat_map(|c| &c.members).collect();
    let lm_host = all_members
        .iter()
        .min_by(|a, b| longer(by_id(a.id), by_id(b.id)))
        .expect("clusters are non-empty");
    let lm_track = by_id(lm_host.id);
    let ostium = ostium_index(&lm_track.points, config);
    let end = lm_host.start;
    if end > ostium {
        let span = config.segment_points() - 1;
        let start = ostium.max(end.saturating_sub(span));
        out.segments.push(LabeledSegment {
            label: SegmentLabel::Lm,
            points: lm_track.points[start..=end].to_vec(),
            truncated: end - start < span,
            source: lm_track.id,
        });
    } else {
        out.diagnostics
            .push("bifurcation lies inside the aorta radius; LM skipped".into());
    }

    let score = |c: &DirectionCluster| c.direction.dot(&config.right_axis);
    let mut ranked: Vec<&DirectionCluster> = clusters.iter().collect();
    ranked.sort_by(|a, b| score(b).total_cmp(&score(a)));
    let lad = ranked[0];
    let cx = if ranked.len() >= 2 { Some(ranked[ranked.len() - 1]) } else { None };
    let ramus = if ranked.len() == 3 { Some(ranked[1]) } else { None };
    if cx.is_none() {
        out.diagnostics
            .push("single branch direction at the bifurcation; CX labels skipped".into());
    }

    let mut branch = |cluster: &DirectionCluster, main_labels: &[SegmentLabel], side: SegmentLabel| {
        let main = cluster
            .members
            .iter()
            .min_by(|a, b| longer(by_id(a.id), by_id(b.id)))
            .expect("clusters are non-empty");
        let main_track = by_id(main.id);
        out.segments
            .extend(consecutive_segments(main_track, main.start, main_labels, config));

        let mut best: Option<(usize, &Track, usize)> = None;
        for m in &cluster.members {
            if m.id == main.id {
                continue;
            }
            let t = by_id(m.id);
            let Some(d) = divergence_index(main_track, t, config.split_tolerance) else {
                continue;
            };
            let off = t.len() - 1 - d;
            let better = match best {
                None => true,
                Some((b_off, b_t, _)) => {
                    off > b_off || (off == b_off && canonical_cmp(t, b_t) == Ordering::Less)
                }
            };
            if better {
                best = Some((off, t, d));
            }
        }
        match best {
            Some((_, t, d)) => out.segments.extend(consecutive_segments(t, d, &[side], config)),
            None => out.diagnostics.push(format!("no side branch found for {side}")),
        }
    };

    branch(
        lad,
        &[SegmentLabel::LadProx, SegmentLabel::LadMid, SegmentLabel::LadDist],
        SegmentLabel::LadD1,
    );
    if let Some(cx) = cx {
        branch(
            cx,
            &[SegmentLabel::CxProx, SegmentLabel::CxDist, SegmentLabel::CxOm2],
            SegmentLabel::CxOm1,
        );
    }
    if let Some(ramus) = ramus {
        let main = ramus
            .members
            .iter()
            .min_by(|a, b| longer(by_id(a.id), by_id(b.id)))
            .expect("clusters are non-empty");
        out.segments.extend(consecutive_segments(
            by_id(main.id),
            main.start,
            &[SegmentLabel::Ramus],
            config,
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelingResult {
    pub case_id: String,
    /// Sorted by label; at most one segment per label.
    pub segments: Vec<LabeledSegment>,
    pub bifurcation: Option<Point3>,
    pub diagnostics: Vec<String>,
}

impl LabelingResult {
    pub fn segment(&self, label: SegmentLabel) -> Option<&LabeledSegment> {
        self.segments.iter().find(|s| s.label == label)
    }

    /// Label to source centerline id.
    pub fn assignments(&self) -> BTreeMap<SegmentLabel, usize> {
        self.segments.iter().map(|s| (s.label, s.source)).collect()
    }
}

/// Runs the full labeling heuristic on one case.
///
/// Per-rule failures become diagnostics; the call fails only when no
/// segment at all could be labeled.
pub fn label_centerlines(set: &CenterlineSet, config: &LabelerConfig) -> Result<LabelingResult> {
    config.validate()?;
    let split = split_left_right(set, config)?;
    let mut diagnostics = split.diagnostics;
    diagnostics.push(format!(
        "{} right and {} left centerlines",
        split.right.len(),
        split.left.len()
    ));

    let right = label_right_tree(&split.right, config);
    let left = label_left_tree(&split.left, config);
    diagnostics.extend(right.diagnostics);
    diagnostics.extend(left.diagnostics);

    let mut segments = right.segments;
    segments.extend(left.segments);
    segments.sort_by_key(|s| s.label);
    if segments.is_empty() {
        return Err(Error::NothingLabeled(diagnostics.join("; ")));
    }
    Ok(LabelingResult {
        case_id: set.case_id().to_string(),
        segments,
        bifurcation: left.bifurcation,
        diagnostics,
    })
}

#[derive(Serialize, Deserialize)]
struct SegmentRecord {
    label: SegmentLabel,
    truncated: bool,
    source: usize,
    points: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct LabelingFile {
    case_id: String,
    bifurcation: Option<[f64; 3]>,
    segments: Vec<SegmentRecord>,
    diagnostics: Vec<String>,
}

pub fn labeling_to_json(result: &LabelingResult) -> String {
    let file = LabelingFile {
        case_id: result.case_id.clone(),
        bifurcation: result.bifurcation.map(|p| [p.x, p.y, p.z]),
        segments: result
            .segments
            .iter()
            .map(|s| SegmentRecord {
                label: s.label,
                truncated: s.truncated,
                source: s.source,
                points: s.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            })
            .collect(),
        diagnostics: result.diagnostics.clone(),
    };
    serde_json::to_string(&file).expect("labeling serializes")
}

pub fn parse_labeling(text: &str) -> Result<LabelingResult> {
    let file: LabelingFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(LabelingResult {
        case_id: file.case_id,
        bifurcation: file.bifurcation.map(Point3::from),
        segments: file
            .segments
            .into_iter()
            .map(|s| LabeledSegment {
                label: s.label,
                truncated: s.truncated,
                source: s.source,
                points: s.points.into_iter().map(Point3::from).collect(),
            })
            .collect(),
        diagnostics: file.diagnostics,
    })
}
