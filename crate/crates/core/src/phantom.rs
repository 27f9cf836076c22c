//! Synthetic coronary trees rasterized into CT-like volumes, with known
//! labels and stenosis grades.
//!
//! A tree is a set of branches grown from the aorta center (RCA and LM) or
//! from a node of a parent branch. Each branch is a chain of nodes 0.5 mm
//! apart whose direction turns smoothly from an initial to a target
//! direction. Centerlines are the root-to-tip node paths, so centerlines
//! sharing a parent share that prefix exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::centerline::{CenterlineSet, LabeledSegment, Point3, SegmentLabel, Vector3};
use crate::error::{Error, Result};
use crate::labeler::LabelingResult;
use crate::ordinal::CadRadsGrade;
use crate::volume::Volume;

/// Distance between consecutive branch nodes, mm.
pub const NODE_SPACING: f64 = 0.5;
/// Tubes are drawn this far past a branch tip so the lumen does not end
/// inside the last labeled segment.
const TIP_EXTENSION: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Vessel {
    #[serde(rename = "RCA")]
    Rca,
    #[serde(rename = "LM")]
    Lm,
    #[serde(rename = "LAD")]
    Lad,
    #[serde(rename = "CX")]
    Cx,
    #[serde(rename = "RAMUS")]
    Ramus,
    #[serde(rename = "D1")]
    D1,
    #[serde(rename = "OM1")]
    Om1,
    /// Unlabeled RCA side branch.
    #[serde(rename = "AM")]
    Am,
    /// Unlabeled second diagonal.
    #[serde(rename = "D2")]
    D2,
}

impl Vessel {
    pub fn as_str(self) -> &'static str {
        match self {
            Vessel::Rca => "RCA",
            Vessel::Lm => "LM",
            Vessel::Lad => "LAD",
            Vessel::Cx => "CX",
            Vessel::Ramus => "RAMUS",
            Vessel::D1 => "D1",
            Vessel::Om1 => "OM1",
            Vessel::Am => "AM",
            Vessel::D2 => "D2",
        }
    }

    /// Segment labels the labeler should assign along this vessel.
    pub fn expected_labels(self) -> &'static [SegmentLabel] {
        use SegmentLabel::*;
        match self {
            Vessel::Rca => &[RcaProx, RcaMid, RcaDist],
            Vessel::Lm => &[Lm],
            Vessel::Lad => &[LadProx, LadMid, LadDist],
            Vessel::Cx => &[CxProx, CxDist, CxOm2],
            Vessel::Ramus => &[Ramus],
            Vessel::D1 => &[LadD1],
            Vessel::Om1 => &[CxOm1],
            Vessel::Am | Vessel::D2 => &[],
        }
    }
}

impl fmt::Display for Vessel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Vessel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Parse(format!("unknown vessel {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub vessel: Vessel,
    /// `None` for branches leaving the aorta center.
    pub parent: Option<Vessel>,
    /// Arc length along the parent where this branch leaves it, mm.
    pub attach_mm: f64,
    pub direction: [f64; 3],
    pub target_direction: [f64; 3],
    /// Arc length over which the direction blends into the target, mm.
    pub turn_mm: f64,
    pub length_mm: f64,
    pub radius_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StenosisSpec {
    pub vessel: Vessel,
    /// Lesion center, arc length from the branch start, mm.
    pub position_mm: f64,
    pub length_mm: f64,
    /// Diameter reduction, 0..=1.
    pub severity: f64,
    /// Narrow along one cross-section axis only.
    #[serde(default)]
    pub eccentric: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub case_id: String,
    pub branches: Vec<BranchSpec>,
    #[serde(default)]
    pub stenoses: Vec<StenosisSpec>,
    pub lumen_hu: f64,
    pub background_hu: f64,
    pub spacing_mm: f64,
    /// Peak displacement of the smooth geometric jitter field, mm.
    #[serde(default)]
    pub jitter_mm: f64,
    #[serde(default)]
    pub seed: u64,
    /// Free space around the tree when the bounds are fitted, mm.
    pub margin_mm: f64,
    /// Explicit volume bounds `[min, max]`; fitted to the tree when absent.
    #[serde(default)]
    pub bounds: Option<[[f64; 3]; 2]>,
}

pub const DEFAULT_LUMEN_HU: f64 = 774.0;
pub const DEFAULT_BACKGROUND_HU: f64 = -50.0;
pub const DEFAULT_SPACING: f64 = 0.4;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Spec(format!("{}: {m}", self.case_id)));
        if !(self.spacing_mm > 0.0) || !(self.margin_mm >= 0.0) || !(self.jitter_mm >= 0.0) {
            return err("spacing must be > 0, margin and jitter >= 0".into());
        }
        if !self.lumen_hu.is_finite() || !self.background_hu.is_finite() {
            return err("intensities must be finite".into());
        }
        let mut seen: Vec<Vessel> = Vec::new();
        for b in &self.branches {
            if seen.contains(&b.vessel) {
                return err(format!("vessel {} declared twice", b.vessel));
            }
            if !(b.radius_mm > 0.0) {
                return err(format!("{} radius must be > 0", b.vessel));
            }
            if !(b.length_mm >= NODE_SPACING) || !(b.turn_mm > 0.0) {
                return err(format!("{} length and turn distance must be positive", b.vessel));
            }
            if as_vector(b.direction).norm() == 0.0 || as_vector(b.target_direction).norm() == 0.0 {
                return err(format!("{} directions must be non-zero", b.vessel));
            }
            if let Some(p) = b.parent {
                let Some(parent) = self.branches.iter().find(|x| x.vessel == p) else {
                    return err(format!("{} parent {p} is not declared", b.vessel));
                };
                if !seen.contains(&p) {
                    return err(format!("{} declared before its parent {p}", b.vessel));
                }
                if !(b.attach_mm >= 0.0 && b.attach_mm <= parent.length_mm) {
                    return err(format!("{} attaches outside {p}", b.vessel));
                }
            }
            seen.push(b.vessel);
        }
        for s in &self.stenoses {
            let Some(b) = self.branches.iter().find(|x| x.vessel == s.vessel) else {
                return err(format!("stenosis on undeclared vessel {}", s.vessel));
            };
            if !(0.0..=1.0).contains(&s.severity) {
                return err(format!("severity {} outside [0, 1]", s.severity));
            }
            if !(s.length_mm > 0.0) || !(s.position_mm >= 0.0 && s.position_mm <= b.length_mm) {
                return err(format!("stenosis on {} lies outside the branch", s.vessel));
            }
        }
        Ok(())
    }
}

fn as_vector(a: [f64; 3]) -> Vector3 {
    Vector3::new(a[0], a[1], a[2])
}

/// Dip of the radius at `u` lesion lengths from the lesion center: full
/// over the central third, cosine tapers over the outer thirds.
pub fn stenosis_profile(u: f64) -> f64 {
    let a = u.abs();
    if a <= 1.0 / 6.0 {
        1.0
    } else if a < 0.5 {
        0.5 * (1.0 + (std::f64::consts::PI * (a - 1.0 / 6.0) * 3.0).cos())
    } else {
        0.0
    }
}

/// Ground-truth grade: band of the largest severity.
pub fn grade_of(stenoses: &[StenosisSpec]) -> CadRadsGrade {
    let worst = stenoses.iter().map(|s| s.severity).fold(0.0, f64::max);
    CadRadsGrade::from_stenosis(worst)
}

/// Smooth displacement field; each axis is one plane wave of wavelength
/// 40..80 mm with amplitude `jitter_mm`.
struct Jitter {
    amplitude: f64,
    waves: [(Vector3, f64); 3],
}

impl Jitter {
    fn new(amplitude: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut wave = || {
            let dir = random_unit(&mut rng);
            let wavelength = rng.gen_range(40.0..80.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (dir * (std::f64::consts::TAU / wavelength), phase)
        };
        Self {
            amplitude,
            waves: [wave(), wave(), wave()],
        }
    }

    fn displace(&self, p: &Point3) -> Point3 {
        if self.amplitude == 0.0 {
            return *p;
        }
        let d = |a: usize| self.amplitude * (self.waves[a].0.dot(&p.coords) + self.waves[a].1).sin();
        p + Vector3::new(d(0), d(1), d(2))
    }
}

fn random_unit(rng: &mut impl Rng) -> Vector3 {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Cross-section radii at one node. `minor` lies along the eccentric axis.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Radii {
    minor: f64,
    major: f64,
}

#[derive(Debug, Clone)]
struct Tube {
    nodes: Vec<Point3>,
    radii: Vec<Radii>,
    /// Reference for the eccentric axis; projected onto each cross-section.
    minor_axis: Vector3,
}

/// The tree geometry without the rasterized volume.
#[derive(Debug, Clone)]
pub struct PhantomGeometry {
    pub case_id: String,
    pub centerlines: CenterlineSet,
    /// Root-to-tip node path of every vessel (LM ends at its tip).
    pub paths: BTreeMap<Vessel, Vec<Point3>>,
    pub grade: CadRadsGrade,
    pub branch_severity: BTreeMap<Vessel, f64>,
    pub stenoses: Vec<StenosisSpec>,
    tubes: Vec<Tube>,
}

impl PhantomGeometry {
    /// Labels the labeler should produce, with the vessel carrying each.
    pub fn expected_labels(&self) -> BTreeMap<SegmentLabel, Vessel> {
        self.paths
            .keys()
            .flat_map(|&v| v.expected_labels().iter().map(move |&l| (l, v)))
            .collect()
    }

    /// Axis-aligned box enclosing all tubes.
    fn extent(&self) -> (Point3, Point3) {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        for t in &self.tubes {
            for (p, r) in t.nodes.iter().zip(&t.radii) {
                let r = r.major.max(r.minor);
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a] - r);
                    hi[a] = hi[a].max(p[a] + r);
                }
            }
        }
        (lo, hi)
    }
}

/// Builds centerlines, paths and truth for a spec without rasterizing.
pub fn build_geometry(spec: &PhantomSpec) -> Result<PhantomGeometry> {
    spec.validate()?;
    let jitter = Jitter::new(spec.jitter_mm, spec.seed);

    // Unjittered node chains; children start on an existing parent node.
    let mut raw: BTreeMap<Vessel, Vec<Point3>> = BTreeMap::new();
    let mut attach_index: BTreeMap<Vessel, usize> = BTreeMap::new();
    for b in &spec.branches {
        let (start, dir0) = match b.parent {
            None => (Point3::origin(), as_vector(b.direction)),
            Some(p) => {
                let parent = &raw[&p];
                let i = ((b.attach_mm / NODE_SPACING).round() as usize).min(parent.len() - 1);
                attach_index.insert(b.vessel, i);
                (parent[i], as_vector(b.direction))
            }
        };
        raw.insert(b.vessel, grow(start, dir0, as_vector(b.target_direction), b.turn_mm, b.length_mm));
    }
    let nodes: BTreeMap<Vessel, Vec<Point3>> = raw
        .iter()
        .map(|(&v, pts)| (v, pts.iter().map(|p| jitter.displace(p)).collect()))
        .collect();

    let parent_of: BTreeMap<Vessel, Option<Vessel>> =
        spec.branches.iter().map(|b| (b.vessel, b.parent)).collect();
    let path_of = |v: Vessel| -> Vec<Point3> {
        let mut chain = vec![v];
        while let Some(Some(p)) = parent_of.get(chain.last().unwrap()) {
            chain.push(*p);
        }
        chain.reverse();
        let mut path: Vec<Point3> = Vec::new();
        for (k, &c) in chain.iter().enumerate() {
            let own = &nodes[&c];
            let end = match chain.get(k + 1) {
                Some(child) => attach_index[child],
                None => own.len() - 1,
            };
            let skip = usize::from(k > 0);
            path.extend_from_slice(&own[skip..=end]);
        }
        path
    };
    let paths: BTreeMap<Vessel, Vec<Point3>> =
        spec.branches.iter().map(|b| (b.vessel, path_of(b.vessel))).collect();

    // A vessel ends in a tip unless a child continues from its last node.
    let polylines: Vec<Vec<Point3>> = spec
        .branches
        .iter()
        .filter(|b| {
            let last = nodes[&b.vessel].len() - 1;
            !spec
                .branches
                .iter()
                .any(|c| c.parent == Some(b.vessel) && attach_index[&c.vessel] == last)
        })
        .map(|b| paths[&b.vessel].clone())
        .collect();
    let centerlines = CenterlineSet::from_polylines(spec.case_id.clone(), polylines)?;

    let mut tubes = Vec::new();
    for b in &spec.branches {
        let own = &nodes[&b.vessel];
        let mut pts = own.clone();
        let tip_dir = (own[own.len() - 1] - own[own.len() - 2]).normalize();
        let extra = (TIP_EXTENSION / NODE_SPACING).round() as usize;
        for k in 1..=extra {
            pts.push(own[own.len() - 1] + tip_dir * (k as f64 * NODE_SPACING));
        }
        let lesions: Vec<&StenosisSpec> =
            spec.stenoses.iter().filter(|s| s.vessel == b.vessel).collect();
        let radii = (0..pts.len())
            .map(|k| {
                let s = k as f64 * NODE_SPACING;
                let mut radii = Radii {
                    minor: b.radius_mm,
                    major: b.radius_mm,
                };
                for l in &lesions {
                    let r = b.radius_mm * (1.0 - l.severity * stenosis_profile((s - l.position_mm) / l.length_mm));
                    radii.minor = radii.minor.min(r);
                    if !l.eccentric {
                        radii.major = radii.major.min(r);
                    }
                }
                radii
            })
            .collect();
        tubes.push(Tube {
            nodes: pts,
            radii,
            minor_axis: Vector3::x(),
        });
    }

    let mut branch_severity: BTreeMap<Vessel, f64> =
        spec.branches.iter().map(|b| (b.vessel, 0.0)).collect();
    for s in &spec.stenoses {
        let e = branch_severity.get_mut(&s.vessel).expect("validated");
        *e = e.max(s.severity);
    }

    Ok(PhantomGeometry {
        case_id: spec.case_id.clone(),
        centerlines,
        paths,
        grade: grade_of(&spec.stenoses),
        branch_severity,
        stenoses: spec.stenoses.clone(),
        tubes,
    })
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Grows a node chain from `start`, blending `d0` into `target`.
fn grow(start: Point3, d0: Vector3, target: Vector3, turn_mm: f64, length_mm: f64) -> Vec<Point3> {
    let d0 = d0.normalize();
    let target = target.normalize();
    let n = (length_mm / NODE_SPACING).round() as usize;
    let mut pts = Vec::with_capacity(n + 1);
    pts.push(start);
    for k in 0..n {
        let w = smoothstep(k as f64 * NODE_SPACING / turn_mm);
        let mut d = d0 * (1.0 - w) + target * w;
        if d.norm() < 1e-9 {
            d = target;
        }
        let p = pts[k] + d.normalize() * NODE_SPACING;
        pts.push(p);
    }
    pts
}

/// Edge profile used when converting signed distance to lumen fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Edge {
    /// Linear partial-volume ramp one voxel wide.
    PartialVolume,
    /// `0.5 * (1 - tanh(d / width))`, for smooth resampling tests.
    Smooth { width_mm: f64 },
}

fn draw_tubes(tubes: &[Tube], volume: &mut Volume, lumen_hu: f64, background_hu: f64, edge: Edge) {
    let dims = volume.dims();
    let spacing = volume.spacing();
    let h = spacing[0].max(spacing[1]).max(spacing[2]);
    let reach = match edge {
        Edge::PartialVolume => h,
        Edge::Smooth { width_mm } => 4.0 * width_mm,
    };
    let mut frac = vec![0f32; volume.voxels().len()];
    for tube in tubes {
        for k in 0..tube.nodes.len() - 1 {
            let a = tube.nodes[k];
            let b = tube.nodes[k + 1];
            let (ra, rb) = (tube.radii[k], tube.radii[k + 1]);
            let axis = b - a;
            let len2 = axis.norm_squared();
            if len2 == 0.0 {
                continue;
            }
            let len = len2.sqrt();
            let t_hat = axis / len;
            let mut minor = tube.minor_axis - t_hat * tube.minor_axis.dot(&t_hat);
            if minor.norm() < 1e-6 {
                minor = Vector3::y() - t_hat * t_hat.y;
            }
            let minor = minor.normalize();
            let major = t_hat.cross(&minor);

            let rmax = ra.major.max(rb.major).max(ra.minor).max(rb.minor) + reach;
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            let mut empty = false;
            for ax in 0..3 {
                let o = volume.origin()[ax];
                let min = (a[ax].min(b[ax]) - rmax - o) / spacing[ax];
                let max = (a[ax].max(b[ax]) + rmax - o) / spacing[ax];
                if max < 0.0 || min > (dims[ax] - 1) as f64 {
                    empty = true;
                    break;
                }
                lo[ax] = min.ceil().max(0.0) as usize;
                hi[ax] = (max.floor() as usize).min(dims[ax] - 1);
            }
            if empty {
                continue;
            }
            for kk in lo[2]..=hi[2] {
                for jj in lo[1]..=hi[1] {
                    for ii in lo[0]..=hi[0] {
                        let q = volume.voxel_center(ii, jj, kk);
                        let t = ((q - a).dot(&axis) / len2).clamp(0.0, 1.0);
                        let c = a + axis * t;
                        let r_minor = ra.minor + (rb.minor - ra.minor) * t;
                        let r_major = ra.major + (rb.major - ra.major) * t;
                        let v = q - c;
                        let radial = signed_distance(v.dot(&minor), v.dot(&major), r_minor, r_major);
                        // Beyond an edge end only the cap disk counts; neighbors cover joints.
                        let along = (q - a).dot(&t_hat);
                        let axial = (-along).max(along - len);
                        let sd = if axial > 0.0 {
                            (radial.max(0.0).powi(2) + axial * axial).sqrt()
                        } else {
                            radial
                        };
                        let f = match edge {
                            Edge::PartialVolume => {
                                (0.5 - sd / h).clamp(0.0, 1.0) * (2.0 * r_minor / h).min(1.0)
                            }
                            Edge::Smooth { width_mm } => 0.5 * (1.0 - (sd / width_mm).tanh()),
                        } as f32;
                        let idx = volume.index(ii, jj, kk);
                        if f > frac[idx] {
                            frac[idx] = f;
                        }
                    }
                }
            }
        }
    }
    let (lumen, bg) = (lumen_hu as f32, background_hu as f32);
    let round = matches!(edge, Edge::PartialVolume);
    for (v, f) in volume.voxels_mut().iter_mut().zip(frac) {
        let hu = bg + (lumen - bg) * f;
        *v = if round { hu.round() } else { hu };
    }
}

/// Approximate signed distance to an ellipse with semi-axes `ra` (along
/// `a`) and `rb`; exact for circles.
fn signed_distance(a: f64, b: f64, ra: f64, rb: f64) -> f64 {
    if ra == rb {
        return (a * a + b * b).sqrt() - ra;
    }
    if ra <= 0.0 {
        return (a * a + b * b).sqrt();
    }
    let rho = ((a / ra).powi(2) + (b / rb).powi(2)).sqrt();
    if rho == 0.0 {
        return -ra.min(rb);
    }
    let grad = ((a / (ra * ra)).powi(2) + (b / (rb * rb)).powi(2)).sqrt() / rho;
    (rho - 1.0) / grad
}

/// A generated case: geometry, truth and volume.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub geometry: PhantomGeometry,
    pub volume: Volume,
}

/// Rasterizes a phantom.
///
/// Fails when explicit bounds do not contain every tube.
pub fn generate(spec: &PhantomSpec) -> Result<PhantomCase> {
    let geometry = build_geometry(spec)?;
    let (lo, hi) = geometry.extent();
    let (min, max) = match spec.bounds {
        Some([min, max]) => {
            let inside = (0..3).all(|a| lo[a] >= min[a] && hi[a] <= max[a]);
            if !inside {
                return Err(Error::Spec(format!(
                    "{}: branches exit the volume bounds",
                    spec.case_id
                )));
            }
            (Point3::from(min), Point3::from(max))
        }
        None => {
            let m = Vector3::repeat(spec.margin_mm);
            (lo - m, hi + m)
        }
    };
    let s = spec.spacing_mm;
    // snap the origin to the spacing grid so jitter-free cases align
    let origin = Point3::new(
        (min.x / s).floor() * s,
        (min.y / s).floor() * s,
        (min.z / s).floor() * s,
    );
    let dims = [
        ((max.x - origin.x) / s).ceil() as usize + 1,
        ((max.y - origin.y) / s).ceil() as usize + 1,
        ((max.z - origin.z) / s).ceil() as usize + 1,
    ];
    let mut volume = Volume::filled(dims, [s; 3], origin, spec.background_hu as f32)?;
    draw_tubes(
        &geometry.tubes,
        &mut volume,
        spec.lumen_hu,
        spec.background_hu,
        Edge::PartialVolume,
    );
    Ok(PhantomCase { geometry, volume })
}

/// Cohort generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortOptions {
    pub n: usize,
    pub seed: u64,
    pub jitter_mm: f64,
    pub spacing_mm: f64,
}

impl CohortOptions {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            jitter_mm: 0.0,
            spacing_mm: DEFAULT_SPACING,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 6 {
            return Err(Error::Spec(format!("cohort needs n >= 6, got {}", self.n)));
        }
        if !(self.jitter_mm >= 0.0) || !(self.spacing_mm > 0.0) {
            return Err(Error::Spec("jitter must be >= 0 and spacing > 0".into()));
        }
        Ok(())
    }
}

impl Default for CohortOptions {
    fn default() -> Self {
        Self::new(60, 0)
    }
}

/// Severity range per grade for generated lesions.
fn severity_range(grade: u8) -> (f64, f64) {
    match grade {
        1 => (0.12, 0.18),
        2 => (0.32, 0.43),
        3 => (0.55, 0.65),
        4 => (0.75, 0.82),
        _ => (1.0, 1.0),
    }
}

/// Grades assigned to the cases of an `n`-case cohort: `i mod 6`, so every
/// grade gets `n / 6` cases and the remainder goes to the lowest grades.
pub fn stratified_grades(n: usize) -> Vec<CadRadsGrade> {
    (0..n)
        .map(|i| CadRadsGrade::new((i % 6) as u8).expect("i mod 6 is a grade"))
        .collect()
}

fn rotate_random(rng: &mut impl Rng, d: Vector3, max_deg: f64) -> [f64; 3] {
    let axis = random_unit(rng);
    let angle = rng.gen_range(-max_deg..=max_deg).to_radians();
    let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
    let v = r * d.normalize();
    [v.x, v.y, v.z]
}

fn snap(mm: f64) -> f64 {
    (mm / NODE_SPACING).round() * NODE_SPACING
}

/// Specs of a stratified cohort. Deterministic in `options`.
///
/// Cases differ in LM length, take-off directions, side branch positions,
/// presence of a ramus, and lesion placement, even without jitter.
pub fn cohort_specs(options: &CohortOptions) -> Result<Vec<PhantomSpec>> {
    options.validate()?;
    let grades = stratified_grades(options.n);
    let mut specs = Vec::with_capacity(options.n);
    for (i, grade) in grades.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(i as u64);
        specs.push(case_spec(&mut rng, i, grade.value(), options));
    }
    Ok(specs)
}

fn case_spec(rng: &mut ChaCha8Rng, index: usize, grade: u8, options: &CohortOptions) -> PhantomSpec {
    let v = |x: f64, y: f64, z: f64| Vector3::new(x, y, z);
    let lm_len = snap(15.0 + rng.gen_range(8.0..12.0));
    let d1_at = snap(rng.gen_range(18.0..24.0));
    let om1_at = snap(rng.gen_range(20.0..28.0));
    let am_at = snap(rng.gen_range(55.0..65.0));
    let d2_at = snap(rng.gen_range(55.0..65.0));
    let with_ramus = rng.gen_bool(1.0 / 3.0);

    let lad_dir = rotate_random(rng, v(0.35, -0.75, -0.55), 4.0);
    let d1_dir = {
        let lad = as_vector(lad_dir);
        let r = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(lad.cross(&Vector3::x())),
            -40f64.to_radians(),
        );
        let d = r * lad;
        // rotation direction chosen so the diagonal heads towards +x
        let d = if d.x >= lad.x { d } else { r.inverse() * lad };
        [d.x, d.y, d.z]
    };

    let branch = |vessel, parent, attach_mm, direction, target: Vector3, turn_mm, length_mm, radius_mm| BranchSpec {
        vessel,
        parent,
        attach_mm,
        direction,
        target_direction: [target.x, target.y, target.z],
        turn_mm,
        length_mm,
        radius_mm,
    };

    let mut branches = vec![
        branch(
            Vessel::Rca,
            None,
            0.0,
            rotate_random(rng, v(-1.0, -0.35, 0.0), 4.0),
            v(-0.1, -0.15, -1.0),
            30.0,
            118.0,
            2.0,
        ),
        branch(Vessel::Lm, None, 0.0, rotate_random(rng, v(1.0, 0.1, 0.0), 4.0), v(1.0, 0.1, 0.0), 30.0, lm_len, 2.4),
        branch(Vessel::Lad, Some(Vessel::Lm), lm_len, lad_dir, v(-0.05, -0.25, -1.0), 25.0, 110.0, 2.0),
        branch(
            Vessel::Cx,
            Some(Vessel::Lm),
            lm_len,
            rotate_random(rng, v(0.85, 0.45, -0.25), 4.0),
            v(0.15, 0.3, -1.0),
            25.0,
            105.0,
            1.9,
        ),
    ];
    if with_ramus {
        branches.push(branch(
            Vessel::Ramus,
            Some(Vessel::Lm),
            lm_len,
            rotate_random(rng, v(0.65, -0.2, -0.75), 3.0),
            v(0.3, -0.1, -1.0),
            25.0,
            45.0,
            1.4,
        ));
    }
    branches.extend([
        branch(Vessel::D1, Some(Vessel::Lad), d1_at, d1_dir, v(0.4, -0.6, -1.0), 20.0, 45.0, 1.2),
        branch(
            Vessel::Om1,
            Some(Vessel::Cx),
            om1_at,
            rotate_random(rng, v(0.6, 0.2, -0.75), 3.0),
            v(0.3, 0.0, -1.0),
            20.0,
            45.0,
            1.2,
        ),
        branch(
            Vessel::Am,
            Some(Vessel::Rca),
            am_at,
            rotate_random(rng, v(-0.3, -0.9, -0.3), 3.0),
            v(-0.2, -0.8, -0.6),
            20.0,
            20.0,
            1.0,
        ),
        branch(
            Vessel::D2,
            Some(Vessel::Lad),
            d2_at,
            rotate_random(rng, v(0.5, -0.8, -0.3), 3.0),
            v(0.5, -0.8, -0.3),
            20.0,
            14.0,
            1.0,
        ),
    ]);

    // Lesions sit inside the labeled range of the three main vessels and
    // clear of side branch origins.
    let side_branches: Vec<(Vessel, f64)> =
        vec![(Vessel::Rca, am_at), (Vessel::Lad, d1_at), (Vessel::Lad, d2_at), (Vessel::Cx, om1_at)];
    let place = |rng: &mut ChaCha8Rng, severity: f64, avoid: Option<Vessel>| -> StenosisSpec {
        loop {
            let vessel = match rng.gen_range(0..3) {
                0 => Vessel::Rca,
                1 => Vessel::Lad,
                _ => Vessel::Cx,
            };
            if Some(vessel) == avoid {
                continue;
            }
            let length_mm = rng.gen_range(6.0..10.0);
            let position_mm = match vessel {
                Vessel::Rca => rng.gen_range(23.0..103.0),
                _ => rng.gen_range(8.0..88.0),
            };
            let clear = side_branches
                .iter()
                .filter(|(v, _)| *v == vessel)
                .all(|(_, at)| (position_mm - at).abs() >= length_mm / 2.0 + 3.0);
            if clear {
                return StenosisSpec {
                    vessel,
                    position_mm,
                    length_mm,
                    severity,
                    eccentric: false,
                };
            }
        }
    };

    let mut stenoses = Vec::new();
    if grade > 0 {
        let (lo, hi) = severity_range(grade);
        let severity = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        let primary = place(rng, severity, None);
        let primary_vessel = primary.vessel;
        stenoses.push(primary);
        if grade >= 2 && rng.gen_bool(0.3) {
            let (lo, hi) = severity_range(rng.gen_range(1..grade));
            let severity = if lo == hi { lo } else { rng.gen_range(lo..hi) };
            stenoses.push(place(rng, severity, Some(primary_vessel)));
        }
    }

    PhantomSpec {
        case_id: format!("case_{index:03}"),
        branches,
        stenoses,
        lumen_hu: DEFAULT_LUMEN_HU,
        background_hu: DEFAULT_BACKGROUND_HU,
        spacing_mm: options.spacing_mm,
        jitter_mm: options.jitter_mm,
        seed: options.seed.wrapping_mul(1_000_003).wrapping_add(index as u64),
        margin_mm: 8.0,
        bounds: None,
    }
}

/// Generates a stratified, jitter-free cohort.
pub fn generate_cohort(n: usize, seed: u64) -> Result<Vec<PhantomCase>> {
    cohort_specs(&CohortOptions::new(n, seed))?
        .iter()
        .map(generate)
        .collect()
}

/// Outcome of comparing a labeling with the constructed tree.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelCheck {
    /// Every expected label and whether it was found on its vessel.
    pub expected: BTreeMap<SegmentLabel, bool>,
    /// Labels emitted although the tree has no such vessel.
    pub unexpected: Vec<SegmentLabel>,
}

impl LabelCheck {
    pub fn correct(&self) -> usize {
        self.expected.values().filter(|&&ok| ok).count()
    }

    pub fn all_correct(&self) -> bool {
        self.unexpected.is_empty() && self.expected.values().all(|&ok| ok)
    }
}

/// Distance from `p` to a polyline.
pub fn distance_to_polyline(p: &Point3, line: &[Point3]) -> f64 {
    if line.len() == 1 {
        return (p - line[0]).norm();
    }
    line.windows(2)
        .map(|w| {
            let ab = w[1] - w[0];
            let l2 = ab.norm_squared();
            let t = if l2 == 0.0 { 0.0 } else { ((p - w[0]).dot(&ab) / l2).clamp(0.0, 1.0) };
            (p - (w[0] + ab * t)).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

/// A segment sits on a vessel when 95% of its points lie within 0.5 mm of
/// the vessel path.
pub fn segment_on_path(segment: &LabeledSegment, path: &[Point3]) -> bool {
    let near = segment
        .points
        .iter()
        .filter(|p| distance_to_polyline(p, path) <= 0.5)
        .count();
    near as f64 >= 0.95 * segment.points.len() as f64
}

pub fn check_labeling(geometry: &PhantomGeometry, result: &LabelingResult) -> LabelCheck {
    let expected_map = geometry.expected_labels();
    let expected = expected_map
        .iter()
        .map(|(&label, vessel)| {
            let ok = result
                .segment(label)
                .is_some_and(|s| segment_on_path(s, &geometry.paths[vessel]));
            (label, ok)
        })
        .collect();
    let unexpected = result
        .segments
        .iter()
        .map(|s| s.label)
        .filter(|l| !expected_map.contains_key(l))
        .collect();
    LabelCheck { expected, unexpected }
}

/// Ground truth as written next to a generated case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseTruth {
    pub case_id: String,
    pub grade: CadRadsGrade,
    pub branch_severity: BTreeMap<Vessel, f64>,
    pub stenoses: Vec<StenosisSpec>,
    pub expected_labels: BTreeMap<SegmentLabel, Vessel>,
}

impl PhantomGeometry {
    pub fn truth(&self) -> CaseTruth {
        CaseTruth {
            case_id: self.case_id.clone(),
            grade: self.grade,
            branch_severity: self.branch_severity.clone(),
            stenoses: self.stenoses.clone(),
            expected_labels: self.expected_labels(),
        }
    }
}

/// A single straight tube along +z, for MPR and scorer tests.
#[derive(Debug, Clone, PartialEq)]
pub struct StraightTubeSpec {
    pub length_mm: f64,
    pub radius_mm: f64,
    pub stenosis: Option<StenosisSpec>,
    /// Rotation of the eccentric axis about +z, radians; 0 is world x.
    pub rotation: f64,
    pub lumen_hu: f64,
    pub background_hu: f64,
    pub spacing_mm: f64,
    /// Half-width of the in-plane box, mm.
    pub half_width_mm: f64,
    pub edge: Edge,
}

impl Default for StraightTubeSpec {
    fn default() -> Self {
        Self {
            length_mm: 40.0,
            radius_mm: 2.0,
            stenosis: None,
            rotation: 0.0,
            lumen_hu: DEFAULT_LUMEN_HU,
            background_hu: DEFAULT_BACKGROUND_HU,
            spacing_mm: 0.2,
            half_width_mm: 9.0,
            edge: Edge::PartialVolume,
        }
    }
}

/// Rasterizes the tube and returns it with a full-length segment centered
/// along it. The stenosis position is measured from `z = 0`.
pub fn straight_tube(spec: &StraightTubeSpec) -> Result<(Volume, LabeledSegment)> {
    let seg_len = (crate::mpr::STACK_LEN - 1) as f64 * crate::mpr::FRAME_SPACING;
    if !(spec.radius_mm > 0.0) || !(spec.length_mm >= seg_len) || !(spec.spacing_mm > 0.0) {
        return Err(Error::Spec(format!(
            "straight tube needs radius > 0 and length >= {seg_len} mm"
        )));
    }
    let n = (spec.length_mm / NODE_SPACING).round() as usize;
    let nodes: Vec<Point3> = (0..=n)
        .map(|k| Point3::new(0.0, 0.0, k as f64 * NODE_SPACING))
        .collect();
    let radii = nodes
        .iter()
        .map(|p| {
            let mut r = Radii {
                minor: spec.radius_mm,
                major: spec.radius_mm,
            };
            if let Some(s) = &spec.stenosis {
                let rr = spec.radius_mm * (1.0 - s.severity * stenosis_profile((p.z - s.position_mm) / s.length_mm));
                r.minor = rr;
                if !s.eccentric {
                    r.major = rr;
                }
            }
            r
        })
        .collect();
    let tube = Tube {
        nodes,
        radii,
        minor_axis: Vector3::new(spec.rotation.cos(), spec.rotation.sin(), 0.0),
    };
    let s = spec.spacing_mm;
    let half = (spec.half_width_mm / s).ceil() as usize;
    let nz = (spec.length_mm / s).ceil() as usize + 1;
    let origin = Point3::new(-(half as f64) * s, -(half as f64) * s, 0.0);
    let mut volume = Volume::filled([2 * half + 1, 2 * half + 1, nz], [s; 3], origin, spec.background_hu as f32)?;
    draw_tubes(&[tube], &mut volume, spec.lumen_hu, spec.background_hu, spec.edge);

    let start = ((spec.length_mm - seg_len) / 2.0 / crate::mpr::FRAME_SPACING).round();
    let points = (0..crate::mpr::STACK_LEN)
        .map(|k| Point3::new(0.0, 0.0, (start + k as f64) * crate::mpr::FRAME_SPACING))
        .collect();
    Ok((
        volume,
        LabeledSegment {
            label: SegmentLabel::LadProx,
            points,
            truncated: false,
            source: 0,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_spec(stenoses: Vec<StenosisSpec>) -> PhantomSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut spec = case_spec(&mut rng, 0, 0, &CohortOptions::new(6, 1));
        spec.stenoses = stenoses;
        spec
    }

    fn lesion(vessel: Vessel, severity: f64) -> StenosisSpec {
        StenosisSpec {
            vessel,
            position_mm: 50.0,
            length_mm: 8.0,
            severity,
            eccentric: false,
        }
    }

    #[test]
    fn profile_shape() {
        assert_eq!(stenosis_profile(0.0), 1.0);
        assert_eq!(stenosis_profile(1.0 / 6.0), 1.0);
        assert!((stenosis_profile(1.0 / 3.0) - 0.5).abs() < 1e-12);
        assert!(stenosis_profile(0.4999) < 1e-6);
        assert_eq!(stenosis_profile(0.5), 0.0);
        assert_eq!(stenosis_profile(-2.0), 0.0);
    }

    #[test]
    fn grade_follows_the_worst_lesion() {
        assert_eq!(grade_of(&[]).value(), 0);
        assert_eq!(grade_of(&[lesion(Vessel::Lad, 0.6)]).value(), 3);
        assert_eq!(
            grade_of(&[lesion(Vessel::Cx, 0.3), lesion(Vessel::Rca, 0.8)]).value(),
            4
        );
    }

    #[test]
    fn shared_prefixes_are_identical() {
        let mut spec = simple_spec(vec![]);
        spec.jitter_mm = 1.0;
        let g = build_geometry(&spec).unwrap();
        let lm = &g.paths[&Vessel::Lm];
        for v in [Vessel::Lad, Vessel::Cx, Vessel::D1, Vessel::Om1] {
            assert_eq!(&g.paths[&v][..lm.len()], &lm[..], "{v}");
        }
        // LM ends where LAD and CX start, so it is not a centerline of its own
        assert!(g.centerlines.centerlines().iter().all(|c| c.points().len() > lm.len()));
        assert!(g.centerlines.centerlines().iter().all(|c| c.first() == lm[0]));
    }

    #[test]
    fn spec_validation() {
        let mut spec = simple_spec(vec![lesion(Vessel::Lad, 1.2)]);
        assert!(matches!(build_geometry(&spec), Err(Error::Spec(_))));
        spec.stenoses = vec![lesion(Vessel::Ramus, 0.5)];
        if !spec.branches.iter().any(|b| b.vessel == Vessel::Ramus) {
            assert!(build_geometry(&spec).is_err());
        }
        spec.stenoses.clear();
        spec.branches[0].radius_mm = 0.0;
        assert!(build_geometry(&spec).is_err());
    }

    #[test]
    fn explicit_bounds_must_contain_the_tree() {
        let mut spec = simple_spec(vec![]);
        spec.bounds = Some([[-10.0; 3], [10.0; 3]]);
        assert!(matches!(generate(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn signed_distance_of_circles_and_ellipses() {
        assert!((signed_distance(3.0, 4.0, 2.0, 2.0) - 3.0).abs() < 1e-12);
        assert!((signed_distance(1.0, 0.0, 1.0, 3.0)).abs() < 1e-12);
        assert!((signed_distance(0.0, 3.0, 1.0, 3.0)).abs() < 1e-12);
        assert!(signed_distance(0.0, 0.0, 1.0, 3.0) < 0.0);
    }

    #[test]
    fn stratification_is_exact() {
        let grades = stratified_grades(13);
        let mut hist = [0usize; 6];
        for g in grades {
            hist[g.value() as usize] += 1;
        }
        assert_eq!(hist, [3, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn straight_tube_width_matches_radius() {
        let (vol, _) = straight_tube(&StraightTubeSpec::default()).unwrap();
        // count voxels above the midpoint along x through the axis
        let mid = (DEFAULT_LUMEN_HU + DEFAULT_BACKGROUND_HU) / 2.0;
        let [nx, ny, _] = vol.dims();
        let inside = (0..nx).filter(|&i| vol.get(i, ny / 2, 100) as f64 > mid).count();
        let width = inside as f64 * 0.2;
        assert!((width - 4.0).abs() <= 0.4, "{width}");
    }
}
