//! Case-level prediction from per-segment MPR stacks: a shared scorer is
//! applied to every segment's longitudinal slice, features are max-pooled
//! over segments, and the resulting grade vector is averaged over slice
//! angles (test-time augmentation) and over models.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpr::{
    extract_longitudinal_slice, orthogonal_angle, LongitudinalSlice, MprStack, CENTER_INDEX,
    IN_PLANE_SPACING,
};
use crate::ordinal::{binarize, encode, grade_from_cumulative, CadRadsGrade, GradeVector, Task};

pub const DEFAULT_ANGLES: usize = 16;

/// What a scorer sees of one segment.
#[derive(Debug, Clone, Copy)]
pub enum SegmentView<'a> {
    Single(&'a LongitudinalSlice),
    /// Slices at `alpha` and `alpha + pi/2`, in that order.
    Pair(&'a LongitudinalSlice, &'a LongitudinalSlice),
}

/// Per-segment feature extractor plus a head on the pooled features.
///
/// Implementations must be deterministic and return `feature_dim` values.
pub trait SegmentScorer: Send + Sync {
    fn feature_dim(&self) -> usize;
    fn features(&self, view: SegmentView<'_>) -> Result<Vec<f64>>;
    fn head(&self, pooled: &[f64]) -> Result<GradeVector>;
}

/// Elementwise maximum over segment features.
pub fn pool_segments(features: &[Vec<f64>]) -> Result<Vec<f64>> {
    let (first, rest) = features.split_first().ok_or(Error::NoSegments)?;
    let mut pooled = first.clone();
    for f in rest {
        if f.len() != pooled.len() {
            return Err(Error::validation(
                None,
                format!("feature lengths differ: {} vs {}", f.len(), pooled.len()),
            ));
        }
        for (p, &v) in pooled.iter_mut().zip(f) {
            *p = p.max(v);
        }
    }
    Ok(pooled)
}

/// TTA angles `j * pi / n`.
pub fn tta_angles(n_angles: usize) -> Vec<f64> {
    (0..n_angles).map(|j| j as f64 * PI / n_angles as f64).collect()
}

/// One model's output for a case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPrediction {
    /// Mean of `per_angle`.
    pub cumulative: f64,
    pub per_angle: Vec<f64>,
}

/// Cumulative score of one case for a single model, averaged over
/// `n_angles` slice angles shared by all segments.
pub fn predict_case(
    stacks: &[MprStack],
    scorer: &dyn SegmentScorer,
    n_angles: usize,
    dual_view: bool,
) -> Result<ModelPrediction> {
    if stacks.is_empty() {
        return Err(Error::NoSegments);
    }
    if n_angles == 0 {
        return Err(Error::validation(None, "n_angles must be >= 1"));
    }
    let dim = scorer.feature_dim();
    let mut per_angle = Vec::with_capacity(n_angles);
    for angle in tta_angles(n_angles) {
        let context = |stack: &MprStack, e: Error| Error::Scorer {
            segment: stack.label.to_string(),
            angle,
            message: e.to_string(),
        };
        let mut features = Vec::with_capacity(stacks.len());
        for stack in stacks {
            let first = extract_longitudinal_slice(stack, angle)?;
            let f = if dual_view {
                let second = extract_longitudinal_slice(stack, orthogonal_angle(angle))?;
                scorer.features(SegmentView::Pair(&first, &second))
            } else {
                scorer.features(SegmentView::Single(&first))
            }
            .map_err(|e| context(stack, e))?;
            if f.len() != dim {
                return Err(context(
                    stack,
                    Error::validation(None, format!("{} features, expected {dim}", f.len())),
                ));
            }
            features.push(f);
        }
        let pooled = pool_segments(&features)?;
        let grades = scorer.head(&pooled).map_err(|e| Error::Scorer {
            segment: "pooled".into(),
            angle,
            message: e.to_string(),
        })?;
        per_angle.push(grades.cumulative());
    }
    Ok(ModelPrediction {
        cumulative: mean(&per_angle),
        per_angle,
    })
}

/// Sequential mean, for reproducible rounding.
fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    pub grade: CadRadsGrade,
    pub cumulative: f64,
    pub rule_out_score: f64,
    pub hold_out_score: f64,
    /// Per-angle cumulatives averaged over models.
    pub per_angle_cumulatives: Vec<f64>,
    pub n_models: usize,
}

/// Averages model outputs and decodes the result.
pub fn ensemble(models: &[ModelPrediction]) -> Result<CasePrediction> {
    let (first, _) = models.split_first().ok_or(Error::NoModels)?;
    let n_angles = first.per_angle.len();
    if models.iter().any(|m| m.per_angle.len() != n_angles) {
        return Err(Error::validation(None, "models disagree on the number of angles"));
    }
    let cumulatives: Vec<f64> = models.iter().map(|m| m.cumulative).collect();
    let cumulative = mean(&cumulatives);
    let per_angle_cumulatives = (0..n_angles)
        .map(|j| mean(&models.iter().map(|m| m.per_angle[j]).collect::<Vec<_>>()))
        .collect();
    Ok(CasePrediction {
        grade: grade_from_cumulative(cumulative),
        cumulative,
        rule_out_score: binarize(cumulative, Task::RuleOut),
        hold_out_score: binarize(cumulative, Task::HoldOut),
        per_angle_cumulatives,
        n_models: models.len(),
    })
}

/// Stand-in for a trained network: measures the lumen width on every row
/// of a longitudinal slice and reports the largest relative narrowing.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomScorer {
    /// Normalized intensity separating lumen from background.
    pub threshold: f64,
    /// Narrowings below this fraction are reported as none.
    pub noise_floor: f64,
    /// Window of the running median applied to the width profile; removes
    /// one- and two-row dips caused by voxel aliasing.
    pub median_rows: usize,
}

impl Default for PhantomScorer {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            noise_floor: 0.08,
            median_rows: 5,
        }
    }
}

impl PhantomScorer {
    /// `n` scorers with thresholds spread evenly over 0.48..=0.52; a single
    /// model uses 0.5.
    pub fn ensemble(n: usize) -> Vec<PhantomScorer> {
        (0..n)
            .map(|i| PhantomScorer {
                threshold: if n == 1 {
                    0.5
                } else {
                    0.48 + 0.04 * i as f64 / (n - 1) as f64
                },
                ..Self::default()
            })
            .collect()
    }

    /// Width in mm of the above-threshold run through the center sample,
    /// with crossings placed by linear interpolation.
    pub fn row_width(&self, row: &[f32]) -> f64 {
        let t = self.threshold;
        let v = |k: usize| row[k] as f64;
        let c = CENTER_INDEX;
        if v(c) < t {
            return 0.0;
        }
        let mut lo = c;
        while lo > 0 && v(lo - 1) >= t {
            lo -= 1;
        }
        let left = if lo == 0 {
            0.0
        } else {
            lo as f64 - (v(lo) - t) / (v(lo) - v(lo - 1))
        };
        let mut hi = c;
        while hi + 1 < row.len() && v(hi + 1) >= t {
            hi += 1;
        }
        let right = if hi + 1 == row.len() {
            hi as f64
        } else {
            hi as f64 + (v(hi) - t) / (v(hi) - v(hi + 1))
        };
        (right - left) * IN_PLANE_SPACING
    }

    /// Largest narrowing along the slice relative to its median width.
    pub fn slice_stenosis(&self, slice: &LongitudinalSlice) -> f64 {
        if slice.valid_rows == 0 {
            return 0.0;
        }
        let raw: Vec<f64> = (0..slice.valid_rows).map(|l| self.row_width(slice.row(l))).collect();
        let widths = running_median(&raw, self.median_rows);
        let mut sorted = widths;
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        let reference = if m % 2 == 1 {
            sorted[m / 2]
        } else {
            0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
        };
        if reference <= 0.0 {
            return 0.0;
        }
        let s = (1.0 - sorted[0] / reference).clamp(0.0, 1.0);
        if s < self.noise_floor {
            0.0
        } else {
            s
        }
    }
}

/// Centered running median over `window` samples, truncated at the ends.
fn running_median(values: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 {
        return values.to_vec();
    }
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            let mut w = values[lo..hi].to_vec();
            w.sort_by(f64::total_cmp);
            let m = w.len();
            if m % 2 == 1 {
                w[m / 2]
            } else {
                0.5 * (w[m / 2 - 1] + w[m / 2])
            }
        })
        .collect()
}

impl SegmentScorer for PhantomScorer {
    fn feature_dim(&self) -> usize {
        1
    }

    fn features(&self, view: SegmentView<'_>) -> Result<Vec<f64>> {
        let s = match view {
            SegmentView::Single(a) => self.slice_stenosis(a),
            SegmentView::Pair(a, b) => self.slice_stenosis(a).max(self.slice_stenosis(b)),
        };
        Ok(vec![s])
    }

    fn head(&self, pooled: &[f64]) -> Result<GradeVector> {
        Ok(encode(CadRadsGrade::from_stenosis(pooled[0])))
    }
}
