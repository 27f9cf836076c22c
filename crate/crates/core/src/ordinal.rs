//! Cumulative ordinal encoding of CAD-RADS grades.
//!
//! Grade `k` is encoded as six entries with entry `i` set iff `i <= k`, so
//! the first entry is always one. Predictions are decoded by summing the
//! entries and rounding `sum - 1` to the nearest grade.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRADE_COUNT: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct CadRadsGrade(u8);

impl CadRadsGrade {
    pub const MAX: u8 = 5;

    pub fn new(value: u8) -> Result<Self> {
        if value <= Self::MAX {
            Ok(Self(value))
        } else {
            Err(Error::validation(None, format!("CAD-RADS grade {value} outside 0..=5")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = CadRadsGrade> {
        (0..=Self::MAX).map(CadRadsGrade)
    }

    /// Stenosis band table: 0% -> 0, (0,25)% -> 1, [25,50)% -> 2,
    /// [50,70)% -> 3, [70,100)% -> 4, occlusion -> 5.
    pub fn from_stenosis(fraction: f64) -> Self {
        let g = if !(fraction > 0.0) {
            0
        } else if fraction < 0.25 {
            1
        } else if fraction < 0.5 {
            2
        } else if fraction < 0.7 {
            3
        } else if fraction < 1.0 {
            4
        } else {
            5
        };
        CadRadsGrade(g)
    }
}

impl TryFrom<u8> for CadRadsGrade {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        Self::new(value)
    }
}

impl From<CadRadsGrade> for u8 {
    fn from(g: CadRadsGrade) -> u8 {
        g.0
    }
}

impl fmt::Display for CadRadsGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Six ordinal outputs in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; GRADE_COUNT]", into = "[f64; GRADE_COUNT]")]
pub struct GradeVector([f64; GRADE_COUNT]);

impl GradeVector {
    pub fn new(entries: [f64; GRADE_COUNT]) -> Result<Self> {
        if let Some(i) = entries.iter().position(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::validation(
                None,
                format!("grade vector entry {i} = {} outside [0, 1]", entries[i]),
            ));
        }
        Ok(Self(entries))
    }

    pub fn entries(&self) -> &[f64; GRADE_COUNT] {
        &self.0
    }

    /// True for binary vectors that never increase along the index.
    pub fn is_hard_label(&self) -> bool {
        self.0.iter().all(|&e| e == 0.0 || e == 1.0) && self.0.windows(2).all(|w| w[0] >= w[1])
    }

    /// Sum of the entries, accumulated in index order.
    pub fn cumulative(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl TryFrom<[f64; GRADE_COUNT]> for GradeVector {
    type Error = Error;

    fn try_from(e: [f64; GRADE_COUNT]) -> Result<Self> {
        Self::new(e)
    }
}

impl From<GradeVector> for [f64; GRADE_COUNT] {
    fn from(v: GradeVector) -> Self {
        v.0
    }
}

pub fn encode(grade: CadRadsGrade) -> GradeVector {
    let mut e = [0.0; GRADE_COUNT];
    for (i, slot) in e.iter_mut().enumerate() {
        if i <= grade.0 as usize {
            *slot = 1.0;
        }
    }
    GradeVector(e)
}

/// Grade from a cumulative sum: `clamp(round(cumulative - 1), 0, 5)`, with
/// halves rounded away from zero.
pub fn grade_from_cumulative(cumulative: f64) -> CadRadsGrade {
    let g = (cumulative - 1.0).round().clamp(0.0, CadRadsGrade::MAX as f64);
    CadRadsGrade(g as u8)
}

pub fn decode(prediction: &GradeVector) -> (CadRadsGrade, f64) {
    let cumulative = prediction.cumulative();
    (grade_from_cumulative(cumulative), cumulative)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Any CAD: grade >= 1.
    RuleOut,
    /// Obstructive CAD: grade >= 3.
    HoldOut,
}

impl Task {
    pub fn min_positive_grade(self) -> u8 {
        match self {
            Task::RuleOut => 1,
            Task::HoldOut => 3,
        }
    }

    /// Default decision threshold on the binarized score.
    pub fn threshold(self) -> f64 {
        self.min_positive_grade() as f64 - 0.5
    }

    pub fn is_positive(self, grade: CadRadsGrade) -> bool {
        grade.0 >= self.min_positive_grade()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::RuleOut => "rule-out",
            Task::HoldOut => "hold-out",
        }
    }
}

/// Continuous ROC score for a task. Both tasks rank on `cumulative - 1`;
/// they differ only in the positive class and the default threshold.
pub fn binarize(cumulative: f64, _task: Task) -> f64 {
    cumulative - 1.0
}

/// Hard decision at the task's default threshold.
pub fn decide(cumulative: f64, task: Task) -> bool {
    binarize(cumulative, task) > task.threshold()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(v: u8) -> CadRadsGrade {
        CadRadsGrade::new(v).unwrap()
    }

    #[test]
    fn grade_two_matches_worked_example() {
        assert_eq!(encode(g(2)).entries(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(encode(g(0)).entries(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(encode(g(5)).entries(), &[1.0; 6]);
    }

    #[test]
    fn decode_examples() {
        let (grade, cum) = decode(&encode(g(2)));
        assert_eq!((grade, cum), (g(2), 3.0));

        let soft = GradeVector::new([0.9, 0.8, 0.7, 0.6, 0.1, 0.0]).unwrap();
        let (grade, cum) = decode(&soft);
        assert!((cum - 3.1).abs() < 1e-12);
        assert_eq!(grade, g(2));

        assert_eq!(decode(&GradeVector::new([1.0; 6]).unwrap()).0, g(5));
        assert_eq!(decode(&GradeVector::new([0.0; 6]).unwrap()), (g(0), 0.0));
    }

    #[test]
    fn halves_round_away_from_zero() {
        assert_eq!(grade_from_cumulative(2.5), g(2));
        assert_eq!(grade_from_cumulative(3.4999), g(2));
        assert_eq!(grade_from_cumulative(0.5), g(0));
        assert_eq!(grade_from_cumulative(9.0), g(5));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(CadRadsGrade::new(6).is_err());
        assert!(GradeVector::new([1.0, 1.1, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(GradeVector::new([f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(serde_json::from_str::<CadRadsGrade>("7").is_err());
    }

    #[test]
    fn hard_labels_are_exactly_the_encodings() {
        // enumerate all 64 binary vectors
        let mut hard = Vec::new();
        for bits in 0u32..64 {
            let mut e = [0.0; 6];
            for (i, slot) in e.iter_mut().enumerate() {
                *slot = ((bits >> i) & 1) as f64;
            }
            let v = GradeVector::new(e).unwrap();
            if v.is_hard_label() && e[0] == 1.0 {
                hard.push(v);
            }
        }
        let encoded: Vec<GradeVector> = CadRadsGrade::all().map(encode).collect();
        assert_eq!(hard.len(), 6);
        for v in &hard {
            assert!(encoded.contains(v));
        }
    }

    #[test]
    fn task_thresholds() {
        assert!(!decide(1.0, Task::RuleOut));
        assert!(decide(2.0, Task::RuleOut));
        assert!(decide(4.0, Task::HoldOut));
        assert!(!decide(3.0, Task::HoldOut));
        assert!(Task::HoldOut.is_positive(g(3)));
        assert!(!Task::RuleOut.is_positive(g(0)));
    }

    #[test]
    fn stenosis_bands() {
        let cases = [
            (0.0, 0),
            (0.01, 1),
            (0.2499, 1),
            (0.25, 2),
            (0.49, 2),
            (0.5, 3),
            (0.6, 3),
            (0.7, 4),
            (0.99, 4),
            (1.0, 5),
        ];
        for (s, want) in cases {
            assert_eq!(CadRadsGrade::from_stenosis(s).value(), want, "stenosis {s}");
        }
    }
}
