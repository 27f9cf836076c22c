//! End-to-end orchestration: label, reformat, score, evaluate, and the
//! on-disk layout tying the steps together.
//!
//! Layout of a case directory `cases/<case_id>/`:
//! `volume.json` + `volume.raw`, `centerlines.json`, optional `truth.json`,
//! and after a run `labels.json`, `stacks/<LABEL>.json` + `.raw`,
//! `prediction.json`. The run directory also gets `preds.csv`,
//! `truth.csv` and `metrics.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::centerline::{read_centerline_set, write_centerline_set, CenterlineSet};
use crate::error::{Error, Result};
use crate::inference::{ensemble, predict_case, CasePrediction, PhantomScorer, DEFAULT_ANGLES};
use crate::labeler::{label_centerlines, labeling_to_json, parse_labeling, LabelerConfig, LabelingResult};
use crate::metrics::{
    acc_sens_spec_mcc, auc, confusion, six_class_metrics, youden_point, BinaryMetrics,
    BinaryOutcome, ConfusionCounts, SixClassMetrics,
};
use crate::mpr::{extract_mpr, read_stack, write_stack, MprStack};
use crate::ordinal::{binarize, grade_from_cumulative, CadRadsGrade, Task};
use crate::phantom::{cohort_specs, generate, CaseTruth, CohortOptions};
use crate::volume::{read_volume, write_volume, Volume, VoxelType};

pub const VOLUME_FILE: &str = "volume.json";
pub const CENTERLINES_FILE: &str = "centerlines.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const LABELS_FILE: &str = "labels.json";
pub const PREDICTION_FILE: &str = "prediction.json";
pub const STACKS_DIR: &str = "stacks";
pub const CASES_DIR: &str = "cases";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Phantom,
}

/// Settings shared by every case of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub labeler: LabelerConfig,
    pub n_angles: usize,
    pub dual_view: bool,
    pub scorer: ScorerKind,
    pub n_models: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            labeler: LabelerConfig::default(),
            n_angles: DEFAULT_ANGLES,
            dual_view: false,
            scorer: ScorerKind::Phantom,
            n_models: 1,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        self.labeler.validate()?;
        if self.n_angles == 0 {
            return Err(Error::validation(None, "n_angles must be >= 1"));
        }
        if self.n_models == 0 {
            return Err(Error::validation(None, "n_models must be >= 1"));
        }
        Ok(())
    }
}

/// MPR stacks for every labeled segment. Segments missing the volume are
/// skipped with a log message.
pub fn extract_stacks(volume: &Volume, labeling: &LabelingResult) -> Result<Vec<MprStack>> {
    let mut stacks = Vec::with_capacity(labeling.segments.len());
    for segment in &labeling.segments {
        match extract_mpr(volume, segment) {
            Ok(s) => stacks.push(s),
            Err(Error::OutOfVolume(label)) => {
                log::warn!("{}: segment {label} lies outside the volume", labeling.case_id)
            }
            Err(e) => return Err(e),
        }
    }
    if stacks.is_empty() {
        return Err(Error::NoSegments);
    }
    Ok(stacks)
}

/// Ensemble prediction for one case from its stacks.
pub fn predict_stacks(stacks: &[MprStack], config: &InferenceConfig) -> Result<CasePrediction> {
    let models = match config.scorer {
        ScorerKind::Phantom => PhantomScorer::ensemble(config.n_models),
    };
    let outputs = models
        .iter()
        .map(|m| predict_case(stacks, m, config.n_angles, config.dual_view))
        .collect::<Result<Vec<_>>>()?;
    ensemble(&outputs)
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub labeling: LabelingResult,
    pub stacks: Vec<MprStack>,
    pub prediction: CasePrediction,
}

/// Label, reformat and score one case in memory.
pub fn process_case(
    volume: &Volume,
    centerlines: &CenterlineSet,
    config: &InferenceConfig,
) -> Result<CaseResult> {
    let labeling = label_centerlines(centerlines, &config.labeler)?;
    let stacks = extract_stacks(volume, &labeling)?;
    let prediction = predict_stacks(&stacks, config)?;
    Ok(CaseResult {
        labeling,
        stacks,
        prediction,
    })
}

/// Prediction file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub case_id: String,
    #[serde(flatten)]
    pub prediction: CasePrediction,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

/// Writes a generated cohort to `out_dir/cases/<case_id>/`.
pub fn write_phantom_cohort(out_dir: &Path, options: &CohortOptions) -> Result<Vec<String>> {
    let specs = cohort_specs(options)?;
    let cases = out_dir.join(CASES_DIR);
    create_dir(&cases)?;
    specs
        .par_iter()
        .map(|spec| {
            let case = generate(spec)?;
            let dir = cases.join(&spec.case_id);
            create_dir(&dir)?;
            write_volume(&case.volume, dir.join(VOLUME_FILE), VoxelType::I16)?;
            write_centerline_set(&case.geometry.centerlines, dir.join(CENTERLINES_FILE))?;
            write_text(&dir.join(TRUTH_FILE), &to_json(&case.geometry.truth()))?;
            log::info!("wrote {}", dir.display());
            Ok(spec.case_id.clone())
        })
        .collect()
}

/// Case directories under `root/cases`, sorted by name.
pub fn list_cases(root: &Path) -> Result<Vec<PathBuf>> {
    let cases = root.join(CASES_DIR);
    let entries = fs::read_dir(&cases).map_err(|e| Error::io(&cases, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&cases, e))?;
        let path = entry.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::validation(None, format!("no case directories in {}", cases.display())));
    }
    Ok(dirs)
}

pub fn read_labeling(path: &Path) -> Result<LabelingResult> {
    parse_labeling(&read_text(path)?).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes each stack as `<dir>/<LABEL>.json` + `.raw`.
pub fn write_stacks(dir: &Path, stacks: &[MprStack]) -> Result<()> {
    create_dir(dir)?;
    for s in stacks {
        write_stack(s, dir.join(format!("{}.json", s.label)))?;
    }
    Ok(())
}

/// Every stack header (`*.json`) in `dir`, in file-name order.
pub fn read_stacks(dir: &Path) -> Result<Vec<MprStack>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut headers = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "json") {
            headers.push(path);
        }
    }
    headers.sort();
    if headers.is_empty() {
        return Err(Error::validation(None, format!("no stack headers in {}", dir.display())));
    }
    headers.iter().map(read_stack).collect()
}

/// Writes labels, stacks and prediction of a processed case into `dir`.
pub fn write_case_outputs(dir: &Path, result: &CaseResult) -> Result<()> {
    write_text(&dir.join(LABELS_FILE), &(labeling_to_json(&result.labeling) + "\n"))?;
    write_stacks(&dir.join(STACKS_DIR), &result.stacks)?;
    let record = PredictionRecord {
        case_id: result.labeling.case_id.clone(),
        prediction: result.prediction.clone(),
    };
    write_text(&dir.join(PREDICTION_FILE), &to_json(&record))
}

/// Evaluation task selectable for reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalTask {
    RuleOut,
    HoldOut,
    SixClass,
}

impl EvalTask {
    pub const ALL: [EvalTask; 3] = [EvalTask::RuleOut, EvalTask::HoldOut, EvalTask::SixClass];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory holding `cases/`; with `phantom` set, the cohort is
    /// generated here first.
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub phantom: Option<CohortOptions>,
    pub inference: InferenceConfig,
    /// Tasks reported in `metrics.json`.
    pub tasks: Vec<EvalTask>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input_dir: PathBuf::from("."),
            output_dir: PathBuf::from("out"),
            phantom: None,
            inference: InferenceConfig::default(),
            tasks: EvalTask::ALL.to_vec(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.inference.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::validation(None, "at least one evaluation task is required"));
        }
        if let Some(p) = &self.phantom {
            p.validate()?;
        }
        Ok(())
    }
}

/// Everything a run produced, also persisted under `output_dir`.
#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub predictions: Vec<PredictionRecord>,
    pub report: Option<EvalReport>,
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineSummary> {
    config.validate()?;
    if let Some(options) = &config.phantom {
        write_phantom_cohort(&config.input_dir, options)?;
    }
    let case_dirs = list_cases(&config.input_dir)?;
    let out_cases = config.output_dir.join(CASES_DIR);
    create_dir(&out_cases)?;

    let results: Vec<(PredictionRecord, Option<CaseTruth>)> = case_dirs
        .par_iter()
        .map(|dir| {
            let volume = read_volume(dir.join(VOLUME_FILE))?;
            let centerlines = read_centerline_set(dir.join(CENTERLINES_FILE))?;
            let result = process_case(&volume, &centerlines, &config.inference)?;
            let name = dir.file_name().expect("case dirs have names");
            let out = out_cases.join(name);
            create_dir(&out)?;
            write_case_outputs(&out, &result)?;
            let truth_path = dir.join(TRUTH_FILE);
            let truth = if truth_path.exists() {
                let t: CaseTruth = serde_json::from_str(&read_text(&truth_path)?)
                    .map_err(|e| Error::Parse(format!("{}: {e}", truth_path.display())))?;
                Some(t)
            } else {
                None
            };
            log::info!(
                "{}: grade {} (cumulative {:.3})",
                result.labeling.case_id,
                result.prediction.grade,
                result.prediction.cumulative
            );
            Ok((
                PredictionRecord {
                    case_id: result.labeling.case_id.clone(),
                    prediction: result.prediction,
                },
                truth,
            ))
        })
        .collect::<Result<_>>()?;

    let mut predictions: Vec<PredictionRecord> = Vec::with_capacity(results.len());
    let mut truths = Vec::new();
    for (p, t) in results {
        if let Some(t) = t {
            truths.push((t.case_id, t.grade));
        }
        predictions.push(p);
    }
    predictions.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    truths.sort();

    let preds: Vec<(String, f64)> = predictions
        .iter()
        .map(|p| (p.case_id.clone(), p.prediction.cumulative))
        .collect();
    write_text(&config.output_dir.join("preds.csv"), &preds_to_csv(&preds)?)?;

    let report = if truths.len() == predictions.len() && !truths.is_empty() {
        write_text(&config.output_dir.join("truth.csv"), &truth_to_csv(&truths)?)?;
        let report = evaluate_tasks(&preds, &truths, &config.tasks)?;
        write_text(&config.output_dir.join("metrics.json"), &to_json(&report))?;
        Some(report)
    } else {
        if !truths.is_empty() {
            log::warn!("truth available for only {} of {} cases; skipping metrics", truths.len(), predictions.len());
        }
        None
    };
    Ok(PipelineSummary {
        predictions,
        report,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PredRow {
    case_id: String,
    cumulative: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRow {
    case_id: String,
    grade: CadRadsGrade,
}

fn csv_string<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn preds_to_csv(preds: &[(String, f64)]) -> Result<String> {
    csv_string(preds.iter().map(|(c, v)| PredRow {
        case_id: c.clone(),
        cumulative: *v,
    }))
}

pub fn truth_to_csv(truth: &[(String, CadRadsGrade)]) -> Result<String> {
    csv_string(truth.iter().map(|(c, g)| TruthRow {
        case_id: c.clone(),
        grade: *g,
    }))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = read_text(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::Parse(format!("{} row {}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn read_preds_csv(path: &Path) -> Result<Vec<(String, f64)>> {
    Ok(read_csv::<PredRow>(path)?
        .into_iter()
        .map(|r| (r.case_id, r.cumulative))
        .collect())
}

pub fn read_truth_csv(path: &Path) -> Result<Vec<(String, CadRadsGrade)>> {
    Ok(read_csv::<TruthRow>(path)?
        .into_iter()
        .map(|r| (r.case_id, r.grade))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub metrics: BinaryMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryReport {
    pub task: Task,
    pub auc: Option<f64>,
    pub n_positive: usize,
    pub n_negative: usize,
    /// At the decode threshold (`grade >= 1` or `grade >= 3`).
    pub default_threshold: OperatingPoint,
    /// At the threshold maximizing sensitivity + specificity.
    pub roc_optimal: Option<OperatingPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Metrics of the selected tasks; unselected tasks are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_cases: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule_out: Option<BinaryReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hold_out: Option<BinaryReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub six_class: Option<SixClassMetrics>,
}

fn operating_point(outcomes: &[BinaryOutcome], threshold: f64) -> OperatingPoint {
    let counts = confusion(outcomes, threshold);
    OperatingPoint {
        threshold,
        counts,
        metrics: acc_sens_spec_mcc(&counts),
    }
}

pub fn binary_report(joined: &[(f64, CadRadsGrade)], task: Task) -> BinaryReport {
    let outcomes: Vec<BinaryOutcome> = joined
        .iter()
        .map(|&(c, g)| BinaryOutcome::new(binarize(c, task), task.is_positive(g)))
        .collect();
    let n_positive = outcomes.iter().filter(|o| o.positive).count();
    let (auc_value, roc_optimal, note) = match (auc(&outcomes), youden_point(&outcomes)) {
        (Ok(a), Ok(p)) => (Some(a), Some(operating_point(&outcomes, p.threshold)), None),
        (Err(e), _) | (_, Err(e)) => (None, None, Some(e.to_string())),
    };
    BinaryReport {
        task,
        auc: auc_value,
        n_positive,
        n_negative: outcomes.len() - n_positive,
        default_threshold: operating_point(&outcomes, task.threshold()),
        roc_optimal,
        note,
    }
}

/// Joins predictions and truth by case id.
pub fn join(preds: &[(String, f64)], truth: &[(String, CadRadsGrade)]) -> Result<Vec<(f64, CadRadsGrade)>> {
    let truth_map: BTreeMap<&str, CadRadsGrade> = truth.iter().map(|(c, g)| (c.as_str(), *g)).collect();
    if truth_map.len() != truth.len() {
        return Err(Error::validation(None, "duplicate case ids in truth"));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut joined = Vec::with_capacity(preds.len());
    for (case, c) in preds {
        if !seen.insert(case.as_str()) {
            return Err(Error::validation(None, format!("duplicate prediction for {case}")));
        }
        let g = truth_map
            .get(case.as_str())
            .ok_or_else(|| Error::validation(None, format!("no truth for case {case}")))?;
        joined.push((*c, *g));
    }
    if joined.len() != truth.len() {
        return Err(Error::validation(None, "some truth cases have no prediction"));
    }
    if joined.is_empty() {
        return Err(Error::validation(None, "no cases to evaluate"));
    }
    Ok(joined)
}

/// All three tasks.
pub fn evaluate(preds: &[(String, f64)], truth: &[(String, CadRadsGrade)]) -> Result<EvalReport> {
    evaluate_tasks(preds, truth, &EvalTask::ALL)
}

pub fn evaluate_tasks(
    preds: &[(String, f64)],
    truth: &[(String, CadRadsGrade)],
    tasks: &[EvalTask],
) -> Result<EvalReport> {
    let joined = join(preds, truth)?;
    let six_class = if tasks.contains(&EvalTask::SixClass) {
        let true_grades: Vec<CadRadsGrade> = joined.iter().map(|&(_, g)| g).collect();
        let pred_grades: Vec<CadRadsGrade> = joined.iter().map(|&(c, _)| grade_from_cumulative(c)).collect();
        Some(six_class_metrics(&true_grades, &pred_grades)?)
    } else {
        None
    };
    Ok(EvalReport {
        n_cases: joined.len(),
        rule_out: tasks
            .contains(&EvalTask::RuleOut)
            .then(|| binary_report(&joined, Task::RuleOut)),
        hold_out: tasks
            .contains(&EvalTask::HoldOut)
            .then(|| binary_report(&joined, Task::HoldOut)),
        six_class,
    })
}
