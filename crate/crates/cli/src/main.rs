use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use corotree_core::centerline::read_centerline_set;
use corotree_core::inference::DEFAULT_ANGLES;
use corotree_core::labeler::{label_centerlines, labeling_to_json, LabelerConfig};
use corotree_core::mpr::{extract_longitudinal_slice, extract_orthogonal_pair, read_stack, LongitudinalSlice};
use corotree_core::ordinal::{decode, encode, CadRadsGrade, GradeVector, GRADE_COUNT};
use corotree_core::phantom::CohortOptions;
use corotree_core::pipeline::{
    evaluate_tasks, extract_stacks, predict_stacks, read_labeling, read_preds_csv, read_stacks,
    read_truth_csv, run_pipeline, to_json, write_phantom_cohort, write_stacks, EvalTask,
    InferenceConfig, PipelineConfig, ScorerKind, STACKS_DIR,
};
use corotree_core::volume::read_volume;
use corotree_core::Error;

/// Automatic CAD-RADS scoring from coronary centerlines and CT volumes.
#[derive(Debug, Parser)]
#[command(name = "corotree", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScorerArg {
    Phantom,
}

impl From<ScorerArg> for ScorerKind {
    fn from(s: ScorerArg) -> Self {
        match s {
            ScorerArg::Phantom => ScorerKind::Phantom,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    RuleOut,
    HoldOut,
    SixClass,
}

impl From<TaskArg> for EvalTask {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::RuleOut => EvalTask::RuleOut,
            TaskArg::HoldOut => EvalTask::HoldOut,
            TaskArg::SixClass => EvalTask::SixClass,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Assign anatomical segment labels to a centerline tree.
    Label {
        #[arg(long)]
        centerlines: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Labeler settings (JSON); missing fields keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Extract an MPR stack for every labeled segment.
    Mpr {
        /// Volume header JSON.
        #[arg(long)]
        volume: PathBuf,
        /// Labeling JSON written by `label`.
        #[arg(long)]
        segments: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Cut a longitudinal slice through a stack at an angle in [0, pi).
    Slice {
        /// Stack header JSON.
        #[arg(long)]
        stack: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        angle: f64,
        /// Also emit the orthogonal slice at angle + pi/2.
        #[arg(long)]
        pair: bool,
    },
    /// Print the cumulative ordinal vector of a grade.
    Encode {
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=5))]
        grade: u8,
    },
    /// Decode six comma-separated activations into a grade.
    Decode {
        #[arg(long, allow_hyphen_values = true)]
        vector: String,
    },
    /// Score the stacks of one case with angle test-time augmentation.
    Predict {
        /// Directory of stack headers written by `mpr`.
        #[arg(long)]
        stacks: PathBuf,
        #[arg(long, value_enum, default_value = "phantom")]
        scorer: ScorerArg,
        #[arg(long, default_value_t = DEFAULT_ANGLES)]
        angles: usize,
        /// Score orthogonal slice pairs instead of single slices.
        #[arg(long)]
        dual_view: bool,
        /// Ensemble size.
        #[arg(long, default_value_t = 1)]
        models: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute metrics from prediction and truth CSV files.
    Eval {
        /// CSV with columns case_id,cumulative.
        #[arg(long)]
        pred: PathBuf,
        /// CSV with columns case_id,grade.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
    },
    /// Generate a synthetic cohort with known grades.
    Phantom {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Amplitude of the smooth centerline displacement, mm.
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Label, reformat, score and evaluate every case of a directory.
    Pipeline {
        /// Pipeline settings (JSON); flags override file values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory containing `cases/`.
        #[arg(long)]
        input_dir: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Generate an n-case phantom cohort into the input directory first.
        #[arg(long)]
        phantom_n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        angles: Option<usize>,
        #[arg(long)]
        dual_view: bool,
        #[arg(long)]
        models: Option<usize>,
        /// Restrict the metrics to these tasks; repeatable.
        #[arg(long, value_enum)]
        task: Vec<TaskArg>,
    },
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn to_json(&self) -> Value {
        let (module, kind, message) = match self {
            CliError::Core(e) => (e.module(), e.kind(), e.to_string()),
            CliError::Usage(m) => ("cli", "UsageError", m.clone()),
        };
        json!({ "error": { "module": module, "kind": kind, "message": message } })
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => e.exit_code() as u8,
            CliError::Usage(_) => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())).into())
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn require_exists(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")).into())
    }
}

fn slice_json(s: &LongitudinalSlice) -> Value {
    let rows: Vec<&[f32]> = (0..s.len()).map(|l| s.row(l)).collect();
    json!({
        "label": s.label.as_str(),
        "angle": s.angle,
        "valid_rows": s.valid_rows,
        "width": s.width(),
        "rows": rows,
    })
}

fn parse_vector(text: &str) -> CliResult<GradeVector> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(format!("--vector: {e}")))?;
    let entries: [f64; GRADE_COUNT] = values
        .try_into()
        .map_err(|v: Vec<f64>| CliError::Usage(format!("--vector needs {GRADE_COUNT} values, got {}", v.len())))?;
    Ok(GradeVector::new(entries)?)
}

fn run(command: Command) -> CliResult<Value> {
    match command {
        Command::Label { centerlines, out, config } => {
            let cfg: LabelerConfig = match &config {
                Some(p) => read_json(p)?,
                None => LabelerConfig::default(),
            };
            let set = read_centerline_set(&centerlines)?;
            let labeling = label_centerlines(&set, &cfg)?;
            write_file(&out, &(labeling_to_json(&labeling) + "\n"))?;
            Ok(json!({
                "case_id": labeling.case_id,
                "out": out,
                "segments": labeling.assignments(),
                "diagnostics": labeling.diagnostics,
            }))
        }
        Command::Mpr { volume, segments, out_dir } => {
            let labeling = read_labeling(&segments)?;
            let vol = read_volume(&volume)?;
            let stacks = extract_stacks(&vol, &labeling)?;
            write_stacks(&out_dir, &stacks)?;
            let written: Vec<Value> = stacks
                .iter()
                .map(|s| {
                    json!({
                        "label": s.label.as_str(),
                        "valid_rows": s.valid_rows,
                        "path": out_dir.join(format!("{}.json", s.label)),
                    })
                })
                .collect();
            Ok(json!({ "case_id": labeling.case_id, "stacks": written }))
        }
        Command::Slice { stack, angle, pair } => {
            let st = read_stack(&stack)?;
            if pair {
                let (a, b) = extract_orthogonal_pair(&st, angle)?;
                Ok(json!({ "slices": [slice_json(&a), slice_json(&b)] }))
            } else {
                Ok(slice_json(&extract_longitudinal_slice(&st, angle)?))
            }
        }
        Command::Encode { grade } => {
            let g = CadRadsGrade::new(grade)?;
            let v = encode(g);
            Ok(json!({ "grade": g, "vector": v.entries(), "cumulative": v.cumulative() }))
        }
        Command::Decode { vector } => {
            let v = parse_vector(&vector)?;
            let (grade, cumulative) = decode(&v);
            Ok(json!({ "grade": grade, "cumulative": cumulative }))
        }
        Command::Predict { stacks, scorer, angles, dual_view, models, out } => {
            let cfg = InferenceConfig {
                n_angles: angles,
                dual_view,
                scorer: scorer.into(),
                n_models: models,
                ..InferenceConfig::default()
            };
            cfg.validate()?;
            require_exists(&stacks)?;
            let loaded = read_stacks(&stacks)?;
            let prediction = predict_stacks(&loaded, &cfg)?;
            write_file(&out, &to_json(&prediction))?;
            Ok(serde_json::to_value(&prediction).expect("prediction serializes"))
        }
        Command::Eval { pred, truth, task } => {
            let preds = read_preds_csv(&pred)?;
            let truth = read_truth_csv(&truth)?;
            let report = evaluate_tasks(&preds, &truth, &[task.into()])?;
            Ok(serde_json::to_value(&report).expect("report serializes"))
        }
        Command::Phantom { n, seed, jitter, out_dir } => {
            let options = CohortOptions {
                jitter_mm: jitter,
                ..CohortOptions::new(n, seed)
            };
            let cases = write_phantom_cohort(&out_dir, &options)?;
            Ok(json!({ "out_dir": out_dir, "cases": cases }))
        }
        Command::Pipeline {
            config,
            input_dir,
            output_dir,
            phantom_n,
            seed,
            angles,
            dual_view,
            models,
            task,
        } => {
            let mut cfg: PipelineConfig = match &config {
                Some(p) => read_json(p)?,
                None => PipelineConfig::default(),
            };
            if let Some(d) = input_dir {
                cfg.input_dir = d;
            }
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            if let Some(n) = phantom_n {
                let base = cfg.phantom.take().unwrap_or_default();
                cfg.phantom = Some(CohortOptions { n, ..base });
            }
            if let Some(s) = seed {
                match cfg.phantom.as_mut() {
                    Some(p) => p.seed = s,
                    None => return Err(CliError::Usage("--seed needs a phantom cohort (--phantom-n)".into())),
                }
            }
            if let Some(a) = angles {
                cfg.inference.n_angles = a;
            }
            if dual_view {
                cfg.inference.dual_view = true;
            }
            if let Some(m) = models {
                cfg.inference.n_models = m;
            }
            if !task.is_empty() {
                cfg.tasks = task.into_iter().map(EvalTask::from).collect();
            }
            if cfg.phantom.is_none() {
                require_exists(&cfg.input_dir)?;
            }
            let summary = run_pipeline(&cfg)?;
            let predictions: Vec<Value> = summary
                .predictions
                .iter()
                .map(|p| {
                    json!({
                        "case_id": p.case_id,
                        "grade": p.prediction.grade,
                        "cumulative": p.prediction.cumulative,
                    })
                })
                .collect();
            Ok(json!({
                "output_dir": cfg.output_dir,
                "stacks_dir": STACKS_DIR,
                "n_cases": summary.predictions.len(),
                "predictions": predictions,
                "metrics": summary.report,
            }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code());
        }
    };
    match run(cli.command) {
        Ok(value) => {
            let text = serde_json::to_string_pretty(&value).expect("output serializes");
            // A closed pipe (`| head`) is not an error of ours.
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            log::debug!("{err:?}");
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code())
        }
    }
}
