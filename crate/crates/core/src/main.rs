//! eegkit command-line interface.
//!
//! Subcommands: `synth | preprocess | features | run | report`.
//! Exit codes: 0 success, 1 runtime failure, 2 usage/contract error.

use clap::{Parser, Subcommand, ValueEnum};
use eegkit::datamodel::{load_manifest, load_trial, standard_layout, Epoch};
use eegkit::evalharness::{
    self, build_task, load_and_preprocess, run_experiment_on_epochs, write_reports,
    EvalError, ExperimentConfig, ExperimentOutcome, TaskKind, TaskSpec,
};
use eegkit::preprocess::{
    apply_bandpass, design_bandpass, reject_outlier_epochs, segment, BandpassSpec,
    DEFAULT_OUTLIER_THRESHOLD_UV,
};
use eegkit::spectral::spv;
use eegkit::store::{write_ppm, write_tensor_store};
use eegkit::synthgen::{generate, CohortSpec};
use eegkit::topomap::{eeg_image, eeg_movie, project_aep, BandNormalizer};
use eegkit::{csp, datamodel};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

/// Environment variable naming the default output root directory.
const OUT_ROOT_ENV: &str = "EEGKIT_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "eegkit",
    version,
    about = "Emotional-EEG analysis pipeline: synthesis, preprocessing, features, \
             cross-validated evaluation, and reporting"
)]
struct Cli {
    /// Worker thread cap (default: available cores). Results are
    /// independent of this value.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FeatureKindArg {
    Spv,
    Csp,
    Raw,
    Image,
    Movie,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskKindArg {
    Valence,
    Arousal,
    Emotion6,
    PdVsHc,
}

impl From<TaskKindArg> for TaskKind {
    fn from(value: TaskKindArg) -> TaskKind {
        match value {
            TaskKindArg::Valence => TaskKind::Valence,
            TaskKindArg::Arousal => TaskKind::Arousal,
            TaskKindArg::Emotion6 => TaskKind::Emotion6,
            TaskKindArg::PdVsHc => TaskKind::PdVsHc,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort from a spec JSON file.
    Synth {
        /// Cohort spec JSON.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory (default: <out-root>/synth).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment, outlier-reject, and bandpass-filter a dataset; cache the
    /// resulting epochs in the tensor-store format.
    Preprocess {
        /// Dataset manifest JSON.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory (default: <out-root>/preprocessed).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract features for every preprocessed epoch.
    Features {
        /// Dataset manifest JSON.
        #[arg(long)]
        manifest: PathBuf,
        /// Feature kind.
        #[arg(long, value_enum)]
        kind: FeatureKindArg,
        /// Task supplying labels (required for csp, which is supervised).
        #[arg(long, value_enum)]
        task: Option<TaskKindArg>,
        /// Output directory (default: <out-root>/features).
        #[arg(long)]
        out: Option<PathBuf>,
        /// For image/movie kinds: also export the first image as a PPM.
        #[arg(long)]
        ppm: bool,
    },
    /// Run a full cross-validated experiment from a config JSON file.
    Run {
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: <out-root>/run).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Build the CNNs with convolution stride 3 (experimental).
        #[arg(long)]
        stride3: bool,
    },
    /// Regenerate report tables/charts from a completed run directory.
    Report {
        /// Directory containing report.json from a previous run.
        #[arg(long)]
        results: PathBuf,
    },
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> CliError {
        match e {
            EvalError::InvalidTask(_)
            | EvalError::InvalidConfig(_)
            | EvalError::EmptyGrid
            | EvalError::EmptyClass(_)
            | EvalError::ClassTooSmall { .. }
            | EvalError::TooFewSubjects { .. }
            | EvalError::Data(_) => CliError::usage(e.to_string()),
            other => CliError::runtime(other.to_string()),
        }
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn resolve_out(out: Option<PathBuf>, default_name: &str) -> PathBuf {
    out.unwrap_or_else(|| out_root().join(default_name))
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("invalid {what} {}: {e}", path.display())))
}

/// FNV-1a 64-bit digest, used to fingerprint configs in provenance files.
fn digest64(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

#[derive(Serialize)]
struct Provenance<'a, T: Serialize> {
    tool: &'a str,
    tool_version: &'a str,
    store_version: u32,
    command: &'a str,
    config_digest: String,
    config: &'a T,
}

fn write_provenance<T: Serialize>(dir: &Path, command: &str, config: &T) -> Result<(), CliError> {
    let config_json = serde_json::to_vec(config).expect("config serializes");
    let prov = Provenance {
        tool: "eegkit",
        tool_version: env!("CARGO_PKG_VERSION"),
        store_version: eegkit::store::STORE_VERSION,
        command,
        config_digest: digest64(&config_json),
        config,
    };
    let bytes = serde_json::to_vec_pretty(&prov).expect("provenance serializes");
    std::fs::write(dir.join("provenance.json"), bytes)
        .map_err(|e| CliError::runtime(format!("writing provenance: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be >= 1");
            return ExitCode::from(EXIT_USAGE);
        }
        // Ignore the error if a pool already exists (e.g. repeated init in
        // tests); computation results do not depend on thread count.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    let result = match cli.command {
        Command::Synth { spec, out } => cmd_synth(&spec, resolve_out(out, "synth")),
        Command::Preprocess { manifest, out } => {
            cmd_preprocess(&manifest, resolve_out(out, "preprocessed"))
        }
        Command::Features {
            manifest,
            kind,
            task,
            out,
            ppm,
        } => cmd_features(&manifest, kind, task, resolve_out(out, "features"), ppm),
        Command::Run {
            config,
            out,
            stride3,
        } => cmd_run(&config, resolve_out(out, "run"), stride3),
        Command::Report { results } => cmd_report(&results),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn cmd_synth(spec_path: &Path, out_dir: PathBuf) -> Result<(), CliError> {
    let spec: CohortSpec = read_json_file(spec_path, "cohort spec")?;
    spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let n_trials =
        2 * spec.subjects_per_cohort * datamodel::Emotion::ALL.len() * spec.trials_per_emotion;
    eprintln!("synth: generating {n_trials} trials into {}", out_dir.display());
    let manifest = generate(&spec, &out_dir).map_err(|e| CliError::runtime(e.to_string()))?;
    write_provenance(&out_dir, "synth", &spec)?;
    eprintln!("synth: wrote {} trials", manifest.trials.len());
    Ok(())
}

/// Metadata sidecar for cached epochs / feature stores: one row per record.
fn write_labels_csv(path: &Path, epochs: &[Epoch]) -> Result<(), CliError> {
    let mut out = String::from("index,subject,cohort,emotion,trial,start_sample\n");
    for (i, e) in epochs.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i,
            e.labels.subject_id,
            e.labels.cohort,
            e.labels.emotion.name(),
            e.labels.trial_index,
            e.start_sample
        ));
    }
    std::fs::write(path, out).map_err(|e| CliError::runtime(format!("writing labels: {e}")))
}

fn cmd_preprocess(manifest_path: &Path, out_dir: PathBuf) -> Result<(), CliError> {
    if !manifest_path.exists() {
        return Err(CliError::usage(format!(
            "manifest not found: {}",
            manifest_path.display()
        )));
    }
    let manifest = load_manifest(manifest_path).map_err(|e| CliError::usage(e.to_string()))?;
    eprintln!("preprocess: {} trials", manifest.trials.len());
    let mut epochs = Vec::new();
    for entry in &manifest.trials {
        let trial = load_trial(&manifest, entry).map_err(|e| CliError::usage(e.to_string()))?;
        epochs.extend(segment(&trial).map_err(|e| CliError::runtime(e.to_string()))?);
    }
    let total = epochs.len();
    let (kept, report) = reject_outlier_epochs(epochs, DEFAULT_OUTLIER_THRESHOLD_UV);
    eprintln!(
        "preprocess: {} epochs kept, {} rejected by the {} uV rule",
        kept.len(),
        report.dropped,
        DEFAULT_OUTLIER_THRESHOLD_UV
    );
    let filter = design_bandpass(&BandpassSpec::broadband(), datamodel::SAMPLE_RATE)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let mut filtered = Vec::with_capacity(kept.len());
    for epoch in kept {
        let data = apply_bandpass(&filter, &epoch.data, true)
            .map_err(|e| CliError::runtime(e.to_string()))?;
        filtered.push(Epoch {
            data,
            labels: epoch.labels,
            start_sample: epoch.start_sample,
        });
    }
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::runtime(format!("creating {}: {e}", out_dir.display())))?;
    let records: Vec<Vec<f64>> = filtered
        .iter()
        .map(|e| e.data.iter().cloned().collect())
        .collect();
    write_tensor_store(
        &out_dir.join("epochs.tns"),
        &[datamodel::NUM_CHANNELS, datamodel::EPOCH_SAMPLES],
        &records,
    )
    .map_err(|e| CliError::runtime(e.to_string()))?;
    write_labels_csv(&out_dir.join("labels.csv"), &filtered)?;
    #[derive(Serialize)]
    struct PreprocessConfig<'a> {
        manifest: &'a str,
        outlier_threshold_uv: f64,
        bandpass: BandpassSpec,
        total_epochs: usize,
        kept_epochs: usize,
    }
    write_provenance(
        &out_dir,
        "preprocess",
        &PreprocessConfig {
            manifest: &manifest_path.display().to_string(),
            outlier_threshold_uv: DEFAULT_OUTLIER_THRESHOLD_UV,
            bandpass: BandpassSpec::broadband(),
            total_epochs: total,
            kept_epochs: filtered.len(),
        },
    )?;
    eprintln!("preprocess: wrote {} epochs to {}", filtered.len(), out_dir.display());
    Ok(())
}

fn cmd_features(
    manifest_path: &Path,
    kind: FeatureKindArg,
    task: Option<TaskKindArg>,
    out_dir: PathBuf,
    ppm: bool,
) -> Result<(), CliError> {
    if kind == FeatureKindArg::Csp && task.is_none() {
        return Err(CliError::usage(
            "csp features are supervised: supply --task to define the class labels",
        ));
    }
    if ppm && !matches!(kind, FeatureKindArg::Image | FeatureKindArg::Movie) {
        return Err(CliError::usage("--ppm applies only to image/movie kinds"));
    }
    if !manifest_path.exists() {
        return Err(CliError::usage(format!(
            "manifest not found: {}",
            manifest_path.display()
        )));
    }
    let epochs = load_and_preprocess(manifest_path)?;
    if epochs.is_empty() {
        return Err(CliError::usage("no epochs survive preprocessing"));
    }
    eprintln!("features: {} epochs", epochs.len());
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::runtime(format!("creating {}: {e}", out_dir.display())))?;
    let (shape, records): (Vec<usize>, Vec<Vec<f64>>) = match kind {
        FeatureKindArg::Spv => {
            let records = epochs
                .iter()
                .map(|e| Ok(spv(e)?.values.to_vec()))
                .collect::<Result<Vec<_>, EvalError>>()?;
            (vec![42], records)
        }
        FeatureKindArg::Raw => {
            let records = epochs
                .iter()
                .map(|e| e.data.iter().cloned().collect())
                .collect();
            (vec![datamodel::NUM_CHANNELS, datamodel::EPOCH_SAMPLES], records)
        }
        FeatureKindArg::Csp => {
            let task_spec = TaskSpec::new(TaskKind::from(task.unwrap()));
            let set = build_task(&epochs, &task_spec)?;
            let mut by_class: Vec<Vec<Epoch>> = vec![Vec::new(); set.class_names.len()];
            for (pos, &label) in set.labels.iter().enumerate() {
                by_class[label].push(epochs[set.indices[pos]].clone());
            }
            let transform = if by_class.len() == 2 {
                csp::fit_csp(&by_class[0], &by_class[1], 3)
            } else {
                csp::fit_csp_multiclass(&by_class)
            }
            .map_err(|e| CliError::runtime(e.to_string()))?;
            let records = epochs
                .iter()
                .map(|e| csp::csp_features(&transform, e).values.to_vec())
                .collect();
            (vec![transform.filters.nrows()], records)
        }
        FeatureKindArg::Image | FeatureKindArg::Movie => {
            let normalizer = BandNormalizer::fit(&epochs, true)
                .map_err(|e| CliError::runtime(e.to_string()))?;
            let projected =
                project_aep(&standard_layout()).map_err(|e| CliError::runtime(e.to_string()))?;
            if ppm {
                let image = eeg_image(&epochs[0], &projected, &normalizer)
                    .map_err(|e| CliError::runtime(e.to_string()))?;
                write_ppm(&out_dir.join("preview.ppm"), &image)
                    .map_err(|e| CliError::runtime(e.to_string()))?;
            }
            match kind {
                FeatureKindArg::Image => {
                    let records = epochs
                        .iter()
                        .map(|e| {
                            Ok(eeg_image(e, &projected, &normalizer)?
                                .data
                                .iter()
                                .cloned()
                                .collect())
                        })
                        .collect::<Result<Vec<_>, EvalError>>()?;
                    (vec![32, 32, 3], records)
                }
                _ => {
                    let records = epochs
                        .iter()
                        .map(|e| {
                            Ok(eeg_movie(e, &projected, &normalizer)?
                                .data
                                .iter()
                                .cloned()
                                .collect())
                        })
                        .collect::<Result<Vec<_>, EvalError>>()?;
                    (vec![5, 32, 32, 3], records)
                }
            }
        }
    };
    write_tensor_store(&out_dir.join("features.tns"), &shape, &records)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    write_labels_csv(&out_dir.join("labels.csv"), &epochs)?;
    #[derive(Serialize)]
    struct FeatureConfig<'a> {
        manifest: &'a str,
        kind: &'a str,
        task: Option<TaskSpec>,
        shape: &'a [usize],
        records: usize,
    }
    let kind_name = match kind {
        FeatureKindArg::Spv => "spv",
        FeatureKindArg::Csp => "csp",
        FeatureKindArg::Raw => "raw",
        FeatureKindArg::Image => "image",
        FeatureKindArg::Movie => "movie",
    };
    write_provenance(
        &out_dir,
        "features",
        &FeatureConfig {
            manifest: &manifest_path.display().to_string(),
            kind: kind_name,
            task: task.map(|t| TaskSpec::new(TaskKind::from(t))),
            shape: &shape,
            records: records.len(),
        },
    )?;
    eprintln!(
        "features: wrote {} records of shape {:?} to {}",
        records.len(),
        shape,
        out_dir.display()
    );
    Ok(())
}

fn cmd_run(config_path: &Path, out_dir: PathBuf, stride3: bool) -> Result<(), CliError> {
    let mut config: ExperimentConfig = read_json_file(config_path, "experiment config")?;
    if stride3 {
        config.stride3 = true;
    }
    // Manifest paths resolve relative to the config file's directory.
    let manifest_path = {
        let p = PathBuf::from(&config.manifest);
        if p.is_relative() {
            config_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(p)
        } else {
            p
        }
    };
    if !manifest_path.exists() {
        return Err(CliError::usage(format!(
            "manifest not found: {}",
            manifest_path.display()
        )));
    }
    eprintln!(
        "run: task {:?}, feature {}, model {}, {}-fold {:?} CV",
        config.task.kind,
        config.feature.name(),
        config.model,
        config.cv.k,
        config.cv.mode
    );
    let epochs = load_and_preprocess(&manifest_path)?;
    eprintln!("run: {} epochs after preprocessing", epochs.len());
    let outcome = run_experiment_on_epochs(&epochs, &config)?;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::runtime(format!("creating {}: {e}", out_dir.display())))?;
    write_reports(&outcome, &out_dir)?;
    write_provenance(&out_dir, "run", &config)?;
    let best = outcome.best();
    eprintln!(
        "run: best grid point [{}] {} -> weighted F1 {}",
        outcome.best_index,
        outcome.grid[outcome.best_index].desc,
        best.f1_summary()
    );
    eprintln!("run: reports written to {}", out_dir.display());
    Ok(())
}

fn cmd_report(results_dir: &Path) -> Result<(), CliError> {
    let report_path = results_dir.join("report.json");
    if !report_path.exists() {
        return Err(CliError::usage(format!(
            "no report.json in {}: run an experiment first",
            results_dir.display()
        )));
    }
    let outcome: ExperimentOutcome = read_json_file(&report_path, "report")?;
    write_reports(&outcome, results_dir)?;
    let best = outcome.best();
    println!(
        "model: {} | weighted F1 {} | accuracy {}",
        best.model_desc,
        best.f1_summary(),
        evalharness::format_mean_std(best.mean_accuracy, best.std_accuracy)
    );
    if let (Some(sens), Some(spec)) = (best.mean_sensitivity, best.mean_specificity) {
        println!(
            "sensitivity {} | specificity {}",
            evalharness::format_mean_std(sens, best.std_sensitivity.unwrap_or(0.0)),
            evalharness::format_mean_std(spec, best.std_specificity.unwrap_or(0.0))
        );
    }
    for row in &best.misclassification {
        println!(
            "class {}: {}/{} misclassified ({:.1}%), most often as {}",
            row.class_name,
            row.misclassified,
            row.total,
            100.0 * row.rate,
            row.most_mispredicted.as_deref().unwrap_or("-")
        );
    }
    Ok(())
}
