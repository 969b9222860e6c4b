//! Command implementations and their on-disk artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};

use autopool::evaluation::{
    frames_to_segments, static_metrics, static_prediction, EvalReport, SegmentTally,
};
use autopool::gradcheck;
use autopool::model::{load_checkpoint, model_forward, save_checkpoint, CheckpointMeta};
use autopool::objective::{history_from_csv, history_to_csv, train, Operator, TrainConfig};
use autopool::synthdata::{
    generate, read_dataset, summarize_durations, Bag, DatasetManifest, SynthConfig,
};
use ndarray::Array2;

use crate::config::{
    build_synth_config, build_train_config, load_file_config, resolve_operator, resolve_seed,
    resolve_segment_duration, FileConfig,
};

/// Usage-level failures (missing input files, bad flag values) exit with
/// status 2; everything else exits with status 1.
#[derive(Debug)]
pub enum CmdError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 2,
            CmdError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CmdError::Usage(e) | CmdError::Runtime(e) => format!("{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CmdError {
    fn from(e: anyhow::Error) -> Self {
        CmdError::Runtime(e)
    }
}

impl From<autopool::Error> for CmdError {
    fn from(e: autopool::Error) -> Self {
        CmdError::Runtime(anyhow::Error::new(e))
    }
}

pub type CmdResult = std::result::Result<(), CmdError>;

fn usage(e: anyhow::Error) -> CmdError {
    CmdError::Usage(e)
}

fn require_file(path: &Path, what: &str) -> std::result::Result<(), CmdError> {
    if !path.exists() {
        return Err(usage(anyhow!("{what} not found: {}", path.display())));
    }
    Ok(())
}

fn load_config(path: &Path) -> std::result::Result<FileConfig, CmdError> {
    require_file(path, "config file")?;
    load_file_config(path).map_err(CmdError::Runtime)
}

const RUN_MANIFEST_FORMAT: &str = "autopool-run-v1";

/// Record of one command invocation: resolved configuration, artifact paths,
/// and wall-clock runtime. Written on success only.
#[derive(Debug, Serialize)]
struct RunManifest<'a, C: Serialize> {
    format: &'static str,
    command: &'a str,
    version: &'static str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    operator: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    config: C,
    artifacts: Vec<(String, String)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_validation_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs_run: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_alpha: Option<Vec<f64>>,
    runtime_seconds: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// generate

pub fn cmd_generate(config_path: &Path, out: &Path, seed_flag: Option<u64>) -> CmdResult {
    let started = Instant::now();
    let file = load_config(config_path)?;
    let seed = resolve_seed(seed_flag, &file).map_err(usage)?;
    let synth: SynthConfig = build_synth_config(&file.data, seed).map_err(CmdError::Runtime)?;

    let dataset = generate(&synth)?;
    let dataset_dir = out.join("dataset");
    fs::create_dir_all(&dataset_dir)
        .with_context(|| format!("cannot create {}", dataset_dir.display()))
        .map_err(CmdError::Runtime)?;
    let manifest = autopool::synthdata::write_dataset(&dataset_dir, &dataset, &synth)?;

    println!(
        "generated {} train / {} validation / {} test bags ({} classes, {} frames per bag)",
        dataset.train.len(),
        dataset.validation.len(),
        dataset.test.len(),
        manifest.num_classes,
        synth.frames_per_bag(),
    );
    let summary = summarize_durations(&dataset.train, &dataset.class_names, synth.frame_rate)?;
    println!("{:<16} {:>7} {:>8} {:>8} {:>8}", "class", "events", "mean_s", "min_s", "max_s");
    for row in &summary {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.3}"),
            None => "-".to_string(),
        };
        println!(
            "{:<16} {:>7} {:>8} {:>8} {:>8}",
            row.name,
            row.event_count,
            fmt(row.mean_seconds),
            fmt(row.min_seconds),
            fmt(row.max_seconds)
        );
    }

    let manifest_doc = RunManifest {
        format: RUN_MANIFEST_FORMAT,
        command: "generate",
        version: env!("CARGO_PKG_VERSION"),
        seed,
        operator: None,
        lambda: None,
        config: &synth,
        artifacts: vec![("dataset".to_string(), dataset_dir.display().to_string())],
        best_validation_f1: None,
        epochs_run: None,
        final_alpha: None,
        runtime_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join("generate_manifest.json"), &manifest_doc).map_err(CmdError::Runtime)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn parse_history(path: &Path) -> Result<autopool::objective::ParsedHistory> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(history_from_csv(&text, &path.display().to_string())?)
}

fn operator_slug(operator: &Operator) -> String {
    operator.to_string().replace(':', "_")
}

pub fn cmd_train(
    config_path: &Path,
    out: &Path,
    operator_flag: Option<&str>,
    seed_flag: Option<u64>,
    dataset_flag: Option<&Path>,
) -> CmdResult {
    let started = Instant::now();
    let file = load_config(config_path)?;
    let seed = resolve_seed(seed_flag, &file).map_err(usage)?;
    let operator = resolve_operator(operator_flag, &file).map_err(usage)?;
    let train_config: TrainConfig =
        build_train_config(&file.train, operator, seed).map_err(CmdError::Runtime)?;

    let dataset_dir = dataset_flag
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("dataset"));
    require_file(&dataset_dir.join("manifest.json"), "dataset manifest")?;
    let (dataset, _manifest) = read_dataset(&dataset_dir)?;

    let (state, history) = train(&dataset.train, &dataset.validation, &train_config)?;

    let run_dir = out.join("runs").join(operator_slug(&operator));
    fs::create_dir_all(&run_dir)
        .with_context(|| format!("cannot create {}", run_dir.display()))
        .map_err(CmdError::Runtime)?;

    let checkpoint_path = run_dir.join("checkpoint.json");
    let meta = CheckpointMeta {
        operator: Some(operator.to_string()),
        alpha: Some(state.alpha().to_vec()),
    };
    save_checkpoint(&state.params, &meta, &checkpoint_path)?;

    let history_path = run_dir.join("history.csv");
    let csv = history_to_csv(&history, &operator, state.params.num_classes);
    fs::write(&history_path, csv)
        .with_context(|| format!("cannot write {}", history_path.display()))
        .map_err(CmdError::Runtime)?;

    println!(
        "trained operator {operator}: {} epochs, best validation macro-F1 {:.4}",
        history.len(),
        state.best_validation_score,
    );

    #[derive(Serialize)]
    struct TrainManifestConfig {
        dataset: String,
        operator: String,
        architecture: String,
        learning_rate: f64,
        batch_size: usize,
        max_epochs: usize,
        early_stop_patience: usize,
        lr_reduce_patience: usize,
        lr_reduce_factor: f64,
        alpha_init: f64,
        seed: u64,
    }
    let manifest_doc = RunManifest {
        format: RUN_MANIFEST_FORMAT,
        command: "train",
        version: env!("CARGO_PKG_VERSION"),
        seed,
        operator: Some(operator.to_string()),
        lambda: operator.lambda(),
        config: TrainManifestConfig {
            dataset: dataset_dir.display().to_string(),
            operator: operator.to_string(),
            architecture: format!("{:?}", train_config.architecture),
            learning_rate: train_config.learning_rate,
            batch_size: train_config.batch_size,
            max_epochs: train_config.max_epochs,
            early_stop_patience: train_config.early_stop_patience,
            lr_reduce_patience: train_config.lr_reduce_patience,
            lr_reduce_factor: train_config.lr_reduce_factor,
            alpha_init: train_config.alpha_init,
            seed,
        },
        artifacts: vec![
            ("checkpoint".to_string(), checkpoint_path.display().to_string()),
            ("history".to_string(), history_path.display().to_string()),
        ],
        best_validation_f1: Some(state.best_validation_score),
        epochs_run: Some(history.len()),
        final_alpha: Some(state.alpha().to_vec()),
        runtime_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&run_dir.join("manifest.json"), &manifest_doc).map_err(CmdError::Runtime)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

/// Structured evaluation document: the report plus its provenance.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalDocument {
    pub format: String,
    pub operator: Option<String>,
    pub checkpoint: String,
    pub dataset: String,
    pub split: String,
    pub segment_duration: f64,
    pub threshold: f64,
    pub report: EvalReport,
}

const EVAL_FORMAT: &str = "autopool-eval-v1";

/// Evaluate a model over a list of bags: static metrics against weak labels
/// and segment-based metrics against strong labels.
pub fn evaluate_bags(
    params: &autopool::model::ModelParams,
    bags: &[Bag],
    frame_rate: f64,
    segment_duration: f64,
    threshold: f64,
) -> Result<EvalReport> {
    let c = params.num_classes;
    let mut predicted = Array2::zeros((bags.len(), c));
    let mut reference = Array2::zeros((bags.len(), c));
    let mut tally = SegmentTally::new(c, segment_duration);
    for (i, bag) in bags.iter().enumerate() {
        let (probs, _) = model_forward(params, &bag.features)?;
        let bag_pred = static_prediction(&probs);
        for class in 0..c {
            predicted[[i, class]] = u8::from(bag_pred.values[class] >= threshold);
            reference[[i, class]] = bag.weak_labels[class];
        }
        let strong = bag.strong_labels.as_ref().ok_or_else(|| {
            anyhow!("bag {} lacks strong labels; segment metrics need them", bag.bag_id)
        })?;
        let pred_roll =
            frames_to_segments(probs.values(), frame_rate, segment_duration, threshold)?;
        let ref_roll = frames_to_segments(
            &strong.mapv(f64::from),
            frame_rate,
            segment_duration,
            0.5,
        )?;
        tally.add(&pred_roll, &ref_roll)?;
    }
    Ok(EvalReport {
        static_metrics: static_metrics(&predicted, &reference)?,
        dynamic_metrics: tally.finish(),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    checkpoint: &Path,
    dataset_dir: &Path,
    split_flag: Option<&str>,
    segment_duration_flag: Option<f64>,
    threshold_flag: Option<f64>,
    out: Option<&Path>,
    config_path: Option<&Path>,
) -> CmdResult {
    require_file(checkpoint, "checkpoint")?;
    require_file(&dataset_dir.join("manifest.json"), "dataset manifest")?;
    let file = match config_path {
        Some(p) => load_config(p)?,
        None => FileConfig::default(),
    };
    let segment_duration =
        resolve_segment_duration(segment_duration_flag, &file).map_err(usage)?;
    let split = split_flag
        .map(str::to_string)
        .or_else(|| file.eval.split.clone())
        .unwrap_or_else(|| "test".to_string());
    let split = split.as_str();
    let threshold = threshold_flag.or(file.eval.threshold).unwrap_or(0.5);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(usage(anyhow!("threshold must lie in (0, 1), got {threshold}")));
    }

    let (params, meta) = load_checkpoint(checkpoint)?;
    let manifest: DatasetManifest = autopool::synthdata::read_manifest(dataset_dir)?;
    if manifest.feature_dim != params.input_dim || manifest.num_classes != params.num_classes {
        return Err(CmdError::Runtime(anyhow!(
            "checkpoint expects ({} features, {} classes) but dataset has ({}, {})",
            params.input_dim,
            params.num_classes,
            manifest.feature_dim,
            manifest.num_classes
        )));
    }
    let entry = manifest
        .splits
        .iter()
        .find(|(name, _)| name == split)
        .ok_or_else(|| usage(anyhow!("dataset has no split named {split}")))?;
    let bags = autopool::synthdata::read_split(&dataset_dir.join(&entry.1.path))?;

    let report = evaluate_bags(&params, &bags, manifest.frame_rate, segment_duration, threshold)
        .map_err(CmdError::Runtime)?;

    println!(
        "static macro-F1 {:.4}  dynamic macro-F1 {:.4}  error rate {}",
        report.static_metrics.macro_avg.f1,
        report.dynamic_metrics.macro_avg.f1,
        match report.dynamic_metrics.error_rate.value {
            Some(e) => format!("{e:.4}"),
            None => "NA (no reference events)".to_string(),
        }
    );

    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))
        .map_err(CmdError::Runtime)?;
    let document = EvalDocument {
        format: EVAL_FORMAT.to_string(),
        operator: meta.operator,
        checkpoint: checkpoint.display().to_string(),
        dataset: dataset_dir.display().to_string(),
        split: split.to_string(),
        segment_duration,
        threshold,
        report: report.clone(),
    };
    write_json(&out_dir.join(format!("report-{split}.json")), &document)
        .map_err(CmdError::Runtime)?;
    fs::write(
        out_dir.join(format!("report-{split}.csv")),
        autopool::evaluation::report_to_csv(&report),
    )
    .map_err(|e| CmdError::Runtime(e.into()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

pub fn cmd_gradcheck(seed: u64, trials: usize) -> CmdResult {
    if trials < 1 {
        return Err(usage(anyhow!("--trials must be at least 1")));
    }
    let report = gradcheck::run(seed, trials)?;
    for c in &report.components {
        println!(
            "{:<22} max_rel_err {:>12.3e}  threshold {:>8.0e}  {}",
            c.name,
            c.max_rel_err,
            c.threshold,
            if c.passed() { "PASS" } else { "FAIL" }
        );
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CmdError::Runtime(anyhow!(
            "gradient check failed (seed {seed}, {trials} trials)"
        )))
    }
}

// ---------------------------------------------------------------------------
// export-plots

/// Tidy plot tables from history and report files:
///   alpha.csv  — final recorded α per class per run
///   f1.csv     — per-class static/dynamic F1 per evaluated run
///   curves.csv — loss and validation-F1 trajectories
pub fn cmd_export_plots(histories: &[PathBuf], reports: &[PathBuf], out: &Path) -> CmdResult {
    for p in histories.iter().chain(reports) {
        require_file(p, "input file")?;
    }
    fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))
        .map_err(CmdError::Runtime)?;

    let mut alpha_csv = String::from("operator,class,alpha\n");
    let mut curves_csv = String::from("operator,epoch,train_loss,val_f1\n");
    for path in histories {
        let history = parse_history(path).map_err(CmdError::Runtime)?;
        for row in &history.rows {
            let _ = writeln!(
                curves_csv,
                "{},{},{},{}",
                history.operator, row.epoch, row.train_loss, row.val_f1
            );
        }
        if let Some(last) = history.rows.last() {
            for (class, a) in last.alpha.iter().enumerate() {
                let _ = writeln!(alpha_csv, "{},{class},{a}", history.operator);
            }
        }
    }

    let mut f1_csv = String::from("operator,class,f1_static,f1_dynamic\n");
    for path in reports {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))
            .map_err(CmdError::Runtime)?;
        let document: EvalDocument = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse {}", path.display()))
            .map_err(CmdError::Runtime)?;
        let operator = document.operator.unwrap_or_else(|| "unknown".to_string());
        for (s, d) in document
            .report
            .static_metrics
            .per_class
            .iter()
            .zip(&document.report.dynamic_metrics.per_class)
        {
            let _ = writeln!(f1_csv, "{operator},{},{},{}", s.class, s.f1, d.f1);
        }
    }

    fs::write(out.join("alpha.csv"), alpha_csv)
        .map_err(|e| CmdError::Runtime(e.into()))?;
    fs::write(out.join("curves.csv"), curves_csv)
        .map_err(|e| CmdError::Runtime(e.into()))?;
    fs::write(out.join("f1.csv"), f1_csv)
        .map_err(|e| CmdError::Runtime(e.into()))?;
    println!(
        "wrote {}, {}, {}",
        out.join("alpha.csv").display(),
        out.join("curves.csv").display(),
        out.join("f1.csv").display()
    );
    Ok(())
}
