//! Subcommand implementations. Each resolves a typed configuration, echoes
//! it next to its outputs, and then does its work.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use wsrpn::autodiff::{Float, Precision};
use wsrpn::checkpoint::Checkpoint;
use wsrpn::data::{
    assign_splits, load_dataset, load_image, normalized_tensor, read_classes, synthetic_dataset,
    write_dataset, write_pgm, Dataset, DatasetPaths, Split, SyntheticSpec,
};
use wsrpn::gradcheck::full_loss_grad_check;
use wsrpn::metrics::write_detections_csv;
use wsrpn::trainer::{detect, evaluate, predict_indices, TrainOptions, REPORT_IOUS};
use wsrpn::{LossSwitches, Prediction, TrainConfig, WsrpnError};

use crate::layered::{read_table, resolve, to_toml, value_of, Override};
use crate::{CliError, Layering};

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(WsrpnError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn echo<T: Serialize>(dir: &Path, name: &str, cfg: &T) -> CliResult {
    create_dir(dir)?;
    write_text(&dir.join(name), &to_toml(cfg))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize to JSON")
}

fn parse_precision(s: &str) -> CliResult<Precision> {
    s.parse().map_err(CliError::Usage)
}

fn load_layers<T: Serialize + serde::de::DeserializeOwned>(
    defaults: &T,
    layering: &Layering,
    mut flags: Vec<Override>,
) -> CliResult<T> {
    let file = layering.config.as_deref().map(read_table).transpose()?;
    flags.extend(layering.set.iter().cloned());
    resolve(defaults, file, flags)
}

/// Collects `(key, value)` pairs for the flags that were given.
struct Flags(Vec<Override>);

impl Flags {
    fn new() -> Self {
        Self(Vec::new())
    }

    fn put<T: Serialize>(&mut self, key: &str, v: Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key.to_string(), value_of(&v)));
        }
        self
    }

    fn take(&mut self) -> Vec<Override> {
        std::mem::take(&mut self.0)
    }
}

// ---------------------------------------------------------------- data

/// Where a labeled dataset lives on disk.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory with `images/`, `labels.csv`, optional `bboxes.csv` and `classes.txt`.
    pub dir: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
    pub label_csv: Option<PathBuf>,
    pub bbox_csv: Option<PathBuf>,
    /// Class list; defaults to `classes.txt` or the sorted label columns.
    pub classes: Option<Vec<String>>,
    pub split_seed: u64,
}

impl DataConfig {
    fn load(&self, side: usize) -> CliResult<Dataset> {
        let base = self.dir.as_deref().map(DatasetPaths::in_dir);
        let missing = || {
            CliError::Usage(
                "no dataset given: pass --data DIR or set data.label_csv and data.image_dir".into(),
            )
        };
        let paths = DatasetPaths {
            image_dir: self
                .image_dir
                .clone()
                .or_else(|| base.as_ref().map(|b| b.image_dir.clone()))
                .ok_or_else(missing)?,
            label_csv: self
                .label_csv
                .clone()
                .or_else(|| base.as_ref().map(|b| b.label_csv.clone()))
                .ok_or_else(missing)?,
            bbox_csv: self
                .bbox_csv
                .clone()
                .or_else(|| base.as_ref().and_then(|b| b.bbox_csv.clone())),
        };
        let classes = match (&self.classes, &self.dir) {
            (Some(c), _) => Some(c.clone()),
            (None, Some(d)) if d.join("classes.txt").is_file() => {
                Some(read_classes(&d.join("classes.txt"))?)
            }
            _ => None,
        };
        Ok(load_dataset(&paths, classes.as_deref(), side)?)
    }
}

fn image_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "pnm" | "png"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Runtime(WsrpnError::Data(format!(
            "no .pgm/.png images in {}",
            dir.display()
        ))));
    }
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    /// Label-only training images.
    #[arg(long)]
    n: Option<usize>,
    /// Images with boxes, later halved into validation and test.
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[command(flatten)]
    layering: Layering,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub n: usize,
    pub n_eval: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            n: 200,
            n_eval: 100,
            synthetic: SyntheticSpec::default(),
        }
    }
}

pub fn gen_data(a: GenDataArgs) -> CliResult {
    let flags = Flags::new()
        .put("n", a.n)
        .put("n_eval", a.n_eval)
        .put("synthetic.num_classes", a.classes)
        .put("synthetic.seed", a.seed)
        .put("synthetic.image_size", a.image_size)
        .take();
    let cfg = load_layers(&GenDataConfig::default(), &a.layering, flags)?;
    let ds = synthetic_dataset(&cfg.synthetic, cfg.n, cfg.n_eval, false)?;
    write_dataset(&a.out, &ds)?;
    echo(&a.out, "gen_data.toml", &cfg)?;
    println!(
        "{}",
        json(&serde_json::json!({
            "out": a.out,
            "images": ds.samples.len(),
            "classes": ds.class_names,
            "boxes": ds.samples.iter().map(|s| s.boxes.len()).sum::<usize>(),
        }))
    );
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Desk-scale defaults (batch 32, 5000 iterations).
    #[default]
    Desk,
    /// Small network for 112 px synthetic data.
    Synthetic,
    /// Batch 128, 50000 iterations, patience 10000.
    Large,
}

impl Preset {
    fn train_config(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::default(),
            Preset::Synthetic => TrainConfig::synthetic(),
            Preset::Large => TrainConfig::large_scale(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the checkpoint, logs and metrics.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base hyperparameters before the config file and flags are applied.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// 32 or 64.
    #[arg(long)]
    precision: Option<String>,
    /// Loss configuration: full, no_patch, no_roi, no_consistency, no_bce, no_supcon, only_bce, only_supcon.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// ROI token count K.
    #[arg(long)]
    num_tokens: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Box half-extent in units of sigma.
    #[arg(long)]
    gamma: Option<f64>,
    #[command(flatten)]
    layering: Layering,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    #[serde(default)]
    pub preset: Preset,
    pub precision: String,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    output_dir: PathBuf,
    checkpoint: PathBuf,
    iterations_run: usize,
    best_iteration: usize,
    best_val_map: Option<f64>,
    stopped_early: bool,
    split_sizes: [usize; 3],
    test: Option<wsrpn::metrics::MetricsReport>,
}

pub fn train(a: TrainArgs) -> CliResult {
    let file = a.layering.config.as_deref().map(read_table).transpose()?;
    let preset = match (a.preset, file.as_ref().and_then(|f| f.get("preset"))) {
        (Some(p), _) => p,
        (None, Some(v)) => v
            .clone()
            .try_into()
            .map_err(|_| CliError::Usage(format!("unknown preset {v}")))?,
        (None, None) => Preset::default(),
    };
    let switches = match &a.ablation {
        None => None,
        Some(name) => Some(LossSwitches::ablation(name).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown ablation {name:?}; choose one of {:?}",
                LossSwitches::ABLATIONS
            ))
        })?),
    };
    let defaults = TrainRunConfig {
        preset,
        precision: "f64".into(),
        output_dir: PathBuf::from("runs/train"),
        data: DataConfig::default(),
        train: preset.train_config(),
    };
    let mut flags = Flags::new();
    flags
        .put("preset", Some(preset))
        .put("data.dir", a.data.clone())
        .put("output_dir", a.out.clone())
        .put("precision", a.precision.clone())
        .put("train.loss.switches", switches)
        .put("train.learning_rate", a.lr)
        .put("train.batch_size", a.batch_size)
        .put("train.max_iterations", a.max_iterations)
        .put("train.patience", a.patience)
        .put("train.eval_interval", a.eval_interval)
        .put("train.seed", a.seed)
        .put("train.model.num_tokens", a.num_tokens)
        .put("train.model.beta", a.beta)
        .put("train.model.dim", a.dim)
        .put("train.loss.temperature", a.temperature)
        .put("train.box_gamma", a.gamma);
    let mut overrides = flags.take();
    overrides.extend(a.layering.set.iter().cloned());
    let cfg: TrainRunConfig = resolve(&defaults, file, overrides)?;
    cfg.train.validate()?;
    match parse_precision(&cfg.precision)? {
        Precision::F32 => run_train::<f32>(&cfg),
        Precision::F64 => run_train::<f64>(&cfg),
    }
}

fn run_train<F: Float>(cfg: &TrainRunConfig) -> CliResult {
    let ds = cfg.data.load(cfg.train.model.image_size)?;
    let split = assign_splits(&ds, cfg.data.split_seed);
    let out = &cfg.output_dir;
    echo(out, "config.toml", cfg)?;
    write_text(&out.join("split.json"), &json(&split))?;
    let checkpoint = out.join("best.wsrpn");
    let opts = TrainOptions {
        checkpoint_path: Some(checkpoint.clone()),
        log_path: Some(out.join("train_log.csv")),
    };
    let outcome = wsrpn::train::<F>(&cfg.train, &ds, &split, &opts)?;
    let best = &outcome.best;
    let test = if split.test.is_empty() {
        None
    } else {
        let r = evaluate(
            &best.model,
            &ds,
            &split.test,
            best.norm,
            cfg.train.box_gamma,
            &REPORT_IOUS,
        )?;
        write_text(&out.join("test_metrics.json"), &json(&r))?;
        Some(r)
    };
    println!(
        "{}",
        json(&TrainSummary {
            output_dir: out.clone(),
            checkpoint,
            iterations_run: outcome.iterations_run,
            best_iteration: outcome.best_iteration,
            best_val_map: best.best_val_map,
            stopped_early: outcome.stopped_early,
            split_sizes: [split.train.len(), split.val.len(), split.test.len()],
            test,
        })
    );
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SplitChoice {
    Train,
    Val,
    #[default]
    Test,
    All,
}

fn pick(split: &Split, choice: SplitChoice, n: usize) -> Vec<usize> {
    match choice {
        SplitChoice::Train => split.train.clone(),
        SplitChoice::Val => split.val.clone(),
        SplitChoice::Test => split.test.clone(),
        SplitChoice::All => (0..n).collect(),
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    split: Option<SplitChoice>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    precision: Option<String>,
    #[command(flatten)]
    layering: Layering,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
    pub precision: String,
    #[serde(default)]
    pub split: SplitChoice,
    /// Defaults to the value the checkpoint was trained with.
    pub gamma: Option<f64>,
    pub iou_thresholds: Vec<f64>,
    #[serde(default)]
    pub data: DataConfig,
}

fn gamma_of<F: Float>(ck: &Checkpoint<F>, explicit: Option<f64>) -> f64 {
    explicit
        .or(ck.train_config.as_ref().map(|t| t.box_gamma))
        .unwrap_or(TrainConfig::default().box_gamma)
}

pub fn eval(a: EvalArgs) -> CliResult {
    let defaults = EvalConfig {
        checkpoint: PathBuf::from("best.wsrpn"),
        output_dir: PathBuf::from("runs/eval"),
        precision: "f64".into(),
        split: SplitChoice::Test,
        gamma: None,
        iou_thresholds: REPORT_IOUS.to_vec(),
        data: DataConfig::default(),
    };
    let flags = Flags::new()
        .put("checkpoint", a.checkpoint)
        .put("data.dir", a.data)
        .put("split", a.split)
        .put("output_dir", a.out)
        .put("gamma", a.gamma)
        .put("precision", a.precision)
        .take();
    let cfg = load_layers(&defaults, &a.layering, flags)?;
    match parse_precision(&cfg.precision)? {
        Precision::F32 => run_eval::<f32>(&cfg),
        Precision::F64 => run_eval::<f64>(&cfg),
    }
}

fn run_eval<F: Float>(cfg: &EvalConfig) -> CliResult {
    let ck = Checkpoint::<F>::load(&cfg.checkpoint)?;
    let mut data = cfg.data.clone();
    if data.classes.is_none() {
        data.classes = Some(ck.class_names.clone());
    }
    let ds = data.load(ck.model.config.image_size)?;
    let split = assign_splits(&ds, data.split_seed);
    let idx = pick(&split, cfg.split, ds.samples.len());
    if idx.is_empty() {
        return Err(CliError::Runtime(WsrpnError::Empty("evaluation split")));
    }
    let gamma = gamma_of(&ck, cfg.gamma);
    let preds = predict_indices(&ck.model, &ds, &idx, ck.norm)?;
    let dets = detect(&preds, gamma);
    let report = wsrpn::metrics::evaluate_detections(
        &dets,
        &ds.ground_truth(&idx),
        &ds.class_names,
        &cfg.iou_thresholds,
    )?;
    echo(&cfg.output_dir, "eval_config.toml", cfg)?;
    let ids: Vec<String> = idx.iter().map(|&i| ds.samples[i].id.clone()).collect();
    write_detections_csv(
        &cfg.output_dir.join("detections.csv"),
        &ids,
        &dets,
        &ds.class_names,
    )?;
    let text = json(&report);
    write_text(&cfg.output_dir.join("metrics.json"), &text)?;
    println!("{text}");
    Ok(())
}

// ---------------------------------------------------------------- predict / export

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory of .pgm or .png images.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    precision: Option<String>,
    /// Keep every token's box instead of the best one per class.
    #[arg(long)]
    all_boxes: Option<bool>,
    #[command(flatten)]
    layering: Layering,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    pub checkpoint: PathBuf,
    pub images: PathBuf,
    pub output_dir: PathBuf,
    pub precision: String,
    pub gamma: Option<f64>,
    #[serde(default)]
    pub all_boxes: bool,
}

fn predict_files<F: Float>(ck: &Checkpoint<F>, files: &[PathBuf]) -> CliResult<Vec<Prediction>> {
    let side = ck.model.config.image_size;
    let mut out = Vec::with_capacity(files.len());
    for chunk in files.chunks(32) {
        let imgs = chunk
            .iter()
            .map(|p| load_image(p, side))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&[f32]> = imgs.iter().map(Vec::as_slice).collect();
        out.extend(
            ck.model
                .predict(normalized_tensor::<F>(&refs, side, ck.norm))?,
        );
    }
    Ok(out)
}

pub fn predict(a: PredictArgs) -> CliResult {
    let defaults = PredictConfig {
        checkpoint: PathBuf::from("best.wsrpn"),
        images: PathBuf::from("images"),
        output_dir: PathBuf::from("runs/predict"),
        precision: "f64".into(),
        gamma: None,
        all_boxes: false,
    };
    let flags = Flags::new()
        .put("checkpoint", a.checkpoint)
        .put("images", a.images)
        .put("output_dir", a.out)
        .put("gamma", a.gamma)
        .put("precision", a.precision)
        .put("all_boxes", a.all_boxes)
        .take();
    let cfg = load_layers(&defaults, &a.layering, flags)?;
    match parse_precision(&cfg.precision)? {
        Precision::F32 => run_predict::<f32>(&cfg),
        Precision::F64 => run_predict::<f64>(&cfg),
    }
}

fn run_predict<F: Float>(cfg: &PredictConfig) -> CliResult {
    let ck = Checkpoint::<F>::load(&cfg.checkpoint)?;
    let files = image_files(&cfg.images)?;
    let preds = predict_files(&ck, &files)?;
    let gamma = gamma_of(&ck, cfg.gamma);
    let dets: Vec<_> = if cfg.all_boxes {
        preds
            .iter()
            .map(|p| wsrpn::metrics::extract_detections(p, gamma))
            .collect()
    } else {
        detect(&preds, gamma)
    };
    echo(&cfg.output_dir, "predict_config.toml", cfg)?;
    let ids: Vec<String> = files.iter().map(|p| stem(p)).collect();
    let path = cfg.output_dir.join("detections.csv");
    write_detections_csv(&path, &ids, &dets, &ck.class_names)?;
    println!(
        "{}",
        json(&serde_json::json!({
            "images": files.len(),
            "detections": dets.iter().map(Vec::len).sum::<usize>(),
            "csv": path,
        }))
    );
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    precision: Option<String>,
    /// Export at most this many images.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    layering: Layering,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    pub checkpoint: PathBuf,
    pub images: PathBuf,
    pub output_dir: PathBuf,
    pub precision: String,
    pub limit: Option<usize>,
}

/// 8-bit rendering of non-negative values; `value ≈ pixel / 255 * scale`.
pub fn quantize(values: &[f64]) -> (Vec<u8>, f64) {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { max } else { 1.0 };
    let px = values
        .iter()
        .map(|v| (v.max(0.0) / scale * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    (px, scale)
}

pub fn export_heatmaps(a: ExportArgs) -> CliResult {
    let defaults = ExportConfig {
        checkpoint: PathBuf::from("best.wsrpn"),
        images: PathBuf::from("images"),
        output_dir: PathBuf::from("runs/heatmaps"),
        precision: "f64".into(),
        limit: None,
    };
    let flags = Flags::new()
        .put("checkpoint", a.checkpoint)
        .put("images", a.images)
        .put("output_dir", a.out)
        .put("precision", a.precision)
        .put("limit", a.limit)
        .take();
    let cfg = load_layers(&defaults, &a.layering, flags)?;
    match parse_precision(&cfg.precision)? {
        Precision::F32 => run_export::<f32>(&cfg),
        Precision::F64 => run_export::<f64>(&cfg),
    }
}

fn run_export<F: Float>(cfg: &ExportConfig) -> CliResult {
    let ck = Checkpoint::<F>::load(&cfg.checkpoint)?;
    let mut files = image_files(&cfg.images)?;
    if let Some(n) = cfg.limit {
        files.truncate(n);
    }
    let preds = predict_files(&ck, &files)?;
    let g = ck.model.grid();
    echo(&cfg.output_dir, "export_config.toml", cfg)?;
    let mut index = String::from("image_id,map,index,label,file,width,height,scale\n");
    let mut emit = |id: &str, map: &str, k: usize, label: &str, values: &[f64]| -> CliResult {
        let (px, scale) = quantize(values);
        let file = format!("{id}_{map}_{k}.pgm");
        write_pgm(&cfg.output_dir.join(&file), g, g, &px)?;
        index.push_str(&format!(
            "{id},{map},{k},{label},{file},{g},{g},{scale:e}\n"
        ));
        Ok(())
    };
    let mut labels = ck.class_names.clone();
    labels.push("no_finding".into());
    for (path, p) in files.iter().zip(&preds) {
        let id = stem(path);
        for (k, field) in p.fields.iter().enumerate() {
            emit(&id, "field", k, &format!("token{k}"), field)?;
        }
        for (c, label) in labels.iter().enumerate() {
            let plane: Vec<f64> = p.patch_probs.iter().map(|row| row[c]).collect();
            emit(&id, "patch", c, label, &plane)?;
        }
    }
    let path = cfg.output_dir.join("index.csv");
    write_text(&path, &index)?;
    println!(
        "{}",
        json(&serde_json::json!({ "images": files.len(), "index": path }))
    );
    Ok(())
}

// ---------------------------------------------------------------- grad-check

#[derive(Debug, Clone, Args)]
pub struct GradCheckArgs {
    /// Only 64 is supported.
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Directory to echo the effective configuration into.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    layering: Layering,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    pub precision: String,
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    pub output_dir: Option<PathBuf>,
}

pub fn grad_check(a: GradCheckArgs) -> CliResult {
    let defaults = GradCheckConfig {
        precision: "f64".into(),
        seed: 0,
        eps: 1e-5,
        tolerance: 1e-4,
        output_dir: None,
    };
    let flags = Flags::new()
        .put("precision", a.precision)
        .put("seed", a.seed)
        .put("eps", a.eps)
        .put("tolerance", a.tolerance)
        .put("output_dir", a.out)
        .take();
    let cfg = load_layers(&defaults, &a.layering, flags)?;
    if parse_precision(&cfg.precision)? != Precision::F64 {
        return Err(CliError::Usage(
            "finite differences need --precision 64".into(),
        ));
    }
    if let Some(dir) = &cfg.output_dir {
        echo(dir, "grad_check.toml", &cfg)?;
    }
    let r = full_loss_grad_check(cfg.seed, cfg.eps)?;
    println!("{}", json(&r));
    println!("max relative error: {:e}", r.max_relative_error);
    if r.max_relative_error <= cfg.tolerance {
        Ok(())
    } else {
        Err(CliError::Runtime(WsrpnError::Data(format!(
            "max relative error {:e} exceeds tolerance {:e}",
            r.max_relative_error, cfg.tolerance
        ))))
    }
}
