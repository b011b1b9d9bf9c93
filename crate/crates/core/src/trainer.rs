//! Training loop with validation-mAP model selection and early stopping.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wsrpn_autodiff::{Float, Graph, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{eval_batch, paired_batch, Batch, Dataset, NormStats, Split};
use crate::error::{Result, WsrpnError};
use crate::losses::{total_loss, LossBreakdown};
use crate::metrics::{
    evaluate_detections, extract_detections, top1_per_class, Detection, MetricsReport,
};
use crate::model::{Prediction, Wsrpn};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};

/// IoU thresholds of evaluation reports.
pub const REPORT_IOUS: [f64; 4] = [0.1, 0.3, 0.5, 0.7];

const PREDICT_CHUNK: usize = 64;

pub const LOG_HEADER: &str = "step,L_total,L^P_bce,L^P_supcon,L^R_bce,L^R_supcon,L^{P<->R},val_mAP";

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Best checkpoint, rewritten on every validation improvement.
    pub checkpoint_path: Option<PathBuf>,
    /// Per-step loss CSV.
    pub log_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub losses: LossBreakdown,
    pub val_map: Option<f64>,
}

impl LogRow {
    pub fn csv_row(&self) -> String {
        let m = self.val_map.map_or(String::new(), |v| format!("{v}"));
        format!("{},{},{m}", self.step, self.losses.csv_row())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    /// Parameters of the best validation evaluation (or the last step without validation data).
    pub best: Checkpoint<F>,
    pub best_iteration: usize,
    pub iterations_run: usize,
    pub stopped_early: bool,
    pub log: Vec<LogRow>,
}

/// Inference over `indices` in chunks.
pub fn predict_indices<F: Float>(
    model: &Wsrpn<F>,
    dataset: &Dataset,
    indices: &[usize],
    norm: NormStats,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(PREDICT_CHUNK) {
        let b: Batch<F> = eval_batch(dataset, chunk, norm);
        out.extend(model.predict(b.images)?);
    }
    Ok(out)
}

/// Boxes from predictions after top1-per-class postprocessing.
pub fn detect(preds: &[Prediction], gamma: f64) -> Vec<Vec<Detection>> {
    preds
        .iter()
        .map(|p| top1_per_class(&extract_detections(p, gamma)))
        .collect()
}

pub fn evaluate<F: Float>(
    model: &Wsrpn<F>,
    dataset: &Dataset,
    indices: &[usize],
    norm: NormStats,
    gamma: f64,
    thresholds: &[f64],
) -> Result<MetricsReport> {
    let preds = predict_indices(model, dataset, indices, norm)?;
    evaluate_detections(
        &detect(&preds, gamma),
        &dataset.ground_truth(indices),
        &dataset.class_names,
        thresholds,
    )
}

/// Endless epoch-wise shuffled batches of a fixed size.
pub(crate) struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl BatchSampler {
    pub(crate) fn new(pool: &[usize], size: usize) -> Self {
        Self {
            pool: pool.to_vec(),
            order: Vec::new(),
            pos: 0,
            size: size.min(pool.len()),
        }
    }

    pub(crate) fn next(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order = self.pool.clone();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        b
    }
}

/// Gradients for every parameter in store order; unreached ones are zero.
pub(crate) fn collect_grads<F: Float>(
    g: &mut Graph<F>,
    loss: wsrpn_autodiff::Var,
    vars: &[wsrpn_autodiff::Var],
    tensors: &[Tensor<F>],
) -> Result<Vec<Tensor<F>>> {
    let mut grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(tensors)
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// One forward/backward/update on `batch`; returns the loss breakdown.
pub fn train_step<F: Float>(
    model: &mut Wsrpn<F>,
    opt: &mut AdamW<F>,
    cfg: &TrainConfig,
    batch: &Batch<F>,
    step: usize,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let x = g.constant(batch.images.clone());
    let out = model.forward(&mut g, &p, x)?;
    let terms = total_loss(&mut g, model, &p, &out, &batch.labels, &cfg.loss)?;
    let breakdown = terms.breakdown(&g);
    if !breakdown.is_finite() {
        return Err(WsrpnError::NonFiniteLoss { step, breakdown });
    }
    let mut grads = collect_grads(&mut g, terms.total, p.vars(), model.params.tensors())?;
    clip_grad_norm(&mut grads, cfg.clip_norm);
    opt.step(&mut model.params, &grads);
    Ok(breakdown)
}

pub fn adamw_config(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    }
}

fn log_writer(opts: &TrainOptions) -> Result<Option<(PathBuf, BufWriter<File>)>> {
    let Some(path) = &opts.log_path else {
        return Ok(None);
    };
    let f = File::create(path).map_err(|e| WsrpnError::io(path, e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{LOG_HEADER}").map_err(|e| WsrpnError::io(path, e))?;
    Ok(Some((path.clone(), w)))
}

/// Trains from the seed in `cfg`. Validation images must carry boxes; an empty
/// validation split disables selection and early stopping.
pub fn train<F: Float>(
    cfg: &TrainConfig,
    dataset: &Dataset,
    split: &Split,
    opts: &TrainOptions,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(WsrpnError::Empty("training split"));
    }
    if dataset.side != cfg.model.image_size {
        return Err(WsrpnError::Config(format!(
            "dataset images are {} px but the model expects {}",
            dataset.side, cfg.model.image_size
        )));
    }
    let norm = NormStats::compute(dataset, &split.train);
    let mut model = Wsrpn::<F>::new(cfg.model.clone(), dataset.num_classes(), cfg.seed)?;
    let mut opt = AdamW::new(adamw_config(cfg), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut sampler = BatchSampler::new(&split.train, cfg.batch_size);
    let mut writer = log_writer(opts)?;
    if split.val.is_empty() {
        log::warn!("empty validation split: no model selection or early stopping");
    }

    let snapshot = |model: &Wsrpn<F>, opt: &AdamW<F>, it: usize, best: Option<f64>| Checkpoint {
        model: model.clone(),
        class_names: dataset.class_names.clone(),
        norm,
        train_config: Some(cfg.clone()),
        iteration: it,
        best_val_map: best,
        optimizer: Some(opt.state.clone()),
    };
    let mut best: Option<(f64, Checkpoint<F>)> = None;
    let mut best_iteration = 0;
    let mut log_rows = Vec::new();
    let mut stopped_early = false;
    let mut it = 0;
    while it < cfg.max_iterations {
        it += 1;
        let idx = sampler.next(&mut rng);
        let batch = paired_batch(dataset, &idx, norm, cfg.augment, &mut rng);
        let losses = train_step(&mut model, &mut opt, cfg, &batch, it)?;
        let mut row = LogRow {
            step: it,
            losses,
            val_map: None,
        };
        let eval_now = it % cfg.eval_interval == 0 || it == cfg.max_iterations;
        if eval_now && !split.val.is_empty() {
            let report = evaluate(
                &model,
                dataset,
                &split.val,
                norm,
                cfg.box_gamma,
                &[cfg.selection_iou],
            )?;
            let map = report.thresholds[0].map;
            row.val_map = Some(map);
            log::info!(
                "step {it}: {} val mAP@{} {map:.4}",
                row.losses,
                cfg.selection_iou
            );
            if best.as_ref().is_none_or(|(b, _)| map > *b) {
                let ck = snapshot(&model, &opt, it, Some(map));
                if let Some(path) = &opts.checkpoint_path {
                    ck.save(path)?;
                }
                best = Some((map, ck));
                best_iteration = it;
            }
        } else if it % 50 == 0 {
            log::debug!("step {it}: {}", row.losses);
        }
        if let Some((path, w)) = writer.as_mut() {
            writeln!(w, "{}", row.csv_row()).map_err(|e| WsrpnError::io(path.as_path(), e))?;
        }
        log_rows.push(row);
        if eval_now
            && best.is_some()
            && it - best_iteration >= cfg.patience
            && it < cfg.max_iterations
        {
            log::info!("early stop at step {it}: no improvement since step {best_iteration}");
            stopped_early = true;
            break;
        }
    }
    if let Some((path, w)) = writer.as_mut() {
        w.flush().map_err(|e| WsrpnError::io(path.as_path(), e))?;
    }
    let best = match best {
        Some((_, ck)) => ck,
        None => {
            let ck = snapshot(&model, &opt, it, None);
            if let Some(path) = &opts.checkpoint_path {
                ck.save(path)?;
            }
            best_iteration = it;
            ck
        }
    };
    Ok(TrainOutcome {
        best,
        best_iteration,
        iterations_run: it,
        stopped_early,
        log: log_rows,
    })
}
