//! Fully supervised reference detector: the patch encoder followed by an MLP
//! that regresses one box and a presence logit per class from the flattened
//! grid. Trained with box targets to check that a dataset is learnable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wsrpn_autodiff::{Float, Graph, Tensor, Var};

use crate::config::{ModelConfig, TrainConfig};
use crate::data::{paired_batch, Dataset, NormStats, Split};
use crate::error::{Result, WsrpnError};
use crate::metrics::{evaluate_detections, BBox, Detection, MetricsReport};
use crate::nn::Mlp;
use crate::optim::{clip_grad_norm, AdamW};
use crate::params::{Bound, ParamStore};
use crate::patch::PatchEncoder;
use crate::trainer::{adamw_config, collect_grads, BatchSampler};

#[derive(Debug, Clone)]
pub struct SupervisedDetector<F> {
    pub num_classes: usize,
    pub params: ParamStore<F>,
    pub norm: NormStats,
    encoder: PatchEncoder,
    head: Mlp,
}

/// Per-image presence probabilities `[N, C]` and boxes `[N, C, 4]` as `(cx, cy, w, h)`.
struct Heads {
    logits: Var,
    boxes: Var,
}

impl<F: Float> SupervisedDetector<F> {
    pub fn new(
        config: &ModelConfig,
        num_classes: usize,
        norm: NormStats,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = PatchEncoder::new(&mut params, &mut rng, config);
        let flat = encoder.grid() * encoder.grid() * config.dim;
        let head = Mlp::new(
            &mut params,
            &mut rng,
            "supervised_head",
            (flat, config.classifier_hidden, num_classes * 5),
        );
        Ok(Self {
            num_classes,
            params,
            norm,
            encoder,
            head,
        })
    }

    fn heads(&self, g: &mut Graph<F>, p: &Bound, images: Var) -> Result<Heads> {
        let n = g.shape(images)[0];
        let c = self.num_classes;
        let feats = self.encoder.encode(g, p, images)?;
        let flat = g.reshape(feats, &[n, g.shape(feats)[1] * g.shape(feats)[2]])?;
        let out = self.head.forward(g, p, flat)?;
        let out = g.reshape(out, &[n, c, 5])?;
        let logits = g.narrow(out, 2, 0, 1)?;
        let logits = g.reshape(logits, &[n, c])?;
        let raw = g.narrow(out, 2, 1, 4)?;
        Ok(Heads {
            logits,
            boxes: g.sigmoid(raw),
        })
    }

    /// Top-scoring box per class for each image.
    pub fn detect(&self, images: Tensor<F>) -> Result<Vec<Vec<Detection>>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images);
        let h = self.heads(&mut g, &p, x)?;
        let probs = g.sigmoid(h.logits);
        let probs = g.value(probs).to_f64_vec();
        let boxes = g.value(h.boxes).to_f64_vec();
        let c = self.num_classes;
        Ok(probs
            .chunks(c)
            .enumerate()
            .map(|(i, ps)| {
                ps.iter()
                    .enumerate()
                    .map(|(k, &score)| {
                        let b = &boxes[(i * c + k) * 4..(i * c + k + 1) * 4];
                        Detection {
                            class: k,
                            score,
                            bbox: BBox::new(b[0], b[1], b[2], b[3]).clip_unit(),
                            token: 0,
                        }
                    })
                    .collect()
            })
            .collect())
    }

    pub fn evaluate(
        &self,
        dataset: &Dataset,
        indices: &[usize],
        thresholds: &[f64],
    ) -> Result<MetricsReport> {
        let mut dets = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(64) {
            let b = crate::data::eval_batch::<F>(dataset, chunk, self.norm);
            dets.extend(self.detect(b.images)?);
        }
        evaluate_detections(
            &dets,
            &dataset.ground_truth(indices),
            &dataset.class_names,
            thresholds,
        )
    }
}

/// Presence BCE plus L1 box regression on classes present in the image.
fn supervised_loss<F: Float>(
    g: &mut Graph<F>,
    h: &Heads,
    labels: &[Vec<bool>],
    boxes: &[Vec<Option<BBox>>],
) -> Result<Var> {
    let n = labels.len();
    let c = labels[0].len();
    let y: Vec<f64> = labels
        .iter()
        .flatten()
        .map(|&l| if l { 1.0 } else { 0.0 })
        .collect();
    let yv = g.constant(Tensor::from_f64(&[n, c], &y)?);
    let p = g.sigmoid(h.logits);
    let p = g.clamp(p, F::from_f64(1e-7), F::from_f64(1.0 - 1e-7));
    let lp = g.log(p);
    let q = g.one_minus(p);
    let lq = g.log(q);
    let ny = g.one_minus(yv);
    let a = g.mul(yv, lp)?;
    let b = g.mul(ny, lq)?;
    let ll = g.add(a, b)?;
    let ll = g.mean(ll);
    let bce = g.neg(ll);

    let mut target = vec![0.0; n * c * 4];
    let mut mask = vec![0.0; n * c * 4];
    let mut count = 0usize;
    for (i, row) in boxes.iter().enumerate() {
        for (k, bb) in row.iter().enumerate() {
            if let Some(bb) = bb {
                let o = (i * c + k) * 4;
                target[o..o + 4].copy_from_slice(&[bb.cx, bb.cy, bb.w, bb.h]);
                mask[o..o + 4].fill(1.0);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(bce);
    }
    let t = g.constant(Tensor::from_f64(&[n, c, 4], &target)?);
    let m = g.constant(Tensor::from_f64(&[n, c, 4], &mask)?);
    let d = g.sub(h.boxes, t)?;
    let d = g.abs(d);
    let d = g.mul(d, m)?;
    let l1 = g.sum(d);
    let l1 = g.scale(l1, F::from_f64(1.0 / count as f64));
    Ok(g.add(bce, l1)?)
}

/// Trains on `split.train`, whose samples must keep their boxes.
pub fn train_supervised<F: Float>(
    cfg: &TrainConfig,
    dataset: &Dataset,
    split: &Split,
) -> Result<SupervisedDetector<F>> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(WsrpnError::Empty("training split"));
    }
    let norm = NormStats::compute(dataset, &split.train);
    let c = dataset.num_classes();
    let mut model = SupervisedDetector::<F>::new(&cfg.model, c, norm, cfg.seed)?;
    let mut opt = AdamW::new(adamw_config(cfg), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut sampler = BatchSampler::new(&split.train, cfg.batch_size);
    for it in 1..=cfg.max_iterations {
        let idx = sampler.next(&mut rng);
        let batch = paired_batch::<F>(dataset, &idx, norm, cfg.augment, &mut rng);
        let mut boxes: Vec<Vec<Option<BBox>>> = idx
            .iter()
            .map(|&i| {
                let mut row = vec![None; c];
                for b in &dataset.samples[i].boxes {
                    row[b.class] = Some(b.bbox);
                }
                row
            })
            .collect();
        boxes.extend(boxes.clone());
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let x = g.constant(batch.images);
        let h = model.heads(&mut g, &p, x)?;
        let loss = supervised_loss(&mut g, &h, &batch.labels, &boxes)?;
        let value = g.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(WsrpnError::Data(format!(
                "supervised loss became {value} at step {it}"
            )));
        }
        let mut grads = collect_grads(&mut g, loss, p.vars(), model.params.tensors())?;
        clip_grad_norm(&mut grads, cfg.clip_norm);
        opt.step(&mut model.params, &grads);
        if it % 250 == 0 {
            log::info!("supervised step {it}: loss {value:.4}");
        }
    }
    Ok(model)
}
