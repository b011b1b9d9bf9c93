//! Detections from ROI outputs, top1-per-class postprocessing and detection
//! metrics (IoU, AP, localization accuracy, confusion counts).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WsrpnError};
use crate::model::Prediction;

/// Axis-aligned box in relative coordinates, `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        let (x0, y0, x1, y1) = self.corners();
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }

    pub fn clip_unit(&self) -> Self {
        let (x0, y0, x1, y1) = self.corners();
        Self::from_corners(
            x0.clamp(0.0, 1.0),
            y0.clamp(0.0, 1.0),
            x1.clamp(0.0, 1.0),
            y1.clamp(0.0, 1.0),
        )
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
    /// Index of the ROI token that produced it.
    pub token: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub class: usize,
    pub bbox: BBox,
}

/// One detection per token: center `μ`, extent `2γσ`, class `argmax_{c∈C} p_c`.
pub fn extract_detections(pred: &Prediction, gamma: f64) -> Vec<Detection> {
    pred.mu
        .iter()
        .zip(&pred.sigma)
        .zip(&pred.roi_probs)
        .enumerate()
        .map(|(token, ((mu, sigma), probs))| {
            let classes = &probs[..probs.len() - 1];
            let (class, score) =
                classes
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, p)| {
                        if p > best.1 {
                            (c, p)
                        } else {
                            best
                        }
                    });
            let bbox =
                BBox::new(mu[0], mu[1], 2.0 * gamma * sigma[0], 2.0 * gamma * sigma[1]).clip_unit();
            Detection {
                class,
                score,
                bbox,
                token,
            }
        })
        .collect()
}

/// Keeps the best-scoring detection of every class; ties go to the lower token.
pub fn top1_per_class(dets: &[Detection]) -> Vec<Detection> {
    let mut best: Vec<Detection> = Vec::new();
    for d in dets {
        match best.iter_mut().find(|b| b.class == d.class) {
            Some(b) => {
                if d.score > b.score || (d.score == b.score && d.token < b.token) {
                    *b = *d;
                }
            }
            None => best.push(*d),
        }
    }
    best.sort_by_key(|d| d.class);
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

/// Score-sorted detections of one class as `(image, det)` with deterministic tie order.
fn sorted_class_dets(dets: &[Vec<Detection>], class: usize) -> Vec<(usize, Detection)> {
    let mut v: Vec<(usize, Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|d| d.class == class).map(move |d| (i, *d)))
        .collect();
    v.sort_by(|a, b| {
        b.1.score
            .total_cmp(&a.1.score)
            .then(a.0.cmp(&b.0))
            .then(a.1.token.cmp(&b.1.token))
    });
    v
}

/// True-positive flags of `sorted` after greedy matching to the highest-IoU
/// unmatched same-class ground truth at `IoU >= threshold`.
fn match_sorted(
    sorted: &[(usize, Detection)],
    gts: &[Vec<GroundTruthBox>],
    class: usize,
    threshold: f64,
) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    sorted
        .iter()
        .map(|(img, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[*img].iter().enumerate() {
                if g.class != class || used[*img][j] {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                used[*img][j] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// All-point interpolated AP per class and their mean over classes with ground truth.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthBox>],
    num_classes: usize,
    threshold: f64,
) -> Result<ApReport> {
    if dets.len() != gts.len() {
        return Err(WsrpnError::Config(format!(
            "{} detection lists for {} ground-truth lists",
            dets.len(),
            gts.len()
        )));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let n_gt = gts.iter().flatten().filter(|g| g.class == c).count();
        if n_gt == 0 {
            per_class.push(None);
            continue;
        }
        let sorted = sorted_class_dets(dets, c);
        let tp = match_sorted(&sorted, gts, c, threshold);
        let mut precision = Vec::with_capacity(tp.len());
        let mut recall = Vec::with_capacity(tp.len());
        let mut hits = 0usize;
        for (i, &t) in tp.iter().enumerate() {
            hits += t as usize;
            precision.push(hits as f64 / (i + 1) as f64);
            recall.push(hits as f64 / n_gt as f64);
        }
        for i in (0..precision.len().saturating_sub(1)).rev() {
            precision[i] = precision[i].max(precision[i + 1]);
        }
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for (p, r) in precision.iter().zip(&recall) {
            ap += (r - prev_r) * p;
            prev_r = *r;
        }
        per_class.push(Some(ap));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(WsrpnError::Undefined(
            "average precision needs at least one ground-truth box",
        ));
    }
    let map = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(ApReport { per_class, map })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocAccuracy {
    pub accuracy: f64,
    pub hits: usize,
    pub num_gt: usize,
    pub unmatched_detections: usize,
}

/// `hits / (num_gt + unmatched detections)`, where a hit is a ground-truth box
/// matched 1-to-1 (greedily by score) by a same-class detection at
/// `IoU >= threshold`. Returns 1 when there is neither ground truth nor a detection.
pub fn loc_accuracy(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthBox>],
    threshold: f64,
) -> LocAccuracy {
    let (mut hits, mut num_gt, mut unmatched) = (0, 0, 0);
    for (ds, gs) in dets.iter().zip(gts) {
        num_gt += gs.len();
        let mut order: Vec<&Detection> = ds.iter().collect();
        order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.token.cmp(&b.token)));
        let mut used = vec![false; gs.len()];
        for d in order {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gs.iter().enumerate() {
                if used[j] || g.class != d.class {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    hits += 1;
                }
                None => unmatched += 1,
            }
        }
    }
    let denom = num_gt + unmatched;
    LocAccuracy {
        accuracy: if denom == 0 {
            1.0
        } else {
            hits as f64 / denom as f64
        },
        hits,
        num_gt,
        unmatched_detections: unmatched,
    }
}

/// `(C+1) x (C+1)` counts from class-agnostic 1-to-1 matching at `IoU >= threshold`,
/// pairs taken in descending IoU. Rows are ground-truth classes, columns predicted
/// classes; index `C` is "none" (missed ground truth / unmatched detection).
pub fn confusion_matrix(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthBox>],
    num_classes: usize,
    threshold: f64,
) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; num_classes + 1]; num_classes + 1];
    for (ds, gs) in dets.iter().zip(gts) {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (i, d) in ds.iter().enumerate() {
            for (j, g) in gs.iter().enumerate() {
                let o = iou(&d.bbox, &g.bbox);
                if o >= threshold {
                    pairs.push((o, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut det_used = vec![false; ds.len()];
        let mut gt_used = vec![false; gs.len()];
        for (_, i, j) in pairs {
            if det_used[i] || gt_used[j] {
                continue;
            }
            det_used[i] = true;
            gt_used[j] = true;
            m[gs[j].class][ds[i].class] += 1;
        }
        for (j, g) in gs.iter().enumerate() {
            if !gt_used[j] {
                m[g.class][num_classes] += 1;
            }
        }
        for (i, d) in ds.iter().enumerate() {
            if !det_used[i] {
                m[num_classes][d.class] += 1;
            }
        }
    }
    m
}

pub const LOC_ACC_VARIANT: &str = "loc-acc = hits / (ground-truth boxes + unmatched detections); a hit is a ground-truth box matched 1-to-1 by a same-class detection (greedy by score) at IoU >= threshold";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub iou_threshold: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub loc_acc: LocAccuracy,
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub loc_acc_variant: String,
    pub class_names: Vec<String>,
    pub num_images: usize,
    pub boxes_per_image: f64,
    pub thresholds: Vec<ThresholdMetrics>,
}

impl MetricsReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|t| (t.iou_threshold - threshold).abs() < 1e-12)
            .map(|t| t.map)
    }
}

/// Scores postprocessed detections at each threshold.
pub fn evaluate_detections(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthBox>],
    class_names: &[String],
    thresholds: &[f64],
) -> Result<MetricsReport> {
    let c = class_names.len();
    let thresholds = thresholds
        .iter()
        .map(|&t| {
            let ap = average_precision(dets, gts, c, t)?;
            Ok(ThresholdMetrics {
                iou_threshold: t,
                per_class_ap: ap.per_class,
                map: ap.map,
                loc_acc: loc_accuracy(dets, gts, t),
                confusion: confusion_matrix(dets, gts, c, t),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total: usize = dets.iter().map(Vec::len).sum();
    Ok(MetricsReport {
        loc_acc_variant: LOC_ACC_VARIANT.to_string(),
        class_names: class_names.to_vec(),
        num_images: dets.len(),
        boxes_per_image: if dets.is_empty() {
            0.0
        } else {
            total as f64 / dets.len() as f64
        },
        thresholds,
    })
}

/// CSV with `image_id,class,score,cx,cy,w,h` at 6 decimals.
pub fn write_detections_csv(
    path: &Path,
    image_ids: &[String],
    dets: &[Vec<Detection>],
    class_names: &[String],
) -> Result<()> {
    let mut out = String::from("image_id,class,score,cx,cy,w,h\n");
    for (id, ds) in image_ids.iter().zip(dets) {
        for d in ds {
            out.push_str(&format!(
                "{id},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                class_names[d.class], d.score, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h
            ));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| WsrpnError::io(path, e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| WsrpnError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class: usize, score: f64, b: BBox, token: usize) -> Detection {
        Detection {
            class,
            score,
            bbox: b,
            token,
        }
    }

    fn prediction(mu: [f64; 2], sigma: [f64; 2], probs: Vec<f64>) -> Prediction {
        Prediction {
            mu: vec![mu],
            sigma: vec![sigma],
            roi_probs: vec![probs],
            fields: vec![],
            patch_probs: vec![],
            patch_image: vec![],
            roi_image: vec![],
        }
    }

    #[test]
    fn detection_box_from_sigma() {
        let p = prediction([0.5, 0.5], [0.1, 0.2], vec![0.1, 0.6, 0.9]);
        let d = extract_detections(&p, 2.0);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].class, 1);
        assert_eq!(d[0].score, 0.6);
        let b = d[0].bbox;
        assert!((b.cx - 0.5).abs() < 1e-15 && (b.cy - 0.5).abs() < 1e-15);
        assert!((b.w - 0.4).abs() < 1e-15 && (b.h - 0.8).abs() < 1e-15);
    }

    #[test]
    fn detection_boxes_are_clipped() {
        let p = prediction([0.05, 0.9], [0.1, 0.1], vec![0.3, 0.2]);
        let b = extract_detections(&p, 2.0)[0].bbox;
        let (x0, y0, x1, y1) = b.corners();
        assert!((x0 - 0.0).abs() < 1e-15 && (x1 - 0.25).abs() < 1e-12);
        assert!((y0 - 0.7).abs() < 1e-12 && (y1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn top1_keeps_best_and_breaks_ties_by_token() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        let d = vec![
            det(0, 0.4, b, 0),
            det(0, 0.9, b, 1),
            det(1, 0.5, b, 2),
            det(1, 0.5, b, 3),
        ];
        let t = top1_per_class(&d);
        assert_eq!(t.len(), 2);
        assert_eq!((t[0].score, t[0].token), (0.9, 1));
        assert_eq!(t[1].token, 2);
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(0.9, 0.9, 0.1, 0.1)), 0.0);
        let b = BBox::new(0.6, 0.5, 0.2, 0.2);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let g = vec![
            vec![GroundTruthBox {
                class: 0,
                bbox: BBox::new(0.3, 0.3, 0.2, 0.2),
            }],
            vec![GroundTruthBox {
                class: 1,
                bbox: BBox::new(0.6, 0.6, 0.3, 0.2),
            }],
        ];
        let perfect: Vec<Vec<Detection>> = g
            .iter()
            .map(|gs| gs.iter().map(|x| det(x.class, 0.8, x.bbox, 0)).collect())
            .collect();
        let ap = average_precision(&perfect, &g, 2, 0.5).unwrap();
        assert_eq!(ap.per_class, vec![Some(1.0), Some(1.0)]);
        assert_eq!(loc_accuracy(&perfect, &g, 0.5).accuracy, 1.0);
        let none = vec![vec![], vec![]];
        assert_eq!(average_precision(&none, &g, 2, 0.5).unwrap().map, 0.0);
        assert_eq!(loc_accuracy(&none, &g, 0.5).accuracy, 0.0);
        assert!(matches!(
            average_precision(&none, &[vec![], vec![]], 2, 0.5),
            Err(WsrpnError::Undefined(_))
        ));
    }

    #[test]
    fn confusion_diagonal_counts_correct_pairs() {
        let b1 = BBox::new(0.3, 0.3, 0.2, 0.2);
        let b2 = BBox::new(0.7, 0.7, 0.2, 0.2);
        let g = vec![vec![
            GroundTruthBox { class: 0, bbox: b1 },
            GroundTruthBox { class: 1, bbox: b2 },
        ]];
        let d = vec![vec![
            det(0, 0.9, b1, 0),
            det(0, 0.8, b2, 1),
            det(1, 0.3, BBox::new(0.1, 0.9, 0.05, 0.05), 2),
        ]];
        let m = confusion_matrix(&d, &g, 2, 0.5);
        assert_eq!(m, vec![vec![1, 0, 0], vec![1, 0, 0], vec![0, 1, 0]]);
        let la = loc_accuracy(&d, &g, 0.5);
        assert_eq!((la.hits, la.num_gt, la.unmatched_detections), (1, 2, 2));
        assert!((la.accuracy - 0.25).abs() < 1e-15);
    }
}
