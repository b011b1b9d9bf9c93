//! Training objective: per-branch BCE and supervised contrastive losses plus
//! the ROI-to-patch KL consistency term.

use std::fmt;

use serde::{Deserialize, Serialize};
use wsrpn_autodiff::{Float, Graph, Tensor, Var, CLAMP_EPS};

use crate::config::{LossConfig, NoFindingTerms, SelfPairing};
use crate::error::{Result, WsrpnError};
use crate::model::{Forward, Wsrpn};
use crate::nn::Mlp;
use crate::params::Bound;
use crate::patch::ImageProbs;
use crate::roi::{noisy_pool, NoisyMode};

/// Negative logits added to masked contrastive pairs; `exp` of this underflows to 0.
const MASKED_LOGIT: f64 = -1e4;

/// `y_∧∅ = 1 - max_c y_c`.
pub fn and_nofinding_label(labels: &[bool]) -> bool {
    !labels.iter().any(|&y| y)
}

/// Per-component scalar values of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub patch_bce: f64,
    pub patch_supcon: f64,
    pub roi_bce: f64,
    pub roi_supcon: f64,
    pub consistency: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "L_total,L^P_bce,L^P_supcon,L^R_bce,L^R_supcon,L^{P<->R}";

    pub fn components(&self) -> [f64; 5] {
        [
            self.patch_bce,
            self.patch_supcon,
            self.roi_bce,
            self.roi_supcon,
            self.consistency,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components().iter().all(|v| v.is_finite())
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!("{:.8e}", self.total);
        for v in self.components() {
            s.push_str(&format!(",{v:.8e}"));
        }
        s
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={:.6} patch_bce={:.6} patch_supcon={:.6} roi_bce={:.6} roi_supcon={:.6} consistency={:.6}",
            self.total, self.patch_bce, self.patch_supcon, self.roi_bce, self.roi_supcon, self.consistency
        )
    }
}

fn clamp_prob<F: Float>(g: &mut Graph<F>, p: Var) -> Var {
    g.clamp(p, F::from_f64(CLAMP_EPS), F::from_f64(1.0 - CLAMP_EPS))
}

/// Weighted multilabel BCE over `C` plus the enabled no-finding aggregates,
/// averaged over the batch.
///
/// `weights`, when given, covers `[c_0, .., c_{C-1}, ∧∅, ∨∅]`; entries of
/// disabled no-finding terms are ignored.
pub fn bce_loss<F: Float>(
    g: &mut Graph<F>,
    probs: &ImageProbs,
    labels: &[Vec<bool>],
    terms: NoFindingTerms,
    weights: Option<&[f64]>,
) -> Result<Var> {
    let n = labels.len();
    let shape = g.shape(probs.classes).to_vec();
    if n == 0 {
        return Err(WsrpnError::Empty("label batch"));
    }
    let c = shape[1];
    if shape[0] != n || labels.iter().any(|l| l.len() != c) {
        return Err(WsrpnError::Config(format!(
            "labels ({n} x {:?}) do not match probabilities {shape:?}",
            labels.first().map(Vec::len)
        )));
    }
    if let Some(w) = weights {
        if w.len() != c + 2 {
            return Err(WsrpnError::Config(format!(
                "class_weights needs {} entries (classes, AND, OR), got {}",
                c + 2,
                w.len()
            )));
        }
    }
    let w_at = |i: usize| weights.map_or(1.0, |w| w[i]);
    let mut cols = vec![probs.classes];
    let mut w: Vec<f64> = (0..c).map(w_at).collect();
    if terms.and() {
        cols.push(probs.and_nf);
        w.push(w_at(c));
    }
    if terms.or() {
        cols.push(probs.or_nf);
        w.push(w_at(c + 1));
    }
    let width = w.len();
    let mut y = Vec::with_capacity(n * width);
    for l in labels {
        y.extend(l.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        if terms.and() {
            y.push(if and_nofinding_label(l) { 1.0 } else { 0.0 });
        }
        if terms.or() {
            y.push(1.0);
        }
    }
    let wsum: f64 = w.iter().sum();
    if !(wsum > 0.0) {
        return Err(WsrpnError::Config(
            "BCE weights must have a positive sum".into(),
        ));
    }
    let p = g.concat(&cols, 1)?;
    let p = clamp_prob(g, p);
    let logp = g.log(p);
    let q = g.one_minus(p);
    let logq = g.log(q);
    let yt = g.constant(Tensor::from_f64(&[n, width], &y)?);
    let ny: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let nyt = g.constant(Tensor::from_f64(&[n, width], &ny)?);
    let a = g.mul(yt, logp)?;
    let b = g.mul(nyt, logq)?;
    let ll = g.add(a, b)?;
    let wt = g.constant(Tensor::from_f64(&[width], &w)?);
    let weighted = g.mul(ll, wt)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, F::from_f64(-1.0 / (wsum * n as f64))))
}

/// Class-probability weighted feature sums, projected by `projection`.
///
/// `features`: `[N, U, d]`, `probs`: `[N, U, C+1]` (no-finding ignored).
/// Returns `[N, C, d]`.
pub fn per_class_features<F: Float>(
    g: &mut Graph<F>,
    p: &Bound,
    features: Var,
    probs: Var,
    projection: &Mlp,
) -> Result<Var> {
    let pooled = pooled_class_features(g, features, probs)?;
    projection.forward(g, p, pooled)
}

/// Pre-projection part of [`per_class_features`]; all-zero class columns use
/// uniform weights.
pub fn pooled_class_features<F: Float>(g: &mut Graph<F>, features: Var, probs: Var) -> Result<Var> {
    let s = g.shape(probs).to_vec();
    if s.len() != 3 || s[2] < 2 {
        return Err(WsrpnError::Config(format!(
            "class probabilities must be [N, U, C+1], got {s:?}"
        )));
    }
    let cls = g.narrow(probs, 2, 0, s[2] - 1)?;
    let w = g.normalize_sum(cls, 1)?;
    Ok(g.bmm(w, features, true, false)?)
}

/// Supervised contrastive loss over per-class features `[N, C, d]`.
///
/// For every class the positive set of sample `i` is every `j` with the same
/// label. With [`SelfPairing::Exclude`] the pair `(i, i)` is removed from both
/// the softmax denominator and the positive set, and `(i, c)` terms left
/// without positives are skipped.
pub fn supcon_loss<F: Float>(
    g: &mut Graph<F>,
    features: Var,
    labels: &[Vec<bool>],
    temperature: f64,
    pairing: SelfPairing,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(WsrpnError::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let s = g.shape(features).to_vec();
    let n = labels.len();
    if n < 2 {
        return Err(WsrpnError::BatchTooSmall(n));
    }
    if s.len() != 3 || s[0] != n || labels.iter().any(|l| l.len() != s[1]) {
        return Err(WsrpnError::Config(format!(
            "per-class features {s:?} do not match {n} label rows"
        )));
    }
    let (c, d) = (s[1], s[2]);
    let z = g.permute(features, &[1, 0, 2])?;
    let z = g.l2_normalize(z)?;
    debug_assert_eq!(g.shape(z), &[c, n, d]);
    let sims = g.bmm(z, z, false, true)?;
    let sims = g.scale(sims, F::from_f64(1.0 / temperature));
    let exclude = pairing == SelfPairing::Exclude;
    let logits = if exclude {
        let mask = Tensor::from_fn(&[c, n, n], |idx| {
            let (i, j) = ((idx / n) % n, idx % n);
            F::from_f64(if i == j { MASKED_LOGIT } else { 0.0 })
        });
        let m = g.constant(mask);
        g.add(sims, m)?
    } else {
        sims
    };
    let logp = g.log_softmax(logits)?;
    let mut pos = vec![0.0; c * n * n];
    for cl in 0..c {
        for i in 0..n {
            let members: Vec<usize> = (0..n)
                .filter(|&j| labels[j][cl] == labels[i][cl] && !(exclude && j == i))
                .collect();
            if members.is_empty() {
                continue;
            }
            let w = 1.0 / members.len() as f64;
            for j in members {
                pos[(cl * n + i) * n + j] = w;
            }
        }
    }
    let pt = g.constant(Tensor::from_f64(&[c, n, n], &pos)?);
    let picked = g.mul(logp, pt)?;
    let total = g.sum(picked);
    Ok(g.scale(total, F::from_f64(-1.0 / (n * c) as f64)))
}

/// Patch-level class map implied by the ROIs, `[N, U, C+1]`.
///
/// Classes: `1 - Π_k (1 - A_k p_k,c)`. No-finding: `Π_k (A_k p_k,∅ + 1 - A_k)`.
pub fn roi_to_patch_class_map<F: Float>(
    g: &mut Graph<F>,
    fields: Var,
    roi_probs: Var,
) -> Result<Var> {
    let sa = g.shape(fields).to_vec();
    let sp = g.shape(roi_probs).to_vec();
    if sa.len() != 3 || sp.len() != 3 || sa[0] != sp[0] || sa[1] != sp[1] || sp[2] < 2 {
        return Err(WsrpnError::Config(format!(
            "class map needs [N,K,U] fields and [N,K,C+1] probabilities, got {sa:?} and {sp:?}"
        )));
    }
    let (n, k, u, c1) = (sa[0], sa[1], sa[2], sp[2]);
    let a = g.reshape(fields, &[n, k, u, 1])?;
    let cls = g.narrow(roi_probs, 2, 0, c1 - 1)?;
    let cls = g.reshape(cls, &[n, k, 1, c1 - 1])?;
    let weighted = g.mul(a, cls)?;
    let cls_map = noisy_pool(g, weighted, 1, NoisyMode::Or)?;
    let nf = g.narrow(roi_probs, 2, c1 - 1, 1)?;
    let nf = g.reshape(nf, &[n, k, 1, 1])?;
    let not_nf = g.one_minus(nf);
    let att = g.mul(a, not_nf)?;
    let factors = g.one_minus(att);
    let nf_map = noisy_pool(g, factors, 1, NoisyMode::And)?;
    Ok(g.concat(&[cls_map, nf_map], 2)?)
}

/// Bernoulli KL `p log(p/q) + (1-p) log((1-p)/(1-q))` summed over channels and
/// averaged over patches and batch; inputs `[N, U, C+1]`.
pub fn consistency_loss<F: Float>(g: &mut Graph<F>, p: Var, q: Var) -> Result<Var> {
    let s = g.shape(p).to_vec();
    if s.len() != 3 || g.shape(q) != s.as_slice() {
        return Err(WsrpnError::Config(format!(
            "consistency maps must share a [N, U, C+1] shape, got {s:?} and {:?}",
            g.shape(q)
        )));
    }
    let p = clamp_prob(g, p);
    let q = clamp_prob(g, q);
    let np = g.one_minus(p);
    let nq = g.one_minus(q);
    let lp = g.log(p);
    let lq = g.log(q);
    let lnp = g.log(np);
    let lnq = g.log(nq);
    let d1 = g.sub(lp, lq)?;
    let d2 = g.sub(lnp, lnq)?;
    let t1 = g.mul(p, d1)?;
    let t2 = g.mul(np, d2)?;
    let kl = g.add(t1, t2)?;
    let total = g.sum(kl);
    Ok(g.scale(total, F::from_f64(1.0 / (s[0] * s[1]) as f64)))
}

/// Graph handles of the enabled loss components.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub patch_bce: Option<Var>,
    pub patch_supcon: Option<Var>,
    pub roi_bce: Option<Var>,
    pub roi_supcon: Option<Var>,
    pub consistency: Option<Var>,
}

impl LossTerms {
    pub fn breakdown<F: Float>(&self, g: &Graph<F>) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).data()[0].as_f64());
        LossBreakdown {
            total: v(Some(self.total)),
            patch_bce: v(self.patch_bce),
            patch_supcon: v(self.patch_supcon),
            roi_bce: v(self.roi_bce),
            roi_supcon: v(self.roi_supcon),
            consistency: v(self.consistency),
        }
    }
}

/// Unweighted sum of the switched-on components.
pub fn total_loss<F: Float>(
    g: &mut Graph<F>,
    model: &Wsrpn<F>,
    p: &Bound,
    out: &Forward,
    labels: &[Vec<bool>],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let sw = cfg.switches;
    if sw.supcon_enabled() && labels.len() < 2 {
        return Err(WsrpnError::BatchTooSmall(labels.len()));
    }
    let weights = cfg.class_weights.as_deref();
    let patch_bce = sw
        .patch_bce
        .then(|| bce_loss(g, &out.patch_image, labels, cfg.patch_no_finding, weights))
        .transpose()?;
    let roi_bce = sw
        .roi_bce
        .then(|| bce_loss(g, &out.roi_image, labels, cfg.roi_no_finding, weights))
        .transpose()?;
    let supcon = |g: &mut Graph<F>, feats: Var, probs: Var| -> Result<Var> {
        let h = per_class_features(g, p, feats, probs, &model.projection)?;
        supcon_loss(g, h, labels, cfg.temperature, cfg.self_pairing)
    };
    let patch_supcon = if sw.patch_supcon {
        Some(supcon(g, out.patch_features, out.patch_probs)?)
    } else {
        None
    };
    let roi_supcon = if sw.roi_supcon {
        Some(supcon(g, out.roi_features, out.roi_probs)?)
    } else {
        None
    };
    let consistency = if sw.consistency {
        let q = roi_to_patch_class_map(g, out.fields, out.roi_probs)?;
        Some(consistency_loss(g, out.patch_probs, q)?)
    } else {
        None
    };
    let parts = [patch_bce, patch_supcon, roi_bce, roi_supcon, consistency];
    let mut total: Option<Var> = None;
    for v in parts.into_iter().flatten() {
        total = Some(match total {
            None => v,
            Some(t) => g.add(t, v)?,
        });
    }
    let total = total.unwrap_or_else(|| g.scalar(F::zero()));
    Ok(LossTerms {
        total,
        patch_bce,
        patch_supcon,
        roi_bce,
        roi_supcon,
        consistency,
    })
}
