//! Patch branch: CNN patch encoder, no-finding gated patch classification and
//! LSE aggregation to image-level probabilities.
//!
//! Channel layout of every class-probability tensor is `[c_0, .., c_{C-1}, ∅]`,
//! i.e. the no-finding channel is last.

use rand_chacha::ChaCha8Rng;
use wsrpn_autodiff::{Float, Graph, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Result, WsrpnError};
use crate::nn::{Conv2d, Linear};
use crate::params::{Bound, ParamStore};

/// Fixed 2D sinusoidal encoding, `[H*W, d]` in row-major patch order.
///
/// The first `d/2` channels encode the row index `m`, the rest the column
/// index `n`; within each half channel `2i` is `sin(pos * w_i)` and `2i+1` is
/// `cos(pos * w_i)` with `w_i = 10000^(-2i / (d/2))`.
pub fn position_encoding<F: Float>(h: usize, w: usize, d: usize) -> Tensor<F> {
    assert!(d % 4 == 0, "position encoding needs d divisible by 4");
    let half = d / 2;
    Tensor::from_fn(&[h * w, d], |idx| {
        let (patch, ch) = (idx / d, idx % d);
        let (m, n) = (patch / w, patch % w);
        let (pos, c) = if ch < half { (m, ch) } else { (n, ch - half) };
        let i = c / 2;
        let freq = 10000f64.powf(-(2.0 * i as f64) / half as f64);
        let angle = pos as f64 * freq;
        F::from_f64(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[derive(Debug, Clone)]
pub struct PatchEncoder {
    stages: Vec<Conv2d>,
    final_pool: usize,
    proj: Linear,
    image_size: usize,
    grid: usize,
    dim: usize,
}

impl PatchEncoder {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
    ) -> Self {
        let mut in_ch = 1;
        let stages = cfg
            .backbone
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let conv = Conv2d::new(
                    store,
                    rng,
                    &format!("backbone.stage{i}"),
                    s.kernel,
                    in_ch,
                    s.channels,
                    s.stride,
                    s.padding(),
                );
                in_ch = s.channels;
                conv
            })
            .collect();
        let proj = Linear::new(store, rng, "patch_proj", in_ch, cfg.dim);
        Self {
            stages,
            final_pool: cfg.backbone.final_pool.max(1),
            proj,
            image_size: cfg.image_size,
            grid: cfg.grid_side(),
            dim: cfg.dim,
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    /// Backbone output before projection, `[N, H, W, C_b]`.
    pub fn backbone<F: Float>(&self, g: &mut Graph<F>, p: &Bound, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        let stride = self.image_size / self.grid;
        if s.len() != 4
            || s[1] != s[2]
            || s[3] != 1
            || s[1] % stride != 0
            || s[1] != self.image_size
        {
            return Err(WsrpnError::ImageSide {
                side: *s.get(1).unwrap_or(&0),
                stride,
            });
        }
        let mut x = images;
        for conv in &self.stages {
            x = conv.forward(g, p, x)?;
            x = g.relu(x);
        }
        if self.final_pool > 1 {
            x = g.avg_pool2d(x, self.final_pool)?;
        }
        Ok(x)
    }

    /// Normalized images `[N, S, S, 1]` -> patch embeddings `[N, H*W, d]` with
    /// position encodings added after the projection.
    pub fn encode<F: Float>(&self, g: &mut Graph<F>, p: &Bound, images: Var) -> Result<Var> {
        let feats = self.backbone(g, p, images)?;
        let s = g.shape(feats).to_vec();
        let flat = g.reshape(feats, &[s[0], s[1] * s[2], s[3]])?;
        let proj = self.proj.forward(g, p, flat)?;
        let pos = g.constant(position_encoding(self.grid, self.grid, self.dim));
        Ok(g.add(proj, pos)?)
    }
}

/// Gated probabilities from logits `[..., C+1]`:
/// `p_∅ = σ(l_∅)`, `p_c = (1 - p_∅) σ(l_c)`.
pub fn classify_with_nofinding<F: Float>(g: &mut Graph<F>, logits: Var) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let axis = shape
        .len()
        .checked_sub(1)
        .ok_or(WsrpnError::Empty("logits"))?;
    let width = shape[axis];
    if width < 2 {
        return Err(WsrpnError::Config(format!(
            "classifier output width {width} leaves no room for classes plus no-finding"
        )));
    }
    let nf_logit = g.narrow(logits, axis, width - 1, 1)?;
    let cls_logit = g.narrow(logits, axis, 0, width - 1)?;
    let p_nf = g.sigmoid(nf_logit);
    let gate = g.one_minus(p_nf);
    let s = g.sigmoid(cls_logit);
    let p_cls = g.mul(s, gate)?;
    Ok(g.concat(&[p_cls, p_nf], axis)?)
}

/// `(1/r) log( mean_u exp(r v_u) )` along `axis`.
pub fn lse_pool<F: Float>(g: &mut Graph<F>, values: Var, axis: usize, r: f64) -> Result<Var> {
    let shape = g.shape(values).to_vec();
    let n = *shape.get(axis).ok_or(WsrpnError::Empty("lse_pool axis"))?;
    if n == 0 {
        return Err(WsrpnError::Empty("lse_pool grid"));
    }
    if !(r > 0.0) {
        return Err(WsrpnError::Config(format!(
            "lse r must be positive, got {r}"
        )));
    }
    let scaled = g.scale(values, F::from_f64(r));
    let lse = g.logsumexp_axis(scaled, axis, false)?;
    let shifted = g.add_scalar(lse, F::from_f64(-(n as f64).ln()));
    Ok(g.scale(shifted, F::from_f64(1.0 / r)))
}

/// Image-level probabilities of one branch.
#[derive(Debug, Clone, Copy)]
pub struct ImageProbs {
    /// `[N, C]`.
    pub classes: Var,
    /// "Some region is no-finding", `[N, 1]`.
    pub or_nf: Var,
    /// "The whole image is no-finding", `[N, 1]`.
    pub and_nf: Var,
}

/// LSE-pools patch probabilities `[N, HW, C+1]` over the patch axis.
pub fn aggregate_patch_image_probs<F: Float>(
    g: &mut Graph<F>,
    probs: Var,
    r: f64,
) -> Result<ImageProbs> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 3 || shape[2] < 2 {
        return Err(WsrpnError::Config(format!(
            "patch probabilities must be [N, HW, C+1], got {shape:?}"
        )));
    }
    let c = shape[2] - 1;
    let cls = g.narrow(probs, 2, 0, c)?;
    let nf = g.narrow(probs, 2, c, 1)?;
    let classes = lse_pool(g, cls, 1, r)?;
    let or_nf = lse_pool(g, nf, 1, r)?;
    let inv = g.one_minus(nf);
    let inv_pooled = lse_pool(g, inv, 1, r)?;
    let and_nf = g.one_minus(inv_pooled);
    Ok(ImageProbs {
        classes,
        or_nf,
        and_nf,
    })
}
