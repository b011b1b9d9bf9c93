//! ROI branch: learned query tokens, cross-attention over patches, box heads,
//! generalized Gaussian receptive fields, soft ROI pooling and noisyOR/AND
//! aggregation.

use rand_chacha::ChaCha8Rng;
use wsrpn_autodiff::{Float, Graph, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Result, WsrpnError};
use crate::nn::{normal, LayerNorm, Linear, Mlp};
use crate::params::{Bound, ParamId, ParamStore};
use crate::patch::ImageProbs;

/// Receptive-field masses below this are rejected by [`soft_roi_pool`].
pub const MIN_FIELD_MASS: f64 = 1e-12;

/// Scaled dot-product attention with `heads` heads.
///
/// `q`: `[N, K, d]`, `k`, `v`: `[N, U, d]` (already projected). Returns the
/// concatenated head outputs `[N, K, d]` and the attention weights
/// `[N * heads, K, U]`.
pub fn attention<F: Float>(
    g: &mut Graph<F>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let sq = g.shape(q).to_vec();
    let sk = g.shape(k).to_vec();
    if sq.len() != 3
        || sk.len() != 3
        || sq[0] != sk[0]
        || sq[2] != sk[2]
        || g.shape(v) != sk.as_slice()
    {
        return Err(WsrpnError::Config(format!(
            "attention expects [N,K,d] queries and matching [N,U,d] keys/values, got {sq:?} and {sk:?}"
        )));
    }
    let (n, kq, d, u) = (sq[0], sq[1], sq[2], sk[1]);
    if heads == 0 || d % heads != 0 {
        return Err(WsrpnError::Config(format!(
            "dim {d} is not divisible by {heads} attention heads"
        )));
    }
    let dh = d / heads;
    let split = |g: &mut Graph<F>, x: Var, len: usize| -> Result<Var> {
        let x = g.reshape(x, &[n, len, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        Ok(g.reshape(x, &[n * heads, len, dh])?)
    };
    let qh = split(g, q, kq)?;
    let kh = split(g, k, u)?;
    let vh = split(g, v, u)?;
    let scores = g.bmm(qh, kh, false, true)?;
    let scores = g.scale(scores, F::from_f64(1.0 / (dh as f64).sqrt()));
    let weights = g.softmax(scores)?;
    let out = g.bmm(weights, vh, false, false)?;
    let out = g.reshape(out, &[n, heads, kq, dh])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    Ok((g.reshape(out, &[n, kq, d])?, weights))
}

/// Pre-normalized cross-attention sublayer: `x + W_o attn(W_q LN(x), W_k LN(y), W_v LN(y))`.
#[derive(Debug, Clone)]
struct CrossAttention {
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    fn new<F: Float>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), d),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), d),
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            // a key bias only shifts every logit of a query equally
            k: Linear::without_bias(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            out: Linear::new(store, rng, &format!("{name}.out"), d, d),
            heads,
        }
    }

    fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, x: Var, patches: Var) -> Result<Var> {
        let xn = self.norm_q.forward(g, p, x)?;
        let yn = self.norm_kv.forward(g, p, patches)?;
        let q = self.q.forward(g, p, xn)?;
        let k = self.k.forward(g, p, yn)?;
        let v = self.v.forward(g, p, yn)?;
        let (att, _) = attention(g, q, k, v, self.heads)?;
        let o = self.out.forward(g, p, att)?;
        Ok(g.add(x, o)?)
    }
}

#[derive(Debug, Clone)]
pub struct RoiBranch {
    pub tokens: ParamId,
    mha: CrossAttention,
    mlp_norm: LayerNorm,
    mlp: Mlp,
    single: CrossAttention,
    mu_head: Linear,
    sigma_head: Linear,
    num_tokens: usize,
    dim: usize,
    sigma_min: f64,
    sigma_max: f64,
    beta: f64,
    grid: usize,
}

/// Outputs of the ROI branch up to (and excluding) classification.
#[derive(Debug, Clone, Copy)]
pub struct RoiOutputs {
    /// Token features after attention, `[N, K, d]`.
    pub token_features: Var,
    /// Box centers `(x, y)`, `[N, K, 2]`.
    pub mu: Var,
    /// Box sizes `(x, y)`, `[N, K, 2]`.
    pub sigma: Var,
    /// Receptive fields, `[N, K, H*W]` (row-major patches).
    pub fields: Var,
    /// Soft-pooled ROI features, `[N, K, d]`.
    pub pooled: Var,
}

impl RoiBranch {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
    ) -> Self {
        let d = cfg.dim;
        let tokens = store.add(
            "roi_tokens",
            normal(rng, &[cfg.num_tokens, d], cfg.token_init_std),
        );
        Self {
            tokens,
            mha: CrossAttention::new(store, rng, "roi_attn.mha", d, cfg.num_heads),
            mlp_norm: LayerNorm::new(store, "roi_attn.mlp_norm", d),
            mlp: Mlp::new(store, rng, "roi_attn.mlp", (d, cfg.attn_mlp_ratio * d, d)),
            single: CrossAttention::new(store, rng, "roi_attn.single", d, 1),
            mu_head: Linear::new(store, rng, "box_head.mu", d, 2),
            sigma_head: Linear::new(store, rng, "box_head.sigma", d, 2),
            num_tokens: cfg.num_tokens,
            dim: d,
            sigma_min: cfg.sigma_min,
            sigma_max: cfg.sigma_max,
            beta: cfg.beta,
            grid: cfg.grid_side(),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    /// Tokens `[K, d]` and patches `[N, U, d]` -> token features `[N, K, d]`.
    pub fn roi_attention<F: Float>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        patches: Var,
    ) -> Result<Var> {
        let n = g.shape(patches)[0];
        let zeros = g.constant(Tensor::zeros(&[n, self.num_tokens, self.dim]));
        let x = g.add(zeros, p.var(self.tokens))?;
        let x = self.mha.forward(g, p, x, patches)?;
        let xn = self.mlp_norm.forward(g, p, x)?;
        let m = self.mlp.forward(g, p, xn)?;
        let x = g.add(x, m)?;
        self.single.forward(g, p, x, patches)
    }

    pub fn predict_boxes<F: Float>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        features: Var,
    ) -> Result<(Var, Var)> {
        predict_boxes(
            g,
            p,
            &self.mu_head,
            &self.sigma_head,
            features,
            self.sigma_min,
            self.sigma_max,
        )
    }

    pub fn forward<F: Float>(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        patches: Var,
    ) -> Result<RoiOutputs> {
        let token_features = self.roi_attention(g, p, patches)?;
        let (mu, sigma) = self.predict_boxes(g, p, token_features)?;
        let fields = receptive_field(g, mu, sigma, self.grid, self.grid, self.beta)?;
        let pooled = soft_roi_pool(g, fields, patches)?;
        Ok(RoiOutputs {
            token_features,
            mu,
            sigma,
            fields,
            pooled,
        })
    }
}

/// `μ = σ(W_μ h + b_μ)`, `σ = σ_min + (σ_max - σ_min) σ(W_σ h + b_σ)`.
pub fn predict_boxes<F: Float>(
    g: &mut Graph<F>,
    p: &Bound,
    mu_head: &Linear,
    sigma_head: &Linear,
    features: Var,
    sigma_min: f64,
    sigma_max: f64,
) -> Result<(Var, Var)> {
    let lm = mu_head.forward(g, p, features)?;
    let mu = g.sigmoid(lm);
    let ls = sigma_head.forward(g, p, features)?;
    let s = g.sigmoid(ls);
    let s = g.scale(s, F::from_f64(sigma_max - sigma_min));
    let sigma = g.add_scalar(s, F::from_f64(sigma_min));
    Ok((mu, sigma))
}

/// `exp(-½ |(t - μ) / σ|^β)` for every patch-center coordinate `t`.
fn axis_profile<F: Float>(
    g: &mut Graph<F>,
    mu: Var,
    sigma: Var,
    len: usize,
    beta: f64,
) -> Result<Var> {
    let centers = g.constant(Tensor::from_fn(&[len], |i| {
        F::from_f64((i as f64 + 0.5) / len as f64)
    }));
    let diff = g.sub(centers, mu)?;
    let z = g.div(diff, sigma)?;
    let pow = if beta == 2.0 {
        g.square(z)?
    } else {
        let a = g.abs(z);
        g.powf(a, F::from_f64(beta))?
    };
    let e = g.scale(pow, F::from_f64(-0.5));
    Ok(g.exp(e))
}

/// Generalized Gaussian fields from `μ`, `σ` (`[N, K, 2]`, `(x, y)` order) on an
/// `h x w` grid: `[N, K, h*w]` with peak value 1 at `μ`.
pub fn receptive_field<F: Float>(
    g: &mut Graph<F>,
    mu: Var,
    sigma: Var,
    h: usize,
    w: usize,
    beta: f64,
) -> Result<Var> {
    let s = g.shape(mu).to_vec();
    if s.len() != 3 || s[2] != 2 || g.shape(sigma) != s.as_slice() {
        return Err(WsrpnError::Config(format!(
            "box parameters must be [N, K, 2], got {s:?}"
        )));
    }
    if !(beta >= 1.0) {
        return Err(WsrpnError::Config(format!("beta must be >= 1, got {beta}")));
    }
    let (n, k) = (s[0], s[1]);
    let mx = g.narrow(mu, 2, 0, 1)?;
    let my = g.narrow(mu, 2, 1, 1)?;
    let sx = g.narrow(sigma, 2, 0, 1)?;
    let sy = g.narrow(sigma, 2, 1, 1)?;
    let fy = axis_profile(g, my, sy, h, beta)?;
    let fx = axis_profile(g, mx, sx, w, beta)?;
    let fy = g.reshape(fy, &[n, k, h, 1])?;
    let fx = g.reshape(fx, &[n, k, 1, w])?;
    let a = g.mul(fy, fx)?;
    Ok(g.reshape(a, &[n, k, h * w])?)
}

/// `h^R_k = Σ_u A_{k,u} h_u / Σ_u A_{k,u}` for fields `[N, K, U]` and
/// patches `[N, U, d]`.
pub fn soft_roi_pool<F: Float>(g: &mut Graph<F>, fields: Var, patches: Var) -> Result<Var> {
    let sa = g.shape(fields).to_vec();
    let sp = g.shape(patches).to_vec();
    if sa.len() != 3 || sp.len() != 3 || sa[0] != sp[0] || sa[2] != sp[1] {
        return Err(WsrpnError::Config(format!(
            "soft ROI pooling needs [N,K,U] fields and [N,U,d] patches, got {sa:?} and {sp:?}"
        )));
    }
    let values = g.value(fields).data();
    for (row, chunk) in values.chunks(sa[2].max(1)).enumerate() {
        let mass: f64 = chunk.iter().map(|v| v.as_f64()).sum();
        if !(mass >= MIN_FIELD_MASS) {
            return Err(WsrpnError::DegenerateField {
                sample: row / sa[1],
                token: row % sa[1],
                mass,
            });
        }
    }
    let weights = g.normalize_sum(fields, 2)?;
    Ok(g.bmm(weights, patches, false, false)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoisyMode {
    Or,
    And,
}

/// noisyOR `1 - Π(1 - p)` or noisyAND `Π p` along `axis`.
pub fn noisy_pool<F: Float>(g: &mut Graph<F>, p: Var, axis: usize, mode: NoisyMode) -> Result<Var> {
    Ok(match mode {
        NoisyMode::Or => {
            let q = g.one_minus(p);
            let prod = g.prod_axis(q, axis, false)?;
            g.one_minus(prod)
        }
        NoisyMode::And => g.prod_axis(p, axis, false)?,
    })
}

/// Pools ROI probabilities `[N, K, C+1]` over tokens.
pub fn aggregate_roi_image_probs<F: Float>(g: &mut Graph<F>, probs: Var) -> Result<ImageProbs> {
    let s = g.shape(probs).to_vec();
    if s.len() != 3 || s[2] < 2 {
        return Err(WsrpnError::Config(format!(
            "ROI probabilities must be [N, K, C+1], got {s:?}"
        )));
    }
    let c = s[2] - 1;
    let cls = g.narrow(probs, 2, 0, c)?;
    let nf = g.narrow(probs, 2, c, 1)?;
    Ok(ImageProbs {
        classes: noisy_pool(g, cls, 1, NoisyMode::Or)?,
        or_nf: noisy_pool(g, nf, 1, NoisyMode::Or)?,
        and_nf: noisy_pool(g, nf, 1, NoisyMode::And)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn identical_values_pass_through_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let q = g.constant(normal(&mut rng, &[2, 3, 8], 1.0));
        let k = g.constant(normal(&mut rng, &[2, 5, 8], 1.0));
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let v = g.constant(Tensor::from_fn(&[2, 5, 8], |i| row[i % 8]));
        let (out, w) = attention(&mut g, q, k, v, 4).unwrap();
        for (i, x) in g.value(out).data().iter().enumerate() {
            assert!((x - row[i % 8]).abs() < 1e-12);
        }
        for chunk in g.value(w).data().chunks(5) {
            assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(&[1, 2, 6]));
        let kv = g.constant(Tensor::zeros(&[1, 3, 6]));
        assert!(matches!(
            attention(&mut g, q, kv, kv, 4),
            Err(WsrpnError::Config(_))
        ));
    }

    #[test]
    fn default_token_features_shape() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let branch = RoiBranch::new(&mut store, &mut rng, &cfg);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let patches = g.constant(normal(&mut rng, &[1, 49, 128], 1.0));
        let out = branch.roi_attention(&mut g, &p, patches).unwrap();
        assert_eq!(g.shape(out), &[1, 10, 128]);
    }

    #[test]
    fn zero_box_head_gives_centered_midsize_boxes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mu_head = Linear::new(&mut store, &mut rng, "mu", 4, 2);
        let sigma_head = Linear::new(&mut store, &mut rng, "sigma", 4, 2);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let h = g.constant(normal(&mut rng, &[2, 3, 4], 1.0));
        let (mu, sigma) = predict_boxes(&mut g, &p, &mu_head, &sigma_head, h, 0.01, 0.5).unwrap();
        assert!(g.value(mu).data().iter().all(|&v| v == 0.5));
        assert!(g
            .value(sigma)
            .data()
            .iter()
            .all(|&v| (v - 0.255).abs() < 1e-15));
    }

    #[test]
    fn field_offset_by_one_sigma() {
        let mut g = Graph::<f64>::new();
        // 4x4 grid, μ at the center of patch (1, 2); σ_y equals one patch pitch
        let mu = g.constant(t(&[1, 1, 2], &[2.5 / 4.0, 1.5 / 4.0]));
        let sigma = g.constant(t(&[1, 1, 2], &[0.1, 0.25]));
        let a = receptive_field(&mut g, mu, sigma, 4, 4, 2.0).unwrap();
        let a = g.value(a).data();
        assert_eq!(a[4 + 2], 1.0);
        assert!((a[2 * 4 + 2] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((a[2 * 4 + 2] - 0.6065).abs() < 5e-5);
    }

    #[test]
    fn field_is_symmetric_about_the_center_axis() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(t(&[1, 1, 2], &[0.5, 0.3]));
        let sigma = g.constant(t(&[1, 1, 2], &[0.2, 0.15]));
        for beta in [2.0, 3.0, 5.0] {
            let a = receptive_field(&mut g, mu, sigma, 5, 6, beta).unwrap();
            let a = g.value(a).data().to_vec();
            for m in 0..5 {
                for n in 0..6 {
                    assert!((a[m * 6 + n] - a[m * 6 + (5 - n)]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn pooling_constants_and_one_hot() {
        let mut g = Graph::<f64>::new();
        let row = [0.5, -2.0, 3.0];
        let patches = g.constant(Tensor::from_fn(&[1, 4, 3], |i| row[i % 3]));
        let fields = g.constant(t(&[1, 2, 4], &[0.1, 0.9, 0.2, 1.0, 0.3, 0.3, 0.3, 0.3]));
        let h = soft_roi_pool(&mut g, fields, patches).unwrap();
        for (i, v) in g.value(h).data().iter().enumerate() {
            assert!((v - row[i % 3]).abs() < 1e-12);
        }
        let patches = g.constant(Tensor::from_fn(&[1, 4, 3], |i| i as f64));
        let one_hot = g.constant(t(&[1, 1, 4], &[0.0, 0.0, 1.0, 0.0]));
        let h = soft_roi_pool(&mut g, one_hot, patches).unwrap();
        assert_eq!(g.value(h).data(), &[6.0, 7.0, 8.0]);
    }

    #[test]
    fn degenerate_field_is_rejected() {
        let mut g = Graph::<f64>::new();
        let patches = g.constant(Tensor::zeros(&[1, 4, 3]));
        let fields = g.constant(t(&[1, 2, 4], &[0.1, 0.0, 0.0, 0.0, 1e-14, 0.0, 0.0, 0.0]));
        let err = soft_roi_pool(&mut g, fields, patches).unwrap_err();
        assert!(matches!(
            err,
            WsrpnError::DegenerateField {
                sample: 0,
                token: 1,
                ..
            }
        ));
    }

    #[test]
    fn hard_pooling_limit_at_sigma_min() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(t(&[1, 1, 2], &[3.5 / 7.0, 1.5 / 7.0]));
        let sigma = g.constant(t(&[1, 1, 2], &[0.01, 0.01]));
        let a = receptive_field(&mut g, mu, sigma, 7, 7, 2.0).unwrap();
        let a = g.value(a).data();
        let total: f64 = a.iter().sum();
        assert!(a[7 + 3] / total > 0.99);
    }

    #[test]
    fn noisy_pool_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[2], &[0.5, 0.5]));
        let or = noisy_pool(&mut g, p, 0, NoisyMode::Or).unwrap();
        assert_eq!(g.value(or).item(), Some(0.75));
        let p = g.constant(t(&[3], &[0.2, 1.0, 0.4]));
        let or = noisy_pool(&mut g, p, 0, NoisyMode::Or).unwrap();
        assert_eq!(g.value(or).item(), Some(1.0));
        let p = g.constant(t(&[3], &[0.2, 0.0, 0.4]));
        let and = noisy_pool(&mut g, p, 0, NoisyMode::And).unwrap();
        assert_eq!(g.value(and).item(), Some(0.0));
    }

    #[test]
    fn single_token_aggregation_is_identity() {
        let mut g = Graph::<f64>::new();
        let probs = g.constant(t(&[1, 1, 3], &[0.3, 0.6, 0.1]));
        let agg = aggregate_roi_image_probs(&mut g, probs).unwrap();
        assert!((g.value(agg.classes).data()[0] - 0.3).abs() < 1e-15);
        assert!((g.value(agg.classes).data()[1] - 0.6).abs() < 1e-15);
        assert!((g.value(agg.or_nf).data()[0] - 0.1).abs() < 1e-15);
        assert!((g.value(agg.and_nf).data()[0] - 0.1).abs() < 1e-15);
    }
}
