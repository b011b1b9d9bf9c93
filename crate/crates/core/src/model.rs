//! The two-branch network with a classifier shared between branches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wsrpn_autodiff::{Float, Graph, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Result, WsrpnError};
use crate::nn::Mlp;
use crate::params::{Bound, ParamStore};
use crate::patch::{
    aggregate_patch_image_probs, classify_with_nofinding, ImageProbs, PatchEncoder,
};
use crate::roi::{aggregate_roi_image_probs, RoiBranch};

/// Graph handles of one forward pass over a batch of `N` images.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `[N, H*W, d]`.
    pub patch_features: Var,
    /// `[N, H*W, C+1]`.
    pub patch_probs: Var,
    pub patch_image: ImageProbs,
    /// `[N, K, 2]`, `(x, y)`.
    pub mu: Var,
    pub sigma: Var,
    /// `[N, K, H*W]`.
    pub fields: Var,
    /// `[N, K, d]`.
    pub roi_features: Var,
    /// `[N, K, C+1]`.
    pub roi_probs: Var,
    pub roi_image: ImageProbs,
}

/// Detached per-image outputs used for inference and export.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Per token `(x, y)`.
    pub mu: Vec<[f64; 2]>,
    pub sigma: Vec<[f64; 2]>,
    /// Per token, `C+1` probabilities with no-finding last.
    pub roi_probs: Vec<Vec<f64>>,
    /// Receptive fields, `fields[k][u]` over row-major patches `u`.
    pub fields: Vec<Vec<f64>>,
    /// `patch_probs[u][c]`.
    pub patch_probs: Vec<Vec<f64>>,
    /// Image-level `[c_0, .., c_{C-1}, ∧∅, ∨∅]`.
    pub patch_image: Vec<f64>,
    pub roi_image: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Wsrpn<F> {
    pub config: ModelConfig,
    pub num_classes: usize,
    pub params: ParamStore<F>,
    encoder: PatchEncoder,
    classifier: Mlp,
    roi: RoiBranch,
    /// Projection for per-class contrastive features, shared by both branches.
    pub projection: Mlp,
}

impl<F: Float> Wsrpn<F> {
    pub fn new(config: ModelConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(WsrpnError::Config("at least one class is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.dim;
        let encoder = PatchEncoder::new(&mut params, &mut rng, &config);
        let classifier = Mlp::new(
            &mut params,
            &mut rng,
            "classifier",
            (d, config.classifier_hidden, num_classes + 1),
        );
        let roi = RoiBranch::new(&mut params, &mut rng, &config);
        let projection = Mlp::new(&mut params, &mut rng, "projection", (d, d, d));
        Ok(Self {
            config,
            num_classes,
            params,
            encoder,
            classifier,
            roi,
            projection,
        })
    }

    /// Same architecture with parameters replaced by `params` (names must match).
    pub fn with_params<G: Float>(&self, params: ParamStore<G>) -> Result<Wsrpn<G>> {
        let skeleton = Wsrpn::<G>::new(self.config.clone(), self.num_classes, 0)?;
        skeleton.replace_params(params)
    }

    pub(crate) fn replace_params(mut self, params: ParamStore<F>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(WsrpnError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                params.len()
            )));
        }
        for ((name, t), (exp_name, exp)) in params.iter().zip(self.params.iter()) {
            if name != exp_name || t.shape() != exp.shape() {
                return Err(WsrpnError::Checkpoint(format!(
                    "parameter {name} {:?} does not match expected {exp_name} {:?}",
                    t.shape(),
                    exp.shape()
                )));
            }
        }
        self.params = params;
        Ok(self)
    }

    pub fn cast<G: Float>(&self) -> Wsrpn<G> {
        self.with_params(self.params.cast())
            .expect("identical architecture")
    }

    pub fn grid(&self) -> usize {
        self.encoder.grid()
    }

    pub fn num_tokens(&self) -> usize {
        self.roi.num_tokens()
    }

    /// Full forward pass on normalized images `[N, S, S, 1]`.
    pub fn forward(&self, g: &mut Graph<F>, p: &Bound, images: Var) -> Result<Forward> {
        let patch_features = self.encoder.encode(g, p, images)?;
        let logits = self.classifier.forward(g, p, patch_features)?;
        let patch_probs = classify_with_nofinding(g, logits)?;
        let patch_image = aggregate_patch_image_probs(g, patch_probs, self.config.lse_r)?;
        let roi = self.roi.forward(g, p, patch_features)?;
        let roi_logits = self.classifier.forward(g, p, roi.pooled)?;
        let roi_probs = classify_with_nofinding(g, roi_logits)?;
        let roi_image = aggregate_roi_image_probs(g, roi_probs)?;
        Ok(Forward {
            patch_features,
            patch_probs,
            patch_image,
            mu: roi.mu,
            sigma: roi.sigma,
            fields: roi.fields,
            roi_features: roi.pooled,
            roi_probs,
            roi_image,
        })
    }

    /// Inference on a batch without recording gradients.
    pub fn predict(&self, images: Tensor<F>) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images);
        let out = self.forward(&mut g, &p, x)?;
        let n = g.shape(x)[0];
        let (k, c1, u) = (
            self.num_tokens(),
            self.num_classes + 1,
            self.grid() * self.grid(),
        );
        let vals = |v: Var| g.value(v).to_f64_vec();
        let (mu, sigma, rp, fields, pp) = (
            vals(out.mu),
            vals(out.sigma),
            vals(out.roi_probs),
            vals(out.fields),
            vals(out.patch_probs),
        );
        let image = |ip: &ImageProbs, i: usize| {
            let cls = vals(ip.classes);
            let mut v = cls[i * self.num_classes..(i + 1) * self.num_classes].to_vec();
            v.push(vals(ip.and_nf)[i]);
            v.push(vals(ip.or_nf)[i]);
            v
        };
        Ok((0..n)
            .map(|i| Prediction {
                mu: (0..k)
                    .map(|t| [mu[(i * k + t) * 2], mu[(i * k + t) * 2 + 1]])
                    .collect(),
                sigma: (0..k)
                    .map(|t| [sigma[(i * k + t) * 2], sigma[(i * k + t) * 2 + 1]])
                    .collect(),
                roi_probs: (0..k)
                    .map(|t| rp[(i * k + t) * c1..(i * k + t + 1) * c1].to_vec())
                    .collect(),
                fields: (0..k)
                    .map(|t| fields[(i * k + t) * u..(i * k + t + 1) * u].to_vec())
                    .collect(),
                patch_probs: (0..u)
                    .map(|q| pp[(i * u + q) * c1..(i * u + q + 1) * c1].to_vec())
                    .collect(),
                patch_image: image(&out.patch_image, i),
                roi_image: image(&out.roi_image, i),
            })
            .collect())
    }
}
