//! Model, loss and training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WsrpnError};

/// One convolution stage of the patch encoder: conv, bias, ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvStage {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            channels,
            kernel,
            stride,
        }
    }

    pub fn padding(&self) -> usize {
        (self.kernel + 1).saturating_sub(self.stride) / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stages: Vec<ConvStage>,
    /// Window of the final average pooling; 1 disables it.
    pub final_pool: usize,
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product::<usize>() * self.final_pool.max(1)
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(1, |s| s.channels)
    }
}

impl Default for BackboneConfig {
    /// Four stride-2 stages and a stride-2 pool: 224 px -> 7 x 7 patches.
    fn default() -> Self {
        Self {
            stages: vec![
                ConvStage::new(32, 3, 2),
                ConvStage::new(64, 3, 2),
                ConvStage::new(128, 3, 2),
                ConvStage::new(128, 3, 2),
            ],
            final_pool: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub backbone: BackboneConfig,
    /// Model dimension d.
    pub dim: usize,
    /// Number of ROI tokens K.
    pub num_tokens: usize,
    pub num_heads: usize,
    /// Hidden width of the MLP inside ROI attention, as a multiple of d.
    pub attn_mlp_ratio: usize,
    /// Hidden width of the shared patch/ROI classifier.
    pub classifier_hidden: usize,
    /// LSE pooling sharpness r.
    pub lse_r: f64,
    /// Generalized Gaussian shape parameter.
    pub beta: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub token_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            backbone: BackboneConfig::default(),
            dim: 128,
            num_tokens: 10,
            num_heads: 8,
            attn_mlp_ratio: 4,
            classifier_hidden: 128,
            lse_r: 5.0,
            beta: 2.0,
            sigma_min: 0.01,
            sigma_max: 0.5,
            token_init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.backbone.stride()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(WsrpnError::Config(m));
        let stride = self.backbone.stride();
        if self.backbone.stages.is_empty() {
            return fail("backbone needs at least one stage".into());
        }
        if self.image_size == 0 || self.image_size % stride != 0 {
            return Err(WsrpnError::ImageSide {
                side: self.image_size,
                stride,
            });
        }
        if self.dim == 0 || self.dim % 4 != 0 {
            return fail(format!("dim {} must be a positive multiple of 4", self.dim));
        }
        if self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return fail(format!(
                "dim {} is not divisible by {} attention heads",
                self.dim, self.num_heads
            ));
        }
        if self.num_tokens == 0 || self.classifier_hidden == 0 || self.attn_mlp_ratio == 0 {
            return fail("token count and hidden widths must be positive".into());
        }
        if !(self.lse_r > 0.0) {
            return fail(format!("lse_r must be positive, got {}", self.lse_r));
        }
        if !(self.beta >= 1.0) {
            return fail(format!("beta must be >= 1, got {}", self.beta));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return fail("need 0 < sigma_min < sigma_max".into());
        }
        Ok(())
    }
}

/// Which no-finding aggregates enter a branch's BCE loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoFindingTerms {
    /// Classes only.
    None,
    And,
    Or,
    Both,
}

impl NoFindingTerms {
    pub fn and(self) -> bool {
        matches!(self, Self::And | Self::Both)
    }

    pub fn or(self) -> bool {
        matches!(self, Self::Or | Self::Both)
    }
}

/// Self-pair convention of the supervised contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfPairing {
    /// `j = i` is dropped from numerator and denominator.
    Exclude,
    /// `j = i` is kept, as in the literal double sum.
    Include,
}

/// Per-component on/off switches of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSwitches {
    pub patch_bce: bool,
    pub patch_supcon: bool,
    pub roi_bce: bool,
    pub roi_supcon: bool,
    pub consistency: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self::FULL
    }
}

impl LossSwitches {
    pub const FULL: Self = Self {
        patch_bce: true,
        patch_supcon: true,
        roi_bce: true,
        roi_supcon: true,
        consistency: true,
    };

    pub fn supcon_enabled(&self) -> bool {
        self.patch_supcon || self.roi_supcon
    }

    /// Named loss ablations: `full`, `no_patch`, `no_roi`, `no_consistency`,
    /// `no_bce`, `no_supcon`, `only_bce`, `only_supcon`.
    pub fn ablation(name: &str) -> Option<Self> {
        let f = Self::FULL;
        let s = match name {
            "full" => f,
            "no_patch" => Self {
                patch_bce: false,
                patch_supcon: false,
                ..f
            },
            "no_roi" => Self {
                roi_bce: false,
                roi_supcon: false,
                ..f
            },
            "no_consistency" => Self {
                consistency: false,
                ..f
            },
            "no_bce" => Self {
                patch_bce: false,
                roi_bce: false,
                ..f
            },
            "no_supcon" => Self {
                patch_supcon: false,
                roi_supcon: false,
                ..f
            },
            "only_bce" => Self {
                patch_supcon: false,
                roi_supcon: false,
                consistency: false,
                ..f
            },
            "only_supcon" => Self {
                patch_bce: false,
                roi_bce: false,
                consistency: false,
                ..f
            },
            _ => return None,
        };
        Some(s)
    }

    pub const ABLATIONS: [&'static str; 8] = [
        "full",
        "no_patch",
        "no_roi",
        "no_consistency",
        "no_bce",
        "no_supcon",
        "only_bce",
        "only_supcon",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub switches: LossSwitches,
    pub temperature: f64,
    pub self_pairing: SelfPairing,
    pub patch_no_finding: NoFindingTerms,
    pub roi_no_finding: NoFindingTerms,
    /// Optional BCE weights over `C ∪ {∧∅, ∨∅}` (classes first); uniform when absent.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            switches: LossSwitches::FULL,
            temperature: 0.1,
            self_pairing: SelfPairing::Exclude,
            patch_no_finding: NoFindingTerms::Both,
            roi_no_finding: NoFindingTerms::Both,
            class_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    /// Images per batch; each contributes two augmented views.
    pub batch_size: usize,
    pub max_iterations: usize,
    pub patience: usize,
    pub eval_interval: usize,
    /// IoU threshold of the validation mAP used for model selection.
    pub selection_iou: f64,
    /// Box half-extent as a multiple of sigma.
    pub box_gamma: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            learning_rate: 1.5e-4,
            weight_decay: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            batch_size: 32,
            max_iterations: 5000,
            patience: 1000,
            eval_interval: 250,
            selection_iou: 0.3,
            box_gamma: 2.0,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Batch size, iteration budget and patience of the full-scale protocol.
    pub fn large_scale() -> Self {
        Self {
            batch_size: 128,
            max_iterations: 50_000,
            patience: 10_000,
            eval_interval: 1000,
            ..Self::default()
        }
    }

    /// Small configuration for 112 px synthetic blob data (7 x 7 grid).
    pub fn synthetic() -> Self {
        Self {
            model: ModelConfig {
                image_size: 112,
                backbone: BackboneConfig {
                    stages: vec![
                        ConvStage::new(16, 4, 4),
                        ConvStage::new(32, 3, 2),
                        ConvStage::new(64, 3, 2),
                    ],
                    final_pool: 1,
                },
                dim: 64,
                num_tokens: 4,
                num_heads: 8,
                attn_mlp_ratio: 2,
                classifier_hidden: 64,
                ..ModelConfig::default()
            },
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: &str| Err(WsrpnError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("learning rate and weight decay must be non-negative");
        }
        if !(self.clip_norm > 0.0) || !(self.loss.temperature > 0.0) || !(self.box_gamma > 0.0) {
            return fail("clip_norm, temperature and box_gamma must be positive");
        }
        if self.batch_size == 0 || self.max_iterations == 0 || self.eval_interval == 0 {
            return fail("batch_size, max_iterations and eval_interval must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry_gives_seven_by_seven() {
        let m = ModelConfig::default();
        assert_eq!(m.backbone.stride(), 32);
        assert_eq!(m.grid_side(), 7);
        let s = TrainConfig::synthetic();
        assert_eq!(s.model.backbone.stride(), 16);
        assert_eq!(s.model.grid_side(), 7);
        m.validate().unwrap();
        s.validate().unwrap();
    }

    #[test]
    fn non_divisible_side_names_stride() {
        let m = ModelConfig {
            image_size: 100,
            ..ModelConfig::default()
        };
        match m.validate() {
            Err(WsrpnError::ImageSide {
                side: 100,
                stride: 32,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let m = ModelConfig {
            num_heads: 7,
            ..ModelConfig::default()
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn ablations_are_distinct() {
        let all: Vec<_> = LossSwitches::ABLATIONS
            .iter()
            .map(|n| LossSwitches::ablation(n).unwrap())
            .collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(
                    all[i],
                    all[j],
                    "{} vs {}",
                    LossSwitches::ABLATIONS[i],
                    LossSwitches::ABLATIONS[j]
                );
            }
        }
        assert!(
            !LossSwitches::ablation("no_consistency")
                .unwrap()
                .consistency
        );
        assert!(LossSwitches::ablation("bogus").is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"learning_rat": 1.0}"#);
        assert!(err.is_err());
    }
}
