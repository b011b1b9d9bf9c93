//! Central finite-difference check of the full training loss on a tiny model.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wsrpn_autodiff::{Graph, Tensor};

use crate::config::{BackboneConfig, ConvStage, LossConfig, ModelConfig};
use crate::error::Result;
use crate::losses::total_loss;
use crate::model::Wsrpn;
use crate::params::Bound;

/// Largest relative error inside one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupError {
    pub group: String,
    pub elements: usize,
    pub max_relative_error: f64,
}

/// The single scalar with the largest relative error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorstElement {
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FullGradCheck {
    pub loss: f64,
    pub groups: Vec<GroupError>,
    pub max_relative_error: f64,
    pub worst: Option<WorstElement>,
    pub evaluations: usize,
    pub seconds: f64,
}

/// 16 px inputs through one stride-4 stage give a 4 x 4 grid; d = 8, K = 3, two classes.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        backbone: BackboneConfig {
            stages: vec![ConvStage::new(8, 4, 4)],
            final_pool: 1,
        },
        dim: 8,
        num_tokens: 3,
        num_heads: 2,
        attn_mlp_ratio: 2,
        classifier_hidden: 8,
        token_init_std: 0.5,
        ..ModelConfig::default()
    }
}

fn relative(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares the analytic gradient of `total_loss` (all components on) with
/// central differences for every scalar parameter of a random tiny model.
pub fn full_loss_grad_check(seed: u64, eps: f64) -> Result<FullGradCheck> {
    let start = Instant::now();
    let cfg = tiny_config();
    let model = Wsrpn::<f64>::new(cfg.clone(), 2, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let side = cfg.image_size;
    // a batch of 2 images as two views each, matching the paired training layout
    let images = Tensor::<f64>::from_fn(&[4, side, side, 1], |_| rng.random_range(-1.0..1.0));
    let labels = vec![
        vec![true, false],
        vec![true, true],
        vec![true, false],
        vec![true, true],
    ];
    let loss_cfg = LossConfig::default();

    let eval = |params: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars = params
            .iter()
            .map(|t| {
                if grad {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let p = Bound::from_vars(vars);
        let x = g.constant(images.clone());
        let out = model.forward(&mut g, &p, x)?;
        let terms = total_loss(&mut g, &model, &p, &out, &labels, &loss_cfg)?;
        let value = g.value(terms.total).data()[0];
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = crate::trainer::collect_grads(&mut g, terms.total, p.vars(), params)?;
        Ok((value, grads))
    };

    let mut params: Vec<Tensor<f64>> = model.params.tensors().to_vec();
    let (loss, analytic) = eval(&params, true)?;
    let mut evaluations = 1;
    let mut groups: Vec<GroupError> = Vec::new();
    let mut worst_element: Option<WorstElement> = None;
    for (i, id) in model.params.ids().enumerate() {
        let group = model.params.group(id).to_string();
        let mut worst = 0.0f64;
        for j in 0..params[i].numel() {
            let orig = params[i].data()[j];
            params[i].data_mut()[j] = orig + eps;
            let (up, _) = eval(&params, false)?;
            params[i].data_mut()[j] = orig - eps;
            let (down, _) = eval(&params, false)?;
            params[i].data_mut()[j] = orig;
            evaluations += 2;
            let (a, n) = (analytic[i].data()[j], (up - down) / (2.0 * eps));
            let err = relative(a, n);
            worst = worst.max(err);
            if worst_element
                .as_ref()
                .is_none_or(|w| err > w.relative_error)
            {
                worst_element = Some(WorstElement {
                    parameter: model.params.name(id).to_string(),
                    index: j,
                    analytic: a,
                    numeric: n,
                    relative_error: err,
                });
            }
        }
        match groups.iter_mut().find(|g| g.group == group) {
            Some(g) => {
                g.elements += params[i].numel();
                g.max_relative_error = g.max_relative_error.max(worst);
            }
            None => groups.push(GroupError {
                group,
                elements: params[i].numel(),
                max_relative_error: worst,
            }),
        }
    }
    let max_relative_error = groups
        .iter()
        .map(|g| g.max_relative_error)
        .fold(0.0, f64::max);
    Ok(FullGradCheck {
        loss,
        groups,
        max_relative_error,
        worst: worst_element,
        evaluations,
        seconds: start.elapsed().as_secs_f64(),
    })
}
