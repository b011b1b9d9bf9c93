//! Decoupled weight-decay Adam and global-norm gradient clipping.

use wsrpn_autodiff::{Float, Tensor};

use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Float> AdamState<F> {
    pub fn zeros_like(params: &ParamStore<F>) -> Self {
        let z: Vec<Tensor<F>> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }

    pub fn cast<G: Float>(&self) -> AdamState<G> {
        AdamState {
            step: self.step,
            m: self.m.iter().map(Tensor::cast).collect(),
            v: self.v.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub state: AdamState<F>,
}

impl<F: Float> AdamW<F> {
    pub fn new(config: AdamWConfig, params: &ParamStore<F>) -> Self {
        Self {
            config,
            state: AdamState::zeros_like(params),
        }
    }

    /// `p <- p - lr (m̂ / (sqrt(v̂) + eps) + wd p)`.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Tensor<F>]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        let c = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let bc1 = F::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = F::from_f64(1.0 - c.beta2.powi(t));
        let (lr, wd, eps) = (
            F::from_f64(c.lr),
            F::from_f64(c.weight_decay),
            F::from_f64(c.eps),
        );
        let one = F::one();
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
    }
}

pub fn global_norm<F: Float>(grads: &[Tensor<F>]) -> f64 {
    grads
        .iter()
        .map(|g| {
            g.data()
                .iter()
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<F: Float>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_scales_to_unit_norm() {
        let mut g = vec![
            Tensor::<f64>::from_f64(&[2], &[6.0, 0.0]).unwrap(),
            Tensor::from_f64(&[1], &[8.0]).unwrap(),
        ];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 10.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        assert_eq!(g[1].data(), &[0.8]);
        let before = g.clone();
        clip_grad_norm(&mut g, 1.0);
        assert!((global_norm(&g) - global_norm(&before)).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let mut params = ParamStore::<f64>::new();
        params.add("w", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let before = params.clone();
        let cfg = AdamWConfig {
            lr: 0.0,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut opt = AdamW::new(cfg, &params);
        let g = vec![Tensor::from_f64(&[3], &[0.3, 0.1, -5.0]).unwrap()];
        for _ in 0..10 {
            opt.step(&mut params, &g);
        }
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = ParamStore::<f64>::new();
        params.add("w", Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap());
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 0.0,
        };
        let mut opt = AdamW::new(cfg, &params);
        opt.step(
            &mut params,
            &[Tensor::from_f64(&[2], &[3.0, -0.2]).unwrap()],
        );
        let w = params.tensors()[0].data();
        assert!((w[0] - 0.99).abs() < 1e-12 && (w[1] - 1.01).abs() < 1e-12);
    }
}
