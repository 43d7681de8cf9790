//! AdamW with decoupled weight decay and separate encoder/head rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NetworkParams, ParamGroup};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub encoder_lr: f64,
    /// Head learning rate as a multiple of the encoder rate.
    pub head_lr_mult: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of the run spent in linear warmup.
    pub warmup_frac: f64,
    /// Exponent of the polynomial decay after warmup; 0 keeps the rate flat.
    pub poly_power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            encoder_lr: 1e-3,
            head_lr_mult: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_frac: 0.1,
            poly_power: 1.0,
        }
    }
}

impl OptimConfig {
    /// Learning-rate multiplier at (zero-based) step `step` of `total`:
    /// linear warmup, then `(1 - progress)^poly_power`.
    pub fn lr_factor(&self, step: usize, total: usize) -> f64 {
        let warm = (self.warmup_frac * total as f64).round() as usize;
        if step < warm {
            return (step + 1) as f64 / warm as f64;
        }
        if self.poly_power == 0.0 || total <= warm {
            return 1.0;
        }
        let progress = (step - warm) as f64 / (total - warm) as f64;
        (1.0 - progress.min(1.0)).powf(self.poly_power)
    }
}

pub struct AdamW {
    cfg: OptimConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: &NetworkParams) -> Self {
        let zeros: Vec<Tensor> = params
            .named_tensors()
            .into_iter()
            .map(|(_, t, _)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut NetworkParams,
        grads: &NetworkParams,
        lr_factor: f64,
    ) -> Result<()> {
        if !params.same_shapes(grads) {
            return Err(Error::invalid("AdamW::step", "gradient layout mismatch"));
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let groups: Vec<ParamGroup> = params
            .named_tensors()
            .into_iter()
            .map(|(_, _, g)| g)
            .collect();
        let gs: Vec<&Tensor> = grads
            .named_tensors()
            .into_iter()
            .map(|(_, t, _)| t)
            .collect();
        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let lr = lr_factor
                * match groups[i] {
                    ParamGroup::Encoder => c.encoder_lr,
                    ParamGroup::Head => c.encoder_lr * c.head_lr_mult,
                };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(gs[i].data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;

    #[test]
    fn warmup_is_linear_then_flat() {
        let c = OptimConfig {
            poly_power: 0.0,
            ..OptimConfig::default()
        };
        assert_eq!(c.lr_factor(0, 100), 0.1);
        assert_eq!(c.lr_factor(9, 100), 1.0);
        assert_eq!(c.lr_factor(50, 100), 1.0);
        assert_eq!(c.lr_factor(0, 0), 1.0);
    }

    #[test]
    fn linear_decay_after_warmup() {
        let c = OptimConfig::default();
        assert_eq!(c.lr_factor(10, 100), 1.0);
        assert!((c.lr_factor(55, 100) - 0.5).abs() < 1e-15);
        assert!((c.lr_factor(99, 100) - 1.0 / 90.0).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = NetworkParams::init(&ModelConfig::default(), &mut rng).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.seg_head.bias.data_mut()[0] = 3.0;
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(cfg.clone(), &p);
        opt.step(&mut p, &g, 1.0).unwrap();
        let lr = cfg.encoder_lr * cfg.head_lr_mult;
        let moved = before.seg_head.bias.data()[0] - p.seg_head.bias.data()[0];
        assert!((moved - lr).abs() < 1e-9);
        assert_eq!(p.encoder, before.encoder);
    }
}
