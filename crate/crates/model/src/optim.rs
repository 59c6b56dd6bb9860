//! AdamW over a [`ParamStore`], with state exposed for checkpoints.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Result<Self> {
        let moments = store
            .iter()
            .map(|(name, var)| {
                let z = var.as_tensor().zeros_like()?;
                Ok((name.to_string(), Moments { m: z.clone(), v: z }))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            step: 0,
            moments,
        })
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// (not reached by the loss) keep their value and moments.
    pub fn update(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, var) in store.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let mom = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("optimizer has no state for {name}")))?;
            let m = ((&mom.m * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((&mom.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + eps)?;
            let step = ((&m / bc1)? / denom)?;
            let p = var.as_tensor().detach();
            let p = if weight_decay != 0.0 {
                (&p - (&p * (lr * weight_decay))?)?
            } else {
                p
            };
            var.set(&(p - (step * lr)?)?)?;
            mom.m = m.detach();
            mom.v = v.detach();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr * sign(g).
        let mut store = ParamStore::new(0, DType::F64);
        let w = store.zeros("w", &[3]).unwrap();
        let target = Tensor::new(&[1.0f64, -2.0, 0.5], &candle_core::Device::Cpu).unwrap();
        let loss = (&w - &target).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let cfg = AdamWConfig {
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-9,
            weight_decay: 0.0,
        };
        let mut opt = AdamW::new(cfg, &store).unwrap();
        opt.update(&store, &grads, 0.1).unwrap();
        let got = store.values("w").unwrap();
        for (g, want) in got.iter().zip([0.1, -0.1, 0.1]) {
            assert!((g - want).abs() < 1e-9, "{got:?}");
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new(0, DType::F64);
        let w = store.zeros("w", &[2]).unwrap();
        let target = Tensor::new(&[0.7f64, -0.3], &candle_core::Device::Cpu).unwrap();
        let cfg = AdamWConfig {
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-9,
            weight_decay: 0.0,
        };
        let mut opt = AdamW::new(cfg, &store).unwrap();
        for _ in 0..500 {
            let loss = (&w - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.update(&store, &grads, 0.01).unwrap();
        }
        let got = store.values("w").unwrap();
        assert!((got[0] - 0.7).abs() < 1e-2 && (got[1] + 0.3).abs() < 1e-2, "{got:?}");
    }
}
