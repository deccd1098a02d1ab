//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{AsuError, Result};
use crate::region_encoder::BACKBONE_PREFIX;
use crate::tensor::{ParamStore, Real};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its stored gradient. `lr_of` maps a
    /// parameter name to its learning rate for this step.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, lr_of: impl Fn(&str) -> f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in store.iter_mut() {
            let n = p.tensor.numel();
            let grad = p
                .tensor
                .grad
                .take()
                .ok_or_else(|| AsuError::Contract(format!("parameter {} has no gradient", p.name)))?;
            if grad.len() != n {
                return Err(AsuError::Dimension(format!("gradient of {} has {} entries, expected {n}", p.name, grad.len())));
            }
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            if m.len() != n {
                return Err(AsuError::Dimension(format!("optimizer state of {} does not match", p.name)));
            }
            let lr = lr_of(&p.name);
            let decay = 1.0 - lr * self.weight_decay;
            for (((x, g), m), v) in p.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *x = T::of(x.as_f64() * decay - lr * update);
            }
            p.tensor.grad = Some(grad);
        }
        Ok(())
    }
}

/// Warmup + cosine schedule over `total` steps for two parameter groups.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_backbone: f64,
    pub base_rest: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    /// Linear ramp from 0 at step 0 to the base rates at `warmup`, then a
    /// half cosine down to 0 at `total`.
    pub fn at(&self, step: usize) -> (f64, f64) {
        let f = self.factor(step);
        (self.base_backbone * f, self.base_rest * f)
    }

    fn factor(&self, step: usize) -> f64 {
        let step = step.min(self.total);
        if step < self.warmup {
            return step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup);
        if span == 0 {
            return 1.0;
        }
        let progress = (step - self.warmup) as f64 / span as f64;
        0.5 * (1.0 + (PI * progress).cos())
    }

    pub fn lr_for(&self, step: usize, name: &str) -> f64 {
        let (bb, rest) = self.at(step);
        if is_backbone(name) {
            bb
        } else {
            rest
        }
    }
}

pub fn is_backbone(name: &str) -> bool {
    name.starts_with(BACKBONE_PREFIX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(p: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(&[1], vec![p]).unwrap()).unwrap();
        s.get_mut("p").unwrap().tensor.grad = Some(vec![g]);
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_a_no_op() {
        let mut s = scalar_store(0.7, 0.0);
        AdamW::new(0.0).step(&mut s, |_| 0.1).unwrap();
        assert_eq!(s.tensor("p").unwrap().data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0, 1.0);
        AdamW::new(0.0).step(&mut s, |_| 0.1).unwrap();
        assert!((s.tensor("p").unwrap().data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let mut s = scalar_store(2.0, 0.0);
        AdamW::new(0.001).step(&mut s, |_| 0.1).unwrap();
        assert!((s.tensor("p").unwrap().data()[0] - 2.0 * (1.0 - 0.1 * 0.001)).abs() < 1e-15);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule {
            base_backbone: 8e-6,
            base_rest: 8e-5,
            warmup: 5,
            total: 30,
        };
        assert_eq!(s.at(0), (0.0, 0.0));
        assert_eq!(s.at(5), (8e-6, 8e-5));
        let (a, b) = s.at(30);
        assert!(a.abs() < 1e-20 && b.abs() < 1e-20);
        let (a, b) = s.at(17);
        assert!((b / a - 10.0).abs() < 1e-9);
        assert!(s.at(3).1 < s.at(4).1 && s.at(20).1 < s.at(10).1);
        assert_eq!(s.lr_for(5, "encoder.vit.proj.weight"), 8e-6);
        assert_eq!(s.lr_for(5, "encoder.mra.0.attn.q.weight"), 8e-5);
    }
}
