//! AdamW with decoupled weight decay and the linear warm-up/decay schedule.

use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::ParamStore;
use crate::tensor::Tensor;

/// Linear ramp `0 → base_lr` over `round(warmup_ratio · total)` steps, then
/// linear decay to zero at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup_ratio: f64, base_lr: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::ZeroSteps);
    }
    if step > total {
        return Err(Error::InvalidSchedule(alloc::format!("step {step} beyond total {total}")));
    }
    if !(0.0..1.0).contains(&warmup_ratio) {
        return Err(Error::InvalidSchedule(alloc::format!("warm-up ratio {warmup_ratio}")));
    }
    let warm = libm::round(warmup_ratio * total as f64) as usize;
    if warm > 0 && step <= warm {
        Ok(base_lr * step as f64 / warm as f64)
    } else {
        Ok(base_lr * (total - step) as f64 / (total - warm) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for every group of one store.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || {
            store
                .groups()
                .iter()
                .map(|g| Tensor::zeros(g.value().shape()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: usize) -> (&Tensor, &Tensor) {
        (&self.m[id], &self.v[id])
    }

    /// One update from the gradients accumulated in `store`. Frozen groups are
    /// untouched; a non-finite gradient aborts before any value changes.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::InvalidSchedule("optimizer built for a different store".to_string()));
        }
        for g in store.groups() {
            if g.trainable && !g.grad().is_finite() {
                return Err(Error::NonFiniteGradient(g.name().to_string()));
            }
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps } = self.config;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(beta1, t);
        let c2 = 1.0 - libm::pow(beta2, t);
        for id in 0..store.len() {
            if !store.group(id).trainable {
                continue;
            }
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let (p, g) = store.value_and_grad_mut(id);
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *p -= lr * weight_decay * *p;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (libm::sqrt(vh) + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 100, 0.1, 1.0).unwrap(), 0.0);
        assert_eq!(lr_schedule(10, 100, 0.1, 1.0).unwrap(), 1.0);
        assert_eq!(lr_schedule(100, 100, 0.1, 1.0).unwrap(), 0.0);
        assert!((lr_schedule(55, 100, 0.1, 2.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(lr_schedule(5, 100, 0.1, 1.0).unwrap(), 0.5);
        assert_eq!(lr_schedule(0, 10, 0.0, 1.0).unwrap(), 1.0);
        assert!(matches!(lr_schedule(0, 0, 0.1, 1.0), Err(Error::ZeroSteps)));
        assert!(lr_schedule(101, 100, 0.1, 1.0).is_err());
        assert!(lr_schedule(0, 100, 1.0, 1.0).is_err());
    }

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v), true).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        s.zero_grad();
        let mut tape = crate::tape::Tape::new();
        let p = tape.param(s, 0);
        let l = tape.scale(p, g).unwrap();
        let grads = tape.backward(l).unwrap();
        s.accumulate(&grads).unwrap();
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut s = scalar_store(0.7);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        for _ in 0..5 {
            s.zero_grad();
            opt.step(&mut s, 0.1, 0.0).unwrap();
        }
        assert_eq!(s.value(0).data()[0], 0.7);
    }

    #[test]
    fn three_steps_match_hand_recurrence() {
        // values from an independent scalar evaluation of the recurrence
        let expected = [0.4899500005, 0.48723763527181757, 0.48060779575441775];
        let mut s = scalar_store(0.5);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        for (g, e) in [0.2, -0.1, 0.4].iter().zip(expected) {
            set_grad(&mut s, *g);
            opt.step(&mut s, 0.01, 0.01).unwrap();
            assert!((s.value(0).data()[0] - e).abs() < 1e-12, "{} vs {e}", s.value(0).data()[0]);
        }
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut s = scalar_store(0.0);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        let mut prev = 0.0;
        for _ in 0..200 {
            set_grad(&mut s, 3.0);
            opt.step(&mut s, 0.01, 0.0).unwrap();
            let now = s.value(0).data()[0];
            assert!(((prev - now) - 0.01).abs() < 1e-6);
            prev = now;
        }
    }

    #[test]
    fn frozen_and_nan() {
        let mut s = scalar_store(1.0);
        s.add("frozen", Tensor::scalar(2.0), false).unwrap();
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        set_grad(&mut s, 1.0);
        opt.step(&mut s, 0.1, 0.5).unwrap();
        assert_eq!(s.value(1).data()[0], 2.0);

        let before = s.value(0).clone();
        let mut tape = crate::tape::Tape::new();
        let p = tape.param(&s, 0);
        let grads = tape.backward(p).unwrap();
        s.zero_grad();
        s.accumulate_scaled(&grads, f64::NAN).unwrap();
        assert!(matches!(opt.step(&mut s, 0.1, 0.0), Err(Error::NonFiniteGradient(_))));
        assert!(s.value(0).bit_eq(&before));
    }
}
