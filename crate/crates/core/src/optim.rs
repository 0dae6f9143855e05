//! Adam with bias correction, plus the warmup/multi-step learning rate schedule.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments mirroring every entry of `params`, with the usual
    /// defaults `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros = |p: &ParamStore<T>| {
            p.iter()
                .map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape())))
                .collect()
        };
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }
}

/// One bias-corrected Adam update of the parameters named in `names`.
/// Every one of them must have an entry in `grads`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    names: &[String],
    state: &mut AdamState<T>,
) -> Result<()> {
    for n in names {
        if !grads.contains_key(n) {
            return Err(Error::MissingGrad(n.clone()));
        }
        if !state.m.contains_key(n) {
            return Err(Error::UnknownParam(n.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    for n in names {
        let g = &grads[n];
        let p = params.get_mut(n)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(alloc::format!(
                "gradient of `{n}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state.m.get_mut(n).expect("checked above");
        let v = state.v.get_mut(n).expect("checked above");
        let (pm, mm, vm) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pm.len() {
            let gi = g.data()[i].f64();
            let mi = b1 * mm[i].f64() + (1.0 - b1) * gi;
            let vi = b2 * vm[i].f64() + (1.0 - b2) * gi * gi;
            mm[i] = T::of(mi);
            vm[i] = T::of(vi);
            let mhat = mi / c1;
            let vhat = vi / c2;
            let update = state.lr * mhat / (libm::sqrt(vhat) + state.eps);
            pm[i] = T::of(pm[i].f64() - update);
        }
    }
    Ok(())
}

/// Linear warmup from `warmup_start` to `base_lr`, then multiplication by
/// `gamma` at each milestone step.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub warmup_start: f64,
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            warmup_steps: 0,
            warmup_start: lr,
            base_lr: lr,
            milestones: Vec::new(),
            gamma: 1.0,
        }
    }

    /// Learning rate for the zero-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            return self.warmup_start + (self.base_lr - self.warmup_start) * f;
        }
        let hits = self.milestones.iter().filter(|&&m| step >= m).count();
        self.base_lr * libm::pow(self.gamma, hits as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn one_param(value: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::from_f64(&[1], &[value]).unwrap());
        p
    }

    fn grad(value: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut g = BTreeMap::new();
        g.insert("x".to_string(), Tensor::from_f64(&[1], &[value]).unwrap());
        g
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = one_param(0.7);
        let mut s = AdamState::new(&p, 0.1);
        adam_step(&mut p, &grad(0.0), &["x".to_string()], &mut s).unwrap();
        assert_eq!(p.get("x").unwrap().data(), &[0.7]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one_param(1.0);
        let mut s = AdamState::new(&p, 0.1);
        adam_step(&mut p, &grad(1.0), &["x".to_string()], &mut s).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_follow_scalar_recurrence() {
        let (lr, b1, b2, eps, gval) = (0.05, 0.9, 0.999, 1e-8, 0.3);
        let mut p = one_param(2.0);
        let mut s = AdamState::new(&p, lr);
        let names = vec!["x".to_string()];
        adam_step(&mut p, &grad(gval), &names, &mut s).unwrap();
        adam_step(&mut p, &grad(gval), &names, &mut s).unwrap();

        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * gval;
            v = b2 * v + (1.0 - b2) * gval * gval;
            let mh = m / (1.0 - libm::pow(b1, t as f64));
            let vh = v / (1.0 - libm::pow(b2, t as f64));
            x -= lr * mh / (libm::sqrt(vh) + eps);
        }
        assert!((p.get("x").unwrap().data()[0] - x).abs() < 1e-12);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = one_param(1.0);
        let mut s = AdamState::new(&p, 0.1);
        let err = adam_step(&mut p, &BTreeMap::new(), &["x".to_string()], &mut s);
        assert_eq!(err, Err(Error::MissingGrad("x".into())));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn schedule_warms_up_then_steps_down() {
        let s = LrSchedule {
            warmup_steps: 10,
            warmup_start: 1e-6,
            base_lr: 1e-4,
            milestones: vec![20, 30],
            gamma: 0.5,
        };
        assert_eq!(s.lr_at(0), 1e-6);
        assert!((s.lr_at(5) - (1e-6 + 0.5 * (1e-4 - 1e-6))).abs() < 1e-18);
        assert_eq!(s.lr_at(10), 1e-4);
        assert_eq!(s.lr_at(25), 5e-5);
        assert_eq!(s.lr_at(30), 2.5e-5);
    }
}
