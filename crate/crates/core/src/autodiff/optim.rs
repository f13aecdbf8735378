use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Hyperparameters of AdamW with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates and step counter for one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub lr: f64,
    pub config: AdamWConfig,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, lr: f64, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            lr,
            config,
        }
    }

    pub fn round_to_f32(&mut self) {
        for m in self.first_moment.iter_mut().chain(self.second_moment.iter_mut()) {
            m.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// One AdamW update of every trainable parameter in `store`, using the
/// gradients currently accumulated there.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    if state.first_moment.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} parameters, store has {}",
            state.first_moment.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let t = store.get(id);
        if t.requires_grad() && t.grad().is_none() {
            return Err(Error::Contract(format!(
                "missing gradient for trainable parameter {}",
                store.name(id)
            )));
        }
    }
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let lr = state.lr;
    for id in ids {
        let t = store.get_mut(id);
        if !t.requires_grad() {
            continue;
        }
        let g = t.grad().expect("checked above").to_vec();
        let m = &mut state.first_moment[id.index()];
        let v = &mut state.second_moment[id.index()];
        for (((p, g), m), v) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * weight_decay * *p;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup followed by cosine decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub min_lr: f64,
    pub max_lr: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(warmup_steps: u64, min_lr: f64, max_lr: f64, total_steps: u64) -> Result<Self> {
        if !(min_lr > 0.0 && min_lr <= max_lr) {
            return Err(Error::Config(format!(
                "need 0 < min_lr <= max_lr, got {min_lr} / {max_lr}"
            )));
        }
        if warmup_steps == 0 || warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "need 0 < warmup_steps < total_steps, got {warmup_steps} / {total_steps}"
            )));
        }
        Ok(Self {
            warmup_steps,
            min_lr,
            max_lr,
            total_steps,
        })
    }

    /// Full-scale schedule: 100 warmup steps between 1e-4 and 1e-3.
    pub fn full_scale(total_steps: u64) -> Result<Self> {
        Self::new(100, 1e-4, 1e-3, total_steps)
    }
}

/// Learning rate at `step`; steps past `total_steps` stay at `min_lr`.
pub fn onecycle_lr(step: u64, sched: &LrSchedule) -> f64 {
    let LrSchedule {
        warmup_steps,
        min_lr,
        max_lr,
        total_steps,
    } = *sched;
    if step >= total_steps {
        return min_lr;
    }
    if step <= warmup_steps {
        return min_lr + (max_lr - min_lr) * step as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    min_lr + (max_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w));
        s
    }

    fn no_decay() -> AdamWConfig {
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn first_step_is_normalised_gradient() {
        let mut store = scalar_store(1.5);
        let id = store.id("w").unwrap();
        store.get_mut(id).accumulate_grad(&[0.3]);
        let mut st = OptimizerState::new(&store, 0.01, no_decay());
        adamw_step(&mut store, &mut st).unwrap();
        let expected = 1.5 - 0.01 * 0.3 / (0.3 + 1e-8);
        assert!((store.get(id).data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = scalar_store(2.0);
        let id = store.id("w").unwrap();
        store.get_mut(id).accumulate_grad(&[0.0]);
        let mut st = OptimizerState::new(&store, 0.1, no_decay());
        adamw_step(&mut store, &mut st).unwrap();
        assert_eq!(store.get(id).data()[0], 2.0);
    }

    #[test]
    fn decay_shrinks_with_zero_gradient() {
        let mut store = scalar_store(-2.0);
        let id = store.id("w").unwrap();
        let mut st = OptimizerState::new(&store, 0.1, AdamWConfig::default());
        let mut prev = 2.0;
        for _ in 0..5 {
            store.zero_grad();
            store.get_mut(id).accumulate_grad(&[0.0]);
            adamw_step(&mut store, &mut st).unwrap();
            let now = store.get(id).data()[0].abs();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut store = scalar_store(1.0);
        let id = store.id("w").unwrap();
        let mut st = OptimizerState::new(&store, 0.1, no_decay());
        let mut prev = 1.0f64;
        for _ in 0..10 {
            store.zero_grad();
            let w = store.get(id).data()[0];
            store.get_mut(id).accumulate_grad(&[2.0 * w]);
            adamw_step(&mut store, &mut st).unwrap();
            let now = store.get(id).data()[0].abs();
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut store = scalar_store(1.0);
        let mut st = OptimizerState::new(&store, 0.1, no_decay());
        assert!(matches!(adamw_step(&mut store, &mut st), Err(Error::Contract(_))));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = scalar_store(1.0);
        store.set_trainable("w", false);
        let mut st = OptimizerState::new(&store, 0.1, AdamWConfig::default());
        adamw_step(&mut store, &mut st).unwrap();
        assert_eq!(store.get(store.id("w").unwrap()).data()[0], 1.0);
    }

    #[test]
    fn schedule_endpoints_match_table_values() {
        let s = LrSchedule::full_scale(1000).unwrap();
        assert_eq!(onecycle_lr(0, &s), 1e-4);
        assert!((onecycle_lr(100, &s) - 1e-3).abs() < 1e-18);
        let mid = (100 + 1000) / 2;
        assert!((onecycle_lr(mid, &s) - 5.5e-4).abs() < 1e-12);
        assert_eq!(onecycle_lr(1000, &s), 1e-4);
        assert_eq!(onecycle_lr(5000, &s), 1e-4);
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(LrSchedule::new(10, 1e-3, 1e-4, 100).is_err());
        assert!(LrSchedule::new(100, 1e-4, 1e-3, 100).is_err());
    }
}
