//! ADAM optimizer over the named parameter store.
//!
//! Updates walk parameters in lexicographic name order (the store's
//! iteration order), so a training step is a fixed sequence of float
//! operations and repeated runs agree bitwise. Moment buffers are held
//! per parameter and created the first time that parameter receives a
//! gradient; a parameter absent from a step's gradient map is left
//! untouched, moments included, so its bias correction is not skewed by
//! steps it never saw. That case is real: `hist_default` only appears on
//! tapes containing an empty-history example.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tape::GradMap;
use crate::tensor::{NumericsError, ParameterStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// The optimizer itself tolerates lr = 0 (a no-op step); the training
    /// config layers a strictly positive requirement on top.
    pub fn validate(&self) -> Result<(), NumericsError> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(NumericsError::Domain(format!(
                "adam lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(NumericsError::Domain(format!(
                    "adam {name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(NumericsError::Domain(format!(
                "adam eps must be finite and > 0, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Number of updates this parameter has received, for bias correction.
    t: u64,
}

pub struct Adam {
    cfg: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self, NumericsError> {
        cfg.validate()?;
        Ok(Adam {
            cfg,
            state: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Apply one update from `grads` to every matching parameter in the
    /// store. Gradients for unknown parameter names are an error (they
    /// indicate a tape/store mismatch), as are shape disagreements and
    /// non-finite gradient values.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &GradMap,
    ) -> Result<(), NumericsError> {
        for name in grads.keys() {
            if !store.tensors.contains_key(name) {
                return Err(NumericsError::UnknownParameter(name.clone()));
            }
        }
        for (name, grad) in grads {
            let param = store.get_mut(name)?;
            if grad.shape() != param.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    lhs: param.shape(),
                    rhs: grad.shape(),
                });
            }
            if !grad.is_finite() {
                return Err(NumericsError::Domain(format!(
                    "non-finite gradient for parameter {name:?}"
                )));
            }
            let n = param.numel();
            let slot = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - self.cfg.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - self.cfg.beta2.powi(slot.t as i32);
            for i in 0..n {
                let g = grad.values[i];
                slot.m[i] = self.cfg.beta1 * slot.m[i] + (1.0 - self.cfg.beta1) * g;
                slot.v[i] = self.cfg.beta2 * slot.v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                param.values[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(pairs: &[(&str, Tensor)]) -> ParameterStore {
        let mut s = ParameterStore::new(0);
        for (name, t) in pairs {
            s.insert(name, t.clone());
        }
        s
    }

    fn grads_with(pairs: &[(&str, Tensor)]) -> GradMap {
        pairs
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg).unwrap();
        let theta0 = 1.7;
        let g = -0.3;
        let mut store = store_with(&[("w", Tensor::scalar(theta0))]);
        adam.step(&mut store, &grads_with(&[("w", Tensor::scalar(g))]))
            .unwrap();

        // After one step the bias corrections cancel the (1 - beta) factors
        // exactly, so the update is lr * g / (|g| + eps).
        let expected = theta0 - cfg.lr * g / (g.abs() + cfg.eps);
        let got = store.get("w").unwrap().get(0, 0);
        assert!((got - expected).abs() < 1e-12, "got {got}, want {expected}");
    }

    #[test]
    fn second_step_matches_hand_formula() {
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg).unwrap();
        let mut store = store_with(&[("w", Tensor::scalar(0.0))]);
        let (g1, g2) = (1.0, -2.0);
        adam.step(&mut store, &grads_with(&[("w", Tensor::scalar(g1))]))
            .unwrap();
        adam.step(&mut store, &grads_with(&[("w", Tensor::scalar(g2))]))
            .unwrap();

        let m1 = (1.0 - cfg.beta1) * g1;
        let v1 = (1.0 - cfg.beta2) * g1 * g1;
        let step1 = cfg.lr * (m1 / (1.0 - cfg.beta1)) / ((v1 / (1.0 - cfg.beta2)).sqrt() + cfg.eps);
        let m2 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * g2;
        let v2 = cfg.beta2 * v1 + (1.0 - cfg.beta2) * g2 * g2;
        let bc1 = 1.0 - cfg.beta1 * cfg.beta1;
        let bc2 = 1.0 - cfg.beta2 * cfg.beta2;
        let step2 = cfg.lr * (m2 / bc1) / ((v2 / bc2).sqrt() + cfg.eps);
        let expected = 0.0 - step1 - step2;

        let got = store.get("w").unwrap().get(0, 0);
        assert!((got - expected).abs() < 1e-15, "got {got}, want {expected}");
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg).unwrap();
        let t = Tensor::from_values(2, 3, vec![0.5, -1.25, 3.0, 0.0, 7.5, -0.125]);
        let mut store = store_with(&[("w", t.clone())]);
        for k in 0..5 {
            let g = Tensor::from_values(2, 3, vec![k as f64 + 0.1; 6]);
            adam.step(&mut store, &grads_with(&[("w", g)])).unwrap();
        }
        assert_eq!(store.get("w").unwrap().values, t.values);
    }

    #[test]
    fn steps_are_bitwise_deterministic() {
        let run = || {
            let mut adam = Adam::new(AdamConfig::default()).unwrap();
            let mut store = store_with(&[
                ("a", Tensor::from_values(1, 3, vec![0.1, -0.2, 0.3])),
                ("b", Tensor::scalar(2.0)),
            ]);
            for k in 1..=7 {
                let grads = grads_with(&[
                    ("a", Tensor::from_values(1, 3, vec![0.01 * k as f64, -0.4, 1.0])),
                    ("b", Tensor::scalar(-0.05 * k as f64)),
                ]);
                adam.step(&mut store, &grads).unwrap();
            }
            store
        };
        let s1 = run();
        let s2 = run();
        assert_eq!(s1.tensors, s2.tensors);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let target = [3.0, -1.5, 0.25];
        let mut adam = Adam::new(AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        })
        .unwrap();
        let mut store = store_with(&[("w", Tensor::from_values(1, 3, vec![0.0, 0.0, 0.0]))]);
        for _ in 0..2000 {
            let w = store.get("w").unwrap();
            let g: Vec<f64> = (0..3).map(|i| 2.0 * (w.values[i] - target[i])).collect();
            adam.step(&mut store, &grads_with(&[("w", Tensor::from_values(1, 3, g))]))
                .unwrap();
        }
        let w = store.get("w").unwrap();
        for i in 0..3 {
            assert!(
                (w.values[i] - target[i]).abs() < 1e-3,
                "coordinate {i}: {} vs {}",
                w.values[i],
                target[i]
            );
        }
    }

    #[test]
    fn absent_parameter_is_untouched_and_keeps_fresh_bias_correction() {
        // "late" receives its first gradient on the third step. Its update
        // must equal a first step of a fresh optimizer, not a step-3 update
        // with decayed corrections.
        let g = 0.7;
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg).unwrap();
        let mut store = store_with(&[
            ("early", Tensor::scalar(0.0)),
            ("late", Tensor::scalar(1.0)),
        ]);
        for _ in 0..2 {
            adam.step(&mut store, &grads_with(&[("early", Tensor::scalar(0.5))]))
                .unwrap();
        }
        assert_eq!(store.get("late").unwrap().get(0, 0), 1.0);

        adam.step(
            &mut store,
            &grads_with(&[("early", Tensor::scalar(0.5)), ("late", Tensor::scalar(g))]),
        )
        .unwrap();
        let expected = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
        let got = store.get("late").unwrap().get(0, 0);
        assert!((got - expected).abs() < 1e-12, "got {got}, want {expected}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut store = store_with(&[("w", Tensor::scalar(1.0))]);

        let err = adam.step(&mut store, &grads_with(&[("nope", Tensor::scalar(1.0))]));
        assert!(matches!(err, Err(NumericsError::UnknownParameter(_))));

        let err = adam.step(
            &mut store,
            &grads_with(&[("w", Tensor::from_values(1, 2, vec![1.0, 2.0]))]),
        );
        assert!(matches!(err, Err(NumericsError::ShapeMismatch { .. })));

        let err = adam.step(&mut store, &grads_with(&[("w", Tensor::scalar(f64::NAN))]));
        assert!(matches!(err, Err(NumericsError::Domain(_))));
        assert_eq!(store.get("w").unwrap().get(0, 0), 1.0);

        assert!(Adam::new(AdamConfig {
            lr: -1.0,
            ..AdamConfig::default()
        })
        .is_err());
        assert!(Adam::new(AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        })
        .is_err());
        assert!(Adam::new(AdamConfig {
            eps: 0.0,
            ..AdamConfig::default()
        })
        .is_err());
    }
}
