//! Training objectives: per-segment cross entropy on continuation
//! conditionals, a Huber penalty on expected watch time, and an ordering
//! regularizer on the marginal curve.
//!
//! Each loss exists twice: a pure function over slices (used by tests and
//! reporting) and a tape builder (used by training). Both run the same
//! arithmetic; a consistency test keeps them aligned.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::tape::{NodeId, Tape};

/// Conditionals are clamped into this interval before any logarithm.
pub const PROB_CLAMP_LO: f64 = 1e-7;
pub const PROB_CLAMP_HI: f64 = 1.0 - 1e-7;

#[derive(Debug, thiserror::Error)]
#[error("invalid loss config: {0}")]
pub struct LossConfigError(pub String);

/// Loss mixing weights and shape constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the sequential cross entropy.
    pub lambda_1: f64,
    /// Weight of the Huber watch-time penalty.
    pub lambda_2: f64,
    /// Weight of the ordering regularizer.
    pub lambda_3: f64,
    /// Base weight of the per-segment CE terms.
    pub omega_0: f64,
    /// Exponential decay rate of the per-segment CE weights.
    pub rho: f64,
    /// Huber transition point in seconds.
    pub delta: f64,
    /// Hinge margin of the ordering penalty.
    pub epsilon: f64,
    /// Weight of the total-variation term inside the ordering penalty.
    pub mu: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_1: 1.0,
            lambda_2: 0.1,
            lambda_3: 0.01,
            omega_0: 1.0,
            rho: 0.1,
            delta: 5.0,
            epsilon: 0.0,
            mu: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossConfigError> {
        for (name, v) in [
            ("lambda_1", self.lambda_1),
            ("lambda_2", self.lambda_2),
            ("lambda_3", self.lambda_3),
            ("rho", self.rho),
            ("epsilon", self.epsilon),
            ("mu", self.mu),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(LossConfigError(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.lambda_1 == 0.0 && self.lambda_2 == 0.0 && self.lambda_3 == 0.0 {
            return Err(LossConfigError("all three lambda weights are zero".into()));
        }
        if !(self.omega_0 > 0.0) {
            return Err(LossConfigError(format!("omega_0 must be > 0, got {}", self.omega_0)));
        }
        if !(self.delta > 0.0) {
            return Err(LossConfigError(format!("delta must be > 0, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Position weight w_i = omega_0 * exp(-rho * i).
pub fn position_weight(omega_0: f64, rho: f64, i: usize) -> f64 {
    omega_0 * (-rho * i as f64).exp()
}

/// Per-example sequential cross entropy over the continuation conditionals.
/// Masked positions contribute zero; Watched counts as y = 1, Stopped as
/// y = 0.
pub fn loss_seq(q: &[f64], labels: &[Label], omega_0: f64, rho: f64) -> f64 {
    assert_eq!(q.len(), labels.len());
    let mut total = 0.0;
    for (i, (&qi, label)) in q.iter().zip(labels).enumerate() {
        let qc = qi.clamp(PROB_CLAMP_LO, PROB_CLAMP_HI);
        let w = position_weight(omega_0, rho, i);
        match label {
            Label::Watched => total += w * -qc.ln(),
            Label::Stopped => total += w * -(1.0 - qc).ln(),
            Label::Masked => {}
        }
    }
    total
}

/// Huber penalty on the watch-time residual e = t_true - t_pred.
pub fn loss_huber(t_pred: f64, t_true: f64, delta: f64) -> f64 {
    crate::tensor::kernels::huber(t_true - t_pred, delta)
}

/// Ordering penalty on the marginal curve: a hinge on increases plus a
/// total-variation term.
pub fn loss_ord(p: &[f64], epsilon: f64, mu: f64) -> f64 {
    let mut hinge = 0.0;
    let mut tv = 0.0;
    for w in p.windows(2) {
        hinge += (w[1] - w[0] + epsilon).max(0.0);
        tv += (w[1] - w[0]).abs();
    }
    hinge + mu * tv
}

/// Weighted composite loss for one example.
pub fn loss_total(
    q: &[f64],
    p: &[f64],
    labels: &[Label],
    t_pred: f64,
    t_true: f64,
    cfg: &LossConfig,
) -> f64 {
    cfg.lambda_1 * loss_seq(q, labels, cfg.omega_0, cfg.rho)
        + cfg.lambda_2 * loss_huber(t_pred, t_true, cfg.delta)
        + cfg.lambda_3 * loss_ord(p, cfg.epsilon, cfg.mu)
}

/// Component nodes of one example's loss on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub seq: NodeId,
    pub huber: NodeId,
    pub ord: NodeId,
    pub total: NodeId,
}

/// Build the composite loss for one example on the tape. `q` and `p` are
/// 1 x M rows; `t_pred` is a 1 x 1 scalar node.
pub fn build_loss(
    tape: &mut Tape,
    q: NodeId,
    p: NodeId,
    t_pred: NodeId,
    labels: &[Label],
    t_true: f64,
    cfg: &LossConfig,
) -> LossNodes {
    let m = tape.shape(q).1;
    assert_eq!(labels.len(), m);

    // Sequential CE: constant weight rows fold the labels and the position
    // decay together, so masked positions multiply the logs by zero.
    let mut w_pos = vec![0.0; m];
    let mut w_neg = vec![0.0; m];
    for (i, label) in labels.iter().enumerate() {
        let w = position_weight(cfg.omega_0, cfg.rho, i);
        match label {
            Label::Watched => w_pos[i] = w,
            Label::Stopped => w_neg[i] = w,
            Label::Masked => {}
        }
    }
    let qc = tape.clamp(q, PROB_CLAMP_LO, PROB_CLAMP_HI);
    let log_q = tape.log(qc);
    let neg_qc = tape.scale(qc, -1.0);
    let one_minus = tape.add_const(neg_qc, 1.0);
    let log_1mq = tape.log(one_minus);
    let wp = tape.input_row(w_pos);
    let wn = tape.input_row(w_neg);
    let pos_term = tape.mul(log_q, wp);
    let neg_term = tape.mul(log_1mq, wn);
    let ce_sum = tape.add(pos_term, neg_term);
    let ce_sum = tape.sum_all(ce_sum);
    let seq = tape.scale(ce_sum, -1.0);

    // Huber on the residual t_true - t_pred.
    let neg_pred = tape.scale(t_pred, -1.0);
    let resid = tape.add_const(neg_pred, t_true);
    let huber = tape.huber(resid, cfg.delta);
    let huber = tape.sum_all(huber);

    // Ordering penalty over consecutive differences of p.
    let ord = if m >= 2 {
        let head = tape.slice_cols(p, 0, m - 1);
        let tail = tape.slice_cols(p, 1, m - 1);
        let diff = tape.sub(tail, head);
        let shifted = tape.add_const(diff, cfg.epsilon);
        let hinge = tape.relu(shifted);
        let hinge = tape.sum_all(hinge);
        let tv = tape.abs(diff);
        let tv = tape.sum_all(tv);
        let tv = tape.scale(tv, cfg.mu);
        tape.add(hinge, tv)
    } else {
        tape.input_scalar(0.0)
    };

    let s1 = tape.scale(seq, cfg.lambda_1);
    let s2 = tape.scale(huber, cfg.lambda_2);
    let s3 = tape.scale(ord, cfg.lambda_3);
    let s12 = tape.add(s1, s2);
    let total = tape.add(s12, s3);
    LossNodes { seq, huber, ord, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn seq_single_segment_is_ln2_at_half() {
        let v = loss_seq(&[0.5], &[Label::Watched], 1.0, 0.0);
        assert!((v - LN2).abs() < 1e-12);
        let v = loss_seq(&[0.5], &[Label::Stopped], 1.0, 0.0);
        assert!((v - LN2).abs() < 1e-12);
    }

    #[test]
    fn seq_masked_contributes_nothing() {
        let q = [0.9, 0.123, 0.456];
        let v = loss_seq(&q, &[Label::Watched, Label::Masked, Label::Masked], 1.0, 0.5);
        assert!((v - -0.9_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn seq_position_weights_halve_at_rho_ln2() {
        // With rho = ln 2 the weights are 1, 1/2, 1/4.
        let q = [0.5, 0.5, 0.5];
        let labels = [Label::Watched; 3];
        let v = loss_seq(&q, &labels, 1.0, LN2);
        assert!((v - LN2 * (1.0 + 0.5 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn seq_clamps_extreme_probabilities() {
        let v = loss_seq(&[0.0], &[Label::Watched], 1.0, 0.0);
        assert!((v - -PROB_CLAMP_LO.ln()).abs() < 1e-9);
        assert!(v.is_finite());
    }

    #[test]
    fn huber_known_values() {
        assert_eq!(loss_huber(0.0, 0.5, 1.0), 0.125);
        assert_eq!(loss_huber(0.0, 2.0, 1.0), 1.5);
        // At the transition point the quadratic and linear branches agree.
        let delta = 1.3;
        assert!((loss_huber(0.0, delta, delta) - 0.5 * delta * delta).abs() < 1e-12);
    }

    #[test]
    fn huber_derivative_is_continuous_at_transition() {
        let delta = 1.0;
        let h = 1e-6;
        for &e in &[delta, -delta] {
            let left = (loss_huber(0.0, e, delta) - loss_huber(0.0, e - h, delta)) / h;
            let right = (loss_huber(0.0, e + h, delta) - loss_huber(0.0, e, delta)) / h;
            assert!((left - right).abs() < 1e-5, "kink at e = {e}");
        }
    }

    #[test]
    fn ord_known_values() {
        // Increase of 0.1 with margin 0.05 and mu 0: hinge only.
        let v = loss_ord(&[0.5, 0.6], 0.05, 0.0);
        assert!((v - 0.15).abs() < 1e-12);
        // Monotone curve with eps 0: hinge is zero, TV picks up the drop.
        let v = loss_ord(&[0.6, 0.5], 0.0, 1.0);
        assert!((v - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ord_zero_on_monotone_curves_with_zero_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let mut p: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
            p.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert_eq!(loss_ord(&p, 0.0, 0.0), 0.0);
        }
    }

    #[test]
    fn total_is_nonnegative_and_additive() {
        let cfg = LossConfig::default();
        let q = [0.8, 0.7, 0.6, 0.5];
        let p = [0.8, 0.56, 0.336, 0.168];
        let labels = [Label::Watched, Label::Watched, Label::Stopped, Label::Masked];
        let total = loss_total(&q, &p, &labels, 20.0, 25.0, &cfg);
        assert!(total >= 0.0);
        let expect = cfg.lambda_1 * loss_seq(&q, &labels, cfg.omega_0, cfg.rho)
            + cfg.lambda_2 * loss_huber(20.0, 25.0, cfg.delta)
            + cfg.lambda_3 * loss_ord(&p, cfg.epsilon, cfg.mu);
        assert_eq!(total, expect);
    }

    #[test]
    fn config_rejects_all_zero_lambdas_and_bad_delta() {
        let mut cfg = LossConfig::default();
        cfg.lambda_1 = 0.0;
        cfg.lambda_2 = 0.0;
        cfg.lambda_3 = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = LossConfig::default();
        cfg.delta = 0.0;
        assert!(cfg.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    #[test]
    fn tape_loss_matches_pure_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = LossConfig::default();
        for _ in 0..200 {
            let m = rng.gen_range(2..9);
            let q: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..0.99)).collect();
            let mut p = Vec::with_capacity(m);
            let mut run = 1.0;
            for &qi in &q {
                run *= qi;
                p.push(run);
            }
            let stop = rng.gen_range(0..=m);
            let labels: Vec<Label> = (0..m)
                .map(|i| {
                    if i < stop {
                        Label::Watched
                    } else if i == stop {
                        Label::Stopped
                    } else {
                        Label::Masked
                    }
                })
                .collect();
            let t_true = rng.gen_range(0.0..60.0);
            let t_pred = rng.gen_range(0.0..60.0);

            let mut tape = Tape::new();
            let qn = tape.input_row(q.clone());
            let pn = tape.input_row(p.clone());
            let tp = tape.input_scalar(t_pred);
            let nodes = build_loss(&mut tape, qn, pn, tp, &labels, t_true, &cfg);
            let tape_total = tape.value_scalar(nodes.total);
            let pure_total = loss_total(&q, &p, &labels, t_pred, t_true, &cfg);
            assert!(
                (tape_total - pure_total).abs() < 1e-12,
                "tape {tape_total} vs pure {pure_total}"
            );
            let tape_seq = tape.value_scalar(nodes.seq);
            let pure_seq = loss_seq(&q, &labels, cfg.omega_0, cfg.rho);
            assert!((tape_seq - pure_seq).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_loss_gradients_flow_to_q() {
        let cfg = LossConfig::default();
        let labels = vec![Label::Watched, Label::Stopped, Label::Masked];
        let mut store = crate::tensor::ParameterStore::new(0);
        store.insert("q", crate::tensor::Tensor::row(vec![0.7, 0.4, 0.3]));
        let mut tape = Tape::new();
        let q = tape.param(&store, "q");
        let p = tape.cumprod_row(q);
        let d = tape.input_row(vec![5.0, 5.0, 5.0]);
        let dt = tape.transpose(d);
        let t_pred = tape.matmul(p, dt);
        let nodes = build_loss(&mut tape, q, p, t_pred, &labels, 9.0, &cfg);
        let grads = tape.backward(nodes.total).unwrap();
        let gq = &grads["q"].values;
        assert!(gq[0].abs() > 0.0 && gq[1].abs() > 0.0);
        // The masked position still receives gradient through p and huber,
        // but not through the CE term; check CE alone.
        let mut tape = Tape::new();
        let q = tape.param(&store, "q");
        let p = tape.cumprod_row(q);
        let t_pred = tape.input_scalar(9.0);
        let nodes = build_loss(&mut tape, q, p, t_pred, &labels, 9.0, &cfg);
        let grads = tape.backward(nodes.seq).unwrap();
        assert_eq!(grads["q"].values[2], 0.0);
    }
}
