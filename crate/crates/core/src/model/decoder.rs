//! From encoded segment tokens to a watch-time prediction.
//!
//! The head maps each token to an interest score with a shared MLP plus a
//! low-rank bilinear interaction across segments, adds a learned positional
//! bias, and turns the scores into a survival curve: either independent
//! conditionals chained by a cumulative product (CHAIN) or a left-to-right
//! recursion with an exponential influence kernel (RECURSIVE). Expected
//! watch time is the durations-weighted sum of the marginals.

use crate::tape::{NodeId, Tape};
use crate::tensor::{NumericsError, ParameterStore, Tensor};

use super::{ForwardNodes, ModelConfig, PhiKind};

/// Decoded probabilities for one example, off the tape. `q` holds the
/// conditional continuation probabilities, `p` the marginal probabilities of
/// entering each segment, `d` the segment durations in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentCurve {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub expected_time_sec: f64,
    pub d: Vec<f64>,
}

/// Tape nodes for the two probability rows, 1 x M each.
pub struct DecodeNodes {
    pub p: NodeId,
    pub q: NodeId,
}

/// Interest scores z_i = w1' h_i + sum_{j != i} h_i' A h_j
/// + sum_k <r_k, h_i><c_k, h_i> + b_f, with h_i the shared-MLP image of
/// token i and A = sum_k lambda_k r_k c_k'. The cross term never builds A:
/// with column sums of the factor projections it costs O(M r d). Works for
/// any row count, so a single-segment matrix simply has an empty cross sum.
pub fn interest_scores(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &ModelConfig,
    segs: NodeId,
) -> Result<NodeId, NumericsError> {
    let d = cfg.tower.d_model;
    let (m, dcols) = tape.shape(segs);
    if dcols != d {
        return Err(NumericsError::ShapeMismatch {
            op: "interest_scores",
            lhs: (m, dcols),
            rhs: (m, d),
        });
    }
    for name in ["int_mlp_w1", "int_mlp_b1", "int_mlp_w2", "int_mlp_b2", "int_w1", "int_bf"] {
        let _ = store.get(name)?;
    }
    let w1 = tape.param(store, "int_mlp_w1");
    let b1 = tape.param(store, "int_mlp_b1");
    let w2 = tape.param(store, "int_mlp_w2");
    let b2 = tape.param(store, "int_mlp_b2");
    let lin1 = tape.matmul(segs, w1);
    let pre = tape.add(lin1, b1);
    let act = tape.gelu(pre);
    let lin2 = tape.matmul(act, w2);
    let h = tape.add(lin2, b2);

    let w_lin = tape.param(store, "int_w1");
    let mut z_col = tape.matmul(h, w_lin);

    let r = cfg.decoder.bilinear_rank;
    if r > 0 {
        for name in ["int_rfac", "int_cfac", "int_lambda"] {
            let _ = store.get(name)?;
        }
        let rfac = tape.param(store, "int_rfac");
        let cfac = tape.param(store, "int_cfac");
        let lambda = tape.param(store, "int_lambda");
        let rfac_t = tape.transpose(rfac);
        let cfac_t = tape.transpose(cfac);
        let hr = tape.matmul(h, rfac_t);
        let hc = tape.matmul(h, cfac_t);

        // sum_{j != i} <c_k, h_j> = column sum minus own row.
        let col_sum = tape.sum_rows(hc);
        let col_rep = tape.repeat_rows(col_sum, m);
        let others = tape.sub(col_rep, hc);
        let cross_terms = tape.mul(hr, others);
        let lambda_rep = tape.repeat_rows(lambda, m);
        let cross_weighted = tape.mul(cross_terms, lambda_rep);
        let cross = tape.sum_cols(cross_weighted);

        let self_terms = tape.mul(hr, hc);
        let self_sum = tape.sum_cols(self_terms);

        let with_cross = tape.add(z_col, cross);
        z_col = tape.add(with_cross, self_sum);
    }
    let bf = tape.param(store, "int_bf");
    let z_col = tape.add(z_col, bf);
    Ok(tape.transpose(z_col))
}

/// s_i = z_i + w_p * phi(i) + b_p.
pub fn positional_bias(
    tape: &mut Tape,
    store: &ParameterStore,
    z: NodeId,
    phi: PhiKind,
    m: usize,
) -> Result<NodeId, NumericsError> {
    let (rows, cols) = tape.shape(z);
    if rows != 1 || cols != m {
        return Err(NumericsError::ShapeMismatch {
            op: "positional_bias",
            lhs: (rows, cols),
            rhs: (1, m),
        });
    }
    for name in ["pos_wp", "pos_bp"] {
        let _ = store.get(name)?;
    }
    let wp = tape.param(store, "pos_wp");
    let bp = tape.param(store, "pos_bp");
    let phi_row = tape.input_row((0..m).map(|i| phi.eval(i, m)).collect());
    let scaled = tape.mul(phi_row, wp);
    let with_phi = tape.add(z, scaled);
    Ok(tape.add(with_phi, bp))
}

/// CHAIN decoding: q_i = sigmoid(s_i / tau), p = cumulative product of q.
/// All positions are computed in one pass; no sampling anywhere.
pub fn decode_chain(tape: &mut Tape, s: NodeId, tau: f64) -> DecodeNodes {
    assert!(tau > 0.0, "tau must be positive, got {tau}");
    let scaled = tape.scale(s, 1.0 / tau);
    let q = tape.sigmoid(scaled);
    let p = tape.cumprod_row(q);
    DecodeNodes { p, q }
}

/// RECURSIVE decoding: p_0 = sigmoid(s_0), then
/// p_i = sigmoid(s_i + gamma * sum_{j<i} exp(-alpha (i-j)) p_j), evaluated
/// left to right with earlier marginals feeding later ones. Conditionals are
/// reported as the ratio p_i / p_{i-1} clipped into (0, 1].
pub fn decode_recursive(tape: &mut Tape, s: NodeId, gamma: f64, alpha: f64) -> DecodeNodes {
    assert!(alpha > 0.0, "alpha must be positive, got {alpha}");
    let (rows, m) = tape.shape(s);
    assert_eq!(rows, 1, "decode_recursive expects a score row");
    let mut p_nodes: Vec<NodeId> = Vec::with_capacity(m);
    for i in 0..m {
        let s_i = tape.slice_cols(s, i, 1);
        let arg = if i == 0 {
            s_i
        } else {
            let kernel: Vec<f64> = (0..i).map(|j| (-alpha * (i - j) as f64).exp()).collect();
            let k_row = tape.input_row(kernel);
            let prev = tape.concat_cols(&p_nodes);
            let weighted = tape.mul(prev, k_row);
            let influence = tape.sum_all(weighted);
            let scaled = tape.scale(influence, gamma);
            tape.add(s_i, scaled)
        };
        p_nodes.push(tape.sigmoid(arg));
    }
    let p = tape.concat_cols(&p_nodes);
    let mut q_nodes: Vec<NodeId> = Vec::with_capacity(m);
    q_nodes.push(p_nodes[0]);
    for i in 1..m {
        let ratio = tape.div(p_nodes[i], p_nodes[i - 1]);
        q_nodes.push(tape.clamp(ratio, 0.0, 1.0));
    }
    let q = tape.concat_cols(&q_nodes);
    DecodeNodes { p, q }
}

/// Expected watch time sum_i p_i d_i as a 1 x 1 node.
pub fn aggregate(tape: &mut Tape, p: NodeId, durations: &[f64]) -> NodeId {
    let (rows, m) = tape.shape(p);
    assert_eq!(rows, 1, "aggregate expects a marginal row");
    assert_eq!(m, durations.len(), "durations must match segment count");
    let d_col = tape.input(&Tensor::from_values(m, 1, durations.to_vec()));
    tape.matmul(p, d_col)
}

/// Read a finished forward pass off the tape into a plain curve.
pub fn curve_from_nodes(tape: &Tape, fwd: &ForwardNodes, durations: &[f64]) -> SegmentCurve {
    SegmentCurve {
        q: tape.values(fwd.q).to_vec(),
        p: tape.values(fwd.p).to_vec(),
        expected_time_sec: tape.value_scalar(fwd.t_pred),
        d: durations.to_vec(),
    }
}
