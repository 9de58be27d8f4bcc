//! L-layer cross/self-attention encoder over the user and segment streams.
//!
//! Each layer forms four attention maps from shared per-stream Q/K/V
//! projections: segments attending to user tokens (A_UV), user tokens to
//! segments (A_VU), and one self map per stream (A_VV, A_UU). The stream
//! updates mix cross and self context, then residual + layer norm. Padded
//! user rows are masked out of every map in which they would be keys, so
//! padding length never leaks into the numbers.

use crate::tape::{NodeId, Tape};
use crate::tensor::{NumericsError, ParameterStore, Tensor};

use super::{head_dim, TowerConfig};
use super::tower::UserState;

/// One head's four attention maps, recorded as plain tensors for
/// diagnostics; rows are queries, columns keys.
pub struct AttnMaps {
    pub a_uv: Tensor,
    pub a_vu: Tensor,
    pub a_vv: Tensor,
    pub a_uu: Tensor,
}

/// Attention maps of every head in one layer, in head order.
pub struct LayerTrace {
    pub heads: Vec<AttnMaps>,
}

fn shape_err(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> NumericsError {
    NumericsError::ShapeMismatch { op, lhs, rhs }
}

/// Run the configured number of encoder layers. Returns the updated user
/// stream (same mask), updated segment tokens, and the per-layer attention
/// traces. With zero layers both streams pass through untouched.
pub fn cross_encode(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &TowerConfig,
    user: &UserState,
    segs: NodeId,
) -> Result<(UserState, NodeId, Vec<LayerTrace>), NumericsError> {
    let d = cfg.d_model;
    let (nu, du) = tape.shape(user.tokens);
    let (m, dv) = tape.shape(segs);
    if du != d || dv != d {
        return Err(shape_err("cross_encode", (nu, du), (m, dv)));
    }
    if user.mask.len() != nu {
        return Err(shape_err("cross_encode mask", (user.mask.len(), 1), (nu, 1)));
    }
    if m != cfg.m {
        return Err(shape_err("cross_encode segments", (m, dv), (cfg.m, d)));
    }

    let dk = head_dim(cfg);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut u = user.tokens;
    let mut v = segs;
    let mut traces = Vec::with_capacity(cfg.l_layers);

    for l in 0..cfg.l_layers {
        for name in [
            format!("enc{l:02}_wq_u"),
            format!("enc{l:02}_wk_u"),
            format!("enc{l:02}_wv_u"),
            format!("enc{l:02}_wq_v"),
            format!("enc{l:02}_wk_v"),
            format!("enc{l:02}_wv_v"),
            format!("enc{l:02}_ln_u_gain"),
            format!("enc{l:02}_ln_u_bias"),
            format!("enc{l:02}_ln_v_gain"),
            format!("enc{l:02}_ln_v_bias"),
        ] {
            let _ = store.get(&name)?;
        }
        let wq_u = tape.param(store, &format!("enc{l:02}_wq_u"));
        let wk_u = tape.param(store, &format!("enc{l:02}_wk_u"));
        let wv_u = tape.param(store, &format!("enc{l:02}_wv_u"));
        let wq_v = tape.param(store, &format!("enc{l:02}_wq_v"));
        let wk_v = tape.param(store, &format!("enc{l:02}_wk_v"));
        let wv_v = tape.param(store, &format!("enc{l:02}_wv_v"));

        let q_u = tape.matmul(u, wq_u);
        let k_u = tape.matmul(u, wk_u);
        let val_u = tape.matmul(u, wv_u);
        let q_v = tape.matmul(v, wq_v);
        let k_v = tape.matmul(v, wk_v);
        let val_v = tape.matmul(v, wv_v);

        let mut v_heads = Vec::with_capacity(cfg.heads);
        let mut u_heads = Vec::with_capacity(cfg.heads);
        let mut head_traces = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qu = tape.slice_cols(q_u, h * dk, dk);
            let ku = tape.slice_cols(k_u, h * dk, dk);
            let vu = tape.slice_cols(val_u, h * dk, dk);
            let qv = tape.slice_cols(q_v, h * dk, dk);
            let kv = tape.slice_cols(k_v, h * dk, dk);
            let vv = tape.slice_cols(val_v, h * dk, dk);

            let ku_t = tape.transpose(ku);
            let kv_t = tape.transpose(kv);

            let uv_logits = tape.matmul(qv, ku_t);
            let uv_scaled = tape.scale(uv_logits, scale);
            let a_uv = tape.softmax_rows(uv_scaled, Some(user.mask.clone()));

            let vv_logits = tape.matmul(qv, kv_t);
            let vv_scaled = tape.scale(vv_logits, scale);
            let a_vv = tape.softmax_rows(vv_scaled, None);

            let vu_logits = tape.matmul(qu, kv_t);
            let vu_scaled = tape.scale(vu_logits, scale);
            let a_vu = tape.softmax_rows(vu_scaled, None);

            let uu_logits = tape.matmul(qu, ku_t);
            let uu_scaled = tape.scale(uu_logits, scale);
            let a_uu = tape.softmax_rows(uu_scaled, Some(user.mask.clone()));

            let v_cross = tape.matmul(a_uv, vu);
            let v_self = tape.matmul(a_vv, vv);
            v_heads.push(tape.add(v_cross, v_self));
            let u_cross = tape.matmul(a_vu, vv);
            let u_self = tape.matmul(a_uu, vu);
            u_heads.push(tape.add(u_cross, u_self));

            head_traces.push(AttnMaps {
                a_uv: tape.tensor(a_uv),
                a_vu: tape.tensor(a_vu),
                a_vv: tape.tensor(a_vv),
                a_uu: tape.tensor(a_uu),
            });
        }
        let v_upd = if v_heads.len() == 1 { v_heads[0] } else { tape.concat_cols(&v_heads) };
        let u_upd = if u_heads.len() == 1 { u_heads[0] } else { tape.concat_cols(&u_heads) };

        let ln_v_gain = tape.param(store, &format!("enc{l:02}_ln_v_gain"));
        let ln_v_bias = tape.param(store, &format!("enc{l:02}_ln_v_bias"));
        let ln_u_gain = tape.param(store, &format!("enc{l:02}_ln_u_gain"));
        let ln_u_bias = tape.param(store, &format!("enc{l:02}_ln_u_bias"));
        let v_res = tape.add(v, v_upd);
        v = tape.layer_norm(v_res, ln_v_gain, ln_v_bias);
        let u_res = tape.add(u, u_upd);
        u = tape.layer_norm(u_res, ln_u_gain, ln_u_bias);

        traces.push(LayerTrace { heads: head_traces });
    }

    Ok((
        UserState { tokens: u, mask: user.mask.clone() },
        v,
        traces,
    ))
}
