//! User and segment representation towers.
//!
//! The user side combines a static id embedding with a self-attention
//! summary of the watch history through a learned sigmoid gate. The video
//! side splits one video embedding into M chronologically ordered segment
//! tokens via per-segment MLPs plus a sinusoidal position code.

use crate::tape::{NodeId, Tape};
use crate::tensor::{NumericsError, ParameterStore, Tensor};

use super::{head_dim, sinusoidal_pe, TowerConfig};

/// The user stream entering the cross encoder: the fused user token followed
/// by the encoded history tokens, padded to a fixed l_hist + 1 rows. `mask`
/// marks which rows are real; padded rows are zero and must never receive
/// attention weight.
pub struct UserState {
    pub tokens: NodeId,
    pub mask: Vec<bool>,
}

/// Static user preference vector: one row of the user embedding table.
/// Unknown users resolve to row 0 before this is called (the vocabulary's
/// OOV slot), so every index is a plain lookup.
pub fn embed_user(
    tape: &mut Tape,
    store: &ParameterStore,
    user_idx: usize,
) -> Result<NodeId, NumericsError> {
    let _ = store.get("user_embed")?;
    let table = tape.param(store, "user_embed");
    Ok(tape.gather_rows(table, &[user_idx]))
}

/// Encode the watch history with one multi-head self-attention layer and
/// masked mean pooling. Returns the pooled summary U_seq and, when the
/// history is non-empty, the encoded per-item tokens for the user stream.
/// An empty history yields the learned `hist_default` vector and no tokens.
pub fn encode_history(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &TowerConfig,
    history: &[(usize, usize)],
) -> Result<(NodeId, Option<NodeId>), NumericsError> {
    for name in ["hist_video_embed", "behavior_embed", "hist_attn_wq", "hist_default"] {
        let _ = store.get(name)?;
    }
    if history.is_empty() {
        let default = tape.param(store, "hist_default");
        return Ok((default, None));
    }
    let n = history.len();
    let video_idx: Vec<usize> = history.iter().map(|&(v, _)| v).collect();
    let behavior_idx: Vec<usize> = history.iter().map(|&(_, b)| b).collect();

    let video_tab = tape.param(store, "hist_video_embed");
    let behavior_tab = tape.param(store, "behavior_embed");
    let pos_tab = tape.param(store, "hist_pos_embed");
    let videos = tape.gather_rows(video_tab, &video_idx);
    let behaviors = tape.gather_rows(behavior_tab, &behavior_idx);
    let positions = tape.slice_rows(pos_tab, 0, n);
    let sum = tape.add(videos, behaviors);
    let h = tape.add(sum, positions);

    let wq = tape.param(store, "hist_attn_wq");
    let wk = tape.param(store, "hist_attn_wk");
    let wv = tape.param(store, "hist_attn_wv");
    let wo = tape.param(store, "hist_attn_wo");
    let q = tape.matmul(h, wq);
    let k = tape.matmul(h, wk);
    let v = tape.matmul(h, wv);

    let dk = head_dim(cfg);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut head_outs = Vec::with_capacity(cfg.heads);
    for hd in 0..cfg.heads {
        let qh = tape.slice_cols(q, hd * dk, dk);
        let kh = tape.slice_cols(k, hd * dk, dk);
        let vh = tape.slice_cols(v, hd * dk, dk);
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt);
        let scaled = tape.scale(logits, scale);
        let attn = tape.softmax_rows(scaled, None);
        head_outs.push(tape.matmul(attn, vh));
    }
    let ctx = if head_outs.len() == 1 {
        head_outs[0]
    } else {
        tape.concat_cols(&head_outs)
    };
    let encoded = tape.matmul(ctx, wo);
    let pooled = tape.sum_rows(encoded);
    let u_seq = tape.scale(pooled, 1.0 / n as f64);
    Ok((u_seq, Some(encoded)))
}

/// Gated blend of the static and sequential user vectors:
/// U = g .* U_id + (1 - g) .* U_seq with g = sigmoid(W_g [U_id; U_seq] + b).
/// Each output element lies between the corresponding elements of the two
/// inputs, whatever the gate does.
pub fn fuse_gate(
    tape: &mut Tape,
    store: &ParameterStore,
    u_id: NodeId,
    u_seq: NodeId,
) -> Result<NodeId, NumericsError> {
    for name in ["fuse_gate_w", "fuse_gate_b"] {
        let _ = store.get(name)?;
    }
    let w = tape.param(store, "fuse_gate_w");
    let b = tape.param(store, "fuse_gate_b");
    let cat = tape.concat_cols(&[u_id, u_seq]);
    let lin = tape.matmul(cat, w);
    let pre = tape.add(lin, b);
    let gate = tape.sigmoid(pre);
    let id_part = tape.mul(gate, u_id);
    let neg = tape.scale(gate, -1.0);
    let inv_gate = tape.add_const(neg, 1.0);
    let seq_part = tape.mul(inv_gate, u_seq);
    Ok(tape.add(id_part, seq_part))
}

/// Assemble the full user stream: fused token first, encoded history tokens
/// after it, zero rows to l_hist + 1 with the mask marking the padding.
pub fn build_user_state(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &TowerConfig,
    user_idx: usize,
    history: &[(usize, usize)],
) -> Result<UserState, NumericsError> {
    let u_id = embed_user(tape, store, user_idx)?;
    let (u_seq, encoded) = encode_history(tape, store, cfg, history)?;
    let fused = fuse_gate(tape, store, u_id, u_seq)?;

    let n = history.len();
    let mut parts = vec![fused];
    if let Some(tokens) = encoded {
        parts.push(tokens);
    }
    if n < cfg.l_hist {
        let pad = tape.input(&Tensor::zeros(cfg.l_hist - n, cfg.d_model));
        parts.push(pad);
    }
    let tokens = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
    let mut mask = vec![true; 1 + n];
    mask.extend(std::iter::repeat(false).take(cfg.l_hist - n));
    Ok(UserState { tokens, mask })
}

/// Split the target video into M segment tokens:
/// V_i = W2 GELU(W1 [v_video; e_i] + b1) + b2 + PE(i), with separate MLP
/// weights per segment unless the config ties them.
pub fn decompose_segments(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &TowerConfig,
    video_idx: usize,
) -> Result<NodeId, NumericsError> {
    for name in ["video_embed", "segment_index_embed"] {
        let _ = store.get(name)?;
    }
    let video_tab = tape.param(store, "video_embed");
    let index_tab = tape.param(store, "segment_index_embed");
    let video = tape.gather_rows(video_tab, &[video_idx]);

    let mut rows = Vec::with_capacity(cfg.m);
    for i in 0..cfg.m {
        let (w1, b1, w2, b2) = if cfg.tied_segment_mlp {
            ("seg_mlp_w1".to_string(), "seg_mlp_b1".to_string(), "seg_mlp_w2".to_string(), "seg_mlp_b2".to_string())
        } else {
            (
                format!("seg_mlp_{i:02}_w1"),
                format!("seg_mlp_{i:02}_b1"),
                format!("seg_mlp_{i:02}_w2"),
                format!("seg_mlp_{i:02}_b2"),
            )
        };
        let _ = store.get(&w1)?;
        let w1 = tape.param(store, &w1);
        let b1 = tape.param(store, &b1);
        let w2 = tape.param(store, &w2);
        let b2 = tape.param(store, &b2);

        let e_i = tape.gather_rows(index_tab, &[i]);
        let x = tape.concat_cols(&[video, e_i]);
        let lin1 = tape.matmul(x, w1);
        let pre = tape.add(lin1, b1);
        let act = tape.gelu(pre);
        let lin2 = tape.matmul(act, w2);
        let mut token = tape.add(lin2, b2);
        if cfg.use_segment_pe {
            let pe = tape.input_row(sinusoidal_pe(i, cfg.d_model));
            token = tape.add(token, pe);
        }
        rows.push(token);
    }
    Ok(tape.concat_rows(&rows))
}
