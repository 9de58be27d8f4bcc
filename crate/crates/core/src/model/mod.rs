//! The generative viewing-process model.
//!
//! Three stages, each in its own submodule:
//!
//! * [`tower`]: user representation (id embedding, history self-attention,
//!   gated fusion) and segment-token decomposition of the target video.
//! * [`encoder`]: L layers of user/segment cross- and self-attention.
//! * [`decoder`]: bilinear interest scores, positional bias, and the two
//!   probability decoders (chained conditionals or kernel recursion),
//!   aggregated into expected watch time.
//!
//! All learned state lives in a flat [`ParameterStore`] under the names laid
//! out by [`init_params`]; the forward pass is a pure function of the store
//! and the example, built on a [`Tape`] so gradients come from the same code
//! path that produced the values.

pub mod decoder;
pub mod encoder;
pub mod tower;

use serde::{Deserialize, Serialize};

use crate::tape::{NodeId, Tape};
use crate::tensor::{NumericsError, ParamInit, ParameterStore};

pub use decoder::{DecodeNodes, SegmentCurve};
pub use encoder::{AttnMaps, LayerTrace};
pub use tower::UserState;

/// Architecture of the representation stack. Vocab sizes are part of the
/// config because the embedding tables are sized by them; they come from the
/// training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    /// Token width d used by both streams.
    pub d_model: usize,
    /// Video embedding width fed to the segment MLPs.
    pub d_v: usize,
    /// Segment-index embedding width.
    pub d_p: usize,
    /// Hidden width of the segment MLPs and the interest MLP.
    pub hidden: usize,
    /// Attention heads; must divide d_model.
    pub heads: usize,
    /// Encoder layers L; 0 means the encoder is the identity.
    pub l_layers: usize,
    /// Maximum history length; the user stream is always l_hist + 1 tokens.
    pub l_hist: usize,
    /// Segments per video.
    pub m: usize,
    /// Number of user rows in the embedding table (slot 0 is OOV).
    pub n_users: usize,
    /// Number of video rows (slot 0 is OOV).
    pub n_videos: usize,
    /// Behavior-token vocabulary size B.
    pub n_behaviors: usize,
    /// Share one segment MLP across positions instead of one per segment.
    pub tied_segment_mlp: bool,
    /// Add the fixed sinusoidal PE(i) to segment tokens.
    pub use_segment_pe: bool,
}

impl Default for TowerConfig {
    fn default() -> Self {
        TowerConfig {
            d_model: 32,
            d_v: 32,
            d_p: 8,
            hidden: 64,
            heads: 2,
            l_layers: 2,
            l_hist: 20,
            m: 8,
            n_users: 1,
            n_videos: 1,
            n_behaviors: 5,
            tied_segment_mlp: false,
            use_segment_pe: true,
        }
    }
}

/// Which probability decoder turns scores into a curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    /// q_i = sigmoid(s_i / tau), p = cumulative product. Parallel across
    /// segments and monotone by construction.
    Chain,
    /// p_i = sigmoid(s_i + gamma * sum_{j<i} exp(-alpha (i-j)) p_j),
    /// evaluated left to right.
    Recursive,
}

/// Position encoding for the bias term s_i = z_i + w_p phi(i) + b_p.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiKind {
    /// phi(i) = ln(1 + i).
    Log1p,
    /// phi(i) = i / (M - 1), so the bias ramps linearly from 0 to 1.
    NormalizedLinear,
}

impl PhiKind {
    pub fn eval(self, i: usize, m: usize) -> f64 {
        match self {
            PhiKind::Log1p => (1.0 + i as f64).ln(),
            PhiKind::NormalizedLinear => {
                if m < 2 {
                    0.0
                } else {
                    i as f64 / (m - 1) as f64
                }
            }
        }
    }
}

/// Decoder hyperparameters. The learned pieces (bilinear factors, positional
/// bias weights) live in the parameter store; these are the structural knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub variant: Variant,
    /// Temperature for the chain decoder; must be positive.
    pub tau: f64,
    /// Recursion gain for the recursive decoder.
    pub gamma: f64,
    /// Kernel decay rate for the recursive decoder; must be positive.
    pub alpha: f64,
    /// Rank r of the bilinear interaction; 0 disables it, and r <= d_model / 2
    /// keeps it low-rank in earnest.
    pub bilinear_rank: usize,
    pub phi: PhiKind,
}

impl Default for DecoderParams {
    fn default() -> Self {
        DecoderParams {
            variant: Variant::Chain,
            tau: 1.0,
            gamma: 0.5,
            alpha: 0.5,
            bilinear_rank: 4,
            phi: PhiKind::Log1p,
        }
    }
}

/// Full model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub tower: TowerConfig,
    pub decoder: DecoderParams,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NumericsError> {
        let t = &self.tower;
        let d = &self.decoder;
        let fail = |msg: String| Err(NumericsError::Domain(msg));
        if t.d_model < 2 {
            return fail(format!("d_model must be >= 2, got {}", t.d_model));
        }
        if t.heads == 0 || t.d_model % t.heads != 0 {
            return fail(format!(
                "heads must be nonzero and divide d_model ({} heads, d_model {})",
                t.heads, t.d_model
            ));
        }
        if t.m < 2 {
            return fail(format!("m must be >= 2, got {}", t.m));
        }
        if t.d_v == 0 || t.d_p == 0 || t.hidden == 0 {
            return fail("d_v, d_p, and hidden must be nonzero".to_string());
        }
        if t.n_users == 0 || t.n_videos == 0 || t.n_behaviors == 0 {
            return fail("vocab sizes must be nonzero".to_string());
        }
        if d.tau <= 0.0 || !d.tau.is_finite() {
            return fail(format!("tau must be a positive real, got {}", d.tau));
        }
        if d.alpha <= 0.0 || !d.alpha.is_finite() {
            return fail(format!("alpha must be a positive real, got {}", d.alpha));
        }
        if !d.gamma.is_finite() {
            return fail("gamma must be finite".to_string());
        }
        if d.bilinear_rank > t.d_model / 2 {
            return fail(format!(
                "bilinear_rank {} exceeds d_model / 2 = {}",
                d.bilinear_rank,
                t.d_model / 2
            ));
        }
        Ok(())
    }
}

/// Fixed sinusoidal position encoding of width d:
/// PE[2k] = sin(i / 10000^(2k/d)), PE[2k+1] = cos(i / 10000^(2k/d)).
pub fn sinusoidal_pe(i: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for k in 0..d.div_ceil(2) {
        let rate = 10_000f64.powf(-((2 * k) as f64) / d as f64);
        let angle = i as f64 * rate;
        out[2 * k] = angle.sin();
        if 2 * k + 1 < d {
            out[2 * k + 1] = angle.cos();
        }
    }
    out
}

fn head_dim(t: &TowerConfig) -> usize {
    t.d_model / t.heads
}

/// Create every parameter the configured model uses, deterministically from
/// the seed. Weight matrices draw from N(0, 1/fan_in); embedding tables from
/// N(0, 1/cols) so token norms start near one; gains are ones and everything
/// additive starts at zero, except the bilinear factors which start small
/// (std 0.05) with their scales lambda at zero so the cross term fades in.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore, NumericsError> {
    cfg.validate()?;
    let t = &cfg.tower;
    let d = t.d_model;
    let mut store = ParameterStore::new(seed);
    let mut init = ParamInit::new(seed);

    let embed_std = |cols: usize| 1.0 / (cols as f64).sqrt();
    init.embedding(&mut store, "user_embed", t.n_users, d, embed_std(d));
    init.embedding(&mut store, "hist_video_embed", t.n_videos, d, embed_std(d));
    init.embedding(&mut store, "behavior_embed", t.n_behaviors, d, embed_std(d));
    init.embedding(&mut store, "hist_pos_embed", t.l_hist, d, embed_std(d));
    init.weight(&mut store, "hist_attn_wq", d, d);
    init.weight(&mut store, "hist_attn_wk", d, d);
    init.weight(&mut store, "hist_attn_wv", d, d);
    init.weight(&mut store, "hist_attn_wo", d, d);
    init.zeros(&mut store, "hist_default", 1, d);
    init.weight(&mut store, "fuse_gate_w", 2 * d, d);
    init.zeros(&mut store, "fuse_gate_b", 1, d);

    init.embedding(&mut store, "video_embed", t.n_videos, t.d_v, embed_std(t.d_v));
    init.embedding(&mut store, "segment_index_embed", t.m, t.d_p, embed_std(t.d_p));
    let seg_in = t.d_v + t.d_p;
    if t.tied_segment_mlp {
        init.weight(&mut store, "seg_mlp_w1", seg_in, t.hidden);
        init.zeros(&mut store, "seg_mlp_b1", 1, t.hidden);
        init.weight(&mut store, "seg_mlp_w2", t.hidden, d);
        init.zeros(&mut store, "seg_mlp_b2", 1, d);
    } else {
        for i in 0..t.m {
            init.weight(&mut store, &format!("seg_mlp_{i:02}_w1"), seg_in, t.hidden);
            init.zeros(&mut store, &format!("seg_mlp_{i:02}_b1"), 1, t.hidden);
            init.weight(&mut store, &format!("seg_mlp_{i:02}_w2"), t.hidden, d);
            init.zeros(&mut store, &format!("seg_mlp_{i:02}_b2"), 1, d);
        }
    }

    for l in 0..t.l_layers {
        for stream in ["u", "v"] {
            init.weight(&mut store, &format!("enc{l:02}_wq_{stream}"), d, d);
            init.weight(&mut store, &format!("enc{l:02}_wk_{stream}"), d, d);
            init.weight(&mut store, &format!("enc{l:02}_wv_{stream}"), d, d);
            init.constant(&mut store, &format!("enc{l:02}_ln_{stream}_gain"), 1, d, 1.0);
            init.zeros(&mut store, &format!("enc{l:02}_ln_{stream}_bias"), 1, d);
        }
    }

    init.weight(&mut store, "int_mlp_w1", d, t.hidden);
    init.zeros(&mut store, "int_mlp_b1", 1, t.hidden);
    init.weight(&mut store, "int_mlp_w2", t.hidden, d);
    init.zeros(&mut store, "int_mlp_b2", 1, d);
    init.weight(&mut store, "int_w1", d, 1);
    init.zeros(&mut store, "int_bf", 1, 1);
    let r = cfg.decoder.bilinear_rank;
    if r > 0 {
        init.embedding(&mut store, "int_rfac", r, d, 0.05);
        init.embedding(&mut store, "int_cfac", r, d, 0.05);
        init.zeros(&mut store, "int_lambda", 1, r);
    }
    init.zeros(&mut store, "pos_wp", 1, 1);
    init.zeros(&mut store, "pos_bp", 1, 1);
    Ok(store)
}

/// Everything the loss needs from one example's forward pass, as tape nodes:
/// conditionals q (1 x M), marginals p (1 x M), and expected time (1 x 1).
pub struct ForwardNodes {
    pub q: NodeId,
    pub p: NodeId,
    pub t_pred: NodeId,
    pub traces: Vec<LayerTrace>,
}

/// Run the full model for one impression. `history` holds
/// (video index, behavior index) pairs, oldest first, already truncated to
/// l_hist; `durations` are the M segment lengths in seconds.
pub fn forward_example(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &ModelConfig,
    user_idx: usize,
    video_idx: usize,
    history: &[(usize, usize)],
    durations: &[f64],
) -> Result<ForwardNodes, NumericsError> {
    let t = &cfg.tower;
    if durations.len() != t.m {
        return Err(NumericsError::Domain(format!(
            "expected {} segment durations, got {}",
            t.m,
            durations.len()
        )));
    }
    if history.len() > t.l_hist {
        return Err(NumericsError::Domain(format!(
            "history length {} exceeds l_hist {}",
            history.len(),
            t.l_hist
        )));
    }
    let user = tower::build_user_state(tape, store, t, user_idx, history)?;
    let segs = tower::decompose_segments(tape, store, t, video_idx)?;
    let (user, segs, traces) = encoder::cross_encode(tape, store, t, &user, segs)?;
    let _ = user;
    let z = decoder::interest_scores(tape, store, cfg, segs)?;
    let s = decoder::positional_bias(tape, store, z, cfg.decoder.phi, t.m)?;
    let nodes = match cfg.decoder.variant {
        Variant::Chain => decoder::decode_chain(tape, s, cfg.decoder.tau),
        Variant::Recursive => decoder::decode_recursive(tape, s, cfg.decoder.gamma, cfg.decoder.alpha),
    };
    let t_pred = decoder::aggregate(tape, nodes.p, durations);
    Ok(ForwardNodes {
        q: nodes.q,
        p: nodes.p,
        t_pred,
        traces,
    })
}

/// Forward pass without gradients: build a private tape, run
/// [`forward_example`], and read the curve off it.
pub fn predict_example(
    store: &ParameterStore,
    cfg: &ModelConfig,
    user_idx: usize,
    video_idx: usize,
    history: &[(usize, usize)],
    durations: &[f64],
) -> Result<SegmentCurve, NumericsError> {
    let mut tape = Tape::new();
    let out = forward_example(&mut tape, store, cfg, user_idx, video_idx, history, durations)?;
    Ok(decoder::curve_from_nodes(&tape, &out, durations))
}
