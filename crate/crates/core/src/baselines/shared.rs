//! Featurization and fit plumbing shared by all four baselines.
//!
//! Every baseline sees the same inputs the full model sees, minus the
//! segment stream: the gated fusion of the user embedding with the encoded
//! watch history, concatenated with the raw video embedding. The cross
//! encoder is bypassed. Feature parameters are drawn in a fixed order from
//! the seed, so all baselines start from bit-identical features and then
//! train their own copy end to end with their head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{TrainingExample, Vocab};
use crate::model::tower::{embed_user, encode_history, fuse_gate};
use crate::model::TowerConfig;
use crate::optim::Adam;
use crate::tape::{NodeId, Tape};
use crate::tensor::{NumericsError, ParamInit, ParameterStore};
use crate::train::{TrainConfig, TrainError};

/// Width of the shared feature vector: fused user state plus video embedding.
pub fn feature_dim(t: &TowerConfig) -> usize {
    t.d_model + t.d_v
}

/// Draw the feature parameters into `store`. The names and draw order
/// mirror the full model's tower section, so equal seeds give equal
/// tensors here and there.
pub fn init_features(init: &mut ParamInit, store: &mut ParameterStore, t: &TowerConfig) {
    let d = t.d_model;
    let embed_std = |cols: usize| 1.0 / (cols as f64).sqrt();
    init.embedding(store, "user_embed", t.n_users, d, embed_std(d));
    init.embedding(store, "hist_video_embed", t.n_videos, d, embed_std(d));
    init.embedding(store, "behavior_embed", t.n_behaviors, d, embed_std(d));
    init.embedding(store, "hist_pos_embed", t.l_hist, d, embed_std(d));
    init.weight(store, "hist_attn_wq", d, d);
    init.weight(store, "hist_attn_wk", d, d);
    init.weight(store, "hist_attn_wv", d, d);
    init.weight(store, "hist_attn_wo", d, d);
    init.zeros(store, "hist_default", 1, d);
    init.weight(store, "fuse_gate_w", 2 * d, d);
    init.zeros(store, "fuse_gate_b", 1, d);
    init.embedding(store, "video_embed", t.n_videos, t.d_v, embed_std(t.d_v));
}

/// SharedFeatures for one example, on tape: 1 x (d_model + d_v).
pub fn features_node(
    tape: &mut Tape,
    store: &ParameterStore,
    t: &TowerConfig,
    user_idx: usize,
    video_idx: usize,
    history: &[(usize, usize)],
) -> Result<NodeId, NumericsError> {
    let u_id = embed_user(tape, store, user_idx)?;
    let (u_seq, _) = encode_history(tape, store, t, history)?;
    let fused = fuse_gate(tape, store, u_id, u_seq)?;
    let _ = store.get("video_embed")?;
    let table = tape.param(store, "video_embed");
    let v_row = tape.gather_rows(table, &[video_idx]);
    Ok(tape.concat_cols(&[fused, v_row]))
}

/// Ties an example's string ids to feature-space indices.
#[derive(Debug, Clone)]
pub struct FeatureSpace {
    pub tower: TowerConfig,
    pub users: Vocab,
    pub videos: Vocab,
}

impl FeatureSpace {
    pub fn new(cfg: &TrainConfig, users: Vocab, videos: Vocab) -> Self {
        let tower = cfg.tower_config(users.len(), videos.len());
        FeatureSpace {
            tower,
            users,
            videos,
        }
    }

    pub fn lookup(&self, e: &TrainingExample) -> (usize, usize, Vec<(usize, usize)>) {
        let u = self.users.lookup(&e.user_id);
        let v = self.videos.lookup(&e.video_id);
        let hist = e
            .history
            .iter()
            .map(|h| (self.videos.lookup(&h.video_id), h.behavior_token))
            .collect();
        (u, v, hist)
    }

    pub fn node_for(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        e: &TrainingExample,
    ) -> Result<NodeId, NumericsError> {
        let (u, v, hist) = self.lookup(e);
        features_node(tape, store, &self.tower, u, v, &hist)
    }

    /// Feature vector values on a private tape, for serving and tests.
    pub fn values_for(
        &self,
        store: &ParameterStore,
        e: &TrainingExample,
    ) -> Result<Vec<f64>, NumericsError> {
        let mut tape = Tape::new();
        let node = self.node_for(&mut tape, store, e)?;
        Ok(tape.values(node).to_vec())
    }
}

/// Weighted binary cross entropy of a logit against a fixed label, with
/// the same probability clamp the model losses use.
pub fn weighted_bce(tape: &mut Tape, logit: NodeId, positive: bool, weight: f64) -> NodeId {
    let p = tape.sigmoid(logit);
    let p = tape.clamp(p, 1e-7, 1.0 - 1e-7);
    let inner = if positive {
        tape.log(p)
    } else {
        let neg = tape.scale(p, -1.0);
        let one_minus = tape.add_const(neg, 1.0);
        tape.log(one_minus)
    };
    tape.scale(inner, -weight)
}

/// The shared mini-batch loop: seeded shuffle per epoch, one tape per
/// batch, fixed-order accumulation, ADAM updates. `example_loss` builds a
/// scalar loss node for one example. Returns the per-epoch mean loss,
/// averaged in example-index order.
pub fn fit_loop<F>(
    store: &mut ParameterStore,
    adam: &mut Adam,
    n_examples: usize,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    mut example_loss: F,
) -> Result<(Vec<f64>, u64), TrainError>
where
    F: FnMut(&mut Tape, &ParameterStore, usize) -> Result<NodeId, TrainError>,
{
    assert!(n_examples > 0 && batch_size > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_examples).collect();
    let mut per_example = vec![0.0f64; n_examples];
    let mut trace = Vec::with_capacity(epochs);
    let mut step: u64 = 0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            step += 1;
            let mut tape = Tape::new();
            let mut sum: Option<NodeId> = None;
            for &idx in batch {
                let node = example_loss(&mut tape, store, idx)?;
                per_example[idx] = tape.value_scalar(node);
                sum = Some(match sum {
                    None => node,
                    Some(s) => tape.add(s, node),
                });
            }
            let total = tape.scale(sum.unwrap(), 1.0 / batch.len() as f64);
            let value = tape.value_scalar(total);
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    loss_seq: value,
                    loss_huber: 0.0,
                    loss_ord: 0.0,
                });
            }
            let grads = tape
                .backward(total)
                .map_err(|source| TrainError::NumericsAtStep { step, source })?;
            adam.step(store, &grads)
                .map_err(|source| TrainError::NumericsAtStep { step, source })?;
        }
        trace.push(per_example.iter().sum::<f64>() / n_examples as f64);
    }
    Ok((trace, step))
}

/// Fit-loop seed, decorrelated from parameter init exactly like the main
/// trainer's shuffle stream.
pub fn shuffle_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x9E37_79B9_7F4A_7C15)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocabs;
    use crate::optim::AdamConfig;
    use crate::synth::synth_generate;
    use crate::train::TrainConfig;

    pub(super) fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            d_model: 8,
            d_v: 8,
            d_p: 4,
            hidden: 8,
            heads: 2,
            l_layers: 1,
            l_hist: 4,
            m: 4,
            bilinear_rank: 2,
            batch_size: 8,
            epochs: 2,
            seed: 13,
            n_users: 15,
            n_videos: 25,
            n_impressions: 120,
            latent_dim: 4,
            ..TrainConfig::default()
        }
    }

    pub(super) fn tiny_space() -> (TrainConfig, FeatureSpace, Vec<TrainingExample>) {
        let cfg = tiny_cfg();
        let (records, _) = synth_generate(&cfg.synth_config()).unwrap();
        let examples =
            crate::data::build_examples(&records, cfg.l_hist, cfg.m, cfg.n_behaviors);
        let (users, videos) = build_vocabs(&examples);
        let space = FeatureSpace::new(&cfg, users, videos);
        (cfg, space, examples)
    }

    #[test]
    fn features_are_bit_identical_across_independent_inits() {
        let (cfg, space, examples) = tiny_space();
        let build = |extra_head: bool| {
            let mut store = ParameterStore::new(cfg.seed);
            let mut init = ParamInit::new(cfg.seed);
            init_features(&mut init, &mut store, &space.tower);
            if extra_head {
                init.weight(&mut store, "head_w", feature_dim(&space.tower), 1);
            }
            store
        };
        let plain = build(false);
        let with_head = build(true);
        for e in examples.iter().take(10) {
            let a = space.values_for(&plain, e).unwrap();
            let b = space.values_for(&with_head, e).unwrap();
            assert_eq!(a, b, "head draws must not disturb feature draws");
            assert_eq!(a.len(), feature_dim(&space.tower));
        }
    }

    #[test]
    fn features_depend_on_user_video_and_history() {
        let (cfg, space, examples) = tiny_space();
        let mut store = ParameterStore::new(cfg.seed);
        let mut init = ParamInit::new(cfg.seed);
        init_features(&mut init, &mut store, &space.tower);

        let base = &examples[0];
        let v0 = space.values_for(&store, base).unwrap();

        let mut other_video = base.clone();
        other_video.video_id = examples
            .iter()
            .map(|e| e.video_id.clone())
            .find(|v| *v != base.video_id)
            .unwrap();
        let v1 = space.values_for(&store, &other_video).unwrap();
        assert_ne!(v0, v1, "video identity must show in the features");

        let mut no_hist = base.clone();
        if no_hist.history.is_empty() {
            no_hist.history.push(crate::data::HistoryEntry {
                video_id: other_video.video_id.clone(),
                behavior_token: 1,
            });
        } else {
            no_hist.history.clear();
        }
        let v2 = space.values_for(&store, &no_hist).unwrap();
        assert_ne!(v0, v2, "history must show in the features");
    }

    #[test]
    fn weighted_bce_matches_closed_form() {
        let mut tape = Tape::new();
        let logit = tape.input_scalar(0.4);
        let pos = weighted_bce(&mut tape, logit, true, 2.0);
        let p = 1.0 / (1.0 + (-0.4f64).exp());
        assert!((tape.value_scalar(pos) - (-2.0 * p.ln())).abs() < 1e-12);

        let logit = tape.input_scalar(-1.3);
        let neg = weighted_bce(&mut tape, logit, false, 1.0);
        let p = 1.0 / (1.0 + (1.3f64).exp());
        assert!((tape.value_scalar(neg) - (-(1.0 - p).ln())).abs() < 1e-12);
    }

    #[test]
    fn fit_loop_learns_a_linear_probe() {
        // One scalar parameter w fit to minimize (w * x - 3x)^2 over a few
        // fake examples: w must land near 3.
        let mut store = ParameterStore::new(0);
        store.insert("w", crate::tensor::Tensor::scalar(0.0));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        })
        .unwrap();
        let xs: Vec<f64> = (1..=20).map(|i| i as f64 / 10.0).collect();
        let (trace, steps) = fit_loop(&mut store, &mut adam, xs.len(), 60, 4, 9, |tape, ps, idx| {
            let w = tape.param(ps, "w");
            let x = xs[idx];
            let pred = tape.scale(w, x);
            let resid = tape.add_const(pred, -3.0 * x);
            Ok(tape.mul(resid, resid))
        })
        .unwrap();
        assert_eq!(trace.len(), 60);
        assert_eq!(steps, 60 * 5);
        assert!(trace.last().unwrap() < &1e-3, "final loss {}", trace.last().unwrap());
        let w = store.get("w").unwrap().get(0, 0);
        assert!((w - 3.0).abs() < 0.05, "w converged to {w}");
    }
}
