//! Deterministic mini-batch training, evaluation, and prediction.
//!
//! The config file is one flat JSON object, one key per field, unknown keys
//! rejected. Vocabulary sizes are not part of it: they are derived from the
//! training split at fit time and frozen into the checkpoint.
//!
//! Determinism contract: examples are shuffled per epoch by a ChaCha8
//! stream derived from the seed, batches walk that order, gradients
//! accumulate in fixed tape order, and the optimizer updates parameters
//! lexicographically. Two runs with the same config, data, and seed produce
//! bitwise-identical loss traces and checkpoint bytes. The per-epoch train
//! loss is averaged in example-index order, not visit order, so it is also
//! invariant to the shuffle.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError, RngState, KIND_MODEL};
use crate::data::{build_vocabs, TrainingExample, Vocab};
use crate::losses::{build_loss, LossConfig};
use crate::metrics::{eval_report, EvalConfig, EvalReport, MetricError};
use crate::model::{
    forward_example, init_params, predict_example, DecoderParams, ModelConfig, PhiKind,
    TowerConfig, Variant,
};
use crate::optim::{Adam, AdamConfig};
use crate::tape::Tape;
use crate::tensor::{NumericsError, ParameterStore};

/// Offset decorrelating the shuffle stream from the init stream, which is
/// seeded by the raw seed.
const SHUFFLE_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(
        "non-finite loss at step {step}: seq {loss_seq}, huber {loss_huber}, ord {loss_ord}"
    )]
    NonFiniteLoss {
        step: u64,
        loss_seq: f64,
        loss_huber: f64,
        loss_ord: f64,
    },
    #[error("numerics at step {step}: {source}")]
    NumericsAtStep { step: u64, source: NumericsError },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// The whole experiment configuration as a single flat object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    // Representation tower.
    pub d_model: usize,
    pub d_v: usize,
    pub d_p: usize,
    pub hidden: usize,
    pub heads: usize,
    pub l_layers: usize,
    pub l_hist: usize,
    pub m: usize,
    pub n_behaviors: usize,
    pub tied_segment_mlp: bool,
    pub use_segment_pe: bool,
    // Decoder.
    pub variant: Variant,
    pub tau: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub bilinear_rank: usize,
    pub phi: PhiKind,
    // Loss.
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
    pub omega_0: f64,
    pub rho: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub mu: f64,
    // Metrics.
    pub n_max: usize,
    pub pair_count: usize,
    // Optimizer.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    // Loop.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub checkpoint: String,
    /// Fraction of examples that train; the rest evaluate.
    pub split: f64,
    // Synthetic generation (only the generate path reads these; m and seed
    // above are shared with it).
    pub n_users: usize,
    pub n_videos: usize,
    pub n_impressions: usize,
    pub latent_dim: usize,
    pub a_scale: f64,
    pub base_offset: f64,
    pub positional_decay: f64,
    pub d_min: f64,
    pub d_max: f64,
    // Baselines.
    /// WLR positive threshold: positive iff watch > theta * duration.
    pub theta: f64,
    /// Ordinal-regression bucket count.
    pub k_buckets: usize,
    /// D2Q duration-group count.
    pub g_groups: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let tower = TowerConfig::default();
        let dec = DecoderParams::default();
        let loss = LossConfig::default();
        let eval = EvalConfig::default();
        let adam = AdamConfig::default();
        let synth = crate::synth::SynthConfig::default();
        TrainConfig {
            d_model: tower.d_model,
            d_v: tower.d_v,
            d_p: tower.d_p,
            hidden: tower.hidden,
            heads: tower.heads,
            l_layers: tower.l_layers,
            l_hist: tower.l_hist,
            m: tower.m,
            n_behaviors: tower.n_behaviors,
            tied_segment_mlp: tower.tied_segment_mlp,
            use_segment_pe: tower.use_segment_pe,
            variant: dec.variant,
            tau: dec.tau,
            gamma: dec.gamma,
            alpha: dec.alpha,
            bilinear_rank: dec.bilinear_rank,
            phi: dec.phi,
            lambda_1: loss.lambda_1,
            lambda_2: loss.lambda_2,
            lambda_3: loss.lambda_3,
            omega_0: loss.omega_0,
            rho: loss.rho,
            delta: loss.delta,
            epsilon: loss.epsilon,
            mu: loss.mu,
            n_max: eval.n_max,
            pair_count: eval.pair_count,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 16,
            epochs: 2,
            seed: 7,
            checkpoint: "model.vgen".to_string(),
            split: 0.8,
            n_users: synth.n_users,
            n_videos: synth.n_videos,
            n_impressions: synth.n_impressions,
            latent_dim: synth.latent_dim,
            a_scale: synth.a_scale,
            base_offset: synth.base_offset,
            positional_decay: synth.positional_decay,
            d_min: synth.d_min,
            d_max: synth.d_max,
            theta: 0.05,
            k_buckets: 10,
            g_groups: 4,
        }
    }
}

impl TrainConfig {
    pub fn from_json(json: &str) -> Result<Self, TrainError> {
        serde_json::from_str(json).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn tower_config(&self, n_users: usize, n_videos: usize) -> TowerConfig {
        TowerConfig {
            d_model: self.d_model,
            d_v: self.d_v,
            d_p: self.d_p,
            hidden: self.hidden,
            heads: self.heads,
            l_layers: self.l_layers,
            l_hist: self.l_hist,
            m: self.m,
            n_behaviors: self.n_behaviors,
            tied_segment_mlp: self.tied_segment_mlp,
            use_segment_pe: self.use_segment_pe,
            n_users,
            n_videos,
        }
    }

    pub fn decoder_params(&self) -> DecoderParams {
        DecoderParams {
            variant: self.variant,
            tau: self.tau,
            gamma: self.gamma,
            alpha: self.alpha,
            bilinear_rank: self.bilinear_rank,
            phi: self.phi,
        }
    }

    pub fn model_config(&self, n_users: usize, n_videos: usize) -> ModelConfig {
        ModelConfig {
            tower: self.tower_config(n_users, n_videos),
            decoder: self.decoder_params(),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_1: self.lambda_1,
            lambda_2: self.lambda_2,
            lambda_3: self.lambda_3,
            omega_0: self.omega_0,
            rho: self.rho,
            delta: self.delta,
            epsilon: self.epsilon,
            mu: self.mu,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_max: self.n_max,
            pair_count: self.pair_count,
            seed: self.seed,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn synth_config(&self) -> crate::synth::SynthConfig {
        crate::synth::SynthConfig {
            n_users: self.n_users,
            n_videos: self.n_videos,
            n_impressions: self.n_impressions,
            latent_dim: self.latent_dim,
            a_scale: self.a_scale,
            base_offset: self.base_offset,
            positional_decay: self.positional_decay,
            m: self.m,
            d_min: self.d_min,
            d_max: self.d_max,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!(
                "lr must be finite and > 0, got {}",
                self.lr
            )));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if !(self.split.is_finite() && 0.0 < self.split && self.split < 1.0) {
            return Err(TrainError::Config(format!(
                "split must lie strictly between 0 and 1, got {}",
                self.split
            )));
        }
        if self.n_max < 2 {
            return Err(TrainError::Config("n_max must be >= 2".into()));
        }
        if !(self.theta.is_finite() && (0.0..1.0).contains(&self.theta)) {
            return Err(TrainError::Config(format!(
                "theta must lie in [0, 1), got {}",
                self.theta
            )));
        }
        if self.k_buckets < 2 {
            return Err(TrainError::Config("k_buckets must be >= 2".into()));
        }
        if self.g_groups < 1 {
            return Err(TrainError::Config("g_groups must be >= 1".into()));
        }
        // Vocab sizes are data-derived; validate the rest of the model
        // shape with placeholders.
        self.model_config(1, 1)
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.loss_config()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.adam_config()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_mae: f64,
    pub eval_xauc: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<EpochTrace>,
    pub n_train: usize,
    pub n_eval: usize,
}

/// Chronological split when timestamps carry information (more than one
/// distinct value): the last fraction evaluates. Degenerate timestamps fall
/// back to a seeded random split.
pub fn split_examples(
    mut examples: Vec<TrainingExample>,
    split: f64,
    seed: u64,
) -> Result<(Vec<TrainingExample>, Vec<TrainingExample>), TrainError> {
    let n = examples.len();
    if n < 2 {
        return Err(TrainError::Data(format!(
            "need at least 2 examples to split, got {n}"
        )));
    }
    let distinct_times = {
        let mut ts: Vec<i64> = examples.iter().map(|e| e.timestamp_ms).collect();
        ts.sort_unstable();
        ts.dedup();
        ts.len()
    };
    if distinct_times > 1 {
        examples.sort_by(|a, b| {
            a.timestamp_ms
                .cmp(&b.timestamp_ms)
                .then_with(|| a.user_id.cmp(&b.user_id))
                .then_with(|| a.video_id.cmp(&b.video_id))
        });
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(SHUFFLE_STREAM));
        examples.shuffle(&mut rng);
    }
    let n_train = ((n as f64 * split).floor() as usize).clamp(1, n - 1);
    let eval = examples.split_off(n_train);
    Ok((examples, eval))
}

struct Session {
    cfg: TrainConfig,
    model: ModelConfig,
    users: Vocab,
    videos: Vocab,
}

impl Session {
    fn lookup(&self, e: &TrainingExample) -> (usize, usize, Vec<(usize, usize)>) {
        let u = self.users.lookup(&e.user_id);
        let v = self.videos.lookup(&e.video_id);
        let hist: Vec<(usize, usize)> = e
            .history
            .iter()
            .map(|h| (self.videos.lookup(&h.video_id), h.behavior_token))
            .collect();
        (u, v, hist)
    }

    fn predictions(
        &self,
        store: &ParameterStore,
        examples: &[TrainingExample],
    ) -> Result<Vec<f64>, TrainError> {
        let mut out = Vec::with_capacity(examples.len());
        for e in examples {
            let (u, v, hist) = self.lookup(e);
            let curve = predict_example(store, &self.model, u, v, &hist, &e.segment_durations)?;
            out.push(curve.expected_time_sec);
        }
        Ok(out)
    }

    fn report(
        &self,
        store: &ParameterStore,
        examples: &[TrainingExample],
    ) -> Result<EvalReport, TrainError> {
        let preds = self.predictions(store, examples)?;
        let truths: Vec<f64> = examples.iter().map(|e| e.watch_time_sec).collect();
        let durations: Vec<f64> = examples.iter().map(|e| e.duration_sec).collect();
        Ok(eval_report(
            &preds,
            &truths,
            &durations,
            &self.cfg.eval_config(),
        )?)
    }
}

pub fn train(cfg: &TrainConfig, examples: Vec<TrainingExample>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    train_impl(cfg, examples)
}

fn train_impl(cfg: &TrainConfig, examples: Vec<TrainingExample>) -> Result<TrainOutcome, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Data("no training examples".into()));
    }
    for e in &examples {
        if e.segment_durations.len() != cfg.m {
            return Err(TrainError::Data(format!(
                "example ({}, {}) has {} segments, config m = {}",
                e.user_id,
                e.video_id,
                e.segment_durations.len(),
                cfg.m
            )));
        }
    }
    let (train_set, eval_set) = split_examples(examples, cfg.split, cfg.seed)?;
    let (users, videos) = build_vocabs(&train_set);

    let model = cfg.model_config(users.len(), videos.len());
    model.validate()?;
    let mut store = init_params(&model, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam_config()).map_err(|e| TrainError::Config(e.to_string()))?;
    let loss_cfg = cfg.loss_config();

    let session = Session {
        cfg: cfg.clone(),
        model,
        users,
        videos,
    };

    let shuffle_seed = cfg.seed.wrapping_add(SHUFFLE_STREAM);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut per_example_loss = vec![0.0f64; train_set.len()];
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let mut tape = Tape::new();
            let mut totals = Vec::with_capacity(batch.len());
            let mut components = Vec::with_capacity(batch.len());
            for &idx in batch {
                let e = &train_set[idx];
                let (u, v, hist) = session.lookup(e);
                let out = forward_example(
                    &mut tape,
                    &store,
                    &session.model,
                    u,
                    v,
                    &hist,
                    &e.segment_durations,
                )
                .map_err(|source| TrainError::NumericsAtStep { step, source })?;
                let nodes = build_loss(
                    &mut tape,
                    out.q,
                    out.p,
                    out.t_pred,
                    &e.labels,
                    e.watch_time_sec,
                    &loss_cfg,
                );
                per_example_loss[idx] = tape.value_scalar(nodes.total);
                totals.push(nodes.total);
                components.push((
                    tape.value_scalar(nodes.seq),
                    tape.value_scalar(nodes.huber),
                    tape.value_scalar(nodes.ord),
                ));
            }
            let mut sum = totals[0];
            for &t in &totals[1..] {
                sum = tape.add(sum, t);
            }
            let batch_loss = tape.scale(sum, 1.0 / batch.len() as f64);
            let value = tape.value_scalar(batch_loss);
            if !value.is_finite() {
                let (mut s, mut h, mut o) = (0.0, 0.0, 0.0);
                for (cs, ch, co) in &components {
                    s += cs;
                    h += ch;
                    o += co;
                }
                let n = batch.len() as f64;
                return Err(TrainError::NonFiniteLoss {
                    step,
                    loss_seq: s / n,
                    loss_huber: h / n,
                    loss_ord: o / n,
                });
            }
            let grads = tape
                .backward(batch_loss)
                .map_err(|source| TrainError::NumericsAtStep { step, source })?;
            adam.step(&mut store, &grads)
                .map_err(|source| TrainError::NumericsAtStep { step, source })?;
        }

        let train_loss = per_example_loss.iter().sum::<f64>() / train_set.len() as f64;
        let eval = session.report(&store, &eval_set)?;
        trace.push(EpochTrace {
            epoch,
            train_loss,
            eval_mae: eval.mae_sec,
            eval_xauc: eval.xauc,
        });
    }

    let config_json =
        serde_json::to_string(cfg).map_err(|e| TrainError::Config(e.to_string()))?;
    let checkpoint = Checkpoint {
        kind: KIND_MODEL.to_string(),
        config_json,
        step,
        users: session.users,
        videos: session.videos,
        store,
        shuffle_rng: RngState::capture(shuffle_seed, &shuffle_rng),
    };
    Ok(TrainOutcome {
        checkpoint,
        trace,
        n_train: train_set.len(),
        n_eval: eval_set.len(),
    })
}

/// Rebuild the model session a checkpoint was trained with, verifying the
/// stored tensors structurally match its own config echo.
fn session_from_checkpoint(cp: &Checkpoint) -> Result<Session, TrainError> {
    cp.expect_kind(KIND_MODEL)?;
    let cfg = TrainConfig::from_json(&cp.config_json)?;
    let model = cfg.model_config(cp.users.len(), cp.videos.len());
    model.validate()?;
    let expected = init_params(&model, cp.store.rng_seed)?;
    let expected_names: Vec<&str> = expected.names().collect();
    let got_names: Vec<&str> = cp.store.names().collect();
    if expected_names != got_names {
        return Err(TrainError::Data(format!(
            "checkpoint tensors do not match its config: expected {} names, found {}",
            expected_names.len(),
            got_names.len()
        )));
    }
    for name in expected_names {
        let want = expected.get(name)?.shape();
        let got = cp.store.get(name)?.shape();
        if want != got {
            return Err(TrainError::Data(format!(
                "checkpoint tensor {name:?} has shape {got:?}, config implies {want:?}"
            )));
        }
    }
    Ok(Session {
        cfg,
        model,
        users: cp.users.clone(),
        videos: cp.videos.clone(),
    })
}

fn check_segments(m: usize, examples: &[TrainingExample]) -> Result<(), TrainError> {
    for e in examples {
        if e.segment_durations.len() != m {
            return Err(TrainError::Data(format!(
                "example ({}, {}) has {} segments, checkpoint expects m = {}",
                e.user_id,
                e.video_id,
                e.segment_durations.len(),
                m
            )));
        }
    }
    Ok(())
}

/// Forward-only evaluation of a checkpoint on prepared examples.
pub fn evaluate(cp: &Checkpoint, examples: &[TrainingExample]) -> Result<EvalReport, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Data("empty evaluation set".into()));
    }
    let session = session_from_checkpoint(cp)?;
    check_segments(session.cfg.m, examples)?;
    session.report(&cp.store, examples)
}

/// One emitted prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionLine {
    pub user_id: String,
    pub video_id: String,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub expected_time_sec: f64,
}

/// Per-example continuation curves, in input order.
pub fn predict(cp: &Checkpoint, examples: &[TrainingExample]) -> Result<Vec<PredictionLine>, TrainError> {
    let session = session_from_checkpoint(cp)?;
    check_segments(session.cfg.m, examples)?;
    let mut out = Vec::with_capacity(examples.len());
    for e in examples {
        let (u, v, hist) = session.lookup(e);
        let curve = predict_example(
            &cp.store,
            &session.model,
            u,
            v,
            &hist,
            &e.segment_durations,
        )?;
        out.push(PredictionLine {
            user_id: e.user_id.clone(),
            video_id: e.video_id.clone(),
            q: curve.q,
            p: curve.p,
            expected_time_sec: curve.expected_time_sec,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_examples;
    use crate::synth::synth_generate;

    fn tiny_cfg() -> TrainConfig {
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
            seed: 11,
            split: 0.8,
            n_users: 20,
            n_videos: 30,
            n_impressions: 100,
            latent_dim: 4,
            ..TrainConfig::default()
        }
    }

    fn tiny_examples(cfg: &TrainConfig) -> Vec<TrainingExample> {
        let (records, _) = synth_generate(&cfg.synth_config()).unwrap();
        build_examples(&records, cfg.l_hist, cfg.m, cfg.n_behaviors)
    }

    #[test]
    fn config_parses_flat_json_with_defaults() {
        let cfg = TrainConfig::from_json("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());

        let cfg = TrainConfig::from_json(
            r#"{"variant": "RECURSIVE", "lr": 0.01, "m": 4, "phi": "normalized-linear"}"#,
        )
        .unwrap();
        assert_eq!(cfg.variant, Variant::Recursive);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.m, 4);
        assert_eq!(cfg.phi, PhiKind::NormalizedLinear);
        assert_eq!(cfg.tau, 1.0, "untouched fields keep defaults");
    }

    #[test]
    fn config_rejects_unknown_keys_by_name() {
        let err = TrainConfig::from_json(r#"{"lerning_rate": 0.01}"#).unwrap_err();
        assert!(err.to_string().contains("lerning_rate"), "{err}");
    }

    #[test]
    fn config_validation_enforces_invariants() {
        for (field, json) in [
            ("lr", r#"{"lr": 0.0}"#),
            ("lr", r#"{"lr": -1.0}"#),
            ("batch_size", r#"{"batch_size": 0}"#),
            ("epochs", r#"{"epochs": 0}"#),
            ("split", r#"{"split": 0.0}"#),
            ("split", r#"{"split": 1.0}"#),
            ("heads", r#"{"heads": 3}"#),
        ] {
            let cfg = TrainConfig::from_json(json).unwrap();
            assert!(cfg.validate().is_err(), "{field} invariant not enforced");
        }
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn split_is_chronological_when_times_differ() {
        let mut examples = tiny_examples(&tiny_cfg());
        examples.truncate(10);
        for (i, e) in examples.iter_mut().enumerate() {
            e.timestamp_ms = 1000 - i as i64;
        }
        let (train, eval) = split_examples(examples, 0.7, 0).unwrap();
        assert_eq!((train.len(), eval.len()), (7, 3));
        let max_train = train.iter().map(|e| e.timestamp_ms).max().unwrap();
        let min_eval = eval.iter().map(|e| e.timestamp_ms).min().unwrap();
        assert!(
            max_train < min_eval,
            "every train timestamp precedes every eval timestamp"
        );
    }

    #[test]
    fn split_falls_back_to_seeded_random_on_flat_times() {
        let mut examples = tiny_examples(&tiny_cfg());
        examples.truncate(12);
        for e in examples.iter_mut() {
            e.timestamp_ms = 5;
        }
        let key = |es: &[TrainingExample]| -> Vec<(String, String)> {
            es.iter()
                .map(|e| (e.user_id.clone(), e.video_id.clone()))
                .collect()
        };
        let (t1, e1) = split_examples(examples.clone(), 0.5, 3).unwrap();
        let (t2, e2) = split_examples(examples.clone(), 0.5, 3).unwrap();
        assert_eq!(key(&t1), key(&t2));
        assert_eq!(key(&e1), key(&e2));
        let (t3, _) = split_examples(examples, 0.5, 4).unwrap();
        assert_ne!(key(&t1), key(&t3), "different seed, different membership");
    }

    #[test]
    fn split_needs_two_examples() {
        let mut examples = tiny_examples(&tiny_cfg());
        examples.truncate(1);
        assert!(matches!(
            split_examples(examples, 0.5, 0),
            Err(TrainError::Data(_))
        ));
    }

    #[test]
    fn loss_decreases_over_two_epochs() {
        let cfg = tiny_cfg();
        let outcome = train(&cfg, tiny_examples(&cfg)).unwrap();
        assert_eq!(outcome.trace.len(), 2);
        let first = outcome.trace.first().unwrap().train_loss;
        let last = outcome.trace.last().unwrap().train_loss;
        assert!(
            last < first,
            "loss should fall: first epoch {first}, last epoch {last}"
        );
        assert!(outcome.checkpoint.step > 0);
        assert_eq!(outcome.n_train + outcome.n_eval, 100);
    }

    #[test]
    fn same_seed_reproduces_trace_and_checkpoint_bitwise() {
        let cfg = tiny_cfg();
        let run = || train(&cfg, tiny_examples(&cfg)).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.trace, b.trace);
        assert_eq!(
            a.checkpoint.to_bytes().unwrap(),
            b.checkpoint.to_bytes().unwrap()
        );
    }

    #[test]
    fn zero_lr_freezes_parameters_and_trace() {
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 3,
            ..tiny_cfg()
        };
        // Zero lr fails config validation (the invariant is strict), so the
        // optimizer-level semantics are exercised on the inner loop.
        assert!(cfg.validate().is_err());
        let outcome = train_impl(&cfg, tiny_examples(&cfg)).unwrap();

        let (train_set, _) = split_examples(tiny_examples(&cfg), cfg.split, cfg.seed).unwrap();
        let (users, videos) = build_vocabs(&train_set);
        let model = cfg.model_config(users.len(), videos.len());
        let init = init_params(&model, cfg.seed).unwrap();
        assert_eq!(
            outcome.checkpoint.store.tensors, init.tensors,
            "parameters must be bitwise untouched"
        );

        let l0 = outcome.trace[0].train_loss;
        for t in &outcome.trace {
            let rel = (t.train_loss - l0).abs() / l0.abs();
            assert!(
                rel < 1e-12,
                "trace must be constant: epoch {} loss {} vs {}",
                t.epoch,
                t.train_loss,
                l0
            );
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_step_and_components() {
        let cfg = TrainConfig {
            omega_0: 1e308,
            ..tiny_cfg()
        };
        let err = train_impl(&cfg, tiny_examples(&cfg)).unwrap_err();
        match err {
            TrainError::NonFiniteLoss {
                step, loss_seq, ..
            } => {
                assert_eq!(step, 1);
                assert!(!loss_seq.is_finite());
            }
            other => panic!("expected NonFiniteLoss, got {other}"),
        }
    }

    #[test]
    fn evaluate_matches_final_epoch_metric_and_leaves_checkpoint_alone() {
        let cfg = tiny_cfg();
        let examples = tiny_examples(&cfg);
        let outcome = train(&cfg, examples.clone()).unwrap();
        let (_, eval_set) = split_examples(examples, cfg.split, cfg.seed).unwrap();

        let before = outcome.checkpoint.to_bytes().unwrap();
        let report = evaluate(&outcome.checkpoint, &eval_set).unwrap();
        let after = outcome.checkpoint.to_bytes().unwrap();
        assert_eq!(before, after);

        let logged = outcome.trace.last().unwrap();
        let rel = (report.mae_sec - logged.eval_mae).abs() / logged.eval_mae.max(1e-12);
        // The checkpoint rounds parameters to f32, so the re-evaluated MAE
        // drifts from the trainer's f64 log by at most that rounding.
        assert!(
            rel < 1e-4,
            "evaluate MAE {} vs trainer log {}",
            report.mae_sec,
            logged.eval_mae
        );
    }

    #[test]
    fn evaluate_rejects_wrong_m_and_empty_sets() {
        let cfg = tiny_cfg();
        let examples = tiny_examples(&cfg);
        let outcome = train(&cfg, examples).unwrap();

        let err = evaluate(&outcome.checkpoint, &[]).unwrap_err();
        assert!(matches!(err, TrainError::Data(_)));

        let wrong_m = TrainConfig { m: 2, ..cfg.clone() };
        let mismatched = tiny_examples(&wrong_m);
        let err = evaluate(&outcome.checkpoint, &mismatched[..4]).unwrap_err();
        assert!(
            err.to_string().contains("segments"),
            "error should name the segment mismatch: {err}"
        );
    }

    #[test]
    fn predict_emits_curves_in_input_order() {
        let cfg = tiny_cfg();
        let examples = tiny_examples(&cfg);
        let outcome = train(&cfg, examples.clone()).unwrap();
        let subset = &examples[..6];
        let lines = predict(&outcome.checkpoint, subset).unwrap();
        assert_eq!(lines.len(), subset.len());
        for (line, e) in lines.iter().zip(subset) {
            assert_eq!(line.user_id, e.user_id);
            assert_eq!(line.video_id, e.video_id);
            assert_eq!(line.q.len(), cfg.m);
            assert_eq!(line.p.len(), cfg.m);
            let total: f64 = e.segment_durations.iter().sum();
            assert!(line.expected_time_sec >= 0.0 && line.expected_time_sec <= total + 1e-9);
            for w in line.p.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "chain marginals non-increasing");
            }
        }
    }

    #[test]
    fn config_json_echo_round_trips_through_checkpoint() {
        let cfg = tiny_cfg();
        let outcome = train(&cfg, tiny_examples(&cfg)).unwrap();
        let echoed = TrainConfig::from_json(&outcome.checkpoint.config_json).unwrap();
        assert_eq!(echoed, cfg);
    }
}
