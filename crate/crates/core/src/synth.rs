//! Seeded synthetic interaction generator with a ground-truth oracle.
//!
//! Users and videos get latent vectors; the per-segment continuation
//! probability is a logistic function of their affinity minus a positional
//! decay, and watch time falls out of a Bernoulli chain over segments. The
//! oracle retains the exact q* vectors and expected watch times, which upper-
//! bounds what any model can learn from the generated log.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionRecord, TrainingExample};
use crate::metrics::{eval_report, EvalConfig, EvalReport, MetricError};
use crate::tensor::kernels::sigmoid;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("oracle has no entry for user {user:?} video {video:?}")]
    MissingPair { user: String, video: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_videos: usize,
    pub n_impressions: usize,
    pub latent_dim: usize,
    /// Scale of the user-video affinity term.
    pub a_scale: f64,
    /// Base continuation offset a.
    pub base_offset: f64,
    /// Positional decay b; segment i loses b * i of logit.
    pub positional_decay: f64,
    /// Segments per video.
    pub m: usize,
    /// Video duration range in seconds.
    pub d_min: f64,
    pub d_max: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 500,
            n_videos: 1000,
            n_impressions: 50_000,
            latent_dim: 8,
            a_scale: 1.0,
            base_offset: 1.0,
            positional_decay: 0.3,
            m: 8,
            d_min: 10.0,
            d_max: 60.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_users == 0 || self.n_videos == 0 {
            return Err(SynthError::InvalidConfig("need at least one user and one video".into()));
        }
        if self.m == 0 {
            return Err(SynthError::InvalidConfig("m must be >= 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(SynthError::InvalidConfig("latent_dim must be >= 1".into()));
        }
        if !(self.d_min > 0.0) || self.d_max < self.d_min {
            return Err(SynthError::InvalidConfig(format!(
                "duration range [{}, {}] is invalid",
                self.d_min, self.d_max
            )));
        }
        if self.a_scale < 0.0 {
            return Err(SynthError::InvalidConfig("a_scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// Ground truth for one (user, video) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleEntry {
    pub q_star: Vec<f64>,
    pub expected_time_sec: f64,
}

/// Exact per-pair continuation curves for every generated impression.
#[derive(Debug, Clone, Default)]
pub struct OracleHandle {
    entries: BTreeMap<(String, String), OracleEntry>,
}

impl OracleHandle {
    pub fn get(&self, user: &str, video: &str) -> Result<&OracleEntry, SynthError> {
        self.entries
            .get(&(user.to_string(), video.to_string()))
            .ok_or_else(|| SynthError::MissingPair { user: user.into(), video: video.into() })
    }

    pub fn insert(&mut self, user: String, video: String, entry: OracleEntry) {
        self.entries.insert((user, video), entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, String), &OracleEntry)> {
        self.entries.iter()
    }

    /// Oracle predictions on an example set, reported with the same metric
    /// machinery as a model. Every (user, video) pair must be covered.
    pub fn metrics(&self, examples: &[TrainingExample], cfg: &EvalConfig) -> Result<EvalReport, SynthError> {
        let mut preds = Vec::with_capacity(examples.len());
        let mut truths = Vec::with_capacity(examples.len());
        let mut durations = Vec::with_capacity(examples.len());
        for e in examples {
            let entry = self.get(&e.user_id, &e.video_id)?;
            preds.push(entry.expected_time_sec);
            truths.push(e.watch_time_sec);
            durations.push(e.duration_sec);
        }
        Ok(eval_report(&preds, &truths, &durations, cfg)?)
    }
}

/// E[T] = sum_i (prod_{t<=i} q_t) d_i, the survival-weighted segment widths.
pub fn expected_time(q_star: &[f64], seg_len: f64) -> f64 {
    let mut p = 1.0;
    let mut total = 0.0;
    for &q in q_star {
        p *= q;
        total += p * seg_len;
    }
    total
}

fn affinity_curve(cfg: &SynthConfig, dot: f64) -> Vec<f64> {
    (0..cfg.m)
        .map(|i| sigmoid(cfg.a_scale * dot + cfg.base_offset - cfg.positional_decay * i as f64))
        .collect()
}

/// Generate an impression log plus its oracle. Every draw comes from one
/// ChaCha8 stream seeded by `cfg.seed`: latents first, then durations, then
/// per-impression user/video picks and chain rolls, so identical configs
/// reproduce identical logs bit for bit. Timestamps are the generation
/// index in milliseconds.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Vec<InteractionRecord>, OracleHandle), SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
    let draw_latent = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..cfg.latent_dim)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * scale
            })
            .collect()
    };
    let user_latents: Vec<Vec<f64>> = (0..cfg.n_users).map(|_| draw_latent(&mut rng)).collect();
    let video_latents: Vec<Vec<f64>> = (0..cfg.n_videos).map(|_| draw_latent(&mut rng)).collect();
    let durations: Vec<f64> = (0..cfg.n_videos)
        .map(|_| rng.gen_range(cfg.d_min..=cfg.d_max))
        .collect();

    let width = |n: usize| (n.max(1) as f64).log10().floor() as usize + 1;
    let (uw, vw) = (width(cfg.n_users), width(cfg.n_videos));

    let mut records = Vec::with_capacity(cfg.n_impressions);
    let mut oracle = OracleHandle::default();
    for t in 0..cfg.n_impressions {
        let u = rng.gen_range(0..cfg.n_users);
        let v = rng.gen_range(0..cfg.n_videos);
        let dot: f64 = user_latents[u]
            .iter()
            .zip(&video_latents[v])
            .map(|(a, b)| a * b)
            .sum();
        let q_star = affinity_curve(cfg, dot);
        let seg_len = durations[v] / cfg.m as f64;
        // Bernoulli chain: each segment is entered iff all previous rolls
        // succeeded and this roll lands under q*_i.
        let mut watched = 0usize;
        for &q in &q_star {
            let roll: f64 = rng.gen();
            if roll < q {
                watched += 1;
            } else {
                break;
            }
        }
        let watch_time = if watched == cfg.m {
            durations[v] // all segments entered means the full video
        } else {
            watched as f64 * seg_len
        };
        let user_id = format!("u{u:0uw$}");
        let video_id = format!("v{v:0vw$}");
        let expected = expected_time(&q_star, seg_len);
        oracle.insert(user_id.clone(), video_id.clone(), OracleEntry {
            q_star,
            expected_time_sec: expected,
        });
        records.push(InteractionRecord {
            user_id,
            video_id,
            timestamp_ms: t as i64,
            duration_sec: durations[v],
            watch_time_sec: watch_time,
        });
    }
    Ok((records, oracle))
}

/// Sidecar line: the record fields plus the ground truth.
#[derive(Debug, Serialize, Deserialize)]
pub struct OracleLine {
    pub user_id: String,
    pub video_id: String,
    pub timestamp_ms: i64,
    pub duration_sec: f64,
    pub watch_time_sec: f64,
    pub q_star: Vec<f64>,
    pub expected_time_sec: f64,
}

/// Serialize the oracle sidecar, one line per impression, in log order.
pub fn write_oracle_sidecar<W: std::io::Write>(
    w: &mut W,
    records: &[InteractionRecord],
    oracle: &OracleHandle,
) -> Result<(), SynthError> {
    for r in records {
        let entry = oracle.get(&r.user_id, &r.video_id)?;
        let line = OracleLine {
            user_id: r.user_id.clone(),
            video_id: r.video_id.clone(),
            timestamp_ms: r.timestamp_ms,
            duration_sec: r.duration_sec,
            watch_time_sec: r.watch_time_sec,
            q_star: entry.q_star.clone(),
            expected_time_sec: entry.expected_time_sec,
        };
        serde_json::to_writer(&mut *w, &line).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        writeln!(w).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    }
    Ok(())
}

/// Load a sidecar written by [`write_oracle_sidecar`].
pub fn read_oracle_sidecar<R: std::io::BufRead>(r: R) -> Result<OracleHandle, SynthError> {
    let mut oracle = OracleHandle::default();
    for line in r.lines() {
        let line = line.map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: OracleLine =
            serde_json::from_str(&line).map_err(|e| SynthError::InvalidConfig(format!("bad sidecar line: {e}")))?;
        oracle.insert(parsed.user_id, parsed.video_id, OracleEntry {
            q_star: parsed.q_star,
            expected_time_sec: parsed.expected_time_sec,
        });
    }
    Ok(oracle)
}
