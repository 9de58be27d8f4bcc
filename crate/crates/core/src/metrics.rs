//! Evaluation metrics: mean absolute error and pairwise ranking concordance
//! (XAUC), plus the report assembled after an evaluation pass.
//!
//! XAUC over n examples has n(n-1)/2 pairs; below `n_max` examples every
//! pair is enumerated, above it a seeded uniform sample of `pair_count`
//! pairs is used so the metric stays reproducible at any scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("{0} requires at least {1} examples, got {2}")]
    TooFewExamples(&'static str, usize, usize),
    #[error("length mismatch: {preds} predictions vs {truths} truths")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Pair-enumeration policy for XAUC.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Exhaustive pair enumeration up to this many examples.
    pub n_max: usize,
    /// Sample size above `n_max`.
    pub pair_count: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_max: 10_000, pair_count: 1_000_000, seed: 0 }
    }
}

/// Mean absolute error in seconds.
pub fn mae(preds: &[f64], truths: &[f64]) -> Result<f64, MetricError> {
    if preds.len() != truths.len() {
        return Err(MetricError::LengthMismatch { preds: preds.len(), truths: truths.len() });
    }
    if preds.is_empty() {
        return Err(MetricError::TooFewExamples("mae", 1, 0));
    }
    let sum: f64 = preds.iter().zip(truths).map(|(p, t)| (p - t).abs()).sum();
    if !sum.is_finite() {
        return Err(MetricError::NonFinite("mae"));
    }
    Ok(sum / preds.len() as f64)
}

// Sign with a true zero branch; f64::signum maps +0.0 to 1.0, which would
// silently turn prediction ties into concordances.
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn pair_score(p_i: f64, p_j: f64, t_i: f64, t_j: f64) -> f64 {
    let dp = sgn(p_i - p_j);
    let dt = sgn(t_i - t_j);
    // A tie in either predictions or truths contributes half.
    if dp == 0.0 || dt == 0.0 {
        0.5
    } else if dp == dt {
        1.0
    } else {
        0.0
    }
}

/// Pairwise concordance of predicted and true orderings in [0, 1].
/// 1.0 is a perfect ranking, 0.5 is chance, ties count half.
pub fn xauc(preds: &[f64], truths: &[f64], cfg: &EvalConfig) -> Result<f64, MetricError> {
    if preds.len() != truths.len() {
        return Err(MetricError::LengthMismatch { preds: preds.len(), truths: truths.len() });
    }
    let n = preds.len();
    if n < 2 {
        return Err(MetricError::TooFewExamples("xauc", 2, n));
    }
    if preds.iter().chain(truths).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite("xauc"));
    }
    if n <= cfg.n_max {
        let mut total = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                total += pair_score(preds[i], preds[j], truths[i], truths[j]);
            }
        }
        Ok(total / (n * (n - 1) / 2) as f64)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut total = 0.0;
        for _ in 0..cfg.pair_count {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            total += pair_score(preds[i], preds[j], truths[i], truths[j]);
        }
        Ok(total / cfg.pair_count as f64)
    }
}

/// Number of pairs the XAUC above actually evaluated.
pub fn xauc_pair_count(n: usize, cfg: &EvalConfig) -> usize {
    if n <= cfg.n_max {
        n * (n - 1) / 2
    } else {
        cfg.pair_count
    }
}

/// Per-duration-bucket slice of an evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketReport {
    pub duration_lo: f64,
    pub duration_hi: f64,
    pub n_examples: usize,
    pub mae_sec: f64,
    /// Absent when the bucket has fewer than two examples.
    pub xauc: Option<f64>,
}

/// Metrics over one evaluation split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_examples: usize,
    pub mae_sec: f64,
    pub xauc: f64,
    pub n_pairs: usize,
    pub buckets: Vec<BucketReport>,
}

const REPORT_DURATION_BUCKETS: usize = 4;

/// Assemble the full report: overall MAE and XAUC plus an equal-frequency
/// duration-bucket breakdown.
pub fn eval_report(
    preds: &[f64],
    truths: &[f64],
    durations: &[f64],
    cfg: &EvalConfig,
) -> Result<EvalReport, MetricError> {
    let overall_mae = mae(preds, truths)?;
    let overall_xauc = xauc(preds, truths, cfg)?;
    assert_eq!(durations.len(), preds.len());

    let mut order: Vec<usize> = (0..durations.len()).collect();
    order.sort_by(|&a, &b| {
        durations[a]
            .partial_cmp(&durations[b])
            .expect("finite durations")
            .then(a.cmp(&b))
    });
    let n_buckets = REPORT_DURATION_BUCKETS.min(order.len().max(1));
    let mut buckets = Vec::with_capacity(n_buckets);
    for k in 0..n_buckets {
        let lo = order.len() * k / n_buckets;
        let hi = order.len() * (k + 1) / n_buckets;
        if lo == hi {
            continue;
        }
        let idx = &order[lo..hi];
        let bp: Vec<f64> = idx.iter().map(|&i| preds[i]).collect();
        let bt: Vec<f64> = idx.iter().map(|&i| truths[i]).collect();
        buckets.push(BucketReport {
            duration_lo: durations[idx[0]],
            duration_hi: durations[*idx.last().unwrap()],
            n_examples: idx.len(),
            mae_sec: mae(&bp, &bt)?,
            xauc: if idx.len() >= 2 { Some(xauc(&bp, &bt, cfg)?) } else { None },
        });
    }
    Ok(EvalReport {
        n_examples: preds.len(),
        mae_sec: overall_mae,
        xauc: overall_xauc,
        n_pairs: xauc_pair_count(preds.len(), cfg),
        buckets,
    })
}
