//! Interaction-log ingestion, segment labeling, and training-example
//! assembly.
//!
//! The on-disk format is JSON lines, one flat object per impression. The
//! parser tolerates unknown fields (so an oracle sidecar can be read as a
//! plain log) but rejects a stream in which more than 1% of non-blank lines
//! fail to parse.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{malformed} of {total} lines malformed (> 1%); first offenders at lines {first:?}")]
    TooManyMalformed {
        malformed: usize,
        total: usize,
        first: Vec<usize>,
    },
    #[error("{0}")]
    Domain(String),
}

/// One logged impression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub video_id: String,
    pub timestamp_ms: i64,
    pub duration_sec: f64,
    pub watch_time_sec: f64,
}

/// Raw line shape; extra fields (for example a sidecar's q_star) are ignored.
#[derive(Deserialize)]
struct RawRecord {
    user_id: String,
    video_id: String,
    timestamp_ms: i64,
    duration_sec: f64,
    watch_time_sec: f64,
}

#[derive(Debug, Default)]
pub struct ParseReport {
    pub records: Vec<InteractionRecord>,
    /// Count of non-blank lines that failed to parse or validate.
    pub malformed: usize,
    /// 1-based line numbers of the first few malformed lines.
    pub malformed_lines: Vec<usize>,
    /// Count of records whose watch time was clamped into [0, duration].
    pub clamped: usize,
}

/// Parse a JSON-lines interaction log. Watch times are clamped into
/// [0, duration] (rewatch loops and logger jitter both occur in practice);
/// a non-positive duration makes the line malformed. Blank lines are
/// skipped without counting. An empty stream yields an empty report.
pub fn parse_log<R: BufRead>(reader: R) -> Result<ParseReport, DataError> {
    let mut report = ParseReport::default();
    let mut total = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let lineno = idx + 1;
        match serde_json::from_str::<RawRecord>(&line) {
            Ok(raw) if raw.duration_sec > 0.0 && raw.watch_time_sec.is_finite() => {
                let mut watch = raw.watch_time_sec;
                if watch < 0.0 || watch > raw.duration_sec {
                    watch = watch.clamp(0.0, raw.duration_sec);
                    report.clamped += 1;
                }
                report.records.push(InteractionRecord {
                    user_id: raw.user_id,
                    video_id: raw.video_id,
                    timestamp_ms: raw.timestamp_ms,
                    duration_sec: raw.duration_sec,
                    watch_time_sec: watch,
                });
            }
            _ => {
                report.malformed += 1;
                if report.malformed_lines.len() < 10 {
                    report.malformed_lines.push(lineno);
                }
            }
        }
    }
    if report.malformed * 100 > total {
        return Err(DataError::TooManyMalformed {
            malformed: report.malformed,
            total,
            first: report.malformed_lines,
        });
    }
    Ok(report)
}

/// Per-segment supervision state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    /// The viewer entered this segment (y = 1).
    Watched,
    /// First segment the viewer did not enter (y = 0).
    Stopped,
    /// Segments after the stop; unobserved, excluded from the loss.
    Masked,
}

/// Uniform partition of `duration` into `m` segments, plus the label vector.
/// y_i = Watched iff watch > i * d (strict, so watch = 0 stops at segment 0
/// and exactly reaching a boundary does not enter the next segment). A fully
/// watched video labels every segment Watched; the censoring beyond the end
/// of the video is not penalized.
pub fn segment_labels(watch: f64, duration: f64, m: usize) -> (Vec<f64>, Vec<Label>) {
    assert!(m >= 1, "need at least one segment");
    assert!(duration > 0.0, "duration must be positive");
    let d = duration / m as f64;
    let durations = vec![d; m];
    let mut labels = Vec::with_capacity(m);
    let mut stopped = false;
    for i in 0..m {
        if stopped {
            labels.push(Label::Masked);
        } else if watch > i as f64 * d {
            labels.push(Label::Watched);
        } else {
            labels.push(Label::Stopped);
            stopped = true;
        }
    }
    (durations, labels)
}

/// One history item: a previously watched video and its coarse completion
/// bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub video_id: String,
    pub behavior_token: usize,
}

/// Fully assembled supervision unit for one impression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub user_id: String,
    pub video_id: String,
    pub timestamp_ms: i64,
    pub duration_sec: f64,
    pub watch_time_sec: f64,
    /// Most recent strictly earlier impressions of the same user,
    /// chronological, at most L_hist of them.
    pub history: Vec<HistoryEntry>,
    pub segment_durations: Vec<f64>,
    pub labels: Vec<Label>,
}

/// Completion-ratio bucket in 0..b.
pub fn behavior_token(watch: f64, duration: f64, b: usize) -> usize {
    assert!(b >= 1);
    let ratio = (watch / duration).clamp(0.0, 1.0);
    ((ratio * b as f64).floor() as usize).min(b - 1)
}

/// Build training examples from parsed records. Histories contain only
/// impressions of the same user with a strictly earlier timestamp (equal
/// timestamps exclude each other, so the target never leaks into its own
/// features). Output order is (user_id, timestamp, video_id).
pub fn build_examples(
    records: &[InteractionRecord],
    l_hist: usize,
    m: usize,
    b: usize,
) -> Vec<TrainingExample> {
    let mut by_user: BTreeMap<&str, Vec<&InteractionRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(&r.user_id).or_default().push(r);
    }
    let mut out = Vec::with_capacity(records.len());
    for (_, mut items) in by_user {
        items.sort_by(|a, b| {
            a.timestamp_ms
                .cmp(&b.timestamp_ms)
                .then_with(|| a.video_id.cmp(&b.video_id))
        });
        for (i, target) in items.iter().enumerate() {
            // Scan backwards for strictly earlier impressions; stop once
            // L_hist are collected. Items are time-sorted so everything
            // before the first strictly-earlier index qualifies.
            let mut hist: Vec<HistoryEntry> = Vec::new();
            for prev in items[..i].iter().rev() {
                if prev.timestamp_ms >= target.timestamp_ms {
                    continue;
                }
                hist.push(HistoryEntry {
                    video_id: prev.video_id.clone(),
                    behavior_token: behavior_token(prev.watch_time_sec, prev.duration_sec, b),
                });
                if hist.len() == l_hist {
                    break;
                }
            }
            hist.reverse();
            let (durations, labels) = segment_labels(target.watch_time_sec, target.duration_sec, m);
            out.push(TrainingExample {
                user_id: target.user_id.clone(),
                video_id: target.video_id.clone(),
                timestamp_ms: target.timestamp_ms,
                duration_sec: target.duration_sec,
                watch_time_sec: target.watch_time_sec,
                history: hist,
                segment_durations: durations,
                labels,
            });
        }
    }
    out
}

/// User and video vocabularies from a training split. Video ids are drawn
/// from targets and histories alike, so a video seen only in someone's
/// history still gets its own row.
pub fn build_vocabs(examples: &[TrainingExample]) -> (Vocab, Vocab) {
    let users = Vocab::build(examples.iter().map(|e| e.user_id.as_str()));
    let videos = Vocab::build(examples.iter().flat_map(|e| {
        std::iter::once(e.video_id.as_str()).chain(e.history.iter().map(|h| h.video_id.as_str()))
    }));
    (users, videos)
}

/// String-id vocabulary with index 0 reserved for out-of-vocabulary lookups.
/// Built from sorted unique ids, so construction order does not matter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        let unique: BTreeSet<&str> = ids.into_iter().collect();
        let ids: Vec<String> = unique.into_iter().map(String::from).collect();
        let index = ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i + 1))
            .collect();
        Vocab { ids, index }
    }

    pub fn from_id_list(ids: Vec<String>) -> Self {
        let index = ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i + 1))
            .collect();
        Vocab { ids, index }
    }

    /// Index of an id, or 0 (the OOV slot) if unseen.
    pub fn lookup(&self, id: &str) -> usize {
        self.index.get(id).copied().unwrap_or(0)
    }

    /// Table size including the OOV slot.
    pub fn len(&self) -> usize {
        self.ids.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Known ids in index order (index 1 onward).
    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}
