//! Empathy scoring on the ER / IP / EX axes, aggregation and model comparison.
//!
//! Scores come from an external scorer service. Its contract is one POST per
//! batch:
//!
//! ```json
//! {"items": [{"id": "r1", "context": "...", "response": "..."}]}
//! ```
//!
//! answered with one entry per item, in order:
//!
//! ```json
//! {"scores": [{"er": 1, "ip": 0, "ex": 2}, {"error": "too long"}]}
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus_model::{CorpusRecord, RecordError};
use crate::stats::mean_std;

pub const SCORE_MIN: f64 = 0.0;
pub const SCORE_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("scorer transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("scorer protocol error: {0}")]
    Protocol(String),
    #[error("scorer rejected item: {0}")]
    Item(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Er,
    Ip,
    Ex,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Er, Axis::Ip, Axis::Ex];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Er => "er",
            Axis::Ip => "ip",
            Axis::Ex => "ex",
        }
    }
}

/// Emotional reaction, interpretation and exploration, each in `[0, 2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpathyScore {
    pub er: f64,
    pub ip: f64,
    pub ex: f64,
}

impl EmpathyScore {
    pub fn new(er: f64, ip: f64, ex: f64) -> Result<Self, EvalError> {
        let s = Self { er, ip, ex };
        s.validate()?;
        Ok(s)
    }

    pub fn get(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Er => self.er,
            Axis::Ip => self.ip,
            Axis::Ex => self.ex,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        for axis in Axis::ALL {
            let v = self.get(axis);
            if !(SCORE_MIN..=SCORE_MAX).contains(&v) {
                return Err(EvalError::Protocol(format!(
                    "{} score {v} outside [{SCORE_MIN}, {SCORE_MAX}]",
                    axis.as_str()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisMoments {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpathyAggregate {
    pub n: usize,
    pub er: AxisMoments,
    pub ip: AxisMoments,
    pub ex: AxisMoments,
}

impl EmpathyAggregate {
    pub fn get(&self, axis: Axis) -> AxisMoments {
        match axis {
            Axis::Er => self.er,
            Axis::Ip => self.ip,
            Axis::Ex => self.ex,
        }
    }
}

/// Per-axis mean and population standard deviation.
pub fn aggregate(scores: &[EmpathyScore]) -> Result<EmpathyAggregate, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Validation("cannot aggregate zero scores".into()));
    }
    for s in scores {
        s.validate().map_err(|e| EvalError::Validation(e.to_string()))?;
    }
    let moments = |axis: Axis| {
        let (mean, std) = mean_std(scores.iter().map(|s| s.get(axis))).expect("non-empty");
        AxisMoments { mean, std }
    };
    Ok(EmpathyAggregate {
        n: scores.len(),
        er: moments(Axis::Er),
        ip: moments(Axis::Ip),
        ex: moments(Axis::Ex),
    })
}

/// Relative changes as fractions (`0.2069` = +20.69%). `None` when the base
/// value is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisChange {
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub base: EmpathyAggregate,
    pub candidate: EmpathyAggregate,
    pub er: AxisChange,
    pub ip: AxisChange,
    pub ex: AxisChange,
}

impl ComparisonReport {
    pub fn get(&self, axis: Axis) -> AxisChange {
        match axis {
            Axis::Er => self.er,
            Axis::Ip => self.ip,
            Axis::Ex => self.ex,
        }
    }

    /// Human-readable table with percentages at two decimals.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{:+.2}%", v * 100.0));
        let mut out = String::from("axis  base mean±std   cand mean±std   mean change  std change\n");
        for axis in Axis::ALL {
            let (b, c, d) = (self.base.get(axis), self.candidate.get(axis), self.get(axis));
            out.push_str(&format!(
                "{:<4}  {:.2} ± {:.2}     {:.2} ± {:.2}     {:>11}  {:>10}\n",
                axis.as_str().to_uppercase(),
                b.mean,
                b.std,
                c.mean,
                c.std,
                pct(d.mean),
                pct(d.std)
            ));
        }
        out
    }
}

fn relative(base: f64, candidate: f64) -> Option<f64> {
    (base != 0.0).then(|| (candidate - base) / base)
}

pub fn compare(base: &EmpathyAggregate, candidate: &EmpathyAggregate) -> ComparisonReport {
    let change = |axis: Axis| {
        let (b, c) = (base.get(axis), candidate.get(axis));
        AxisChange {
            mean: relative(b.mean, c.mean),
            std: relative(b.std, c.std),
        }
    };
    ComparisonReport {
        base: *base,
        candidate: *candidate,
        er: change(Axis::Er),
        ip: change(Axis::Ip),
        ex: change(Axis::Ex),
    }
}

/// One response to score, with the message it answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreItem {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub response: String,
}

/// Scores one batch. A batch-level `Err` means the scorer could not be used
/// at all; per-item failures go in the returned slots.
pub trait Scorer: Send + Sync {
    fn score(&self, items: &[ScoreItem]) -> Result<Vec<Result<EmpathyScore, EvalError>>, EvalError>;
}

/// Scores `responses` (with aligned optional `contexts`) in batches of
/// `batch_size`, preserving order.
pub fn score_batch(
    scorer: &dyn Scorer,
    responses: &[String],
    contexts: &[Option<String>],
    batch_size: usize,
) -> Result<Vec<Result<EmpathyScore, EvalError>>, EvalError> {
    if responses.len() != contexts.len() {
        return Err(EvalError::Validation(format!(
            "{} responses but {} contexts",
            responses.len(),
            contexts.len()
        )));
    }
    let items: Vec<ScoreItem> = responses
        .iter()
        .zip(contexts)
        .enumerate()
        .map(|(i, (r, c))| ScoreItem {
            id: i.to_string(),
            context: c.clone(),
            response: r.clone(),
        })
        .collect();
    score_items(scorer, &items, batch_size)
}

pub fn score_items(
    scorer: &dyn Scorer,
    items: &[ScoreItem],
    batch_size: usize,
) -> Result<Vec<Result<EmpathyScore, EvalError>>, EvalError> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let scored = scorer.score(chunk)?;
        if scored.len() != chunk.len() {
            return Err(EvalError::Protocol(format!(
                "scorer returned {} scores for {} items",
                scored.len(),
                chunk.len()
            )));
        }
        out.extend(scored.into_iter().map(|r| r.and_then(|s| s.validate().map(|_| s))));
    }
    Ok(out)
}

/// Deterministic scorer for tests and dry runs.
#[derive(Debug, Clone, PartialEq)]
pub enum MockScorer {
    Fixed(EmpathyScore),
    /// Integer scores derived from a hash of the seed and response text.
    Hashed { seed: u64 },
}

impl Scorer for MockScorer {
    fn score(&self, items: &[ScoreItem]) -> Result<Vec<Result<EmpathyScore, EvalError>>, EvalError> {
        Ok(items
            .iter()
            .map(|item| {
                Ok(match self {
                    MockScorer::Fixed(s) => *s,
                    MockScorer::Hashed { seed } => {
                        let mut h = Sha256::new();
                        h.update(seed.to_le_bytes());
                        h.update(item.response.as_bytes());
                        let d = h.finalize();
                        EmpathyScore {
                            er: (d[0] % 3) as f64,
                            ip: (d[1] % 3) as f64,
                            ex: (d[2] % 3) as f64,
                        }
                    }
                })
            })
            .collect())
    }
}

#[derive(Deserialize)]
struct WireScores {
    scores: Vec<WireScore>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WireScore {
    Score { er: f64, ip: f64, ex: f64 },
    Error { error: String },
}

/// Parses a scorer reply into per-item results.
pub fn parse_scorer_reply(body: &str) -> Result<Vec<Result<EmpathyScore, EvalError>>, EvalError> {
    let wire: WireScores =
        serde_json::from_str(body).map_err(|e| EvalError::Protocol(format!("malformed scorer reply: {e}")))?;
    Ok(wire
        .scores
        .into_iter()
        .map(|w| match w {
            WireScore::Score { er, ip, ex } => EmpathyScore::new(er, ip, ex),
            WireScore::Error { error } => Err(EvalError::Item(error)),
        })
        .collect())
}

#[cfg(feature = "http")]
pub use http::HttpScorer;

#[cfg(feature = "http")]
mod http {
    use std::time::Duration;

    use super::*;
    use crate::llm_gateway::{bearer_token, post_json, AttemptError, RetryPolicy};

    /// Client for a scorer service speaking the batch contract above.
    pub struct HttpScorer {
        pub url: String,
        pub auth_token_env: Option<String>,
        pub timeout: Duration,
        pub retry: RetryPolicy,
        agent: ureq::Agent,
    }

    impl HttpScorer {
        pub fn new(url: impl Into<String>) -> Self {
            Self {
                url: url.into(),
                auth_token_env: None,
                timeout: Duration::from_secs(120),
                retry: RetryPolicy::default(),
                agent: ureq::Agent::config_builder().http_status_as_error(false).build().into(),
            }
        }
    }

    #[derive(Serialize)]
    struct WireRequest<'a> {
        items: &'a [ScoreItem],
    }

    impl Scorer for HttpScorer {
        fn score(&self, items: &[ScoreItem]) -> Result<Vec<Result<EmpathyScore, EvalError>>, EvalError> {
            let token = bearer_token(self.auth_token_env.as_deref()).map_err(|e| match e {
                AttemptError::Config(m) => EvalError::Config(m),
                other => EvalError::Config(format!("{other:?}")),
            })?;
            let max = self.retry.max_attempts.max(1);
            let mut attempt = 1;
            loop {
                match post_json(&self.agent, &self.url, token.as_deref(), self.timeout, &WireRequest { items }) {
                    Ok(body) => return parse_scorer_reply(&body),
                    Err(AttemptError::Transient { message, .. }) if attempt < max => {
                        log::debug!("scorer attempt {attempt} failed ({message}), retrying");
                        std::thread::sleep(self.retry.delay(attempt));
                        attempt += 1;
                    }
                    Err(AttemptError::Transient { message, .. } | AttemptError::Rejected { message, .. }) => {
                        return Err(EvalError::Transport {
                            attempts: attempt,
                            message,
                        })
                    }
                    Err(AttemptError::Protocol(m)) => return Err(EvalError::Protocol(m)),
                    Err(AttemptError::Config(m)) => return Err(EvalError::Config(m)),
                }
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ResponseLine {
    Plain(ScoreItem),
    Corpus(Box<CorpusRecord>),
}

/// Reads responses to score. Each line is either `{"id", "response",
/// "context"?}` or a corpus record, whose explanation becomes the context.
pub fn read_score_items(path: &Path) -> Result<Vec<ScoreItem>, RecordError> {
    let text = std::fs::read_to_string(path).map_err(|source| RecordError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ResponseLine = serde_json::from_str(line).map_err(|e| RecordError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("expected a response item or corpus record: {e}"),
        })?;
        out.push(match parsed {
            ResponseLine::Plain(item) => item,
            ResponseLine::Corpus(r) => ScoreItem {
                id: r.id,
                context: Some(r.explanation.text),
                response: r.response_text,
            },
        });
    }
    Ok(out)
}

/// Per-item outcome stored in an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<EmpathyScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Output of the `eval` command and input of `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: String,
    pub n_items: usize,
    pub n_failed: usize,
    /// Over successfully scored items only; absent if none succeeded.
    pub aggregate: Option<EmpathyAggregate>,
    pub items: Vec<ScoredItem>,
}

pub fn build_report(scorer: &str, items: &[ScoreItem], results: Vec<Result<EmpathyScore, EvalError>>) -> EvalReport {
    let scored: Vec<ScoredItem> = items
        .iter()
        .zip(results)
        .map(|(item, r)| match r {
            Ok(s) => ScoredItem {
                id: item.id.clone(),
                score: Some(s),
                error: None,
            },
            Err(e) => ScoredItem {
                id: item.id.clone(),
                score: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let ok: Vec<EmpathyScore> = scored.iter().filter_map(|s| s.score).collect();
    EvalReport {
        scorer: scorer.to_string(),
        n_items: scored.len(),
        n_failed: scored.len() - ok.len(),
        aggregate: aggregate(&ok).ok(),
        items: scored,
    }
}
