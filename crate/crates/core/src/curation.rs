//! Sensitive-term filtering and text-length statistics.

use std::collections::BTreeSet;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus_model::{Clock, CorpusRecord, StageManifest, StageName};
use crate::stats::mean_std;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchPolicy {
    /// Case-insensitive; a term must not be glued to letters, digits or `_`
    /// on either side.
    #[default]
    WordBoundary,
}

/// A set of lowercase terms, or the disabled lexicon that matches nothing.
#[derive(Debug, Clone)]
pub struct Lexicon {
    terms: BTreeSet<String>,
    match_policy: MatchPolicy,
    matcher: Option<Regex>,
}

impl Lexicon {
    pub fn new<I, S>(terms: I) -> Result<Self, CurationError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = BTreeSet::new();
        for term in terms {
            let term = term.as_ref().split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
            if term.is_empty() {
                return Err(CurationError::Config("lexicon contains an empty term".into()));
            }
            set.insert(term);
        }
        if set.is_empty() {
            return Err(CurationError::Config(
                "lexicon has no terms; use the disabled lexicon to skip filtering".into(),
            ));
        }
        let alternatives: Vec<String> = set
            .iter()
            .map(|t| t.split(' ').map(regex::escape).collect::<Vec<_>>().join(r"\s+"))
            .collect();
        let pattern = format!(r"(?i)(?:^|\W)(?:{})(?:\W|$)", alternatives.join("|"));
        let matcher = Regex::new(&pattern).map_err(|e| CurationError::Config(format!("lexicon pattern: {e}")))?;
        Ok(Self {
            terms: set,
            match_policy: MatchPolicy::WordBoundary,
            matcher: Some(matcher),
        })
    }

    pub fn disabled() -> Self {
        Self {
            terms: BTreeSet::new(),
            match_policy: MatchPolicy::WordBoundary,
            matcher: None,
        }
    }

    /// One term per line; blank lines and lines starting with `#` are skipped.
    pub fn from_file(path: &Path) -> Result<Self, CurationError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CurationError::Config(format!("cannot read lexicon {}: {e}", path.display())))?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn is_enabled(&self) -> bool {
        self.matcher.is_some()
    }

    pub fn terms(&self) -> &BTreeSet<String> {
        &self.terms
    }

    pub fn match_policy(&self) -> MatchPolicy {
        self.match_policy
    }

    pub fn matches(&self, text: &str) -> bool {
        self.matcher.as_ref().is_some_and(|m| m.is_match(text))
    }
}

/// Result of a filter pass. Removed records carry `filtered = true`.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Vec<CorpusRecord>,
    pub removed: Vec<CorpusRecord>,
    pub manifest: StageManifest,
}

/// Removes every record whose explanation or response mentions a lexicon
/// term. Order is preserved in both partitions.
pub fn filter_sensitive(records: Vec<CorpusRecord>, lexicon: &Lexicon, config_hash: &str, clock: &Clock) -> FilterOutcome {
    let started_at = clock.timestamp();
    let input_count = records.len();
    let (kept, mut removed): (Vec<_>, Vec<_>) = records
        .into_iter()
        .partition(|r| !(lexicon.matches(&r.explanation.text) || lexicon.matches(&r.response_text)));
    for record in &mut removed {
        record.filtered = true;
    }
    let manifest = StageManifest {
        stage_name: StageName::Filter,
        input_count,
        output_count: kept.len(),
        removed_count: removed.len(),
        config_hash: config_hash.to_string(),
        started_at,
        finished_at: clock.timestamp(),
        dedup: None,
    };
    FilterOutcome { kept, removed, manifest }
}

pub const HISTOGRAM_BUCKET_WIDTH: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBucket {
    /// Inclusive lower bound in words.
    pub lo: usize,
    /// Exclusive upper bound.
    pub hi: usize,
    pub count: usize,
}

/// Word-count summary. The moment fields are `None` for an empty input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextStats {
    pub count: usize,
    pub mean_words: Option<f64>,
    /// Population standard deviation.
    pub std_words: Option<f64>,
    pub min: Option<usize>,
    pub max: Option<usize>,
    pub histogram: Vec<HistogramBucket>,
}

/// Number of maximal whitespace-free runs.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn word_stats<I, S>(texts: I) -> TextStats
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let counts: Vec<usize> = texts.into_iter().map(|t| word_count(t.as_ref())).collect();
    let moments = mean_std(counts.iter().map(|&c| c as f64));
    let max = counts.iter().copied().max();
    let mut histogram: Vec<HistogramBucket> = match max {
        Some(m) => (0..=m / HISTOGRAM_BUCKET_WIDTH)
            .map(|b| HistogramBucket {
                lo: b * HISTOGRAM_BUCKET_WIDTH,
                hi: (b + 1) * HISTOGRAM_BUCKET_WIDTH,
                count: 0,
            })
            .collect(),
        None => Vec::new(),
    };
    for &c in &counts {
        histogram[c / HISTOGRAM_BUCKET_WIDTH].count += 1;
    }
    TextStats {
        count: counts.len(),
        mean_words: moments.map(|m| m.0),
        std_words: moments.map(|m| m.1),
        min: counts.iter().copied().min(),
        max,
        histogram,
    }
}

/// `lo,hi,count` rows with a header line.
pub fn histogram_csv(stats: &TextStats) -> String {
    let mut out = String::from("lo,hi,count\n");
    for b in &stats.histogram {
        out.push_str(&format!("{},{},{}\n", b.lo, b.hi, b.count));
    }
    out
}
