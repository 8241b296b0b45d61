//! Exact-substring deduplication over a document collection.
//!
//! Documents are concatenated with a `0xFF` sentinel between them and indexed
//! by a suffix array (SA-IS) plus LCP array (Kasai). Any substring of at least
//! `dup_length_threshold` bytes that occurs two or more times is a duplicate;
//! every occurrence except the earliest one in corpus order is reported.
//!
//! Lengths and offsets are **bytes**, not Unicode scalar values. When spans are
//! excised, the removal is widened to whole UTF-8 characters so that valid text
//! stays valid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Separator placed between documents. Never valid inside UTF-8 text.
pub const SENTINEL: u8 = 0xFF;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DedupError {
    #[error("dup_length_threshold must be at least 2, got {0}")]
    ThresholdTooSmall(usize),
    #[error("document {doc_index} contains the reserved sentinel byte 0xFF")]
    SentinelInDocument { doc_index: usize },
    #[error("operation requires {expected:?} mode but config has {found:?}")]
    ModeMismatch { expected: DedupMode, found: DedupMode },
}

/// Documents joined by [`SENTINEL`], with per-document offsets.
#[derive(Debug, Clone)]
pub struct ConcatCorpus {
    bytes: Vec<u8>,
    doc_offsets: Vec<usize>,
    doc_lens: Vec<usize>,
    doc_ids: Vec<String>,
}

impl ConcatCorpus {
    /// Builds a corpus from `(id, bytes)` pairs, in order.
    pub fn new<I, S, D>(docs: I) -> Result<Self, DedupError>
    where
        I: IntoIterator<Item = (S, D)>,
        S: Into<String>,
        D: AsRef<[u8]>,
    {
        let mut bytes = Vec::new();
        let mut doc_offsets = Vec::new();
        let mut doc_lens = Vec::new();
        let mut doc_ids = Vec::new();
        for (doc_index, (id, doc)) in docs.into_iter().enumerate() {
            let doc = doc.as_ref();
            if doc.contains(&SENTINEL) {
                return Err(DedupError::SentinelInDocument { doc_index });
            }
            if doc_index > 0 {
                bytes.push(SENTINEL);
            }
            doc_offsets.push(bytes.len());
            doc_lens.push(doc.len());
            doc_ids.push(id.into());
            bytes.extend_from_slice(doc);
        }
        Ok(Self {
            bytes,
            doc_offsets,
            doc_lens,
            doc_ids,
        })
    }

    /// Ids are the decimal document positions.
    pub fn from_documents<D: AsRef<[u8]>>(docs: &[D]) -> Result<Self, DedupError> {
        Self::new(docs.iter().enumerate().map(|(i, d)| (i.to_string(), d)))
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn doc_offsets(&self) -> &[usize] {
        &self.doc_offsets
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn num_documents(&self) -> usize {
        self.doc_offsets.len()
    }

    pub fn document(&self, index: usize) -> &[u8] {
        let start = self.doc_offsets[index];
        &self.bytes[start..start + self.doc_lens[index]]
    }

    /// Index of the document containing corpus offset `pos`.
    fn doc_at(&self, pos: usize) -> usize {
        self.doc_offsets.partition_point(|&o| o <= pos) - 1
    }
}

/// Sorted suffix starts and the adjacent longest-common-prefix lengths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuffixArray {
    /// `sa[i]` is the start of the i-th smallest suffix.
    pub sa: Vec<usize>,
    /// `lcp[i]` is the common prefix length of suffixes `sa[i - 1]` and `sa[i]`;
    /// `lcp[0] == 0`.
    pub lcp: Vec<usize>,
}

/// Builds the suffix array (SA-IS, linear time) and LCP array (Kasai).
pub fn build_suffix_array(text: &[u8]) -> SuffixArray {
    let symbols: Vec<usize> = text.iter().map(|&b| b as usize).collect();
    let sa = sa_is(&symbols, 255);
    let lcp = lcp_kasai(text, &sa);
    SuffixArray { sa, lcp }
}

const EMPTY: usize = usize::MAX;

/// Induced-sorting suffix array over symbols in `0..=upper`.
fn sa_is(s: &[usize], upper: usize) -> Vec<usize> {
    let n = s.len();
    match n {
        0 => return Vec::new(),
        1 => return vec![0],
        2 => return if s[0] < s[1] { vec![0, 1] } else { vec![1, 0] },
        _ if n < 16 => {
            let mut sa: Vec<usize> = (0..n).collect();
            sa.sort_by(|&a, &b| s[a..].cmp(&s[b..]));
            return sa;
        }
        _ => {}
    }

    // ls[i]: suffix i is S-type (smaller than suffix i + 1).
    let mut ls = vec![false; n];
    for i in (0..n - 1).rev() {
        ls[i] = if s[i] == s[i + 1] { ls[i + 1] } else { s[i] < s[i + 1] };
    }

    // Bucket boundaries: sum_l[c] is the start of bucket c, sum_s[c] the start
    // of its S-type part.
    let mut sum_l = vec![0usize; upper + 2];
    let mut sum_s = vec![0usize; upper + 2];
    for i in 0..n {
        if !ls[i] {
            sum_s[s[i]] += 1;
        } else {
            sum_l[s[i] + 1] += 1;
        }
    }
    for c in 0..=upper {
        sum_s[c] += sum_l[c];
        if c < upper {
            sum_l[c + 1] += sum_s[c];
        }
    }

    let mut sa = vec![EMPTY; n];
    let mut buf = vec![0usize; upper + 2];
    let mut induce = |sa: &mut [usize], lms: &[usize]| {
        sa.fill(EMPTY);
        buf.copy_from_slice(&sum_s);
        for &d in lms {
            if d == n {
                continue;
            }
            sa[buf[s[d]]] = d;
            buf[s[d]] += 1;
        }
        buf.copy_from_slice(&sum_l);
        sa[buf[s[n - 1]]] = n - 1;
        buf[s[n - 1]] += 1;
        for i in 0..n {
            let v = sa[i];
            if v != EMPTY && v >= 1 && !ls[v - 1] {
                sa[buf[s[v - 1]]] = v - 1;
                buf[s[v - 1]] += 1;
            }
        }
        buf.copy_from_slice(&sum_l);
        for i in (0..n).rev() {
            let v = sa[i];
            if v != EMPTY && v >= 1 && ls[v - 1] {
                buf[s[v - 1] + 1] -= 1;
                sa[buf[s[v - 1] + 1]] = v - 1;
            }
        }
    };

    let mut lms_map = vec![EMPTY; n + 1];
    let mut lms = Vec::new();
    for i in 1..n {
        if !ls[i - 1] && ls[i] {
            lms_map[i] = lms.len();
            lms.push(i);
        }
    }
    let m = lms.len();

    induce(&mut sa, &lms);

    if m > 0 {
        let sorted_lms: Vec<usize> = sa.iter().copied().filter(|&v| lms_map[v] != EMPTY).collect();
        let mut rec_s = vec![0usize; m];
        let mut rec_upper = 0;
        rec_s[lms_map[sorted_lms[0]]] = 0;
        for i in 1..m {
            let (mut l, mut r) = (sorted_lms[i - 1], sorted_lms[i]);
            let end_l = if lms_map[l] + 1 < m { lms[lms_map[l] + 1] } else { n };
            let end_r = if lms_map[r] + 1 < m { lms[lms_map[r] + 1] } else { n };
            let mut same = true;
            if end_l - l != end_r - r {
                same = false;
            } else {
                while l < end_l && s[l] == s[r] {
                    l += 1;
                    r += 1;
                }
                if l == n || s[l] != s[r] {
                    same = false;
                }
            }
            if !same {
                rec_upper += 1;
            }
            rec_s[lms_map[sorted_lms[i]]] = rec_upper;
        }

        let rec_sa = sa_is(&rec_s, rec_upper);
        let sorted_lms: Vec<usize> = rec_sa.iter().map(|&i| lms[i]).collect();
        induce(&mut sa, &sorted_lms);
    }
    sa
}

fn lcp_kasai(text: &[u8], sa: &[usize]) -> Vec<usize> {
    let n = text.len();
    let mut lcp = vec![0usize; n];
    if n == 0 {
        return lcp;
    }
    let mut rank = vec![0usize; n];
    for (i, &p) in sa.iter().enumerate() {
        rank[p] = i;
    }
    let mut h = 0usize;
    for p in 0..n {
        h = h.saturating_sub(1);
        let r = rank[p];
        if r == 0 {
            h = 0;
            continue;
        }
        let q = sa[r - 1];
        while p + h < n && q + h < n && text[p + h] == text[q + h] {
            h += 1;
        }
        lcp[r] = h;
    }
    lcp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupMode {
    /// Delete the duplicated bytes, keep the rest of the document.
    #[serde(alias = "excise")]
    ExciseSpans,
    /// Drop every document that contains a duplicate span.
    #[serde(alias = "drop")]
    DropDocuments,
}

impl std::str::FromStr for DedupMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "excise" | "excise_spans" => Ok(DedupMode::ExciseSpans),
            "drop" | "drop_documents" => Ok(DedupMode::DropDocuments),
            other => Err(format!("unknown dedup mode `{other}` (expected excise or drop)")),
        }
    }
}

/// Which occurrence of a repeated substring survives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepPolicy {
    /// The occurrence with the smallest corpus offset.
    #[default]
    KeepFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupConfig {
    pub dup_length_threshold: usize,
    pub mode: DedupMode,
    #[serde(default)]
    pub keep_policy: KeepPolicy,
}

impl DedupConfig {
    pub fn new(dup_length_threshold: usize, mode: DedupMode) -> Self {
        Self {
            dup_length_threshold,
            mode,
            keep_policy: KeepPolicy::KeepFirst,
        }
    }

    pub fn validate(&self) -> Result<(), DedupError> {
        if self.dup_length_threshold < 2 {
            return Err(DedupError::ThresholdTooSmall(self.dup_length_threshold));
        }
        Ok(())
    }
}

/// A maximal run of duplicated bytes inside one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateSpan {
    pub doc_index: usize,
    pub doc_id: String,
    /// Byte offset within the document.
    pub start: usize,
    pub length: usize,
    /// Largest corpus-wide occurrence count among the threshold-length
    /// substrings that make up this span.
    pub match_count: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    pub spans_found: usize,
    pub documents_dropped: usize,
    /// Bytes removed: excised span bytes, or whole dropped documents in
    /// drop mode.
    pub characters_removed: usize,
    pub documents_in: usize,
    pub documents_out: usize,
}

impl std::ops::Add for DedupReport {
    type Output = DedupReport;
    fn add(self, rhs: Self) -> Self {
        DedupReport {
            spans_found: self.spans_found + rhs.spans_found,
            documents_dropped: self.documents_dropped + rhs.documents_dropped,
            characters_removed: self.characters_removed + rhs.characters_removed,
            documents_in: self.documents_in + rhs.documents_in,
            documents_out: self.documents_out + rhs.documents_out,
        }
    }
}

impl std::iter::Sum for DedupReport {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(DedupReport::default(), |a, b| a + b)
    }
}

/// Fieldwise sum of `reports`.
pub fn dedup_report_merge(reports: &[DedupReport]) -> DedupReport {
    reports.iter().copied().sum()
}

/// A document that survived deduplication, with its original position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeptDocument {
    pub index: usize,
    pub id: String,
    pub bytes: Vec<u8>,
}

/// Reports every non-first occurrence of a repeated substring of at least
/// `dup_length_threshold` bytes, merged into maximal per-document spans and
/// sorted by corpus offset.
pub fn find_duplicate_spans(
    corpus: &ConcatCorpus,
    config: &DedupConfig,
) -> Result<Vec<DuplicateSpan>, DedupError> {
    config.validate()?;
    if corpus.bytes().len() < config.dup_length_threshold {
        return Ok(Vec::new());
    }
    let index = build_suffix_array(corpus.bytes());
    Ok(spans_from_index(corpus, &index, config.dup_length_threshold))
}

fn spans_from_index(corpus: &ConcatCorpus, index: &SuffixArray, threshold: usize) -> Vec<DuplicateSpan> {
    let text = corpus.bytes();
    let n = text.len();
    let SuffixArray { sa, lcp } = index;

    // marks[p] > 0: the window text[p..p + threshold] is a non-first
    // occurrence; the value is how many times that window occurs.
    let mut marks = vec![0u32; n];
    let mut group_start = 0;
    for i in 1..=n {
        if i < n && lcp[i] >= threshold {
            continue;
        }
        if i - group_start >= 2 {
            let members = &sa[group_start..i];
            let probe = members[0];
            // Members share their first `threshold` bytes, so one check
            // decides whether the window stays inside a document.
            if !text[probe..probe + threshold].contains(&SENTINEL) {
                let first = *members.iter().min().unwrap();
                let count = u32::try_from(members.len()).unwrap_or(u32::MAX);
                for &p in members {
                    if p != first {
                        marks[p] = count;
                    }
                }
            }
        }
        group_start = i;
    }

    // Sweep the marks into maximal covered runs. A window never spans the
    // sentinel, so each run stays inside one document.
    let mut spans = Vec::new();
    let mut p = 0;
    while p < n {
        if marks[p] == 0 {
            p += 1;
            continue;
        }
        let start = p;
        let mut end = p + threshold;
        let mut count = 0u32;
        while p < end || (p < n && marks[p] > 0) {
            if marks[p] > 0 {
                end = end.max(p + threshold);
                count = count.max(marks[p]);
            }
            p += 1;
        }
        let doc_index = corpus.doc_at(start);
        let offset = corpus.doc_offsets()[doc_index];
        spans.push(DuplicateSpan {
            doc_index,
            doc_id: corpus.doc_ids()[doc_index].clone(),
            start: start - offset,
            length: end - start,
            match_count: count as usize,
        });
    }
    spans
}

/// Length of the longest substring that occurs twice inside documents.
fn longest_repeat(corpus: &ConcatCorpus, index: &SuffixArray) -> usize {
    let mut best = 0;
    for i in 1..index.lcp.len() {
        let common = index.lcp[i];
        if common <= best {
            continue;
        }
        // Both suffixes share the prefix, so the sentinel (if any) sits at
        // the same distance in each.
        let p = index.sa[i];
        let doc = corpus.doc_at(p);
        let doc_end = corpus.doc_offsets()[doc] + corpus.doc_lens[doc];
        best = best.max(common.min(doc_end - p));
    }
    best
}

fn is_continuation(b: u8) -> bool {
    b & 0xC0 == 0x80
}

/// Deletes duplicated bytes until no substring of `dup_length_threshold`
/// bytes occurs twice. Documents keep their order; documents that end up
/// empty are dropped.
///
/// Removal proceeds in passes from long repeats to short ones: each pass runs
/// at the smaller of the previous pass's threshold and the longest repeat left
/// in the corpus, and the loop stops once that repeat is shorter than the
/// configured threshold. Splicing text back together can create new repeats;
/// they are picked up by the next pass. Because a higher threshold runs a
/// prefix of the same pass sequence, raising the threshold never removes more
/// bytes.
pub fn dedup_excise(
    corpus: &ConcatCorpus,
    config: &DedupConfig,
) -> Result<(Vec<KeptDocument>, DedupReport), DedupError> {
    config.validate()?;
    if config.mode != DedupMode::ExciseSpans {
        return Err(DedupError::ModeMismatch {
            expected: DedupMode::ExciseSpans,
            found: config.mode,
        });
    }
    let mut docs: Vec<KeptDocument> = (0..corpus.num_documents())
        .map(|i| KeptDocument {
            index: i,
            id: corpus.doc_ids()[i].clone(),
            bytes: corpus.document(i).to_vec(),
        })
        .collect();
    let mut touched = vec![false; docs.len()];
    let mut report = DedupReport {
        documents_in: docs.len(),
        ..DedupReport::default()
    };

    let mut working = corpus.clone();
    let mut level = usize::MAX;
    let mut passes = 0;
    loop {
        let index = build_suffix_array(working.bytes());
        let longest = longest_repeat(&working, &index);
        if longest < config.dup_length_threshold {
            break;
        }
        level = level.min(longest);
        let spans = spans_from_index(&working, &index, level);
        passes += 1;
        report.spans_found += spans.len();
        let mut by_doc: Vec<Vec<(usize, usize)>> = vec![Vec::new(); docs.len()];
        for span in &spans {
            let doc = &docs[span.doc_index].bytes;
            let mut start = span.start;
            let mut end = span.start + span.length;
            while start > 0 && is_continuation(doc[start]) {
                start -= 1;
            }
            while end < doc.len() && is_continuation(doc[end]) {
                end += 1;
            }
            by_doc[span.doc_index].push((start, end));
        }
        for (doc_index, ranges) in by_doc.into_iter().enumerate() {
            if ranges.is_empty() {
                continue;
            }
            touched[doc_index] = true;
            let doc = &mut docs[doc_index].bytes;
            let mut kept = Vec::with_capacity(doc.len());
            let mut cursor = 0;
            for (start, end) in ranges {
                let start = start.max(cursor);
                if start > cursor {
                    kept.extend_from_slice(&doc[cursor..start]);
                }
                report.characters_removed += end.saturating_sub(start);
                cursor = cursor.max(end);
            }
            kept.extend_from_slice(&doc[cursor..]);
            *doc = kept;
        }
        working = ConcatCorpus::new(docs.iter().map(|d| (d.id.clone(), &d.bytes)))?;
        log::debug!(
            "excise pass {passes} at {level} bytes: {} spans, {} bytes removed so far",
            spans.len(),
            report.characters_removed
        );
    }
    log::debug!("excision finished after {passes} passes");

    let before = docs.len();
    let kept: Vec<KeptDocument> = docs
        .into_iter()
        .filter(|d| !(touched[d.index] && d.bytes.is_empty()))
        .collect();
    report.documents_dropped = before - kept.len();
    report.documents_out = kept.len();
    Ok((kept, report))
}

/// Drops every document containing a reported span. The earliest occurrence
/// of each repeat is never reported, so its document is kept unless it also
/// repeats something earlier.
pub fn dedup_drop_documents(
    corpus: &ConcatCorpus,
    config: &DedupConfig,
) -> Result<(Vec<KeptDocument>, DedupReport), DedupError> {
    config.validate()?;
    if config.mode != DedupMode::DropDocuments {
        return Err(DedupError::ModeMismatch {
            expected: DedupMode::DropDocuments,
            found: config.mode,
        });
    }
    let spans = find_duplicate_spans(corpus, config)?;
    let mut flagged = vec![false; corpus.num_documents()];
    for span in &spans {
        flagged[span.doc_index] = true;
    }
    let mut report = DedupReport {
        spans_found: spans.len(),
        documents_in: corpus.num_documents(),
        ..DedupReport::default()
    };
    let mut kept = Vec::new();
    for (index, &drop) in flagged.iter().enumerate() {
        let bytes = corpus.document(index);
        if drop {
            report.documents_dropped += 1;
            report.characters_removed += bytes.len();
        } else {
            kept.push(KeptDocument {
                index,
                id: corpus.doc_ids()[index].clone(),
                bytes: bytes.to_vec(),
            });
        }
    }
    report.documents_out = kept.len();
    Ok((kept, report))
}

/// Runs whichever operation `config.mode` selects.
pub fn dedup(
    corpus: &ConcatCorpus,
    config: &DedupConfig,
) -> Result<(Vec<KeptDocument>, DedupReport), DedupError> {
    match config.mode {
        DedupMode::ExciseSpans => dedup_excise(corpus, config),
        DedupMode::DropDocuments => dedup_drop_documents(corpus, config),
    }
}
