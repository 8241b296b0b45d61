//! Browser demo over the corpus toolkit. The plain functions here do the
//! work and are tested natively; the `wasm` module wraps them for
//! JavaScript.

use empathy_corpus::curation::{word_stats, TextStats};
use empathy_corpus::suffix_dedup::{build_suffix_array, find_duplicate_spans, ConcatCorpus, DedupConfig, DedupMode};
use serde::Serialize;

/// A piece of a document, flagged if it lies inside a duplicate span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub text: String,
    pub duplicate: bool,
    /// Corpus-wide occurrence count of the span, 0 for unique text.
    pub match_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Highlighted {
    pub documents: Vec<Vec<Segment>>,
    pub spans: usize,
    pub duplicate_bytes: usize,
}

fn widen(doc: &str, mut start: usize, mut end: usize) -> (usize, usize) {
    while !doc.is_char_boundary(start) {
        start -= 1;
    }
    while !doc.is_char_boundary(end) {
        end += 1;
    }
    (start, end)
}

/// Splits each document into unique and duplicated segments.
pub fn highlight_duplicates(docs: &[String], threshold: usize) -> Result<Highlighted, String> {
    let corpus = ConcatCorpus::from_documents(docs).map_err(|e| e.to_string())?;
    let spans = find_duplicate_spans(&corpus, &DedupConfig::new(threshold, DedupMode::ExciseSpans))
        .map_err(|e| e.to_string())?;
    let mut documents: Vec<Vec<Segment>> = vec![Vec::new(); docs.len()];
    let mut cursor = vec![0usize; docs.len()];
    let mut duplicate_bytes = 0;
    for span in &spans {
        let doc = &docs[span.doc_index];
        let (start, end) = widen(doc, span.start, span.start + span.length);
        let at = cursor[span.doc_index];
        let start = start.max(at);
        if start > at {
            documents[span.doc_index].push(Segment { text: doc[at..start].into(), duplicate: false, match_count: 0 });
        }
        if end > start {
            documents[span.doc_index].push(Segment {
                text: doc[start..end].into(),
                duplicate: true,
                match_count: span.match_count,
            });
            duplicate_bytes += end - start;
        }
        cursor[span.doc_index] = end.max(at);
    }
    for (i, doc) in docs.iter().enumerate() {
        if cursor[i] < doc.len() || documents[i].is_empty() {
            documents[i].push(Segment { text: doc[cursor[i]..].into(), duplicate: false, match_count: 0 });
        }
    }
    Ok(Highlighted { documents, spans: spans.len(), duplicate_bytes })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SuffixRow {
    pub rank: usize,
    pub position: usize,
    /// Common prefix with the previous row.
    pub lcp: usize,
    pub suffix: String,
}

/// The first `limit` rows of the sorted suffix table, with suffixes cut to
/// `preview` bytes.
pub fn suffix_table(text: &str, limit: usize, preview: usize) -> Vec<SuffixRow> {
    let bytes = text.as_bytes();
    let index = build_suffix_array(bytes);
    index
        .sa
        .iter()
        .zip(&index.lcp)
        .take(limit)
        .enumerate()
        .map(|(rank, (&position, &lcp))| {
            let end = (position + preview).min(bytes.len());
            SuffixRow { rank, position, lcp, suffix: String::from_utf8_lossy(&bytes[position..end]).into_owned() }
        })
        .collect()
}

/// Word-count summary of each non-empty line.
pub fn line_word_stats(text: &str) -> TextStats {
    word_stats(text.lines().filter(|l| !l.trim().is_empty()))
}

#[cfg(target_arch = "wasm32")]
mod wasm {
    use wasm_bindgen::prelude::*;

    fn to_js<T: serde::Serialize>(value: &T) -> Result<JsValue, JsValue> {
        serde_wasm_bindgen::to_value(value).map_err(|e| JsValue::from_str(&e.to_string()))
    }

    /// `documents`: array of strings.
    #[wasm_bindgen(js_name = highlightDuplicates)]
    pub fn highlight_duplicates(documents: JsValue, threshold: usize) -> Result<JsValue, JsValue> {
        let docs: Vec<String> = serde_wasm_bindgen::from_value(documents)?;
        let out = super::highlight_duplicates(&docs, threshold).map_err(|e| JsValue::from_str(&e))?;
        to_js(&out)
    }

    #[wasm_bindgen(js_name = suffixTable)]
    pub fn suffix_table(text: &str, limit: usize, preview: usize) -> Result<JsValue, JsValue> {
        to_js(&super::suffix_table(text, limit, preview))
    }

    #[wasm_bindgen(js_name = wordStats)]
    pub fn word_stats(text: &str) -> Result<JsValue, JsValue> {
        to_js(&super::line_word_stats(text))
    }
}
