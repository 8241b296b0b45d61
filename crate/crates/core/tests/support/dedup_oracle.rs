//! Brute-force duplicate-span oracles. Nothing here touches suffix arrays.

#![allow(dead_code)]

/// `(doc_index, start, length, match_count)`
pub type Span = (usize, usize, usize, usize);

/// All-pairs comparison of every `threshold`-byte window in the corpus.
///
/// A repeated substring longer than the threshold is covered by its
/// threshold-length windows, each of which also repeats, so marking windows is
/// enough. `oracle_all_lengths` checks that claim on small inputs.
pub fn oracle_spans(docs: &[Vec<u8>], threshold: usize) -> Vec<Span> {
    // Windows in corpus order: document order, then offset.
    let windows: Vec<(usize, usize)> = docs
        .iter()
        .enumerate()
        .flat_map(|(d, doc)| (0..(doc.len() + 1).saturating_sub(threshold)).map(move |o| (d, o)))
        .collect();
    let bytes = |&(d, o): &(usize, usize)| &docs[d][o..o + threshold];

    let mut marked: Vec<Vec<usize>> = docs.iter().map(|d| vec![0; d.len()]).collect();
    if threshold <= 8 {
        // Same comparisons, with each window packed into an integer.
        let keys: Vec<u64> = windows
            .iter()
            .map(|w| bytes(w).iter().fold(0u64, |k, &b| (k << 8) | b as u64))
            .collect();
        for (i, (w, &key)) in windows.iter().zip(&keys).enumerate() {
            let count = keys.iter().filter(|&&k| k == key).count();
            if keys[..i].contains(&key) {
                marked[w.0][w.1] = count;
            }
        }
        return collect_runs(docs, &marked, threshold);
    }
    for (i, w) in windows.iter().enumerate() {
        let mut count = 0;
        let mut earlier = false;
        for (j, v) in windows.iter().enumerate() {
            if bytes(w) == bytes(v) {
                count += 1;
                if j < i {
                    earlier = true;
                }
            }
        }
        if earlier {
            marked[w.0][w.1] = count;
        }
    }
    collect_runs(docs, &marked, threshold)
}

/// Literal definition: bytes covered by any non-first occurrence of any
/// substring of length >= threshold. Quartic; only for tiny inputs.
pub fn oracle_all_lengths(docs: &[Vec<u8>], threshold: usize) -> Vec<(usize, usize, usize)> {
    let mut covered: Vec<Vec<bool>> = docs.iter().map(|d| vec![false; d.len()]).collect();
    for (d, doc) in docs.iter().enumerate() {
        for start in 0..doc.len() {
            for end in start + threshold..=doc.len() {
                let needle = &doc[start..end];
                let seen_before = docs.iter().enumerate().any(|(e, other)| {
                    (0..(other.len() + 1).saturating_sub(needle.len())).any(|o| {
                        (e < d || (e == d && o < start)) && &other[o..o + needle.len()] == needle
                    })
                });
                if seen_before {
                    covered[d][start..end].iter_mut().for_each(|c| *c = true);
                }
            }
        }
    }
    let mut runs = Vec::new();
    for (d, cov) in covered.iter().enumerate() {
        let mut i = 0;
        while i < cov.len() {
            if cov[i] {
                let s = i;
                while i < cov.len() && cov[i] {
                    i += 1;
                }
                runs.push((d, s, i - s));
            } else {
                i += 1;
            }
        }
    }
    runs
}

fn collect_runs(docs: &[Vec<u8>], marked: &[Vec<usize>], threshold: usize) -> Vec<Span> {
    let mut spans = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        let mut covered = vec![false; doc.len()];
        for (o, &m) in marked[d].iter().enumerate() {
            if m > 0 {
                covered[o..o + threshold].iter_mut().for_each(|c| *c = true);
            }
        }
        let mut i = 0;
        while i < doc.len() {
            if !covered[i] {
                i += 1;
                continue;
            }
            let s = i;
            while i < doc.len() && covered[i] {
                i += 1;
            }
            let count = marked[d][s..i].iter().copied().max().unwrap_or(0);
            spans.push((d, s, i - s, count));
        }
    }
    spans
}

/// Deterministic random corpus: `(documents, threshold)`.
pub fn random_corpus(seed: u64, max_total: usize) -> (Vec<Vec<u8>>, usize) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let alphabet = &b"abcd"[..rng.gen_range(2..=4)];
    let threshold = rng.gen_range(2..=8);
    let total = rng.gen_range(0..=max_total);
    let num_docs = rng.gen_range(1..=12usize);
    let mut cuts: Vec<usize> = (0..num_docs - 1).map(|_| rng.gen_range(0..=total)).collect();
    cuts.push(0);
    cuts.push(total);
    cuts.sort_unstable();
    let docs = cuts
        .windows(2)
        .map(|w| (0..w[1] - w[0]).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect())
        .collect();
    (docs, threshold)
}
