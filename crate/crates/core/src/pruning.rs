//! tf-idf term pruning for queries and indexed documents.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::index::{IndexStats, InvertedIndex};
use crate::permutation::SurrogateDocument;

/// Keeps the `keep` terms with the largest `weight * ln(N / df)`.
///
/// Terms the statistics have never seen get the maximal idf `ln(N)`. Ties
/// prefer the larger weight, then the lexicographically smaller term.
pub fn prune_by_tfidf(
    doc: &SurrogateDocument,
    stats: &IndexStats,
    keep: usize,
) -> Result<SurrogateDocument> {
    if keep == 0 {
        return Err(Error::InvalidParameter("keep must be at least 1".into()));
    }
    if keep >= doc.len() {
        return Ok(doc.clone());
    }
    let max_idf = (stats.doc_count as f64).ln();
    let mut scored: Vec<(f64, u32, &String)> = doc
        .terms()
        .iter()
        .map(|(t, &w)| (f64::from(w) * stats.idf(t).unwrap_or(max_idf), w, t))
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(b.1.cmp(&a.1))
            .then(a.2.cmp(b.2))
    });
    let terms: BTreeMap<String, u32> = scored
        .into_iter()
        .take(keep)
        .map(|(_, w, t)| (t.clone(), w))
        .collect();
    SurrogateDocument::new(doc.doc_id.clone(), terms)
}

/// Two-pass build: index everything to learn document frequencies, prune
/// every document with those statistics, then index the pruned documents.
pub fn build_pruned_index(docs: &[SurrogateDocument], keep: usize) -> Result<InvertedIndex> {
    if keep == 0 {
        return Err(Error::InvalidParameter("keep must be at least 1".into()));
    }
    let mut first = InvertedIndex::new();
    for d in docs {
        first.add_document(d)?;
    }
    let stats = first.seal()?.clone();
    drop(first);

    let pruned: Vec<SurrogateDocument> = docs
        .par_iter()
        .map(|d| prune_by_tfidf(d, &stats, keep))
        .collect::<Result<_>>()?;

    let mut index = InvertedIndex::new();
    for d in &pruned {
        index.add_document(d)?;
    }
    index.seal()?;
    Ok(index)
}
