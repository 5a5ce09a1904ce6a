//! Inverted index over surrogate documents with an exact integer
//! dot-product scorer.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{checked_count, ByteReader, ByteWriter, FORMAT_VERSION, INDEX_MAGIC};
use crate::permutation::SurrogateDocument;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub weight: u32,
}

/// Corpus statistics frozen at seal time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexStats {
    pub doc_count: u64,
    pub postings: u64,
    df: HashMap<String, u64>,
}

impl IndexStats {
    pub fn document_frequency(&self, term: &str) -> Option<u64> {
        self.df.get(term).copied()
    }

    pub fn term_count(&self) -> usize {
        self.df.len()
    }

    /// `ln(N / df)`, or `None` for a term the corpus never saw.
    pub fn idf(&self, term: &str) -> Option<f64> {
        self.df
            .get(term)
            .map(|&df| (self.doc_count as f64 / df as f64).ln())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoredHit {
    pub doc: u32,
    pub doc_id: String,
    pub score: u64,
}

#[derive(Debug, Clone, Default)]
pub struct InvertedIndex {
    doc_ids: Vec<String>,
    doc_lookup: HashMap<String, u32>,
    postings: BTreeMap<String, Vec<Posting>>,
    stats: Option<IndexStats>,
}

impl InvertedIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a document, returning its ordinal.
    pub fn add_document(&mut self, doc: &SurrogateDocument) -> Result<u32> {
        if self.stats.is_some() {
            return Err(Error::AlreadySealed);
        }
        if self.doc_lookup.contains_key(&doc.doc_id) {
            return Err(Error::DuplicateDocument(doc.doc_id.clone()));
        }
        let ord = u32::try_from(self.doc_ids.len())
            .map_err(|_| Error::InvalidParameter("too many documents".into()))?;
        for (term, &weight) in doc.terms() {
            let posting = Posting { doc: ord, weight };
            match self.postings.get_mut(term.as_str()) {
                Some(list) => list.push(posting),
                None => {
                    self.postings.insert(term.clone(), vec![posting]);
                }
            }
        }
        self.doc_lookup.insert(doc.doc_id.clone(), ord);
        self.doc_ids.push(doc.doc_id.clone());
        Ok(ord)
    }

    /// Freezes the index. Sealing again returns the same stats.
    pub fn seal(&mut self) -> Result<&IndexStats> {
        if self.doc_ids.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if self.stats.is_none() {
            let df: HashMap<String, u64> = self
                .postings
                .iter()
                .map(|(t, list)| (t.clone(), list.len() as u64))
                .collect();
            self.stats = Some(IndexStats {
                doc_count: self.doc_ids.len() as u64,
                postings: df.values().sum(),
                df,
            });
        }
        Ok(self.stats.as_ref().expect("just sealed"))
    }

    pub fn is_sealed(&self) -> bool {
        self.stats.is_some()
    }

    pub fn stats(&self) -> Result<&IndexStats> {
        self.stats.as_ref().ok_or(Error::NotSealed)
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_id(&self, ord: u32) -> Option<&str> {
        self.doc_ids.get(ord as usize).map(String::as_str)
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn ordinal(&self, doc_id: &str) -> Option<u32> {
        self.doc_lookup.get(doc_id).copied()
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn postings_count(&self) -> u64 {
        self.postings.values().map(|l| l.len() as u64).sum()
    }

    pub fn posting_list(&self, term: &str) -> Option<&[Posting]> {
        self.postings.get(term).map(Vec::as_slice)
    }

    pub fn idf(&self, term: &str) -> Result<f64> {
        self.stats()?
            .idf(term)
            .ok_or_else(|| Error::UnknownTerm(term.to_string()))
    }

    /// Top `c` documents by `sum_t w_q(t) * w_d(t)`, descending, ties to the
    /// lower ordinal. Documents scoring zero are left out.
    pub fn score_query(&self, query: &SurrogateDocument, c: usize) -> Result<Vec<ScoredHit>> {
        self.stats()?;
        if c == 0 {
            return Ok(Vec::new());
        }
        let mut acc = vec![0u64; self.doc_ids.len()];
        let mut touched = Vec::new();
        for (term, &qw) in query.terms() {
            let Some(list) = self.postings.get(term.as_str()) else {
                continue;
            };
            for p in list {
                let slot = &mut acc[p.doc as usize];
                if *slot == 0 {
                    touched.push(p.doc);
                }
                *slot += u64::from(qw) * u64::from(p.weight);
            }
        }

        // min-heap of the best c (score, lower-ordinal-first) keys
        let mut heap = BinaryHeap::with_capacity(c + 1);
        for doc in touched {
            heap.push(Reverse((acc[doc as usize], Reverse(doc))));
            if heap.len() > c {
                heap.pop();
            }
        }
        let mut best: Vec<(u64, u32)> = heap
            .into_iter()
            .map(|Reverse((score, Reverse(doc)))| (score, doc))
            .collect();
        best.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(best
            .into_iter()
            .map(|(score, doc)| ScoredHit {
                doc,
                doc_id: self.doc_ids[doc as usize].clone(),
                score,
            })
            .collect())
    }

    /// Serializes a sealed index in the `PIDX` layout.
    ///
    /// Header: magic, version, N, term count, postings count. Then the sorted
    /// term dictionary (`u32` length, bytes, `u64` df, `u64` offset into the
    /// posting section), the posting section length and bytes (per list:
    /// varint doc gaps interleaved with varint weights), and the doc-id table.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let stats = self.stats()?;
        let mut section = ByteWriter::new();
        let mut dictionary = Vec::with_capacity(self.postings.len());
        for (term, list) in &self.postings {
            dictionary.push((term, list.len() as u64, section.len() as u64));
            let mut prev = 0u32;
            for (n, p) in list.iter().enumerate() {
                let gap = if n == 0 { p.doc } else { p.doc - prev };
                section.varint(u64::from(gap));
                section.varint(u64::from(p.weight));
                prev = p.doc;
            }
        }
        let section = section.into_inner();

        let mut w = ByteWriter::new();
        w.bytes(INDEX_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u64(stats.doc_count);
        w.u64(self.postings.len() as u64);
        w.u64(stats.postings);
        for (term, df, offset) in dictionary {
            w.string(term)?;
            w.u64(df);
            w.u64(offset);
        }
        w.u64(section.len() as u64);
        w.bytes(&section);
        for id in &self.doc_ids {
            w.string(id)?;
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("index file", bytes);
        r.header(INDEX_MAGIC)?;
        let n = r.u64()?;
        let term_count = r.u64()?;
        let postings_count = r.u64()?;
        let n_docs = checked_count(&r, n, 4)?;
        if n_docs == 0 || n_docs > u32::MAX as usize {
            return Err(r.err(format!("invalid document count {n}")));
        }
        let term_count = checked_count(&r, term_count, 20)?;

        let mut dictionary: Vec<(String, u64, u64)> = Vec::with_capacity(term_count);
        for _ in 0..term_count {
            let term = r.string()?;
            let df = r.u64()?;
            let offset = r.u64()?;
            if let Some((prev, _, prev_offset)) = dictionary.last() {
                if *prev >= term {
                    return Err(r.err("term dictionary is not strictly sorted"));
                }
                if *prev_offset >= offset {
                    return Err(r.err("posting offsets are not increasing"));
                }
            }
            if df == 0 || df > n {
                return Err(r.err(format!("document frequency {df} of {term} out of range")));
            }
            dictionary.push((term, df, offset));
        }
        let df_sum: u64 = dictionary.iter().map(|d| d.1).sum();
        if df_sum != postings_count {
            return Err(r.err(format!(
                "postings count {postings_count} disagrees with dictionary total {df_sum}"
            )));
        }

        let section_len = r.u64()?;
        let section_len = checked_count(&r, section_len, 1)?;
        let section = r.take(section_len)?;
        let mut postings = BTreeMap::new();
        for (term, df, offset) in dictionary {
            let start = offset as usize;
            if start > section.len() {
                return Err(r.err(format!("posting offset {offset} outside section")));
            }
            let mut pr = ByteReader::new("index posting list", &section[start..]);
            let mut list = Vec::with_capacity(df as usize);
            let mut doc = 0u64;
            for i in 0..df {
                let gap = pr.varint()?;
                if i > 0 && gap == 0 {
                    return Err(r.err(format!("repeated document in posting list of {term}")));
                }
                doc += gap;
                let weight = pr.varint()?;
                if doc >= n || weight == 0 || weight > u64::from(u32::MAX) {
                    return Err(r.err(format!("invalid posting ({doc}, {weight}) for {term}")));
                }
                list.push(Posting {
                    doc: doc as u32,
                    weight: weight as u32,
                });
            }
            postings.insert(term, list);
        }

        let mut index = InvertedIndex {
            postings,
            ..Default::default()
        };
        for ord in 0..n_docs {
            let id = r.string()?;
            if index.doc_lookup.insert(id.clone(), ord as u32).is_some() {
                return Err(r.err(format!("duplicate document id {id}")));
            }
            index.doc_ids.push(id);
        }
        r.finish()?;
        index.seal()?;
        Ok(index)
    }

    /// Writes the index and returns the file size in bytes.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
