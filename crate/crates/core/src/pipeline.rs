//! STR, rSTR, BSTR and BSTR-tfidf search pipelines.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::format::{checked_count, ByteReader, ByteWriter, FORMAT_VERSION, STORE_MAGIC};
use crate::index::InvertedIndex;
use crate::permutation::{encode_permutations, RefMode, ReferenceSet, SurrogateDocument};
use crate::pruning::{build_pruned_index, prune_by_tfidf};
use crate::vlad::{dot, VladVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SearchMode {
    /// Whole-vector surrogate text, ranked by the index alone.
    Str,
    /// Whole-vector surrogate text, top-c reordered by inner product.
    RStr,
    /// Blockwise surrogate text.
    Bstr,
    /// Blockwise surrogate text with tf-idf query pruning.
    BstrTfidf,
}

impl SearchMode {
    pub const ALL: [SearchMode; 4] = [
        SearchMode::Str,
        SearchMode::RStr,
        SearchMode::Bstr,
        SearchMode::BstrTfidf,
    ];

    pub fn ref_mode(self) -> RefMode {
        match self {
            SearchMode::Str | SearchMode::RStr => RefMode::Whole,
            SearchMode::Bstr | SearchMode::BstrTfidf => RefMode::Blockwise,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SearchMode::Str => "str",
            SearchMode::RStr => "rstr",
            SearchMode::Bstr => "bstr",
            SearchMode::BstrTfidf => "bstr-tfidf",
        }
    }
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "str" => Ok(SearchMode::Str),
            "rstr" => Ok(SearchMode::RStr),
            "bstr" => Ok(SearchMode::Bstr),
            "bstr-tfidf" => Ok(SearchMode::BstrTfidf),
            other => Err(Error::InvalidParameter(format!("unknown mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineConfig {
    pub mode: SearchMode,
    /// Truncation depth for indexed documents.
    pub k_x: usize,
    /// Truncation depth for queries.
    pub k_q: usize,
    /// Candidates reordered by rSTR.
    pub c: usize,
    /// Results returned.
    pub k: usize,
    pub prune_query: Option<usize>,
    pub prune_docs: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: SearchMode::Bstr,
            k_x: 50,
            k_q: 10,
            c: 1000,
            k: 10,
            prune_query: None,
            prune_docs: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.k_x == 0 || self.k_x > m {
            return bad(format!("k_x = {} outside 1..={m}", self.k_x));
        }
        if self.k_q == 0 || self.k_q > m {
            return bad(format!("k_q = {} outside 1..={m}", self.k_q));
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.mode == SearchMode::RStr && self.c < self.k {
            return bad(format!("c = {} must be at least k = {}", self.c, self.k));
        }
        if self.mode == SearchMode::BstrTfidf && self.prune_query.is_none() {
            return bad("bstr-tfidf needs a query pruning level".into());
        }
        if self.prune_query == Some(0) || self.prune_docs == Some(0) {
            return bad("pruning keep counts must be positive".into());
        }
        Ok(())
    }
}

/// Normalized VLAD vectors keyed by image id, held at f32 precision.
#[derive(Debug, Clone, PartialEq)]
pub struct VladStore {
    num_blocks: usize,
    block_dim: usize,
    vectors: Vec<VladVector>,
    lookup: HashMap<String, usize>,
}

impl VladStore {
    pub fn new(num_blocks: usize, block_dim: usize) -> Self {
        Self {
            num_blocks,
            block_dim,
            vectors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn from_vectors(vectors: &[VladVector]) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::InvalidParameter("store needs at least one vector".into()))?;
        let mut store = Self::new(first.num_blocks(), first.block_dim());
        for v in vectors {
            store.insert(v)?;
        }
        Ok(store)
    }

    /// Stores `v` rounded to f32 and returns its ordinal.
    pub fn insert(&mut self, v: &VladVector) -> Result<usize> {
        if v.num_blocks() != self.num_blocks || v.block_dim() != self.block_dim {
            return Err(Error::DimensionMismatch {
                expected: self.num_blocks * self.block_dim,
                actual: v.dim(),
            });
        }
        if self.lookup.contains_key(&v.image_id) {
            return Err(Error::DuplicateDocument(v.image_id.clone()));
        }
        let ord = self.vectors.len();
        self.lookup.insert(v.image_id.clone(), ord);
        self.vectors.push(v.to_f32_precision());
        Ok(ord)
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[VladVector] {
        &self.vectors
    }

    pub fn ordinal(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&VladVector> {
        self.ordinal(id).map(|i| &self.vectors[i])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(STORE_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(self.num_blocks as u32);
        w.u32(self.block_dim as u32);
        w.u64(self.vectors.len() as u64);
        for v in &self.vectors {
            w.string(&v.image_id)?;
            for &x in v.values() {
                w.f32(x as f32);
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("vector store", bytes);
        r.header(STORE_MAGIC)?;
        let num_blocks = r.u32()? as usize;
        let block_dim = r.u32()? as usize;
        if num_blocks == 0 || block_dim == 0 {
            return Err(r.err("K and d must be positive"));
        }
        let count = r.u64()?;
        let count = checked_count(&r, count, 4)?;
        let mut store = Self::new(num_blocks, block_dim);
        for _ in 0..count {
            let id = r.string()?;
            let values = r.f32s(num_blocks * block_dim)?;
            let v = VladVector::from_values(
                id,
                num_blocks,
                block_dim,
                values.into_iter().map(f64::from).collect(),
            )?;
            store.insert(&v).map_err(|e| r.err(e.to_string()))?;
        }
        r.finish()?;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedDoc {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub hits: Vec<RankedDoc>,
    pub latency: Duration,
    pub candidates_scanned: usize,
}

impl SearchResult {
    pub fn doc_ids(&self) -> Vec<String> {
        self.hits.iter().map(|h| h.doc_id.clone()).collect()
    }
}

/// Outcome of encoding a corpus: the sealed index plus images that could not
/// be indexed because their VLAD is all zeros.
#[derive(Debug)]
pub struct BuiltIndex {
    pub index: InvertedIndex,
    pub skipped: Vec<String>,
}

/// Encodes every vector at depth `k_x` and builds the index, applying
/// document pruning when `prune_docs` is set.
pub fn build_index(
    vectors: &[VladVector],
    refs: &ReferenceSet,
    config: &PipelineConfig,
) -> Result<BuiltIndex> {
    config.validate(refs.len())?;
    config.mode.ref_mode().expect(refs.mode())?;
    let mut docs = Vec::with_capacity(vectors.len());
    let mut skipped = Vec::new();
    for v in vectors {
        match encode_permutations(v, refs, config.k_x) {
            Ok(enc) => docs.push(enc.to_document(v.image_id.clone())),
            Err(Error::Unindexable(id)) => skipped.push(id),
            Err(e) => return Err(e),
        }
    }
    let index = match config.prune_docs {
        Some(keep) => build_pruned_index(&docs, keep)?,
        None => {
            let mut index = InvertedIndex::new();
            for d in &docs {
                index.add_document(d)?;
            }
            index.seal()?;
            index
        }
    };
    Ok(BuiltIndex { index, skipped })
}

/// Encodes a query at depth `k_q` and applies query pruning when configured.
pub fn encode_query(
    query: &VladVector,
    index: &InvertedIndex,
    refs: &ReferenceSet,
    config: &PipelineConfig,
) -> Result<SurrogateDocument> {
    let doc = encode_permutations(query, refs, config.k_q)?.to_document(query.image_id.clone());
    match config.prune_query {
        Some(keep) => prune_by_tfidf(&doc, index.stats()?, keep),
        None => Ok(doc),
    }
}

pub fn search(
    query: &VladVector,
    index: &InvertedIndex,
    refs: &ReferenceSet,
    config: &PipelineConfig,
    store: Option<&VladStore>,
) -> Result<SearchResult> {
    config.validate(refs.len())?;
    config.mode.ref_mode().expect(refs.mode())?;
    let store = match (config.mode, store) {
        (SearchMode::RStr, None) => {
            return Err(Error::InvalidParameter("rstr needs a vector store".into()))
        }
        (_, s) => s,
    };

    let start = Instant::now();
    let q = encode_query(query, index, refs, config)?;
    let result = if config.mode == SearchMode::RStr {
        let c = config.c.min(index.len());
        let hits = index.score_query(&q, c)?;
        let mut candidates: Vec<&str> = hits.iter().map(|h| h.doc_id.as_str()).collect();
        if candidates.len() < c {
            // the unscored tail of the full ranking, by ordinal
            let mut seen = vec![false; index.len()];
            for h in &hits {
                seen[h.doc as usize] = true;
            }
            for (ord, id) in index.doc_ids().iter().enumerate() {
                if candidates.len() == c {
                    break;
                }
                if !seen[ord] {
                    candidates.push(id);
                }
            }
        }
        let scanned = candidates.len();
        let hits = rerank(&candidates, query, store.expect("checked above"), config.k)?;
        SearchResult {
            hits,
            latency: Duration::ZERO,
            candidates_scanned: scanned,
        }
    } else {
        let hits = index.score_query(&q, config.k)?;
        SearchResult {
            candidates_scanned: hits.len(),
            hits: hits
                .into_iter()
                .map(|h| RankedDoc {
                    doc_id: h.doc_id,
                    score: h.score as f64,
                })
                .collect(),
            latency: Duration::ZERO,
        }
    };
    Ok(SearchResult {
        latency: start.elapsed(),
        ..result
    })
}

/// Reorders candidates by descending inner product with `query` and keeps
/// the top `k`; ties go to the lower store ordinal.
pub fn rerank<S: AsRef<str>>(
    candidates: &[S],
    query: &VladVector,
    store: &VladStore,
    k: usize,
) -> Result<Vec<RankedDoc>> {
    if query.num_blocks() != store.num_blocks || query.block_dim() != store.block_dim {
        return Err(Error::DimensionMismatch {
            expected: store.num_blocks * store.block_dim,
            actual: query.dim(),
        });
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for id in candidates {
        let id = id.as_ref();
        let ord = store
            .ordinal(id)
            .ok_or_else(|| Error::MissingVector(id.to_string()))?;
        scored.push((dot(query.values(), store.vectors[ord].values()), ord));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .map(|(score, ord)| RankedDoc {
            doc_id: store.vectors[ord].image_id.clone(),
            score,
        })
        .collect())
}
