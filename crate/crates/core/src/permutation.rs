//! Reference objects, truncated permutations and surrogate documents.
//!
//! An object is described by the ranks of the `m` reference objects ordered
//! by increasing Euclidean distance from it. Only the `k` nearest are kept;
//! every other reference sits at rank `k + 1`. The surrogate document gives
//! reference `i` the integer weight `k + 1 - rank(i)`, so the `k` nearest
//! references carry weights `k, k-1, .., 1` and all others are absent.
//!
//! In blockwise mode each VLAD block is encoded on its own against one shared
//! reference set, and term keys carry the block number. Zero blocks emit no
//! terms.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codebook::squared_distance;
use crate::error::{Error, Result};
use crate::format::{checked_count, ByteReader, ByteWriter, FORMAT_VERSION, REFERENCE_MAGIC};
use crate::vlad::VladVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RefMode {
    /// References are full K·d VLAD vectors.
    Whole,
    /// References are d-dimensional blocks shared by all K blocks.
    Blockwise,
}

impl RefMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RefMode::Whole => "whole",
            RefMode::Blockwise => "blockwise",
        }
    }

    fn code(self) -> u8 {
        match self {
            RefMode::Whole => 0,
            RefMode::Blockwise => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(RefMode::Whole),
            1 => Some(RefMode::Blockwise),
            _ => None,
        }
    }

    pub(crate) fn expect(self, actual: RefMode) -> Result<()> {
        if self != actual {
            return Err(Error::ModeMismatch {
                expected: self.as_str(),
                actual: actual.as_str(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for RefMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn vector_key(x: &[f32]) -> Vec<u32> {
    x.iter()
        .map(|&v| if v == 0.0 { 0 } else { v.to_bits() })
        .collect()
}

/// The `m` pivots. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    mode: RefMode,
    dim: usize,
    seed: u64,
    refs: Vec<Vec<f32>>,
}

impl ReferenceSet {
    pub fn new(mode: RefMode, refs: Vec<Vec<f32>>, seed: u64) -> Result<Self> {
        let dim = refs
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidParameter("reference set is empty".into()))?;
        if dim == 0 {
            return Err(Error::InvalidParameter(
                "reference dimension must be positive".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(refs.len());
        for r in &refs {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
            if !seen.insert(vector_key(r)) {
                return Err(Error::InvalidParameter(
                    "reference objects must be distinct".into(),
                ));
            }
        }
        Ok(Self {
            mode,
            dim,
            seed,
            refs,
        })
    }

    pub fn mode(&self) -> RefMode {
        self.mode
    }

    /// Number of references (m).
    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn references(&self) -> &[Vec<f32>] {
        &self.refs
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(REFERENCE_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u8(self.mode.code());
        w.u32(self.refs.len() as u32);
        w.u32(self.dim as u32);
        w.u64(self.seed);
        for r in &self.refs {
            for &v in r {
                w.f32(v);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("reference file", bytes);
        r.header(REFERENCE_MAGIC)?;
        let code = r.u8()?;
        let mode = RefMode::from_code(code).ok_or_else(|| r.err(format!("unknown mode {code}")))?;
        let m = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let seed = r.u64()?;
        if m == 0 || dim == 0 {
            return Err(r.err("m and dim must be positive"));
        }
        let total = checked_count(&r, (m as u64) * (dim as u64), 4)?;
        let flat = r.f32s(total)?;
        r.finish()?;
        Self::new(
            mode,
            flat.chunks_exact(dim).map(<[f32]>::to_vec).collect(),
            seed,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes)?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Samples `m` distinct references uniformly without replacement.
///
/// Whole mode draws from the non-degenerate vectors; blockwise mode draws
/// from every nonzero block of every vector. Candidates are compared at f32
/// precision, the precision references are stored with.
pub fn select_references(
    dataset: &[VladVector],
    m: usize,
    mode: RefMode,
    seed: u64,
) -> Result<ReferenceSet> {
    if m == 0 {
        return Err(Error::InvalidParameter("m must be positive".into()));
    }
    let to_f32 = |x: &[f64]| x.iter().map(|&v| v as f32).collect::<Vec<f32>>();
    let mut seen = HashSet::new();
    let mut candidates = Vec::new();
    let mut push = |x: Vec<f32>| {
        if x.iter().any(|&v| v != 0.0) && seen.insert(vector_key(&x)) {
            candidates.push(x);
        }
    };
    match mode {
        RefMode::Whole => {
            for v in dataset {
                push(to_f32(v.values()));
            }
        }
        RefMode::Blockwise => {
            for v in dataset {
                for j in 0..v.num_blocks() {
                    if !v.is_zero_block(j) {
                        push(to_f32(v.block(j)));
                    }
                }
            }
        }
    }
    if candidates.len() < m {
        return Err(Error::InsufficientDistinctPoints {
            needed: m,
            found: candidates.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, candidates.len(), m);
    let refs = picked.iter().map(|i| candidates[i].clone()).collect();
    ReferenceSet::new(mode, refs, seed)
}

fn check_object_dim(o: &[f64], refs: &ReferenceSet) -> Result<()> {
    if o.len() != refs.dim {
        return Err(Error::DimensionMismatch {
            expected: refs.dim,
            actual: o.len(),
        });
    }
    Ok(())
}

fn by_distance_then_index(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn reference_distances(o: &[f64], refs: &ReferenceSet) -> Vec<(f64, u32)> {
    refs.refs
        .iter()
        .enumerate()
        .map(|(i, r)| (squared_distance(o, r), i as u32))
        .collect()
}

/// Full rank vector: `ranks[i]` is the 1-based position of reference `i` in
/// the ordering by increasing distance (ties to the lower index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationVector {
    ranks: Vec<u32>,
}

pub fn compute_permutation(o: &[f64], refs: &ReferenceSet) -> Result<PermutationVector> {
    check_object_dim(o, refs)?;
    let mut dist = reference_distances(o, refs);
    dist.sort_by(by_distance_then_index);
    let mut ranks = vec![0u32; dist.len()];
    for (pos, &(_, i)) in dist.iter().enumerate() {
        ranks[i as usize] = pos as u32 + 1;
    }
    Ok(PermutationVector { ranks })
}

impl PermutationVector {
    /// Wraps an explicit rank vector, which must be a bijection onto 1..=m.
    pub fn from_ranks(ranks: Vec<u32>) -> Result<Self> {
        let m = ranks.len();
        let mut seen = vec![false; m];
        for &r in &ranks {
            let slot = (r as usize).checked_sub(1).filter(|&s| s < m);
            match slot {
                Some(s) if !seen[s] => seen[s] = true,
                _ => {
                    return Err(Error::InvalidParameter(format!(
                        "{ranks:?} is not a permutation"
                    )))
                }
            }
        }
        Ok(Self { ranks })
    }

    pub fn ranks(&self) -> &[u32] {
        &self.ranks
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    /// Keeps the references ranked `1..=k`; the rest collapse to `k + 1`.
    pub fn truncate(&self, k: usize) -> Result<TruncatedPermutation> {
        check_depth(k, self.ranks.len())?;
        let mut nearest = vec![0u32; k];
        for (i, &r) in self.ranks.iter().enumerate() {
            if (r as usize) <= k {
                nearest[r as usize - 1] = i as u32;
            }
        }
        Ok(TruncatedPermutation {
            m: self.ranks.len() as u32,
            nearest,
        })
    }
}

fn check_depth(k: usize, m: usize) -> Result<()> {
    if k == 0 || k > m {
        return Err(Error::InvalidParameter(format!(
            "truncation depth {k} outside 1..={m}"
        )));
    }
    Ok(())
}

/// Top-k ranked list. `nearest[r]` is the reference at rank `r + 1`;
/// references not listed hold the implicit rank `k + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TruncatedPermutation {
    m: u32,
    nearest: Vec<u32>,
}

impl TruncatedPermutation {
    /// Depth k.
    pub fn k(&self) -> usize {
        self.nearest.len()
    }

    pub fn m(&self) -> usize {
        self.m as usize
    }

    /// Reference indices in rank order.
    pub fn nearest(&self) -> &[u32] {
        &self.nearest
    }

    pub fn rank_of(&self, reference: usize) -> u32 {
        self.nearest
            .iter()
            .position(|&i| i as usize == reference)
            .map_or(self.nearest.len() as u32 + 1, |p| p as u32 + 1)
    }

    /// `(reference, rank)` pairs for the listed references.
    pub fn entries(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.nearest
            .iter()
            .enumerate()
            .map(|(p, &i)| (i as usize, p as u32 + 1))
    }

    pub fn truncate(&self, k: usize) -> Result<TruncatedPermutation> {
        check_depth(k, self.nearest.len())?;
        Ok(TruncatedPermutation {
            m: self.m,
            nearest: self.nearest[..k].to_vec(),
        })
    }

    /// Dense rank vector with the implicit `k + 1` filled in.
    pub fn dense_ranks(&self) -> Vec<u32> {
        let mut out = vec![self.nearest.len() as u32 + 1; self.m as usize];
        for (i, r) in self.entries() {
            out[i] = r;
        }
        out
    }
}

/// Weight `k + 1 - rank` for every listed reference.
pub fn surrogate_weights(t: &TruncatedPermutation) -> Vec<(usize, u32)> {
    let k = t.k() as u32;
    t.entries().map(|(i, r)| (i, k + 1 - r)).collect()
}

/// The k nearest references directly, without ranking all m.
fn nearest_references(o: &[f64], refs: &ReferenceSet, k: usize) -> Result<TruncatedPermutation> {
    check_object_dim(o, refs)?;
    check_depth(k, refs.len())?;
    let mut dist = reference_distances(o, refs);
    if k < dist.len() {
        dist.select_nth_unstable_by(k - 1, by_distance_then_index);
        dist.truncate(k);
    }
    dist.sort_by(by_distance_then_index);
    Ok(TruncatedPermutation {
        m: refs.len() as u32,
        nearest: dist.into_iter().map(|(_, i)| i).collect(),
    })
}

/// Squared location-parameter Spearman Rho between two truncated lists,
/// `sum_i (p_i^{k_x}(o) - p_i^{k_q}(q))^2`, evaluated over the listed
/// references only.
pub fn spearman_rho_loc(o: &TruncatedPermutation, q: &TruncatedPermutation) -> Result<u64> {
    if o.m != q.m {
        return Err(Error::DimensionMismatch {
            expected: o.m(),
            actual: q.m(),
        });
    }
    let kx = o.k() as i64;
    let kq = q.k() as i64;
    let mut total: i64 = 0;
    let mut shared = 0i64;
    for (i, ro) in o.entries() {
        let rq = i64::from(q.rank_of(i));
        if rq <= kq {
            shared += 1;
        }
        total += (i64::from(ro) - rq).pow(2);
    }
    for (i, rq) in q.entries() {
        if o.rank_of(i) as i64 > kx {
            total += (kx + 1 - i64::from(rq)).pow(2);
        }
    }
    let listed = kx + kq - shared;
    total += (i64::from(o.m) - listed) * (kx - kq).pow(2);
    Ok(total as u64)
}

/// Squared distance between two nonzero blocks whose top lists share no
/// reference; also the per-block distance whenever either block is zero.
///
/// Closed form of `sum_{r<=k_x} (r - k_q - 1)^2 + sum_{r<=k_q} (k_x + 1 - r)^2
/// + (m - k_x - k_q)(k_x - k_q)^2`.
pub fn disjoint_distance(m: usize, kx: usize, kq: usize) -> u64 {
    let (m, kx, kq) = (m as i128, kx as i128, kq as i128);
    let s1 = |k: i128| k * (k + 1) / 2;
    let s2 = |k: i128| k * (k + 1) * (2 * k + 1) / 6;
    let c = kx - kq;
    let total = m * c * c + s2(kx) - 2 * c * s1(kx) + s2(kq) + 2 * c * s1(kq);
    total as u64
}

/// Per-block truncated permutations of one object. Whole-vector encodings
/// have exactly one block. `None` marks a zero block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPermutations {
    mode: RefMode,
    m: usize,
    k: usize,
    blocks: Vec<Option<TruncatedPermutation>>,
}

impl BlockPermutations {
    pub fn mode(&self) -> RefMode {
        self.mode
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn blocks(&self) -> &[Option<TruncatedPermutation>] {
        &self.blocks
    }

    pub fn nonzero_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.is_some()).count()
    }

    /// Blockwise squared distance: the sum of per-block location-parameter
    /// distances. A block that is zero on either side contributes
    /// [`disjoint_distance`], matching its empty term set.
    pub fn distance(&self, other: &BlockPermutations) -> Result<u64> {
        if self.blocks.len() != other.blocks.len() || self.m != other.m {
            return Err(Error::DimensionMismatch {
                expected: self.blocks.len(),
                actual: other.blocks.len(),
            });
        }
        let mut total = 0u64;
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            total += match (a, b) {
                (Some(a), Some(b)) => spearman_rho_loc(a, b)?,
                _ => disjoint_distance(self.m, self.k, other.k),
            };
        }
        Ok(total)
    }

    pub fn to_document(&self, doc_id: impl Into<String>) -> SurrogateDocument {
        let mut terms = BTreeMap::new();
        for (j, block) in self.blocks.iter().enumerate() {
            let Some(block) = block else { continue };
            let block_no = match self.mode {
                RefMode::Whole => None,
                RefMode::Blockwise => Some(j),
            };
            for (i, w) in surrogate_weights(block) {
                terms.insert(term_key(i, block_no), w);
            }
        }
        SurrogateDocument {
            doc_id: doc_id.into(),
            terms,
        }
    }
}

/// Encodes `v` against `refs` at depth `k`, per the reference mode.
pub fn encode_permutations(
    v: &VladVector,
    refs: &ReferenceSet,
    k: usize,
) -> Result<BlockPermutations> {
    check_depth(k, refs.len())?;
    if v.is_degenerate() {
        return Err(Error::Unindexable(v.image_id.clone()));
    }
    let blocks = match refs.mode {
        RefMode::Whole => vec![Some(nearest_references(v.values(), refs, k)?)],
        RefMode::Blockwise => {
            if v.block_dim() != refs.dim {
                return Err(Error::DimensionMismatch {
                    expected: refs.dim,
                    actual: v.block_dim(),
                });
            }
            (0..v.num_blocks())
                .map(|j| {
                    if v.is_zero_block(j) {
                        Ok(None)
                    } else {
                        nearest_references(v.block(j), refs, k).map(Some)
                    }
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(BlockPermutations {
        mode: refs.mode,
        m: refs.len(),
        k,
        blocks,
    })
}

/// Whole-vector surrogate text (keys `r<i>`).
pub fn encode_str(v: &VladVector, refs: &ReferenceSet, k: usize) -> Result<SurrogateDocument> {
    RefMode::Whole.expect(refs.mode)?;
    Ok(encode_permutations(v, refs, k)?.to_document(v.image_id.clone()))
}

/// Blockwise surrogate text (keys `r<i>_b<j>`); zero blocks emit nothing.
pub fn encode_bstr(v: &VladVector, refs: &ReferenceSet, k: usize) -> Result<SurrogateDocument> {
    RefMode::Blockwise.expect(refs.mode)?;
    Ok(encode_permutations(v, refs, k)?.to_document(v.image_id.clone()))
}

pub fn blockwise_distance(
    v: &VladVector,
    w: &VladVector,
    refs: &ReferenceSet,
    kx: usize,
    kq: usize,
) -> Result<u64> {
    if v.num_blocks() != w.num_blocks() || v.block_dim() != w.block_dim() {
        return Err(Error::DimensionMismatch {
            expected: v.dim(),
            actual: w.dim(),
        });
    }
    let a = encode_permutations(v, refs, kx)?;
    let b = encode_permutations(w, refs, kq)?;
    a.distance(&b)
}

/// Term key for reference `reference` (0-based), optionally within block
/// `block` (0-based). Keys are rendered 1-based: `r3`, `r3_b7`.
pub fn term_key(reference: usize, block: Option<usize>) -> String {
    match block {
        None => format!("r{}", reference + 1),
        Some(j) => format!("r{}_b{}", reference + 1, j + 1),
    }
}

/// Sparse term → integer weight map, the indexed and query representation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurrogateDocument {
    pub doc_id: String,
    terms: BTreeMap<String, u32>,
}

impl SurrogateDocument {
    pub fn new(doc_id: impl Into<String>, terms: BTreeMap<String, u32>) -> Result<Self> {
        let doc_id = doc_id.into();
        if let Some((t, _)) = terms.iter().find(|(_, &w)| w == 0) {
            return Err(Error::InvalidParameter(format!(
                "term {t} of {doc_id} has zero weight"
            )));
        }
        Ok(Self { doc_id, terms })
    }

    pub fn terms(&self) -> &BTreeMap<String, u32> {
        &self.terms
    }

    pub fn weight(&self, term: &str) -> u32 {
        self.terms.get(term).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Sum of the weights, i.e. the token count of the repeated-key text.
    pub fn token_count(&self) -> u64 {
        self.terms.values().map(|&w| u64::from(w)).sum()
    }

    pub fn squared_norm(&self) -> u64 {
        self.terms
            .values()
            .map(|&w| u64::from(w) * u64::from(w))
            .sum()
    }

    pub fn dot(&self, other: &SurrogateDocument) -> u64 {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small
            .terms
            .iter()
            .map(|(t, &w)| u64::from(w) * u64::from(large.weight(t)))
            .sum()
    }

    /// Each key repeated by its weight, heaviest first (ties by key).
    pub fn repeated_text(&self) -> String {
        let mut terms: Vec<_> = self.terms.iter().collect();
        terms.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        let mut out = Vec::new();
        for (t, &w) in terms {
            out.extend(std::iter::repeat_n(t.as_str(), w as usize));
        }
        out.join(" ")
    }

    /// `doc_id TAB term:weight term:weight ...`, terms sorted.
    pub fn to_text_line(&self) -> String {
        let body: Vec<String> = self.terms.iter().map(|(t, w)| format!("{t}:{w}")).collect();
        format!("{}\t{}", self.doc_id, body.join(" "))
    }

    pub fn from_text_line(line: &str) -> Result<Self> {
        let bad = |reason: &str| Error::format("surrogate document line", reason.to_string());
        let (doc_id, body) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        let mut terms = BTreeMap::new();
        for pair in body.split_whitespace() {
            let (t, w) = pair
                .rsplit_once(':')
                .ok_or_else(|| bad("term without weight"))?;
            let w: u32 = w.parse().map_err(|_| bad("weight is not an integer"))?;
            if terms.insert(t.to_string(), w).is_some() {
                return Err(bad("repeated term"));
            }
        }
        Self::new(doc_id, terms)
    }
}
