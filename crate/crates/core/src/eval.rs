//! Ground truth, exact oracles, retrieval metrics and synthetic data.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::index::InvertedIndex;
use crate::permutation::{BlockPermutations, ReferenceSet};
use crate::pipeline::{search, PipelineConfig, RankedDoc, VladStore};
use crate::vlad::{dot, LocalDescriptorSet, VladVector};

/// Query id → relevant document ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    queries: BTreeMap<String, BTreeSet<String>>,
}

impl GroundTruth {
    /// Builds ground truth, dropping each query from its own relevant set
    /// when `exclude_self` is set. Every relevant set must stay nonempty.
    pub fn new(
        entries: impl IntoIterator<Item = (String, BTreeSet<String>)>,
        exclude_self: bool,
    ) -> Result<Self> {
        let mut queries = BTreeMap::new();
        for (q, mut relevant) in entries {
            if exclude_self {
                relevant.remove(&q);
            }
            if relevant.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "query {q} has no relevant documents"
                )));
            }
            queries.insert(q, relevant);
        }
        Ok(Self { queries })
    }

    pub fn queries(&self) -> impl Iterator<Item = (&String, &BTreeSet<String>)> {
        self.queries.iter()
    }

    pub fn relevant(&self, query: &str) -> Option<&BTreeSet<String>> {
        self.queries.get(query)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// One line per query: `query_id TAB id,id,...`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (q, rel) in &self.queries {
            let ids: Vec<&str> = rel.iter().map(String::as_str).collect();
            let _ = writeln!(out, "{q}\t{}", ids.join(","));
        }
        out
    }

    pub fn parse(text: &str, exclude_self: bool) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (q, rel) = line.split_once('\t').ok_or_else(|| {
                Error::format("ground truth", format!("line {} has no tab", n + 1))
            })?;
            let relevant: BTreeSet<String> = rel
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            entries.push((q.to_string(), relevant));
        }
        Self::new(entries, exclude_self)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, exclude_self: bool) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, exclude_self)
    }
}

/// Non-interpolated average precision. Relevant documents never retrieved
/// contribute zero; repeated ids count once.
pub fn average_precision<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::EmptyRelevantSet);
    }
    let mut seen = HashSet::new();
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut rank = 0usize;
    for id in ranked {
        let id = id.as_ref();
        if !seen.insert(id) {
            continue;
        }
        rank += 1;
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / rank as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

pub fn mean_ap<S: AsRef<str>>(results: &BTreeMap<String, Vec<S>>, gt: &GroundTruth) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::InvalidParameter(
            "ground truth has no queries".into(),
        ));
    }
    let mut total = 0.0;
    for (q, relevant) in gt.queries() {
        let ranked = results
            .get(q)
            .ok_or_else(|| Error::MissingQuery(q.clone()))?;
        total += average_precision(ranked, relevant)?;
    }
    Ok(total / gt.len() as f64)
}

/// Sequential scan: top `k` by inner product, ties to the lower ordinal.
pub fn exact_scan(query: &VladVector, store: &VladStore, k: usize) -> Vec<RankedDoc> {
    let mut scored: Vec<(f64, usize)> = store
        .vectors()
        .iter()
        .enumerate()
        .map(|(i, v)| (dot(query.values(), v.values()), i))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored
        .into_iter()
        .map(|(score, i)| RankedDoc {
            doc_id: store.vectors()[i].image_id.clone(),
            score,
        })
        .collect()
}

/// Exhaustive ranking by squared permutation distance, ascending, ties to
/// the lower ordinal. Returns `(ordinal, distance)` pairs.
pub fn permutation_scan(
    query: &BlockPermutations,
    corpus: &[BlockPermutations],
    k: usize,
) -> Result<Vec<(usize, u64)>> {
    let mut scored = corpus
        .iter()
        .enumerate()
        .map(|(i, doc)| Ok((i, doc.distance(query)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// `|top_k(approx) ∩ top_k(exact)| / k`.
pub fn recall_at<S: AsRef<str>, T: AsRef<str>>(approx: &[S], exact: &[T], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParameter(
            "recall depth must be at least 1".into(),
        ));
    }
    let truth: HashSet<&str> = exact.iter().take(k).map(AsRef::as_ref).collect();
    let found = approx
        .iter()
        .take(k)
        .map(AsRef::as_ref)
        .collect::<HashSet<_>>()
        .intersection(&truth)
        .count();
    Ok(found as f64 / k as f64)
}

/// Parameters of the clustered synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub images: usize,
    pub clusters: usize,
    /// Local descriptor dimension.
    pub dim: usize,
    /// Number of latent visual words the descriptors gather around.
    pub words: usize,
    pub descriptors_per_image: usize,
    /// Standard deviation of the per-image perturbation.
    pub noise: f32,
    /// Fraction of each image's descriptors replaced by fresh draws that no
    /// other image shares.
    pub clutter: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images: 1000,
            clusters: 50,
            dim: 32,
            words: 32,
            descriptors_per_image: 128,
            noise: 0.5,
            clutter: 0.5,
            seed: 0,
        }
    }
}

const WORD_SCALE: f32 = 8.0;
const LOCAL_SPREAD: f32 = 1.0;

/// Clustered descriptor sets: every cluster has a prototype set of
/// descriptors, descriptor `t` drawn around latent word `t mod words`. Each
/// member image perturbs every prototype descriptor with Gaussian noise,
/// except a `clutter` fraction replaced by unrelated draws.
/// Image `i` belongs to cluster `i mod clusters`; the first image of each
/// cluster is its query and the rest of the cluster is relevant to it.
pub fn synth_dataset(config: &SynthConfig) -> Result<(Vec<LocalDescriptorSet>, GroundTruth)> {
    let SynthConfig {
        images,
        clusters,
        dim,
        words,
        descriptors_per_image,
        noise,
        clutter,
        seed,
    } = *config;
    if images == 0 || clusters == 0 || dim == 0 || words == 0 || descriptors_per_image == 0 {
        return Err(Error::InvalidParameter(
            "synthetic dataset sizes must be positive".into(),
        ));
    }
    if images < 2 * clusters {
        return Err(Error::InvalidParameter(
            "need at least two images per cluster".into(),
        ));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidParameter(
            "noise must be finite and nonnegative".into(),
        ));
    }
    if !(0.0..=1.0).contains(&clutter) {
        return Err(Error::InvalidParameter("clutter must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0f32, 1.0).expect("unit normal");

    let centers: Vec<Vec<f32>> = (0..words)
        .map(|_| {
            (0..dim)
                .map(|_| unit.sample(&mut rng) * WORD_SCALE)
                .collect()
        })
        .collect();
    let prototypes: Vec<Vec<Vec<f32>>> = (0..clusters)
        .map(|_| {
            (0..descriptors_per_image)
                .map(|t| {
                    centers[t % words]
                        .iter()
                        .map(|&c| c + unit.sample(&mut rng) * LOCAL_SPREAD)
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut sets = Vec::with_capacity(images);
    let mut members: Vec<Vec<String>> = vec![Vec::new(); clusters];
    for i in 0..images {
        let cluster = i % clusters;
        let id = format!("img{i:06}");
        let descriptors = prototypes[cluster]
            .iter()
            .map(|x| {
                if clutter > 0.0 && rng.random::<f32>() < clutter {
                    let word = &centers[rng.random_range(0..words)];
                    word.iter()
                        .map(|&c| c + unit.sample(&mut rng) * LOCAL_SPREAD)
                        .collect()
                } else {
                    x.iter()
                        .map(|&v| {
                            if noise > 0.0 {
                                v + unit.sample(&mut rng) * noise
                            } else {
                                v
                            }
                        })
                        .collect()
                }
            })
            .collect();
        members[cluster].push(id.clone());
        sets.push(LocalDescriptorSet::new(id, dim, descriptors)?);
    }
    let gt = GroundTruth::new(
        members
            .into_iter()
            .map(|ids| (ids[0].clone(), ids.into_iter().collect())),
        true,
    )?;
    Ok((sets, gt))
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Depths at which recall against the exact scan is reported.
    pub recall_at: Vec<usize>,
    /// Drop the query image from its own result list.
    pub exclude_query: bool,
    /// Record per-query latency; off gives byte-identical reports.
    pub timing: bool,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            recall_at: vec![1, 10],
            exclude_query: true,
            timing: true,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config: PipelineConfig,
    pub queries: usize,
    pub map: f64,
    pub exact_map: f64,
    pub recall: Vec<(usize, f64)>,
    pub latency_mean: Duration,
    pub latency_p95: Duration,
    pub mean_candidates: f64,
    pub documents: usize,
    pub postings: u64,
    pub index_bytes: u64,
}

impl EvalReport {
    fn fields(&self) -> Vec<(String, String)> {
        let c = &self.config;
        let opt = |v: Option<usize>| v.map_or_else(|| "none".to_string(), |v| v.to_string());
        let mut out = vec![
            ("mode".into(), c.mode.to_string()),
            ("k_x".into(), c.k_x.to_string()),
            ("k_q".into(), c.k_q.to_string()),
            ("c".into(), c.c.to_string()),
            ("k".into(), c.k.to_string()),
            ("prune_query".into(), opt(c.prune_query)),
            ("prune_docs".into(), opt(c.prune_docs)),
            ("queries".into(), self.queries.to_string()),
            ("map".into(), format!("{:.6}", self.map)),
            ("exact_map".into(), format!("{:.6}", self.exact_map)),
        ];
        for (k, r) in &self.recall {
            out.push((format!("recall@{k}"), format!("{r:.6}")));
        }
        out.extend([
            (
                "latency_mean_us".into(),
                format!("{:.1}", self.latency_mean.as_secs_f64() * 1e6),
            ),
            (
                "latency_p95_us".into(),
                format!("{:.1}", self.latency_p95.as_secs_f64() * 1e6),
            ),
            (
                "mean_candidates".into(),
                format!("{:.2}", self.mean_candidates),
            ),
            ("documents".into(), self.documents.to_string()),
            ("postings".into(), self.postings.to_string()),
            ("index_bytes".into(), self.index_bytes.to_string()),
        ]);
        out
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        self.fields()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn csv_header(&self) -> String {
        let keys: Vec<String> = self.fields().into_iter().map(|f| f.0).collect();
        keys.join(",")
    }

    pub fn csv_row(&self) -> String {
        let values: Vec<String> = self.fields().into_iter().map(|f| f.1).collect();
        values.join(",")
    }
}

/// Runs every ground-truth query through the pipeline and scores the
/// rankings. Returns the report and the per-query result lists.
pub fn evaluate(
    store: &VladStore,
    index: &InvertedIndex,
    refs: &ReferenceSet,
    config: &PipelineConfig,
    gt: &GroundTruth,
    options: &EvalOptions,
) -> Result<(EvalReport, BTreeMap<String, Vec<String>>)> {
    config.validate(refs.len())?;
    if gt.is_empty() {
        return Err(Error::InvalidParameter(
            "ground truth has no queries".into(),
        ));
    }
    let missing: Vec<&str> = gt
        .queries()
        .map(|(q, _)| q.as_str())
        .filter(|q| store.get(q).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingVector(missing.join(",")));
    }

    let extra = usize::from(options.exclude_query);
    let run_config = PipelineConfig {
        k: config.k + extra,
        c: config.c.max(config.k + extra),
        ..config.clone()
    };
    let strip = |q: &str, ids: Vec<String>| -> Vec<String> {
        ids.into_iter()
            .filter(|id| !(options.exclude_query && id == q))
            .take(config.k)
            .collect()
    };
    let run_one = |q: &String| -> Result<(Vec<String>, Vec<String>, Duration, usize)> {
        let query = store.get(q).expect("checked above");
        let res = search(query, index, refs, &run_config, Some(store))?;
        let exact = exact_scan(query, store, config.k + extra)
            .into_iter()
            .map(|h| h.doc_id)
            .collect();
        Ok((
            strip(q, res.doc_ids()),
            strip(q, exact),
            res.latency,
            res.candidates_scanned,
        ))
    };

    let query_ids: Vec<&String> = gt.queries().map(|(q, _)| q).collect();
    let outcomes: Vec<_> = if options.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.threads)
            .build()
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        pool.install(|| {
            query_ids
                .par_iter()
                .map(|q| run_one(q))
                .collect::<Result<_>>()
        })?
    } else {
        query_ids
            .iter()
            .map(|q| run_one(q))
            .collect::<Result<_>>()?
    };

    let mut results = BTreeMap::new();
    let mut exact_results = BTreeMap::new();
    let mut latencies = Vec::with_capacity(outcomes.len());
    let mut candidates = 0usize;
    let mut recall_sums = vec![0.0; options.recall_at.len()];
    for (q, (approx, exact, latency, scanned)) in query_ids.iter().zip(outcomes) {
        for (sum, &depth) in recall_sums.iter_mut().zip(&options.recall_at) {
            *sum += recall_at(&approx, &exact, depth)?;
        }
        latencies.push(if options.timing {
            latency
        } else {
            Duration::ZERO
        });
        candidates += scanned;
        results.insert((*q).clone(), approx);
        exact_results.insert((*q).clone(), exact);
    }
    let n = query_ids.len() as f64;
    latencies.sort();
    let p95 =
        latencies[((latencies.len() as f64 * 0.95).ceil() as usize).clamp(1, latencies.len()) - 1];
    let stats = index.stats()?;
    let report = EvalReport {
        config: config.clone(),
        queries: query_ids.len(),
        map: mean_ap(&results, gt)?,
        exact_map: mean_ap(&exact_results, gt)?,
        recall: options
            .recall_at
            .iter()
            .zip(recall_sums)
            .map(|(&k, s)| (k, s / n))
            .collect(),
        latency_mean: latencies.iter().sum::<Duration>() / query_ids.len() as u32,
        latency_p95: p95,
        mean_candidates: candidates as f64 / n,
        documents: index.len(),
        postings: stats.postings,
        index_bytes: index.to_bytes()?.len() as u64,
    };
    Ok((report, results))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn average_precision_cases() {
        let rel = set(&["a", "b"]);
        assert_eq!(average_precision(&["a", "b", "c"], &rel).unwrap(), 1.0);
        // 5/6 is not representable; the two roundings land one ulp apart at most
        let ap = average_precision(&["a", "x", "b"], &rel).unwrap();
        assert!((ap - 5.0 / 6.0).abs() <= f64::EPSILON);
        assert_eq!(average_precision(&["x", "y"], &rel).unwrap(), 0.0);
        assert_eq!(average_precision::<&str>(&[], &rel).unwrap(), 0.0);
        // one of two relevant retrieved at rank 1
        assert_eq!(average_precision(&["a"], &rel).unwrap(), 0.5);
        assert!(matches!(
            average_precision(&["a"], &BTreeSet::new()),
            Err(Error::EmptyRelevantSet)
        ));
    }

    #[test]
    fn mean_ap_cases() {
        let gt = GroundTruth::new(
            vec![
                ("q1".to_string(), set(&["a"])),
                ("q2".to_string(), set(&["b"])),
            ],
            true,
        )
        .unwrap();
        let mut results = BTreeMap::new();
        results.insert("q1".to_string(), vec!["a"]);
        results.insert("q2".to_string(), vec!["z"]);
        assert_eq!(mean_ap(&results, &gt).unwrap(), 0.5);
        results.remove("q2");
        assert!(matches!(
            mean_ap(&results, &gt),
            Err(Error::MissingQuery(_))
        ));
    }

    #[test]
    fn recall_cases() {
        assert_eq!(recall_at(&["a", "b"], &["a", "b"], 2).unwrap(), 1.0);
        assert_eq!(recall_at(&["a", "b"], &["c", "d"], 2).unwrap(), 0.0);
        assert_eq!(
            recall_at(&["a", "x", "b"], &["b", "a", "c"], 3).unwrap(),
            2.0 / 3.0
        );
        assert!(recall_at(&["a"], &["a"], 0).is_err());
    }

    #[test]
    fn ground_truth_text_roundtrip() {
        let gt = GroundTruth::new(vec![("q1".to_string(), set(&["q1", "a", "b"]))], true).unwrap();
        assert_eq!(gt.relevant("q1").unwrap(), &set(&["a", "b"]));
        assert_eq!(gt.to_text(), "q1\ta,b\n");
        assert_eq!(GroundTruth::parse(&gt.to_text(), true).unwrap(), gt);
        assert!(GroundTruth::parse("q1\tq1", true).is_err());
        assert!(GroundTruth::parse("q1 a", true).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_clustered() {
        let config = SynthConfig {
            images: 40,
            clusters: 4,
            dim: 4,
            words: 3,
            descriptors_per_image: 9,
            noise: 0.0,
            clutter: 0.0,
            seed: 3,
        };
        let (a, gt) = synth_dataset(&config).unwrap();
        let (b, gt_b) = synth_dataset(&config).unwrap();
        assert_eq!(a, b);
        assert_eq!(gt, gt_b);
        assert_eq!(gt.len(), 4);
        assert_eq!(gt.relevant("img000000").unwrap().len(), 9);
        // zero noise: members of a cluster are identical
        assert_eq!(a[0].descriptors(), a[4].descriptors());
        assert_ne!(a[0].descriptors(), a[1].descriptors());

        let one = SynthConfig {
            clusters: 1,
            ..config
        };
        let (_, gt) = synth_dataset(&one).unwrap();
        assert_eq!(gt.relevant("img000000").unwrap().len(), 39);
        assert!(synth_dataset(&SynthConfig {
            images: 5,
            ..config
        })
        .is_err());
    }
}
