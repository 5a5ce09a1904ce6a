//! k-means visual vocabulary.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::format::{checked_count, ByteReader, ByteWriter, CODEBOOK_MAGIC, FORMAT_VERSION};

/// Upper bound on Lloyd iterations.
pub const MAX_ITERATIONS: usize = 25;

/// K centroids of dimension d.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    dim: usize,
    centroids: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingSummary {
    /// Number of Lloyd update steps performed.
    pub iterations: usize,
    /// True when the last step left every assignment unchanged.
    pub converged: bool,
}

impl Codebook {
    pub fn new(centroids: Vec<Vec<f32>>) -> Result<Self> {
        let dim = centroids.first().map(Vec::len).ok_or_else(|| {
            Error::InvalidParameter("codebook needs at least one centroid".into())
        })?;
        if dim == 0 {
            return Err(Error::InvalidParameter(
                "centroid dimension must be positive".into(),
            ));
        }
        for c in &centroids {
            check_dim(dim, c.len())?;
        }
        Ok(Self { dim, centroids })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of codewords (K).
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn centroids(&self) -> &[Vec<f32>] {
        &self.centroids
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CODEBOOK_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(self.centroids.len() as u32);
        w.u32(self.dim as u32);
        for c in &self.centroids {
            for &v in c {
                w.f32(v);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("codebook file", bytes);
        r.header(CODEBOOK_MAGIC)?;
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if k == 0 || dim == 0 {
            return Err(r.err("K and d must be positive"));
        }
        let total = checked_count(&r, (k as u64) * (dim as u64), 4)?;
        let flat = r.f32s(total)?;
        r.finish()?;
        Codebook::new(flat.chunks_exact(dim).map(<[f32]>::to_vec).collect())
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

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

#[inline]
pub(crate) fn squared_distance<A, B>(a: &[A], b: &[B]) -> f64
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let diff = x.into() - y.into();
            diff * diff
        })
        .sum()
}

/// Index (0-based) of the nearest centroid; ties go to the smallest index.
pub fn assign_nn(x: &[f32], codebook: &Codebook) -> Result<usize> {
    check_dim(codebook.dim, x.len())?;
    Ok(nearest(x, codebook.centroids.iter().map(Vec::as_slice)).0)
}

fn nearest<'a, T>(x: &[f32], centers: impl Iterator<Item = &'a [T]>) -> (usize, f64)
where
    T: Copy + Into<f64> + 'a,
{
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn point_key(x: &[f32]) -> Vec<u32> {
    // +0.0 and -0.0 are the same point
    x.iter()
        .map(|&v| if v == 0.0 { 0 } else { v.to_bits() })
        .collect()
}

/// Seeded k-means++ initialization followed by Lloyd iterations.
///
/// Stops after [`MAX_ITERATIONS`] updates or as soon as no assignment
/// changes. A cluster that ends up empty is re-seeded with the training point
/// farthest from its assigned centroid, taken from a cluster with more than
/// one member.
pub fn train_codebook(
    training: &[Vec<f32>],
    k: usize,
    seed: u64,
) -> Result<(Codebook, TrainingSummary)> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be positive".into()));
    }
    let dim = training.first().map(Vec::len).unwrap_or(0);
    if dim == 0 && !training.is_empty() {
        return Err(Error::InvalidParameter(
            "descriptor dimension must be positive".into(),
        ));
    }
    for x in training {
        check_dim(dim, x.len())?;
    }
    let distinct = training
        .iter()
        .map(|x| point_key(x))
        .collect::<HashSet<_>>()
        .len();
    if distinct < k {
        return Err(Error::InsufficientDistinctPoints {
            needed: k,
            found: distinct,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_plus_plus(training, k, &mut rng)?;

    let assign_all = |centers: &[Vec<f64>]| -> Vec<(usize, f64)> {
        training
            .iter()
            .map(|x| nearest(x, centers.iter().map(Vec::as_slice)))
            .collect()
    };

    let mut labels = assign_all(&centers);
    let mut summary = TrainingSummary {
        iterations: 0,
        converged: false,
    };
    for _ in 0..MAX_ITERATIONS {
        update_centers(training, &mut labels, &mut centers);
        summary.iterations += 1;
        let next = assign_all(&centers);
        let changed = next.iter().zip(&labels).any(|(a, b)| a.0 != b.0);
        labels = next;
        if !changed {
            summary.converged = true;
            break;
        }
    }

    let centroids = centers
        .into_iter()
        .map(|c| c.into_iter().map(|v| v as f32).collect())
        .collect();
    Ok((Codebook::new(centroids)?, summary))
}

fn kmeans_plus_plus(
    training: &[Vec<f32>],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let to_f64 = |x: &[f32]| x.iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
    let first = rng.random_range(0..training.len());
    let mut centers = vec![to_f64(&training[first])];
    let mut min_dist: Vec<f64> = training
        .iter()
        .map(|x| squared_distance(x, &centers[0]))
        .collect();

    while centers.len() < k {
        let total: f64 = min_dist.iter().sum();
        if total <= 0.0 {
            return Err(Error::InsufficientDistinctPoints {
                needed: k,
                found: centers.len(),
            });
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        // last positive-weight point is the fallback when rounding overshoots
        let mut chosen = None;
        for (i, &d) in min_dist.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            chosen = Some(i);
            acc += d;
            if acc > target {
                break;
            }
        }
        let chosen = chosen.expect("positive total implies a positive weight");
        let center = to_f64(&training[chosen]);
        for (x, d) in training.iter().zip(min_dist.iter_mut()) {
            let nd = squared_distance(x, &center);
            if nd < *d {
                *d = nd;
            }
        }
        centers.push(center);
    }
    Ok(centers)
}

fn update_centers(training: &[Vec<f32>], labels: &mut [(usize, f64)], centers: &mut [Vec<f64>]) {
    let dim = centers[0].len();
    let mut sums = vec![vec![0.0f64; dim]; centers.len()];
    let mut counts = vec![0usize; centers.len()];
    for (x, &(label, _)) in training.iter().zip(labels.iter()) {
        counts[label] += 1;
        for (s, &v) in sums[label].iter_mut().zip(x) {
            *s += f64::from(v);
        }
    }

    for cluster in 0..centers.len() {
        if counts[cluster] > 0 {
            continue;
        }
        // steal the worst-fitting point from a cluster that can spare it
        let donor = labels
            .iter()
            .enumerate()
            .filter(|(_, (label, _))| counts[*label] > 1)
            .fold(None::<(usize, f64)>, |best, (i, &(_, d))| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        let Some((point, _)) = donor else { continue };
        let old = labels[point].0;
        counts[old] -= 1;
        for (s, &v) in sums[old].iter_mut().zip(&training[point]) {
            *s -= f64::from(v);
        }
        counts[cluster] = 1;
        sums[cluster] = training[point].iter().map(|&v| f64::from(v)).collect();
        labels[point] = (cluster, 0.0);
    }

    for ((center, sum), &count) in centers.iter_mut().zip(sums).zip(&counts) {
        if count > 0 {
            let n = count as f64;
            for (c, s) in center.iter_mut().zip(sum) {
                *c = s / n;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn exact_hit_and_tie_break() {
        let cb = Codebook::new(vec![
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![5.0, 5.0],
            vec![-3.0, 1.0],
        ])
        .unwrap();
        assert_eq!(assign_nn(&[5.0, 5.0], &cb).unwrap(), 2);
        // equidistant from the first two centroids
        assert_eq!(assign_nn(&[1.0, 0.0], &cb).unwrap(), 0);
        assert!(matches!(
            assign_nn(&[1.0], &cb),
            Err(Error::DimensionMismatch {
                expected: 2,
                actual: 1
            })
        ));
    }

    #[test]
    fn assign_matches_exhaustive_scan() {
        let centroids = random_points(8, 4, 1);
        let cb = Codebook::new(centroids.clone()).unwrap();
        for x in random_points(200, 4, 2) {
            let mut best = 0;
            let mut best_d = f64::MAX;
            for (i, c) in centroids.iter().enumerate() {
                let d: f64 = x
                    .iter()
                    .zip(c)
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            assert_eq!(assign_nn(&x, &cb).unwrap(), best);
        }
    }

    #[test]
    fn k_distinct_points_are_their_own_centroids() {
        let points = random_points(6, 3, 7);
        let (cb, summary) = train_codebook(&points, 6, 11).unwrap();
        assert!(summary.converged);
        let mut got: Vec<_> = cb.centroids().to_vec();
        let mut want = points.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn two_blobs_are_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0f32, 0.1).unwrap();
        let mut points = Vec::new();
        let mut blob_of = Vec::new();
        for (blob, center) in [[0.0f32, 0.0], [10.0, 10.0]].iter().enumerate() {
            for _ in 0..50 {
                points.push(vec![
                    center[0] + noise.sample(&mut rng),
                    center[1] + noise.sample(&mut rng),
                ]);
                blob_of.push(blob);
            }
        }
        let (cb, _) = train_codebook(&points, 2, 5).unwrap();
        // each centroid's nearest training points must come from a single blob
        for c in cb.centroids() {
            let mut by_dist: Vec<(f64, usize)> = points
                .iter()
                .zip(&blob_of)
                .map(|(p, &b)| (squared_distance(p, c), b))
                .collect();
            by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let blob = by_dist[0].1;
            assert!(by_dist[..50].iter().all(|&(_, b)| b == blob));
        }
    }

    #[test]
    fn sixty_four_centroids() {
        let points = random_points(2000, 8, 9);
        let (cb, summary) = train_codebook(&points, 64, 1).unwrap();
        assert_eq!(cb.len(), 64);
        assert!(summary.iterations >= 1 && summary.iterations <= MAX_ITERATIONS);
    }

    #[test]
    fn deterministic_per_seed() {
        let points = random_points(300, 5, 4);
        let (a, _) = train_codebook(&points, 10, 42).unwrap();
        let (b, _) = train_codebook(&points, 10, 42).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn rejects_too_few_distinct_points() {
        let points = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![2.0, 0.0]];
        let err = train_codebook(&points, 3, 0).unwrap_err();
        assert!(err.to_string().contains("insufficient distinct points"));
    }

    #[test]
    fn file_roundtrip_and_corruption() {
        let cb = Codebook::new(random_points(4, 3, 8)).unwrap();
        let bytes = cb.to_bytes();
        assert_eq!(Codebook::from_bytes(&bytes).unwrap(), cb);
        assert!(Codebook::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Codebook::from_bytes(&bad).is_err());
    }
}
