//! Representative few-shot selection: k-means++ seeding, Lloyd refinement, and
//! mapping each centroid back to a distinct real sample.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::FewShotPair;
use crate::embed::{EmbedError, JointEncoder};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("K must satisfy 1 <= K <= {points}, got {k}")]
    BadK { k: usize, points: usize },
    #[error("point {index} has dimension {found}, expected {expected}")]
    DimMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("no points")]
    Empty,
    #[error("tolerance must be positive")]
    BadTolerance,
    #[error("embedding few-shot pair {pair}: {source}")]
    Embed {
        pair: String,
        #[source]
        source: EmbedError,
    },
}

/// Vectors tagged with the index of the corpus item they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    points: Vec<(Vec<f64>, usize)>,
}

impl PointSet {
    pub fn new(points: Vec<(Vec<f64>, usize)>) -> Result<Self, SampleError> {
        let dim = points.first().ok_or(SampleError::Empty)?.0.len();
        for (i, (v, _)) in points.iter().enumerate() {
            if v.len() != dim {
                return Err(SampleError::DimMismatch {
                    index: i,
                    expected: dim,
                    found: v.len(),
                });
            }
        }
        Ok(Self { dim, points })
    }

    /// Points labeled 0..n in order.
    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Result<Self, SampleError> {
        Self::new(vectors.into_iter().enumerate().map(|(i, v)| (v, i)).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.points[i].0
    }

    pub fn pair_index(&self, i: usize) -> usize {
        self.points[i].1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub centers: Vec<Vec<f64>>,
    /// Cluster index for each point, in point order.
    pub assignments: Vec<usize>,
    /// Pair indices chosen to represent each cluster, in cluster order.
    pub representative_indices: Vec<usize>,
    pub iterations: usize,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center by squared L2 distance; ties go to the lower index.
pub fn nearest_center(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let d = squared_distance(point, center);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn check_k(k: usize, n: usize) -> Result<(), SampleError> {
    if k < 1 || k > n {
        return Err(SampleError::BadK { k, points: n });
    }
    Ok(())
}

/// D²-weighted seeding. Returns the *point positions* chosen as seeds.
///
/// The first seed is uniform. Each later seed is drawn with probability
/// `D(x)^2 / sum D^2`, where `D` is the distance to the nearest seed so far. If
/// every remaining point coincides with a seed, the draw is uniform over points
/// not yet chosen.
pub fn kmeanspp_seed_indices(points: &PointSet, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>, SampleError> {
    check_k(k, points.len())?;
    let n = points.len();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut dist2 = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let last = points.vector(*chosen.last().expect("nonempty"));
        for (i, d) in dist2.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.vector(i), last));
        }
        let total: f64 = dist2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in dist2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if u < d {
                        break;
                    }
                    u -= d;
                }
            }
            pick.expect("positive mass")
        } else {
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.random_range(0..unused.len())]
        };
        chosen.push(next);
    }
    Ok(chosen)
}

pub fn kmeanspp_seed(points: &PointSet, k: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>, SampleError> {
    Ok(kmeanspp_seed_indices(points, k, rng)?
        .into_iter()
        .map(|i| points.vector(i).to_vec())
        .collect())
}

fn assign(points: &PointSet, centers: &[Vec<f64>]) -> Vec<usize> {
    (0..points.len())
        .into_par_iter()
        .map(|i| nearest_center(points.vector(i), centers))
        .collect()
}

/// Lloyd iterations until the largest center move is below `tol` or
/// `max_iter` updates have run. Clusters that lose every point keep their
/// previous center. The returned assignment is against the final centers.
pub fn lloyd_refine(
    points: &PointSet,
    centers: Vec<Vec<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<ClusterResult, SampleError> {
    if centers.is_empty() {
        return Err(SampleError::BadK {
            k: 0,
            points: points.len(),
        });
    }
    if tol <= 0.0 || tol.is_nan() {
        return Err(SampleError::BadTolerance);
    }
    for (i, c) in centers.iter().enumerate() {
        if c.len() != points.dim() {
            return Err(SampleError::DimMismatch {
                index: i,
                expected: points.dim(),
                found: c.len(),
            });
        }
    }
    let k = centers.len();
    let dim = points.dim();
    let mut centers = centers;
    let mut iterations = 0;
    while iterations < max_iter {
        let assignment = assign(points, &centers);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(points.vector(i)) {
                *s += v;
            }
        }
        let mut max_shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            max_shift = max_shift.max(squared_distance(&mean, &centers[c]).sqrt());
            centers[c] = mean;
        }
        iterations += 1;
        if max_shift < tol {
            break;
        }
    }
    let assignments = assign(points, &centers);
    Ok(ClusterResult {
        centers,
        assignments,
        representative_indices: Vec::new(),
        iterations,
    })
}

/// For each center in order, the pair index of the nearest point not already
/// taken by an earlier center.
pub fn deembed(centers: &[Vec<f64>], points: &PointSet) -> Result<Vec<usize>, SampleError> {
    check_k(centers.len(), points.len())?;
    let mut used = vec![false; points.len()];
    let mut out = Vec::with_capacity(centers.len());
    for center in centers {
        let mut best: Option<(f64, usize)> = None;
        for i in (0..points.len()).filter(|&i| !used[i]) {
            let d = squared_distance(points.vector(i), center);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        let (_, i) = best.expect("K <= |points| leaves a free point");
        used[i] = true;
        out.push(points.pair_index(i));
    }
    Ok(out)
}

/// Seeding, refinement and de-embedding over precomputed vectors.
pub fn select_representatives(
    points: &PointSet,
    k: usize,
    tol: f64,
    max_iter: usize,
    rng: &mut impl Rng,
) -> Result<ClusterResult, SampleError> {
    let seeds = kmeanspp_seed(points, k, rng)?;
    let mut result = lloyd_refine(points, seeds, tol, max_iter)?;
    result.representative_indices = deembed(&result.centers, points)?;
    Ok(result)
}

/// Embeds every pair and returns the `k` representatives in cluster order.
pub fn select_fewshots(
    corpus: &[FewShotPair],
    k: usize,
    encoder: &JointEncoder,
    rng: &mut impl Rng,
) -> Result<Vec<FewShotPair>, SampleError> {
    check_k(k, corpus.len())?;
    let vectors = corpus
        .par_iter()
        .map(|pair| {
            encoder
                .embed_pair(pair)
                .map(|e| e.values)
                .map_err(|source| SampleError::Embed {
                    pair: pair.id.clone(),
                    source,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let points = PointSet::from_vectors(vectors)?;
    let result = select_representatives(&points, k, DEFAULT_TOL, DEFAULT_MAX_ITER, rng)?;
    Ok(result
        .representative_indices
        .into_iter()
        .map(|i| corpus[i].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pts(v: &[&[f64]]) -> PointSet {
        PointSet::from_vectors(v.iter().map(|p| p.to_vec()).collect()).unwrap()
    }

    #[test]
    fn k_equal_n_selects_every_point() {
        let p = pts(&[&[0.0], &[1.0], &[5.0], &[9.0]]);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = kmeanspp_seed_indices(&p, 4, &mut rng).unwrap();
            idx.sort();
            assert_eq!(idx, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn duplicates_still_give_distinct_seeds() {
        let p = pts(&[&[0.0], &[0.0], &[3.0], &[3.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut idx = kmeanspp_seed_indices(&p, 4, &mut rng).unwrap();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn first_seed_never_redrawn() {
        let p = pts(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0]]);
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = kmeanspp_seed_indices(&p, 2, &mut rng).unwrap();
            assert_ne!(idx[0], idx[1]);
        }
    }

    #[test]
    fn bad_k_is_rejected() {
        let p = pts(&[&[0.0], &[1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(kmeanspp_seed(&p, 0, &mut rng), Err(SampleError::BadK { .. })));
        assert!(matches!(kmeanspp_seed(&p, 3, &mut rng), Err(SampleError::BadK { .. })));
        assert!(deembed(&[vec![0.0], vec![0.0], vec![0.0]], &p).is_err());
    }

    #[test]
    fn single_cluster_converges_to_mean() {
        let p = pts(&[&[0.0, 0.0], &[2.0, 0.0], &[4.0, 6.0]]);
        let r = lloyd_refine(&p, vec![vec![100.0, 100.0]], 1e-6, 100).unwrap();
        assert_eq!(r.centers[0], vec![2.0, 2.0]);
        assert_eq!(r.iterations, 2);
        assert_eq!(r.assignments, vec![0, 0, 0]);
    }

    #[test]
    fn duplicated_locations_are_a_fixed_point() {
        let p = pts(&[&[0.0], &[0.0], &[0.0], &[5.0], &[5.0], &[5.0]]);
        let r = lloyd_refine(&p, vec![vec![0.0], vec![5.0]], 1e-6, 100).unwrap();
        assert_eq!(r.centers, vec![vec![0.0], vec![5.0]]);
        assert_eq!(r.iterations, 1);
        assert_eq!(r.assignments, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn empty_cluster_keeps_center() {
        let p = pts(&[&[0.0], &[1.0]]);
        let r = lloyd_refine(&p, vec![vec![0.5], vec![50.0]], 1e-6, 10).unwrap();
        assert_eq!(r.centers[1], vec![50.0]);
    }

    #[test]
    fn deembed_exact_and_collision() {
        let p = pts(&[&[0.0], &[1.0], &[10.0]]);
        assert_eq!(deembed(&[vec![10.0]], &p).unwrap(), vec![2]);
        assert_eq!(deembed(&[vec![0.1], vec![0.2]], &p).unwrap(), vec![0, 1]);
    }

    #[test]
    fn deembed_returns_pair_labels() {
        let p = PointSet::new(vec![(vec![0.0], 7), (vec![3.0], 9)]).unwrap();
        assert_eq!(deembed(&[vec![2.9]], &p).unwrap(), vec![9]);
    }
}
