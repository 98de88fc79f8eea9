//! K-means with k-means++ seeding, used to inspect learned word embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub const MAX_ITERATIONS: usize = 300;
pub const TOLERANCE: f64 = 1e-6;
pub const DEFAULT_TOP_WORDS: usize = 500;
pub const DEFAULT_CLUSTERS: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = sq_dist(p, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.below(points.len())];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.uniform() * total;
            let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            // every point coincides with a centroid: take any unused index
            let unused: Vec<usize> = (0..points.len()).filter(|i| !chosen.contains(i)).collect();
            unused[rng.below(unused.len())]
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Lloyd iterations until no centroid moves more than [`TOLERANCE`] or
/// [`MAX_ITERATIONS`] is reached. An empty cluster keeps its centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Result<KMeansResult> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "cluster count {k} must be in 1..={}",
            points.len()
        )));
    }
    let dim = points[0].len();
    let mut centroids = seed_centroids(points, k, rng);
    let mut assignments = vec![0; points.len()];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        for (a, p) in assignments.iter_mut().zip(points) {
            *a = nearest(p, &centroids).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        if shift < TOLERANCE {
            break;
        }
    }
    for (a, p) in assignments.iter_mut().zip(points) {
        *a = nearest(p, &centroids).0;
    }
    let inertia = assignments.iter().zip(points).map(|(&a, p)| sq_dist(p, &centroids[a])).sum();
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
        iterations,
    })
}

/// Clusters the embedding columns of `token_ids` (a `d × |V|` matrix holds
/// one token per column).
pub fn kmeans_embeddings(embedding: &Matrix, token_ids: &[usize], k: usize, rng: &mut Rng) -> Result<KMeansResult> {
    if let Some(&bad) = token_ids.iter().find(|&&t| t >= embedding.cols()) {
        return Err(Error::IdOutOfRange {
            id: bad,
            size: embedding.cols(),
        });
    }
    let points: Vec<Vec<f64>> = token_ids.iter().map(|&t| embedding.column(t)).collect();
    kmeans(&points, k, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_cluster_per_point_has_zero_inertia() {
        let mut rng = Rng::new(1);
        let pts: Vec<Vec<f64>> = (0..7).map(|_| vec![rng.uniform(), rng.uniform()]).collect();
        let r = kmeans(&pts, 7, &mut Rng::new(3)).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut seen = r.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 7);
    }

    #[test]
    fn separates_two_far_clouds() {
        let mut rng = Rng::new(2);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = if i % 2 == 0 { 0.0 } else { 100.0 };
            pts.push(vec![c + rng.uniform(), c + rng.uniform(), rng.uniform()]);
            labels.push(i % 2);
        }
        let r = kmeans(&pts, 2, &mut Rng::new(9)).unwrap();
        let same = r.assignments.iter().zip(&labels).filter(|(a, l)| a == l).count();
        assert!(same == 60 || same == 0);
    }

    #[test]
    fn deterministic_and_validated() {
        let pts: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 7) as f64, (i % 5) as f64]).collect();
        let a = kmeans(&pts, 4, &mut Rng::new(5)).unwrap();
        let b = kmeans(&pts, 4, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
        assert!(kmeans(&pts, 31, &mut Rng::new(5)).is_err());
        assert!(kmeans(&pts, 0, &mut Rng::new(5)).is_err());
    }

    #[test]
    fn duplicate_points_still_seed_k_centroids() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let r = kmeans(&pts, 3, &mut Rng::new(4)).unwrap();
        assert_eq!(r.centroids.len(), 3);
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn clusters_embedding_columns() {
        let mut m = Matrix::zeros(2, 6);
        for t in 0..6 {
            let c = if t < 3 { 0.0 } else { 50.0 };
            m.set(0, t, c + t as f64 * 0.1);
            m.set(1, t, c);
        }
        let r = kmeans_embeddings(&m, &[0, 1, 2, 3, 4, 5], 2, &mut Rng::new(1)).unwrap();
        assert_eq!(r.assignments[0], r.assignments[2]);
        assert_ne!(r.assignments[0], r.assignments[3]);
        assert!(kmeans_embeddings(&m, &[6], 1, &mut Rng::new(1)).is_err());
    }
}
