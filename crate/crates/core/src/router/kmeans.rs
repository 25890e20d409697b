//! Lloyd's algorithm with k-means++ seeding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::smacof::euclidean;
use crate::error::{Error, Result};

pub const MAX_ITERS: usize = 300;
pub const SHIFT_TOL: f64 = 1e-8;

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = euclidean(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect())
        .collect();
    keys.sort();
    keys.dedup();
    keys.len()
}

/// k-means++: first centroid uniform, later ones proportional to squared
/// distance from the nearest chosen centroid.
pub fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    while centroids.len() < k {
        let w: Vec<f64> = points
            .iter()
            .map(|p| nearest(&centroids, p).1.powi(2))
            .collect();
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, wi) in w.iter().enumerate() {
                if u < *wi {
                    idx = i;
                    break;
                }
                u -= wi;
            }
            idx
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[pick].clone());
    }
    centroids
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

pub fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Clustering("need at least one cluster".into()));
    }
    let distinct = count_distinct(points);
    if distinct < k {
        return Err(Error::Clustering(format!(
            "{distinct} distinct points cannot form {k} clusters"
        )));
    }
    let dim = points[0].len();
    let mut centroids = plus_plus_init(points, k, rng);
    let mut assignments = vec![0; points.len()];
    let mut iterations = 0;
    while iterations < MAX_ITERS {
        iterations += 1;
        for (a, p) in assignments.iter_mut().zip(points) {
            *a = nearest(&centroids, p).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (a, p) in assignments.iter().zip(points) {
            counts[*a] += 1;
            for (s, v) in sums[*a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            // An emptied cluster keeps its previous centroid.
            if counts[c] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(euclidean(&next, &centroids[c]));
            centroids[c] = next;
        }
        if shift < SHIFT_TOL {
            break;
        }
    }
    for (a, p) in assignments.iter_mut().zip(points) {
        *a = nearest(&centroids, p).0;
    }
    Ok(KMeans {
        centroids,
        assignments,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]];
        let km = lloyd(&pts, 1, &mut stream(0, "k")).unwrap();
        assert!((km.centroids[0][0] - 2.0).abs() < 1e-9);
        assert!((km.centroids[0][1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_distinct_points() {
        let pts = vec![vec![1.0], vec![1.0], vec![1.0]];
        assert!(matches!(
            lloyd(&pts, 2, &mut stream(0, "k")),
            Err(Error::Clustering(_))
        ));
    }

    #[test]
    fn ties_pick_lowest() {
        let c = vec![vec![-1.0], vec![1.0]];
        assert_eq!(nearest(&c, &[0.0]).0, 0);
    }
}
