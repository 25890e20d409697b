//! Metric multidimensional scaling by stress majorization (SMACOF).

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

pub const MAX_ITERS: usize = 128;
pub const STRESS_TOL: f64 = 1e-9;

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn distance_matrix(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = euclidean(&points[i], &points[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    /// One row of `dim` coordinates per input point.
    pub coords: Vec<Vec<f64>>,
    /// Raw stress divided by the sum of squared target distances.
    pub stress: f64,
    pub iterations: usize,
}

/// Normalized stress of `coords` against target distances `delta`.
pub fn stress(delta: &[Vec<f64>], coords: &[Vec<f64>]) -> f64 {
    let n = delta.len();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(&coords[i], &coords[j]);
            num += (delta[i][j] - d) * (delta[i][j] - d);
            den += delta[i][j] * delta[i][j];
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Classical (Torgerson) scaling: top eigenvectors of the double-centered
/// squared distance matrix. Used as the SMACOF starting configuration.
pub fn torgerson(delta: &[Vec<f64>], dim: usize) -> Vec<Vec<f64>> {
    let n = delta.len();
    let sq = DMatrix::from_fn(n, n, |i, j| delta[i][j] * delta[i][j]);
    let row_mean: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let total = row_mean.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| {
        -0.5 * (sq[(i, j)] - row_mean[i] - row_mean[j] + total)
    });
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| {
        eig.eigenvalues[c]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&c))
    });
    let mut coords = vec![vec![0.0; dim]; n];
    for (k, &e) in order.iter().take(dim).enumerate() {
        let scale = eig.eigenvalues[e].max(0.0).sqrt();
        // Fix the sign so the largest-magnitude component is positive.
        let col = eig.eigenvectors.column(e);
        let pivot = (0..n).fold(0, |best, i| {
            if col[i].abs() > col[best].abs() {
                i
            } else {
                best
            }
        });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            coords[i][k] = sign * col[i] * scale;
        }
    }
    coords
}

/// SMACOF from a Torgerson start. Stops after [`MAX_ITERS`] Guttman updates
/// or when normalized stress changes by less than [`STRESS_TOL`].
pub fn smacof(delta: &[Vec<f64>], dim: usize) -> Result<Embedding> {
    let n = delta.len();
    if n == 0 {
        return Err(Error::Degenerate("no points to scale".into()));
    }
    let mut x = torgerson(delta, dim);
    let mut prev = stress(delta, &x);
    let mut iterations = 0;
    while iterations < MAX_ITERS && prev > 0.0 {
        let mut next = vec![vec![0.0; dim]; n];
        for i in 0..n {
            let mut diag = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = euclidean(&x[i], &x[j]);
                let b = if d > 0.0 { -delta[i][j] / d } else { 0.0 };
                diag -= b;
                for k in 0..dim {
                    next[i][k] += b * x[j][k];
                }
            }
            for k in 0..dim {
                next[i][k] = (next[i][k] + diag * x[i][k]) / n as f64;
            }
        }
        x = next;
        iterations += 1;
        let s = stress(delta, &x);
        let change = (prev - s).abs();
        prev = s;
        if change < STRESS_TOL {
            break;
        }
    }
    Ok(Embedding {
        coords: x,
        stress: prev,
        iterations,
    })
}

/// Place a new point into an existing configuration by minimizing its own
/// stress against fixed basis coordinates (single-point Guttman updates).
pub fn project_point(
    basis_points: &[Vec<f64>],
    basis_coords: &[Vec<f64>],
    point: &[f64],
) -> Vec<f64> {
    let n = basis_points.len();
    let delta: Vec<f64> = basis_points.iter().map(|b| euclidean(b, point)).collect();
    let nearest = (0..n).fold(0, |best, i| if delta[i] < delta[best] { i } else { best });
    let dim = basis_coords[0].len();
    let mut y = basis_coords[nearest].clone();
    if delta[nearest] == 0.0 {
        return y;
    }
    for _ in 0..MAX_ITERS {
        let mut next = vec![0.0; dim];
        for i in 0..n {
            let d = euclidean(&y, &basis_coords[i]);
            let ratio = if d > 0.0 { delta[i] / d } else { 0.0 };
            for k in 0..dim {
                next[k] += basis_coords[i][k] + ratio * (y[k] - basis_coords[i][k]);
            }
        }
        next.iter_mut().for_each(|v| *v /= n as f64);
        let shift = euclidean(&next, &y);
        y = next;
        if shift < 1e-12 {
            break;
        }
    }
    y
}
