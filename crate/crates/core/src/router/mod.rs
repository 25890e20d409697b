//! Unsupervised input-to-module assignment.
//!
//! Three strategies share one [`Codebook`]:
//!
//! * `vq`: nearest centroid by mean per-token Euclidean distance over the
//!   prompt, trained with a codebook term and a ν-weighted commitment term.
//! * `kmeans`: centroids fitted once, before training, on SMACOF-projected
//!   pooled embeddings; no routing loss.
//! * `softmin`: every module weighted by `softmax(-distance / temperature)`
//!   against pooled embeddings; centroids learn from the output loss.

pub mod kmeans;
pub mod smacof;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::lm::LmModule;
use crate::nn::Param;
use crate::rng::{sample_without_replacement, stream};
use crate::tensor::checkpoint::Entry;
use crate::tensor::Tensor;
use smacof::euclidean;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Vq,
    Kmeans,
    Softmin,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Vq => "vq",
            Strategy::Kmeans => "kmeans",
            Strategy::Softmin => "softmin",
        }
    }

    pub fn one_hot(self) -> bool {
        self != Strategy::Softmin
    }

    fn code(self) -> f64 {
        match self {
            Strategy::Vq => 0.0,
            Strategy::Kmeans => 1.0,
            Strategy::Softmin => 2.0,
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vq" => Ok(Strategy::Vq),
            "kmeans" => Ok(Strategy::Kmeans),
            "softmin" => Ok(Strategy::Softmin),
            _ => Err(Error::Config(format!("unknown routing strategy `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Codebook {
    pub strategy: Strategy,
    /// `[N, dim]`: `dim` is `d_model`, or the projected dimension for kmeans.
    pub centroids: Param,
    pub nu: f64,
    pub temperature: f64,
    pub mds_dim: usize,
    /// Sampled training embeddings spanning the projection (kmeans only).
    pub basis_points: Vec<Vec<f64>>,
    /// Their projected coordinates.
    pub basis_coords: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct RoutingDecision {
    /// `[B][N]` module weights.
    pub weights: Vec<Vec<f64>>,
    /// Differentiable `[B, N]` weights (softmin only).
    pub weight_tensor: Option<Tensor>,
    /// Highest-weight module per input (lowest index on ties).
    pub chosen: Vec<usize>,
    /// Routing loss; a constant zero for kmeans and softmin.
    pub loss: Tensor,
    /// `[B][N]` input-to-centroid distances.
    pub distances: Vec<Vec<f64>>,
}

pub const RESERVED_PREFIX: &str = "codebook.";

impl Codebook {
    pub fn n(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    /// A vq or softmin codebook from explicit centroids.
    pub fn with_centroids(
        strategy: Strategy,
        centroids: Vec<Vec<f64>>,
        nu: f64,
        temperature: f64,
    ) -> Result<Codebook> {
        let n = centroids.len();
        if n == 0 {
            return Err(Error::Routing(
                "codebook needs at least one centroid".into(),
            ));
        }
        let dim = centroids[0].len();
        if centroids
            .iter()
            .any(|c| c.len() != dim || c.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Routing(
                "centroids must be finite and of equal length".into(),
            ));
        }
        let mut p = Param::new(
            format!("{RESERVED_PREFIX}centroids"),
            centroids.concat(),
            &[n, dim],
        )?;
        p.set_trainable(strategy != Strategy::Kmeans);
        Ok(Codebook {
            strategy,
            centroids: p,
            nu,
            temperature,
            mds_dim: dim,
            basis_points: Vec::new(),
            basis_coords: Vec::new(),
        })
    }

    pub fn centroid_rows(&self) -> Vec<Vec<f64>> {
        self.centroids
            .data()
            .chunks(self.dim())
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// Map a pooled router embedding into the space the centroids live in.
    pub fn project(&self, point: &[f64]) -> Vec<f64> {
        match self.strategy {
            Strategy::Kmeans => {
                smacof::project_point(&self.basis_points, &self.basis_coords, point)
            }
            _ => point.to_vec(),
        }
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        let mut out = vec![
            Entry {
                name: format!("{RESERVED_PREFIX}meta"),
                shape: vec![4],
                data: vec![
                    self.strategy.code(),
                    self.nu,
                    self.temperature,
                    self.mds_dim as f64,
                ],
            },
            self.centroids.to_entry(),
        ];
        if !self.basis_points.is_empty() {
            let rows = |v: &[Vec<f64>]| -> Entry {
                Entry {
                    name: String::new(),
                    shape: vec![v.len(), v[0].len()],
                    data: v.concat(),
                }
            };
            out.push(Entry {
                name: format!("{RESERVED_PREFIX}basis_points"),
                ..rows(&self.basis_points)
            });
            out.push(Entry {
                name: format!("{RESERVED_PREFIX}basis_coords"),
                ..rows(&self.basis_coords)
            });
        }
        out
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Codebook> {
        let get = |name: &str| {
            entries
                .iter()
                .find(|e| e.name == format!("{RESERVED_PREFIX}{name}"))
        };
        let meta =
            get("meta").ok_or_else(|| Error::Checkpoint("codebook metadata missing".into()))?;
        let cent = get("centroids")
            .ok_or_else(|| Error::Checkpoint("codebook centroids missing".into()))?;
        let strategy = match meta.data.first().map(|c| c.to_bits()) {
            Some(c) if c == 0f64.to_bits() => Strategy::Vq,
            Some(c) if c == 1f64.to_bits() => Strategy::Kmeans,
            Some(c) if c == 2f64.to_bits() => Strategy::Softmin,
            _ => return Err(Error::Checkpoint("unknown codebook strategy".into())),
        };
        if meta.data.len() != 4 || cent.shape.len() != 2 {
            return Err(Error::Checkpoint("malformed codebook".into()));
        }
        let rows = |e: &Entry| -> Vec<Vec<f64>> {
            e.data
                .chunks(e.shape[1].max(1))
                .map(<[f64]>::to_vec)
                .collect()
        };
        let mut cb = Codebook::with_centroids(strategy, rows(cent), meta.data[1], meta.data[2])?;
        cb.mds_dim = meta.data[3] as usize;
        if let (Some(bp), Some(bc)) = (get("basis_points"), get("basis_coords")) {
            cb.basis_points = rows(bp);
            cb.basis_coords = rows(bc);
        }
        if strategy == Strategy::Kmeans && cb.basis_points.is_empty() {
            return Err(Error::Checkpoint(
                "kmeans codebook without projection basis".into(),
            ));
        }
        Ok(cb)
    }

    /// Route a batch from the router's final hidden states `[B, T, D]`,
    /// looking only at positions where `mask` is set.
    pub fn route(&self, hidden: &Tensor, mask: &[f64]) -> Result<RoutingDecision> {
        match self.strategy {
            Strategy::Vq => vq_route(hidden, mask, self),
            Strategy::Kmeans => kmeans_route(&pool_rows(hidden, mask)?, self),
            Strategy::Softmin => softmin_weights(&pool(hidden, mask)?, self),
        }
    }
}

/// The router's per-token final hidden states for a batch.
pub fn embed_input(router: &LmModule, batch: &TokenBatch) -> Result<Tensor> {
    if router.has_head() {
        return Err(Error::Config(format!(
            "router `{}` must not have a language-modelling head",
            router.name
        )));
    }
    Ok(router.forward(&batch.tokens, batch.batch, batch.seq)?.last)
}

/// Per-input embedding: mean of the hidden states over masked positions.
pub fn pool(hidden: &Tensor, mask: &[f64]) -> Result<Tensor> {
    hidden
        .masked_mean(mask)
        .map_err(|_| Error::Routing("input with no routable tokens".into()))
}

pub fn pool_rows(hidden: &Tensor, mask: &[f64]) -> Result<Vec<Vec<f64>>> {
    let p = pool(hidden, mask)?;
    let d = p.shape()[1];
    Ok(p.data().chunks(d).map(<[f64]>::to_vec).collect())
}

fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Vector-quantisation routing.
///
/// Each input goes to the centroid with the smallest mean Euclidean distance
/// over its masked tokens. The loss is
/// `mse(sg(c), h) + nu * mse(c, sg(h))` over all masked token rows, so the
/// hidden states learn only from the first term and the centroids only from
/// the second.
pub fn vq_route(hidden: &Tensor, mask: &[f64], cb: &Codebook) -> Result<RoutingDecision> {
    if hidden.rank() != 3
        || hidden.shape()[2] != cb.dim()
        || mask.len() != hidden.shape()[0] * hidden.shape()[1]
    {
        return Err(Error::dim("vq_route", hidden.shape(), cb.centroids.shape()));
    }
    let (b, t, d) = (hidden.shape()[0], hidden.shape()[1], hidden.shape()[2]);
    let n = cb.n();
    let cents = cb.centroid_rows();
    let h = hidden.data();
    let mut distances = Vec::with_capacity(b);
    let mut chosen = Vec::with_capacity(b);
    let mut token_rows = Vec::new();
    let mut token_centroid = Vec::new();
    for r in 0..b {
        let rows: Vec<usize> = (0..t)
            .filter(|&p| mask[r * t + p] != 0.0)
            .map(|p| r * t + p)
            .collect();
        if rows.is_empty() {
            return Err(Error::Routing(format!("input {r} has no routable tokens")));
        }
        let dist: Vec<f64> = cents
            .iter()
            .map(|c| {
                rows.iter()
                    .map(|&i| euclidean(&h[i * d..(i + 1) * d], c))
                    .sum::<f64>()
                    / rows.len() as f64
            })
            .collect();
        let k = argmin(&dist);
        token_centroid.extend(std::iter::repeat(k).take(rows.len()));
        token_rows.extend(rows);
        distances.push(dist);
        chosen.push(k);
    }
    let h_r = hidden.reshape(&[b * t, d])?.index_select0(&token_rows)?;
    let h_c = cb.centroids.tensor().index_select0(&token_centroid)?;
    let codebook = h_r.mse(&h_c.stop_gradient())?;
    let commit = h_c.mse(&h_r.stop_gradient())?;
    let loss = codebook.add(&commit.scale(cb.nu))?;
    Ok(RoutingDecision {
        weights: chosen.iter().map(|&k| one_hot(n, k)).collect(),
        weight_tensor: None,
        chosen,
        loss,
        distances,
    })
}

/// Nearest projected centroid for each pooled embedding.
pub fn kmeans_route(pooled: &[Vec<f64>], cb: &Codebook) -> Result<RoutingDecision> {
    let cents = cb.centroid_rows();
    let mut distances = Vec::with_capacity(pooled.len());
    let mut chosen = Vec::with_capacity(pooled.len());
    for p in pooled {
        let y = cb.project(p);
        let dist: Vec<f64> = cents.iter().map(|c| euclidean(c, &y)).collect();
        chosen.push(argmin(&dist));
        distances.push(dist);
    }
    Ok(RoutingDecision {
        weights: chosen.iter().map(|&k| one_hot(cb.n(), k)).collect(),
        weight_tensor: None,
        chosen,
        loss: Tensor::scalar(0.0),
        distances,
    })
}

/// Soft weights `softmax(-||p - c_n|| / temperature)` over all centroids,
/// differentiable with respect to the centroids (and `pooled`, if tracked).
pub fn softmin_weights(pooled: &Tensor, cb: &Codebook) -> Result<RoutingDecision> {
    if pooled.rank() != 2 || pooled.shape()[1] != cb.dim() {
        return Err(Error::dim(
            "softmin_weights",
            pooled.shape(),
            cb.centroids.shape(),
        ));
    }
    if cb.temperature <= 0.0 {
        return Err(Error::Config("softmin temperature must be positive".into()));
    }
    let (b, d) = (pooled.shape()[0], pooled.shape()[1]);
    let n = cb.n();
    let mut cols = Vec::with_capacity(n);
    for k in 0..n {
        let c = cb.centroids.tensor().index_select0(&[k])?.reshape(&[d])?;
        let diff = pooled.add_suffix(&c.neg())?;
        cols.push(diff.mul(&diff)?.sum_axis(1)?.sqrt().reshape(&[1, b])?);
    }
    let dist = Tensor::concat0(&cols)?.transpose2()?;
    let w = dist.scale(-1.0 / cb.temperature).softmax(1)?;
    let weights: Vec<Vec<f64>> = w.data().chunks(n).map(<[f64]>::to_vec).collect();
    let distances: Vec<Vec<f64>> = dist.data().chunks(n).map(<[f64]>::to_vec).collect();
    let chosen = weights.iter().map(|r| crate::lm::argmax(r)).collect();
    Ok(RoutingDecision {
        weights,
        weight_tensor: Some(w),
        chosen,
        loss: Tensor::scalar(0.0),
        distances,
    })
}

/// Fit a kmeans codebook: SMACOF-project a sampled basis of `8 * m` pooled
/// embeddings to `m` dimensions, place every point against that basis, then
/// run Lloyd's algorithm in the projected space.
pub fn kmeans_fit(points: &[Vec<f64>], n: usize, m: usize, seed: u64) -> Result<Codebook> {
    if points.is_empty() {
        return Err(Error::Clustering("no embeddings to cluster".into()));
    }
    let d = points[0].len();
    if m == 0 || m > d {
        return Err(Error::Config(format!(
            "mds_dim must be in 1..={d}, got {m}"
        )));
    }
    let distinct = kmeans::count_distinct(points);
    if distinct < n {
        return Err(Error::Clustering(format!(
            "{distinct} distinct points cannot form {n} clusters"
        )));
    }
    let mut rng = stream(seed, "router/mds-basis");
    let idx = sample_without_replacement(&mut rng, points.len(), 8 * m);
    let basis_points: Vec<Vec<f64>> = idx.iter().map(|&i| points[i].clone()).collect();
    let emb = smacof::smacof(&smacof::distance_matrix(&basis_points), m)?;
    let projected: Vec<Vec<f64>> = points
        .iter()
        .map(|p| smacof::project_point(&basis_points, &emb.coords, p))
        .collect();
    let km = kmeans::lloyd(&projected, n, &mut stream(seed, "router/kmeans"))?;
    let mut cb = Codebook::with_centroids(Strategy::Kmeans, km.centroids, 0.0, 1.0)?;
    cb.mds_dim = m;
    cb.basis_points = basis_points;
    cb.basis_coords = emb.coords;
    Ok(cb)
}

/// Seeded k-means++ picks among pooled embeddings, used to start vq and
/// softmin codebooks from occupied regions of the embedding space.
pub fn init_centroids(points: &[Vec<f64>], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let distinct = kmeans::count_distinct(points);
    if distinct < n {
        return Err(Error::Clustering(format!(
            "{distinct} distinct points cannot seed {n} centroids"
        )));
    }
    Ok(kmeans::plus_plus_init(
        points,
        n,
        &mut stream(seed, "router/centroid-init"),
    ))
}
