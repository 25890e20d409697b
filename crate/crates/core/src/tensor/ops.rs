use super::autograd::{bcast_index, for_each_permuted, Bcast, Op};
use super::kernels::{axis_split, gelu, gemm, numel, softmax_lane, strides};
use super::Tensor;
use crate::error::{Error, Result};

/// Per-feature statistics of a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::dim("reshape", self.shape(), shape));
        }
        let a = self.clone();
        Ok(Tensor::derived(
            self.to_vec(),
            shape.to_vec(),
            self.requires_grad(),
            || Op::Reshape(a),
        ))
    }

    /// Matrix product. `self` may carry leading batch dimensions, which are
    /// flattened into rows; `rhs` must be a matrix.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() < 2 || rhs.rank() != 2 || self.shape()[self.rank() - 1] != rhs.shape()[0] {
            return Err(Error::dim("matmul", self.shape(), rhs.shape()));
        }
        let k = rhs.shape()[0];
        let n = rhs.shape()[1];
        let m = self.numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(),
            false,
            rhs.data(),
            false,
            &mut out,
            false,
        );
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::derived(
            out,
            shape,
            self.requires_grad() || rhs.requires_grad(),
            || Op::MatMul { a, b, m, k, n },
        ))
    }

    /// Batched product `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]^T` with `trans_b`.
    pub fn bmm(&self, rhs: &Tensor, trans_b: bool) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(Error::dim("bmm", sa, sb));
        }
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &self.data()[i * m * k..(i + 1) * m * k],
                false,
                &rhs.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::derived(
            out,
            vec![batch, m, n],
            self.requires_grad() || rhs.requires_grad(),
            || Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    fn zip_same(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        if self.shape() != rhs.shape() {
            return Err(Error::dim(op, self.shape(), rhs.shape()));
        }
        Ok(self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| f(*a, *b))
            .collect())
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let out = self.zip_same(rhs, "add", |a, b| a + b)?;
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::derived(
            out,
            self.shape().to_vec(),
            a.requires_grad() || b.requires_grad(),
            || Op::Add(a, b),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let out = self.zip_same(rhs, "sub", |a, b| a - b)?;
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::derived(
            out,
            self.shape().to_vec(),
            a.requires_grad() || b.requires_grad(),
            || Op::Sub(a, b),
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let out = self.zip_same(rhs, "mul", |a, b| a * b)?;
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::derived(
            out,
            self.shape().to_vec(),
            a.requires_grad() || b.requires_grad(),
            || Op::Mul(a, b),
        ))
    }

    fn bcast(&self, rhs: &Tensor, mode: Bcast, mul: bool) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        let ok = sb.len() <= sa.len()
            && match mode {
                Bcast::Suffix => sa[sa.len() - sb.len()..] == *sb,
                Bcast::Prefix => sa[..sb.len()] == *sb,
            };
        if !ok || rhs.numel() == 0 {
            return Err(Error::dim(
                if mul { "mul_bcast" } else { "add_bcast" },
                sa,
                sb,
            ));
        }
        let nb = rhs.numel();
        let inner = self.numel() / nb;
        let bd = rhs.data();
        let out: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let b = bd[bcast_index(i, nb, inner, mode)];
                if mul {
                    a * b
                } else {
                    a + b
                }
            })
            .collect();
        let (a, b) = (self.clone(), rhs.clone());
        let track = a.requires_grad() || b.requires_grad();
        Ok(Tensor::derived(out, sa.to_vec(), track, || {
            if mul {
                Op::MulBcast(a, b, mode)
            } else {
                Op::AddBcast(a, b, mode)
            }
        }))
    }

    /// `self + rhs` with `rhs` broadcast over leading dimensions (a bias).
    pub fn add_suffix(&self, rhs: &Tensor) -> Result<Tensor> {
        self.bcast(rhs, Bcast::Suffix, false)
    }

    pub fn mul_suffix(&self, rhs: &Tensor) -> Result<Tensor> {
        self.bcast(rhs, Bcast::Suffix, true)
    }

    /// `self + rhs` with `rhs` broadcast over trailing dimensions.
    pub fn add_prefix(&self, rhs: &Tensor) -> Result<Tensor> {
        self.bcast(rhs, Bcast::Prefix, false)
    }

    /// `self * rhs` with `rhs` broadcast over trailing dimensions
    /// (e.g. per-sample weights `[B]` over `[B, T, D]`).
    pub fn mul_prefix(&self, rhs: &Tensor) -> Result<Tensor> {
        self.bcast(rhs, Bcast::Prefix, true)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|x| x * c).collect();
        let a = self.clone();
        Tensor::derived(out, self.shape().to_vec(), self.requires_grad(), || {
            Op::Scale(a, c)
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|x| x + c).collect();
        let a = self.clone();
        Tensor::derived(out, self.shape().to_vec(), self.requires_grad(), || {
            Op::AddScalar(a)
        })
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Axis {
                axis,
                rank: self.rank(),
            });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                softmax_lane(self.data(), &mut out, len, inner, o * len * inner + i);
            }
        }
        let a = self.clone();
        Ok(Tensor::derived(
            out,
            self.shape().to_vec(),
            self.requires_grad(),
            || Op::Softmax { a, axis },
        ))
    }

    /// Softmax over the last axis of `[..., T, T]` scores where query `i`
    /// only sees keys `j <= i`; masked entries are exactly zero.
    pub fn causal_softmax(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 || self.shape()[r - 1] != self.shape()[r - 2] {
            return Err(Error::Shape(format!(
                "causal_softmax needs [..., T, T], got {:?}",
                self.shape()
            )));
        }
        let t = self.shape()[r - 1];
        let x = self.data();
        let mut out = vec![0.0; self.numel()];
        for (row, o) in out.chunks_mut(t).enumerate() {
            let q = row % t;
            let xs = &x[row * t..row * t + q + 1];
            softmax_lane(xs, &mut o[..q + 1], q + 1, 1, 0);
        }
        let a = self.clone();
        Ok(Tensor::derived(
            out,
            self.shape().to_vec(),
            self.requires_grad(),
            || Op::Softmax { a, axis: r - 1 },
        ))
    }

    pub fn gelu(&self) -> Tensor {
        let out = self.data().iter().map(|&x| gelu(x)).collect();
        let a = self.clone();
        Tensor::derived(out, self.shape().to_vec(), self.requires_grad(), || {
            Op::Gelu(a)
        })
    }

    /// Normalize over the last axis, then apply `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let f = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on scalar".into()))?;
        if gamma.shape() != [f] || beta.shape() != [f] {
            return Err(Error::dim("layer_norm", self.shape(), gamma.shape()));
        }
        let rows = self.numel() / f;
        let x = self.data();
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * f..(r + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..f {
                let h = (row[j] - mean) * rs;
                xhat[r * f + j] = h;
                out[r * f + j] = gamma.data()[j] * h + beta.data()[j];
            }
        }
        let (x, gamma, beta) = (self.clone(), gamma.clone(), beta.clone());
        let track = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(Tensor::derived(out, self.shape().to_vec(), track, || {
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            }
        }))
    }

    /// Training-mode batch normalization over rows of `[rows, F]` (leading
    /// dims flattened). Statistics use rows whose `row_mask` is nonzero; all
    /// rows are normalized with them.
    pub fn batch_norm_train(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        row_mask: Option<&[f64]>,
        eps: f64,
    ) -> Result<(Tensor, BatchStats)> {
        let f = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("batch_norm on scalar".into()))?;
        if gamma.shape() != [f] || beta.shape() != [f] {
            return Err(Error::dim("batch_norm", self.shape(), gamma.shape()));
        }
        let rows = self.numel() / f;
        let mask: Vec<f64> = match row_mask {
            Some(m) if m.len() != rows => {
                return Err(Error::dim("batch_norm mask", &[rows], &[m.len()]))
            }
            Some(m) => m
                .iter()
                .map(|&w| if w != 0.0 { 1.0 } else { 0.0 })
                .collect(),
            None => vec![1.0; rows],
        };
        let count: f64 = mask.iter().sum();
        if count < 2.0 {
            return Err(Error::DegenerateVariance(format!(
                "batch normalization needs at least 2 samples, got {count}"
            )));
        }
        let x = self.data();
        let mut mean = vec![0.0; f];
        for r in 0..rows {
            if mask[r] != 0.0 {
                for j in 0..f {
                    mean[j] += x[r * f + j];
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; f];
        for r in 0..rows {
            if mask[r] != 0.0 {
                for j in 0..f {
                    let d = x[r * f + j] - mean[j];
                    var[j] += d * d;
                }
            }
        }
        let unbiased: Vec<f64> = var.iter().map(|v| v / (count - 1.0)).collect();
        var.iter_mut().for_each(|v| *v /= count);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            for j in 0..f {
                let p = r * f + j;
                xhat[p] = (x[p] - mean[j]) * rstd[j];
                out[p] = gamma.data()[j] * xhat[p] + beta.data()[j];
            }
        }
        let stats = BatchStats {
            mean,
            var: unbiased,
        };
        let (xt, gamma, beta) = (self.clone(), gamma.clone(), beta.clone());
        let track = xt.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let y = Tensor::derived(out, self.shape().to_vec(), track, || Op::BatchNorm {
            x: xt,
            gamma,
            beta,
            xhat,
            rstd,
            row_mask: mask,
            count,
        });
        Ok((y, stats))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Tensor> {
        let f = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("batch_norm on scalar".into()))?;
        if mean.len() != f || var.len() != f {
            return Err(Error::dim("batch_norm", self.shape(), &[mean.len()]));
        }
        let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let shift: Vec<f64> = mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
        let norm = self
            .mul_suffix(&Tensor::new(scale, &[f])?)?
            .add_suffix(&Tensor::new(shift, &[f])?)?;
        norm.mul_suffix(gamma)?.add_suffix(beta)
    }

    /// Gather rows of a `[V, D]` table; output shape is `index_shape + [D]`.
    pub fn embedding(&self, ids: &[usize], index_shape: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 || numel(index_shape) != ids.len() {
            return Err(Error::Shape(format!(
                "embedding table {:?} with {} ids",
                self.shape(),
                ids.len()
            )));
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "token",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&self.data()[id * d..(id + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let table = self.clone();
        let ids = ids.to_vec();
        Ok(Tensor::derived(out, shape, self.requires_grad(), || {
            Op::Embedding { table, ids }
        }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r
            || perm
                .iter()
                .any(|&p| p >= r || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape(format!(
                "invalid permutation {perm:?} for rank {r}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let mut out = vec![0.0; self.numel()];
        let x = self.data();
        for_each_permuted(&out_shape, perm, &strides(self.shape()), |o, i| {
            out[o] = x[i]
        });
        let a = self.clone();
        let perm = perm.to_vec();
        Ok(Tensor::derived(
            out,
            out_shape,
            self.requires_grad(),
            || Op::Permute { a, perm },
        ))
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!(
                "transpose2 on shape {:?}",
                self.shape()
            )));
        }
        self.permute(&[1, 0])
    }

    /// Concatenate along axis 0.
    pub fn concat0(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail = &first.shape()[1..];
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            if p.rank() == 0 || &p.shape()[1..] != tail {
                return Err(Error::dim("concat", first.shape(), p.shape()));
            }
            rows += p.shape()[0];
            out.extend_from_slice(p.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let track = parts.iter().any(|p| p.requires_grad());
        let parts = parts.to_vec();
        Ok(Tensor::derived(out, shape, track, || Op::Concat0(parts)))
    }

    /// Select rows (axis 0) in the given order; rows may repeat.
    pub fn index_select0(&self, rows: &[usize]) -> Result<Tensor> {
        let n0 = *self
            .shape()
            .first()
            .ok_or_else(|| Error::Shape("index_select on scalar".into()))?;
        let row = if n0 == 0 { 0 } else { self.numel() / n0 };
        let mut out = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            if r >= n0 {
                return Err(Error::Index {
                    what: "row",
                    index: r,
                    bound: n0,
                });
            }
            out.extend_from_slice(&self.data()[r * row..(r + 1) * row]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = rows.len();
        let a = self.clone();
        let rows = rows.to_vec();
        Ok(Tensor::derived(out, shape, self.requires_grad(), || {
            Op::IndexSelect0 { a, rows }
        }))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let a = self.clone();
        Tensor::derived(vec![s], vec![], self.requires_grad(), || Op::SumAll(a))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum out one axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Axis {
                axis,
                rank: self.rank(),
            });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * len + j) * inner + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let a = self.clone();
        Ok(Tensor::derived(out, shape, self.requires_grad(), || {
            Op::SumAxis { a, axis }
        }))
    }

    pub fn log(&self) -> Tensor {
        let out = self.data().iter().map(|x| x.ln()).collect();
        let a = self.clone();
        Tensor::derived(out, self.shape().to_vec(), self.requires_grad(), || {
            Op::Log(a)
        })
    }

    pub fn exp(&self) -> Tensor {
        let out = self.data().iter().map(|x| x.exp()).collect();
        let a = self.clone();
        Tensor::derived(out, self.shape().to_vec(), self.requires_grad(), || {
            Op::Exp(a)
        })
    }

    pub fn sqrt(&self) -> Tensor {
        let out = self.data().iter().map(|x| x.sqrt()).collect();
        let a = self.clone();
        Tensor::derived(out, self.shape().to_vec(), self.requires_grad(), || {
            Op::Sqrt(a)
        })
    }

    /// `max(x, min)`; the gradient passes where `x >= min`.
    pub fn clamp_min(&self, min: f64) -> Tensor {
        let out = self.data().iter().map(|x| x.max(min)).collect();
        let a = self.clone();
        Tensor::derived(out, self.shape().to_vec(), self.requires_grad(), || {
            Op::ClampMin { a, min }
        })
    }

    /// Mean over the positions of `[B, T, D]` whose `mask` entry (`[B*T]`)
    /// is nonzero, giving `[B, D]`. Every row needs one unmasked position.
    pub fn masked_mean(&self, mask: &[f64]) -> Result<Tensor> {
        if self.rank() != 3 || mask.len() != self.shape()[0] * self.shape()[1] {
            return Err(Error::dim("masked_mean", self.shape(), &[mask.len()]));
        }
        let (b, t) = (self.shape()[0], self.shape()[1]);
        let mut inv = Vec::with_capacity(b);
        for row in mask.chunks(t) {
            let n = row.iter().filter(|m| **m != 0.0).count();
            if n == 0 {
                return Err(Error::Shape("masked_mean over a fully masked row".into()));
            }
            inv.push(1.0 / n as f64);
        }
        let m: Vec<f64> = mask
            .iter()
            .map(|&w| if w != 0.0 { 1.0 } else { 0.0 })
            .collect();
        self.mul_prefix(&Tensor::new(m, &[b, t])?)?
            .sum_axis(1)?
            .mul_prefix(&Tensor::new(inv, &[b])?)
    }

    /// Mean squared error, averaged over all elements.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        let d = self.sub(target)?;
        Ok(d.mul(&d)?.mean())
    }

    /// Masked negative log-likelihood summed per leading row.
    ///
    /// `self` is `[B, T, V]`; `targets` and `mask` have `B*T` entries.
    /// Returns `[B]` with `out[b] = sum_t mask[b,t] * -log softmax(logits[b,t])[target]`.
    pub fn cross_entropy_rows(&self, targets: &[usize], mask: &[f64]) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::Shape(format!(
                "cross_entropy expects [B,T,V], got {:?}",
                self.shape()
            )));
        }
        let (b, t, v) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if targets.len() != b * t || mask.len() != b * t {
            return Err(Error::dim(
                "cross_entropy",
                &[b, t],
                &[targets.len(), mask.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::Index {
                what: "target",
                index: bad,
                bound: v,
            });
        }
        let x = self.data();
        let mut probs = vec![0.0; x.len()];
        let mut out = vec![0.0; b];
        for n in 0..b * t {
            softmax_lane(x, &mut probs, v, 1, n * v);
            if mask[n] != 0.0 {
                let row = &x[n * v..(n + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                out[n / t] += mask[n] * (lse - row[targets[n]]);
            }
        }
        let logits = self.clone();
        let (targets, mask) = (targets.to_vec(), mask.to_vec());
        Ok(Tensor::derived(out, vec![b], self.requires_grad(), || {
            Op::CrossEntropyRows {
                logits,
                targets,
                mask,
                probs,
                positions: t,
                vocab: v,
            }
        }))
    }

    /// Mean negative log-likelihood over unmasked positions; zero (with zero
    /// gradient) when every position is masked.
    pub fn cross_entropy(&self, targets: &[usize], mask: &[f64]) -> Result<Tensor> {
        let rows = self.cross_entropy_rows(targets, mask)?;
        let total: f64 = mask.iter().sum();
        Ok(rows
            .sum()
            .scale(if total > 0.0 { 1.0 / total } else { 0.0 }))
    }
}

/// Jointly batch-normalize several `[.., F]` states as one sample set and
/// split the result back. All states share `gamma`/`beta`.
pub fn shared_batch_norm(
    states: &[Tensor],
    gamma: &Tensor,
    beta: &Tensor,
    row_masks: Option<&[Vec<f64>]>,
    eps: f64,
) -> Result<(Vec<Tensor>, BatchStats)> {
    let first = states
        .first()
        .ok_or_else(|| Error::Shape("shared_batch_norm of nothing".into()))?;
    let f = *first
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("shared_batch_norm on scalar".into()))?;
    let mut flat = Vec::with_capacity(states.len());
    let mut rows = Vec::with_capacity(states.len());
    for s in states {
        if s.shape().last() != Some(&f) {
            return Err(Error::dim("shared_batch_norm", first.shape(), s.shape()));
        }
        let r = s.numel() / f;
        rows.push(r);
        flat.push(s.reshape(&[r, f])?);
    }
    let mask: Option<Vec<f64>> = match row_masks {
        Some(ms) => {
            if ms.len() != states.len() {
                return Err(Error::dim(
                    "shared_batch_norm masks",
                    &[states.len()],
                    &[ms.len()],
                ));
            }
            Some(ms.iter().flat_map(|m| m.iter().copied()).collect())
        }
        None => None,
    };
    let joint = Tensor::concat0(&flat)?;
    let (normed, stats) = joint.batch_norm_train(gamma, beta, mask.as_deref(), eps)?;
    let mut out = Vec::with_capacity(states.len());
    let mut off = 0;
    for (s, r) in states.iter().zip(rows) {
        let idx: Vec<usize> = (off..off + r).collect();
        out.push(normed.index_select0(&idx)?.reshape(s.shape())?);
        off += r;
    }
    Ok((out, stats))
}
