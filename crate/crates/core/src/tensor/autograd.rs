//! Backward rules for every recorded operation.

use super::kernels::{axis_split, gelu_grad, gemm, strides};
use super::{Node, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Bcast {
    /// `b` matches the trailing dimensions of `a`.
    Suffix,
    /// `b` matches the leading dimensions of `a`.
    Prefix,
}

pub(crate) enum Op {
    Leaf,
    Reshape(Tensor),
    MatMul {
        a: Tensor,
        b: Tensor,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Tensor,
        b: Tensor,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddBcast(Tensor, Tensor, Bcast),
    MulBcast(Tensor, Tensor, Bcast),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Softmax {
        a: Tensor,
        axis: usize,
    },
    Gelu(Tensor),
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        row_mask: Vec<f64>,
        count: f64,
    },
    Embedding {
        table: Tensor,
        ids: Vec<usize>,
    },
    Permute {
        a: Tensor,
        perm: Vec<usize>,
    },
    Concat0(Vec<Tensor>),
    IndexSelect0 {
        a: Tensor,
        rows: Vec<usize>,
    },
    SumAll(Tensor),
    SumAxis {
        a: Tensor,
        axis: usize,
    },
    Log(Tensor),
    Exp(Tensor),
    Sqrt(Tensor),
    ClampMin {
        a: Tensor,
        min: f64,
    },
    CrossEntropyRows {
        logits: Tensor,
        targets: Vec<usize>,
        mask: Vec<f64>,
        probs: Vec<f64>,
        positions: usize,
        vocab: usize,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Reshape(_) => "reshape",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBcast(..) => "add_bcast",
            Op::MulBcast(..) => "mul_bcast",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Softmax { .. } => "softmax",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Embedding { .. } => "embedding",
            Op::Permute { .. } => "permute",
            Op::Concat0(_) => "concat",
            Op::IndexSelect0 { .. } => "index_select",
            Op::SumAll(_) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Sqrt(_) => "sqrt",
            Op::ClampMin { .. } => "clamp_min",
            Op::CrossEntropyRows { .. } => "cross_entropy",
        }
    }

    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Gelu(a)
            | Op::SumAll(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sqrt(a) => vec![a],
            Op::Softmax { a, .. }
            | Op::Permute { a, .. }
            | Op::IndexSelect0 { a, .. }
            | Op::SumAxis { a, .. }
            | Op::ClampMin { a, .. } => vec![a],
            Op::MatMul { a, b, .. } | Op::Bmm { a, b, .. } => vec![a, b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::AddBcast(a, b, _) | Op::MulBcast(a, b, _) => vec![a, b],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![x, gamma, beta]
            }
            Op::Embedding { table, .. } => vec![table],
            Op::Concat0(parts) => parts.iter().collect(),
            Op::CrossEntropyRows { logits, .. } => vec![logits],
        }
    }

    /// Propagate `g` (gradient w.r.t. `out`) into the parents.
    pub(crate) fn backward(&self, out: &Node, g: &[f64]) {
        match self {
            Op::Leaf => {}
            Op::Reshape(a) | Op::AddScalar(a) => a.accumulate(|d| add_into(d, g)),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if a.requires_grad() {
                    a.accumulate(|da| gemm(m, n, k, g, false, b.data(), true, da, true));
                }
                if b.requires_grad() {
                    b.accumulate(|db| gemm(k, m, n, a.data(), true, g, false, db, true));
                }
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (sa, sb, sg) = (m * k, k * n, m * n);
                if a.requires_grad() {
                    a.accumulate(|da| {
                        for i in 0..*batch {
                            let gi = &g[i * sg..(i + 1) * sg];
                            let bi = &b.data()[i * sb..(i + 1) * sb];
                            // dA = g · op(B)^T
                            gemm(
                                m,
                                n,
                                k,
                                gi,
                                false,
                                bi,
                                !*trans_b,
                                &mut da[i * sa..(i + 1) * sa],
                                true,
                            );
                        }
                    });
                }
                if b.requires_grad() {
                    b.accumulate(|db| {
                        for i in 0..*batch {
                            let gi = &g[i * sg..(i + 1) * sg];
                            let ai = &a.data()[i * sa..(i + 1) * sa];
                            let dbi = &mut db[i * sb..(i + 1) * sb];
                            if *trans_b {
                                // B stored [n,k]: dB = g^T · A
                                gemm(n, m, k, gi, true, ai, false, dbi, true);
                            } else {
                                gemm(k, m, n, ai, true, gi, false, dbi, true);
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                a.accumulate(|d| add_into(d, g));
                b.accumulate(|d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                a.accumulate(|d| add_into(d, g));
                b.accumulate(|d| d.iter_mut().zip(g).for_each(|(x, gi)| *x -= gi));
            }
            Op::Mul(a, b) => {
                a.accumulate(|d| {
                    for ((x, gi), bi) in d.iter_mut().zip(g).zip(b.data()) {
                        *x += gi * bi;
                    }
                });
                b.accumulate(|d| {
                    for ((x, gi), ai) in d.iter_mut().zip(g).zip(a.data()) {
                        *x += gi * ai;
                    }
                });
            }
            Op::AddBcast(a, b, mode) => {
                a.accumulate(|d| add_into(d, g));
                let nb = b.numel();
                let inner = g.len() / nb.max(1);
                b.accumulate(|d| {
                    for (i, gi) in g.iter().enumerate() {
                        d[bcast_index(i, nb, inner, *mode)] += gi;
                    }
                });
            }
            Op::MulBcast(a, b, mode) => {
                let nb = b.numel();
                let inner = g.len() / nb.max(1);
                let bd = b.data();
                a.accumulate(|d| {
                    for (i, (x, gi)) in d.iter_mut().zip(g).enumerate() {
                        *x += gi * bd[bcast_index(i, nb, inner, *mode)];
                    }
                });
                let ad = a.data();
                b.accumulate(|d| {
                    for (i, gi) in g.iter().enumerate() {
                        d[bcast_index(i, nb, inner, *mode)] += gi * ad[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                a.accumulate(|d| d.iter_mut().zip(g).for_each(|(x, gi)| *x += c * gi))
            }
            Op::Softmax { a, axis } => {
                let y = &out.data;
                let (outer, len, inner) = axis_split(&out.shape, *axis);
                a.accumulate(|d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                let p = base + j * inner;
                                dot += g[p] * y[p];
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                d[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = a.data();
                a.accumulate(|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_grad(x[i]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let f = gamma.numel();
                let rows = xhat.len() / f;
                let gm = gamma.data();
                gamma.accumulate(|d| {
                    for r in 0..rows {
                        for j in 0..f {
                            d[j] += g[r * f + j] * xhat[r * f + j];
                        }
                    }
                });
                beta.accumulate(|d| {
                    for r in 0..rows {
                        for j in 0..f {
                            d[j] += g[r * f + j];
                        }
                    }
                });
                x.accumulate(|d| {
                    let mut dxhat = vec![0.0; f];
                    for r in 0..rows {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..f {
                            let v = g[r * f + j] * gm[j];
                            dxhat[j] = v;
                            s1 += v;
                            s2 += v * xhat[r * f + j];
                        }
                        let (m1, m2) = (s1 / f as f64, s2 / f as f64);
                        for j in 0..f {
                            d[r * f + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * f + j] * m2);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                row_mask,
                count,
            } => {
                let f = gamma.numel();
                let rows = xhat.len() / f;
                let gm = gamma.data();
                gamma.accumulate(|d| {
                    for r in 0..rows {
                        for j in 0..f {
                            d[j] += g[r * f + j] * xhat[r * f + j];
                        }
                    }
                });
                beta.accumulate(|d| {
                    for r in 0..rows {
                        for j in 0..f {
                            d[j] += g[r * f + j];
                        }
                    }
                });
                x.accumulate(|d| {
                    // Statistics come from the masked rows, but every row's
                    // output depends on them.
                    let mut s1 = vec![0.0; f];
                    let mut s2 = vec![0.0; f];
                    for r in 0..rows {
                        for j in 0..f {
                            let v = g[r * f + j] * gm[j];
                            s1[j] += v;
                            s2[j] += v * xhat[r * f + j];
                        }
                    }
                    for r in 0..rows {
                        let w = row_mask[r] / count;
                        for j in 0..f {
                            let p = r * f + j;
                            let dxh = g[p] * gm[j];
                            d[p] += rstd[j] * (dxh - w * s1[j] - w * xhat[p] * s2[j]);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dm = table.shape()[1];
                table.accumulate(|d| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * dm..(id + 1) * dm], &g[i * dm..(i + 1) * dm]);
                    }
                });
            }
            Op::Permute { a, perm } => {
                let in_strides = strides(a.shape());
                let out_shape = &out.shape;
                a.accumulate(|d| {
                    for_each_permuted(out_shape, perm, &in_strides, |o, i| d[i] += g[o]);
                });
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = p.numel();
                    p.accumulate(|d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::IndexSelect0 { a, rows } => {
                let row = a.numel() / a.shape()[0].max(1);
                a.accumulate(|d| {
                    for (o, &r) in rows.iter().enumerate() {
                        add_into(&mut d[r * row..(r + 1) * row], &g[o * row..(o + 1) * row]);
                    }
                });
            }
            Op::SumAll(a) => a.accumulate(|d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::SumAxis { a, axis } => {
                let (outer, len, inner) = axis_split(a.shape(), *axis);
                a.accumulate(|d| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                d[(o * len + j) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::Log(a) => {
                let x = a.data();
                a.accumulate(|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / x[i];
                    }
                });
            }
            Op::Exp(a) => {
                let y = &out.data;
                a.accumulate(|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i];
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = &out.data;
                a.accumulate(|d| {
                    for i in 0..d.len() {
                        if y[i] > 0.0 {
                            d[i] += g[i] / (2.0 * y[i]);
                        }
                    }
                });
            }
            Op::ClampMin { a, min } => {
                let x = a.data();
                a.accumulate(|d| {
                    for i in 0..d.len() {
                        if x[i] >= *min {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                mask,
                probs,
                positions,
                vocab,
            } => {
                let (t, v) = (*positions, *vocab);
                logits.accumulate(|d| {
                    for (n, (&tgt, &w)) in targets.iter().zip(mask).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let scale = g[n / t] * w;
                        let row = &mut d[n * v..(n + 1) * v];
                        let p = &probs[n * v..(n + 1) * v];
                        for j in 0..v {
                            row[j] += scale * p[j];
                        }
                        row[tgt] -= scale;
                    }
                });
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
}

#[inline]
pub(crate) fn bcast_index(i: usize, nb: usize, inner: usize, mode: Bcast) -> usize {
    match mode {
        Bcast::Suffix => i % nb,
        Bcast::Prefix => i / inner,
    }
}

/// Visit `(out_index, in_index)` pairs of a permutation `out = a.permute(perm)`.
pub(crate) fn for_each_permuted(
    out_shape: &[usize],
    perm: &[usize],
    in_strides: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    // stride in the input for a unit step along each output axis
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in 0..total {
        f(o, src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}
