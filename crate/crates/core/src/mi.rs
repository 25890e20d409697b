//! Batch-level mutual information between module states.
//!
//! Each input's pooled hidden state is read as logits over `K = d_model`
//! feature bins. Within a batch, the joint distribution is the batch mean of
//! per-input outer products `p_inv(.|c) ⊗ p_spec(.|c)`, the marginals are the
//! batch means of each side, and the estimate is
//! `KL(joint || m_inv ⊗ m_spec)` in nats.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiEstimate {
    /// Nats, clamped at zero once within tolerance of it.
    pub value: f64,
    pub batch_size: usize,
}

/// Softmax over the feature axis of pooled states `[B, K]`.
pub fn conditional_distribution(pooled: &Tensor) -> Result<Tensor> {
    if pooled.rank() != 2 {
        return Err(Error::Shape(format!(
            "expected pooled states [B, K], got {:?}",
            pooled.shape()
        )));
    }
    pooled.softmax(1)
}

/// Differentiable estimate from paired distributions `[B, K_i]`, `[B, K_s]`.
pub fn mi_tensor(p_inv: &Tensor, p_spec: &Tensor) -> Result<Tensor> {
    if p_inv.rank() != 2 || p_spec.rank() != 2 || p_inv.shape()[0] != p_spec.shape()[0] {
        let (l, r) = (
            p_inv.shape().first().copied().unwrap_or(0),
            p_spec.shape().first().copied().unwrap_or(0),
        );
        return Err(Error::Pairing { left: l, right: r });
    }
    let b = p_inv.shape()[0];
    if b == 0 {
        return Err(Error::Pairing { left: 0, right: 0 });
    }
    let (ki, ks) = (p_inv.shape()[1], p_spec.shape()[1]);
    let inv_b = 1.0 / b as f64;
    let joint = p_inv.transpose2()?.matmul(p_spec)?.scale(inv_b);
    let m_inv = p_inv.sum_axis(0)?.scale(inv_b).reshape(&[ki, 1])?;
    let m_spec = p_spec.sum_axis(0)?.scale(inv_b).reshape(&[1, ks])?;
    let product = m_inv.matmul(&m_spec)?;
    let log_ratio = joint
        .clamp_min(LOG_FLOOR)
        .log()
        .sub(&product.clamp_min(LOG_FLOOR).log())?;
    Ok(joint.mul(&log_ratio)?.sum())
}

/// Reference estimate over plain probability vectors.
pub fn mi_estimate(p_inv: &[Vec<f64>], p_spec: &[Vec<f64>]) -> Result<MiEstimate> {
    if p_inv.len() != p_spec.len() || p_inv.is_empty() {
        return Err(Error::Pairing {
            left: p_inv.len(),
            right: p_spec.len(),
        });
    }
    let b = p_inv.len() as f64;
    let (ki, ks) = (p_inv[0].len(), p_spec[0].len());
    let mut joint = vec![vec![0.0; ks]; ki];
    let mut m_i = vec![0.0; ki];
    let mut m_s = vec![0.0; ks];
    for (p, q) in p_inv.iter().zip(p_spec) {
        for i in 0..ki {
            m_i[i] += p[i] / b;
            for j in 0..ks {
                joint[i][j] += p[i] * q[j] / b;
            }
        }
        for j in 0..ks {
            m_s[j] += q[j] / b;
        }
    }
    let mut value = 0.0;
    for i in 0..ki {
        for j in 0..ks {
            let jv = joint[i][j];
            if jv > 0.0 {
                value += jv * (jv.max(LOG_FLOOR).ln() - (m_i[i] * m_s[j]).max(LOG_FLOOR).ln());
            }
        }
    }
    Ok(MiEstimate {
        value: clamp_report(value),
        batch_size: p_inv.len(),
    })
}

/// Report tiny negative round-off as zero; larger negatives are left visible.
pub fn clamp_report(v: f64) -> f64 {
    if v < 0.0 && v >= -1e-9 {
        0.0
    } else {
        v
    }
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let k = *t.shape().last().unwrap_or(&1);
    t.data().chunks(k.max(1)).map(<[f64]>::to_vec).collect()
}
