//! Combining the invariant module's output with the specific modules'.
//!
//! * shared-head: both hidden states pass through one batch normalization
//!   (statistics over the union of their samples), are concatenated on the
//!   feature axis and mapped to logits by a single head.
//! * logit-space: each module's own logits are batch-normalized jointly and
//!   summed with weights `w_inv` and `r_n (1 - w_inv)`.
//! * prob-space: each module's probabilities are smoothed to
//!   `(1 - w)/2 + w P`, renormalized, moved to log space and summed; the
//!   softmax of the sum is the output distribution.

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Linear, Module, Param, NORM_EPS};
use crate::tensor::{shared_batch_norm, BatchStats, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    SharedHead,
    LogitSpace,
    ProbSpace,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::SharedHead => "shared-head",
            Scheme::LogitSpace => "logit-space",
            Scheme::ProbSpace => "prob-space",
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared-head" => Ok(Scheme::SharedHead),
            "logit-space" => Ok(Scheme::LogitSpace),
            "prob-space" => Ok(Scheme::ProbSpace),
            _ => Err(Error::Config(format!("unknown aggregation scheme `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub scheme: Scheme,
    pub w_inv: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            scheme: Scheme::SharedHead,
            w_inv: 0.5,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        check_weight(self.w_inv)
    }
}

fn check_weight(w: f64) -> Result<()> {
    if (0.0..=1.0).contains(&w) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "aggregation weight {w} outside [0, 1]"
        )))
    }
}

/// Weight of specific module `n` given its routing weight.
pub fn specific_weight(r_n: f64, w_inv: f64) -> f64 {
    r_n * (1.0 - w_inv)
}

/// Aggregation parameters. Shared-head owns a `d_model`-wide batch norm and
/// a `2 d_model -> V` head; logit-space owns a `V`-wide batch norm;
/// prob-space has no parameters.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub config: AggregationConfig,
    pub bn: Option<BatchNorm>,
    pub head: Option<Linear>,
}

impl Aggregator {
    pub fn new(
        config: AggregationConfig,
        d_model: usize,
        vocab: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Aggregator> {
        config.validate()?;
        let (bn, head) = match config.scheme {
            Scheme::SharedHead => (
                Some(BatchNorm::new("agg.bn", d_model)?),
                Some(Linear::new("agg.head", 2 * d_model, vocab, 0.02, rng)?),
            ),
            Scheme::LogitSpace => (Some(BatchNorm::new("agg.bn", vocab)?), None),
            Scheme::ProbSpace => (None, None),
        };
        Ok(Aggregator { config, bn, head })
    }

    fn expect(&self, scheme: Scheme) -> Result<()> {
        if self.config.scheme == scheme {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "aggregator configured for {} but {} was requested",
                self.config.scheme.as_str(),
                scheme.as_str()
            )))
        }
    }

    /// Normalize states jointly (training) or with running statistics.
    fn normalize(
        &self,
        states: &[Tensor],
        mask: &[f64],
        train: bool,
    ) -> Result<(Vec<Tensor>, Option<BatchStats>)> {
        let bn = self
            .bn
            .as_ref()
            .ok_or_else(|| Error::Config("aggregator has no batch norm".into()))?;
        if train {
            let masks = vec![mask.to_vec(); states.len()];
            let (out, stats) = shared_batch_norm(
                states,
                bn.gamma.tensor(),
                bn.beta.tensor(),
                Some(&masks),
                NORM_EPS,
            )?;
            Ok((out, Some(stats)))
        } else {
            Ok((
                states.iter().map(|s| bn.eval(s)).collect::<Result<_>>()?,
                None,
            ))
        }
    }

    /// Shared-head logits from `[B, T, d]` invariant and specific states.
    /// `mask` (`[B*T]`) selects the positions that feed batch statistics.
    pub fn shared_head(
        &self,
        h_inv: &Tensor,
        h_spec: &Tensor,
        mask: &[f64],
        train: bool,
    ) -> Result<(Tensor, Option<BatchStats>)> {
        self.expect(Scheme::SharedHead)?;
        if h_inv.shape() != h_spec.shape() {
            return Err(Error::dim("shared_head", h_inv.shape(), h_spec.shape()));
        }
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("shared head missing".into()))?;
        let d = *h_inv.shape().last().unwrap();
        let (normed, stats) = self.normalize(&[h_inv.clone(), h_spec.clone()], mask, train)?;
        // Concatenating on features then applying W equals summing the two
        // halves of W applied to each part.
        let w_top = head.w.tensor().index_select0(&(0..d).collect::<Vec<_>>())?;
        let w_bot = head
            .w
            .tensor()
            .index_select0(&(d..2 * d).collect::<Vec<_>>())?;
        let logits = normed[0]
            .matmul(&w_top)?
            .add(&normed[1].matmul(&w_bot)?)?
            .add_suffix(head.b.tensor())?;
        Ok((logits, stats))
    }

    /// Weighted sum of jointly normalized per-module logits. `weights[a]`
    /// is a `[B]` tensor of per-input weights for module `a`.
    pub fn logit_space(
        &self,
        logits: &[Tensor],
        weights: &[Tensor],
        mask: &[f64],
        train: bool,
    ) -> Result<(Tensor, Option<BatchStats>)> {
        self.expect(Scheme::LogitSpace)?;
        check_weights(logits, weights)?;
        let (normed, stats) = self.normalize(logits, mask, train)?;
        let mut out: Option<Tensor> = None;
        for (l, w) in normed.iter().zip(weights) {
            let term = l.mul_prefix(w)?;
            out = Some(match out {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        Ok((out.expect("at least one module"), stats))
    }

    /// Prob-space output logits; their softmax is the combined distribution.
    pub fn prob_space(&self, logits: &[Tensor], weights: &[Tensor]) -> Result<Tensor> {
        self.expect(Scheme::ProbSpace)?;
        prob_space_logits(logits, weights)
    }
}

fn check_weights(logits: &[Tensor], weights: &[Tensor]) -> Result<()> {
    if logits.is_empty() || logits.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} module outputs but {} weights",
            logits.len(),
            weights.len()
        )));
    }
    for (l, w) in logits.iter().zip(weights) {
        if w.rank() != 1 || l.shape().first() != w.shape().first() {
            return Err(Error::dim("aggregation weights", l.shape(), w.shape()));
        }
        for &x in w.data() {
            check_weight(x)?;
        }
    }
    Ok(())
}

/// `ln((1 - w)/2 + w P) - ln((1 - w) V / 2 + w)` per module, summed.
/// `logits[a]` is `[B, .., V]`; `weights[a]` is `[B]`.
pub fn prob_space_logits(logits: &[Tensor], weights: &[Tensor]) -> Result<Tensor> {
    check_weights(logits, weights)?;
    let mut out: Option<Tensor> = None;
    for (l, w) in logits.iter().zip(weights) {
        let axis = l.rank() - 1;
        let v = l.shape()[axis] as f64;
        let p = l.softmax(axis)?;
        let floor = w.neg().add_scalar(1.0).scale(0.5);
        let smoothed = p.mul_prefix(w)?.add_prefix(&floor)?.log();
        let norm = floor.scale(v).add(w)?.log();
        let term = smoothed.add_prefix(&norm.neg())?;
        out = Some(match out {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(out.expect("at least one module"))
}

/// Direct evaluation of the prob-space combination for one context.
pub fn prob_space_combine(probs: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if probs.is_empty() || probs.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} distributions but {} weights",
            probs.len(),
            weights.len()
        )));
    }
    let v = probs[0].len();
    let mut l = vec![0.0; v];
    for (p, &w) in probs.iter().zip(weights) {
        check_weight(w)?;
        if p.len() != v {
            return Err(Error::dim("prob_space_combine", &[v], &[p.len()]));
        }
        let b = 1.0 / ((1.0 - w) * v as f64 / 2.0 + w);
        for (li, pi) in l.iter_mut().zip(p) {
            *li += ((1.0 - w) / 2.0 + w * pi).ln() + b.ln();
        }
    }
    let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

impl Module for Aggregator {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        if let Some(bn) = &self.bn {
            out.extend(bn.params());
        }
        if let Some(h) = &self.head {
            out.extend(h.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        if let Some(bn) = &mut self.bn {
            out.extend(bn.params_mut());
        }
        if let Some(h) = &mut self.head {
            out.extend(h.params_mut());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn identity_and_null_influence() {
        let p = vec![0.1, 0.6, 0.3];
        let out = prob_space_combine(&[p.clone()], &[1.0]).unwrap();
        for (a, b) in out.iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
        let q = vec![0.2, 0.2, 0.6];
        let with = prob_space_combine(&[q.clone(), vec![0.9, 0.05, 0.05]], &[0.5, 0.0]).unwrap();
        let without = prob_space_combine(&[q], &[0.5]).unwrap();
        for (a, b) in with.iter().zip(&without) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scheme_mismatch_is_config_error() {
        let agg = Aggregator::new(AggregationConfig::default(), 4, 5, &mut stream(0, "a")).unwrap();
        let l = Tensor::zeros(&[2, 5]);
        let w = Tensor::full(&[2], 0.5);
        assert!(matches!(agg.prob_space(&[l], &[w]), Err(Error::Config(_))));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut agg =
            Aggregator::new(AggregationConfig::default(), 2, 3, &mut stream(0, "a")).unwrap();
        agg.head
            .as_mut()
            .unwrap()
            .w
            .set_data(vec![0.0; 12])
            .unwrap();
        let h = Tensor::new(vec![1.0, 2.0, -1.0, 0.5], &[2, 1, 2]).unwrap();
        let g = Tensor::new(vec![0.3, 0.1, 0.2, 0.9], &[2, 1, 2]).unwrap();
        let (y, _) = agg.shared_head(&h, &g, &[1.0, 1.0], true).unwrap();
        assert_eq!(y.shape(), &[2, 1, 3]);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn out_of_range_weight_rejected() {
        let cfg = AggregationConfig {
            scheme: Scheme::ProbSpace,
            w_inv: 1.5,
        };
        assert!(cfg.validate().is_err());
    }
}
