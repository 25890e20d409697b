//! The composed model: router, invariant module, specific modules and
//! aggregator, with the five-part training loss.

pub mod eval;
pub mod train;

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregationConfig, Aggregator, Scheme};
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::lm::{HiddenStates, LmModule};
use crate::mi::{conditional_distribution, mi_tensor};
use crate::nn::{Module, Param};
use crate::router::{Codebook, RoutingDecision, Strategy};
use crate::tensor::checkpoint::Entry;
use crate::tensor::{BatchStats, Tensor};

/// Coefficients of the total loss
/// `L_o + alpha L_inv + beta L_dom + gamma L_R + epsilon L_I`; `nu` weighs the
/// commitment term inside `L_R`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub nu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.1,
            epsilon: 0.01,
            nu: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.alpha, "alpha"),
            (self.beta, "beta"),
            (self.gamma, "gamma"),
            (self.epsilon, "epsilon"),
            (self.nu, "nu"),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The five loss terms of one step.
#[derive(Clone, Debug)]
pub struct LossComponents {
    pub l_o: Tensor,
    pub l_inv: Tensor,
    pub l_dom: Tensor,
    pub l_r: Tensor,
    pub l_i: Tensor,
}

impl LossComponents {
    pub fn values(&self) -> [f64; 5] {
        [
            self.l_o.item(),
            self.l_inv.item(),
            self.l_dom.item(),
            self.l_r.item(),
            self.l_i.item(),
        ]
    }

    pub const NAMES: [&'static str; 5] = ["L_o", "L_inv", "L_dom", "L_R", "L_I"];
}

/// Weighted sum of the components. Terms with a zero coefficient are left
/// out of the graph entirely, so they contribute no gradient at all.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<Tensor> {
    let mut total = c.l_o.clone();
    for (term, coef) in [
        (&c.l_inv, w.alpha),
        (&c.l_dom, w.beta),
        (&c.l_r, w.gamma),
        (&c.l_i, w.epsilon),
    ] {
        if coef != 0.0 {
            total = total.add(&term.scale(coef))?;
        }
    }
    Ok(total)
}

/// Which module state a do-intervention overwrites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Invariant,
    Specific(usize),
}

impl std::str::FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "inv" || s == "invariant" {
            return Ok(Target::Invariant);
        }
        s.strip_prefix("spec")
            .and_then(|n| n.parse().ok())
            .map(Target::Specific)
            .ok_or_else(|| Error::Config(format!("invalid intervention target `{s}`")))
    }
}

/// `do(target := value)`: the target's final hidden state is replaced by
/// `value` (length `d_model`) at every position.
#[derive(Clone, Debug, PartialEq)]
pub struct Intervention {
    pub target: Target,
    pub value: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Training mode: batch statistics instead of running statistics.
    pub train: bool,
    pub intervention: Option<Intervention>,
    /// Deliberately wire the router to read specific module 0's state.
    /// Exists only so audits can be shown to catch a broken graph.
    pub fault_router_reads_specific: bool,
}

/// A specific module's activity within one forward pass.
#[derive(Clone, Debug)]
pub struct SpecificRun {
    pub module: usize,
    /// Batch rows this module processed.
    pub rows: Vec<usize>,
    pub hidden: HiddenStates,
    /// The module's own-head logits for its rows.
    pub logits: Tensor,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Aggregated logits `[B, T, V]`.
    pub logits: Tensor,
    pub inv_logits: Tensor,
    /// Per row, the own-head logits of the module the router chose.
    pub spec_logits: Tensor,
    pub router_hidden: Tensor,
    pub inv_hidden: HiddenStates,
    pub specific: Vec<SpecificRun>,
    pub routing: RoutingDecision,
    pub components: LossComponents,
    /// Per specific module MI with the invariant module; `None` if inactive.
    pub mi: Vec<Option<f64>>,
    pub total: Tensor,
    pub bn_stats: Option<BatchStats>,
}

impl StepOutput {
    pub fn run_for(&self, module: usize) -> Option<&SpecificRun> {
        self.specific.iter().find(|r| r.module == module)
    }
}

#[derive(Clone, Debug)]
pub struct IclmModel {
    pub router: LmModule,
    pub codebook: Codebook,
    pub invariant: LmModule,
    pub specific: Vec<LmModule>,
    pub aggregator: Aggregator,
    pub weights: LossWeights,
}

fn constant_state(value: &[f64], like: &Tensor) -> Result<Tensor> {
    let d = *like.shape().last().unwrap();
    if value.len() != d {
        return Err(Error::dim("intervention", &[d], &[value.len()]));
    }
    let rows = like.numel() / d;
    Tensor::new(value.repeat(rows), like.shape())
}

fn masked_rows(mask: &[f64], seq: usize, rows: &[usize]) -> Vec<f64> {
    rows.iter()
        .flat_map(|&r| mask[r * seq..(r + 1) * seq].iter().copied())
        .collect()
}

impl IclmModel {
    /// Build from one base language model: router (no head), invariant
    /// module and `n` specific modules all start as copies of it.
    pub fn from_base(
        base: &LmModule,
        n: usize,
        codebook: Codebook,
        aggregation: AggregationConfig,
        weights: LossWeights,
        rng: &mut ChaCha8Rng,
    ) -> Result<IclmModel> {
        if n == 0 {
            return Err(Error::Config("need at least one specific module".into()));
        }
        if codebook.n() != n {
            return Err(Error::Config(format!(
                "codebook has {} centroids for {n} specific modules",
                codebook.n()
            )));
        }
        weights.validate()?;
        let mut router = base.clone_as("router", false, rng)?;
        router.set_trainable(codebook.strategy == Strategy::Vq);
        let invariant = base.clone_as("inv", true, rng)?;
        let specific = (0..n)
            .map(|i| base.clone_as(&format!("spec{i}"), true, rng))
            .collect::<Result<Vec<_>>>()?;
        let aggregator = Aggregator::new(
            aggregation,
            base.config.d_model,
            base.config.vocab_size,
            rng,
        )?;
        Ok(IclmModel {
            router,
            codebook,
            invariant,
            specific,
            aggregator,
            weights,
        })
    }

    pub fn n_specific(&self) -> usize {
        self.specific.len()
    }

    pub fn d_model(&self) -> usize {
        self.invariant.config.d_model
    }

    /// Full forward pass with all five loss components.
    pub fn forward(&self, batch: &TokenBatch, opts: &ForwardOptions) -> Result<StepOutput> {
        let (b, t) = (batch.batch, batch.seq);
        let n = self.n_specific();
        let intervene = |target: Target, state: Tensor| -> Result<Tensor> {
            match &opts.intervention {
                Some(iv) if iv.target == target => constant_state(&iv.value, &state),
                _ => Ok(state),
            }
        };
        if let Some(Intervention {
            target: Target::Specific(k),
            ..
        }) = &opts.intervention
        {
            if *k >= n {
                return Err(Error::Config(format!(
                    "intervention target spec{k} does not exist"
                )));
            }
        }

        let mut router_hidden = self.router.forward(&batch.tokens, b, t)?.last;
        if opts.fault_router_reads_specific {
            let leaked = intervene(
                Target::Specific(0),
                self.specific[0].forward(&batch.tokens, b, t)?.last,
            )?;
            router_hidden = router_hidden.add(&leaked)?;
        }
        let routing = self.codebook.route(&router_hidden, &batch.prompt_mask)?;

        let mut inv_hidden = self.invariant.forward(&batch.tokens, b, t)?;
        inv_hidden.last = intervene(Target::Invariant, inv_hidden.last)?;
        let inv_logits = self.invariant.lm_head(&inv_hidden.last)?;

        let groups: Vec<Vec<usize>> = if self.codebook.strategy.one_hot() {
            (0..n)
                .map(|k| (0..b).filter(|&r| routing.chosen[r] == k).collect())
                .collect()
        } else {
            vec![(0..b).collect(); n]
        };
        let mut specific = Vec::new();
        for (k, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let sub = batch.select(rows);
            let mut hidden = self.specific[k].forward(&sub.tokens, sub.batch, sub.seq)?;
            hidden.last = intervene(Target::Specific(k), hidden.last)?;
            let logits = self.specific[k].lm_head(&hidden.last)?;
            specific.push(SpecificRun {
                module: k,
                rows: rows.clone(),
                hidden,
                logits,
            });
        }

        let w_inv = self.aggregator.config.w_inv;
        let (logits, bn_stats, l_dom, spec_logits) = if self.codebook.strategy.one_hot() {
            // Reassemble per-row specific outputs in batch order.
            let order: Vec<usize> = specific
                .iter()
                .flat_map(|s| s.rows.iter().copied())
                .collect();
            let mut inverse = vec![0; b];
            for (pos, &row) in order.iter().enumerate() {
                inverse[row] = pos;
            }
            let gather = |parts: Vec<Tensor>| -> Result<Tensor> {
                Tensor::concat0(&parts)?.index_select0(&inverse)
            };
            let spec_last = gather(specific.iter().map(|s| s.hidden.last.clone()).collect())?;
            let spec_logits = gather(specific.iter().map(|s| s.logits.clone()).collect())?;
            let w_i = Tensor::full(&[b], w_inv);
            let w_s = Tensor::full(&[b], 1.0 - w_inv);
            let (logits, stats) = match self.aggregator.config.scheme {
                Scheme::SharedHead => self.aggregator.shared_head(
                    &inv_hidden.last,
                    &spec_last,
                    &batch.input_mask,
                    opts.train,
                )?,
                Scheme::LogitSpace => self.aggregator.logit_space(
                    &[inv_logits.clone(), spec_logits.clone()],
                    &[w_i, w_s],
                    &batch.input_mask,
                    opts.train,
                )?,
                Scheme::ProbSpace => (
                    self.aggregator
                        .prob_space(&[inv_logits.clone(), spec_logits.clone()], &[w_i, w_s])?,
                    None,
                ),
            };
            let l_dom = spec_logits.cross_entropy(&batch.targets, &batch.loss_mask)?;
            (logits, stats, l_dom, spec_logits)
        } else {
            let r = routing
                .weight_tensor
                .as_ref()
                .ok_or_else(|| Error::Routing("soft routing without weights".into()))?
                .transpose2()?;
            let col = |k: usize| -> Result<Tensor> { r.index_select0(&[k])?.reshape(&[b]) };
            let mut spec_w = Vec::with_capacity(n);
            for k in 0..n {
                spec_w.push(col(k)?.scale(1.0 - w_inv));
            }
            let (logits, stats) = match self.aggregator.config.scheme {
                Scheme::SharedHead => {
                    let mut mixed: Option<Tensor> = None;
                    for s in &specific {
                        let term = s.hidden.last.mul_prefix(&col(s.module)?)?;
                        mixed = Some(match mixed {
                            Some(acc) => acc.add(&term)?,
                            None => term,
                        });
                    }
                    let mixed =
                        mixed.ok_or_else(|| Error::Routing("no specific modules ran".into()))?;
                    self.aggregator.shared_head(
                        &inv_hidden.last,
                        &mixed,
                        &batch.input_mask,
                        opts.train,
                    )?
                }
                Scheme::LogitSpace | Scheme::ProbSpace => {
                    let mut all = vec![inv_logits.clone()];
                    let mut ws = vec![Tensor::full(&[b], w_inv)];
                    for s in &specific {
                        all.push(s.logits.clone());
                        ws.push(spec_w[s.module].clone());
                    }
                    if self.aggregator.config.scheme == Scheme::LogitSpace {
                        self.aggregator
                            .logit_space(&all, &ws, &batch.input_mask, opts.train)?
                    } else {
                        (self.aggregator.prob_space(&all, &ws)?, None)
                    }
                }
            };
            // Routing-weighted per-module cross-entropy.
            let denom: f64 = batch.loss_mask.iter().sum();
            let mut acc: Option<Tensor> = None;
            for s in &specific {
                let rows = s
                    .logits
                    .cross_entropy_rows(&batch.targets, &batch.loss_mask)?;
                let term = rows.mul(&col(s.module)?)?.sum();
                acc = Some(match acc {
                    Some(a) => a.add(&term)?,
                    None => term,
                });
            }
            let l_dom = acc
                .ok_or_else(|| Error::Routing("no specific modules ran".into()))?
                .scale(if denom > 0.0 { 1.0 / denom } else { 0.0 });
            // All modules ran on the full batch, in module order.
            let stacked = Tensor::concat0(
                &specific
                    .iter()
                    .map(|s| s.logits.clone())
                    .collect::<Vec<_>>(),
            )?;
            let pick: Vec<usize> = (0..b).map(|r| routing.chosen[r] * b + r).collect();
            (logits, stats, l_dom, stacked.index_select0(&pick)?)
        };

        let l_o = logits.cross_entropy(&batch.targets, &batch.loss_mask)?;
        let l_inv = inv_logits.cross_entropy(&batch.targets, &batch.loss_mask)?;

        let mut mi = vec![None; n];
        let mut l_i: Option<Tensor> = None;
        for s in &specific {
            let mask = masked_rows(&batch.input_mask, t, &s.rows);
            let inv_rows = inv_hidden.last.index_select0(&s.rows)?;
            let p_inv = conditional_distribution(&inv_rows.masked_mean(&mask)?)?;
            let p_spec = conditional_distribution(&s.hidden.last.masked_mean(&mask)?)?;
            let term = mi_tensor(&p_inv, &p_spec)?;
            mi[s.module] = Some(term.item());
            l_i = Some(match l_i {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let components = LossComponents {
            l_o,
            l_inv,
            l_dom,
            l_r: routing.loss.clone(),
            l_i: l_i.unwrap_or_else(|| Tensor::scalar(0.0)),
        };
        let total = total_loss(&components, &self.weights)?;
        Ok(StepOutput {
            logits,
            inv_logits,
            spec_logits,
            router_hidden,
            inv_hidden,
            specific,
            routing,
            components,
            mi,
            total,
            bn_stats,
        })
    }

    /// Fold training-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        if let Some(bn) = self.aggregator.bn.as_mut() {
            bn.update_running(stats);
        }
    }

    /// Every parameter in a fixed order, then the codebook and running
    /// statistics under reserved names.
    pub fn state_entries(&self) -> Vec<Entry> {
        let mut out: Vec<Entry> = self
            .params()
            .iter()
            .filter(|p| !p.name.starts_with("codebook."))
            .map(|p| p.to_entry())
            .collect();
        out.extend(self.codebook.to_entries());
        if let Some(bn) = &self.aggregator.bn {
            out.extend(bn.stat_entries());
        }
        out
    }

    /// Load values saved by [`IclmModel::state_entries`] into a model of
    /// identical architecture.
    pub fn load_state(&mut self, entries: &[Entry]) -> Result<()> {
        let by_name: HashMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let strategy = self.codebook.strategy;
        self.codebook = Codebook::from_entries(entries)?;
        if self.codebook.strategy != strategy || self.codebook.n() != self.n_specific() {
            return Err(Error::Checkpoint(
                "checkpoint codebook does not match the configured router".into(),
            ));
        }
        for p in self.params_mut() {
            if p.name.starts_with("codebook.") {
                continue;
            }
            let e = by_name.get(p.name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("parameter {} missing from checkpoint", p.name))
            })?;
            if e.shape != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    e.shape,
                    p.shape()
                )));
            }
            p.set_data(e.data.clone())?;
        }
        if let Some(bn) = self.aggregator.bn.as_mut() {
            let base = bn.gamma.name.trim_end_matches(".gamma").to_string();
            for (field, key) in [
                (&mut bn.running_mean, "running_mean"),
                (&mut bn.running_var, "running_var"),
            ] {
                let e = by_name
                    .get(format!("{base}.{key}").as_str())
                    .ok_or_else(|| {
                        Error::Checkpoint(format!("{base}.{key} missing from checkpoint"))
                    })?;
                if e.data.len() != field.len() {
                    return Err(Error::Checkpoint(format!(
                        "{base}.{key} has the wrong length"
                    )));
                }
                field.clone_from(&e.data);
            }
        }
        Ok(())
    }

    /// A copy backed by fresh tensors, so training or backpropagating
    /// through it never touches this model's gradient buffers.
    pub fn fresh_copy(&self) -> Result<IclmModel> {
        let mut m = self.clone();
        for p in m.params_mut() {
            p.set_data(p.data().to_vec())?;
        }
        Ok(m)
    }

    /// Parameter snapshot keyed by name, for exact before/after comparisons.
    pub fn snapshot(&self) -> HashMap<String, Vec<f64>> {
        self.params()
            .iter()
            .map(|p| (p.name.clone(), p.data().to_vec()))
            .collect()
    }
}

impl Module for IclmModel {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.router.params();
        out.push(&self.codebook.centroids);
        out.extend(self.invariant.params());
        for m in &self.specific {
            out.extend(m.params());
        }
        out.extend(self.aggregator.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.router.params_mut();
        out.push(&mut self.codebook.centroids);
        out.extend(self.invariant.params_mut());
        for m in &mut self.specific {
            out.extend(m.params_mut());
        }
        out.extend(self.aggregator.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_total() {
        let one = || Tensor::scalar(1.0);
        let c = LossComponents {
            l_o: one(),
            l_inv: one(),
            l_dom: one(),
            l_r: one(),
            l_i: one(),
        };
        let total = total_loss(&c, &LossWeights::default()).unwrap().item();
        assert!((total - 1.31).abs() < 1e-12);
    }

    #[test]
    fn targets_parse() {
        assert_eq!("inv".parse::<Target>().unwrap(), Target::Invariant);
        assert_eq!("spec3".parse::<Target>().unwrap(), Target::Specific(3));
        assert!("router".parse::<Target>().is_err());
    }
}
