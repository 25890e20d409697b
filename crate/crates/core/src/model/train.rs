//! Training loops: LM pretraining, ICLM fine-tuning, sequential two-phase
//! training and the dense baseline.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ForwardOptions, IclmModel, LossComponents};
use crate::data::{batch_iter, lm_batch, Batcher, TaskInstance};
use crate::error::{Error, Result};
use crate::lm::LmModule;
use crate::mi::clamp_report;
use crate::nn::Module;
use crate::optim::{AdamW, AdamWConfig};
use crate::tokenizer::Tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            seed: crate::rng::DEFAULT_SEED,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("optimizer.lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub epoch: usize,
    pub phase: String,
    pub total: f64,
    /// `L_o, L_inv, L_dom, L_R, L_I`.
    pub components: [f64; 5],
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiRow {
    pub step: usize,
    pub module: usize,
    pub value: f64,
}

/// Everything a training run records, step by step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub metrics: Vec<MetricRow>,
    pub mi: Vec<MiRow>,
    /// Per phase, how many inputs each specific module processed.
    pub activations: Vec<(String, Vec<usize>)>,
}

fn fmt_f64(v: f64) -> String {
    // Shortest round-trip representation keeps the CSV exact.
    format!("{v:e}")
}

impl TrainLog {
    pub fn steps(&self) -> usize {
        self.metrics.len()
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("step,epoch,phase,L_total,L_o,L_inv,L_dom,L_R,L_I\n");
        for r in &self.metrics {
            let _ = write!(
                out,
                "{},{},{},{}",
                r.step,
                r.epoch,
                r.phase,
                fmt_f64(r.total)
            );
            for c in r.components {
                let _ = write!(out, ",{}", fmt_f64(c));
            }
            out.push('\n');
        }
        out
    }

    pub fn mi_csv(&self) -> String {
        let mut out = String::from("step,pair,value\n");
        for r in &self.mi {
            let _ = writeln!(out, "{},inv-spec{},{}", r.step, r.module, fmt_f64(r.value));
        }
        out
    }

    /// Mean of one loss component over a phase's final `window` steps.
    pub fn tail_mean(&self, component: usize, window: usize) -> Option<f64> {
        let n = self.metrics.len();
        if n == 0 || window == 0 {
            return None;
        }
        let rows = &self.metrics[n.saturating_sub(window)..];
        Some(rows.iter().map(|r| r.components[component]).sum::<f64>() / rows.len() as f64)
    }

    pub fn activations_in(&self, phase: &str) -> Option<&[usize]> {
        self.activations
            .iter()
            .find(|(p, _)| p == phase)
            .map(|(_, a)| a.as_slice())
    }
}

fn check_finite(step: usize, total: f64, c: &LossComponents) -> Result<()> {
    for (v, name) in c.values().into_iter().zip(LossComponents::NAMES) {
        if !v.is_finite() {
            return Err(Error::Divergence {
                step,
                component: name.to_string(),
            });
        }
    }
    if !total.is_finite() {
        return Err(Error::Divergence {
            step,
            component: "L_total".into(),
        });
    }
    Ok(())
}

/// Fine-tune the composed model on `data`. `on_epoch` runs after every
/// epoch (checkpointing, alignment probes).
pub fn train<F>(
    model: &mut IclmModel,
    tok: &Tokenizer,
    data: &[TaskInstance],
    cfg: &TrainConfig,
    phase: &str,
    log: &mut TrainLog,
    mut on_epoch: F,
) -> Result<()>
where
    F: FnMut(usize, &IclmModel) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let batcher = Batcher {
        tokenizer: tok,
        data,
        max_len: model.invariant.config.max_seq_len,
    };
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut counts = vec![0; model.n_specific()];
    let opts = ForwardOptions {
        train: true,
        ..Default::default()
    };
    for epoch in 0..cfg.epochs {
        for idx in batch_iter(data.len(), cfg.batch_size, cfg.seed, epoch) {
            let step = log.metrics.len() + 1;
            let batch = batcher.batch(&idx)?;
            model.clear_grads();
            let out = model.forward(&batch, &opts)?;
            let total = out.total.item();
            check_finite(step, total, &out.components)?;
            out.total.backward()?;
            if let Some(stats) = &out.bn_stats {
                model.update_running_stats(stats);
            }
            opt.step(model.params_mut())?;
            model.clear_grads();
            for run in &out.specific {
                counts[run.module] += run.rows.len();
            }
            log.metrics.push(MetricRow {
                step,
                epoch,
                phase: phase.to_string(),
                total,
                components: out.components.values(),
            });
            for (module, v) in out.mi.iter().enumerate() {
                if let Some(v) = v {
                    log.mi.push(MiRow {
                        step,
                        module,
                        value: clamp_report(*v),
                    });
                }
            }
        }
        on_epoch(epoch, model)?;
    }
    log.activations.push((phase.to_string(), counts));
    Ok(())
}

/// Outcome of two-phase training.
#[derive(Clone, Debug)]
pub struct SequentialReport {
    /// Parameters right after phase A.
    pub phase_a: HashMap<String, Vec<f64>>,
    /// Specific modules that phase B never routed an input to.
    pub idle_in_b: Vec<usize>,
    /// Of those, the ones whose parameters differ from phase A (should be
    /// empty).
    pub changed: Vec<usize>,
}

/// Train on `a`, snapshot, then train on `b`. `on_epoch` receives the
/// phase name (`"A"` or `"B"`) with each epoch.
pub fn train_sequential<F>(
    model: &mut IclmModel,
    tok: &Tokenizer,
    a: &[TaskInstance],
    b: &[TaskInstance],
    cfg: &TrainConfig,
    log: &mut TrainLog,
    mut on_epoch: F,
) -> Result<SequentialReport>
where
    F: FnMut(&str, usize, &IclmModel) -> Result<()>,
{
    train(model, tok, a, cfg, "A", log, |e, m| on_epoch("A", e, m))?;
    let phase_a = model.snapshot();
    train(model, tok, b, cfg, "B", log, |e, m| on_epoch("B", e, m))?;
    let counts_b = log.activations_in("B").expect("phase B recorded").to_vec();
    let idle_in_b: Vec<usize> = (0..model.n_specific())
        .filter(|&k| counts_b[k] == 0)
        .collect();
    let changed = idle_in_b
        .iter()
        .copied()
        .filter(|&k| {
            model.specific[k]
                .params()
                .iter()
                .any(|p| phase_a.get(&p.name).map(Vec::as_slice) != Some(p.data()))
        })
        .collect();
    Ok(SequentialReport {
        phase_a,
        idle_in_b,
        changed,
    })
}

/// Next-token pretraining of a single language model. Returns the mean
/// loss of each epoch.
pub fn pretrain_lm(
    module: &mut LmModule,
    tok: &Tokenizer,
    corpus: &[TaskInstance],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    fit_lm(module, tok, corpus, cfg, true)
}

/// Supervised fine-tuning of a single language model on answers only: the
/// dense baseline.
pub fn train_dense(
    module: &mut LmModule,
    tok: &Tokenizer,
    data: &[TaskInstance],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    fit_lm(module, tok, data, cfg, false)
}

fn fit_lm(
    module: &mut LmModule,
    tok: &Tokenizer,
    data: &[TaskInstance],
    cfg: &TrainConfig,
    all_tokens: bool,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let max_len = module.config.max_seq_len;
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut n = 0;
        for idx in batch_iter(data.len(), cfg.batch_size, cfg.seed, epoch) {
            step += 1;
            let items: Vec<&TaskInstance> = idx.iter().map(|&i| &data[i]).collect();
            let batch = if all_tokens {
                lm_batch(tok, &items, max_len)?
            } else {
                crate::data::TokenBatch::build(tok, &items, idx.clone(), max_len)?
            };
            module.clear_grads();
            let loss = module
                .logits(&batch.tokens, batch.batch, batch.seq)?
                .cross_entropy(&batch.targets, &batch.loss_mask)?;
            let v = loss.item();
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step,
                    component: "L_lm".into(),
                });
            }
            loss.backward()?;
            opt.step(module.params_mut())?;
            module.clear_grads();
            sum += v;
            n += 1;
        }
        epoch_losses.push(sum / n as f64);
    }
    Ok(epoch_losses)
}
