//! Structural causal audits.
//!
//! The checks here are exact: they compare bits, not values within a
//! tolerance, since they test facts about the computation graph.

use serde::{Deserialize, Serialize};

use crate::data::{Batcher, TaskInstance, TokenBatch};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, IclmModel, Intervention, StepOutput, Target};
use crate::nn::{Module, Param};
use crate::optim::sgd_step;
use crate::router::Strategy;
use crate::tokenizer::Tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl AuditCheck {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> AuditCheck {
        AuditCheck {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Outcome of an audit run and the files it wrote.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checks: Vec<AuditCheck>,
    pub files: Vec<String>,
}

impl AuditReport {
    pub fn failures(&self) -> Vec<&AuditCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,passed,detail\n");
        for c in &self.checks {
            out.push_str(&format!(
                "{},{},{}\n",
                c.name,
                c.passed,
                c.detail.replace(',', ";")
            ));
        }
        out
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Result of one do-intervention compared with the unmodified forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionReport {
    pub target: Target,
    /// Largest change in any router state.
    pub router_max_diff: f64,
    pub router_identical: bool,
    pub routes_identical: bool,
    /// Largest change in the invariant state; only measured when a specific
    /// module is the target.
    pub invariant_max_diff: Option<f64>,
    pub invariant_identical: Option<bool>,
}

impl InterventionReport {
    pub fn passed(&self) -> bool {
        self.router_identical && self.routes_identical && self.invariant_identical.unwrap_or(true)
    }
}

/// Apply `do(target := value)` to one forward pass and compare router states
/// (and, for specific targets, invariant states) with the plain pass.
/// `opts` carries everything except the intervention.
pub fn intervention_audit(
    model: &IclmModel,
    batch: &TokenBatch,
    target: Target,
    value: &[f64],
    opts: &ForwardOptions,
) -> Result<InterventionReport> {
    let plain = model.forward(
        batch,
        &ForwardOptions {
            intervention: None,
            ..opts.clone()
        },
    )?;
    let forced = model.forward(
        batch,
        &ForwardOptions {
            intervention: Some(Intervention {
                target,
                value: value.to_vec(),
            }),
            ..opts.clone()
        },
    )?;
    let (ra, rb) = (plain.router_hidden.data(), forced.router_hidden.data());
    let (invariant_max_diff, invariant_identical) = match target {
        Target::Specific(_) => {
            let (a, b) = (plain.inv_hidden.last.data(), forced.inv_hidden.last.data());
            (Some(max_abs_diff(a, b)), Some(bits_equal(a, b)))
        }
        Target::Invariant => (None, None),
    };
    Ok(InterventionReport {
        target,
        router_max_diff: max_abs_diff(ra, rb),
        router_identical: bits_equal(ra, rb),
        routes_identical: plain.routing.chosen == forced.routing.chosen
            && plain.routing.weights == forced.routing.weights,
        invariant_max_diff,
        invariant_identical,
    })
}

/// Fixed intervention values for a target: the zero vector and the mean
/// final state of the target module over `data`.
pub fn intervention_values(
    model: &IclmModel,
    tok: &Tokenizer,
    data: &[TaskInstance],
    target: Target,
) -> Result<Vec<(String, Vec<f64>)>> {
    let module = match target {
        Target::Invariant => &model.invariant,
        Target::Specific(k) => model
            .specific
            .get(k)
            .ok_or_else(|| Error::Config(format!("intervention target spec{k} does not exist")))?,
    };
    let d = module.config.d_model;
    let batcher = Batcher {
        tokenizer: tok,
        data,
        max_len: module.config.max_seq_len,
    };
    let mut sum = vec![0.0; d];
    let mut count = 0.0;
    for batch in batcher.sequential(32)? {
        let last = module.forward(&batch.tokens, batch.batch, batch.seq)?.last;
        for (row, &m) in last.data().chunks(d).zip(&batch.input_mask) {
            if m > 0.0 {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
                count += 1.0;
            }
        }
    }
    if count == 0.0 {
        return Err(Error::EmptyDataset);
    }
    Ok(vec![
        ("zero".into(), vec![0.0; d]),
        ("mean".into(), sum.into_iter().map(|s| s / count).collect()),
    ])
}

fn probe_state(out: &StepOutput, target: Target) -> Vec<f64> {
    match target {
        Target::Invariant => out
            .specific
            .iter()
            .flat_map(|r| r.hidden.last.data().iter().copied())
            .collect(),
        Target::Specific(_) => out.inv_hidden.last.data().to_vec(),
    }
}

/// Cross-step dependence probe.
///
/// Two copies of the model take one SGD step (fixed `lr`) on `step_tau`,
/// one of them under `do(target := value)`; both then run `step_next`
/// without intervention. Returns the L2 distance between the copies' states
/// of the module(s) on the other side of the target: specific states for an
/// invariant target, the invariant state for a specific target.
pub fn two_step_probe(
    model: &IclmModel,
    step_tau: &TokenBatch,
    step_next: &TokenBatch,
    target: Target,
    value: &[f64],
    lr: f64,
) -> Result<f64> {
    let mut states = Vec::with_capacity(2);
    for intervene in [false, true] {
        let mut m = model.fresh_copy()?;
        let opts = ForwardOptions {
            train: true,
            intervention: intervene.then(|| Intervention {
                target,
                value: value.to_vec(),
            }),
            ..Default::default()
        };
        m.forward(step_tau, &opts)?.total.backward()?;
        sgd_step(m.params_mut(), lr)?;
        m.clear_grads();
        let next = m.forward(
            step_next,
            &ForwardOptions {
                train: true,
                ..Default::default()
            },
        )?;
        let rows: Vec<Vec<usize>> = next.specific.iter().map(|r| r.rows.clone()).collect();
        states.push((probe_state(&next, target), rows));
    }
    let (a, ra) = &states[0];
    let (b, rb) = &states[1];
    if ra != rb || a.len() != b.len() {
        return Err(Error::Audit("routing changed between probe copies".into()));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

fn all_zero(params: &[&Param]) -> bool {
    params
        .iter()
        .all(|p| p.grad().is_none_or(|g| g.iter().all(|&x| x == 0.0)))
}

fn grads(params: &[&Param]) -> Vec<Option<Vec<f64>>> {
    params.iter().map(|p| p.grad()).collect()
}

/// One backward pass on `batch`, then exact checks that inactive specific
/// modules and (with `gamma = 0`) the router received no gradient, and that
/// under vq the router's gradient is that of `gamma * L_R` alone.
pub fn grad_isolation_audit(
    model: &IclmModel,
    batch: &TokenBatch,
    opts: &ForwardOptions,
) -> Result<Vec<AuditCheck>> {
    let opts = ForwardOptions {
        train: true,
        intervention: None,
        ..opts.clone()
    };
    let mut checks = Vec::new();

    let m = model.fresh_copy()?;
    let out = m.forward(batch, &opts)?;
    out.total.backward()?;
    let active: Vec<usize> = out.specific.iter().map(|r| r.module).collect();
    for (k, module) in m.specific.iter().enumerate() {
        if active.contains(&k) {
            continue;
        }
        let ok = all_zero(&module.params());
        checks.push(AuditCheck::new(
            format!("grad_isolation.spec{k}"),
            ok,
            if ok {
                "inactive module has zero gradient"
            } else {
                "inactive module received gradient"
            },
        ));
    }

    let mut no_router = model.fresh_copy()?;
    no_router.weights.gamma = 0.0;
    no_router.forward(batch, &opts)?.total.backward()?;
    let ok = all_zero(&no_router.router.params());
    checks.push(AuditCheck::new(
        "grad_isolation.router_gamma0",
        ok,
        if ok {
            "router gradient is zero with gamma = 0"
        } else {
            "router received gradient with gamma = 0"
        },
    ));

    if model.codebook.strategy == Strategy::Vq && model.weights.gamma > 0.0 {
        let full = grads(&m.router.params());
        let alone = model.fresh_copy()?;
        let out = alone.forward(batch, &opts)?;
        out.components.l_r.scale(model.weights.gamma).backward()?;
        let only = grads(&alone.router.params());
        let ok = full.iter().zip(&only).all(|(a, b)| match (a, b) {
            (Some(a), Some(b)) => bits_equal(a, b),
            (None, None) => true,
            _ => false,
        });
        checks.push(AuditCheck::new(
            "grad_isolation.router_only_from_routing_loss",
            ok,
            if ok {
                "router gradient equals that of gamma * L_R"
            } else {
                "router gradient has contributions beyond gamma * L_R"
            },
        ));
    }
    Ok(checks)
}

/// Audit checks for every intervention target and value on one batch.
pub fn intervention_checks(
    model: &IclmModel,
    tok: &Tokenizer,
    data: &[TaskInstance],
    batch: &TokenBatch,
    opts: &ForwardOptions,
) -> Result<(Vec<AuditCheck>, Vec<(Target, String, InterventionReport)>)> {
    let mut targets = vec![Target::Invariant];
    targets.extend((0..model.n_specific()).map(Target::Specific));
    let mut checks = Vec::new();
    let mut reports = Vec::new();
    for target in targets {
        for (name, value) in intervention_values(model, tok, data, target)? {
            let r = intervention_audit(model, batch, target, &value, opts)?;
            let label = match target {
                Target::Invariant => "inv".to_string(),
                Target::Specific(k) => format!("spec{k}"),
            };
            checks.push(AuditCheck::new(
                format!("intervention.{label}.{name}.router"),
                r.router_identical && r.routes_identical,
                format!("router max abs diff {}", r.router_max_diff),
            ));
            if let Some(same) = r.invariant_identical {
                checks.push(AuditCheck::new(
                    format!("intervention.{label}.{name}.invariant"),
                    same,
                    format!(
                        "invariant max abs diff {}",
                        r.invariant_max_diff.unwrap_or(0.0)
                    ),
                ));
            }
            reports.push((target, name, r));
        }
    }
    Ok((checks, reports))
}
