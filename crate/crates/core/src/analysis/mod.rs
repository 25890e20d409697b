//! Post-hoc diagnostics: correlations, inference-time MI, router alignment,
//! 2-D projections and causal audits.

pub mod audit;
pub mod correlation;
pub mod projection;

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::data::{Batcher, TaskInstance};
use crate::error::{Error, Result};
use crate::lm::LmModule;
use crate::mi::{clamp_report, mi_estimate, rows};
use crate::model::{ForwardOptions, IclmModel};
use crate::tokenizer::Tokenizer;

pub use audit::{
    grad_isolation_audit, intervention_audit, two_step_probe, AuditCheck, AuditReport,
};
pub use correlation::{pearson, pearson_layer_matrix, CorrelationMatrix, Pooling};
pub use projection::{mds_project_2d, ProjectionSet};

/// Names one of the model's language-model modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModuleRef {
    Router,
    Invariant,
    Specific(usize),
}

impl ModuleRef {
    pub fn module(self, model: &IclmModel) -> Result<&LmModule> {
        match self {
            ModuleRef::Router => Ok(&model.router),
            ModuleRef::Invariant => Ok(&model.invariant),
            ModuleRef::Specific(n) => model
                .specific
                .get(n)
                .ok_or_else(|| Error::Config(format!("no specific module {n}"))),
        }
    }
}

impl fmt::Display for ModuleRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModuleRef::Router => f.write_str("router"),
            ModuleRef::Invariant => f.write_str("inv"),
            ModuleRef::Specific(n) => write!(f, "spec{n}"),
        }
    }
}

impl FromStr for ModuleRef {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "router" => Ok(ModuleRef::Router),
            "inv" | "invariant" => Ok(ModuleRef::Invariant),
            _ => s
                .strip_prefix("spec")
                .and_then(|n| n.parse().ok())
                .map(ModuleRef::Specific)
                .ok_or_else(|| Error::Config(format!("unknown module `{s}`"))),
        }
    }
}

/// Inference-time MI between the invariant module and one specific module.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceMi {
    pub module: usize,
    /// Mean over batches in which the module was active.
    pub value: f64,
    pub batches: usize,
    /// Batches where the module saw a single input, whose estimate is 0 by
    /// construction.
    pub degenerate_batches: usize,
}

/// MI between invariant and specific final states on evaluation batches,
/// pairing each specific module with the rows routed to it.
pub fn inference_mi(
    model: &IclmModel,
    tok: &Tokenizer,
    data: &[TaskInstance],
    batch_size: usize,
) -> Result<Vec<InferenceMi>> {
    let batcher = Batcher {
        tokenizer: tok,
        data,
        max_len: model.invariant.config.max_seq_len,
    };
    let n = model.n_specific();
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    let mut degenerate = vec![0usize; n];
    for batch in batcher.sequential(batch_size)? {
        let out = model.forward(&batch, &ForwardOptions::default())?;
        for run in &out.specific {
            let mask: Vec<f64> = run
                .rows
                .iter()
                .flat_map(|&r| {
                    batch.input_mask[r * batch.seq..(r + 1) * batch.seq]
                        .iter()
                        .copied()
                })
                .collect();
            let inv = out
                .inv_hidden
                .last
                .index_select0(&run.rows)?
                .masked_mean(&mask)?
                .softmax(1)?;
            let spec = run.hidden.last.masked_mean(&mask)?.softmax(1)?;
            let est = mi_estimate(&rows(&inv), &rows(&spec))?;
            sums[run.module] += clamp_report(est.value);
            counts[run.module] += 1;
            if est.batch_size == 1 {
                degenerate[run.module] += 1;
            }
        }
    }
    Ok((0..n)
        .map(|k| InferenceMi {
            module: k,
            value: if counts[k] > 0 {
                sums[k] / counts[k] as f64
            } else {
                0.0
            },
            batches: counts[k],
            degenerate_batches: degenerate[k],
        })
        .collect())
}

pub fn inference_mi_csv(rows: &[InferenceMi]) -> String {
    let mut out = String::from("pair,value,batches,degenerate_batches\n");
    for r in rows {
        let _ = writeln!(
            out,
            "inv-spec{},{},{},{}",
            r.module, r.value, r.batches, r.degenerate_batches
        );
    }
    out
}

/// Share of each label's inputs routed to each module.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentTable {
    pub labels: Vec<String>,
    /// `cells[module][label]`.
    pub cells: Vec<Vec<f64>>,
    /// Set under soft routing, where cells are mean routing weights rather
    /// than activation counts.
    pub expected_weights: bool,
}

impl AlignmentTable {
    /// Largest cell in each label column.
    pub fn column_max(&self) -> Vec<f64> {
        (0..self.labels.len())
            .map(|j| {
                self.cells
                    .iter()
                    .map(|row| row[j])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    /// Module holding the majority of each label's inputs.
    pub fn majority_module(&self) -> Vec<usize> {
        (0..self.labels.len())
            .map(|j| {
                let col: Vec<f64> = self.cells.iter().map(|row| row[j]).collect();
                crate::lm::argmax(&col)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("module");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (k, row) in self.cells.iter().enumerate() {
            let _ = write!(out, "spec{k}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Route every input and tabulate modules against `label(instance)`.
pub fn alignment_table_by<F>(
    model: &IclmModel,
    tok: &Tokenizer,
    data: &[TaskInstance],
    label: F,
) -> Result<AlignmentTable>
where
    F: Fn(&TaskInstance) -> String,
{
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batcher = Batcher {
        tokenizer: tok,
        data,
        max_len: model.router.config.max_seq_len,
    };
    let n = model.n_specific();
    let mut by_label: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for batch in batcher.sequential(64)? {
        let hidden = model
            .router
            .forward(&batch.tokens, batch.batch, batch.seq)?
            .last;
        let routing = model.codebook.route(&hidden, &batch.prompt_mask)?;
        for (r, &idx) in batch.indices.iter().enumerate() {
            let entry = by_label
                .entry(label(&data[idx]))
                .or_insert_with(|| (vec![0.0; n], 0));
            for k in 0..n {
                entry.0[k] += routing.weights[r][k];
            }
            entry.1 += 1;
        }
    }
    let labels: Vec<String> = by_label.keys().cloned().collect();
    let cells = (0..n)
        .map(|k| by_label.values().map(|(w, c)| w[k] / *c as f64).collect())
        .collect();
    Ok(AlignmentTable {
        labels,
        cells,
        expected_weights: !model.codebook.strategy.one_hot(),
    })
}

/// Alignment against the instances' own `format/split` (or
/// `family/format/split`) labels.
pub fn alignment_table(
    model: &IclmModel,
    tok: &Tokenizer,
    data: &[TaskInstance],
) -> Result<AlignmentTable> {
    alignment_table_by(model, tok, data, TaskInstance::label)
}
