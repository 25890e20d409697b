//! Layer-by-layer Pearson correlation between two modules' activations.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ModuleRef;
use crate::data::{Batcher, TaskInstance};
use crate::error::{Error, Result};
use crate::model::IclmModel;
use crate::tokenizer::Tokenizer;

/// How per-token activations are reduced before correlating.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// One scalar per input and layer: the mean over positions and features.
    #[default]
    MeanScalar,
    /// Per feature mean over positions; entries are the mean absolute
    /// correlation over features.
    PerFeatureAbs,
}

/// Pearson coefficient over paired samples; `None` when either side has
/// zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub module_a: ModuleRef,
    pub module_b: ModuleRef,
    pub pooling: Pooling,
    /// `values[i][j]`: layer `i` of module a against layer `j` of module b.
    pub values: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    /// Undefined entries are written as `NA`.
    pub fn to_csv(&self) -> String {
        let cols = self.values.first().map_or(0, Vec::len);
        let mut out = String::from("layer");
        for j in 0..cols {
            let _ = write!(out, ",{}_{j}", self.module_b);
        }
        out.push('\n');
        for (i, row) in self.values.iter().enumerate() {
            let _ = write!(out, "{}_{i}", self.module_a);
            for v in row {
                match v {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push_str(",NA"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Mean of the defined entries' absolute values.
    pub fn mean_abs(&self) -> Option<f64> {
        let vals: Vec<f64> = self
            .values
            .iter()
            .flatten()
            .flatten()
            .map(|v| v.abs())
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Per layer, per input pooled activations: `[layer][feature][sample]`.
fn pooled_layers(
    model: &IclmModel,
    who: ModuleRef,
    tok: &Tokenizer,
    data: &[TaskInstance],
    pooling: Pooling,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let module = who.module(model)?;
    let batcher = Batcher {
        tokenizer: tok,
        data,
        max_len: module.config.max_seq_len,
    };
    let d = module.config.d_model;
    let width = match pooling {
        Pooling::MeanScalar => 1,
        Pooling::PerFeatureAbs => d,
    };
    let mut out = vec![vec![Vec::with_capacity(data.len()); width]; module.config.n_layers + 1];
    for batch in batcher.sequential(32)? {
        let hidden = module.forward(&batch.tokens, batch.batch, batch.seq)?;
        for (l, layer) in hidden.layers.iter().enumerate() {
            let pooled = layer.masked_mean(&batch.input_mask)?;
            for row in pooled.data().chunks(d) {
                match pooling {
                    Pooling::MeanScalar => out[l][0].push(row.iter().sum::<f64>() / d as f64),
                    Pooling::PerFeatureAbs => {
                        for (k, &v) in row.iter().enumerate() {
                            out[l][k].push(v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Correlation between every layer of `a` and every layer of `b` over the
/// inputs in `data`, with both modules reading identical inputs.
pub fn pearson_layer_matrix(
    model: &IclmModel,
    a: ModuleRef,
    b: ModuleRef,
    tok: &Tokenizer,
    data: &[TaskInstance],
    pooling: Pooling,
) -> Result<CorrelationMatrix> {
    if data.len() < 2 {
        return Err(Error::Degenerate(
            "correlation needs at least two inputs".into(),
        ));
    }
    let la = pooled_layers(model, a, tok, data, pooling)?;
    let lb = if a == b {
        la.clone()
    } else {
        pooled_layers(model, b, tok, data, pooling)?
    };
    let values = la
        .iter()
        .map(|fa| {
            lb.iter()
                .map(|fb| {
                    let rs: Vec<f64> = fa
                        .iter()
                        .zip(fb)
                        .filter_map(|(x, y)| pearson(x, y))
                        .collect();
                    match pooling {
                        Pooling::MeanScalar => rs.first().copied(),
                        Pooling::PerFeatureAbs => (!rs.is_empty())
                            .then(|| rs.iter().map(|r| r.abs()).sum::<f64>() / rs.len() as f64),
                    }
                })
                .collect()
        })
        .collect();
    Ok(CorrelationMatrix {
        module_a: a,
        module_b: b,
        pooling,
        values,
    })
}
