//! Exact-match accuracy of greedy decoding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ForwardOptions, IclmModel};
use crate::data::{TaskInstance, TokenBatch};
use crate::error::{Error, Result};
use crate::lm::{generate_greedy, DecodeGrid, LmModule};
use crate::tensor::Tensor;
use crate::tokenizer::{Tokenizer, EOA_ID, PAD_ID, SEP_ID};

/// Which output an evaluation decodes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// The aggregated output.
    Combined,
    /// The invariant module's own head.
    InvariantOnly,
    /// The router-selected specific module's own head.
    SpecificOnly,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [
        EvalMode::Combined,
        EvalMode::InvariantOnly,
        EvalMode::SpecificOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Combined => "combined",
            EvalMode::InvariantOnly => "invariant-only",
            EvalMode::SpecificOnly => "specific-only",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown eval mode `{s}`")))
    }
}

/// Fraction of predictions equal to their gold answer.
pub fn exact_match(predictions: &[Vec<usize>], answers: &[Vec<usize>]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if predictions.len() != answers.len() {
        return Err(Error::Pairing {
            left: predictions.len(),
            right: answers.len(),
        });
    }
    let hits = predictions
        .iter()
        .zip(answers)
        .filter(|(p, a)| p == a)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Greedily decode an answer for every item. `next_logits` gets the
/// decoding grid plus each row's prompt length.
pub fn decode_answers<F>(
    tok: &Tokenizer,
    data: &[TaskInstance],
    batch_size: usize,
    max_seq_len: usize,
    mut next_logits: F,
) -> Result<Vec<Vec<usize>>>
where
    F: FnMut(DecodeGrid<'_>, &[usize]) -> Result<Tensor>,
{
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let prompts: Vec<Vec<usize>> = chunk
            .iter()
            .map(|it| {
                let mut p = tok.encode(&it.prompt);
                p.push(SEP_ID);
                p
            })
            .collect();
        let longest = prompts.iter().map(Vec::len).max().unwrap();
        let answer_room = chunk
            .iter()
            .map(|it| tok.encode(&it.answer).len())
            .max()
            .unwrap()
            + 1;
        if longest >= max_seq_len {
            return Err(Error::Truncation {
                len: longest + 1,
                max: max_seq_len,
            });
        }
        let max_new = answer_room.min(max_seq_len - longest);
        let plens: Vec<usize> = prompts.iter().map(Vec::len).collect();
        let decoded = generate_greedy(&prompts, max_new, EOA_ID, PAD_ID, |grid| {
            let rows: Vec<usize> = grid.rows.iter().map(|&r| plens[r]).collect();
            next_logits(grid, &rows)
        })?;
        out.extend(decoded);
    }
    Ok(out)
}

fn gold(tok: &Tokenizer, data: &[TaskInstance]) -> Vec<Vec<usize>> {
    data.iter().map(|it| tok.encode(&it.answer)).collect()
}

/// Decode with the composed model in the given mode.
pub fn predict(
    model: &IclmModel,
    tok: &Tokenizer,
    data: &[TaskInstance],
    mode: EvalMode,
    batch_size: usize,
) -> Result<Vec<Vec<usize>>> {
    let opts = ForwardOptions::default();
    decode_answers(
        tok,
        data,
        batch_size,
        model.invariant.config.max_seq_len,
        |g, plens| {
            let batch = TokenBatch::for_decoding(g.tokens, g.batch, g.seq, g.lengths, plens);
            let out = model.forward(&batch, &opts)?;
            Ok(match mode {
                EvalMode::Combined => out.logits,
                EvalMode::InvariantOnly => out.inv_logits,
                EvalMode::SpecificOnly => out.spec_logits,
            })
        },
    )
}

pub fn evaluate_accuracy(
    model: &IclmModel,
    tok: &Tokenizer,
    data: &[TaskInstance],
    mode: EvalMode,
    batch_size: usize,
) -> Result<f64> {
    let preds = predict(model, tok, data, mode, batch_size)?;
    exact_match(&preds, &gold(tok, data))
}

/// Accuracy of a single language model with its own head.
pub fn evaluate_lm(
    module: &LmModule,
    tok: &Tokenizer,
    data: &[TaskInstance],
    batch_size: usize,
) -> Result<f64> {
    let preds = decode_answers(tok, data, batch_size, module.config.max_seq_len, |g, _| {
        module.logits(g.tokens, g.batch, g.seq)
    })?;
    exact_match(&preds, &gold(tok, data))
}
