use crate::error::{Error, Result};
use crate::rng::{permutation, stream};
use crate::tokenizer::{Tokenizer, EOA_ID, PAD_ID, SEP_ID};

use super::TaskInstance;

/// A right-padded batch of `prompt <sep> answer <eoa>` sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    /// `[batch, seq]` input ids.
    pub tokens: Vec<usize>,
    /// Next-token targets aligned with `tokens`.
    pub targets: Vec<usize>,
    /// 1 where the target is part of the answer (including `<eoa>`).
    pub loss_mask: Vec<f64>,
    /// 1 on every non-padding input position.
    pub input_mask: Vec<f64>,
    /// 1 on prompt positions and the separator; what the router sees.
    pub prompt_mask: Vec<f64>,
    /// `prompt <sep>` per row, the decoding context.
    pub prompts: Vec<Vec<usize>>,
    pub answers: Vec<Vec<usize>>,
    /// Dataset indices of the rows.
    pub indices: Vec<usize>,
}

impl TokenBatch {
    /// Tokenize and pad `items`; errors if a full sequence exceeds `max_len`.
    pub fn build(
        tok: &Tokenizer,
        items: &[&TaskInstance],
        indices: Vec<usize>,
        max_len: usize,
    ) -> Result<TokenBatch> {
        if items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut rows = Vec::with_capacity(items.len());
        let mut prompts = Vec::with_capacity(items.len());
        let mut answers = Vec::with_capacity(items.len());
        for it in items {
            let mut p = tok.encode(&it.prompt);
            p.push(SEP_ID);
            let a = tok.encode(&it.answer);
            let mut row = p.clone();
            row.extend(&a);
            row.push(EOA_ID);
            if row.len() > max_len {
                return Err(Error::Truncation {
                    len: row.len(),
                    max: max_len,
                });
            }
            rows.push(row);
            prompts.push(p);
            answers.push(a);
        }
        let batch = rows.len();
        let seq = rows.iter().map(Vec::len).max().unwrap();
        let mut tokens = vec![PAD_ID; batch * seq];
        let mut targets = vec![PAD_ID; batch * seq];
        let mut loss_mask = vec![0.0; batch * seq];
        let mut input_mask = vec![0.0; batch * seq];
        let mut prompt_mask = vec![0.0; batch * seq];
        for (b, row) in rows.iter().enumerate() {
            let plen = prompts[b].len();
            for (t, &id) in row.iter().enumerate() {
                let i = b * seq + t;
                tokens[i] = id;
                input_mask[i] = 1.0;
                if t < plen {
                    prompt_mask[i] = 1.0;
                }
                if t + 1 < row.len() {
                    targets[i] = row[t + 1];
                    if t + 1 >= plen {
                        loss_mask[i] = 1.0;
                    }
                }
            }
        }
        Ok(TokenBatch {
            batch,
            seq,
            tokens,
            targets,
            loss_mask,
            input_mask,
            prompt_mask,
            prompts,
            answers,
            indices,
        })
    }

    /// A loss-free batch over a decoding grid. The first `prompt_lens[r]`
    /// tokens of row `r` are its routable prompt.
    pub fn for_decoding(
        tokens: &[usize],
        batch: usize,
        seq: usize,
        lengths: &[usize],
        prompt_lens: &[usize],
    ) -> TokenBatch {
        let mut input_mask = vec![0.0; batch * seq];
        let mut prompt_mask = vec![0.0; batch * seq];
        for r in 0..batch {
            for t in 0..lengths[r] {
                input_mask[r * seq + t] = 1.0;
                if t < prompt_lens[r] {
                    prompt_mask[r * seq + t] = 1.0;
                }
            }
        }
        TokenBatch {
            batch,
            seq,
            tokens: tokens.to_vec(),
            targets: vec![PAD_ID; batch * seq],
            loss_mask: vec![0.0; batch * seq],
            input_mask,
            prompt_mask,
            prompts: (0..batch)
                .map(|r| tokens[r * seq..r * seq + prompt_lens[r]].to_vec())
                .collect(),
            answers: vec![Vec::new(); batch],
            indices: (0..batch).collect(),
        }
    }

    /// Rows of this batch as a new batch, re-padded to the same length.
    pub fn select(&self, rows: &[usize]) -> TokenBatch {
        let pick = |v: &[usize]| -> Vec<usize> {
            rows.iter()
                .flat_map(|&r| v[r * self.seq..(r + 1) * self.seq].iter().copied())
                .collect()
        };
        let pickf = |v: &[f64]| -> Vec<f64> {
            rows.iter()
                .flat_map(|&r| v[r * self.seq..(r + 1) * self.seq].iter().copied())
                .collect()
        };
        TokenBatch {
            batch: rows.len(),
            seq: self.seq,
            tokens: pick(&self.tokens),
            targets: pick(&self.targets),
            loss_mask: pickf(&self.loss_mask),
            input_mask: pickf(&self.input_mask),
            prompt_mask: pickf(&self.prompt_mask),
            prompts: rows.iter().map(|&r| self.prompts[r].clone()).collect(),
            answers: rows.iter().map(|&r| self.answers[r].clone()).collect(),
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
        }
    }
}

/// A batch whose loss covers every next-token prediction, for
/// language-model pretraining.
pub fn lm_batch(tok: &Tokenizer, items: &[&TaskInstance], max_len: usize) -> Result<TokenBatch> {
    let mut b = TokenBatch::build(tok, items, (0..items.len()).collect(), max_len)?;
    for i in 0..b.tokens.len() {
        let t = i % b.seq;
        let row = i / b.seq;
        let len = b.input_mask[row * b.seq..(row + 1) * b.seq]
            .iter()
            .filter(|m| **m > 0.0)
            .count();
        b.loss_mask[i] = if t + 1 < len { 1.0 } else { 0.0 };
    }
    Ok(b)
}

/// Index order for one epoch: a seeded shuffle, chunked with the final
/// short batch kept.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let order = permutation(&mut stream(seed, &format!("shuffle/{epoch}")), n);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Tokenizes dataset slices into batches.
#[derive(Clone, Debug)]
pub struct Batcher<'a> {
    pub tokenizer: &'a Tokenizer,
    pub data: &'a [TaskInstance],
    pub max_len: usize,
}

impl Batcher<'_> {
    pub fn batch(&self, indices: &[usize]) -> Result<TokenBatch> {
        let items: Vec<&TaskInstance> = indices.iter().map(|&i| &self.data[i]).collect();
        TokenBatch::build(self.tokenizer, &items, indices.to_vec(), self.max_len)
    }

    /// Fixed-order batches covering the dataset, for evaluation.
    pub fn sequential(&self, batch_size: usize) -> Result<Vec<TokenBatch>> {
        let idx: Vec<usize> = (0..self.data.len()).collect();
        idx.chunks(batch_size.max(1))
            .map(|c| self.batch(c))
            .collect()
    }
}
