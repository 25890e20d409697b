//! Tiny decoder-only transformer language model.
//!
//! Pre-norm blocks (attention, then a GELU MLP), learned positional
//! embeddings, a final layer norm, and an optional untied output head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Module, Param};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub has_lm_head: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 64,
            max_seq_len: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            has_lm_head: true,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.max_seq_len < 1 {
            return Err(Error::Config("max_seq_len must be >= 1".into()));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(prefix: &str, d: usize, n_layers: usize, rng: &mut ChaCha8Rng) -> Result<Block> {
        let resid_std = INIT_STD / (2.0 * n_layers as f64).sqrt();
        Ok(Block {
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), d)?,
            qkv: Linear::new(&format!("{prefix}.attn.qkv"), d, 3 * d, INIT_STD, rng)?,
            proj: Linear::new(&format!("{prefix}.attn.proj"), d, d, resid_std, rng)?,
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), d)?,
            fc1: Linear::new(&format!("{prefix}.mlp.fc1"), d, 4 * d, INIT_STD, rng)?,
            fc2: Linear::new(&format!("{prefix}.mlp.fc2"), 4 * d, d, resid_std, rng)?,
        })
    }

    fn attention(&self, x: &Tensor, heads: usize) -> Result<Tensor> {
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let dh = d / heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape(&[b, t, 3, heads, dh])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part =
            |i: usize| -> Result<Tensor> { qkv.index_select0(&[i])?.reshape(&[b * heads, t, dh]) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scores = q.bmm(&k, true)?.scale(1.0 / (dh as f64).sqrt());
        let att = scores.causal_softmax()?;
        let ctx = att
            .bmm(&v, false)?
            .reshape(&[b, heads, t, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, d])?;
        self.proj.forward(&ctx)
    }

    fn forward(&self, x: &Tensor, heads: usize) -> Result<Tensor> {
        let h = x.add(&self.attention(&self.ln1.forward(x)?, heads)?)?;
        let m = self
            .fc2
            .forward(&self.fc1.forward(&self.ln2.forward(&h)?)?.gelu())?;
        h.add(&m)
    }

    fn params(&self) -> Vec<&Param> {
        [
            &self.ln1 as &dyn Module,
            &self.qkv,
            &self.proj,
            &self.ln2,
            &self.fc1,
            &self.fc2,
        ]
        .into_iter()
        .flat_map(|m| m.params())
        .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        out.extend(self.ln1.params_mut());
        out.extend(self.qkv.params_mut());
        out.extend(self.proj.params_mut());
        out.extend(self.ln2.params_mut());
        out.extend(self.fc1.params_mut());
        out.extend(self.fc2.params_mut());
        out
    }
}

/// Activations of one forward pass.
#[derive(Clone, Debug)]
pub struct HiddenStates {
    /// Embedding output followed by each block's output, each `[B, T, d_model]`.
    pub layers: Vec<Tensor>,
    /// Final hidden state after the closing layer norm.
    pub last: Tensor,
}

#[derive(Clone, Debug)]
pub struct LmModule {
    pub config: LmConfig,
    pub name: String,
    tok_emb: Param,
    pos_emb: Param,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Option<Linear>,
}

impl LmModule {
    pub fn new(name: &str, config: LmConfig, rng: &mut ChaCha8Rng) -> Result<LmModule> {
        config.validate()?;
        let d = config.d_model;
        let tok_emb = Param::normal(
            format!("{name}.tok_emb"),
            &[config.vocab_size, d],
            INIT_STD,
            rng,
        )?;
        let pos_emb = Param::normal(
            format!("{name}.pos_emb"),
            &[config.max_seq_len, d],
            INIT_STD,
            rng,
        )?;
        let blocks = (0..config.n_layers)
            .map(|i| Block::new(&format!("{name}.block{i}"), d, config.n_layers, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&format!("{name}.ln_f"), d)?;
        let head = if config.has_lm_head {
            Some(Linear::new(
                &format!("{name}.head"),
                d,
                config.vocab_size,
                INIT_STD,
                rng,
            )?)
        } else {
            None
        };
        Ok(LmModule {
            config,
            name: name.to_string(),
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    /// Copy of this module under a new name prefix, optionally dropping or
    /// adding the output head. A copied head keeps its weights.
    pub fn clone_as(&self, name: &str, with_head: bool, rng: &mut ChaCha8Rng) -> Result<LmModule> {
        let mut m = self.clone();
        m.name = name.to_string();
        m.config.has_lm_head = with_head;
        if !with_head {
            m.head = None;
        } else if m.head.is_none() {
            m.head = Some(Linear::new(
                &format!("{name}.head"),
                self.config.d_model,
                self.config.vocab_size,
                INIT_STD,
                rng,
            )?);
        }
        let old = format!("{}.", self.name);
        for p in m.params_mut() {
            if let Some(rest) = p.name.strip_prefix(&old) {
                p.name = format!("{name}.{rest}");
            }
            // Fresh leaves: the copy must not share gradient buffers with
            // the original.
            p.set_data(p.data().to_vec())?;
        }
        Ok(m)
    }

    /// Run the trunk over `tokens` laid out as `[batch, seq]`.
    pub fn forward(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<HiddenStates> {
        if seq > self.config.max_seq_len {
            return Err(Error::Truncation {
                len: seq,
                max: self.config.max_seq_len,
            });
        }
        if tokens.len() != batch * seq {
            return Err(Error::dim("lm forward", &[batch, seq], &[tokens.len()]));
        }
        let d = self.config.d_model;
        let tok = self.tok_emb.tensor().embedding(tokens, &[batch, seq])?;
        let pos = self
            .pos_emb
            .tensor()
            .index_select0(&(0..seq).collect::<Vec<_>>())?;
        let mut x = tok.add_suffix(&pos.reshape(&[seq, d])?)?;
        let mut layers = vec![x.clone()];
        for block in &self.blocks {
            x = block.forward(&x, self.config.n_heads)?;
            layers.push(x.clone());
        }
        let last = self.ln_f.forward(&x)?;
        Ok(HiddenStates { layers, last })
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    /// Project hidden states `[.., d_model]` to vocabulary logits.
    pub fn lm_head(&self, hidden: &Tensor) -> Result<Tensor> {
        match &self.head {
            Some(h) => h.forward(hidden),
            None => Err(Error::Config(format!(
                "module `{}` has no language-modelling head",
                self.name
            ))),
        }
    }

    pub fn head_mut(&mut self) -> Option<&mut Linear> {
        self.head.as_mut()
    }

    pub fn logits(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Tensor> {
        self.lm_head(&self.forward(tokens, batch, seq)?.last)
    }
}

impl Module for LmModule {
    fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(self.ln_f.params());
        if let Some(h) = &self.head {
            out.extend(h.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.ln_f.params_mut());
        if let Some(h) = &mut self.head {
            out.extend(h.params_mut());
        }
        out
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// The padded token grid handed to a decoder at each greedy step.
#[derive(Clone, Copy, Debug)]
pub struct DecodeGrid<'a> {
    /// `[batch, seq]`, right-padded.
    pub tokens: &'a [usize],
    pub batch: usize,
    pub seq: usize,
    /// Real length of each row.
    pub lengths: &'a [usize],
    /// Index of each row in the original prompt list.
    pub rows: &'a [usize],
}

/// Greedy batched decoding.
///
/// `next_logits` returns logits `[batch, seq, V]` for the grid; the logits
/// at each row's last real position select its next token (ties go to the
/// lowest id). A row stops after emitting `stop` (not returned) or after
/// `max_new` tokens.
pub fn generate_greedy<F>(
    prompts: &[Vec<usize>],
    max_new: usize,
    stop: usize,
    pad: usize,
    mut next_logits: F,
) -> Result<Vec<Vec<usize>>>
where
    F: FnMut(DecodeGrid<'_>) -> Result<Tensor>,
{
    if prompts.iter().any(|p| p.is_empty()) {
        return Err(Error::Generation("empty prompt".into()));
    }
    let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
    let mut outs: Vec<Vec<usize>> = vec![Vec::new(); prompts.len()];
    let mut done = vec![max_new == 0; prompts.len()];
    for _ in 0..max_new {
        let live: Vec<usize> = (0..seqs.len()).filter(|&i| !done[i]).collect();
        if live.is_empty() {
            break;
        }
        let lengths: Vec<usize> = live.iter().map(|&i| seqs[i].len()).collect();
        let seq = *lengths.iter().max().unwrap();
        let mut grid = vec![pad; live.len() * seq];
        for (r, &i) in live.iter().enumerate() {
            grid[r * seq..r * seq + seqs[i].len()].copy_from_slice(&seqs[i]);
        }
        let logits = next_logits(DecodeGrid {
            tokens: &grid,
            batch: live.len(),
            seq,
            lengths: &lengths,
            rows: &live,
        })?;
        let v = *logits.shape().last().unwrap_or(&0);
        if v == 0 || logits.numel() != live.len() * seq * v {
            return Err(Error::dim(
                "generate",
                &[live.len(), seq, v],
                logits.shape(),
            ));
        }
        for (r, &i) in live.iter().enumerate() {
            let base = (r * seq + lengths[r] - 1) * v;
            let next = argmax(&logits.data()[base..base + v]);
            if next == stop {
                done[i] = true;
            } else {
                seqs[i].push(next);
                outs[i].push(next);
                if outs[i].len() >= max_new {
                    done[i] = true;
                }
            }
        }
    }
    Ok(outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny(head: bool) -> LmModule {
        let cfg = LmConfig {
            vocab_size: 11,
            max_seq_len: 8,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            has_lm_head: head,
        };
        LmModule::new("m", cfg, &mut stream(3, "init")).unwrap()
    }

    #[test]
    fn forward_shapes() {
        let m = tiny(true);
        let toks: Vec<usize> = (0..10).map(|i| i % 11).collect();
        let h = m.forward(&toks, 2, 5).unwrap();
        assert_eq!(h.layers.len(), 3);
        for l in &h.layers {
            assert_eq!(l.shape(), &[2, 5, 8]);
        }
        assert_eq!(m.lm_head(&h.last).unwrap().shape(), &[2, 5, 11]);
    }

    #[test]
    fn causal_in_every_layer() {
        let m = tiny(true);
        let a = vec![1, 2, 3, 4, 5];
        let b = vec![1, 2, 3, 9, 0];
        let ha = m.forward(&a, 1, 5).unwrap();
        let hb = m.forward(&b, 1, 5).unwrap();
        for (la, lb) in ha
            .layers
            .iter()
            .zip(&hb.layers)
            .chain([(&ha.last, &hb.last)])
        {
            assert_eq!(&la.data()[..3 * 8], &lb.data()[..3 * 8]);
            assert_ne!(&la.data()[3 * 8..], &lb.data()[3 * 8..]);
        }
    }

    #[test]
    fn over_length_is_rejected() {
        let m = tiny(true);
        let err = m.forward(&[0; 9], 1, 9).unwrap_err();
        assert!(matches!(err, Error::Truncation { len: 9, max: 8 }));
    }

    #[test]
    fn router_has_no_head() {
        let m = tiny(false);
        let h = m.forward(&[1, 2], 1, 2).unwrap();
        assert!(matches!(m.lm_head(&h.last), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = LmConfig::default();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        c = LmConfig {
            vocab_size: 1,
            ..LmConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn greedy_zero_budget_and_ties() {
        let calls = std::cell::Cell::new(0);
        let out = generate_greedy(&[vec![1]], 0, 9, 0, |_| {
            calls.set(calls.get() + 1);
            Ok(Tensor::zeros(&[1, 1, 4]))
        })
        .unwrap();
        assert_eq!(out, vec![Vec::<usize>::new()]);
        assert_eq!(calls.get(), 0);
        // Uniform logits: every step picks token 0.
        let out = generate_greedy(&[vec![1, 2]], 3, 9, 0, |g| {
            Ok(Tensor::zeros(&[g.batch, g.seq, 4]))
        })
        .unwrap();
        assert_eq!(out, vec![vec![0, 0, 0]]);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn greedy_stops_at_stop_token() {
        let out = generate_greedy(&[vec![5], vec![5, 6]], 5, 3, 0, |g| {
            let (b, t) = (g.batch, g.seq);
            let mut logits = vec![0.0; b * t * 4];
            for r in 0..b {
                for p in 0..t {
                    // Emit 2 until the row holds three tokens, then stop.
                    let next = if g.lengths[r] >= 3 { 3 } else { 2 };
                    logits[(r * t + p) * 4 + next] = 1.0;
                }
            }
            Tensor::new(logits, &[b, t, 4])
        })
        .unwrap();
        assert_eq!(out, vec![vec![2, 2], vec![2]]);
    }
}
