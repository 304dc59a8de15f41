//! Byte-level tokenizer and the causal transformer that embeds prompts.

use rand_chacha::ChaCha8Rng;

use crate::nn::{normal_init, Bound, ParamId, ParamStore, TransformerBlock};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError, MASK_SENTINEL};

pub const START: usize = 256;
pub const END: usize = 257;
pub const PAD: usize = 258;
pub const VOCAB: usize = 259;

/// Fixed-length token ids; `ids[valid_length..]` are all [`PAD`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub valid_length: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Position of the END token (the last valid one).
    pub fn end_position(&self) -> usize {
        self.valid_length - 1
    }
}

/// `START, bytes..., END, PAD...`, truncating the bytes to `len - 2`.
pub fn tokenize(sentence: &str, len: usize) -> TokenSequence {
    assert!(len >= 2, "sequence length must hold START and END");
    let bytes = sentence.as_bytes();
    let kept = bytes.len().min(len - 2);
    let mut ids = Vec::with_capacity(len);
    ids.push(START);
    ids.extend(bytes[..kept].iter().map(|&b| b as usize));
    ids.push(END);
    let valid_length = ids.len();
    ids.resize(len, PAD);
    TokenSequence { ids, valid_length }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Longest sequence the positional table supports.
    pub max_len: usize,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub blocks: Vec<TransformerBlock>,
}

/// Additive mask letting position i see positions ≤ i.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = MASK_SENTINEL;
        }
    }
    Tensor::matrix(n, n, data).expect("positive size")
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, config: TextConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.dim;
        let token_embedding = store.add("text.token_embedding", normal_init(rng, &[VOCAB, d], 0.02));
        let position_embedding =
            store.add("text.position_embedding", normal_init(rng, &[config.max_len, d], 0.02));
        let blocks = (0..config.layers)
            .map(|l| TransformerBlock::new(store, &format!("text.block{l}"), d, 4 * d, config.heads, rng))
            .collect();
        Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
        }
    }

    /// One row per sequence, read at its END position after the last block.
    ///
    /// Only the valid prefix of each sequence is run: with causal attention
    /// the END position never sees the padding that follows it.
    pub fn encode(&self, tape: &mut Tape, b: &Bound, seqs: &[TokenSequence]) -> Result<Var, TensorError> {
        let mut rows = Vec::with_capacity(seqs.len());
        for seq in seqs {
            rows.push(self.encode_one(tape, b, seq)?);
        }
        tape.concat_rows(&rows)
    }

    fn encode_one(&self, tape: &mut Tape, b: &Bound, seq: &TokenSequence) -> Result<Var, TensorError> {
        let n = seq.valid_length;
        if n == 0 || n > self.config.max_len {
            return Err(TensorError::Shape {
                op: "text encode",
                detail: format!("valid length {n} outside 1..={}", self.config.max_len),
            });
        }
        let tok = tape.gather_rows(b.var(self.token_embedding), &seq.ids[..n])?;
        let pos = tape.slice_rows(b.var(self.position_embedding), 0, n)?;
        let mut x = tape.add(tok, pos)?;
        let mask = causal_mask(n);
        for blk in &self.blocks {
            x = blk.forward(tape, b, x, Some(&mask), None)?;
        }
        tape.slice_rows(x, n - 1, 1)
    }
}
