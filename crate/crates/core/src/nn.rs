//! Parameter storage and the pre-norm transformer block shared by both encoders.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.tensors[id.0].shape(), value.shape(), "parameter shape is fixed");
        self.tensors[id.0] = value;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound::from_tensors(tape, &self.tensors, trainable)
    }
}

/// Tape handles for each parameter of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_tensors(tape: &mut Tape, tensors: &[Tensor], trainable: bool) -> Self {
        let vars = tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub(crate) fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Uniform in ±1/√fan_in.
pub(crate) fn linear_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("shape")
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), linear_init(rng, fan_in, fan_out)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var, TensorError> {
        let h = tape.matmul(x, b.var(self.weight))?;
        tape.add_row(h, b.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var, TensorError> {
        tape.layer_norm(x, b.var(self.gain), b.var(self.bias), LN_EPS)
    }
}

/// Multi-head self-attention with a fused QKV projection.
///
/// Keys carry no bias: a key bias shifts every logit of a query row by the
/// same amount and therefore never reaches the output.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub qkv: ParamId,
    pub q_bias: ParamId,
    pub v_bias: ParamId,
    pub out: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must be divisible by heads");
        Self {
            qkv: store.add(format!("{name}.qkv.weight"), linear_init(rng, dim, 3 * dim)),
            q_bias: store.add(format!("{name}.q.bias"), Tensor::zeros(&[dim])),
            v_bias: store.add(format!("{name}.v.bias"), Tensor::zeros(&[dim])),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            dim,
            heads,
        }
    }

    /// Attention over the rows of `x` under an additive row-by-row `mask`.
    ///
    /// Logits are scaled by 1/√(head dim). When `record` is given, each
    /// head's attention matrix is pushed onto it.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: Var,
        mask: Option<&Tensor>,
        mut record: Option<&mut Vec<Tensor>>,
    ) -> Result<Var, TensorError> {
        let d = self.dim;
        let qkv = tape.matmul(x, b.var(self.qkv))?;
        let q_all = tape.slice_cols(qkv, 0, d)?;
        let q_all = tape.add_row(q_all, b.var(self.q_bias))?;
        let k_all = tape.slice_cols(qkv, d, d)?;
        let v_all = tape.slice_cols(qkv, 2 * d, d)?;
        let v_all = tape.add_row(v_all, b.var(self.v_bias))?;
        let hd = d / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (q, k, v) = if self.heads == 1 {
                (q_all, k_all, v_all)
            } else {
                (
                    tape.slice_cols(q_all, h * hd, hd)?,
                    tape.slice_cols(k_all, h * hd, hd)?,
                    tape.slice_cols(v_all, h * hd, hd)?,
                )
            };
            let logits = tape.matmul_t(q, k)?;
            let logits = tape.scale(logits, scale)?;
            let attn = tape.masked_softmax(logits, mask)?;
            if let Some(rec) = record.as_deref_mut() {
                rec.push(tape.value(attn).clone());
            }
            outs.push(tape.matmul(attn, v)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        self.out.forward(tape, b, merged)
    }
}

/// Pre-norm block: `V̂ = MSA(LN(V)) + V`, then `V' = MLP(LN(V̂)) + V̂`.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x: Var,
        mask: Option<&Tensor>,
        record: Option<&mut Vec<Tensor>>,
    ) -> Result<Var, TensorError> {
        let h = self.ln1.forward(tape, b, x)?;
        let a = self.attn.forward(tape, b, h, mask, record)?;
        let x = tape.add(a, x)?;
        let h = self.ln2.forward(tape, b, x)?;
        let h = self.fc1.forward(tape, b, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, b, h)?;
        tape.add(h, x)
    }
}
