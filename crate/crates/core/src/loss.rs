//! Many-to-many contrastive loss between attribute tokens and prompts, and
//! the one-to-one image/paragraph baseline.

use thiserror::Error;

use crate::catalog::AttrRef;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("annotation {0:?} has no prompt in the batch")]
    UnknownAttribute(AttrRef),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("positive mask is {got:?}, similarity is {expected:?}")]
    Shape { got: Vec<usize>, expected: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Cosine similarities: rows of `z` against rows of `y`, both normalized.
pub fn similarity_matrix(tape: &mut Tape, z: Var, y: Var) -> Result<Var, TensorError> {
    let zn = tape.l2_normalize_rows(z)?;
    let yn = tape.l2_normalize_rows(y)?;
    tape.matmul_t(zn, yn)
}

/// 0/1 matrix with one row per (image, token) and one column per prompt.
///
/// Row `i·K + k` is positive for prompt `p` iff image `i` carries `p` and
/// `p`'s group is read by token `k` (`token_of_group[p.group] == k`).
pub fn positive_mask(
    labels: &[Vec<AttrRef>],
    prompts: &[AttrRef],
    tokens: usize,
    token_of_group: &[usize],
) -> Result<Tensor, LossError> {
    let t = prompts.len();
    let mut data = vec![0.0; labels.len() * tokens * t];
    for (i, attrs) in labels.iter().enumerate() {
        for a in attrs {
            let j = prompts
                .iter()
                .position(|p| p == a)
                .ok_or(LossError::UnknownAttribute(*a))?;
            let k = token_of_group[a.group];
            data[(i * tokens + k) * t + j] = 1.0;
        }
    }
    Ok(Tensor::matrix(labels.len() * tokens, t, data)?)
}

fn check(tape: &Tape, sim: Var, positives: &Tensor, tau: f64) -> Result<(), LossError> {
    if !(tau > 0.0) {
        return Err(LossError::Temperature(tau));
    }
    let shape = tape.value(sim).shape();
    if positives.shape() != shape {
        return Err(LossError::Shape {
            got: positives.shape().to_vec(),
            expected: shape.to_vec(),
        });
    }
    Ok(())
}

fn row_term(tape: &mut Tape, sim: Var, positives: &Tensor, tau: f64) -> Result<Var, LossError> {
    if positives.data().iter().all(|&p| p == 0.0) {
        log::warn!("contrastive term has no positive pairs");
    }
    let scaled = tape.scale(sim, 1.0 / tau)?;
    let logp = tape.log_softmax(scaled)?;
    let neg: Vec<f64> = positives.data().iter().map(|&p| -p).collect();
    Ok(tape.weighted_sum(logp, Tensor::new(positives.shape().to_vec(), neg)?)?)
}

/// `−Σ_i Σ_{j∈pos(i)} log softmax_j(sim_i / τ)`, softmax over all prompts.
pub fn loss_v2t(tape: &mut Tape, sim: Var, positives: &Tensor, tau: f64) -> Result<Var, LossError> {
    check(tape, sim, positives, tau)?;
    row_term(tape, sim, positives, tau)
}

/// The transposed term: each prompt against all tokens.
pub fn loss_t2v(tape: &mut Tape, sim: Var, positives: &Tensor, tau: f64) -> Result<Var, LossError> {
    check(tape, sim, positives, tau)?;
    let st = tape.transpose(sim)?;
    row_term(tape, st, &positives.transpose(), tau)
}

pub fn loss_total(tape: &mut Tape, sim: Var, positives: &Tensor, tau: f64) -> Result<Var, LossError> {
    let a = loss_v2t(tape, sim, positives, tau)?;
    let b = loss_t2v(tape, sim, positives, tau)?;
    Ok(tape.add(a, b)?)
}

/// Groups identical paragraphs: returns the distinct texts in first-seen
/// order and, for each input, the index of its text.
pub fn dedup_paragraphs(paragraphs: &[String]) -> (Vec<String>, Vec<usize>) {
    let mut distinct: Vec<String> = Vec::new();
    let mut index = Vec::with_capacity(paragraphs.len());
    for p in paragraphs {
        match distinct.iter().position(|d| d == p) {
            Some(i) => index.push(i),
            None => {
                index.push(distinct.len());
                distinct.push(p.clone());
            }
        }
    }
    (distinct, index)
}

/// One-to-one loss: image embeddings (B×D) against distinct paragraph
/// embeddings, `paragraph_of[i]` being the positive column of image `i`.
pub fn otoc_loss(
    tape: &mut Tape,
    images: Var,
    paragraphs: Var,
    paragraph_of: &[usize],
    tau: f64,
) -> Result<Var, LossError> {
    let b = paragraph_of.len();
    let t = tape.value(paragraphs).rows();
    let mut pos = vec![0.0; b * t];
    for (i, &j) in paragraph_of.iter().enumerate() {
        pos[i * t + j] = 1.0;
    }
    let positives = Tensor::matrix(b, t, pos)?;
    let sim = similarity_matrix(tape, images, paragraphs)?;
    loss_total(tape, sim, &positives, tau)
}
