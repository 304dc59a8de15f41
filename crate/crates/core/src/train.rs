//! SGD training of the vision and text encoders.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::catalog::{AttrRef, AttributeCatalog};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::eval::{evaluate, EvalError, EvalMode, EvalOptions};
use crate::image::Image;
use crate::loss::{dedup_paragraphs, loss_total, otoc_loss, positive_mask, similarity_matrix, LossError};
use crate::model::PoarModel;
use crate::nn::Bound;
use crate::synth::{augment, AugmentOptions};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::vision::VisionError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("image {index} carries held-out attribute `{label}`")]
    HeldOutLabel { index: usize, label: String },
    #[error("non-finite gradient in `{param}` (coordinate {coord})")]
    NonFiniteGradient { param: String, coord: usize },
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: u64,
        reason: String,
        /// State after the last finite update.
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainError {
    /// Whether the error comes from an overflow or NaN in the forward or
    /// backward pass.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            Self::Tensor(TensorError::NonFinite { .. })
                | Self::Vision(VisionError::Tensor(TensorError::NonFinite { .. }))
                | Self::Loss(LossError::Tensor(TensorError::NonFinite { .. }))
                | Self::Eval(EvalError::Tensor(TensorError::NonFinite { .. }))
                | Self::Eval(EvalError::Vision(VisionError::Tensor(TensorError::NonFinite { .. })))
                | Self::NonFiniteGradient { .. }
        )
    }
}

/// `p ← p − lr·(g + wd·p)` for every tensor. Nothing is modified when any
/// gradient is non-finite.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], names: &[String], lr: f64, wd: f64) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    for (p, g) in grads.iter().enumerate() {
        if let Some(coord) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: names.get(p).cloned().unwrap_or_else(|| format!("#{p}")),
                coord,
            });
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        assert_eq!(p.len(), g.len(), "gradient shape");
        for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * (d + wd * *x);
        }
    }
    Ok(())
}

/// Paragraph describing all of an image's attributes, sentences in catalog
/// order.
pub fn paragraph(catalog: &AttributeCatalog, labels: &[AttrRef]) -> String {
    let mut sorted = labels.to_vec();
    sorted.sort();
    sorted
        .iter()
        .map(|&a| catalog.prompt(a).sentence)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Training objective on one batch of patchified images. `prompts` are the
/// seen attributes whose sentences form the text side of the many-to-many
/// term.
pub fn batch_loss(
    model: &PoarModel,
    catalog: &AttributeCatalog,
    config: &TrainConfig,
    tape: &mut Tape,
    bound: &Bound,
    patches: &[Tensor],
    labels: &[Vec<AttrRef>],
) -> Result<Var, TrainError> {
    let z = model.encode_images(tape, bound, patches)?;
    let mut total: Option<Var> = None;
    if config.loss.uses_mtmc() {
        let prompts = catalog.seen();
        let sentences: Vec<String> = prompts.iter().map(|&a| catalog.prompt(a).sentence).collect();
        let y = model.encode_sentences(tape, bound, &sentences, config.model.text_len)?;
        let sim = similarity_matrix(tape, z, y)?;
        let positives = positive_mask(labels, &prompts, model.tokens(), &model.token_of_group)?;
        total = Some(loss_total(tape, sim, &positives, config.tau)?);
    }
    if config.loss.uses_otoc() {
        let k = model.tokens();
        let mut pooled = Vec::with_capacity(patches.len());
        for i in 0..patches.len() {
            let rows = tape.slice_rows(z, i * k, k)?;
            pooled.push(tape.mean_rows(rows)?);
        }
        let images = tape.concat_rows(&pooled)?;
        let texts: Vec<String> = labels.iter().map(|l| paragraph(catalog, l)).collect();
        let (distinct, index) = dedup_paragraphs(&texts);
        let y = model.encode_sentences(tape, bound, &distinct, config.model.paragraph_len)?;
        let l = otoc_loss(tape, images, y, &index, config.tau)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(total.expect("every loss mode uses at least one term"))
}

/// Loss value and gradient of every parameter of `model` on one batch.
pub fn loss_and_grads(
    model: &PoarModel,
    catalog: &AttributeCatalog,
    config: &TrainConfig,
    params: &[Tensor],
    patches: &[Tensor],
    labels: &[Vec<AttrRef>],
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let mut tape = Tape::new();
    let bound = Bound::from_tensors(&mut tape, params, true);
    let loss = batch_loss(model, catalog, config, &mut tape, &bound, patches, labels)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, bound.vars().iter().map(|&v| grads.get_or_zeros(v)).collect()))
}

/// Loss value only, for finite-difference checks.
pub fn loss_value(
    model: &PoarModel,
    catalog: &AttributeCatalog,
    config: &TrainConfig,
    params: &[Tensor],
    patches: &[Tensor],
    labels: &[Vec<AttrRef>],
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let bound = Bound::from_tensors(&mut tape, params, false);
    let loss = batch_loss(model, catalog, config, &mut tape, &bound, patches, labels)?;
    Ok(tape.value(loss).data()[0])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochEval {
    pub r1: f64,
    pub r2: f64,
    pub m_a: Option<f64>,
}

/// One line of the progress log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub eval: Option<EpochEval>,
}

pub struct TrainOutcome {
    pub model: PoarModel,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Images with their annotations.
#[derive(Clone, Copy)]
pub struct Samples<'a> {
    pub images: &'a [Image],
    pub labels: &'a [Vec<AttrRef>],
}

/// Trains from fresh parameters. `on_epoch` sees every log line as it is
/// produced. The test split, when given, is evaluated every `eval_every`
/// epochs and after the last one.
pub fn train(
    config: &TrainConfig,
    catalog: &AttributeCatalog,
    train_set: Samples,
    test_set: Option<Samples>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    if train_set.images.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    assert_eq!(train_set.images.len(), train_set.labels.len(), "one label set per image");
    for (index, l) in train_set.labels.iter().enumerate() {
        if let Some(&a) = l.iter().find(|&&a| !catalog.is_seen(a)) {
            return Err(TrainError::HeldOutLabel {
                index,
                label: catalog.label(a),
            });
        }
    }
    let mut model = PoarModel::new(config.model, catalog, config.seed)?;
    let base: Vec<Tensor> = train_set
        .images
        .iter()
        .map(|img| model.patchify(img))
        .collect::<Result<_, _>>()?;
    // data order and augmentation draw from their own stream
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let names = model.store.names().to_vec();
    let mut order: Vec<usize> = (0..train_set.images.len()).collect();
    let mut step = 0u64;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let mut patches = Vec::with_capacity(chunk.len());
            for &i in chunk {
                if config.augment {
                    let mut img = train_set.images[i].clone();
                    augment(&mut img, AugmentOptions::STANDARD, &mut rng);
                    patches.push(model.patchify(&img)?);
                } else {
                    patches.push(base[i].clone());
                }
            }
            let labels: Vec<Vec<AttrRef>> = chunk.iter().map(|&i| train_set.labels[i].clone()).collect();
            let diverged = |reason: String, model: &PoarModel| TrainError::Diverged {
                epoch,
                step,
                reason,
                last_good: Box::new(Checkpoint::from_model(model, config, catalog, step)),
            };
            let (value, grads) = match loss_and_grads(&model, catalog, config, model.store.tensors(), &patches, &labels) {
                Ok(r) => r,
                Err(e) if e.is_non_finite() => return Err(diverged(e.to_string(), &model)),
                Err(e) => return Err(e),
            };
            if !value.is_finite() {
                return Err(diverged(format!("loss is {value}"), &model));
            }
            let mut next = model.store.tensors().to_vec();
            match sgd_step(&mut next, &grads, &names, config.lr, config.weight_decay) {
                Ok(()) => {}
                Err(e) if e.is_non_finite() => return Err(diverged(e.to_string(), &model)),
                Err(e) => return Err(e),
            }
            if let Some((name, _)) = names.iter().zip(&next).find(|(_, t)| !t.is_finite()) {
                return Err(diverged(format!("parameter `{name}` became non-finite"), &model));
            }
            model.store.tensors_mut().clone_from_slice(&next);
            step += 1;
            sum += value;
            batches += 1;
        }
        let eval = match test_set {
            Some(t) if !t.images.is_empty() && config.eval_every > 0 && (epoch % config.eval_every == 0 || epoch == config.epochs) => {
                let report = match evaluate(&model, catalog, catalog, t.images, t.labels, &EvalOptions::new(EvalMode::I2t)) {
                    Ok(r) => r,
                    Err(e) => {
                        let e = TrainError::from(e);
                        if e.is_non_finite() {
                            return Err(TrainError::Diverged {
                                epoch,
                                step,
                                reason: e.to_string(),
                                last_good: Box::new(Checkpoint::from_model(&model, config, catalog, step)),
                            });
                        }
                        return Err(e);
                    }
                };
                report.i2t.overall.map(|o| EpochEval {
                    r1: o.r1,
                    r2: o.r2,
                    m_a: report.m_a,
                })
            }
            _ => None,
        };
        let line = EpochLog {
            epoch,
            step,
            loss: sum / batches as f64,
            eval,
        };
        on_epoch(&line);
        log.push(line);
    }
    let checkpoint = Checkpoint::from_model(&model, config, catalog, step);
    Ok(TrainOutcome { model, checkpoint, log })
}
