//! Patch embedding, attribute tokens and the masked vision transformer.
//!
//! The input sequence holds the K attribute tokens first, then the S patches,
//! one per row.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::nn::{normal_init, Bound, Linear, ParamId, ParamStore, TransformerBlock};
use crate::synth::RegionLayout;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError, MASK_SENTINEL};

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("invalid mask: {0}")]
    Mask(String),
    #[error("attention records were not captured")]
    MissingRecords,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    /// Patch side in pixels.
    pub patch: usize,
    pub dim: usize,
    /// Attribute tokens, one per catalog group.
    pub tokens: usize,
    pub layers: usize,
    pub heads: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), VisionError> {
        let err = |m: String| Err(VisionError::Config(m));
        if self.patch == 0 || self.height == 0 || self.width == 0 {
            return err("image and patch sizes must be positive".into());
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return err(format!(
                "patch size {} does not divide {}x{}",
                self.patch, self.height, self.width
            ));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return err(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.tokens == 0 {
            return err("at least one attribute token is required".into());
        }
        Ok(())
    }

    pub fn grid_rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// Values per flattened patch.
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn seq_len(&self) -> usize {
        self.tokens + self.num_patches()
    }
}

/// Splits `image` into row-major `r×r` patches, one flattened patch per row
/// in (y, x, channel) order.
pub fn patchify(image: &Image, r: usize) -> Result<Tensor, VisionError> {
    let (h, w) = (image.height(), image.width());
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(VisionError::Config(format!("patch size {r} does not divide {h}x{w}")));
    }
    let (gr, gc) = (h / r, w / r);
    let plen = r * r * 3;
    let mut data = Vec::with_capacity(gr * gc * plen);
    let px = image.data();
    for pr in 0..gr {
        for pc in 0..gc {
            for y in pr * r..(pr + 1) * r {
                let start = (y * w + pc * r) * 3;
                data.extend_from_slice(&px[start..start + r * 3]);
            }
        }
    }
    Ok(Tensor::matrix(gr * gc, plen, data)?)
}

/// `[Z; X] + E` with tokens in the first rows.
pub fn assemble_input(tape: &mut Tape, tokens: Var, patches: Var, positions: Var) -> Result<Var, TensorError> {
    let v = tape.concat_rows(&[tokens, patches])?;
    tape.add(v, positions)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskToggles {
    /// Block attention between attribute tokens, self included.
    pub token_mask: bool,
    /// Restrict each token to the patches of its body region.
    pub region_mask: bool,
}

impl Default for MaskToggles {
    fn default() -> Self {
        Self {
            token_mask: true,
            region_mask: true,
        }
    }
}

/// Additive attention masks over the token+patch sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    /// K×K token→token block.
    pub token_mask: Tensor,
    /// K×S token→patch block.
    pub region_mask: Tensor,
    full: Tensor,
}

impl MaskSpec {
    /// Assembles the (K+S)×(K+S) mask. Patch rows see every patch and no
    /// token.
    pub fn new(token_mask: Tensor, region_mask: Tensor) -> Result<Self, VisionError> {
        let k = token_mask.rows();
        let s = region_mask.cols();
        if token_mask.shape() != [k, k] || region_mask.rows() != k {
            return Err(VisionError::Mask(format!(
                "token mask {:?} and region mask {:?} disagree",
                token_mask.shape(),
                region_mask.shape()
            )));
        }
        for &v in token_mask.data().iter().chain(region_mask.data()) {
            if v != 0.0 && v != MASK_SENTINEL {
                return Err(VisionError::Mask(format!("entry {v} is neither 0 nor blocked")));
            }
        }
        let n = k + s;
        let mut full = vec![0.0; n * n];
        for i in 0..k {
            full[i * n..i * n + k].copy_from_slice(token_mask.row(i));
            full[i * n + k..(i + 1) * n].copy_from_slice(region_mask.row(i));
            if full[i * n..(i + 1) * n].iter().all(|&v| v == MASK_SENTINEL) {
                return Err(VisionError::Mask(format!("token {i} can attend to nothing")));
            }
        }
        for i in k..n {
            full[i * n..i * n + k].fill(MASK_SENTINEL);
        }
        Ok(Self {
            token_mask,
            region_mask,
            full: Tensor::matrix(n, n, full)?,
        })
    }

    pub fn tokens(&self) -> usize {
        self.token_mask.rows()
    }

    pub fn patches(&self) -> usize {
        self.region_mask.cols()
    }

    pub fn full(&self) -> &Tensor {
        &self.full
    }

    /// Patch indices token `k` may attend to.
    pub fn unblocked_patches(&self, k: usize) -> Vec<usize> {
        (0..self.patches())
            .filter(|&j| self.region_mask.row(k)[j] == 0.0)
            .collect()
    }
}

/// Patch-grid rows whose extent `[i/R, (i+1)/R)` overlaps `[lo, hi)`.
pub fn interval_rows(interval: [f64; 2], grid_rows: usize) -> Vec<usize> {
    let [lo, hi] = interval;
    let r = grid_rows as f64;
    (0..grid_rows)
        .filter(|&i| {
            let a = (i as f64 / r).max(lo);
            let b = ((i + 1) as f64 / r).min(hi);
            b > a
        })
        .collect()
}

pub fn build_mask(layout: &RegionLayout, config: &EncoderConfig, toggles: MaskToggles) -> Result<MaskSpec, VisionError> {
    let k = config.tokens;
    let s = config.num_patches();
    if layout.intervals.len() != k {
        return Err(VisionError::Mask(format!(
            "layout has {} groups, encoder {k} tokens",
            layout.intervals.len()
        )));
    }
    let tok = if toggles.token_mask { MASK_SENTINEL } else { 0.0 };
    let token_mask = Tensor::filled(&[k, k], tok);
    let mut region = vec![0.0; k * s];
    let cols = config.grid_cols();
    for (g, &iv) in layout.intervals.iter().enumerate() {
        let rows = interval_rows(iv, config.grid_rows());
        if rows.is_empty() || !(iv[0] < iv[1]) {
            return Err(VisionError::Mask(format!(
                "region [{}, {}) of group {g} covers no patch row",
                iv[0], iv[1]
            )));
        }
        if toggles.region_mask {
            let row = &mut region[g * s..(g + 1) * s];
            row.fill(MASK_SENTINEL);
            for r in rows {
                row[r * cols..(r + 1) * cols].fill(0.0);
            }
        }
    }
    MaskSpec::new(token_mask, Tensor::matrix(k, s, region)?)
}

/// Head matrices per layer, captured during a forward pass.
pub type AttentionRecords = Vec<Vec<Tensor>>;

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub config: EncoderConfig,
    pub patch_embedding: Linear,
    pub tokens: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<TransformerBlock>,
}

impl VisionEncoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self, VisionError> {
        config.validate()?;
        let d = config.dim;
        let patch_embedding = Linear::new(store, "vision.patch_embedding", config.patch_len(), d, rng);
        let tokens = store.add("vision.tokens", normal_init(rng, &[config.tokens, d], 0.02));
        let positions = store.add("vision.positions", normal_init(rng, &[config.seq_len(), d], 0.02));
        let blocks = (0..config.layers)
            .map(|l| TransformerBlock::new(store, &format!("vision.block{l}"), d, 4 * d, config.heads, rng))
            .collect();
        Ok(Self {
            config,
            patch_embedding,
            tokens,
            positions,
            blocks,
        })
    }

    /// Attribute-token embeddings (K×D) of one patchified image.
    pub fn encode(
        &self,
        tape: &mut Tape,
        b: &Bound,
        patches: &Tensor,
        mask: &MaskSpec,
        mut records: Option<&mut AttentionRecords>,
    ) -> Result<Var, VisionError> {
        let c = &self.config;
        if patches.shape() != [c.num_patches(), c.patch_len()] {
            return Err(VisionError::Config(format!(
                "patches {:?}, expected [{}, {}]",
                patches.shape(),
                c.num_patches(),
                c.patch_len()
            )));
        }
        if mask.tokens() != c.tokens || mask.patches() != c.num_patches() {
            return Err(VisionError::Mask("mask does not match the encoder".into()));
        }
        let p = tape.constant(patches.clone());
        let x = self.patch_embedding.forward(tape, b, p)?;
        let mut v = assemble_input(tape, b.var(self.tokens), x, b.var(self.positions))?;
        for blk in &self.blocks {
            let mut heads = Vec::new();
            let rec = records.as_ref().map(|_| &mut heads);
            v = blk.forward(tape, b, v, Some(mask.full()), rec)?;
            if let Some(r) = records.as_deref_mut() {
                r.push(heads);
            }
        }
        Ok(tape.slice_rows(v, 0, c.tokens)?)
    }

    /// Token embeddings and attention records without gradients.
    pub fn embed(&self, store: &ParamStore, image: &Image, mask: &MaskSpec) -> Result<(Tensor, AttentionRecords), VisionError> {
        let patches = patchify(image, self.config.patch)?;
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, false);
        let mut records = Vec::new();
        let z = self.encode(&mut tape, &b, &patches, mask, Some(&mut records))?;
        Ok((tape.value(z).clone(), records))
    }
}

/// Per layer, a K×S matrix: each token's head-averaged attention over the
/// patches, in row-major patch-grid order.
pub fn attention_maps(records: &AttentionRecords, tokens: usize) -> Result<Vec<Tensor>, VisionError> {
    if records.is_empty() {
        return Err(VisionError::MissingRecords);
    }
    let mut maps = Vec::with_capacity(records.len());
    for heads in records {
        let first = heads.first().ok_or(VisionError::MissingRecords)?;
        let n = first.rows();
        let s = n - tokens;
        let mut out = vec![0.0; tokens * s];
        for h in heads {
            for k in 0..tokens {
                for (o, &a) in out[k * s..(k + 1) * s].iter_mut().zip(&h.row(k)[tokens..]) {
                    *o += a;
                }
            }
        }
        let inv = 1.0 / heads.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        maps.push(Tensor::matrix(tokens, s, out)?);
    }
    Ok(maps)
}
