//! Vision and text encoders bound to one catalog and parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::catalog::AttributeCatalog;
use crate::config::ModelConfig;
use crate::image::Image;
use crate::nn::{Bound, ParamStore};
use crate::synth::RegionLayout;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::text::{tokenize, TextConfig, TextEncoder};
use crate::vision::{build_mask, patchify, EncoderConfig, MaskSpec, MaskToggles, VisionEncoder, VisionError};

#[derive(Clone, Debug)]
pub struct PoarModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub mask: MaskSpec,
    /// Attribute token that reads each catalog group.
    pub token_of_group: Vec<usize>,
}

impl PoarModel {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, catalog: &AttributeCatalog, seed: u64) -> Result<Self, VisionError> {
        let groups = catalog.num_groups();
        let (tokens, layout, token_of_group) = if config.single_token {
            (1, RegionLayout::full(1), vec![0; groups])
        } else {
            (groups, RegionLayout::from_catalog(catalog), (0..groups).collect())
        };
        let enc = EncoderConfig {
            height: config.height,
            width: config.width,
            patch: config.patch,
            dim: config.dim,
            tokens,
            layers: config.layers,
            heads: config.heads,
        };
        enc.validate()?;
        let mask = build_mask(
            &layout,
            &enc,
            MaskToggles {
                token_mask: config.token_mask,
                region_mask: config.region_mask,
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vision = VisionEncoder::new(&mut store, enc, &mut rng)?;
        let text = TextEncoder::new(
            &mut store,
            TextConfig {
                dim: config.dim,
                layers: config.text_layers,
                heads: config.text_heads,
                max_len: config.text_len.max(config.paragraph_len),
            },
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            vision,
            text,
            mask,
            token_of_group,
        })
    }

    pub fn tokens(&self) -> usize {
        self.vision.config.tokens
    }

    pub fn patchify(&self, image: &Image) -> Result<Tensor, VisionError> {
        if image.height() != self.config.height || image.width() != self.config.width {
            return Err(VisionError::Config(format!(
                "image is {}x{}, model expects {}x{}",
                image.height(),
                image.width(),
                self.config.height,
                self.config.width
            )));
        }
        patchify(image, self.config.patch)
    }

    /// Token embeddings of every image stacked: rows `i·K .. (i+1)·K`.
    pub fn encode_images(&self, tape: &mut Tape, b: &Bound, patches: &[Tensor]) -> Result<Var, VisionError> {
        let mut parts = Vec::with_capacity(patches.len());
        for p in patches {
            parts.push(self.vision.encode(tape, b, p, &self.mask, None)?);
        }
        Ok(tape.concat_rows(&parts)?)
    }

    /// One embedding row per sentence, tokenized to `len`.
    pub fn encode_sentences(&self, tape: &mut Tape, b: &Bound, sentences: &[String], len: usize) -> Result<Var, TensorError> {
        let seqs: Vec<_> = sentences.iter().map(|s| tokenize(s, len)).collect();
        self.text.encode(tape, b, &seqs)
    }

    /// Token embeddings (K×D) of one image, without gradients.
    pub fn image_embedding(&self, image: &Image) -> Result<Tensor, VisionError> {
        let p = self.patchify(image)?;
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, false);
        let z = self.vision.encode(&mut tape, &b, &p, &self.mask, None)?;
        Ok(tape.value(z).clone())
    }

    /// Prompt embeddings (one row each), without gradients.
    pub fn sentence_embeddings(&self, sentences: &[String], len: usize) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, false);
        let y = self.encode_sentences(&mut tape, &b, sentences, len)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::synthetic_catalog;
    use crate::config::TrainConfig;

    #[test]
    fn builds_desk_model() {
        let cat = synthetic_catalog();
        let m = PoarModel::new(TrainConfig::desk().model, &cat, 1).unwrap();
        assert_eq!(m.tokens(), 8);
        assert_eq!(m.token_of_group, (0..8).collect::<Vec<_>>());
        let img = Image::filled(32, 32, [0.5; 3]);
        assert_eq!(m.image_embedding(&img).unwrap().shape(), &[8, 32]);
        let y = m.sentence_embeddings(&["a".into(), "b".into()], 64).unwrap();
        assert_eq!(y.shape(), &[2, 32]);
        assert!(m.image_embedding(&Image::filled(16, 32, [0.5; 3])).is_err());
    }

    #[test]
    fn single_token_mode_routes_all_groups_to_one_token() {
        let cat = synthetic_catalog();
        let mut cfg = TrainConfig::desk().model;
        cfg.single_token = true;
        let m = PoarModel::new(cfg, &cat, 1).unwrap();
        assert_eq!(m.tokens(), 1);
        assert_eq!(m.token_of_group, vec![0; 8]);
        assert_eq!(m.mask.unblocked_patches(0).len(), 16);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cat = synthetic_catalog();
        let a = PoarModel::new(TrainConfig::desk().model, &cat, 3).unwrap();
        let b = PoarModel::new(TrainConfig::desk().model, &cat, 3).unwrap();
        assert_eq!(a.store, b.store);
    }
}
