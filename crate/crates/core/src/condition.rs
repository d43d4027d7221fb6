//! Conditioning inputs for the denoiser: the degraded image, an optional
//! damage mask, and a token prompt resolved against a fixed vocabulary.

use std::collections::BTreeMap;
use std::path::Path;

use crate::codec::CodecState;
use crate::error::{Error, Result};
use crate::tensor::{resize_nearest, ImageTensor, Latent, MaskTensor, Real};

/// Closed token set, loaded from a text file with one token per line.
/// Lookups are case-insensitive (tokens are stored lowercased).
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut list = Vec::new();
        let mut index = BTreeMap::new();
        for tok in tokens {
            let tok = tok.as_ref().trim().to_lowercase();
            if tok.is_empty() {
                continue;
            }
            if index.insert(tok.clone(), list.len()).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{tok}`")));
            }
            list.push(tok);
        }
        if list.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        Ok(Self {
            tokens: list,
            index,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(&token.to_lowercase())
            .copied()
            .ok_or_else(|| Error::Vocabulary {
                token: token.to_owned(),
            })
    }

    /// Splits a prompt on whitespace and resolves every token. The empty
    /// prompt resolves to no tokens, which downstream means "no text signal".
    pub fn resolve(&self, prompt: &str) -> Result<PromptTokens> {
        let ids = prompt
            .split_whitespace()
            .map(|t| self.id(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptTokens { ids })
    }
}

/// Prompt already resolved to vocabulary ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptTokens {
    ids: Vec<usize>,
}

impl PromptTokens {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_ids(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Everything the denoiser is conditioned on for one image.
#[derive(Debug, Clone)]
pub struct ConditionBundle<F: Real> {
    pub image: ImageTensor<F>,
    pub mask: Option<MaskTensor<F>>,
    pub prompt: PromptTokens,
}

impl<F: Real> ConditionBundle<F> {
    pub fn new(
        image: ImageTensor<F>,
        mask: Option<MaskTensor<F>>,
        prompt: PromptTokens,
    ) -> Result<Self> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!(
                "condition image must have 3 channels, got {c}"
            )));
        }
        if let Some(m) = &mask {
            let (mc, mh, mw) = m.dim();
            if mc != 1 || mh != h || mw != w {
                return Err(Error::Shape(format!(
                    "mask shape ({mc},{mh},{mw}) does not match image ({h},{w})"
                )));
            }
        }
        Ok(Self {
            image,
            mask,
            prompt,
        })
    }

    /// Same mask and prompt, different image. Used when the conditioning
    /// image is swapped for a model-generated one during training.
    pub fn with_image(&self, image: ImageTensor<F>) -> Result<Self> {
        Self::new(image, self.mask.clone(), self.prompt.clone())
    }
}

/// Condition mapped into latent space, ready to feed the denoiser: the
/// encoded image, the mask resampled to the latent grid (zeros when absent),
/// and a flag plane recording whether a mask was supplied at all.
#[derive(Debug, Clone)]
pub struct PreparedCondition<F: Real> {
    pub latent: Latent<F>,
    pub mask_plane: MaskTensor<F>,
    pub mask_present: bool,
    pub token_ids: Vec<usize>,
}

impl<F: Real> PreparedCondition<F> {
    pub fn prepare(
        bundle: &ConditionBundle<F>,
        codec: &CodecState<F>,
        latent_hw: (usize, usize),
    ) -> Result<Self> {
        let latent = codec.encode(&bundle.image)?;
        let (_, lh, lw) = latent.dim();
        if (lh, lw) != latent_hw {
            return Err(Error::Shape(format!(
                "condition encodes to {lh}x{lw} but the latent grid is {}x{}",
                latent_hw.0, latent_hw.1
            )));
        }
        let (mask_plane, mask_present) = match &bundle.mask {
            Some(m) => (resize_nearest(m, lh, lw), true),
            None => (MaskTensor::zeros((1, lh, lw)), false),
        };
        Ok(Self {
            latent,
            mask_plane,
            mask_present,
            token_ids: bundle.prompt.ids().to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["red", "green", "blue", "circle"]).unwrap()
    }

    #[test]
    fn vocabulary_resolves_tokens_in_file_order() {
        let v = vocab();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("red").unwrap(), 0);
        assert_eq!(v.id("circle").unwrap(), 3);
        assert_eq!(v.token(2), "blue");
    }

    #[test]
    fn vocabulary_is_case_insensitive() {
        let v = vocab();
        assert_eq!(v.id("RED").unwrap(), 0);
        let p = v.resolve("Blue Circle").unwrap();
        assert_eq!(p.ids(), &[2, 3]);
    }

    #[test]
    fn unknown_token_is_an_error() {
        let v = vocab();
        let err = v.resolve("red dragon").unwrap_err();
        match err {
            Error::Vocabulary { token } => assert_eq!(token, "dragon"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_prompt_resolves_to_no_tokens() {
        let v = vocab();
        assert!(v.resolve("").unwrap().is_empty());
        assert!(v.resolve("   ").unwrap().is_empty());
    }

    #[test]
    fn duplicate_vocabulary_tokens_rejected() {
        assert!(Vocabulary::from_tokens(["red", "Red"]).is_err());
    }

    #[test]
    fn blank_vocabulary_lines_are_skipped() {
        let v = Vocabulary::from_tokens(["red", "", "  ", "blue"]).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.id("blue").unwrap(), 1);
    }

    #[test]
    fn bundle_validates_mask_shape() {
        let img = Array3::<f32>::zeros((3, 8, 8));
        let bad_mask = Array3::<f32>::zeros((1, 4, 8));
        assert!(ConditionBundle::new(img.clone(), Some(bad_mask), PromptTokens::empty()).is_err());
        let good = Array3::<f32>::zeros((1, 8, 8));
        assert!(ConditionBundle::new(img, Some(good), PromptTokens::empty()).is_ok());
    }

    #[test]
    fn prepare_with_identity_codec_keeps_grid_and_flags_mask() {
        let img = Array3::<f32>::from_elem((3, 8, 8), 0.5);
        let mut mask = Array3::<f32>::zeros((1, 8, 8));
        mask[(0, 2, 2)] = 1.0;
        let bundle =
            ConditionBundle::new(img.clone(), Some(mask), PromptTokens::from_ids(vec![1])).unwrap();
        let prep =
            PreparedCondition::prepare(&bundle, &CodecState::Identity, (8, 8)).unwrap();
        assert_eq!(prep.latent.dim(), (3, 8, 8));
        assert!(prep.mask_present);
        assert_eq!(prep.mask_plane[(0, 2, 2)], 1.0);
        assert_eq!(prep.token_ids, vec![1]);

        let no_mask = ConditionBundle::new(img, None, PromptTokens::empty()).unwrap();
        let prep = PreparedCondition::prepare(&no_mask, &CodecState::Identity, (8, 8)).unwrap();
        assert!(!prep.mask_present);
        assert_eq!(prep.mask_plane.sum(), 0.0);
    }

    #[test]
    fn prepare_rejects_grid_mismatch() {
        let img = Array3::<f32>::zeros((3, 8, 8));
        let bundle = ConditionBundle::new(img, None, PromptTokens::empty()).unwrap();
        assert!(PreparedCondition::prepare(&bundle, &CodecState::Identity, (4, 4)).is_err());
    }
}
