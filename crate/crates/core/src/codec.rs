//! Latent codecs: invertible-ish maps between images in `[0,1]` and the
//! latent space the diffusion process runs in.
//!
//! Two codecs are provided. The identity codec is a pure affine map to
//! `[-1,1]` with no parameters and spatial factor 1; it makes the latent space
//! equal to (rescaled) pixel space and is the default for small images. The
//! conv codec is a small trained autoencoder with spatial factor 2.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    silu, silu_backward, upsample2, upsample2_backward, Conv2d, ConvCache, Initializer,
};
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::{GradStore, Visit};
use crate::tensor::{signed_to_unit_clamped, unit_to_signed, ImageTensor, Latent, Real};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConvCodecConfig {
    pub width: usize,
    pub latent_channels: usize,
}

impl Default for ConvCodecConfig {
    fn default() -> Self {
        Self {
            width: 16,
            latent_channels: 4,
        }
    }
}

/// Trained stride-2 autoencoder.
#[derive(Debug, Clone)]
pub struct ConvCodec<F: Real> {
    pub config: ConvCodecConfig,
    enc1: Conv2d<F>,
    enc2: Conv2d<F>,
    enc3: Conv2d<F>,
    dec1: Conv2d<F>,
    dec2: Conv2d<F>,
    dec3: Conv2d<F>,
}

/// Forward byproducts for one training example.
pub struct CodecCache<F: Real> {
    a1: Array3<F>,
    a2: Array3<F>,
    b1: Array3<F>,
    b2: Array3<F>,
    c1: ConvCache<F>,
    c2: ConvCache<F>,
    c3: ConvCache<F>,
    d1: ConvCache<F>,
    d2: ConvCache<F>,
    d3: ConvCache<F>,
}

impl<F: Real> ConvCodec<F> {
    pub fn new(config: ConvCodecConfig, seed: u64) -> Self {
        let w = config.width;
        let c = config.latent_channels;
        let mut codec = Self {
            config,
            enc1: Conv2d::new(3, w, 3, 1, 1),
            enc2: Conv2d::new(w, w, 3, 2, 1),
            enc3: Conv2d::new(w, c, 3, 1, 1),
            dec1: Conv2d::new(c, w, 3, 1, 1),
            dec2: Conv2d::new(w, w, 3, 1, 1),
            dec3: Conv2d::new(w, 3, 3, 1, 1),
        };
        let mut init = Initializer::new(seed);
        codec.enc1.init(&mut init);
        codec.enc2.init(&mut init);
        codec.enc3.init(&mut init);
        codec.dec1.init(&mut init);
        codec.dec2.init(&mut init);
        codec.dec3.init(&mut init);
        codec
    }

    pub fn encode(&self, image: &ImageTensor<F>) -> Result<Latent<F>> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("conv codec expects 3 channels, got {c}")));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "conv codec needs even spatial dims, got {h}x{w}"
            )));
        }
        let s = unit_to_signed(image);
        let h1 = silu(&self.enc1.forward(&s));
        let h2 = silu(&self.enc2.forward(&h1));
        Ok(self.enc3.forward(&h2))
    }

    pub fn decode(&self, z: &Latent<F>) -> Result<ImageTensor<F>> {
        Ok(signed_to_unit_clamped(&self.decode_signed(z)?))
    }

    /// Decoder output before the affine clamp back to `[0,1]`; training
    /// compares in this space so saturated pixels still carry gradient.
    fn decode_signed(&self, z: &Latent<F>) -> Result<Array3<F>> {
        if z.dim().0 != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {} channels, codec expects {}",
                z.dim().0,
                self.config.latent_channels
            )));
        }
        let d1 = silu(&self.dec1.forward(z));
        let u = upsample2(&d1);
        let d2 = silu(&self.dec2.forward(&u));
        Ok(self.dec3.forward(&d2))
    }

    /// Full roundtrip with caches; returns the signed reconstruction.
    fn forward_train(&self, image: &ImageTensor<F>) -> (Array3<F>, CodecCache<F>) {
        let s = unit_to_signed(image);
        let (a1, c1) = self.enc1.forward_cached(&s);
        let s1 = silu(&a1);
        let (a2, c2) = self.enc2.forward_cached(&s1);
        let s2 = silu(&a2);
        let (z, c3) = self.enc3.forward_cached(&s2);
        let (b1, d1) = self.dec1.forward_cached(&z);
        let t1 = silu(&b1);
        let u = upsample2(&t1);
        let (b2, d2) = self.dec2.forward_cached(&u);
        let t2 = silu(&b2);
        let (out, d3) = self.dec3.forward_cached(&t2);
        (
            out,
            CodecCache {
                a1,
                a2,
                b1,
                b2,
                c1,
                c2,
                c3,
                d1,
                d2,
                d3,
            },
        )
    }

    fn backward(&self, cache: &CodecCache<F>, d_out: &Array3<F>, prefix: &str, grads: &mut GradStore<F>) {
        let mut push = |grads: &mut GradStore<F>, name: &str, g: crate::nn::layers::ConvGrads<F>| {
            grads.add(&format!("{prefix}.{name}.weight"), g.weight.into_dyn());
            grads.add(&format!("{prefix}.{name}.bias"), g.bias.into_dyn());
        };
        let (d_t2, g) = self.dec3.backward(&cache.d3, d_out, true, true);
        push(grads, "dec3", g.unwrap());
        let d_b2 = silu_backward(&cache.b2, &d_t2.unwrap());
        let (d_u, g) = self.dec2.backward(&cache.d2, &d_b2, true, true);
        push(grads, "dec2", g.unwrap());
        let d_t1 = upsample2_backward(&d_u.unwrap());
        let d_b1 = silu_backward(&cache.b1, &d_t1);
        let (d_z, g) = self.dec1.backward(&cache.d1, &d_b1, true, true);
        push(grads, "dec1", g.unwrap());
        let (d_s2, g) = self.enc3.backward(&cache.c3, &d_z.unwrap(), true, true);
        push(grads, "enc3", g.unwrap());
        let d_a2 = silu_backward(&cache.a2, &d_s2.unwrap());
        let (d_s1, g) = self.enc2.backward(&cache.c2, &d_a2, true, true);
        push(grads, "enc2", g.unwrap());
        let d_a1 = silu_backward(&cache.a1, &d_s1.unwrap());
        let (_, g) = self.enc1.backward(&cache.c1, &d_a1, true, false);
        push(grads, "enc1", g.unwrap());
    }
}

impl<F: Real> Visit<F> for ConvCodec<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, F>)) {
        self.enc1.visit(&format!("{prefix}.enc1"), f);
        self.enc2.visit(&format!("{prefix}.enc2"), f);
        self.enc3.visit(&format!("{prefix}.enc3"), f);
        self.dec1.visit(&format!("{prefix}.dec1"), f);
        self.dec2.visit(&format!("{prefix}.dec2"), f);
        self.dec3.visit(&format!("{prefix}.dec3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>)) {
        self.enc1.visit_mut(&format!("{prefix}.enc1"), f);
        self.enc2.visit_mut(&format!("{prefix}.enc2"), f);
        self.enc3.visit_mut(&format!("{prefix}.enc3"), f);
        self.dec1.visit_mut(&format!("{prefix}.dec1"), f);
        self.dec2.visit_mut(&format!("{prefix}.dec2"), f);
        self.dec3.visit_mut(&format!("{prefix}.dec3"), f);
    }
}

/// The codec a pipeline runs with.
#[derive(Debug, Clone)]
pub enum CodecState<F: Real> {
    /// Affine `[0,1] <-> [-1,1]`, channels untouched, factor 1.
    Identity,
    Conv(ConvCodec<F>),
}

impl<F: Real> CodecState<F> {
    pub fn encode(&self, image: &ImageTensor<F>) -> Result<Latent<F>> {
        match self {
            CodecState::Identity => Ok(unit_to_signed(image)),
            CodecState::Conv(c) => c.encode(image),
        }
    }

    /// Decodes and clamps back to unit range.
    pub fn decode(&self, z: &Latent<F>) -> Result<ImageTensor<F>> {
        match self {
            CodecState::Identity => Ok(signed_to_unit_clamped(z)),
            CodecState::Conv(c) => c.decode(z),
        }
    }

    pub fn spatial_factor(&self) -> usize {
        match self {
            CodecState::Identity => 1,
            CodecState::Conv(_) => 2,
        }
    }

    /// Latent shape for a given image shape.
    pub fn latent_shape(&self, image_shape: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (c, h, w) = image_shape;
        match self {
            CodecState::Identity => Ok((c, h, w)),
            CodecState::Conv(codec) => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Shape(format!(
                        "conv codec needs even spatial dims, got {h}x{w}"
                    )));
                }
                Ok((codec.config.latent_channels, h / 2, w / 2))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub codec: ConvCodecConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            codec: ConvCodecConfig::default(),
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecTrainReport {
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

/// Trains a conv codec on reconstruction MSE (computed in signed space).
pub fn train_codec<F: Real>(
    images: &[ImageTensor<F>],
    config: &CodecTrainConfig,
    seed: u64,
) -> Result<(ConvCodec<F>, CodecTrainReport)> {
    if images.is_empty() {
        return Err(Error::Dataset("codec training needs at least one image".into()));
    }
    if config.batch_size == 0 || config.steps == 0 {
        return Err(Error::Config("codec training needs steps > 0 and batch_size > 0".into()));
    }
    let mut codec = ConvCodec::<F>::new(config.codec, seed);
    let mut opt = Adam::new(AdamConfig {
        lr: config.lr,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(crate::tensor::derive_seed(seed, "codec-batches"));
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut grads = GradStore::new();
        let mut loss_sum = 0.0;
        for _ in 0..config.batch_size {
            let idx = rng.gen_range(0..images.len());
            let img = &images[idx];
            let target = unit_to_signed(img);
            let (out, cache) = codec.forward_train(img);
            let n = F::from_f64(out.len() as f64);
            let mut d_out = out.clone();
            d_out.zip_mut_with(&target, |o, t| *o = (*o - *t) * F::from_f64(2.0) / n);
            let mut loss = F::zero();
            for (o, t) in out.iter().zip(target.iter()) {
                let d = *o - *t;
                loss += d * d;
            }
            loss_sum += (loss / n).to_f64();
            codec.backward(&cache, &d_out, "codec", &mut grads);
        }
        grads.scale(F::from_f64(1.0 / config.batch_size as f64));
        let mean_loss = loss_sum / config.batch_size as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "codec loss became non-finite at step {step}"
            )));
        }
        losses.push(mean_loss);
        opt.step(&mut codec, "codec", &grads);
    }
    let final_loss = *losses.last().unwrap();
    Ok((codec, CodecTrainReport { losses, final_loss }))
}
