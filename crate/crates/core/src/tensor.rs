//! Scalar abstraction and small tensor helpers shared across the crate.
//!
//! All heavy math is generic over [`Real`] so the same kernels run in `f32`
//! for training speed and in `f64` where tests need tight tolerances.

use ndarray::{Array1, Array3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Floating-point scalar the numeric core is generic over.
pub trait Real:
    ndarray::LinalgScalar
    + num_traits::Float
    + num_traits::FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Latent-space tensor, laid out (channels, height, width).
pub type Latent<F> = Array3<F>;

/// Pixel-space tensor in [0, 1], laid out (channels, height, width).
pub type ImageTensor<F> = Array3<F>;

/// Binary mask, (1, height, width), entries in {0, 1}.
pub type MaskTensor<F> = Array3<F>;

/// Embedding vector.
pub type Embedding<F> = Array1<F>;

pub fn check_finite<F: Real>(x: &Array3<F>, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Range(format!("{what} contains NaN or Inf")))
    }
}

pub fn check_same_shape<F: Real>(a: &Array3<F>, b: &Array3<F>, what: &str) -> Result<()> {
    if a.dim() == b.dim() {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )))
    }
}

/// Affine map [0,1] -> [-1,1] applied before encoding.
pub fn unit_to_signed<F: Real>(img: &ImageTensor<F>) -> Array3<F> {
    let two = F::from_f64(2.0);
    img.mapv(|v| v * two - F::one())
}

/// Inverse affine map [-1,1] -> [0,1], clamped into range.
pub fn signed_to_unit_clamped<F: Real>(x: &Array3<F>) -> ImageTensor<F> {
    let half = F::from_f64(0.5);
    x.mapv(|v| num_traits::clamp((v + F::one()) * half, F::zero(), F::one()))
}

pub fn clamp_unit<F: Real>(img: &mut Array3<F>) {
    img.mapv_inplace(|v| num_traits::clamp(v, F::zero(), F::one()));
}

/// Rec.601 luminance of a (3,H,W) image, returned as (1,H,W).
pub fn luminance<F: Real>(img: &ImageTensor<F>) -> Array3<F> {
    let (c, h, w) = img.dim();
    assert_eq!(c, 3, "luminance expects an RGB image");
    let (wr, wg, wb) = (
        F::from_f64(0.299),
        F::from_f64(0.587),
        F::from_f64(0.114),
    );
    let mut out = Array3::zeros((1, h, w));
    for y in 0..h {
        for x in 0..w {
            out[(0, y, x)] = wr * img[(0, y, x)] + wg * img[(1, y, x)] + wb * img[(2, y, x)];
        }
    }
    out
}

/// Nearest-neighbor resize of a (C,H,W) tensor to (C,h,w).
pub fn resize_nearest<F: Real>(x: &Array3<F>, h: usize, w: usize) -> Array3<F> {
    let (c, src_h, src_w) = x.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            let sy = (y * src_h) / h;
            for xx in 0..w {
                let sx = (xx * src_w) / w;
                out[(ch, y, xx)] = x[(ch, sy, sx)];
            }
        }
    }
    out
}

/// Seeded unit-Gaussian tensor. Values are drawn in f64 and converted so the
/// draw sequence is identical across scalar instantiations.
pub fn standard_normal<F: Real, R: Rng>(rng: &mut R, shape: (usize, usize, usize)) -> Array3<F> {
    let mut out = Array3::zeros(shape);
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = F::from_f64(z);
    }
    out
}

/// FNV-1a over (seed, label); used to derive independent per-item seeds so
/// dataset iteration order never affects an item's randomness.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}
