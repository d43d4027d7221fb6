//! Primitive layers. Activations are single-sample `(C, H, W)` tensors;
//! batching is a loop one level up, which keeps every matrix product on a
//! single deterministic code path.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, Array1, Array2, Array3, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Visit;
use crate::tensor::Real;

/// Draws i.i.d. normal values with the given standard deviation into `arr`.
/// Values are sampled in f64 and narrowed, so the stream of draws is the same
/// whatever the working scalar type.
pub fn fill_normal<F: Real>(rng: &mut ChaCha8Rng, arr: &mut ArrayViewMutD<'_, F>, std: f64) {
    for v in arr.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = F::from_f64(z * std);
    }
}

/// Seeded parameter initializer. Layers are filled in construction order from
/// a single stream, so a given seed always produces the same model.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-style fan-in scaling, the usual choice before SiLU nonlinearities.
    pub fn kaiming<F: Real>(&mut self, arr: &mut ArrayViewMutD<'_, F>, fan_in: usize) {
        let std = (2.0 / fan_in as f64).sqrt();
        fill_normal(&mut self.rng, arr, std);
    }

    pub fn normal<F: Real>(&mut self, arr: &mut ArrayViewMutD<'_, F>, std: f64) {
        fill_normal(&mut self.rng, arr, std);
    }
}

// ---------------------------------------------------------------------------
// Convolution

/// Square-kernel 2D convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Real> {
    pub weight: Array4<F>, // (out, in, k, k)
    pub bias: Array1<F>,
    pub stride: usize,
    pub padding: usize,
}

/// Forward byproducts needed by the backward pass.
pub struct ConvCache<F: Real> {
    cols: Array2<F>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

pub struct ConvGrads<F: Real> {
    pub weight: Array4<F>,
    pub bias: Array1<F>,
}

/// Unfolds `x` into a `(c*k*k, ho*wo)` patch matrix (zero padding).
fn im2col<F: Real>(
    x: &Array3<F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<F>, (usize, usize)) {
    let (c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<F>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..ho {
                    let i = (oi * stride + ki) as isize - pad as isize;
                    if i < 0 || i >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let j = (oj * stride + kj) as isize - pad as isize;
                        if j < 0 || j >= w as isize {
                            continue;
                        }
                        cols[(row, oi * wo + oj)] = x[(ci, i as usize, j as usize)];
                    }
                }
            }
        }
    }
    (cols, (ho, wo))
}

/// Adjoint of [`im2col`]: scatter-adds patch-matrix gradients back onto the
/// input grid.
fn col2im<F: Real>(
    cols: &Array2<F>,
    in_shape: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
) -> Array3<F> {
    let (c, h, w) = in_shape;
    let (ho, wo) = out_hw;
    let mut x = Array3::<F>::zeros(in_shape);
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..ho {
                    let i = (oi * stride + ki) as isize - pad as isize;
                    if i < 0 || i >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let j = (oj * stride + kj) as isize - pad as isize;
                        if j < 0 || j >= w as isize {
                            continue;
                        }
                        x[(ci, i as usize, j as usize)] += cols[(row, oi * wo + oj)];
                    }
                }
            }
        }
    }
    x
}

impl<F: Real> Conv2d<F> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Array4::zeros((cout, cin, k, k)),
            bias: Array1::zeros(cout),
            stride,
            padding,
        }
    }

    pub fn init(&mut self, init: &mut Initializer) {
        let (_, cin, k, _) = self.weight.dim();
        init.kaiming(&mut self.weight.view_mut().into_dyn(), cin * k * k);
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn forward(&self, x: &Array3<F>) -> Array3<F> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array3<F>) -> (Array3<F>, ConvCache<F>) {
        let (cout, cin, k, _) = self.weight.dim();
        assert_eq!(x.dim().0, cin, "conv input channels");
        let (cols, (ho, wo)) = im2col(x, k, self.stride, self.padding);
        let wmat = self
            .weight
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .expect("conv weight is contiguous");
        let mut out = Array2::<F>::zeros((cout, ho * wo));
        general_mat_mul(F::one(), &wmat, &cols, F::zero(), &mut out);
        for (mut row, b) in out.outer_iter_mut().zip(self.bias.iter()) {
            let b = *b;
            row.mapv_inplace(|v| v + b);
        }
        let out = out
            .into_shape_with_order((cout, ho, wo))
            .expect("conv output is contiguous");
        (
            out,
            ConvCache {
                cols,
                in_shape: x.dim(),
                out_hw: (ho, wo),
            },
        )
    }

    /// Backward pass. Returns the input gradient if `want_input`, and the
    /// parameter gradients if `want_params`.
    pub fn backward(
        &self,
        cache: &ConvCache<F>,
        gout: &Array3<F>,
        want_params: bool,
        want_input: bool,
    ) -> (Option<Array3<F>>, Option<ConvGrads<F>>) {
        let (cout, cin, k, _) = self.weight.dim();
        let (ho, wo) = cache.out_hw;
        let g = gout
            .view()
            .into_shape_with_order((cout, ho * wo))
            .expect("gradient is contiguous");
        let params = want_params.then(|| {
            let mut gw = Array2::<F>::zeros((cout, cin * k * k));
            general_mat_mul(F::one(), &g, &cache.cols.t(), F::zero(), &mut gw);
            let gb = g.sum_axis(Axis(1));
            ConvGrads {
                weight: gw
                    .into_shape_with_order((cout, cin, k, k))
                    .expect("weight gradient is contiguous"),
                bias: gb,
            }
        });
        let input = want_input.then(|| {
            let wmat = self
                .weight
                .view()
                .into_shape_with_order((cout, cin * k * k))
                .expect("conv weight is contiguous");
            let mut gcols = Array2::<F>::zeros((cin * k * k, ho * wo));
            general_mat_mul(F::one(), &wmat.t(), &g, F::zero(), &mut gcols);
            col2im(&gcols, cache.in_shape, k, self.stride, self.padding, cache.out_hw)
        });
        (input, params)
    }
}

impl<F: Real> Visit<F> for Conv2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&format!("{prefix}.weight"), self.weight.view().into_dyn());
        f(&format!("{prefix}.bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(
            &format!("{prefix}.weight"),
            self.weight.view_mut().into_dyn(),
        );
        f(&format!("{prefix}.bias"), self.bias.view_mut().into_dyn());
    }
}

// ---------------------------------------------------------------------------
// Group normalization

#[derive(Debug, Clone)]
pub struct GroupNorm<F: Real> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub groups: usize,
    pub eps: f64,
}

pub struct GnCache<F: Real> {
    xhat: Array3<F>,
    inv_std: Vec<F>,
}

pub struct GnGrads<F: Real> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

impl<F: Real> GroupNorm<F> {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(
            groups >= 1 && channels % groups == 0,
            "group count {groups} must divide channel count {channels}"
        );
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> Array3<F> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array3<F>) -> (Array3<F>, GnCache<F>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.gamma.len(), "group norm channels");
        let per = c / self.groups;
        let n = F::from_f64((per * h * w) as f64);
        let mut xhat = Array3::<F>::zeros((c, h, w));
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let slice = x.slice(ndarray::s![g * per..(g + 1) * per, .., ..]);
            let mut mean = F::zero();
            for v in slice.iter() {
                mean += *v;
            }
            mean = mean / n;
            let mut var = F::zero();
            for v in slice.iter() {
                let d = *v - mean;
                var += d * d;
            }
            var = var / n;
            let istd = F::one() / (var + F::from_f64(self.eps)).sqrt();
            inv_std.push(istd);
            let mut dst = xhat.slice_mut(ndarray::s![g * per..(g + 1) * per, .., ..]);
            dst.zip_mut_with(&slice, |d, s| *d = (*s - mean) * istd);
        }
        let mut y = xhat.clone();
        for (ci, mut plane) in y.outer_iter_mut().enumerate() {
            let (ga, be) = (self.gamma[ci], self.beta[ci]);
            plane.mapv_inplace(|v| v * ga + be);
        }
        (y, GnCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &GnCache<F>,
        gout: &Array3<F>,
        want_params: bool,
        want_input: bool,
    ) -> (Option<Array3<F>>, Option<GnGrads<F>>) {
        let (c, h, w) = gout.dim();
        let per = c / self.groups;
        let params = want_params.then(|| {
            let mut ggamma = Array1::<F>::zeros(c);
            let mut gbeta = Array1::<F>::zeros(c);
            for ci in 0..c {
                let go = gout.index_axis(Axis(0), ci);
                let xh = cache.xhat.index_axis(Axis(0), ci);
                let mut sg = F::zero();
                let mut sb = F::zero();
                for (g, x) in go.iter().zip(xh.iter()) {
                    sg += *g * *x;
                    sb += *g;
                }
                ggamma[ci] = sg;
                gbeta[ci] = sb;
            }
            GnGrads {
                gamma: ggamma,
                beta: gbeta,
            }
        });
        let input = want_input.then(|| {
            let n = F::from_f64((per * h * w) as f64);
            let mut gx = Array3::<F>::zeros((c, h, w));
            for g in 0..self.groups {
                let range = ndarray::s![g * per..(g + 1) * per, .., ..];
                let go = gout.slice(range);
                let xh = cache.xhat.slice(range);
                // d xhat = gout * gamma, per channel
                let mut dxhat = go.to_owned();
                for (ci, mut plane) in dxhat.outer_iter_mut().enumerate() {
                    let ga = self.gamma[g * per + ci];
                    plane.mapv_inplace(|v| v * ga);
                }
                let mut sum_d = F::zero();
                let mut sum_dx = F::zero();
                for (d, x) in dxhat.iter().zip(xh.iter()) {
                    sum_d += *d;
                    sum_dx += *d * *x;
                }
                let istd = cache.inv_std[g];
                let mut dst = gx.slice_mut(range);
                ndarray::Zip::from(&mut dst)
                    .and(&dxhat)
                    .and(&xh)
                    .for_each(|o, d, x| {
                        *o = istd / n * (n * *d - sum_d - *x * sum_dx);
                    });
            }
            gx
        });
        (input, params)
    }
}

impl<F: Real> Visit<F> for GroupNorm<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&format!("{prefix}.gamma"), self.gamma.view().into_dyn());
        f(&format!("{prefix}.beta"), self.beta.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(
            &format!("{prefix}.gamma"),
            self.gamma.view_mut().into_dyn(),
        );
        f(&format!("{prefix}.beta"), self.beta.view_mut().into_dyn());
    }
}

// ---------------------------------------------------------------------------
// SiLU

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: Real>(x: &Array3<F>) -> Array3<F> {
    x.mapv(|v| v * sigmoid(v))
}

/// `d/dx [x * sigmoid(x)] = sigmoid(x) * (1 + x * (1 - sigmoid(x)))`.
pub fn silu_backward<F: Real>(x: &Array3<F>, gout: &Array3<F>) -> Array3<F> {
    let mut gx = gout.clone();
    gx.zip_mut_with(x, |g, v| {
        let s = sigmoid(*v);
        *g = *g * s * (F::one() + *v * (F::one() - s));
    });
    gx
}

pub fn silu1<F: Real>(x: &Array1<F>) -> Array1<F> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu1_backward<F: Real>(x: &Array1<F>, gout: &Array1<F>) -> Array1<F> {
    let mut gx = gout.clone();
    gx.zip_mut_with(x, |g, v| {
        let s = sigmoid(*v);
        *g = *g * s * (F::one() + *v * (F::one() - s));
    });
    gx
}

// ---------------------------------------------------------------------------
// Linear

#[derive(Debug, Clone)]
pub struct Linear<F: Real> {
    pub weight: Array2<F>, // (out, in)
    pub bias: Array1<F>,
}

pub struct LinearGrads<F: Real> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    pub fn new(cin: usize, cout: usize) -> Self {
        Self {
            weight: Array2::zeros((cout, cin)),
            bias: Array1::zeros(cout),
        }
    }

    pub fn init(&mut self, init: &mut Initializer) {
        let fan_in = self.weight.dim().1;
        init.kaiming(&mut self.weight.view_mut().into_dyn(), fan_in);
    }

    pub fn forward(&self, x: &Array1<F>) -> Array1<F> {
        self.weight.dot(x) + &self.bias
    }

    pub fn backward(
        &self,
        x: &Array1<F>,
        gout: &Array1<F>,
        want_params: bool,
        want_input: bool,
    ) -> (Option<Array1<F>>, Option<LinearGrads<F>>) {
        let params = want_params.then(|| {
            let gw = gout
                .view()
                .insert_axis(Axis(1))
                .dot(&x.view().insert_axis(Axis(0)));
            LinearGrads {
                weight: gw,
                bias: gout.clone(),
            }
        });
        let input = want_input.then(|| self.weight.t().dot(gout));
        (input, params)
    }
}

impl<F: Real> Visit<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        f(&format!("{prefix}.weight"), self.weight.view().into_dyn());
        f(&format!("{prefix}.bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        f(
            &format!("{prefix}.weight"),
            self.weight.view_mut().into_dyn(),
        );
        f(&format!("{prefix}.bias"), self.bias.view_mut().into_dyn());
    }
}

// ---------------------------------------------------------------------------
// Resampling and channel plumbing

/// Nearest-neighbor 2x upsample.
pub fn upsample2<F: Real>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<F>::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[(ci, i, j)];
                y[(ci, 2 * i, 2 * j)] = v;
                y[(ci, 2 * i + 1, 2 * j)] = v;
                y[(ci, 2 * i, 2 * j + 1)] = v;
                y[(ci, 2 * i + 1, 2 * j + 1)] = v;
            }
        }
    }
    y
}

/// Adjoint of [`upsample2`]: each input cell collects its 2x2 block.
pub fn upsample2_backward<F: Real>(gout: &Array3<F>) -> Array3<F> {
    let (c, h2, w2) = gout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                gx[(ci, i, j)] = gout[(ci, 2 * i, 2 * j)]
                    + gout[(ci, 2 * i + 1, 2 * j)]
                    + gout[(ci, 2 * i, 2 * j + 1)]
                    + gout[(ci, 2 * i + 1, 2 * j + 1)];
            }
        }
    }
    gx
}

pub fn concat_channels<F: Real>(a: &Array3<F>, b: &Array3<F>) -> Array3<F> {
    concatenate(Axis(0), &[a.view(), b.view()]).expect("channel concat shapes")
}

pub fn split_channels<F: Real>(x: &Array3<F>, first: usize) -> (Array3<F>, Array3<F>) {
    let a = x.slice(ndarray::s![..first, .., ..]).to_owned();
    let b = x.slice(ndarray::s![first.., .., ..]).to_owned();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::standard_normal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Central finite difference of `f` at `x[idx]`.
    fn fd<FN: FnMut(&Array3<f64>) -> f64>(
        mut f: FN,
        x: &Array3<f64>,
        idx: (usize, usize, usize),
        h: f64,
    ) -> f64 {
        let mut xp = x.clone();
        xp[idx] += h;
        let fp = f(&xp);
        let mut xm = x.clone();
        xm[idx] -= h;
        let fm = f(&xm);
        (fp - fm) / (2.0 * h)
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut conv = Conv2d::<f64>::new(1, 1, 3, 1, 1);
        conv.weight[(0, 0, 1, 1)] = 1.0;
        let x = standard_normal(&mut rng(0), (1, 5, 5));
        let y = conv.forward(&x);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_known_3x3_sum() {
        // All-ones 3x3 kernel over a 3x3 input of ones, padding 1: the center
        // output sees all nine cells, a corner sees four.
        let mut conv = Conv2d::<f64>::new(1, 1, 3, 1, 1);
        conv.weight.fill(1.0);
        let x = Array3::<f64>::ones((1, 3, 3));
        let y = conv.forward(&x);
        assert_eq!(y[(0, 1, 1)], 9.0);
        assert_eq!(y[(0, 0, 0)], 4.0);
        assert_eq!(y[(0, 0, 1)], 6.0);
    }

    #[test]
    fn conv_stride_two_halves_spatial_dims() {
        let conv = Conv2d::<f64>::new(2, 3, 3, 2, 1);
        let x = standard_normal(&mut rng(1), (2, 8, 8));
        let y = conv.forward(&x);
        assert_eq!(y.dim(), (3, 4, 4));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 1, 1);
        let mut init = Initializer::new(42);
        conv.init(&mut init);
        fill_normal(&mut rng(2), &mut conv.bias.view_mut().into_dyn(), 0.5);
        let x = standard_normal(&mut rng(3), (2, 4, 4));
        // Loss: weighted sum of outputs, weights fixed by a seeded draw.
        let wsum: Array3<f64> = standard_normal(&mut rng(4), (3, 4, 4));
        let (y, cache) = conv.forward_cached(&x);
        assert_eq!(y.dim(), (3, 4, 4));
        let (gx, gp) = conv.backward(&cache, &wsum, true, true);
        let gx = gx.unwrap();
        let gp = gp.unwrap();
        let loss = |inp: &Array3<f64>| (conv.forward(inp) * &wsum).sum();
        for idx in [(0, 0, 0), (1, 2, 3), (0, 3, 1)] {
            let num = fd(loss, &x, idx, 1e-5);
            assert!((gx[idx] - num).abs() < 1e-8, "{} vs {}", gx[idx], num);
        }
        // Weight gradient, spot-checked the same way.
        for widx in [(0, 0, 0, 0), (2, 1, 2, 1)] {
            let mut cp = conv.clone();
            cp.weight[widx] += 1e-5;
            let fp = (cp.forward(&x) * &wsum).sum();
            cp.weight[widx] -= 2e-5;
            let fm = (cp.forward(&x) * &wsum).sum();
            let num = (fp - fm) / 2e-5;
            assert!((gp.weight[widx] - num).abs() < 1e-8);
        }
        let num_bias = wsum.index_axis(Axis(0), 1).sum();
        assert!((gp.bias[1] - num_bias).abs() < 1e-10);
    }

    #[test]
    fn conv_stride_two_backward_matches_finite_differences() {
        let mut conv = Conv2d::<f64>::new(2, 2, 3, 2, 1);
        conv.init(&mut Initializer::new(7));
        let x = standard_normal(&mut rng(8), (2, 6, 6));
        let wsum: Array3<f64> = standard_normal(&mut rng(9), (2, 3, 3));
        let (_, cache) = conv.forward_cached(&x);
        let (gx, _) = conv.backward(&cache, &wsum, false, true);
        let gx = gx.unwrap();
        let loss = |inp: &Array3<f64>| (conv.forward(inp) * &wsum).sum();
        for idx in [(0, 0, 0), (1, 3, 2), (0, 5, 5)] {
            let num = fd(loss, &x, idx, 1e-5);
            assert!((gx[idx] - num).abs() < 1e-8);
        }
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let gn = GroupNorm::<f64>::new(4, 2);
        let x = standard_normal(&mut rng(5), (4, 6, 6));
        let y = gn.forward(&x);
        for g in 0..2 {
            let slice = y.slice(ndarray::s![g * 2..(g + 1) * 2, .., ..]);
            let n = slice.len() as f64;
            let mean: f64 = slice.sum() / n;
            let var: f64 = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4); // eps shifts variance slightly
        }
    }

    #[test]
    fn group_norm_affine_applies_per_channel() {
        let mut gn = GroupNorm::<f64>::new(2, 1);
        gn.gamma[1] = 3.0;
        gn.beta[1] = -1.0;
        let x = standard_normal(&mut rng(6), (2, 4, 4));
        let plain = GroupNorm::<f64>::new(2, 1).forward(&x);
        let y = gn.forward(&x);
        for (a, b) in plain
            .index_axis(Axis(0), 1)
            .iter()
            .zip(y.index_axis(Axis(0), 1).iter())
        {
            assert!((a * 3.0 - 1.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn group_norm_backward_matches_finite_differences() {
        let mut gn = GroupNorm::<f64>::new(4, 2);
        fill_normal(&mut rng(10), &mut gn.gamma.view_mut().into_dyn(), 0.3);
        gn.gamma.mapv_inplace(|v| v + 1.0);
        fill_normal(&mut rng(11), &mut gn.beta.view_mut().into_dyn(), 0.3);
        let x = standard_normal(&mut rng(12), (4, 3, 3));
        let wsum: Array3<f64> = standard_normal(&mut rng(13), (4, 3, 3));
        let (_, cache) = gn.forward_cached(&x);
        let (gx, gp) = gn.backward(&cache, &wsum, true, true);
        let gx = gx.unwrap();
        let gp = gp.unwrap();
        let loss = |inp: &Array3<f64>| (gn.forward(inp) * &wsum).sum();
        for idx in [(0, 0, 0), (3, 2, 1), (1, 1, 1), (2, 0, 2)] {
            let num = fd(loss, &x, idx, 1e-6);
            assert!(
                (gx[idx] - num).abs() < 1e-6,
                "{:?}: {} vs {}",
                idx,
                gx[idx],
                num
            );
        }
        for ci in 0..4 {
            let mut gp2 = gn.clone();
            gp2.gamma[ci] += 1e-6;
            let fp = (gp2.forward(&x) * &wsum).sum();
            gp2.gamma[ci] -= 2e-6;
            let fm = (gp2.forward(&x) * &wsum).sum();
            let num = (fp - fm) / 2e-6;
            assert!((gp.gamma[ci] - num).abs() < 1e-6);
        }
    }

    #[test]
    fn silu_values_and_gradient() {
        let x = ndarray::array![[[0.0_f64, 1.0, -2.0]]];
        let y = silu(&x);
        assert_eq!(y[(0, 0, 0)], 0.0);
        assert!((y[(0, 0, 1)] - 1.0 / (1.0 + (-1.0_f64).exp())).abs() < 1e-15);
        let g = silu_backward(&x, &Array3::ones((1, 1, 3)));
        for (i, &xv) in [0.0_f64, 1.0, -2.0].iter().enumerate() {
            let h = 1e-6;
            let f = |v: f64| v / (1.0 + (-v).exp());
            let num = (f(xv + h) - f(xv - h)) / (2.0 * h);
            assert!((g[(0, 0, i)] - num).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_forward_and_backward() {
        let mut lin = Linear::<f64>::new(3, 2);
        lin.init(&mut Initializer::new(20));
        fill_normal(&mut rng(21), &mut lin.bias.view_mut().into_dyn(), 0.5);
        let x = ndarray::arr1(&[0.5, -1.0, 2.0]);
        let y = lin.forward(&x);
        for o in 0..2 {
            let expect: f64 =
                (0..3).map(|i| lin.weight[(o, i)] * x[i]).sum::<f64>() + lin.bias[o];
            assert!((y[o] - expect).abs() < 1e-14);
        }
        let gout = ndarray::arr1(&[1.0, -0.5]);
        let (gx, gp) = lin.backward(&x, &gout, true, true);
        let gx = gx.unwrap();
        let gp = gp.unwrap();
        for i in 0..3 {
            let expect: f64 = (0..2).map(|o| lin.weight[(o, i)] * gout[o]).sum();
            assert!((gx[i] - expect).abs() < 1e-14);
        }
        assert_eq!(gp.weight[(1, 2)], gout[1] * x[2]);
        assert_eq!(gp.bias, gout);
    }

    #[test]
    fn upsample_and_adjoint() {
        let x = ndarray::array![[[1.0_f64, 2.0], [3.0, 4.0]]];
        let y = upsample2(&x);
        assert_eq!(y.dim(), (1, 4, 4));
        assert_eq!(y[(0, 0, 0)], 1.0);
        assert_eq!(y[(0, 1, 1)], 1.0);
        assert_eq!(y[(0, 2, 3)], 4.0);
        // Adjoint identity: <up(x), g> == <x, up_backward(g)>
        let g = standard_normal(&mut rng(30), (1, 4, 4));
        let lhs = (&upsample2(&x) * &g).sum();
        let rhs = (&x * &upsample2_backward(&g)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = standard_normal::<f64>(&mut rng(31), (2, 3, 3));
        let b = standard_normal::<f64>(&mut rng(32), (4, 3, 3));
        let cat = concat_channels(&a, &b);
        assert_eq!(cat.dim(), (6, 3, 3));
        let (a2, b2) = split_channels(&cat, 2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn initializer_is_deterministic() {
        let mut c1 = Conv2d::<f32>::new(3, 4, 3, 1, 1);
        let mut c2 = Conv2d::<f32>::new(3, 4, 3, 1, 1);
        c1.init(&mut Initializer::new(99));
        c2.init(&mut Initializer::new(99));
        assert_eq!(c1.weight, c2.weight);
        let mut c3 = Conv2d::<f32>::new(3, 4, 3, 1, 1);
        c3.init(&mut Initializer::new(100));
        assert_ne!(c1.weight, c3.weight);
    }
}
