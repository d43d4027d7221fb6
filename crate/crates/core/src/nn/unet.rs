//! The conditional denoiser: a frozen base U-Net plus a trainable control
//! branch that injects conditioning through zero-initialized 1x1 projections.
//!
//! The base network sees only the noisy latent and the timestep embedding.
//! The control branch sees the noisy latent concatenated with the encoded
//! condition image, the damage-mask plane, and a mask-presence plane; its
//! timestep embedding additionally carries the averaged prompt-token
//! embedding. Because every injection projection starts at exactly zero, a
//! freshly initialized model's output is independent of the condition — the
//! control branch only learns to steer the frozen base.
//!
//! Gradients are only ever needed for the control branch and the token table,
//! so the backward pass walks the base decoder for input gradients only and
//! skips the base encoder entirely.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayViewD, ArrayViewMutD, Axis};
use serde::{Deserialize, Serialize};

use super::layers::{
    concat_channels, silu, silu1, silu1_backward, silu_backward, split_channels, upsample2,
    upsample2_backward, Conv2d, ConvCache, ConvGrads, GnCache, GroupNorm, Initializer, Linear,
};
use super::{GradStore, Visit};
use crate::condition::PreparedCondition;
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::tensor::{Latent, Real};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels of the latent space the denoiser operates in.
    pub latent_channels: usize,
    /// Base channel width; deeper stages use twice this.
    pub width: usize,
    /// Timestep-embedding dimension (even, >= 4).
    pub temb_dim: usize,
    /// Largest representable timestep.
    pub t_max: usize,
    /// Token-table rows; must cover every vocabulary id.
    pub vocab_size: usize,
    /// Group count for all normalization layers.
    pub groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            width: 16,
            temb_dim: 64,
            t_max: 1000,
            vocab_size: 8,
            groups: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 {
            return Err(Error::Config("latent_channels must be positive".into()));
        }
        if self.groups == 0 || self.width % self.groups != 0 {
            return Err(Error::Config(format!(
                "groups ({}) must divide width ({})",
                self.groups, self.width
            )));
        }
        if self.temb_dim < 4 || self.temb_dim % 2 != 0 {
            return Err(Error::Config("temb_dim must be even and at least 4".into()));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be positive".into()));
        }
        Ok(())
    }

    /// Channels fed to the control branch: noisy latent + condition latent +
    /// mask plane + mask-presence plane.
    pub fn control_in_channels(&self) -> usize {
        2 * self.latent_channels + 2
    }
}

// ---------------------------------------------------------------------------
// Residual block

/// GroupNorm -> SiLU -> Conv, with the timestep embedding projected in
/// between, and a (possibly projected) residual shortcut.
#[derive(Debug, Clone)]
pub struct ResBlock<F: Real> {
    gn1: GroupNorm<F>,
    conv1: Conv2d<F>,
    temb: Linear<F>,
    gn2: GroupNorm<F>,
    conv2: Conv2d<F>,
    shortcut: Option<Conv2d<F>>,
}

pub struct ResCache<F: Real> {
    gn1c: GnCache<F>,
    a1: Array3<F>,
    c1: ConvCache<F>,
    e: Array1<F>,
    ea: Array1<F>,
    gn2c: GnCache<F>,
    a2: Array3<F>,
    c2: ConvCache<F>,
    sc: Option<ConvCache<F>>,
}

impl<F: Real> ResBlock<F> {
    fn new(cin: usize, cout: usize, temb_dim: usize, groups: usize) -> Self {
        Self {
            gn1: GroupNorm::new(cin, groups),
            conv1: Conv2d::new(cin, cout, 3, 1, 1),
            temb: Linear::new(temb_dim, cout),
            gn2: GroupNorm::new(cout, groups),
            conv2: Conv2d::new(cout, cout, 3, 1, 1),
            shortcut: (cin != cout).then(|| Conv2d::new(cin, cout, 1, 1, 0)),
        }
    }

    fn init(&mut self, init: &mut Initializer) {
        self.conv1.init(init);
        self.temb.init(init);
        self.conv2.init(init);
        if let Some(sc) = &mut self.shortcut {
            sc.init(init);
        }
    }

    fn forward_cached(&self, x: &Array3<F>, e: &Array1<F>) -> (Array3<F>, ResCache<F>) {
        let (a1, gn1c) = self.gn1.forward_cached(x);
        let s1 = silu(&a1);
        let (mut h, c1) = self.conv1.forward_cached(&s1);
        let ea = silu1(e);
        let tv = self.temb.forward(&ea);
        for (ci, mut plane) in h.outer_iter_mut().enumerate() {
            let t = tv[ci];
            plane.mapv_inplace(|v| v + t);
        }
        let (a2, gn2c) = self.gn2.forward_cached(&h);
        let s2 = silu(&a2);
        let (h2, c2) = self.conv2.forward_cached(&s2);
        let (scv, sc) = match &self.shortcut {
            Some(conv) => {
                let (v, c) = conv.forward_cached(x);
                (v, Some(c))
            }
            None => (x.clone(), None),
        };
        (
            h2 + &scv,
            ResCache {
                gn1c,
                a1,
                c1,
                e: e.clone(),
                ea,
                gn2c,
                a2,
                c2,
                sc,
            },
        )
    }

    /// Backward pass. Parameter gradients are recorded under `prefix` when a
    /// store is supplied; the returned pair is (input gradient if requested,
    /// embedding gradient).
    fn backward(
        &self,
        cache: &ResCache<F>,
        gout: &Array3<F>,
        prefix: &str,
        mut params: Option<&mut GradStore<F>>,
        want_input: bool,
    ) -> (Option<Array3<F>>, Array1<F>) {
        let wp = params.is_some();
        let mut push_conv = |params: &mut Option<&mut GradStore<F>>, name: &str, g: ConvGrads<F>| {
            if let Some(store) = params.as_deref_mut() {
                store.add(&format!("{prefix}.{name}.weight"), g.weight.into_dyn());
                store.add(&format!("{prefix}.{name}.bias"), g.bias.into_dyn());
            }
        };
        let (d_s2, g) = self.conv2.backward(&cache.c2, gout, wp, true);
        if let Some(g) = g {
            push_conv(&mut params, "conv2", g);
        }
        let d_a2 = silu_backward(&cache.a2, &d_s2.unwrap());
        let (d_h, g) = self.gn2.backward(&cache.gn2c, &d_a2, wp, true);
        if let Some(g) = g {
            if let Some(store) = params.as_deref_mut() {
                store.add(&format!("{prefix}.gn2.gamma"), g.gamma.into_dyn());
                store.add(&format!("{prefix}.gn2.beta"), g.beta.into_dyn());
            }
        }
        let d_h = d_h.unwrap();
        let d_tv = d_h.sum_axis(Axis(2)).sum_axis(Axis(1));
        let (d_ea, g) = self.temb.backward(&cache.ea, &d_tv, wp, true);
        if let Some(g) = g {
            if let Some(store) = params.as_deref_mut() {
                store.add(&format!("{prefix}.temb.weight"), g.weight.into_dyn());
                store.add(&format!("{prefix}.temb.bias"), g.bias.into_dyn());
            }
        }
        let d_e = silu1_backward(&cache.e, &d_ea.unwrap());
        let (d_s1, g) = self.conv1.backward(&cache.c1, &d_h, wp, true);
        if let Some(g) = g {
            push_conv(&mut params, "conv1", g);
        }
        let d_a1 = silu_backward(&cache.a1, &d_s1.unwrap());
        let (d_x1, g) = self.gn1.backward(&cache.gn1c, &d_a1, wp, want_input);
        if let Some(g) = g {
            if let Some(store) = params.as_deref_mut() {
                store.add(&format!("{prefix}.gn1.gamma"), g.gamma.into_dyn());
                store.add(&format!("{prefix}.gn1.beta"), g.beta.into_dyn());
            }
        }
        let d_x = if want_input || wp {
            match (&self.shortcut, &cache.sc) {
                (Some(conv), Some(sc)) => {
                    let (d_sc, g) = conv.backward(sc, gout, wp, want_input);
                    if let Some(g) = g {
                        push_conv(&mut params, "shortcut", g);
                    }
                    want_input.then(|| d_x1.unwrap() + &d_sc.unwrap())
                }
                _ => want_input.then(|| d_x1.unwrap() + gout),
            }
        } else {
            None
        };
        (d_x, d_e)
    }
}

impl<F: Real> Visit<F> for ResBlock<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.gn1.visit(&format!("{prefix}.gn1"), f);
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.temb.visit(&format!("{prefix}.temb"), f);
        self.gn2.visit(&format!("{prefix}.gn2"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        if let Some(sc) = &self.shortcut {
            sc.visit(&format!("{prefix}.shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.gn1.visit_mut(&format!("{prefix}.gn1"), f);
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.temb.visit_mut(&format!("{prefix}.temb"), f);
        self.gn2.visit_mut(&format!("{prefix}.gn2"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
        if let Some(sc) = &mut self.shortcut {
            sc.visit_mut(&format!("{prefix}.shortcut"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Base U-Net and control branch

#[derive(Debug, Clone)]
struct BaseUnet<F: Real> {
    conv_in: Conv2d<F>,
    enc1: ResBlock<F>,
    down1: Conv2d<F>,
    enc2: ResBlock<F>,
    down2: Conv2d<F>,
    mid: ResBlock<F>,
    up1: Conv2d<F>,
    dec2: ResBlock<F>,
    up2: Conv2d<F>,
    dec1: ResBlock<F>,
    out_norm: GroupNorm<F>,
    out_conv: Conv2d<F>,
}

#[derive(Debug, Clone)]
struct ControlBranch<F: Real> {
    conv_in: Conv2d<F>,
    enc1: ResBlock<F>,
    down1: Conv2d<F>,
    enc2: ResBlock<F>,
    down2: Conv2d<F>,
    mid: ResBlock<F>,
    zero1: Conv2d<F>,
    zero2: Conv2d<F>,
    zero_mid: Conv2d<F>,
}

impl<F: Real> Visit<F> for BaseUnet<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.conv_in.visit(&format!("{prefix}.conv_in"), f);
        self.enc1.visit(&format!("{prefix}.enc1"), f);
        self.down1.visit(&format!("{prefix}.down1"), f);
        self.enc2.visit(&format!("{prefix}.enc2"), f);
        self.down2.visit(&format!("{prefix}.down2"), f);
        self.mid.visit(&format!("{prefix}.mid"), f);
        self.up1.visit(&format!("{prefix}.up1"), f);
        self.dec2.visit(&format!("{prefix}.dec2"), f);
        self.up2.visit(&format!("{prefix}.up2"), f);
        self.dec1.visit(&format!("{prefix}.dec1"), f);
        self.out_norm.visit(&format!("{prefix}.out_norm"), f);
        self.out_conv.visit(&format!("{prefix}.out_conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.conv_in.visit_mut(&format!("{prefix}.conv_in"), f);
        self.enc1.visit_mut(&format!("{prefix}.enc1"), f);
        self.down1.visit_mut(&format!("{prefix}.down1"), f);
        self.enc2.visit_mut(&format!("{prefix}.enc2"), f);
        self.down2.visit_mut(&format!("{prefix}.down2"), f);
        self.mid.visit_mut(&format!("{prefix}.mid"), f);
        self.up1.visit_mut(&format!("{prefix}.up1"), f);
        self.dec2.visit_mut(&format!("{prefix}.dec2"), f);
        self.up2.visit_mut(&format!("{prefix}.up2"), f);
        self.dec1.visit_mut(&format!("{prefix}.dec1"), f);
        self.out_norm.visit_mut(&format!("{prefix}.out_norm"), f);
        self.out_conv.visit_mut(&format!("{prefix}.out_conv"), f);
    }
}

impl<F: Real> Visit<F> for ControlBranch<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        self.conv_in.visit(&format!("{prefix}.conv_in"), f);
        self.enc1.visit(&format!("{prefix}.enc1"), f);
        self.down1.visit(&format!("{prefix}.down1"), f);
        self.enc2.visit(&format!("{prefix}.enc2"), f);
        self.down2.visit(&format!("{prefix}.down2"), f);
        self.mid.visit(&format!("{prefix}.mid"), f);
        self.zero1.visit(&format!("{prefix}.zero1"), f);
        self.zero2.visit(&format!("{prefix}.zero2"), f);
        self.zero_mid.visit(&format!("{prefix}.zero_mid"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        self.conv_in.visit_mut(&format!("{prefix}.conv_in"), f);
        self.enc1.visit_mut(&format!("{prefix}.enc1"), f);
        self.down1.visit_mut(&format!("{prefix}.down1"), f);
        self.enc2.visit_mut(&format!("{prefix}.enc2"), f);
        self.down2.visit_mut(&format!("{prefix}.down2"), f);
        self.mid.visit_mut(&format!("{prefix}.mid"), f);
        self.zero1.visit_mut(&format!("{prefix}.zero1"), f);
        self.zero2.visit_mut(&format!("{prefix}.zero2"), f);
        self.zero_mid.visit_mut(&format!("{prefix}.zero_mid"), f);
    }
}

/// Fixed sinusoidal timestep table, (t_max, dim), row `t-1` for timestep `t`.
fn sinusoidal_table<F: Real>(t_max: usize, dim: usize) -> Array2<F> {
    let half = dim / 2;
    let mut table = Array2::zeros((t_max, dim));
    for t in 1..=t_max {
        for i in 0..half {
            let exponent = if half > 1 {
                i as f64 / (half - 1) as f64
            } else {
                0.0
            };
            let freq = 10000f64.powf(-exponent);
            let angle = t as f64 * freq;
            table[(t - 1, i)] = F::from_f64(angle.sin());
            table[(t - 1, half + i)] = F::from_f64(angle.cos());
        }
    }
    table
}

/// The full denoiser: frozen base, trainable control branch, trainable token
/// table, fixed timestep table.
#[derive(Debug, Clone)]
pub struct ModelState<F: Real> {
    pub config: ModelConfig,
    base: BaseUnet<F>,
    ctrl: ControlBranch<F>,
    text_table: Array2<F>,
    temb_table: Array2<F>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache<F: Real> {
    token_ids: Vec<usize>,
    ctrl_in: ConvCache<F>,
    ctrl_enc1: ResCache<F>,
    ctrl_down1: ConvCache<F>,
    ctrl_enc2: ResCache<F>,
    ctrl_down2: ConvCache<F>,
    ctrl_mid: ResCache<F>,
    zero1: ConvCache<F>,
    zero2: ConvCache<F>,
    zero_mid: ConvCache<F>,
    up1: ConvCache<F>,
    dec2: ResCache<F>,
    up2: ConvCache<F>,
    dec1: ResCache<F>,
    out_norm: GnCache<F>,
    out_pre: Array3<F>,
    out_conv: ConvCache<F>,
}

pub fn init_model<F: Real>(config: &ModelConfig, seed: u64) -> Result<ModelState<F>> {
    config.validate()?;
    let c = config.latent_channels;
    let w = config.width;
    let d = config.temb_dim;
    let g = config.groups;
    let mut base = BaseUnet {
        conv_in: Conv2d::new(c, w, 3, 1, 1),
        enc1: ResBlock::new(w, w, d, g),
        down1: Conv2d::new(w, w, 3, 2, 1),
        enc2: ResBlock::new(w, 2 * w, d, g),
        down2: Conv2d::new(2 * w, 2 * w, 3, 2, 1),
        mid: ResBlock::new(2 * w, 2 * w, d, g),
        up1: Conv2d::new(2 * w, 2 * w, 3, 1, 1),
        dec2: ResBlock::new(4 * w, 2 * w, d, g),
        up2: Conv2d::new(2 * w, w, 3, 1, 1),
        dec1: ResBlock::new(2 * w, w, d, g),
        out_norm: GroupNorm::new(w, g),
        out_conv: Conv2d::new(w, c, 3, 1, 1),
    };
    // One stream, fixed order: base in forward order, then the control
    // branch's own input conv, then the token table.
    let mut init = Initializer::new(seed);
    base.conv_in.init(&mut init);
    base.enc1.init(&mut init);
    base.down1.init(&mut init);
    base.enc2.init(&mut init);
    base.down2.init(&mut init);
    base.mid.init(&mut init);
    base.up1.init(&mut init);
    base.dec2.init(&mut init);
    base.up2.init(&mut init);
    base.dec1.init(&mut init);
    base.out_conv.init(&mut init);
    let mut ctrl = ControlBranch {
        conv_in: Conv2d::new(config.control_in_channels(), w, 3, 1, 1),
        // Trunk starts as an exact copy of the frozen encoder.
        enc1: base.enc1.clone(),
        down1: base.down1.clone(),
        enc2: base.enc2.clone(),
        down2: base.down2.clone(),
        mid: base.mid.clone(),
        zero1: Conv2d::new(w, w, 1, 1, 0),
        zero2: Conv2d::new(2 * w, 2 * w, 1, 1, 0),
        zero_mid: Conv2d::new(2 * w, 2 * w, 1, 1, 0),
    };
    ctrl.conv_in.init(&mut init);
    let mut text_table = Array2::zeros((config.vocab_size, d));
    if config.vocab_size > 0 {
        init.normal(&mut text_table.view_mut().into_dyn(), 0.1);
    }
    Ok(ModelState {
        config: *config,
        base,
        ctrl,
        text_table,
        temb_table: sinusoidal_table(config.t_max, d),
    })
}

impl<F: Real> ModelState<F> {
    /// Base embedding for `t` and the control embedding (base + mean token
    /// vector; just the base embedding for an empty prompt).
    fn embeddings(&self, t: usize, token_ids: &[usize]) -> Result<(Array1<F>, Array1<F>)> {
        let e_base = self.temb_table.row(t - 1).to_owned();
        let mut e_ctrl = e_base.clone();
        if !token_ids.is_empty() {
            let mut text = Array1::<F>::zeros(self.config.temb_dim);
            for &id in token_ids {
                if id >= self.config.vocab_size {
                    return Err(Error::Config(format!(
                        "token id {id} outside table of {} rows",
                        self.config.vocab_size
                    )));
                }
                text += &self.text_table.row(id);
            }
            let n = F::from_f64(token_ids.len() as f64);
            e_ctrl.zip_mut_with(&text, |e, t| *e = *e + *t / n);
        }
        Ok((e_base, e_ctrl))
    }

    fn validate_inputs(&self, zt: &Latent<F>, t: usize, cond: &PreparedCondition<F>) -> Result<()> {
        if t < 1 || t > self.config.t_max {
            return Err(Error::Timestep {
                t,
                max: self.config.t_max,
            });
        }
        let (c, h, w) = zt.dim();
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "latent has {c} channels, model expects {}",
                self.config.latent_channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "latent spatial dims must be positive multiples of 4, got {h}x{w}"
            )));
        }
        if cond.latent.dim() != zt.dim() {
            return Err(Error::Shape(format!(
                "condition latent {:?} does not match noisy latent {:?}",
                cond.latent.dim(),
                zt.dim()
            )));
        }
        if cond.mask_plane.dim() != (1, h, w) {
            return Err(Error::Shape(format!(
                "mask plane {:?} does not match latent grid {h}x{w}",
                cond.mask_plane.dim()
            )));
        }
        Ok(())
    }

    /// Forward pass that also returns the caches the backward pass needs.
    pub fn forward_train(
        &self,
        zt: &Latent<F>,
        t: usize,
        cond: &PreparedCondition<F>,
    ) -> Result<(Latent<F>, ForwardCache<F>)> {
        self.validate_inputs(zt, t, cond)?;
        let (_, h, w) = zt.dim();
        let (e_base, e_ctrl) = self.embeddings(t, &cond.token_ids)?;

        // Control branch.
        let presence = Array3::from_elem(
            (1, h, w),
            if cond.mask_present { F::one() } else { F::zero() },
        );
        let x = concat_channels(
            &concat_channels(zt, &cond.latent),
            &concat_channels(&cond.mask_plane, &presence),
        );
        let (c0, ctrl_in) = self.ctrl.conv_in.forward_cached(&x);
        let (c1, ctrl_enc1) = self.ctrl.enc1.forward_cached(&c0, &e_ctrl);
        let (c1d, ctrl_down1) = self.ctrl.down1.forward_cached(&c1);
        let (c2, ctrl_enc2) = self.ctrl.enc2.forward_cached(&c1d, &e_ctrl);
        let (c2d, ctrl_down2) = self.ctrl.down2.forward_cached(&c2);
        let (cm, ctrl_mid) = self.ctrl.mid.forward_cached(&c2d, &e_ctrl);
        let (inj1, zero1) = self.ctrl.zero1.forward_cached(&c1);
        let (inj2, zero2) = self.ctrl.zero2.forward_cached(&c2);
        let (injm, zero_mid) = self.ctrl.zero_mid.forward_cached(&cm);

        // Frozen base encoder; no caches kept, nothing backpropagates here.
        let b0 = self.base.conv_in.forward(zt);
        let (s1, _) = self.base.enc1.forward_cached(&b0, &e_base);
        let d1 = self.base.down1.forward(&s1);
        let (s2, _) = self.base.enc2.forward_cached(&d1, &e_base);
        let d2 = self.base.down2.forward(&s2);
        let (m, _) = self.base.mid.forward_cached(&d2, &e_base);

        // Decoder with injections on the skip/mid tensors it consumes.
        let mp = m + &injm;
        let (u1, up1) = self.base.up1.forward_cached(&upsample2(&mp));
        let s2p = s2 + &inj2;
        let (d2o, dec2) = self.base.dec2.forward_cached(&concat_channels(&u1, &s2p), &e_base);
        let (u2, up2) = self.base.up2.forward_cached(&upsample2(&d2o));
        let s1p = s1 + &inj1;
        let (d1o, dec1) = self.base.dec1.forward_cached(&concat_channels(&u2, &s1p), &e_base);
        let (pre, out_norm) = self.base.out_norm.forward_cached(&d1o);
        let act = silu(&pre);
        let (eps_hat, out_conv) = self.base.out_conv.forward_cached(&act);

        Ok((
            eps_hat,
            ForwardCache {
                token_ids: cond.token_ids.clone(),
                ctrl_in,
                ctrl_enc1,
                ctrl_down1,
                ctrl_enc2,
                ctrl_down2,
                ctrl_mid,
                zero1,
                zero2,
                zero_mid,
                up1,
                dec2,
                up2,
                dec1,
                out_norm,
                out_pre: pre,
                out_conv,
            },
        ))
    }

    /// Accumulates gradients of the trainable parameters (control branch and
    /// token table) into `grads`, given the loss gradient at the output.
    pub fn backward(&self, cache: &ForwardCache<F>, d_eps: &Array3<F>, grads: &mut GradStore<F>) {
        let w = self.config.width;
        let push = |grads: &mut GradStore<F>, name: &str, g: ConvGrads<F>| {
            grads.add(&format!("{name}.weight"), g.weight.into_dyn());
            grads.add(&format!("{name}.bias"), g.bias.into_dyn());
        };

        // Base output head and decoder: input gradients only.
        let (d_act, _) = self.base.out_conv.backward(&cache.out_conv, d_eps, false, true);
        let d_pre = silu_backward(&cache.out_pre, &d_act.unwrap());
        let (d_d1o, _) = self.base.out_norm.backward(&cache.out_norm, &d_pre, false, true);
        let (d_cat1, _) = self
            .base
            .dec1
            .backward(&cache.dec1, &d_d1o.unwrap(), "", None, true);
        let (d_u2, d_s1p) = split_channels(&d_cat1.unwrap(), w);
        let (d_up2_in, _) = self.base.up2.backward(&cache.up2, &d_u2, false, true);
        let d_d2o = upsample2_backward(&d_up2_in.unwrap());
        let (d_cat2, _) = self
            .base
            .dec2
            .backward(&cache.dec2, &d_d2o, "", None, true);
        let (d_u1, d_s2p) = split_channels(&d_cat2.unwrap(), 2 * w);
        let (d_up1_in, _) = self.base.up1.backward(&cache.up1, &d_u1, false, true);
        let d_mp = upsample2_backward(&d_up1_in.unwrap());

        // Injection projections, then the control trunk.
        let (d_c1_inj, g) = self.ctrl.zero1.backward(&cache.zero1, &d_s1p, true, true);
        push(grads, "ctrl.zero1", g.unwrap());
        let (d_c2_inj, g) = self.ctrl.zero2.backward(&cache.zero2, &d_s2p, true, true);
        push(grads, "ctrl.zero2", g.unwrap());
        let (d_cm, g) = self.ctrl.zero_mid.backward(&cache.zero_mid, &d_mp, true, true);
        push(grads, "ctrl.zero_mid", g.unwrap());

        let (d_c2d, de_m) = self.ctrl.mid.backward(
            &cache.ctrl_mid,
            &d_cm.unwrap(),
            "ctrl.mid",
            Some(grads),
            true,
        );
        let (d_c2_trunk, g) = self
            .ctrl
            .down2
            .backward(&cache.ctrl_down2, &d_c2d.unwrap(), true, true);
        push(grads, "ctrl.down2", g.unwrap());
        let d_c2 = d_c2_inj.unwrap() + &d_c2_trunk.unwrap();
        let (d_c1d, de_2) =
            self.ctrl
                .enc2
                .backward(&cache.ctrl_enc2, &d_c2, "ctrl.enc2", Some(grads), true);
        let (d_c1_trunk, g) = self
            .ctrl
            .down1
            .backward(&cache.ctrl_down1, &d_c1d.unwrap(), true, true);
        push(grads, "ctrl.down1", g.unwrap());
        let d_c1 = d_c1_inj.unwrap() + &d_c1_trunk.unwrap();
        let (d_c0, de_1) =
            self.ctrl
                .enc1
                .backward(&cache.ctrl_enc1, &d_c1, "ctrl.enc1", Some(grads), true);
        let (_, g) = self
            .ctrl
            .conv_in
            .backward(&cache.ctrl_in, &d_c0.unwrap(), true, false);
        push(grads, "ctrl.conv_in", g.unwrap());

        // Token table: the prompt enters as the mean of its token rows.
        if !cache.token_ids.is_empty() {
            let de = de_m + &de_2 + &de_1;
            let n = F::from_f64(cache.token_ids.len() as f64);
            let mut table_grad: ArrayD<F> =
                ArrayD::zeros(vec![self.config.vocab_size, self.config.temb_dim]);
            for &id in &cache.token_ids {
                let mut row = table_grad.index_axis_mut(Axis(0), id);
                for (r, d) in row.iter_mut().zip(de.iter()) {
                    *r += *d / n;
                }
            }
            grads.add("text.table", table_grad);
        }
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.len());
        n
    }

    /// Whether a parameter moves during fine-tuning.
    pub fn is_trainable(name: &str) -> bool {
        name.starts_with("ctrl.") || name == "text.table"
    }
}

impl<F: Real> Visit<F> for ModelState<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {
        let join = |s: &str| {
            if prefix.is_empty() {
                s.to_owned()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.base.visit(&join("base"), f);
        self.ctrl.visit(&join("ctrl"), f);
        f(&join("text.table"), self.text_table.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {
        let join = |s: &str| {
            if prefix.is_empty() {
                s.to_owned()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.base.visit_mut(&join("base"), f);
        self.ctrl.visit_mut(&join("ctrl"), f);
        f(&join("text.table"), self.text_table.view_mut().into_dyn());
    }
}

impl<F: Real> NoisePredictor<F> for ModelState<F> {
    fn predict(&self, zt: &Latent<F>, t: usize, cond: &PreparedCondition<F>) -> Result<Latent<F>> {
        self.forward_train(zt, t, cond).map(|(eps, _)| eps)
    }
}
