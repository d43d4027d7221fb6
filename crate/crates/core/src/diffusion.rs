//! Noise schedules and the forward/reverse diffusion algebra.
//!
//! Timesteps are 1-indexed: `t` ranges over `[1, T]` and `alpha_bar(t)` is the
//! cumulative product of `1 - beta_i` for `i <= t`. `alpha_bar(0) == 1` exists
//! only implicitly in the final denoise-to-origin step.
//!
//! The deterministic reverse step uses cumulative products on both terms, with
//! `sqrt(alpha_bar_prev)` scaling the noise direction. Under that reading the
//! step factors exactly as "predict the clean latent, then re-noise it at the
//! earlier timestep with the same noise estimate", which is the compositional
//! identity the tests pin down.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::CodecState;
use crate::condition::{ConditionBundle, PreparedCondition};
use crate::error::{Error, Result};
use crate::tensor::{check_same_shape, standard_normal, Latent, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Number of diffusion steps T.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("schedule needs at least 1 step".into()));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{}, {}]",
                self.beta_start, self.beta_end
            )));
        }
        Ok(())
    }
}

/// Precomputed schedule tables. Always kept in f64; per-step coefficients are
/// converted to the working scalar at the point of use.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= 1 && t <= self.steps() {
            Ok(())
        } else {
            Err(Error::Timestep {
                t,
                max: self.steps(),
            })
        }
    }

    /// `beta_t`, 1-indexed.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_t = 1 - beta_t`, 1-indexed.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas up to `t`, 1-indexed.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }
}

pub fn build_schedule(config: &ScheduleConfig) -> Result<DiffusionSchedule> {
    config.validate()?;
    let t_max = config.steps;
    let betas: Vec<f64> = match config.kind {
        ScheduleKind::Linear => (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    config.beta_start
                } else {
                    config.beta_start
                        + (config.beta_end - config.beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect(),
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(DiffusionSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

/// Forward noising: `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
pub fn add_noise<F: Real>(
    z0: &Latent<F>,
    eps: &Latent<F>,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Latent<F>> {
    sched.check_t(t)?;
    check_same_shape(z0, eps, "add_noise(z0, eps)")?;
    let abar = sched.alpha_bar(t);
    let c0 = F::from_f64(abar.sqrt());
    let ce = F::from_f64((1.0 - abar).sqrt());
    let mut out = z0.mapv(|v| v * c0);
    out.zip_mut_with(eps, |o, e| *o = *o + ce * *e);
    Ok(out)
}

/// Clean-latent estimate from a noisy latent and a noise prediction:
/// `zt / sqrt(abar_t) - sqrt(1 - abar_t) * eps_hat / sqrt(abar_t)`.
pub fn predict_original<F: Real>(
    zt: &Latent<F>,
    eps_hat: &Latent<F>,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Latent<F>> {
    sched.check_t(t)?;
    check_same_shape(zt, eps_hat, "predict_original(zt, eps_hat)")?;
    let abar = sched.alpha_bar(t);
    let inv = 1.0 / abar.sqrt();
    let cz = F::from_f64(inv);
    let ce = F::from_f64((1.0 - abar).sqrt() * inv);
    let mut out = zt.mapv(|v| v * cz);
    out.zip_mut_with(eps_hat, |o, e| *o = *o - ce * *e);
    Ok(out)
}

/// Deterministic reverse step from `t` to `t_prev <= t`.
///
/// Equals re-noising the clean-latent estimate at `t_prev` with the same
/// `eps_hat`; with `t_prev == t` the coefficients cancel and the input passes
/// through unchanged.
pub fn ddim_step<F: Real>(
    zt: &Latent<F>,
    eps_hat: &Latent<F>,
    t: usize,
    t_prev: usize,
    sched: &DiffusionSchedule,
) -> Result<Latent<F>> {
    sched.check_t(t)?;
    sched.check_t(t_prev)?;
    if t_prev > t {
        return Err(Error::Timestep {
            t: t_prev,
            max: t,
        });
    }
    check_same_shape(zt, eps_hat, "ddim_step(zt, eps_hat)")?;
    let abar_t = sched.alpha_bar(t);
    let abar_prev = sched.alpha_bar(t_prev);
    let ratio = (abar_prev / abar_t).sqrt();
    let cz = F::from_f64(ratio);
    let ce = F::from_f64((1.0 - abar_prev).sqrt() - ratio * (1.0 - abar_t).sqrt());
    let mut out = zt.mapv(|v| v * cz);
    out.zip_mut_with(eps_hat, |o, e| *o = *o + ce * *e);
    Ok(out)
}

/// Strictly decreasing timestep subsequence, first entry `T`, last entry 1
/// for plans longer than one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    steps: Vec<usize>,
}

impl TimestepPlan {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Evenly spaced plan of `n_steps` timesteps from `t_max` down to 1. Entry i
/// is `t_max - round(i * (t_max - 1) / (n_steps - 1))`; rounding is
/// half-away-from-zero. Spacing >= 1 guarantees strict decrease.
pub fn timestep_plan(t_max: usize, n_steps: usize) -> Result<TimestepPlan> {
    if t_max < 1 {
        return Err(Error::Config("t_max must be >= 1".into()));
    }
    if n_steps < 1 || n_steps > t_max {
        return Err(Error::Config(format!(
            "n_steps must be in [1, {t_max}], got {n_steps}"
        )));
    }
    if n_steps == 1 {
        return Ok(TimestepPlan { steps: vec![t_max] });
    }
    let stride = (t_max - 1) as f64 / (n_steps - 1) as f64;
    let steps = (0..n_steps)
        .map(|i| t_max - (i as f64 * stride).round() as usize)
        .collect();
    Ok(TimestepPlan { steps })
}

/// Anything that can estimate the noise component of a latent at timestep `t`
/// under a prepared condition. Implemented by the conditional denoiser; test
/// stubs implement it to supply oracle predictions.
pub trait NoisePredictor<F: Real> {
    fn predict(&self, zt: &Latent<F>, t: usize, cond: &PreparedCondition<F>) -> Result<Latent<F>>;
}

/// Full deterministic sampling loop.
///
/// Starts from a seeded unit-Gaussian latent at the plan's first timestep,
/// walks the plan with reverse steps, and finishes by predicting the clean
/// latent at the last plan entry. Pure function of (predictor, codec,
/// condition, plan, shape, seed).
pub fn sample<F: Real, P: NoisePredictor<F>>(
    predictor: &P,
    codec: &CodecState<F>,
    cond: &ConditionBundle<F>,
    plan: &TimestepPlan,
    sched: &DiffusionSchedule,
    shape: (usize, usize, usize),
    seed: u64,
) -> Result<Latent<F>> {
    if plan.is_empty() {
        return Err(Error::Config("empty timestep plan".into()));
    }
    let prepared = PreparedCondition::prepare(cond, codec, (shape.1, shape.2))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z: Latent<F> = standard_normal(&mut rng, shape);
    let steps = plan.steps();
    for w in steps.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let eps_hat = predictor.predict(&z, t, &prepared)?;
        z = ddim_step(&z, &eps_hat, t, t_prev, sched)?;
    }
    let t_last = *steps.last().unwrap();
    let eps_hat = predictor.predict(&z, t_last, &prepared)?;
    predict_original(&z, &eps_hat, t_last, sched)
}

/// Unit-Gaussian starting latent for the sampling loop, exposed for tests
/// that need the exact `z_T` a given seed produces.
pub fn initial_latent<F: Real>(shape: (usize, usize, usize), seed: u64) -> Latent<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    standard_normal(&mut rng, shape)
}

/// Per-element mean squared error between a noise draw and its estimate.
pub fn noise_mse<F: Real>(eps: &Latent<F>, eps_hat: &Latent<F>) -> F {
    let n = F::from_f64(eps.len() as f64);
    let mut acc = F::zero();
    for (a, b) in eps.iter().zip(eps_hat.iter()) {
        let d = *a - *b;
        acc += d * d;
    }
    acc / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use rand::Rng;

    fn sched_1000() -> DiffusionSchedule {
        build_schedule(&ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn single_step_schedule_product() {
        let cfg = ScheduleConfig {
            steps: 1,
            beta_start: 0.02,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        };
        let s = build_schedule(&cfg).unwrap();
        assert_eq!(s.alpha_bar(1), 0.98);
    }

    #[test]
    fn linear_1000_terminal_alpha_bar_matches_direct_product() {
        // Independent oracle: plain product accumulated here, plus the value
        // computed externally at 30-digit precision.
        let s = sched_1000();
        let mut prod = 1.0_f64;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        assert_eq!(s.alpha_bar(1000), prod);
        let reference = 4.03582976537568331e-5;
        assert!((s.alpha_bar(1000) - reference).abs() / reference < 1e-12);
    }

    #[test]
    fn schedule_tables_satisfy_invariants() {
        let s = sched_1000();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.alpha_bar(1), s.alpha(1));
        for t in 1..=1000 {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                let rebuilt = s.alpha_bar(t - 1) * s.alpha(t);
                assert!((s.alpha_bar(t) - rebuilt).abs() <= 1e-18 + 1e-15 * rebuilt);
            }
        }
    }

    #[test]
    fn bad_beta_range_is_a_config_error() {
        let cfg = ScheduleConfig {
            steps: 10,
            beta_start: 1e-4,
            beta_end: 1.5,
            kind: ScheduleKind::Linear,
        };
        assert!(matches!(build_schedule(&cfg), Err(Error::Config(_))));
        let cfg = ScheduleConfig {
            steps: 0,
            ..ScheduleConfig::default()
        };
        assert!(matches!(build_schedule(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn add_noise_zero_eps_scales_by_sqrt_alpha_bar() {
        let s = sched_1000();
        let z0 = array![[[1.0_f64, -2.0], [0.5, 3.0]]];
        let eps = Array3::zeros(z0.dim());
        let zt = add_noise(&z0, &eps, 700, &s).unwrap();
        let c = s.alpha_bar(700).sqrt();
        for (a, b) in z0.iter().zip(zt.iter()) {
            assert_eq!(*b, a * c);
        }
    }

    #[test]
    fn add_noise_closed_form_scalar() {
        // alpha_bar = 0.25 via a single step with beta = 0.75
        let cfg = ScheduleConfig {
            steps: 1,
            beta_start: 0.75,
            beta_end: 0.75,
            kind: ScheduleKind::Linear,
        };
        let s = build_schedule(&cfg).unwrap();
        let z0 = array![[[1.0_f64]]];
        let eps = array![[[1.0_f64]]];
        let zt = add_noise(&z0, &eps, 1, &s).unwrap();
        assert!((zt[(0, 0, 0)] - 1.3660254037844386).abs() < 1e-12);
    }

    #[test]
    fn add_noise_monte_carlo_variance() {
        // Sample variance over 1e5 unit-Gaussian draws with z0 = 0 should be
        // within 1% of (1 - alpha_bar_t).
        let s = sched_1000();
        let t = 400;
        let expected = 1.0 - s.alpha_bar(t);
        let z0 = Array3::<f64>::zeros((1, 1, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            let eps = array![[[e]]];
            let v = add_noise(&z0, &eps, t, &s).unwrap()[(0, 0, 0)];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(
            (var - expected).abs() / expected < 0.01,
            "var {var} vs expected {expected}"
        );
    }

    #[test]
    fn add_noise_rejects_bad_t_and_shapes() {
        let s = sched_1000();
        let z0 = Array3::<f64>::zeros((1, 2, 2));
        let eps = Array3::<f64>::zeros((1, 2, 2));
        assert!(matches!(
            add_noise(&z0, &eps, 0, &s),
            Err(Error::Timestep { .. })
        ));
        assert!(matches!(
            add_noise(&z0, &eps, 1001, &s),
            Err(Error::Timestep { .. })
        ));
        let bad = Array3::<f64>::zeros((1, 2, 3));
        assert!(matches!(
            add_noise(&z0, &bad, 5, &s),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn predict_original_inverts_add_noise() {
        let s = sched_1000();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = rng.gen_range(1..=1000);
            let z0: Latent<f64> = standard_normal(&mut rng, (2, 3, 3));
            let eps: Latent<f64> = standard_normal(&mut rng, (2, 3, 3));
            let zt = add_noise(&z0, &eps, t, &s).unwrap();
            let back = predict_original(&zt, &eps, t, &s).unwrap();
            for (a, b) in z0.iter().zip(back.iter()) {
                assert!((a - b).abs() < 1e-5, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn predict_original_zero_eps_hat() {
        let s = sched_1000();
        let zt = array![[[2.0_f64, -1.0]]];
        let eps = Array3::zeros(zt.dim());
        let z0 = predict_original(&zt, &eps, 123, &s).unwrap();
        let inv = 1.0 / s.alpha_bar(123).sqrt();
        for (a, b) in zt.iter().zip(z0.iter()) {
            assert_eq!(*b, a * inv);
        }
    }

    #[test]
    fn predict_original_scalar_inverts_frozen_example() {
        let cfg = ScheduleConfig {
            steps: 1,
            beta_start: 0.75,
            beta_end: 0.75,
            kind: ScheduleKind::Linear,
        };
        let s = build_schedule(&cfg).unwrap();
        let zt = array![[[1.3660254037844386_f64]]];
        let eps = array![[[1.0_f64]]];
        let z0 = predict_original(&zt, &eps, 1, &s).unwrap();
        assert!((z0[(0, 0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ddim_step_with_equal_timesteps_is_identity() {
        let s = sched_1000();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zt: Latent<f64> = standard_normal(&mut rng, (3, 4, 4));
        let eps: Latent<f64> = standard_normal(&mut rng, (3, 4, 4));
        for t in [1, 17, 500, 1000] {
            let out = ddim_step(&zt, &eps, t, t, &s).unwrap();
            assert_eq!(out, zt);
        }
    }

    #[test]
    fn ddim_step_matches_predict_then_renoise() {
        let s = sched_1000();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..300 {
            let t = rng.gen_range(2..=1000);
            let t_prev = rng.gen_range(1..=t);
            let zt: Latent<f64> = standard_normal(&mut rng, (1, 2, 2));
            let eps: Latent<f64> = standard_normal(&mut rng, (1, 2, 2));
            let direct = ddim_step(&zt, &eps, t, t_prev, &s).unwrap();
            let z0 = predict_original(&zt, &eps, t, &s).unwrap();
            let composed = add_noise(&z0, &eps, t_prev, &s).unwrap();
            for (a, b) in direct.iter().zip(composed.iter()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn ddim_step_is_deterministic() {
        let s = sched_1000();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let zt: Latent<f64> = standard_normal(&mut rng, (2, 4, 4));
        let eps: Latent<f64> = standard_normal(&mut rng, (2, 4, 4));
        let a = ddim_step(&zt, &eps, 800, 640, &s).unwrap();
        let b = ddim_step(&zt, &eps, 800, 640, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ddim_step_rejects_reversed_order() {
        let s = sched_1000();
        let zt = Array3::<f64>::zeros((1, 1, 1));
        assert!(ddim_step(&zt, &zt.clone(), 10, 20, &s).is_err());
    }

    #[test]
    fn plan_full_and_singleton() {
        assert_eq!(
            timestep_plan(10, 10).unwrap().steps(),
            &[10, 9, 8, 7, 6, 5, 4, 3, 2, 1]
        );
        assert_eq!(timestep_plan(1000, 1).unwrap().steps(), &[1000]);
    }

    #[test]
    fn plan_contract_1000_by_50() {
        let plan = timestep_plan(1000, 50).unwrap();
        let steps = plan.steps();
        assert_eq!(steps.len(), 50);
        assert_eq!(steps[0], 1000);
        assert_eq!(*steps.last().unwrap(), 1);
        for w in steps.windows(2) {
            assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn plan_rejects_bad_lengths() {
        assert!(timestep_plan(10, 0).is_err());
        assert!(timestep_plan(10, 11).is_err());
    }
}
