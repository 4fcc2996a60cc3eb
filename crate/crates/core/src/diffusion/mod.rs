//! Noise schedule, forward noising, ancestral DDPM sampling and the denoiser
//! backend contract.

mod toy;

use ndarray::{Array2, Array3, ArrayView2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::scene::{BinaryMask, ImageBuffer};

pub use toy::{
    build_toy_backend, pretrain_toy, PretrainConfig, ToyBackendConfig, ToyDenoiser, ToyGrads,
};

/// Backend-space array laid out as height × width × channels.
pub type Latent = Array3<f32>;

/// Cumulative noise levels `ᾱ_1 > ᾱ_2 > … > ᾱ_T`, each in (0, 1].
///
/// `model_timesteps[i]` is the timestep label the backend sees at index
/// `i + 1`; it differs from `i + 1` only for respaced schedules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bars: Vec<f64>,
    model_timesteps: Vec<usize>,
}

impl NoiseSchedule {
    pub fn from_cumulative(alpha_bars: Vec<f64>) -> Result<Self> {
        let model_timesteps = (1..=alpha_bars.len()).collect();
        Self::with_labels(alpha_bars, model_timesteps)
    }

    fn with_labels(alpha_bars: Vec<f64>, model_timesteps: Vec<usize>) -> Result<Self> {
        if alpha_bars.is_empty() {
            return Err(Error::InvalidConfig("noise schedule needs T >= 1".into()));
        }
        if alpha_bars.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::InvalidConfig(
                "cumulative alphas must lie in (0, 1]".into(),
            ));
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidConfig(
                "cumulative alphas must be strictly decreasing".into(),
            ));
        }
        Ok(Self {
            alpha_bars,
            model_timesteps,
        })
    }

    /// Linear betas from `beta_start` to `beta_end` over `T` steps.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::InvalidConfig("noise schedule needs T >= 1".into()));
        }
        let mut acc = 1.0;
        let alpha_bars = (0..timesteps)
            .map(|i| {
                let frac = if timesteps == 1 {
                    0.0
                } else {
                    i as f64 / (timesteps - 1) as f64
                };
                acc *= 1.0 - (beta_start + frac * (beta_end - beta_start));
                acc
            })
            .collect();
        Self::from_cumulative(alpha_bars)
    }

    /// The standard 1e-4 → 0.02 linear schedule defined at T = 1000,
    /// with betas rescaled by `1000 / T` for shorter schedules.
    pub fn scaled_linear(timesteps: usize) -> Result<Self> {
        let scale = 1000.0 / timesteps.max(1) as f64;
        Self::linear(timesteps, 1e-4 * scale, (0.02 * scale).min(0.999))
    }

    pub fn len(&self) -> usize {
        self.alpha_bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bars.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::BadTimestep {
                t,
                max: self.len(),
            });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// `ᾱ_{t-1}`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(if t == 1 { 1.0 } else { self.alpha_bars[t - 2] })
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.alpha_bar(t)? / self.alpha_bar_prev(t)?)
    }

    pub fn model_timestep(&self, t: usize) -> Result<usize> {
        self.check(t)?;
        Ok(self.model_timesteps[t - 1])
    }

    /// Subsequence of `steps` timesteps ending at `T`, re-expressed as its
    /// own schedule so that [`ddpm_step`] applies unchanged.
    pub fn respaced(&self, steps: usize) -> Result<Self> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(Error::InvalidConfig(format!(
                "sampling steps must lie in 1..={total}, got {steps}"
            )));
        }
        if steps == total {
            return Ok(self.clone());
        }
        let picks: Vec<usize> = (1..=steps).map(|i| (i * total).div_ceil(steps)).collect();
        Self::with_labels(
            picks.iter().map(|&t| self.alpha_bars[t - 1]).collect(),
            picks.iter().map(|&t| self.model_timesteps[t - 1]).collect(),
        )
    }
}

/// `√ᾱ·x0 + √(1-ᾱ)·eps` for an explicit noise level.
pub fn blend(x0: &Latent, eps: &Latent, alpha_bar: f64) -> Result<Latent> {
    if x0.dim() != eps.dim() {
        return Err(Error::GeometryMismatch(format!(
            "x0 {:?} vs eps {:?}",
            x0.dim(),
            eps.dim()
        )));
    }
    let signal = alpha_bar.sqrt() as f32;
    let noise = (1.0 - alpha_bar).max(0.0).sqrt() as f32;
    Ok(Zip::from(x0)
        .and(eps)
        .map_collect(|x, e| signal * x + noise * e))
}

/// Noises `x0` to level `t`.
pub fn forward_noise(x0: &Latent, t: usize, eps: &Latent, schedule: &NoiseSchedule) -> Result<Latent> {
    blend(x0, eps, schedule.alpha_bar(t)?)
}

/// Clean-sample estimate implied by a noise prediction.
pub fn predict_x0(x_t: &Latent, t: usize, eps_hat: &Latent, schedule: &NoiseSchedule) -> Result<Latent> {
    let ab = schedule.alpha_bar(t)?;
    let (s, n) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    Ok(Zip::from(x_t).and(eps_hat).map_collect(|x, e| (x - n * e) / s))
}

/// One ancestral update `x_t → x_{t-1}` with the fixed-small posterior
/// variance. No noise is added at `t = 1`.
pub fn ddpm_step<R: Rng + ?Sized>(
    x_t: &Latent,
    t: usize,
    eps_hat: &Latent,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Latent> {
    ddpm_step_clipped(x_t, t, eps_hat, schedule, None, rng)
}

/// [`ddpm_step`] with the clean-sample estimate optionally clipped to the
/// backend's data range before forming the posterior mean.
pub fn ddpm_step_clipped<R: Rng + ?Sized>(
    x_t: &Latent,
    t: usize,
    eps_hat: &Latent,
    schedule: &NoiseSchedule,
    clip: Option<(f32, f32)>,
    rng: &mut R,
) -> Result<Latent> {
    if x_t.dim() != eps_hat.dim() {
        return Err(Error::GeometryMismatch(format!(
            "x_t {:?} vs eps_hat {:?}",
            x_t.dim(),
            eps_hat.dim()
        )));
    }
    if x_t.iter().chain(eps_hat.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NumericalDivergence { step: Some(t) });
    }
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar_prev(t)?;
    let beta = 1.0 - ab / ab_prev;
    let alpha = 1.0 - beta;

    let mut x0 = predict_x0(x_t, t, eps_hat, schedule)?;
    if let Some((lo, hi)) = clip {
        x0.mapv_inplace(|v| v.clamp(lo, hi));
    }
    let c0 = (ab_prev.sqrt() * beta / (1.0 - ab)) as f32;
    let ct = (alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab)) as f32;
    let mut mean = Zip::from(&x0).and(x_t).map_collect(|a, b| c0 * a + ct * b);

    if t > 1 {
        let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt() as f32;
        mean.mapv_inplace(|m| m + sigma * rng.sample::<f32, _>(StandardNormal));
    }
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalDivergence { step: Some(t) });
    }
    Ok(mean)
}

pub fn gaussian_latent<R: Rng + ?Sized>(shape: (usize, usize, usize), rng: &mut R) -> Latent {
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// A whitespace-tokenized prompt. The empty prompt is the unconditional one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Prompt(Vec<String>);

impl Prompt {
    pub fn parse(text: &str) -> Self {
        Self(text.split_whitespace().map(str::to_string).collect())
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn text(&self) -> String {
        self.0.join(" ")
    }
}

/// Everything the denoiser is conditioned on besides `x_t` and `t`.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub prompt: &'a Prompt,
    /// Fill mask at latent resolution.
    pub mask: &'a BinaryMask,
    /// Encoded `(1 - m) ⊙ x`.
    pub masked_image: &'a Latent,
}

/// Noise predictor `ε_θ(x_t, t, p, m, (1-m)⊙x)` with attachable low-rank
/// adapters.
pub trait DenoiserBackend: Send + Sync {
    fn name(&self) -> &str;

    fn schedule(&self) -> &NoiseSchedule;

    /// Square working side length in pixels.
    fn resolution(&self) -> usize;

    fn latent_shape(&self) -> (usize, usize, usize);

    fn encode(&self, image: &ImageBuffer) -> Result<Latent>;

    fn decode(&self, latent: &Latent) -> Result<ImageBuffer>;

    /// Maximum `|decode(encode(x)) - x|` the backend guarantees.
    fn reconstruction_tolerance(&self) -> f32;

    /// Range the clean-sample estimate is clipped to during sampling.
    fn clip_range(&self) -> Option<(f32, f32)> {
        None
    }

    /// Prediction with every attached adapter active.
    fn predict_noise(&self, x_t: &Latent, t: usize, cond: &Conditioning<'_>) -> Result<Latent>;

    /// Base weight matrices eligible for adapter injection.
    fn trainable_matrices(&self) -> Vec<(String, ArrayView2<'_, f32>)>;

    fn adapters(&self) -> Option<&AdapterSet>;

    fn adapters_mut(&mut self) -> Option<&mut AdapterSet>;

    /// Fails with [`Error::AlreadyInjected`] if a set is attached already.
    fn attach_adapters(&mut self, adapters: AdapterSet) -> Result<()>;

    fn detach_adapters(&mut self) -> Option<AdapterSet>;

    /// Stable digest of the frozen base weights and architecture.
    fn fingerprint(&self) -> String;
}

/// Gradients of a scalar loss with respect to the effective weight of every
/// trainable matrix, keyed by matrix name.
pub type MatrixGrads = std::collections::BTreeMap<String, Array2<f32>>;

/// Backends that can backpropagate a loss on their noise prediction.
pub trait TrainableBackend: DenoiserBackend {
    /// Runs the forward pass with adapter deltas enabled per `active`
    /// (aligned with [`AdapterSet::names`]), hands the prediction to `loss`
    /// which returns `(value, d value / d prediction)`, and returns the value
    /// with effective-weight gradients.
    fn noise_vjp(
        &self,
        x_t: &Latent,
        t: usize,
        cond: &Conditioning<'_>,
        active: &[bool],
        loss: &mut dyn FnMut(&Latent) -> Result<(f32, Latent)>,
    ) -> Result<(f32, MatrixGrads)>;
}

/// Guided prediction: `ε_u + w (ε_c - ε_u)`; `w = 1` skips the
/// unconditional pass.
pub fn guided_noise<B: DenoiserBackend + ?Sized>(
    backend: &B,
    x_t: &Latent,
    t: usize,
    cond: &Conditioning<'_>,
    guidance_weight: f32,
) -> Result<Latent> {
    let eps_c = backend.predict_noise(x_t, t, cond)?;
    if guidance_weight == 1.0 {
        return Ok(eps_c);
    }
    let empty = Prompt::empty();
    let uncond = Conditioning {
        prompt: &empty,
        ..*cond
    };
    let eps_u = backend.predict_noise(x_t, t, &uncond)?;
    Ok(Zip::from(&eps_u)
        .and(&eps_c)
        .map_collect(|u, c| u + guidance_weight * (c - u)))
}

/// Draws `I_gen` by ancestral sampling over a `steps`-long respacing of the
/// backend schedule, conditioned on prompt, fill mask and masked image.
/// Both images must be at the backend's working resolution.
#[allow(clippy::too_many_arguments)]
pub fn sample<B: DenoiserBackend + ?Sized, R: Rng + ?Sized>(
    backend: &B,
    prompt: &Prompt,
    mask: &BinaryMask,
    masked_image: &ImageBuffer,
    steps: usize,
    guidance_weight: f32,
    rng: &mut R,
) -> Result<ImageBuffer> {
    let cond_latent = backend.encode(masked_image)?;
    let (lh, lw, _) = backend.latent_shape();
    let latent_mask = mask.resample(lh, lw);
    let cond = Conditioning {
        prompt,
        mask: &latent_mask,
        masked_image: &cond_latent,
    };
    let mut x = gaussian_latent(backend.latent_shape(), rng);
    if steps > 0 {
        let schedule = backend.schedule().respaced(steps)?;
        for t in (1..=steps).rev() {
            let model_t = schedule.model_timestep(t)?;
            let eps = guided_noise(backend, &x, model_t, &cond, guidance_weight)
                .map_err(|e| Error::Backend(format!("noise prediction at t={model_t}: {e}")))?;
            x = ddpm_step_clipped(&x, t, &eps, &schedule, backend.clip_range(), rng)?;
        }
    }
    backend.decode(&x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn latent(v: f32) -> Latent {
        Array3::from_elem((1, 1, 1), v)
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::scaled_linear(200).unwrap();
        assert_eq!(s.len(), 200);
        assert!(s.alpha_bar(1).unwrap() < 1.0);
        assert!(s.alpha_bar(200).unwrap() > 0.0);
        assert!(s.alpha_bar(200).unwrap() < 0.01);
        assert!(NoiseSchedule::from_cumulative(vec![0.9, 0.9]).is_err());
        assert!(NoiseSchedule::from_cumulative(vec![0.9, 0.0]).is_err());
        assert!(matches!(s.alpha_bar(0), Err(Error::BadTimestep { .. })));
        assert!(matches!(s.alpha_bar(201), Err(Error::BadTimestep { .. })));
    }

    #[test]
    fn respacing_keeps_endpoints() {
        let s = NoiseSchedule::scaled_linear(200).unwrap();
        let r = s.respaced(50).unwrap();
        assert_eq!(r.len(), 50);
        assert_eq!(r.model_timestep(50).unwrap(), 200);
        assert_eq!(r.model_timestep(1).unwrap(), 4);
        assert_eq!(r.alpha_bar(50).unwrap(), s.alpha_bar(200).unwrap());
        assert_eq!(s.respaced(200).unwrap(), s);
        assert!(s.respaced(201).is_err());
    }

    #[test]
    fn forward_noise_endpoints() {
        let x0 = Array3::from_elem((2, 2, 3), 0.3);
        let eps = Array3::from_elem((2, 2, 3), -1.2);
        assert_eq!(blend(&x0, &eps, 1.0).unwrap(), x0);
        assert_eq!(blend(&x0, &eps, 0.0).unwrap(), eps);
        let s = NoiseSchedule::from_cumulative(vec![0.25]).unwrap();
        let out = forward_noise(&latent(1.0), 1, &latent(0.0), &s).unwrap();
        assert_eq!(out[[0, 0, 0]], 0.5);
        assert!(matches!(
            forward_noise(&latent(1.0), 2, &latent(0.0), &s),
            Err(Error::BadTimestep { t: 2, max: 1 })
        ));
    }

    #[test]
    fn last_step_is_deterministic() {
        let s = NoiseSchedule::scaled_linear(10).unwrap();
        let x = latent(0.7);
        let e = latent(0.1);
        let a = ddpm_step(&x, 1, &e, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = ddpm_step(&x, 1, &e, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        // At t = 1 the posterior mean is exactly the clean estimate.
        let x0 = predict_x0(&x, 1, &e, &s).unwrap();
        assert!((a[[0, 0, 0]] - x0[[0, 0, 0]]).abs() < 1e-6);
    }

    #[test]
    fn posterior_mean_with_true_noise() {
        // Hand-evaluated DDPM posterior for a single pixel: with the true
        // noise the clean estimate is x0 itself, so the mean is
        // c0 * x0 + ct * x_t with the closed-form coefficients.
        let s = NoiseSchedule::from_cumulative(vec![0.9, 0.5]).unwrap();
        let (x0, eps) = (0.8f64, -0.4f64);
        let x_t = 0.5f64.sqrt() * x0 + 0.5f64.sqrt() * eps;
        let beta = 1.0 - 0.5 / 0.9;
        let c0 = 0.9f64.sqrt() * beta / 0.5;
        let ct = (1.0 - beta).sqrt() * 0.1 / 0.5;
        let expected_mean = c0 * x0 + ct * x_t;
        let sigma = (0.1 / 0.5 * beta).sqrt();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z: f32 = rng.sample(StandardNormal);
        let out = ddpm_step(
            &latent(x_t as f32),
            2,
            &latent(eps as f32),
            &s,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let expected = expected_mean + sigma * z as f64;
        assert!((out[[0, 0, 0]] as f64 - expected).abs() < 1e-5);
    }

    #[test]
    fn non_finite_input_diverges() {
        let s = NoiseSchedule::scaled_linear(10).unwrap();
        let err = ddpm_step(&latent(f32::NAN), 3, &latent(0.0), &s, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::NumericalDivergence { .. })));
    }

    #[test]
    fn oracle_noise_walk_converges_to_x0() {
        // Feeding the exact noise that relates x_t to a fixed x0 makes every
        // step pull the sample towards x0.
        let s = NoiseSchedule::scaled_linear(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Array3::from_shape_fn((4, 4, 3), |(y, x, c)| ((y + x + c) % 3) as f32 * 0.4);
        let mut x = gaussian_latent((4, 4, 3), &mut rng);
        let mut errors = Vec::new();
        for t in (1..=100).rev() {
            let ab = s.alpha_bar(t).unwrap();
            let eps = Zip::from(&x)
                .and(&x0)
                .map_collect(|xt, x0| (xt - ab.sqrt() as f32 * x0) / (1.0 - ab).sqrt() as f32);
            x = ddpm_step(&x, t, &eps, &s, &mut rng).unwrap();
            let mae = Zip::from(&x).and(&x0).fold(0.0, |a, p, q| a + (p - q).abs()) / 48.0;
            errors.push(mae);
        }
        assert!(errors[99] < 1e-4);
        assert!(errors[99] < errors[89] && errors[89] < errors[49], "{errors:?}");
    }
}
