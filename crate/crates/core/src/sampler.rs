//! Candidate generation and blurred-mask compositing.

use ndarray::{Array2, Array3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, DenoiserBackend, Prompt};
use crate::error::{Error, Result};
use crate::mask::apply_mask;
use crate::metrics::MetricReport;
use crate::scene::{BinaryMask, ImageBuffer, Scene};

/// Blur radius at 512 px; other sizes scale proportionally with width.
pub const REFERENCE_BLUR_RADIUS: f64 = 8.0;
/// Soft-mask values below this are snapped to zero.
pub const SOFT_MASK_FLOOR: f32 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub num_candidates: usize,
    /// Sampling steps; the backend schedule is respaced when shorter.
    pub steps: usize,
    pub guidance_weight: f32,
    /// `None` means `8 · width / 512`.
    pub blur_radius_px: Option<f64>,
    pub base_seed: u64,
    pub prompt: String,
    /// Condition on an all-ones mask (blank canvas).
    pub mask_all: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            num_candidates: 64,
            steps: 50,
            guidance_weight: 1.0,
            blur_radius_px: None,
            base_seed: 0,
            prompt: "a photo of [V]".into(),
            mask_all: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_candidates == 0 {
            return Err(Error::InvalidConfig("num_candidates must be >= 1".into()));
        }
        if let Some(r) = self.blur_radius_px {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::InvalidConfig(format!("blur_radius_px must be >= 0, got {r}")));
            }
        }
        if !self.guidance_weight.is_finite() {
            return Err(Error::InvalidConfig("guidance_weight must be finite".into()));
        }
        Ok(())
    }

    pub fn blur_radius_for(&self, width: usize) -> f64 {
        self.blur_radius_px
            .unwrap_or(REFERENCE_BLUR_RADIUS * width as f64 / 512.0)
    }
}

/// One completion: `image` is the composited output, `raw` the generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub image: ImageBuffer,
    pub raw: ImageBuffer,
    pub seed: u64,
    pub match_count: Option<usize>,
    pub metrics: Option<MetricReport>,
}

#[derive(Debug, Clone)]
pub struct Generation {
    /// Successful candidates in seed order.
    pub candidates: Vec<Candidate>,
    /// `(seed, message)` for candidates whose sampling failed.
    pub failures: Vec<(u64, String)>,
}

/// Samples `num_candidates` completions with seeds `base_seed + i` and
/// composites each into the target. The backend should carry the scene's
/// adapters. Candidates are sampled in parallel; each owns its RNG.
pub fn generate<B: DenoiserBackend + ?Sized>(
    scene: &Scene,
    backend: &B,
    config: &InferenceConfig,
) -> Result<Generation> {
    config.validate()?;
    let (h, w) = scene.target.shape();
    let res = backend.resolution();
    let mask = if config.mask_all {
        BinaryMask::ones(h, w)
    } else {
        scene.target_mask.clone()
    };
    let small_target = scene.target.resize(res, res)?;
    let small_mask = mask.resample(res, res);
    let conditioning = apply_mask(&small_target, &small_mask)?;
    let prompt = Prompt::parse(&config.prompt);
    let radius = config.blur_radius_for(w);
    let soft = soft_mask(&mask, radius);

    let results: Vec<(u64, Result<Candidate>)> = (0..config.num_candidates as u64)
        .into_par_iter()
        .map(|i| {
            let seed = config.base_seed + i;
            let run = || -> Result<Candidate> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let gen = sample(
                    backend,
                    &prompt,
                    &small_mask,
                    &conditioning,
                    config.steps,
                    config.guidance_weight,
                    &mut rng,
                )?;
                let raw = gen.resize(h, w)?;
                let image = blend(&raw, &scene.target, &soft)?;
                Ok(Candidate {
                    image,
                    raw,
                    seed,
                    match_count: None,
                    metrics: None,
                })
            };
            (seed, run())
        })
        .collect();

    let mut candidates = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(c) => candidates.push(c),
            Err(e) => {
                log::warn!("candidate seed {seed} failed: {e}");
                failures.push((seed, e.to_string()));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::AllCandidatesFailed(config.num_candidates));
    }
    Ok(Generation {
        candidates,
        failures,
    })
}

fn gaussian_kernel(radius: f64) -> Vec<f32> {
    let sigma = radius / 2.0;
    let half = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| (v / s) as f32).collect()
}

/// Separable Gaussian (σ = radius / 2, truncated at 3σ) with edge
/// replication.
pub fn gaussian_blur(plane: &Array2<f32>, radius: f64) -> Array2<f32> {
    if radius <= 0.0 {
        return plane.clone();
    }
    let k = gaussian_kernel(radius);
    let half = (k.len() / 2) as isize;
    let (h, w) = plane.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let rows: Array2<f32> = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * plane[[y, clamp(x as isize + i as isize - half, w)]])
            .sum::<f32>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * rows[[clamp(y as isize + i as isize - half, h), x]])
            .sum::<f32>()
    })
}

/// Alpha map for compositing. The blurred mask `b` is remapped to
/// `clamp(2b - 1, 0, 1)` so the ramp starts at the mask edge and rises into
/// the fill region; pixels outside the mask and values below
/// [`SOFT_MASK_FLOOR`] are exactly 0.
pub fn soft_mask(mask: &BinaryMask, blur_radius_px: f64) -> Array2<f32> {
    let hard = mask.to_f32();
    if blur_radius_px <= 0.0 {
        return hard;
    }
    let blurred = gaussian_blur(&hard, blur_radius_px);
    Zip::from(&blurred).and(&hard).map_collect(|b, m| {
        let s = if *m > 0.0 { (2.0 * b - 1.0).clamp(0.0, 1.0) } else { 0.0 };
        if s < SOFT_MASK_FLOOR {
            0.0
        } else {
            s
        }
    })
}

fn blend(gen: &ImageBuffer, target: &ImageBuffer, soft: &Array2<f32>) -> Result<ImageBuffer> {
    if gen.shape() != target.shape() || soft.dim() != target.shape() {
        return Err(Error::GeometryMismatch(format!(
            "composite inputs {:?}, {:?}, mask {:?}",
            gen.shape(),
            target.shape(),
            soft.dim()
        )));
    }
    let (g, t) = (gen.pixels(), target.pixels());
    let out = Array3::from_shape_fn(g.dim(), |(y, x, c)| {
        let a = soft[[y, x]];
        if a == 0.0 {
            t[[y, x, c]]
        } else if a == 1.0 {
            g[[y, x, c]]
        } else {
            a * g[[y, x, c]] + (1.0 - a) * t[[y, x, c]]
        }
    });
    ImageBuffer::from_clamped(out)
}

/// `soft ⊙ gen + (1 - soft) ⊙ target` with `soft` from [`soft_mask`].
pub fn composite(
    gen: &ImageBuffer,
    target: &ImageBuffer,
    mask: &BinaryMask,
    blur_radius_px: f64,
) -> Result<ImageBuffer> {
    if mask.shape() != target.shape() {
        return Err(Error::GeometryMismatch(format!(
            "mask {:?} vs target {:?}",
            mask.shape(),
            target.shape()
        )));
    }
    blend(gen, target, &soft_mask(mask, blur_radius_px))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(h: usize, w: usize, v: f32) -> ImageBuffer {
        ImageBuffer::filled(h, w, [v, v, v]).unwrap()
    }

    #[test]
    fn zero_radius_is_hard_paste() {
        let gen = flat(16, 16, 0.8);
        let tgt = flat(16, 16, 0.2);
        let mask = BinaryMask::from_fn(16, 16, |y, x| (4..9).contains(&y) && x > 6);
        let out = composite(&gen, &tgt, &mask, 0.0).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let want = if mask.get(y, x) { 0.8 } else { 0.2 };
                assert_eq!(out.get(y, x), [want; 3]);
            }
        }
    }

    #[test]
    fn empty_mask_returns_target() {
        let gen = flat(16, 16, 0.8);
        let tgt = flat(16, 16, 0.2);
        let out = composite(&gen, &tgt, &BinaryMask::zeros(16, 16), 4.0).unwrap();
        assert_eq!(out, tgt);
    }

    #[test]
    fn half_plane_matches_direct_convolution() {
        // Mask x >= 32 on a 16×64 frame; every row is the same 1-D ramp.
        let (h, w) = (16, 64);
        let radius = 8.0;
        let mask = BinaryMask::from_fn(h, w, |_, x| x >= 32);
        let gen = flat(h, w, 1.0);
        let tgt = flat(h, w, 0.0);
        let out = composite(&gen, &tgt, &mask, radius).unwrap();

        // Direct 2-D convolution with an unnormalized truncated Gaussian,
        // normalized once, edge-clamped.
        let sigma: f64 = radius / 2.0;
        let half = (3.0 * sigma).ceil() as i64;
        let g = |d: i64| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
        let norm: f64 = (-half..=half).map(g).sum::<f64>().powi(2);
        for x in 0..w as i64 {
            let mut b = 0.0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let sx = (x + dx).clamp(0, w as i64 - 1);
                    if sx >= 32 {
                        b += g(dx) * g(dy);
                    }
                }
            }
            b /= norm;
            let mut alpha = if x >= 32 { (2.0 * b - 1.0).clamp(0.0, 1.0) } else { 0.0 };
            if alpha < SOFT_MASK_FLOOR as f64 {
                alpha = 0.0;
            }
            let got = out.get(5, x as usize)[0] as f64;
            assert!((got - alpha).abs() < 1e-5, "x={x}: {got} vs {alpha}");
        }
        // The ramp is monotone and reaches 1 well inside the mask.
        assert_eq!(out.get(0, 31)[0], 0.0);
        assert!(out.get(0, 33)[0] > 0.0);
        assert!((out.get(0, 63)[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn blur_radius_scales_with_width() {
        let cfg = InferenceConfig::default();
        assert_eq!(cfg.blur_radius_for(512), 8.0);
        assert_eq!(cfg.blur_radius_for(32), 0.5);
    }

    #[test]
    fn shape_mismatch() {
        let r = composite(&flat(16, 16, 0.0), &flat(16, 18, 0.0), &BinaryMask::zeros(16, 18), 1.0);
        assert!(matches!(r, Err(Error::GeometryMismatch(_))));
    }
}
