//! Random rectangle-union training masks and mask application.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{ensure_same_shape, BinaryMask, ImageBuffer, MIN_SIDE};

/// Distribution of training masks: `k` rectangles, union or its complement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub num_rects: [usize; 2],
    pub rect_width_frac: [f64; 2],
    pub rect_height_frac: [f64; 2],
    pub complement_prob: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            num_rects: [1, 5],
            rect_width_frac: [0.2, 0.8],
            rect_height_frac: [0.2, 0.8],
            complement_prob: 0.5,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.num_rects;
        if lo < 1 || lo > hi {
            return Err(Error::InvalidConfig(format!(
                "mask_spec.num_rects must satisfy 1 <= lo <= hi, got [{lo}, {hi}]"
            )));
        }
        for (name, [a, b]) in [
            ("rect_width_frac", self.rect_width_frac),
            ("rect_height_frac", self.rect_height_frac),
        ] {
            if !(a > 0.0 && a <= b && b <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "mask_spec.{name} must satisfy 0 < lo <= hi <= 1, got [{a}, {b}]"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.complement_prob) {
            return Err(Error::InvalidConfig(format!(
                "mask_spec.complement_prob must lie in [0,1], got {}",
                self.complement_prob
            )));
        }
        Ok(())
    }
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`. Sampled rectangles lie
/// inside the frame; rasterization clips anything that does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y0: i64,
    pub x0: i64,
    pub y1: i64,
    pub x1: i64,
}

/// The random choices behind one mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDraw {
    pub rects: Vec<Rect>,
    pub complement: bool,
}

/// Draws rectangle geometry and the union/complement choice.
pub fn sample_draw<R: Rng + ?Sized>(
    spec: &MaskSpec,
    shape: (usize, usize),
    rng: &mut R,
) -> Result<MaskDraw> {
    let (h, w) = shape;
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::ShapeTooSmall {
            height: h,
            width: w,
        });
    }
    spec.validate()?;
    let k = rng.random_range(spec.num_rects[0]..=spec.num_rects[1]);
    let rects = (0..k)
        .map(|_| {
            let wf = rng.random_range(spec.rect_width_frac[0]..=spec.rect_width_frac[1]);
            let hf = rng.random_range(spec.rect_height_frac[0]..=spec.rect_height_frac[1]);
            let rw = ((wf * w as f64).round() as i64).max(1);
            let rh = ((hf * h as f64).round() as i64).max(1);
            let rw = rw.min(w as i64);
            let rh = rh.min(h as i64);
            let y0 = rng.random_range(0..=h as i64 - rh);
            let x0 = rng.random_range(0..=w as i64 - rw);
            Rect {
                y0,
                x0,
                y1: y0 + rh,
                x1: x0 + rw,
            }
        })
        .collect();
    let complement = rng.random::<f64>() < spec.complement_prob;
    Ok(MaskDraw { rects, complement })
}

/// Rasterizes the union of clipped rectangles, complemented if requested.
pub fn rasterize(draw: &MaskDraw, shape: (usize, usize)) -> BinaryMask {
    let (h, w) = shape;
    let mut values = ndarray::Array2::from_elem((h, w), false);
    for r in &draw.rects {
        let y0 = r.y0.clamp(0, h as i64) as usize;
        let y1 = r.y1.clamp(0, h as i64) as usize;
        let x0 = r.x0.clamp(0, w as i64) as usize;
        let x1 = r.x1.clamp(0, w as i64) as usize;
        values
            .slice_mut(ndarray::s![y0..y1, x0..x1])
            .fill(true);
    }
    let mask = BinaryMask::new(values);
    if draw.complement {
        mask.complement()
    } else {
        mask
    }
}

/// Samples one training mask.
pub fn sample_mask<R: Rng + ?Sized>(
    spec: &MaskSpec,
    shape: (usize, usize),
    rng: &mut R,
) -> Result<BinaryMask> {
    Ok(rasterize(&sample_draw(spec, shape, rng)?, shape))
}

/// `(1 - m) ⊙ x`: zeroes the pixels to be filled.
pub fn apply_mask(image: &ImageBuffer, mask: &BinaryMask) -> Result<ImageBuffer> {
    ensure_same_shape(image.shape(), mask.shape())?;
    Ok(ImageBuffer::new(mask_array(image.pixels(), mask)).expect("zeroing keeps values in range"))
}

/// Same as [`apply_mask`] on a raw H×W×C array.
pub fn mask_array(values: &Array3<f32>, mask: &BinaryMask) -> Array3<f32> {
    let mut out = values.clone();
    for ((y, x, _), v) in out.indexed_iter_mut() {
        if mask.get(y, x) {
            *v = 0.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn full_frame() -> MaskSpec {
        MaskSpec {
            num_rects: [1, 1],
            rect_width_frac: [1.0, 1.0],
            rect_height_frac: [1.0, 1.0],
            complement_prob: 0.0,
        }
    }

    // Per-pixel point-in-rectangle test at pixel centers.
    fn brute_force(draw: &MaskDraw, shape: (usize, usize)) -> BinaryMask {
        BinaryMask::from_fn(shape.0, shape.1, |y, x| {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let inside = draw.rects.iter().any(|r| {
                py > r.y0 as f64 && py < r.y1 as f64 && px > r.x0 as f64 && px < r.x1 as f64
            });
            inside != draw.complement
        })
    }

    #[test]
    fn full_frame_rectangle_fills_everything() {
        let draw = MaskDraw {
            rects: vec![Rect { y0: 0, x0: 0, y1: 16, x1: 16 }],
            complement: false,
        };
        assert_eq!(rasterize(&draw, (16, 16)), BinaryMask::ones(16, 16));
        let draw = MaskDraw { complement: true, ..draw };
        assert_eq!(rasterize(&draw, (16, 16)), BinaryMask::zeros(16, 16));
    }

    #[test]
    fn full_frame_spec_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draw = sample_draw(&full_frame(), (16, 16), &mut rng).unwrap();
        assert_eq!(draw.rects.len(), 1);
        assert!(!draw.complement);
        let mut spec = full_frame();
        spec.complement_prob = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draw2 = sample_draw(&spec, (16, 16), &mut rng).unwrap();
        assert_eq!(draw.rects, draw2.rects);
        assert!(draw2.complement);
        assert_eq!(rasterize(&draw, (16, 16)), BinaryMask::ones(16, 16));
        assert_eq!(rasterize(&draw2, (16, 16)), BinaryMask::zeros(16, 16));
    }

    #[test]
    fn two_fixed_rects_match_oracle() {
        let draw = MaskDraw {
            rects: vec![
                Rect { y0: -3, x0: 2, y1: 5, x1: 9 },
                Rect { y0: 4, x0: 6, y1: 20, x1: 12 },
            ],
            complement: false,
        };
        assert_eq!(rasterize(&draw, (16, 14)), brute_force(&draw, (16, 14)));
    }

    #[test]
    fn shape_too_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_mask(&MaskSpec::default(), (4, 16), &mut rng),
            Err(Error::ShapeTooSmall { .. })
        ));
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = MaskSpec {
            num_rects: [0, 2],
            ..MaskSpec::default()
        };
        assert!(spec.validate().is_err());
        let spec = MaskSpec {
            complement_prob: 1.5,
            ..MaskSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn apply_mask_checkerboard() {
        let img = ImageBuffer::new(Array3::from_shape_fn((8, 8, 3), |(y, x, c)| {
            ((y * 8 + x) as f32 / 64.0 + c as f32 * 0.1).min(1.0)
        }))
        .unwrap();
        let mask = BinaryMask::from_fn(8, 8, |y, x| (y + x) % 2 == 0);
        let out = apply_mask(&img, &mask).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let m = if (y + x) % 2 == 0 { 1.0 } else { 0.0 };
                for c in 0..3 {
                    assert_eq!(out.pixels()[[y, x, c]], (1.0 - m) * img.pixels()[[y, x, c]]);
                }
            }
        }
        assert_eq!(apply_mask(&img, &BinaryMask::zeros(8, 8)).unwrap(), img);
        assert!(apply_mask(&img, &BinaryMask::ones(8, 8))
            .unwrap()
            .pixels()
            .iter()
            .all(|v| *v == 0.0));
        assert!(apply_mask(&img, &BinaryMask::zeros(8, 10)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn sampled_masks_match_oracle(seed in any::<u64>(), h in 8usize..40, w in 8usize..40) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let shape = (h, w);
                let draw = sample_draw(&MaskSpec::default(), shape, &mut rng).unwrap();
                prop_assert_eq!(rasterize(&draw, shape), brute_force(&draw, shape));
            }

            #[test]
            fn complement_settings_are_exact_complements(seed in any::<u64>()) {
                let mut a = MaskSpec::default();
                a.complement_prob = 0.0;
                let mut b = a.clone();
                b.complement_prob = 1.0;
                let ma = sample_mask(&a, (24, 24), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let mb = sample_mask(&b, (24, 24), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                prop_assert_eq!(ma.complement(), mb);
            }

            #[test]
            fn masked_halves_sum_to_image(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let img = ImageBuffer::new(Array3::from_shape_fn((16, 16, 3), |_| rng.random::<f32>())).unwrap();
                let m = sample_mask(&MaskSpec::default(), (16, 16), &mut rng).unwrap();
                let a = apply_mask(&img, &m).unwrap();
                let b = apply_mask(&img, &m.complement()).unwrap();
                prop_assert_eq!(a.pixels() + b.pixels(), img.pixels().clone());
            }
        }
    }
}
