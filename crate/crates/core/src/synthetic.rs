//! Procedural scenes: colored rectangles and discs over a textured
//! background, re-rendered under small camera and exposure changes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mask::apply_mask;
use crate::scene::{BinaryMask, ImageBuffer, Scene, TaskKind};

const MIN_MASK_FRACTION: f64 = 0.1;
const MAX_MASK_FRACTION: f64 = 0.6;
/// Smallest fill-region side; keeps the 11×11 SSIM window inside the hole.
const MIN_REGION_SIDE: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq)]
enum ShapeKind {
    Rect { half_w: f32, half_h: f32 },
    Disc { radius: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Shape {
    kind: ShapeKind,
    cx: f32,
    cy: f32,
    color: [f32; 3],
}

impl Shape {
    fn contains(&self, u: f32, v: f32) -> bool {
        match self.kind {
            ShapeKind::Rect { half_w, half_h } => {
                (u - self.cx).abs() <= half_w && (v - self.cy).abs() <= half_h
            }
            ShapeKind::Disc { radius } => {
                let (du, dv) = (u - self.cx, v - self.cy);
                du * du + dv * dv <= radius * radius
            }
        }
    }

    /// `(u0, v0, u1, v1)` in scene coordinates.
    fn extent(&self) -> (f32, f32, f32, f32) {
        let (hw, hh) = match self.kind {
            ShapeKind::Rect { half_w, half_h } => (half_w, half_h),
            ShapeKind::Disc { radius } => (radius, radius),
        };
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Background {
    base: [f32; 3],
    tilt: [f32; 3],
    angle: f32,
    stripe_freq: f32,
    stripe_amp: f32,
    stripe_phase: f32,
    lattice: Vec<f32>,
}

const LATTICE: usize = 9;

impl Background {
    fn random(rng: &mut impl Rng) -> Self {
        let base = [0.0; 3].map(|_| rng.random_range(0.25..0.6));
        let tilt = [0.0; 3].map(|_| rng.random_range(-0.15..0.15));
        Self {
            base,
            tilt,
            angle: rng.random_range(0.0..std::f32::consts::TAU),
            stripe_freq: rng.random_range(4.0..9.0),
            stripe_amp: rng.random_range(0.02..0.06),
            stripe_phase: rng.random_range(0.0..std::f32::consts::TAU),
            lattice: (0..LATTICE * LATTICE).map(|_| rng.random_range(-0.06..0.06)).collect(),
        }
    }

    fn value_noise(&self, u: f32, v: f32) -> f32 {
        // Bilinear interpolation on a periodic lattice spanning one unit.
        let n = LATTICE as f32 - 1.0;
        let (fu, fv) = ((u.rem_euclid(1.0)) * n, (v.rem_euclid(1.0)) * n);
        let (iu, iv) = (fu.floor() as usize, fv.floor() as usize);
        let (tu, tv) = (fu - iu as f32, fv - iv as f32);
        let at = |a: usize, b: usize| self.lattice[(b.min(LATTICE - 1)) * LATTICE + a.min(LATTICE - 1)];
        let top = at(iu, iv) * (1.0 - tu) + at(iu + 1, iv) * tu;
        let bottom = at(iu, iv + 1) * (1.0 - tu) + at(iu + 1, iv + 1) * tu;
        top * (1.0 - tv) + bottom * tv
    }

    fn color(&self, u: f32, v: f32) -> [f32; 3] {
        let (s, c) = self.angle.sin_cos();
        let along = u * c + v * s;
        let stripe = self.stripe_amp
            * (std::f32::consts::TAU * self.stripe_freq * along + self.stripe_phase).sin();
        let noise = self.value_noise(u, v);
        let mut out = [0.0; 3];
        for ch in 0..3 {
            out[ch] = self.base[ch] + self.tilt[ch] * (along - 0.5) + stripe + noise;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    background: Background,
    shapes: Vec<Shape>,
}

impl Layout {
    fn random(rng: &mut impl Rng) -> Self {
        let background = Background::random(rng);
        let count = rng.random_range(3..=6);
        let shapes = (0..count)
            .map(|_| {
                let kind = if rng.random_bool(0.6) {
                    ShapeKind::Rect {
                        half_w: rng.random_range(0.06..0.15),
                        half_h: rng.random_range(0.06..0.15),
                    }
                } else {
                    ShapeKind::Disc {
                        radius: rng.random_range(0.07..0.14),
                    }
                };
                Shape {
                    kind,
                    cx: rng.random_range(0.2..0.8),
                    cy: rng.random_range(0.2..0.8),
                    color: saturated_color(rng),
                }
            })
            .collect();
        Self { background, shapes }
    }

    fn color(&self, u: f32, v: f32) -> [f32; 3] {
        self.shapes
            .iter()
            .rev()
            .find(|s| s.contains(u, v))
            .map(|s| s.color)
            .unwrap_or_else(|| self.background.color(u, v))
    }
}

fn saturated_color(rng: &mut impl Rng) -> [f32; 3] {
    let hue = rng.random_range(0.0..6.0f32);
    let sector = hue.floor() as usize;
    let f = hue - sector as f32;
    let (hi, lo) = (rng.random_range(0.8..1.0f32), rng.random_range(0.0..0.2f32));
    let mid_up = lo + (hi - lo) * f;
    let mid_down = hi - (hi - lo) * f;
    match sector {
        0 => [hi, mid_up, lo],
        1 => [mid_down, hi, lo],
        2 => [lo, hi, mid_up],
        3 => [lo, mid_down, hi],
        4 => [mid_up, lo, hi],
        _ => [hi, lo, mid_down],
    }
}

/// Camera/exposure change applied when re-rendering a layout.
#[derive(Debug, Clone, Copy, PartialEq)]
struct View {
    shift_u: f32,
    shift_v: f32,
    zoom: f32,
    gain: f32,
    offset: f32,
}

impl View {
    const IDENTITY: View = View {
        shift_u: 0.0,
        shift_v: 0.0,
        zoom: 1.0,
        gain: 1.0,
        offset: 0.0,
    };

    fn random(rng: &mut impl Rng) -> Self {
        Self {
            shift_u: rng.random_range(-0.08..0.08),
            shift_v: rng.random_range(-0.08..0.08),
            zoom: rng.random_range(1.0..1.15),
            gain: rng.random_range(0.85..1.15),
            offset: rng.random_range(-0.05..0.05),
        }
    }

    fn scene_coords(&self, px: f32, py: f32, h: usize, w: usize) -> (f32, f32) {
        let u = (px / w as f32 - 0.5) / self.zoom + 0.5 + self.shift_u;
        let v = (py / h as f32 - 0.5) / self.zoom + 0.5 + self.shift_v;
        (u, v)
    }
}

// 2×2 supersampled rendering.
fn render(layout: &Layout, view: &View, h: usize, w: usize) -> ImageBuffer {
    const SUB: [f32; 2] = [0.25, 0.75];
    let pixels = ndarray::Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let mut acc = 0.0;
        for sy in SUB {
            for sx in SUB {
                let (u, v) = view.scene_coords(x as f32 + sx, y as f32 + sy, h, w);
                acc += layout.color(u, v)[c];
            }
        }
        (acc / 4.0 * view.gain + view.offset).clamp(0.0, 1.0)
    });
    ImageBuffer::new(pixels).expect("clamped render")
}

/// One random layout seen from one random view; the training distribution
/// for toy pretraining.
pub fn random_view_image(rng: &mut impl Rng, size: (usize, usize)) -> ImageBuffer {
    let layout = Layout::random(rng);
    let view = if rng.random_bool(0.5) {
        View::IDENTITY
    } else {
        View::random(rng)
    };
    render(&layout, &view, size.0, size.1)
}

fn pixel_box(extent: (f32, f32, f32, f32), h: usize, w: usize) -> (i64, i64, i64, i64) {
    let (u0, v0, u1, v1) = extent;
    (
        (v0 * h as f32).floor() as i64,
        (u0 * w as f32).floor() as i64,
        (v1 * h as f32).ceil() as i64,
        (u1 * w as f32).ceil() as i64,
    )
}

fn box_mask(b: (i64, i64, i64, i64), h: usize, w: usize) -> BinaryMask {
    let (y0, x0, y1, x1) = b;
    BinaryMask::from_fn(h, w, |y, x| {
        let (y, x) = (y as i64, x as i64);
        y >= y0 && y < y1 && x >= x0 && x < x1
    })
}

fn clamp_box(b: (i64, i64, i64, i64), h: usize, w: usize) -> (i64, i64, i64, i64) {
    (
        b.0.max(0),
        b.1.max(0),
        b.2.min(h as i64),
        b.3.min(w as i64),
    )
}

// Rectangle around one object, grown until it covers the minimum area
// fraction; shrunk towards the object center if it exceeds the maximum.
fn inpaint_mask(rng: &mut impl Rng, shape: &Shape, h: usize, w: usize) -> BinaryMask {
    let margin = rng.random_range(1..=3);
    let (y0, x0, y1, x1) = pixel_box(shape.extent(), h, w);
    let mut b = clamp_box((y0 - margin, x0 - margin, y1 + margin, x1 + margin), h, w);
    let area = |b: (i64, i64, i64, i64)| ((b.2 - b.0) * (b.3 - b.1)) as f64 / (h * w) as f64;
    let side = MIN_REGION_SIDE as i64;
    while area(b) < MIN_MASK_FRACTION || b.2 - b.0 < side || b.3 - b.1 < side {
        let grow_y = i64::from(area(b) < MIN_MASK_FRACTION || b.2 - b.0 < side);
        let grow_x = i64::from(area(b) < MIN_MASK_FRACTION || b.3 - b.1 < side);
        b = clamp_box((b.0 - grow_y, b.1 - grow_x, b.2 + grow_y, b.3 + grow_x), h, w);
    }
    while area(b) > MAX_MASK_FRACTION {
        let shrink_y = i64::from(b.2 - b.0 > side + 1);
        let shrink_x = i64::from(b.3 - b.1 > side + 1);
        b = (b.0 + shrink_y, b.1 + shrink_x, b.2 - shrink_y, b.3 - shrink_x);
    }
    box_mask(b, h, w)
}

// Strip along one side that covers the object closest to that side.
fn outpaint_mask(rng: &mut impl Rng, shapes: &[Shape], h: usize, w: usize) -> Option<BinaryMask> {
    let mut sides = [0usize, 1, 2, 3];
    for i in (1..4).rev() {
        sides.swap(i, rng.random_range(0..=i));
    }
    let margin = 1;
    for side in sides {
        // Depth of the strip needed to swallow each object completely.
        let (depth, extent) = shapes
            .iter()
            .map(|s| {
                let (y0, x0, y1, x1) = pixel_box(s.extent(), h, w);
                match side {
                    0 => (x1 + margin, w),
                    1 => (w as i64 - x0 + margin, w),
                    2 => (y1 + margin, h),
                    _ => (h as i64 - y0 + margin, h),
                }
            })
            .min_by_key(|(d, _)| *d)?;
        let depth = depth
            .max((MIN_MASK_FRACTION * extent as f64).ceil() as i64)
            .max(MIN_REGION_SIDE as i64) as usize;
        if depth as f64 / extent as f64 > MAX_MASK_FRACTION {
            continue;
        }
        return Some(BinaryMask::from_fn(h, w, |y, x| match side {
            0 => x < depth,
            1 => x >= w - depth,
            2 => y < depth,
            _ => y >= h - depth,
        }));
    }
    None
}

/// Deterministic synthetic scene for `(seed, size)`. Sizes must be at least
/// 16 and even.
pub fn make_synthetic_scene(seed: u64, size: (usize, usize)) -> Scene {
    let (h, w) = size;
    assert!(h >= 16 && w >= 16, "synthetic scenes need H, W >= 16");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = Layout::random(&mut rng);
    let ground_truth = render(&layout, &View::IDENTITY, h, w);

    let num_refs = rng.random_range(3..=5);
    let references = (0..num_refs)
        .map(|_| render(&layout, &View::random(&mut rng), h, w))
        .collect();

    // The topmost shape is never occluded, so hiding it hides a whole object.
    let hidden = layout.shapes.len() - 1;
    let (task_kind, mask) = if rng.random_bool(0.4) {
        match outpaint_mask(&mut rng, &layout.shapes, h, w) {
            Some(m) => (TaskKind::Outpaint, m),
            None => (TaskKind::Inpaint, inpaint_mask(&mut rng, &layout.shapes[hidden], h, w)),
        }
    } else {
        (TaskKind::Inpaint, inpaint_mask(&mut rng, &layout.shapes[hidden], h, w))
    };

    let target = apply_mask(&ground_truth, &mask).expect("same shape");
    Scene::new(
        format!("synthetic_{seed:04}"),
        task_kind,
        references,
        target,
        mask,
        Some(ground_truth),
    )
    .expect("synthetic scene is valid by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = make_synthetic_scene(17, (32, 32));
        let b = make_synthetic_scene(17, (32, 32));
        assert_eq!(a, b);
        assert_ne!(a, make_synthetic_scene(18, (32, 32)));
    }

    #[test]
    fn seed0_mask_fraction() {
        let s = make_synthetic_scene(0, (64, 64));
        let frac = s.target_mask.area_fraction();
        assert!((0.1..=0.6).contains(&frac), "{frac}");
    }

    #[test]
    fn mask_fraction_bounds_over_many_seeds() {
        for seed in 0..60 {
            for size in [(32, 32), (48, 64)] {
                let s = make_synthetic_scene(seed, size);
                let frac = s.target_mask.area_fraction();
                assert!((0.1..=0.6).contains(&frac), "seed {seed} {size:?}: {frac}");
                assert!((1..=5).contains(&s.references.len()));
            }
        }
    }

    #[test]
    fn ground_truth_matches_target_outside_mask() {
        let s = make_synthetic_scene(3, (32, 48));
        let gt = s.ground_truth.as_ref().unwrap();
        for ((y, x), fill) in s.target_mask.values().indexed_iter() {
            if !fill {
                assert_eq!(gt.get(y, x), s.target.get(y, x));
            } else {
                assert_eq!(s.target.get(y, x), [0.0; 3]);
            }
        }
    }

    #[test]
    fn hidden_region_differs_from_background_guess() {
        // The filled region must carry object content, not only background.
        let s = make_synthetic_scene(5, (32, 32));
        let gt = s.ground_truth.unwrap();
        let mut var = 0.0;
        let n = s.target_mask.count_ones() as f32;
        let mean: [f32; 3] = [0, 1, 2].map(|c| {
            s.target_mask
                .values()
                .indexed_iter()
                .filter(|(_, m)| **m)
                .map(|((y, x), _)| gt.pixels()[[y, x, c]])
                .sum::<f32>()
                / n
        });
        for ((y, x), m) in s.target_mask.values().indexed_iter() {
            if *m {
                for c in 0..3 {
                    var += (gt.pixels()[[y, x, c]] - mean[c]).powi(2);
                }
            }
        }
        assert!(var / n > 1e-3);
    }
}
