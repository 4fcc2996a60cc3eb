//! Core pixel containers, scene bundles and their on-disk layout.
//!
//! A scene directory looks like
//!
//! ```text
//! <scene>/
//!   target.png      target image with the region to fill
//!   mask.png        8-bit grayscale, >= 0.5 means "fill"
//!   ref/*.png       1 to 5 reference images
//!   gt.png          optional ground truth
//!   scene.json      optional {"scene_id": .., "task_kind": ..}
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::Candidate;

pub const MAX_REFERENCES: usize = 5;
pub const MIN_SIDE: usize = 8;

/// H×W×3 image with every value finite and inside [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pixels: Array3<f32>,
}

impl ImageBuffer {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(Error::InvalidImage(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::ShapeTooSmall {
                height: h,
                width: w,
            });
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be even, got {h}x{w}"
            )));
        }
        if let Some(bad) = pixels
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidImage(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Self { pixels })
    }

    /// Builds an image from arbitrary values, clamping into [0, 1] and
    /// mapping non-finite values to 0.
    pub fn from_clamped(mut pixels: Array3<f32>) -> Result<Self> {
        pixels.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Self::new(pixels)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::new(Array3::from_shape_fn((height, width, 3), |(_, _, c)| rgb[c]))
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f32> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        [
            self.pixels[[y, x, 0]],
            self.pixels[[y, x, 1]],
            self.pixels[[y, x, 2]],
        ]
    }

    /// Rec. 601 luma.
    pub fn luma(&self) -> Array2<f32> {
        let (h, w) = self.shape();
        Array2::from_shape_fn((h, w), |(y, x)| {
            0.299 * self.pixels[[y, x, 0]]
                + 0.587 * self.pixels[[y, x, 1]]
                + 0.114 * self.pixels[[y, x, 2]]
        })
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            pixels: self.pixels.mapv(|v| (v * 255.0).round() / 255.0),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = self.shape();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = self.get(y as usize, x as usize);
            image::Rgb(p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
        });
        Self::new(pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Codec {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::from_rgb8(&open_image(path)?.to_rgb8())
    }

    /// Largest centered square crop, trimmed to even side length.
    pub fn center_crop_square(&self) -> Result<Self> {
        let (h, w) = self.shape();
        let side = h.min(w) & !1;
        let y0 = (h - side) / 2;
        let x0 = (w - side) / 2;
        Self::new(
            self.pixels
                .slice(ndarray::s![y0..y0 + side, x0..x0 + side, ..])
                .to_owned(),
        )
    }

    /// Bicubic (Catmull-Rom) resize.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if self.shape() == (height, width) {
            return Ok(self.clone());
        }
        let (h, w) = self.shape();
        let src = image::Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb(self.get(y as usize, x as usize))
        });
        let out = image::imageops::resize(
            &src,
            width as u32,
            height as u32,
            image::imageops::FilterType::CatmullRom,
        );
        let pixels = Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
            out.get_pixel(x as u32, y as u32).0[c]
        });
        Self::from_clamped(pixels)
    }

    /// Square working copy: center crop followed by a bicubic resize.
    pub fn to_working_resolution(&self, side: usize) -> Result<Self> {
        self.center_crop_square()?.resize(side, side)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f32> {
        ensure_same_shape(self.shape(), other.shape())?;
        Ok(Zip::from(&self.pixels)
            .and(&other.pixels)
            .fold(0.0f32, |acc, a, b| acc.max((a - b).abs())))
    }
}

/// H×W map where `true` (1) marks the region to fill and `false` (0) the
/// known region.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    values: Array2<bool>,
}

impl BinaryMask {
    pub fn new(values: Array2<bool>) -> Self {
        Self { values }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self::new(Array2::from_shape_fn((height, width), |(y, x)| f(y, x)))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(Array2::from_elem((height, width), false))
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::new(Array2::from_elem((height, width), true))
    }

    /// Binarizes a soft map: entries `>= threshold` become 1.
    pub fn from_soft(soft: &Array2<f32>, threshold: f32) -> Self {
        Self::new(soft.mapv(|v| v >= threshold))
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array2<bool> {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[[y, x]]
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count_ones() as f64 / self.values.len() as f64
    }

    pub fn complement(&self) -> Self {
        Self::new(self.values.mapv(|v| !v))
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        ensure_same_shape(self.shape(), other.shape())?;
        Ok(Self::new(
            Zip::from(&self.values)
                .and(&other.values)
                .map_collect(|a, b| *a || *b),
        ))
    }

    /// 1.0 / 0.0 view.
    pub fn to_f32(&self) -> Array2<f32> {
        self.values.mapv(|v| if v { 1.0 } else { 0.0 })
    }

    /// Area-average to `(height, width)` then binarize at 0.5.
    pub fn resample(&self, height: usize, width: usize) -> Self {
        if self.shape() == (height, width) {
            return self.clone();
        }
        Self::from_soft(&area_resample(&self.to_f32(), height, width), 0.5)
    }

    /// Inclusive bounding box `(y0, x0, y1, x1)` of the one-entries.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for ((y, x), v) in self.values.indexed_iter() {
            if *v {
                bbox = Some(match bbox {
                    None => (y, x, y, x),
                    Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                });
            }
        }
        bbox
    }

    pub fn touches_border(&self) -> bool {
        let (h, w) = self.shape();
        self.values
            .indexed_iter()
            .any(|((y, x), v)| *v && (y == 0 || x == 0 || y + 1 == h || x + 1 == w))
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let (h, w) = self.shape();
        image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Loads an 8-bit grayscale mask, binarizing at 0.5.
    pub fn load_png(path: &Path) -> Result<Self> {
        let gray = open_image(path)?.to_luma8();
        let (w, h) = gray.dimensions();
        Ok(Self::from_fn(h as usize, w as usize, |y, x| {
            gray.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0 >= 0.5
        }))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_luma8().save(path).map_err(|source| Error::Codec {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Area-weighted box resampling of a single plane. Exact block averaging
/// for integer downsampling factors.
pub fn area_resample(src: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let (sh, sw) = src.dim();
    let ys = axis_weights(sh, height);
    let xs = axis_weights(sw, width);
    Array2::from_shape_fn((height, width), |(y, x)| {
        let mut acc = 0.0f64;
        let mut norm = 0.0f64;
        for &(sy, wy) in &ys[y] {
            for &(sx, wx) in &xs[x] {
                acc += src[[sy, sx]] as f64 * wy * wx;
                norm += wy * wx;
            }
        }
        (acc / norm) as f32
    })
}

fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src).max(first + 1);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    (overlap > 1e-12).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}

pub(crate) fn ensure_same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::GeometryMismatch(format!(
            "{}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Codec {
            path: path.to_path_buf(),
            source,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Inpaint,
    Outpaint,
}

/// References, a target with its fill mask, and optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub task_kind: TaskKind,
    pub references: Vec<ImageBuffer>,
    pub target: ImageBuffer,
    pub target_mask: BinaryMask,
    pub ground_truth: Option<ImageBuffer>,
}

impl Scene {
    pub fn new(
        scene_id: impl Into<String>,
        task_kind: TaskKind,
        references: Vec<ImageBuffer>,
        target: ImageBuffer,
        target_mask: BinaryMask,
        ground_truth: Option<ImageBuffer>,
    ) -> Result<Self> {
        let scene = Self {
            scene_id: scene_id.into(),
            task_kind,
            references,
            target,
            target_mask,
            ground_truth,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.references.len();
        if n > MAX_REFERENCES {
            return Err(Error::TooManyReferences { count: n });
        }
        if n == 0 {
            return Err(Error::InvalidConfig("scene needs at least one reference".into()));
        }
        ensure_same_shape(self.target_mask.shape(), self.target.shape())?;
        if let Some(gt) = &self.ground_truth {
            ensure_same_shape(gt.shape(), self.target.shape())?;
            let tol = 1.0 / 255.0 + 1e-6;
            for ((y, x), fill) in self.target_mask.values().indexed_iter() {
                if *fill {
                    continue;
                }
                for c in 0..3 {
                    let d = (gt.pixels()[[y, x, c]] - self.target.pixels()[[y, x, c]]).abs();
                    if d > tol {
                        return Err(Error::GeometryMismatch(format!(
                            "ground truth disagrees with target at known pixel ({y},{x})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Target with the fill region zeroed: `(1 - M) ⊙ I_tgt`.
    pub fn masked_target(&self) -> ImageBuffer {
        crate::mask::apply_mask(&self.target, &self.target_mask)
            .expect("scene invariant: mask matches target")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneMeta {
    scene_id: Option<String>,
    task_kind: Option<TaskKind>,
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ext) if ext == "png" || ext == "jpg" || ext == "jpeg"
    )
}

/// Loads and validates a scene directory.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let incomplete = |missing: &str| Error::IncompleteScene {
        path: path.to_path_buf(),
        missing: missing.to_string(),
    };
    if !path.is_dir() {
        return Err(incomplete("scene directory"));
    }
    let target_path = path.join("target.png");
    let mask_path = path.join("mask.png");
    let ref_dir = path.join("ref");
    if !target_path.is_file() {
        return Err(incomplete("target.png"));
    }
    if !mask_path.is_file() {
        return Err(incomplete("mask.png"));
    }
    if !ref_dir.is_dir() {
        return Err(incomplete("ref/"));
    }

    let mut ref_paths: Vec<PathBuf> = fs::read_dir(&ref_dir)
        .map_err(|e| Error::io(&ref_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    ref_paths.sort();
    if ref_paths.is_empty() {
        return Err(incomplete("reference images in ref/"));
    }
    if ref_paths.len() > MAX_REFERENCES {
        return Err(Error::TooManyReferences {
            count: ref_paths.len(),
        });
    }

    let target = ImageBuffer::load_png(&target_path)?;
    let target_mask = BinaryMask::load_png(&mask_path)?;
    ensure_same_shape(target_mask.shape(), target.shape())?;

    let references = ref_paths
        .iter()
        .map(|p| load_reference(p))
        .collect::<Result<Vec<_>>>()?;

    let gt_path = path.join("gt.png");
    let ground_truth = if gt_path.is_file() {
        Some(ImageBuffer::load_png(&gt_path)?)
    } else {
        None
    };

    let meta_path = path.join("scene.json");
    let meta: SceneMeta = if meta_path.is_file() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        serde_json::from_str(&text)?
    } else {
        SceneMeta {
            scene_id: None,
            task_kind: None,
        }
    };
    let scene_id = meta.scene_id.unwrap_or_else(|| {
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".into())
    });
    let task_kind = meta.task_kind.unwrap_or(if target_mask.touches_border() {
        TaskKind::Outpaint
    } else {
        TaskKind::Inpaint
    });

    Scene::new(scene_id, task_kind, references, target, target_mask, ground_truth)
}

// References may come at any resolution; odd trailing rows/columns are
// dropped so the even-size invariant holds.
fn load_reference(path: &Path) -> Result<ImageBuffer> {
    let rgb = open_image(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let (h, w) = ((h as usize) & !1, (w as usize) & !1);
    let pixels = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        rgb.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    });
    ImageBuffer::new(pixels)
}

/// Writes a scene in the directory layout that [`load_scene`] reads.
pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    let ref_dir = path.join("ref");
    fs::create_dir_all(&ref_dir).map_err(|e| Error::io(&ref_dir, e))?;
    scene.target.save_png(&path.join("target.png"))?;
    scene.target_mask.save_png(&path.join("mask.png"))?;
    for (i, r) in scene.references.iter().enumerate() {
        r.save_png(&ref_dir.join(format!("ref_{i:02}.png")))?;
    }
    if let Some(gt) = &scene.ground_truth {
        gt.save_png(&path.join("gt.png"))?;
    }
    let meta = SceneMeta {
        scene_id: Some(scene.scene_id.clone()),
        task_kind: Some(scene.task_kind),
    };
    let meta_path = path.join("scene.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
        .map_err(|e| Error::io(&meta_path, e))
}

/// Sidecar record stored next to each candidate image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub seed: u64,
    pub match_count: Option<usize>,
    pub metrics: Option<crate::metrics::MetricReport>,
}

pub fn candidate_stem(seed: u64) -> String {
    format!("seed_{seed:04}")
}

/// Writes `seed_NNNN.png` plus a one-line JSON sidecar `seed_NNNN.json`.
/// Returns the image path.
pub fn save_candidate(candidate: &Candidate, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = candidate_stem(candidate.seed);
    let image_path = dir.join(format!("{stem}.png"));
    candidate.image.save_png(&image_path)?;
    let record = CandidateRecord {
        seed: candidate.seed,
        match_count: candidate.match_count,
        metrics: candidate.metrics.clone(),
    };
    let sidecar = dir.join(format!("{stem}.json"));
    let mut file = fs::File::create(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    writeln!(file, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&sidecar, e))?;
    Ok(image_path)
}

/// Reloads a candidate written by [`save_candidate`]. The raw generation is
/// not persisted, so `raw` is set to the composited image.
pub fn load_candidate(dir: &Path, seed: u64) -> Result<Candidate> {
    let stem = candidate_stem(seed);
    let image = ImageBuffer::load_png(&dir.join(format!("{stem}.png")))?;
    let sidecar = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let record: CandidateRecord = serde_json::from_str(text.trim())?;
    Ok(Candidate {
        raw: image.clone(),
        image,
        seed: record.seed,
        match_count: record.match_count,
        metrics: record.metrics,
    })
}
