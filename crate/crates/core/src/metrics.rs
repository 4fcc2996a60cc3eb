//! Masked low-level metrics (PSNR, SSIM) and embedding metrics behind
//! pluggable embedders.
//!
//! The learned perceptual metrics need pretrained networks that are not
//! bundled. Each slot takes an [`ImageEmbedder`] or [`PairwiseMetric`]; the
//! crate ships lightweight hand-crafted stand-ins, and every report records
//! which variant filled each slot.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::Candidate;
use crate::scene::{BinaryMask, ImageBuffer, Scene};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// The six reported metrics, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
    Lpips,
    DreamSim,
    Dino,
    Clip,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Psnr,
        Metric::Ssim,
        Metric::Lpips,
        Metric::DreamSim,
        Metric::Dino,
        Metric::Clip,
    ];

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Lpips | Metric::DreamSim)
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::Psnr => "PSNR↑",
            Metric::Ssim => "SSIM↑",
            Metric::Lpips => "LPIPS↓",
            Metric::DreamSim => "DreamSim↓",
            Metric::Dino => "DINO↑",
            Metric::Clip => "CLIP↑",
        }
    }

    /// Plain-ASCII column name used in CSV output.
    pub fn key(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Lpips => "lpips",
            Metric::DreamSim => "dreamsim",
            Metric::Dino => "dino",
            Metric::Clip => "clip",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `f64::INFINITY` for an exact match; serialized as `"inf"`.
    #[serde(with = "psnr_repr")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dreamsim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dino: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    /// Metric key → implementation variant that produced it.
    #[serde(default)]
    pub variants: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Psnr => Some(self.psnr),
            Metric::Ssim => Some(self.ssim),
            Metric::Lpips => self.lpips,
            Metric::DreamSim => self.dreamsim,
            Metric::Dino => self.dino,
            Metric::Clip => self.clip,
        }
    }
}

mod psnr_repr {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(de::Error::custom(format!("bad psnr value {t:?}"))),
        }
    }
}

fn check_pair(a: &ImageBuffer, b: &ImageBuffer, mask: &BinaryMask) -> Result<()> {
    if a.shape() != b.shape() || a.shape() != mask.shape() {
        return Err(Error::GeometryMismatch(format!(
            "metric inputs {:?}, {:?}, mask {:?}",
            a.shape(),
            b.shape(),
            mask.shape()
        )));
    }
    if mask.count_ones() == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(())
}

/// PSNR with peak 1 over the pixels where `mask` is set.
pub fn masked_psnr(a: &ImageBuffer, b: &ImageBuffer, mask: &BinaryMask) -> Result<f64> {
    check_pair(a, b, mask)?;
    let (pa, pb) = (a.pixels(), b.pixels());
    let mut sum = 0.0f64;
    for ((y, x), m) in mask.values().indexed_iter() {
        if *m {
            for c in 0..3 {
                let d = (pa[[y, x, c]] - pb[[y, x, c]]) as f64;
                sum += d * d;
            }
        }
    }
    let mse = sum / (3 * mask.count_ones()) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window() -> Array2<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g = |i: usize| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    let w = Array2::from_shape_fn((SSIM_WINDOW, SSIM_WINDOW), |(i, j)| g(i) * g(j));
    let s = w.sum();
    w / s
}

/// Mean SSIM over window centers inside the mask, computed per channel and
/// averaged. Windows that cross the image border use the in-bounds part of
/// the Gaussian, renormalized.
pub fn masked_ssim(a: &ImageBuffer, b: &ImageBuffer, mask: &BinaryMask) -> Result<f64> {
    check_pair(a, b, mask)?;
    let (y0, x0, y1, x1) = mask.bounding_box().ok_or(Error::EmptyRegion)?;
    let (bh, bw) = (y1 - y0 + 1, x1 - x0 + 1);
    if bh < SSIM_WINDOW || bw < SSIM_WINDOW {
        return Err(Error::RegionTooSmall {
            height: bh,
            width: bw,
        });
    }
    let win = gaussian_window();
    let r = (SSIM_WINDOW / 2) as isize;
    let (h, w) = a.shape();
    let (pa, pb) = (a.pixels(), b.pixels());
    let mut total = 0.0;
    let mut count = 0usize;
    for ((cy, cx), m) in mask.values().indexed_iter() {
        if !*m {
            continue;
        }
        for c in 0..3 {
            let (mut ws, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -r..=r {
                let y = cy as isize + dy;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let x = cx as isize + dx;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let k = win[[(dy + r) as usize, (dx + r) as usize]];
                    let va = pa[[y as usize, x as usize, c]] as f64;
                    let vb = pb[[y as usize, x as usize, c]] as f64;
                    ws += k;
                    sa += k * va;
                    sb += k * vb;
                    saa += k * va * va;
                    sbb += k * vb * vb;
                    sab += k * va * vb;
                }
            }
            let (mu_a, mu_b) = (sa / ws, sb / ws);
            let var_a = saa / ws - mu_a * mu_a;
            let var_b = sbb / ws - mu_b * mu_b;
            let cov = sab / ws - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
            total += num / den;
        }
        count += 3;
    }
    Ok((total / count as f64).min(1.0))
}

/// Maps an image to a unit-norm vector.
pub trait ImageEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, image: &ImageBuffer) -> Result<Vec<f32>>;
}

/// A metric defined directly on an image pair (lower is more similar).
pub trait PairwiseMetric: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Similarity,
    /// `1 - cos`.
    Distance,
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::GeometryMismatch(format!(
            "embedding lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Backend("zero-length embedding".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn embedding_distance(
    a: &ImageBuffer,
    b: &ImageBuffer,
    embedder: &dyn ImageEmbedder,
    kind: EmbeddingKind,
) -> Result<f64> {
    let cos = cosine(&embedder.embed(a)?, &embedder.embed(b)?)?;
    Ok(match kind {
        EmbeddingKind::Similarity => cos,
        EmbeddingKind::Distance => 1.0 - cos,
    })
}

fn normalized(v: Vec<f32>) -> Result<Vec<f32>> {
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Backend("embedding has zero or non-finite norm".into()));
    }
    Ok(v.into_iter().map(|x| (x as f64 / n) as f32).collect())
}

/// Mean RGB.
#[derive(Debug, Clone, Copy, Default)]
pub struct ChannelMeanEmbedder;

impl ImageEmbedder for ChannelMeanEmbedder {
    fn name(&self) -> &str {
        "channel-mean"
    }

    fn embed(&self, image: &ImageBuffer) -> Result<Vec<f32>> {
        let p = image.pixels();
        let n = (image.height() * image.width()) as f64;
        let v = (0..3)
            .map(|c| (p.index_axis(ndarray::Axis(2), c).iter().map(|v| *v as f64).sum::<f64>() / n) as f32)
            .collect();
        normalized(v)
    }
}

/// Area-downsampled `side × side` RGB thumbnail plus a constant bias entry.
#[derive(Debug, Clone, Copy)]
pub struct ThumbnailEmbedder {
    pub side: usize,
}

impl Default for ThumbnailEmbedder {
    fn default() -> Self {
        Self { side: 8 }
    }
}

impl ImageEmbedder for ThumbnailEmbedder {
    fn name(&self) -> &str {
        "thumbnail"
    }

    fn embed(&self, image: &ImageBuffer) -> Result<Vec<f32>> {
        let mut v = Vec::with_capacity(3 * self.side * self.side + 1);
        for c in 0..3 {
            let plane = image.pixels().index_axis(ndarray::Axis(2), c).to_owned();
            v.extend(crate::scene::area_resample(&plane, self.side, self.side).iter().copied());
        }
        v.push(0.05);
        normalized(v)
    }
}

/// Joint RGB histogram with `bins` levels per channel, square-rooted.
#[derive(Debug, Clone, Copy)]
pub struct ColorHistogramEmbedder {
    pub bins: usize,
}

impl Default for ColorHistogramEmbedder {
    fn default() -> Self {
        Self { bins: 4 }
    }
}

impl ImageEmbedder for ColorHistogramEmbedder {
    fn name(&self) -> &str {
        "color-histogram"
    }

    fn embed(&self, image: &ImageBuffer) -> Result<Vec<f32>> {
        let b = self.bins;
        let mut hist = vec![0.0f32; b * b * b];
        let q = |v: f32| ((v * b as f32) as usize).min(b - 1);
        for y in 0..image.height() {
            for x in 0..image.width() {
                let [r, g, bl] = image.get(y, x);
                hist[(q(r) * b + q(g)) * b + q(bl)] += 1.0;
            }
        }
        normalized(hist.into_iter().map(f32::sqrt).collect())
    }
}

fn gradients(luma: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let (h, w) = luma.dim();
    let gx = Array2::from_shape_fn((h, w), |(y, x)| {
        luma[[y, (x + 1).min(w - 1)]] - luma[[y, x.saturating_sub(1)]]
    });
    let gy = Array2::from_shape_fn((h, w), |(y, x)| {
        luma[[(y + 1).min(h - 1), x]] - luma[[y.saturating_sub(1), x]]
    });
    (gx, gy)
}

/// Histogram of oriented luma gradients over a `cells × cells` grid.
#[derive(Debug, Clone, Copy)]
pub struct GradientHistogramEmbedder {
    pub cells: usize,
    pub orientations: usize,
}

impl Default for GradientHistogramEmbedder {
    fn default() -> Self {
        Self {
            cells: 4,
            orientations: 8,
        }
    }
}

impl ImageEmbedder for GradientHistogramEmbedder {
    fn name(&self) -> &str {
        "gradient-histogram"
    }

    fn embed(&self, image: &ImageBuffer) -> Result<Vec<f32>> {
        let (h, w) = image.shape();
        let (gx, gy) = gradients(&image.luma());
        let (nc, no) = (self.cells, self.orientations);
        let mut v = vec![0.0f32; nc * nc * no];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (gx[[y, x]], gy[[y, x]]);
                let mag = (dx * dx + dy * dy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                // Unsigned orientation in [0, π).
                let angle = dy.atan2(dx).rem_euclid(std::f32::consts::PI);
                let bin = ((angle / std::f32::consts::PI * no as f32) as usize).min(no - 1);
                let cell = (y * nc / h) * nc + x * nc / w;
                v[cell * no + bin] += mag;
            }
        }
        let scale = (h * w) as f32 / (nc * nc) as f32;
        let mut v: Vec<f32> = v.into_iter().map(|m| m / scale).collect();
        v.push(0.01);
        normalized(v)
    }
}

/// Mean absolute difference of luma gradients plus mean absolute color
/// difference.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientL1;

impl PairwiseMetric for GradientL1 {
    fn name(&self) -> &str {
        "gradient-l1"
    }

    fn distance(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(Error::GeometryMismatch("pairwise metric shapes differ".into()));
        }
        let (ax, ay) = gradients(&a.luma());
        let (bx, by) = gradients(&b.luma());
        let n = ax.len() as f64;
        let grad: f64 = ax
            .iter()
            .zip(&bx)
            .chain(ay.iter().zip(&by))
            .map(|(p, q)| (p - q).abs() as f64)
            .sum::<f64>()
            / (2.0 * n);
        let color: f64 = a
            .pixels()
            .iter()
            .zip(b.pixels())
            .map(|(p, q)| (p - q).abs() as f64)
            .sum::<f64>()
            / a.pixels().len() as f64;
        Ok(grad + color)
    }
}

pub const EMBEDDER_NAMES: [&str; 4] = ["channel-mean", "thumbnail", "color-histogram", "gradient-histogram"];
pub const PAIRWISE_NAMES: [&str; 1] = ["gradient-l1"];

pub fn embedder_by_name(name: &str) -> Option<Box<dyn ImageEmbedder>> {
    match name {
        "channel-mean" => Some(Box::new(ChannelMeanEmbedder)),
        "thumbnail" => Some(Box::new(ThumbnailEmbedder::default())),
        "color-histogram" => Some(Box::new(ColorHistogramEmbedder::default())),
        "gradient-histogram" => Some(Box::new(GradientHistogramEmbedder::default())),
        _ => None,
    }
}

pub fn pairwise_by_name(name: &str) -> Option<Box<dyn PairwiseMetric>> {
    match name {
        "gradient-l1" => Some(Box::new(GradientL1)),
        _ => None,
    }
}

/// Which implementation fills each embedding slot; `"none"` leaves the
/// metric absent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSelection {
    pub lpips: String,
    pub dreamsim: String,
    pub dino: String,
    pub clip: String,
}

impl Default for MetricSelection {
    fn default() -> Self {
        Self {
            lpips: "gradient-l1".into(),
            dreamsim: "thumbnail".into(),
            dino: "gradient-histogram".into(),
            clip: "color-histogram".into(),
        }
    }
}

impl MetricSelection {
    pub fn none() -> Self {
        Self {
            lpips: "none".into(),
            dreamsim: "none".into(),
            dino: "none".into(),
            clip: "none".into(),
        }
    }
}

/// Resolved metric implementations.
#[derive(Default)]
pub struct MetricSuite {
    pub lpips: Option<Box<dyn PairwiseMetric>>,
    pub dreamsim: Option<Box<dyn ImageEmbedder>>,
    pub dino: Option<Box<dyn ImageEmbedder>>,
    pub clip: Option<Box<dyn ImageEmbedder>>,
}

impl MetricSuite {
    pub fn from_selection(sel: &MetricSelection) -> Result<Self> {
        let emb = |slot: &str, name: &str| -> Result<Option<Box<dyn ImageEmbedder>>> {
            if name == "none" {
                return Ok(None);
            }
            embedder_by_name(name).map(Some).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "{slot}: unknown embedder {name:?} (known: none, {})",
                    EMBEDDER_NAMES.join(", ")
                ))
            })
        };
        let lpips = match sel.lpips.as_str() {
            "none" => None,
            name => Some(embedder_pairwise(name)?),
        };
        Ok(Self {
            lpips,
            dreamsim: emb("dreamsim", &sel.dreamsim)?,
            dino: emb("dino", &sel.dino)?,
            clip: emb("clip", &sel.clip)?,
        })
    }
}

fn embedder_pairwise(name: &str) -> Result<Box<dyn PairwiseMetric>> {
    if let Some(p) = pairwise_by_name(name) {
        return Ok(p);
    }
    // Any embedder can stand in as a cosine-distance pairwise metric.
    embedder_by_name(name)
        .map(|e| Box::new(CosineDistance(e)) as Box<dyn PairwiseMetric>)
        .ok_or_else(|| {
            Error::InvalidConfig(format!(
                "lpips: unknown metric {name:?} (known: none, {}, {})",
                PAIRWISE_NAMES.join(", "),
                EMBEDDER_NAMES.join(", ")
            ))
        })
}

struct CosineDistance(Box<dyn ImageEmbedder>);

impl PairwiseMetric for CosineDistance {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn distance(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
        embedding_distance(a, b, self.0.as_ref(), EmbeddingKind::Distance)
    }
}

/// Low-level metrics on the fill region against ground truth, embedding
/// metrics on full images. A failing embedder leaves its metric absent.
pub fn evaluate_candidate(candidate: &Candidate, scene: &Scene, suite: &MetricSuite) -> Result<MetricReport> {
    let gt = scene.ground_truth.as_ref().ok_or(Error::NoGroundTruth)?;
    evaluate_image(&candidate.image, gt, &scene.target_mask, suite)
}

pub fn evaluate_image(
    image: &ImageBuffer,
    gt: &ImageBuffer,
    mask: &BinaryMask,
    suite: &MetricSuite,
) -> Result<MetricReport> {
    let mut report = MetricReport {
        psnr: masked_psnr(image, gt, mask)?,
        ssim: masked_ssim(image, gt, mask)?,
        lpips: None,
        dreamsim: None,
        dino: None,
        clip: None,
        variants: BTreeMap::new(),
    };
    let keep = |metric: Metric, r: Result<f64>| match r {
        Ok(v) if v.is_finite() => Some(v),
        Ok(_) => None,
        Err(e) => {
            log::warn!("{metric} unavailable: {e}");
            None
        }
    };
    if let Some(m) = &suite.lpips {
        report.lpips = keep(Metric::Lpips, m.distance(image, gt));
        report.variants.insert("lpips".into(), m.name().into());
    }
    let slots: [(Metric, &Option<Box<dyn ImageEmbedder>>, EmbeddingKind); 3] = [
        (Metric::DreamSim, &suite.dreamsim, EmbeddingKind::Distance),
        (Metric::Dino, &suite.dino, EmbeddingKind::Similarity),
        (Metric::Clip, &suite.clip, EmbeddingKind::Similarity),
    ];
    for (metric, slot, kind) in slots {
        if let Some(e) = slot {
            let v = keep(metric, embedding_distance(image, gt, e.as_ref(), kind));
            match metric {
                Metric::DreamSim => report.dreamsim = v,
                Metric::Dino => report.dino = v,
                _ => report.clip = v,
            }
            report.variants.insert(metric.key().into(), e.name().into());
        }
    }
    Ok(report)
}
