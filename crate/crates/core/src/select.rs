//! Correspondence-based ranking of candidates.
//!
//! Each candidate is matched against every reference; matches that land in
//! the fill region are counted and candidates are ranked by that count.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::Candidate;
use crate::scene::{BinaryMask, CandidateRecord, ImageBuffer, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub ref_index: usize,
    /// `(x, y)` in the reference.
    pub ref_point: (f32, f32),
    /// `(x, y)` in the candidate output.
    pub out_point: (f32, f32),
    pub confidence: f32,
}

/// Finds correspondences between two images. `ref_point` of each match is
/// in `a`, `out_point` in `b`, and `ref_index` is left at 0. Implementations
/// are called concurrently.
pub trait CorrespondenceMatcher: Send + Sync {
    fn name(&self) -> &str;

    fn min_confidence(&self) -> f32;

    fn match_pair(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<Vec<Match>>;
}

/// Corner detector, patch descriptor and matching thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassicalParams {
    /// Descriptor patch is `(2r + 1)²` pixels; corners closer than `r` to
    /// the border are skipped.
    pub patch_radius: usize,
    pub harris_k: f32,
    /// σ of the structure-tensor window.
    pub window_sigma: f32,
    /// Corners must exceed this fraction of the strongest response.
    pub relative_threshold: f32,
    /// Non-maximum suppression radius; 0 keeps every corner.
    pub nms_radius: usize,
    pub max_corners: usize,
    /// Best/second-best distance ratio, checked in both directions; 1 only
    /// rejects ties.
    pub ratio: f32,
    /// Largest descriptor distance: at most 2 for normalized descriptors,
    /// an RMS color difference for raw ones.
    pub max_distance: f32,
    pub min_confidence: f32,
    pub descriptor: DescriptorKind,
}

/// How patch descriptors are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorKind {
    /// Per-channel mean removed, scaled to unit length. Invariant to gain
    /// and offset changes.
    Normalized,
    /// Raw colors scaled by `1/sqrt(len)`, so distances are RMS color
    /// differences.
    Raw,
}

impl Default for ClassicalParams {
    fn default() -> Self {
        Self {
            patch_radius: 3,
            harris_k: 0.04,
            window_sigma: 1.0,
            relative_threshold: 0.001,
            nms_radius: 0,
            max_corners: 1024,
            ratio: 1.0,
            max_distance: 0.25,
            min_confidence: 0.0,
            descriptor: DescriptorKind::Raw,
        }
    }
}

/// Harris corners, color patch descriptors, mutual nearest neighbours with
/// a two-way ratio test. Deterministic and reentrant.
///
/// The defaults are tuned for small (32 to 64 px) images: every corner above
/// the threshold is kept and raw color patches are compared, so a match
/// means a near-identical patch exists in the other image.
#[derive(Debug, Clone, Default)]
pub struct ClassicalMatcher {
    pub params: ClassicalParams,
}

pub fn classical_matcher(params: ClassicalParams) -> ClassicalMatcher {
    ClassicalMatcher { params }
}

#[derive(Debug, Clone)]
struct Keypoint {
    x: usize,
    y: usize,
    descriptor: Vec<f32>,
}

fn sobel(luma: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
    let (h, w) = luma.dim();
    let at = |y: isize, x: isize| luma[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]];
    let gx = Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1))
    });
    let gy = Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1))
    });
    (gx, gy)
}

fn smooth(plane: &Array2<f32>, sigma: f32) -> Array2<f32> {
    crate::sampler::gaussian_blur(plane, 2.0 * sigma as f64)
}

impl ClassicalMatcher {
    /// `(x, y)` of every described corner, strongest first.
    pub fn corners(&self, image: &ImageBuffer) -> Vec<(f32, f32)> {
        self.keypoints(image).iter().map(|k| (k.x as f32, k.y as f32)).collect()
    }

    fn harris(&self, image: &ImageBuffer) -> Array2<f32> {
        let (gx, gy) = sobel(&image.luma());
        let s = self.params.window_sigma;
        let ixx = smooth(&(&gx * &gx), s);
        let iyy = smooth(&(&gy * &gy), s);
        let ixy = smooth(&(&gx * &gy), s);
        let k = self.params.harris_k;
        ndarray::Zip::from(&ixx)
            .and(&iyy)
            .and(&ixy)
            .map_collect(|a, b, c| a * b - c * c - k * (a + b) * (a + b))
    }

    fn keypoints(&self, image: &ImageBuffer) -> Vec<Keypoint> {
        let p = &self.params;
        let response = self.harris(image);
        let (h, w) = response.dim();
        let r = p.patch_radius;
        if h <= 2 * r || w <= 2 * r {
            return Vec::new();
        }
        let max = response.iter().copied().fold(0.0f32, f32::max);
        if max <= 0.0 {
            return Vec::new();
        }
        let threshold = p.relative_threshold * max;
        let n = p.nms_radius as isize;
        let mut corners = Vec::new();
        for y in r..h - r {
            for x in r..w - r {
                let v = response[[y, x]];
                if v <= threshold {
                    continue;
                }
                let mut is_max = true;
                'nms: for dy in -n..=n {
                    for dx in -n..=n {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if (dy, dx) == (0, 0) || yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let u = response[[yy as usize, xx as usize]];
                        // Ties go to the earlier pixel in raster order.
                        if u > v || (u == v && (dy, dx) < (0, 0)) {
                            is_max = false;
                            break 'nms;
                        }
                    }
                }
                if is_max {
                    corners.push((v, y, x));
                }
            }
        }
        corners.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        corners.truncate(p.max_corners);
        corners
            .into_iter()
            .filter_map(|(_, y, x)| {
                describe(image, y, x, r, p.descriptor).map(|descriptor| Keypoint { x, y, descriptor })
            })
            .collect()
    }
}

fn describe(image: &ImageBuffer, cy: usize, cx: usize, r: usize, kind: DescriptorKind) -> Option<Vec<f32>> {
    let px = image.pixels();
    let side = 2 * r + 1;
    let mut d = Vec::with_capacity(side * side * 3);
    if kind == DescriptorKind::Raw {
        let scale = 1.0 / ((side * side * 3) as f32).sqrt();
        for c in 0..3 {
            for y in cy - r..=cy + r {
                for x in cx - r..=cx + r {
                    d.push(px[[y, x, c]] * scale);
                }
            }
        }
        return Some(d);
    }
    for c in 0..3 {
        let start = d.len();
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                d.push(px[[y, x, c]]);
            }
        }
        let mean = d[start..].iter().sum::<f32>() / (side * side) as f32;
        d[start..].iter_mut().for_each(|v| *v -= mean);
    }
    let norm = d.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm < 1e-6 {
        return None;
    }
    d.iter_mut().for_each(|v| *v /= norm);
    Some(d)
}

fn distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f32>().sqrt()
}

/// Index of the nearest and the distances to nearest and second nearest.
fn nearest(query: &[f32], pool: &[Keypoint]) -> Option<(usize, f32, f32)> {
    let mut best = (usize::MAX, f32::INFINITY);
    let mut second = f32::INFINITY;
    for (i, k) in pool.iter().enumerate() {
        let d = distance(query, &k.descriptor);
        if d < best.1 {
            second = best.1;
            best = (i, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0 != usize::MAX).then_some((best.0, best.1, second))
}

impl CorrespondenceMatcher for ClassicalMatcher {
    fn name(&self) -> &str {
        "classical"
    }

    fn min_confidence(&self) -> f32 {
        self.params.min_confidence
    }

    fn match_pair(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<Vec<Match>> {
        let ka = self.keypoints(a);
        let kb = self.keypoints(b);
        let p = &self.params;
        let passes = |d1: f32, d2: f32| d1 <= p.max_distance && (d2.is_infinite() || d1 < p.ratio * d2);
        let mut out = Vec::new();
        for (i, k) in ka.iter().enumerate() {
            let Some((j, d1, d2)) = nearest(&k.descriptor, &kb) else {
                continue;
            };
            if !passes(d1, d2) {
                continue;
            }
            let Some((back, e1, e2)) = nearest(&kb[j].descriptor, &ka) else {
                continue;
            };
            if back != i || !passes(e1, e2) {
                continue;
            }
            let confidence = (1.0 - d1 / 2.0).clamp(0.0, 1.0);
            if confidence < p.min_confidence {
                continue;
            }
            out.push(Match {
                ref_index: 0,
                ref_point: (k.x as f32, k.y as f32),
                out_point: (kb[j].x as f32, kb[j].y as f32),
                confidence,
            });
        }
        Ok(out)
    }
}

fn in_region(mask: &BinaryMask, point: (f32, f32)) -> bool {
    let (x, y) = (point.0.round(), point.1.round());
    x >= 0.0
        && y >= 0.0
        && (y as usize) < mask.height()
        && (x as usize) < mask.width()
        && mask.get(y as usize, x as usize)
}

/// Matches from every reference to `image` whose output point lies in the
/// fill region. A reference whose matching fails contributes nothing.
pub fn region_matches(
    image: &ImageBuffer,
    scene: &Scene,
    matcher: &dyn CorrespondenceMatcher,
) -> Result<Vec<Match>> {
    if image.shape() != scene.target.shape() {
        return Err(Error::GeometryMismatch(format!(
            "candidate {:?} vs target {:?}",
            image.shape(),
            scene.target.shape()
        )));
    }
    let mut kept = Vec::new();
    for (i, reference) in scene.references.iter().enumerate() {
        match matcher.match_pair(reference, image) {
            Ok(matches) => kept.extend(
                matches
                    .into_iter()
                    .filter(|m| m.confidence >= matcher.min_confidence())
                    .filter(|m| in_region(&scene.target_mask, m.out_point))
                    .map(|m| Match { ref_index: i, ..m }),
            ),
            Err(e) => log::warn!("matcher {} failed on reference {i}: {e}", matcher.name()),
        }
    }
    Ok(kept)
}

/// Number of in-region matches summed over references; also stored in
/// `candidate.match_count`.
pub fn score_candidate(
    candidate: &mut Candidate,
    scene: &Scene,
    matcher: &dyn CorrespondenceMatcher,
) -> Result<usize> {
    let count = region_matches(&candidate.image, scene, matcher)?.len();
    candidate.match_count = Some(count);
    Ok(count)
}

/// Anything carrying a seed and a match count can be ranked.
pub trait Ranked {
    fn seed(&self) -> u64;
    fn match_count(&self) -> Option<usize>;
}

impl Ranked for Candidate {
    fn seed(&self) -> u64 {
        self.seed
    }

    fn match_count(&self) -> Option<usize> {
        self.match_count
    }
}

impl Ranked for CandidateRecord {
    fn seed(&self) -> u64 {
        self.seed
    }

    fn match_count(&self) -> Option<usize> {
        self.match_count
    }
}

/// Sorts by match count (descending, ties by ascending seed) and drops the
/// `floor(rate · N)` lowest-ranked candidates.
pub fn rank_and_filter<T: Ranked>(mut candidates: Vec<T>, filter_rate: f64) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&filter_rate) {
        return Err(Error::InvalidConfig(format!(
            "filter rate must be in [0, 1), got {filter_rate}"
        )));
    }
    if let Some(c) = candidates.iter().find(|c| c.match_count().is_none()) {
        return Err(Error::Stage(format!("candidate seed {} has not been scored", c.seed())));
    }
    candidates.sort_by_key(|c| (std::cmp::Reverse(c.match_count()), c.seed()));
    let n = candidates.len();
    candidates.truncate(n - survivors_dropped(n, filter_rate));
    Ok(candidates)
}

/// `floor(rate · n)`, robust to representation error (0.75 · 4 is 3).
pub fn survivors_dropped(n: usize, filter_rate: f64) -> usize {
    ((filter_rate * n as f64) + 1e-9).floor() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::TaskKind;

    fn cand(seed: u64, count: usize) -> Candidate {
        let img = ImageBuffer::filled(8, 8, [0.5; 3]).unwrap();
        Candidate {
            image: img.clone(),
            raw: img,
            seed,
            match_count: Some(count),
            metrics: None,
        }
    }

    #[test]
    fn rank_examples() {
        let c = vec![cand(0, 10), cand(1, 7), cand(2, 3), cand(3, 0)];
        let kept = rank_and_filter(c.clone(), 0.25).unwrap();
        assert_eq!(kept.iter().map(|c| c.seed).collect::<Vec<_>>(), vec![0, 1, 2]);
        let shuffled = vec![cand(2, 3), cand(0, 10), cand(3, 0), cand(1, 7)];
        let kept = rank_and_filter(shuffled, 0.0).unwrap();
        assert_eq!(kept.iter().map(|c| c.seed).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        let equal = (0..6).rev().map(|s| cand(s, 4)).collect();
        let kept = rank_and_filter(equal, 0.5).unwrap();
        assert_eq!(kept.iter().map(|c| c.seed).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(rank_and_filter(Vec::<Candidate>::new(), 0.5).unwrap().is_empty());
        assert!(rank_and_filter(vec![cand(0, 1)], 1.0).is_err());
    }

    #[test]
    fn floor_of_rate() {
        assert_eq!(survivors_dropped(4, 0.75), 3);
        assert_eq!(survivors_dropped(64, 0.25), 16);
        assert_eq!(survivors_dropped(3, 0.5), 1);
    }

    struct Fixed(Vec<Match>);

    impl CorrespondenceMatcher for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn min_confidence(&self) -> f32 {
            0.0
        }
        fn match_pair(&self, _: &ImageBuffer, _: &ImageBuffer) -> Result<Vec<Match>> {
            Ok(self.0.clone())
        }
    }

    fn scene_with_mask(mask: BinaryMask, refs: usize) -> Scene {
        let img = ImageBuffer::filled(16, 16, [0.5; 3]).unwrap();
        let target = crate::mask::apply_mask(&img, &mask).unwrap();
        Scene::new("s", TaskKind::Inpaint, vec![img; refs], target, mask, None).unwrap()
    }

    fn m(x: f32, y: f32) -> Match {
        Match {
            ref_index: 0,
            ref_point: (x, y),
            out_point: (x, y),
            confidence: 1.0,
        }
    }

    #[test]
    fn filter_and_sum() {
        let mask = BinaryMask::from_fn(16, 16, |_, x| x < 8);
        let scene = scene_with_mask(mask, 2);
        let matcher = Fixed(vec![m(1.0, 1.0), m(2.0, 5.0), m(7.0, 15.0), m(12.0, 3.0), m(9.0, 9.0)]);
        let mut c = cand(0, 0);
        c.image = scene.target.clone();
        assert_eq!(score_candidate(&mut c, &scene, &matcher).unwrap(), 6);
        assert_eq!(c.match_count, Some(6));

        let empty = scene_with_mask(BinaryMask::zeros(16, 16), 2);
        assert_eq!(score_candidate(&mut c, &empty, &matcher).unwrap(), 0);
    }

    #[test]
    fn mismatched_candidate_shape() {
        let scene = scene_with_mask(BinaryMask::ones(16, 16), 1);
        let mut c = cand(0, 0);
        assert!(matches!(
            score_candidate(&mut c, &scene, &Fixed(vec![])),
            Err(Error::GeometryMismatch(_))
        ));
    }
}
