use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use proptest::prelude::*;

use scenefill_core::bench::{aggregate, SceneReport};
use scenefill_core::metrics::MetricReport;
use scenefill_core::sampler::{composite, soft_mask, Candidate};
use scenefill_core::scene::{BinaryMask, CandidateRecord, ImageBuffer, Scene, TaskKind};
use scenefill_core::select::{rank_and_filter, score_candidate, survivors_dropped, CorrespondenceMatcher, Match};
use scenefill_core::Result;

fn image(h: usize, w: usize, values: &[f32]) -> ImageBuffer {
    ImageBuffer::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| values[(y * w + x) * 3 + c])).unwrap()
}

fn mask(h: usize, w: usize, bits: &[bool]) -> BinaryMask {
    BinaryMask::new(Array2::from_shape_fn((h, w), |(y, x)| bits[y * w + x]))
}

prop_compose! {
    fn composite_case()(hh in 4usize..12, hw in 4usize..12)
        (h in Just(2 * hh), w in Just(2 * hw),
         gen in prop::collection::vec(0.0f32..=1.0, 4 * hh * hw * 3),
         tgt in prop::collection::vec(0.0f32..=1.0, 4 * hh * hw * 3),
         bits in prop::collection::vec(any::<bool>(), 4 * hh * hw),
         radius in 0.0f64..6.0)
        -> (ImageBuffer, ImageBuffer, BinaryMask, f64) {
        (image(h, w, &gen), image(h, w, &tgt), mask(h, w, &bits), radius)
    }
}

fn record(seed: u64, count: usize, psnr: f64) -> CandidateRecord {
    CandidateRecord {
        seed,
        match_count: Some(count),
        metrics: Some(MetricReport {
            psnr,
            ssim: psnr / 100.0,
            lpips: Some(1.0 / (1.0 + psnr)),
            dreamsim: None,
            dino: None,
            clip: None,
            variants: BTreeMap::new(),
        }),
    }
}

fn report(id: usize, candidates: Vec<CandidateRecord>) -> SceneReport {
    SceneReport {
        scene_id: format!("scene_{id}"),
        task_kind: TaskKind::Inpaint,
        candidates,
        sampling_failures: Vec::new(),
        computed: Vec::new(),
        failure: None,
        evaluation_skipped: None,
    }
}

/// Emits a match at every pixel of `b` (integer coordinates, like the
/// classical matcher), so the in-region count is the number of fill pixels.
struct EveryPixel;

impl CorrespondenceMatcher for EveryPixel {
    fn name(&self) -> &str {
        "every-pixel"
    }

    fn min_confidence(&self) -> f32 {
        0.0
    }

    fn match_pair(&self, _a: &ImageBuffer, b: &ImageBuffer) -> Result<Vec<Match>> {
        let (h, w) = b.shape();
        Ok((0..h * w)
            .map(|i| {
                let p = ((i % w) as f32, (i / w) as f32);
                Match {
                    ref_index: 0,
                    ref_point: p,
                    out_point: p,
                    confidence: 1.0,
                }
            })
            .collect())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composite_keeps_known_pixels_and_is_convex((gen, tgt, m, radius) in composite_case()) {
        let out = composite(&gen, &tgt, &m, radius).unwrap();
        let soft = soft_mask(&m, radius);
        for ((y, x, c), v) in out.pixels().indexed_iter() {
            let (g, t) = (gen.pixels()[[y, x, c]], tgt.pixels()[[y, x, c]]);
            let a = soft[[y, x]];
            prop_assert!((0.0..=1.0).contains(&a));
            if !m.get(y, x) {
                prop_assert_eq!(a, 0.0);
                prop_assert_eq!(v.to_bits(), t.to_bits());
            }
            prop_assert!(*v >= g.min(t) - 1e-6 && *v <= g.max(t) + 1e-6);
        }
    }

    #[test]
    fn filtering_keeps_a_ranked_prefix(
        counts in prop::collection::vec(0usize..20, 1..40),
        rate in 0.0f64..0.99,
        lower in 0.0f64..0.99,
    ) {
        let records: Vec<CandidateRecord> =
            counts.iter().enumerate().map(|(i, c)| record(i as u64, *c, 10.0)).collect();
        let n = records.len();
        let kept = rank_and_filter(records.clone(), rate).unwrap();
        prop_assert_eq!(kept.len(), n - survivors_dropped(n, rate));
        prop_assert!(!kept.is_empty());
        for w in kept.windows(2) {
            let key = |r: &CandidateRecord| (std::cmp::Reverse(r.match_count), r.seed);
            prop_assert!(key(&w[0]) < key(&w[1]));
        }
        let everything = rank_and_filter(records.clone(), 0.0).unwrap();
        prop_assert_eq!(&everything[..kept.len()], &kept[..]);
        let lower = lower.min(rate);
        let wider = rank_and_filter(records, lower).unwrap();
        prop_assert!(wider.len() >= kept.len());
        prop_assert_eq!(&wider[..kept.len()], &kept[..]);
    }

    #[test]
    fn aggregate_ignores_scene_order(
        scenes in prop::collection::vec(prop::collection::vec((0usize..10, 5.0f64..40.0), 1..8), 1..6),
        rate in 0.0f64..0.9,
        shift in 0usize..6,
    ) {
        let reports: Vec<SceneReport> = scenes
            .iter()
            .enumerate()
            .map(|(i, cs)| report(i, cs.iter().enumerate().map(|(s, (c, p))| record(s as u64, *c, *p)).collect()))
            .collect();
        let mut rotated = reports.clone();
        rotated.rotate_left(shift % reports.len());
        for r in &mut rotated {
            r.candidates.reverse();
        }
        let (a, b) = (aggregate(&reports, rate).unwrap(), aggregate(&rotated, rate).unwrap());
        prop_assert_eq!(a.scenes, b.scenes);
        prop_assert_eq!(a.survivors, b.survivors);
        prop_assert_eq!(a.values.keys().collect::<Vec<_>>(), b.values.keys().collect::<Vec<_>>());
        for (k, v) in &a.values {
            prop_assert!((v - b.values[k]).abs() <= 1e-9 * v.abs().max(1.0));
        }
    }

    #[test]
    fn score_grows_with_the_region(
        bits in prop::collection::vec(any::<bool>(), 16 * 16),
        extra in prop::collection::vec(any::<bool>(), 16 * 16),
    ) {
        let img = ImageBuffer::filled(16, 16, [0.3, 0.3, 0.3]).unwrap();
        let small = mask(16, 16, &bits);
        let large = small.union(&mask(16, 16, &extra)).unwrap();
        let score = |m: &BinaryMask| {
            let scene = Scene::new("s", TaskKind::Inpaint, vec![img.clone(), img.clone()], img.clone(), m.clone(), None).unwrap();
            let mut c = Candidate { image: img.clone(), raw: img.clone(), seed: 0, match_count: None, metrics: None };
            score_candidate(&mut c, &scene, &EveryPixel).unwrap()
        };
        let (s, l) = (score(&small), score(&large));
        prop_assert_eq!(s, 2 * small.count_ones());
        prop_assert!(l >= s);
    }
}
