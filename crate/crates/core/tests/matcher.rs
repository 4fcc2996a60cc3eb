use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenefill_core::sampler::Candidate;
use scenefill_core::scene::ImageBuffer;
use scenefill_core::select::{classical_matcher, score_candidate, ClassicalParams, CorrespondenceMatcher};
use scenefill_core::synthetic::{make_synthetic_scene, random_view_image};

fn fixture(seed: u64) -> ImageBuffer {
    random_view_image(&mut ChaCha8Rng::seed_from_u64(seed), (64, 64))
}

fn shift_right(img: &ImageBuffer, dx: usize) -> ImageBuffer {
    let p = img.pixels();
    ImageBuffer::new(Array3::from_shape_fn(p.dim(), |(y, x, c)| p[[y, x.saturating_sub(dx), c]])).unwrap()
}

fn noise(seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBuffer::new(Array3::from_shape_fn((64, 64, 3), |_| rng.random::<f32>())).unwrap()
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

#[test]
fn self_match_recovers_corners() {
    let m = classical_matcher(ClassicalParams::default());
    for seed in 0..5 {
        let img = fixture(seed);
        let corners = m.corners(&img).len();
        assert!(corners > 0, "seed {seed}: no corners");
        let exact = m
            .match_pair(&img, &img)
            .unwrap()
            .iter()
            .filter(|mt| {
                let (dx, dy) = (mt.out_point.0 - mt.ref_point.0, mt.out_point.1 - mt.ref_point.1);
                (dx * dx + dy * dy).sqrt() < 1.0
            })
            .count();
        assert!(exact as f64 >= 0.9 * corners as f64, "seed {seed}: {exact} of {corners}");
    }
}

#[test]
fn translation_is_recovered() {
    let m = classical_matcher(ClassicalParams::default());
    for seed in 0..5 {
        let img = fixture(seed);
        let moved = shift_right(&img, 5);
        let matches = m.match_pair(&img, &moved).unwrap();
        assert!(!matches.is_empty(), "seed {seed}: no matches");
        let d = median(
            matches
                .iter()
                .map(|mt| {
                    let (dx, dy) = (mt.out_point.0 - mt.ref_point.0, mt.out_point.1 - mt.ref_point.1);
                    (dx * dx + dy * dy).sqrt()
                })
                .collect(),
        );
        assert!((d - 5.0).abs() <= 1.0, "seed {seed}: median displacement {d}");
    }
}

#[test]
fn noise_pairs_match_far_less_than_self() {
    let m = classical_matcher(ClassicalParams::default());
    let img = noise(1);
    let own = m.match_pair(&img, &img).unwrap().len();
    let cross = m.match_pair(&img, &noise(2)).unwrap().len();
    assert!(own >= 10 * cross.max(1), "self {own} vs noise {cross}");
}

#[test]
fn swapping_arguments_swaps_point_roles() {
    let m = classical_matcher(ClassicalParams::default());
    let (a, b) = (fixture(3), shift_right(&fixture(3), 3));
    let mut ab: Vec<_> = m.match_pair(&a, &b).unwrap().iter().map(|x| (x.ref_point, x.out_point)).collect();
    let mut ba: Vec<_> = m.match_pair(&b, &a).unwrap().iter().map(|x| (x.out_point, x.ref_point)).collect();
    let key = |p: &((f32, f32), (f32, f32))| (p.0 .1 as i64, p.0 .0 as i64);
    ab.sort_by_key(key);
    ba.sort_by_key(key);
    assert_eq!(ab, ba);
}

#[test]
fn matcher_is_deterministic() {
    let m = classical_matcher(ClassicalParams::default());
    let (a, b) = (fixture(7), fixture(8));
    assert_eq!(m.match_pair(&a, &b).unwrap(), m.match_pair(&a, &b).unwrap());
}

#[test]
fn ground_truth_scores_positive() {
    let m = classical_matcher(ClassicalParams::default());
    let mut positive = 0;
    for seed in 0..10 {
        let scene = make_synthetic_scene(seed, (64, 64));
        let gt = scene.ground_truth.clone().unwrap();
        let mut c = Candidate {
            image: gt.clone(),
            raw: gt,
            seed: 0,
            match_count: None,
            metrics: None,
        };
        if score_candidate(&mut c, &scene, &m).unwrap() > 0 {
            positive += 1;
        }
    }
    assert!(positive >= 8, "only {positive} of 10 ground truths scored > 0");
}
