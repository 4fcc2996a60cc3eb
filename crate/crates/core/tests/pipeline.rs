use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scenefill_core::diffusion::{build_toy_backend, DenoiserBackend, ToyBackendConfig, ToyDenoiser};
use scenefill_core::sampler::{generate, InferenceConfig};
use scenefill_core::scene::Scene;
use scenefill_core::synthetic::make_synthetic_scene;
use scenefill_core::train::{draw_element, finetune, TrainConfig, TrainState, TrainingData};
use scenefill_core::lora::{inject, TargetFilter};

fn backend() -> ToyDenoiser {
    build_toy_backend(ToyBackendConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

fn scene() -> Scene {
    make_synthetic_scene(6, (32, 32))
}

fn short(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 4,
        lr_denoiser: 1e-3,
        ..Default::default()
    }
}

fn quick_inference() -> InferenceConfig {
    InferenceConfig {
        num_candidates: 3,
        steps: 8,
        ..Default::default()
    }
}

#[test]
fn finetune_is_deterministic() {
    let (mut a, mut b) = (backend(), backend());
    let ra = finetune(&scene(), &mut a, &short(6), None).unwrap();
    let rb = finetune(&scene(), &mut b, &short(6), None).unwrap();
    assert_eq!(ra.adapters.to_bytes(), rb.adapters.to_bytes());
    assert_eq!(ra.loss_history, rb.loss_history);
}

#[test]
fn generation_is_deterministic() {
    let mut model = backend();
    finetune(&scene(), &mut model, &short(3), None).unwrap();
    let a = generate(&scene(), &model, &quick_inference()).unwrap();
    let b = generate(&scene(), &model, &quick_inference()).unwrap();
    assert_eq!(a.candidates, b.candidates);
    let seeds: Vec<u64> = a.candidates.iter().map(|c| c.seed).collect();
    assert_eq!(seeds, vec![0, 1, 2]);
}

#[test]
fn zero_iterations_reproduce_the_base_model() {
    let base = backend();
    let mut tuned = backend();
    let outcome = finetune(&scene(), &mut tuned, &short(0), None).unwrap();
    assert!(outcome.adapters.is_zero());
    assert!(outcome.loss_history.is_empty());
    let a = generate(&scene(), &base, &quick_inference()).unwrap();
    let b = generate(&scene(), &tuned, &quick_inference()).unwrap();
    for (x, y) in a.candidates.iter().zip(&b.candidates) {
        assert!(x.image.max_abs_diff(&y.image).unwrap() <= 1e-5);
    }
}

#[test]
fn base_weights_stay_frozen() {
    let mut model = backend();
    let before = model.base_weight_digest();
    let fingerprint = model.fingerprint();
    let outcome = finetune(&scene(), &mut model, &short(5), None).unwrap();
    assert!(!outcome.adapters.is_zero());
    assert_eq!(model.base_weight_digest(), before);
    assert_eq!(model.fingerprint(), fingerprint);
}

#[test]
fn known_region_survives_generation() {
    let s = scene();
    let generation = generate(&s, &backend(), &quick_inference()).unwrap();
    for c in &generation.candidates {
        for ((y, x, ch), v) in c.image.pixels().indexed_iter() {
            if !s.target_mask.get(y, x) {
                assert_eq!(v.to_bits(), s.target.pixels()[[y, x, ch]].to_bits());
            }
        }
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        checkpoint_every: 4,
        ..short(10)
    };
    let mut straight = backend();
    let expected = finetune(&scene(), &mut straight, &config, None).unwrap();

    // The first run leaves its last checkpoint at step 8; the second picks
    // it up and only runs the remaining two steps.
    let mut first = backend();
    finetune(&scene(), &mut first, &config, Some(dir.path())).unwrap();
    let mut second = backend();
    let resumed = finetune(&scene(), &mut second, &config, Some(dir.path())).unwrap();
    assert_eq!(resumed.resumed_from, 8);
    assert_eq!(resumed.adapters.to_bytes(), expected.adapters.to_bytes());
    assert_eq!(resumed.loss_history, expected.loss_history);
}

#[test]
fn checkpoint_from_other_config_is_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let mut first = backend();
    finetune(&scene(), &mut first, &TrainConfig { checkpoint_every: 2, ..short(4) }, Some(dir.path())).unwrap();
    let other = TrainConfig {
        checkpoint_every: 2,
        seed: 9,
        ..short(4)
    };
    let mut second = backend();
    assert_eq!(finetune(&scene(), &mut second, &other, Some(dir.path())).unwrap().resumed_from, 0);
}

#[test]
fn dropout_decisions_are_independent() {
    let s = scene();
    let mut model = backend();
    let config = TrainConfig {
        dropout_prob: 0.5,
        ..short(1)
    };
    inject(&mut model, 8, &TargetFilter::default(), 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let data = TrainingData::prepare(&s, &model).unwrap();
    let mut state = TrainState::new(model.adapters().unwrap(), 3);
    let n = 10_000;
    let (mut prompt, mut mask, mut both, mut first_adapter, mut prompt_and_adapter) = (0, 0, 0, 0, 0);
    for _ in 0..n {
        let d = draw_element(&mut state, &model, &data, &config).unwrap();
        prompt += d.drop_prompt as usize;
        mask += d.drop_mask as usize;
        both += (d.drop_prompt && d.drop_mask) as usize;
        first_adapter += (!d.active[0]) as usize;
        prompt_and_adapter += (d.drop_prompt && !d.active[0]) as usize;
    }
    let f = |k: usize| k as f64 / n as f64;
    for (name, observed, expected) in [
        ("prompt", f(prompt), 0.5),
        ("mask", f(mask), 0.5),
        ("adapter", f(first_adapter), 0.5),
        ("prompt and mask", f(both), f(prompt) * f(mask)),
        ("prompt and adapter", f(prompt_and_adapter), f(prompt) * f(first_adapter)),
    ] {
        assert!((observed - expected).abs() <= 0.02, "{name}: {observed} vs {expected}");
    }
}

#[test]
fn loss_decreases_during_finetuning() {
    let mut model = backend();
    let config = TrainConfig {
        iterations: 500,
        batch_size: 4,
        lr_denoiser: 1e-3,
        ..Default::default()
    };
    let history = finetune(&scene(), &mut model, &config, None).unwrap().loss_history;
    assert_eq!(history.len(), 500);
    let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len() as f32;
    let (head, tail) = (mean(&history[..50]), mean(&history[450..]));
    assert!(tail < head, "loss went from {head} to {tail}");
}
