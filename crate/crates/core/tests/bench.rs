use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scenefill_core::bench::{emit_table, run_benchmark, BenchConfig, Stage, TableFormat, ABSENT};
use scenefill_core::diffusion::{build_toy_backend, DenoiserBackend, ToyBackendConfig, ToyDenoiser};
use scenefill_core::sampler::InferenceConfig;
use scenefill_core::scene::Scene;
use scenefill_core::synthetic::make_synthetic_scene;
use scenefill_core::train::TrainConfig;

fn backend() -> ToyDenoiser {
    build_toy_backend(ToyBackendConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

fn config(rates: Vec<f64>) -> BenchConfig {
    BenchConfig {
        train: TrainConfig {
            iterations: 3,
            batch_size: 2,
            ..Default::default()
        },
        inference: InferenceConfig {
            num_candidates: 4,
            steps: 5,
            ..Default::default()
        },
        rates,
        ..Default::default()
    }
}

fn scenes(n: u64) -> Vec<Scene> {
    (20..20 + n).map(|s| make_synthetic_scene(s, (32, 32))).collect()
}

fn count_files(dir: &Path, ext: &str) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
        .count()
}

#[test]
fn every_scene_gets_all_candidates_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_benchmark(&scenes(2), &backend(), &config(vec![0.0, 0.5]), dir.path(), false).unwrap();
    assert_eq!(run.reports.len(), 2);
    for r in &run.reports {
        assert!(r.failure.is_none());
        assert_eq!(r.candidates.len(), 4);
        assert!(r.is_evaluated());
        assert_eq!(r.computed, Stage::ALL.to_vec());
        let root = dir.path().join(&r.scene_id);
        assert_eq!(count_files(&root.join("candidates"), "png"), 4);
        assert!(root.join("adapters").join(scenefill_core::lora::MANIFEST_FILE).is_file());
        assert!(root.join("reports").join("report.json").is_file());
    }
    for name in ["run.json", "summary.txt", "summary.csv"] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
    assert_eq!(run.filtering_sweep[1].survivors, 4);
}

#[test]
fn resume_recomputes_nothing_and_reproduces_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let (s, b, c) = (scenes(2), backend(), config(vec![0.0, 0.75]));
    let first = run_benchmark(&s, &b, &c, dir.path(), false).unwrap();
    let second = run_benchmark(&s, &b, &c, dir.path(), true).unwrap();
    assert!(second.reports.iter().all(|r| r.computed.is_empty()));
    for (a, b) in first.reports.iter().zip(&second.reports) {
        assert_eq!(a.candidates, b.candidates);
    }
    assert_eq!(emit_table(&first, TableFormat::Text), emit_table(&second, TableFormat::Text));

    // A changed matcher invalidates scoring and evaluation only.
    let mut rescored = c.clone();
    rescored.matcher.max_distance = 0.1;
    let third = run_benchmark(&s, &b, &rescored, dir.path(), true).unwrap();
    for r in &third.reports {
        assert_eq!(r.computed, vec![Stage::Score, Stage::Evaluate]);
    }
}

#[test]
fn scenes_without_ground_truth_are_not_evaluated() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = scenes(1);
    s[0].ground_truth = None;
    let run = run_benchmark(&s, &backend(), &config(vec![0.0]), dir.path(), false).unwrap();
    let r = &run.reports[0];
    assert!(r.evaluation_skipped.is_some());
    assert!(r.candidates.iter().all(|c| c.metrics.is_none() && c.match_count.is_some()));
    assert_eq!(run.aggregate.scenes, 0);
    assert!(run.aggregate.values.is_empty());
    assert!(emit_table(&run, TableFormat::Text).contains(ABSENT));
}

#[test]
fn csv_has_one_row_per_rate() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_benchmark(&scenes(1), &backend(), &config(vec![0.0, 0.25, 0.5, 0.75]), dir.path(), false).unwrap();
    let mut reader = csv::Reader::from_path(dir.path().join("summary.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(&headers[0], "filter_rate");
    assert!(headers.iter().any(|h| h == "PSNR↑"));
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    let rates: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(rates, vec![0.0, 0.25, 0.5, 0.75]);
    let survivors: Vec<usize> = rows.iter().map(|r| r[headers.len() - 2].parse().unwrap()).collect();
    assert_eq!(survivors, vec![4, 3, 2, 1]);
    assert_eq!(run.filtering_sweep.len(), 4);
    let text = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.starts_with("scenes: 1  candidates per scene: 4"));
}

#[test]
fn unselected_metrics_are_shown_absent() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(vec![0.0]);
    c.metrics.dino = "none".into();
    let run = run_benchmark(&scenes(1), &backend(), &c, dir.path(), false).unwrap();
    assert!(run.aggregate.get(scenefill_core::metrics::Metric::Dino).is_none());
    assert!(run.aggregate.get(scenefill_core::metrics::Metric::Psnr).is_some());
    let csv = emit_table(&run, TableFormat::Csv);
    assert!(csv.contains(ABSENT));
}

#[test]
fn duplicate_scene_ids_and_bad_rates_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = vec![make_synthetic_scene(1, (32, 32)), make_synthetic_scene(1, (32, 32))];
    assert!(run_benchmark(&s, &backend(), &config(vec![0.0]), dir.path(), false).is_err());
    assert!(run_benchmark(&scenes(1), &backend(), &config(vec![1.0]), dir.path(), false).is_err());
    assert!(run_benchmark(&[], &backend(), &config(vec![0.0]), dir.path(), false).is_err());
}

#[test]
fn base_backend_is_left_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let b = backend();
    let before = b.base_weight_digest();
    run_benchmark(&scenes(1), &b, &config(vec![0.0]), dir.path(), false).unwrap();
    assert!(b.adapters().is_none());
    assert_eq!(b.base_weight_digest(), before);
}
