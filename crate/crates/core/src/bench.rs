//! Benchmark runner: per-scene fine-tune, sample, rank and evaluate, then
//! aggregate over scenes at several filtering rates.
//!
//! Layout of a run directory:
//!
//! ```text
//! <run_dir>/run.json
//! <run_dir>/summary.txt
//! <run_dir>/summary.csv
//! <run_dir>/<scene_id>/adapters/      manifest.json, deltas.bin, loss.jsonl
//! <run_dir>/<scene_id>/candidates/    seed_NNNN.png + seed_NNNN.json
//! <run_dir>/<scene_id>/reports/       report.json
//! <run_dir>/<scene_id>/stages/        <stage>.json completion markers
//! ```
//!
//! A stage marker stores a key hashed from the stage's inputs and the key of
//! the stage before it, so a resumed run redoes a stage exactly when its
//! inputs changed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::TrainableBackend;
use crate::error::{Error, Result};
use crate::lora::{load_adapters, save_adapters};
use crate::metrics::{evaluate_candidate, Metric, MetricSelection, MetricSuite};
use crate::sampler::{generate, Candidate, InferenceConfig};
use crate::scene::{load_candidate, save_candidate, CandidateRecord, Scene, TaskKind};
use crate::select::{rank_and_filter, score_candidate, ClassicalMatcher, ClassicalParams};
use crate::train::{finetune, write_loss_log, TrainConfig};

pub const DEFAULT_RATES: [f64; 4] = [0.0, 0.25, 0.5, 0.75];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub matcher: ClassicalParams,
    pub metrics: MetricSelection,
    /// Filtering rates of the sweep, each in `[0, 1)`.
    pub rates: Vec<f64>,
    /// Scenes processed concurrently; 0 uses every core.
    pub workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            matcher: ClassicalParams::default(),
            metrics: MetricSelection::default(),
            rates: DEFAULT_RATES.to_vec(),
            workers: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.inference.validate()?;
        MetricSuite::from_selection(&self.metrics)?;
        if self.rates.is_empty() {
            return Err(Error::InvalidConfig("rates must not be empty".into()));
        }
        if let Some(r) = self.rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::InvalidConfig(format!("filter rate must be in [0, 1), got {r}")));
        }
        Ok(())
    }

    /// Digest of everything that affects results; `workers` is excluded.
    pub fn hash(&self) -> String {
        crate::config_hash(&(&self.train, &self.inference, &self.matcher, &self.metrics, &self.rates))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Finetune,
    Generate,
    Score,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Finetune, Stage::Generate, Stage::Score, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Finetune => "finetune",
            Stage::Generate => "generate",
            Stage::Score => "score",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene_id: String,
    pub task_kind: TaskKind,
    /// Candidate records in seed order.
    pub candidates: Vec<CandidateRecord>,
    /// Seeds whose sampling failed, with the error.
    pub sampling_failures: Vec<(u64, String)>,
    /// Stages that ran in this invocation (the rest were resumed).
    pub computed: Vec<Stage>,
    /// First failing stage and its error; later stages were skipped.
    pub failure: Option<(Stage, String)>,
    /// Why metrics are absent, when they are.
    pub evaluation_skipped: Option<String>,
}

impl SceneReport {
    pub fn is_evaluated(&self) -> bool {
        self.failure.is_none()
            && !self.candidates.is_empty()
            && self.candidates.iter().all(|c| c.metrics.is_some())
    }
}

/// One row of the filtering sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub filter_rate: f64,
    /// Metric key → mean over scenes of the per-scene survivor mean.
    pub values: BTreeMap<String, f64>,
    pub scenes: usize,
    pub survivors: usize,
    /// Survivors whose PSNR was the `+inf` sentinel and left out of the mean.
    pub psnr_inf_excluded: usize,
}

impl AggregateRow {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.values.get(metric.key()).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub run_id: String,
    pub config_hash: String,
    pub backend_fingerprint: String,
    pub scenes: Vec<String>,
    pub reports: Vec<SceneReport>,
    /// Row at rate 0, the plain mean of means.
    pub aggregate: AggregateRow,
    pub filtering_sweep: Vec<AggregateRow>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Content digest of a scene's pixels, masks and metadata.
pub fn scene_digest(scene: &Scene) -> String {
    let mut h = Sha256::new();
    h.update(scene.scene_id.as_bytes());
    h.update(format!("{:?}", scene.task_kind).as_bytes());
    let mut img = |i: &crate::scene::ImageBuffer| {
        h.update(format!("{:?}", i.shape()).as_bytes());
        h.update(i.to_rgb8().as_raw());
    };
    img(&scene.target);
    for r in &scene.references {
        img(r);
    }
    if let Some(gt) = &scene.ground_truth {
        img(gt);
    }
    h.update(scene.target_mask.to_luma8().as_raw());
    hex::encode(&h.finalize()[..8])
}

struct SceneDirs {
    adapters: PathBuf,
    candidates: PathBuf,
    reports: PathBuf,
    stages: PathBuf,
}

impl SceneDirs {
    fn new(root: &Path) -> Result<Self> {
        let dirs = Self {
            adapters: root.join("adapters"),
            candidates: root.join("candidates"),
            reports: root.join("reports"),
            stages: root.join("stages"),
        };
        for d in [&dirs.adapters, &dirs.candidates, &dirs.reports, &dirs.stages] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(dirs)
    }

    fn marker(&self, stage: Stage) -> PathBuf {
        self.stages.join(format!("{}.json", stage.name()))
    }

    fn is_done(&self, stage: Stage, key: &str) -> bool {
        fs::read_to_string(self.marker(stage))
            .ok()
            .and_then(|t| serde_json::from_str::<StageMarker>(&t).ok())
            .is_some_and(|m| m.key == key)
    }

    fn mark_done(&self, stage: Stage, key: &str) -> Result<()> {
        let path = self.marker(stage);
        let text = serde_json::to_string(&StageMarker { key: key.into() })?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    fn clear_from(&self, stage: Stage) {
        for s in Stage::ALL.iter().filter(|s| **s >= stage) {
            let _ = fs::remove_file(self.marker(*s));
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StageMarker {
    key: String,
}

#[derive(Serialize, Deserialize)]
struct GenerateManifest {
    seeds: Vec<u64>,
    failures: Vec<(u64, String)>,
}

const GENERATE_MANIFEST: &str = "generated.json";
const REPORT_FILE: &str = "report.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Runs fine-tune, generate, score and evaluate for one scene under
/// `scene_root`, skipping stages whose marker matches. A clone of `base` is
/// fine-tuned, so `base` itself never carries adapters. A failing stage is
/// recorded in the report and later stages are skipped.
pub fn run_scene<B: TrainableBackend + Clone>(
    scene: &Scene,
    base: &B,
    config: &BenchConfig,
    scene_root: &Path,
) -> Result<SceneReport> {
    let dirs = SceneDirs::new(scene_root)?;
    let mut report = SceneReport {
        scene_id: scene.scene_id.clone(),
        task_kind: scene.task_kind,
        candidates: Vec::new(),
        sampling_failures: Vec::new(),
        computed: Vec::new(),
        failure: None,
        evaluation_skipped: None,
    };

    let k_train = crate::config_hash(&(
        Stage::Finetune.name(),
        scene_digest(scene),
        base.fingerprint(),
        config.train.hash(),
    ));
    let k_gen = crate::config_hash(&(Stage::Generate.name(), &k_train, &config.inference));
    let k_score = crate::config_hash(&(Stage::Score.name(), &k_gen, &config.matcher));
    let k_eval = crate::config_hash(&(Stage::Evaluate.name(), &k_score, &config.metrics));

    let mut backend = base.clone();
    if backend.adapters().is_some() {
        backend.detach_adapters();
    }

    let outcome = (|| -> std::result::Result<(), (Stage, Error)> {
        // Fine-tune.
        let stage = Stage::Finetune;
        if dirs.is_done(stage, &k_train) {
            let (adapters, manifest) = load_adapters(&dirs.adapters).map_err(|e| (stage, e))?;
            if manifest.backend_fingerprint != backend.fingerprint() {
                return Err((stage, Error::AdapterMismatch("stored adapters were trained on another backend".into())));
            }
            backend.attach_adapters(adapters).map_err(|e| (stage, e))?;
        } else {
            dirs.clear_from(stage);
            let out = finetune(scene, &mut backend, &config.train, None).map_err(|e| (stage, e))?;
            save_adapters(&out.adapters, &dirs.adapters, &config.train.hash(), &backend.fingerprint())
                .map_err(|e| (stage, e))?;
            write_loss_log(&dirs.adapters.join("loss.jsonl"), &out.loss_history).map_err(|e| (stage, e))?;
            dirs.mark_done(stage, &k_train).map_err(|e| (stage, e))?;
            report.computed.push(stage);
        }

        // Generate. Candidates are quantized to 8 bits straight away so a
        // resumed run sees exactly what a fresh one does.
        let stage = Stage::Generate;
        let mut candidates: Vec<Candidate>;
        if dirs.is_done(stage, &k_gen) {
            let m: GenerateManifest = read_json(&dirs.candidates.join(GENERATE_MANIFEST)).map_err(|e| (stage, e))?;
            candidates = m
                .seeds
                .iter()
                .map(|s| load_candidate(&dirs.candidates, *s))
                .collect::<Result<_>>()
                .map_err(|e| (stage, e))?;
            report.sampling_failures = m.failures;
        } else {
            dirs.clear_from(stage);
            let g = generate(scene, &backend, &config.inference).map_err(|e| (stage, e))?;
            candidates = g
                .candidates
                .into_iter()
                .map(|mut c| {
                    c.image = c.image.quantized();
                    c
                })
                .collect();
            for c in &candidates {
                save_candidate(c, &dirs.candidates).map_err(|e| (stage, e))?;
            }
            let m = GenerateManifest {
                seeds: candidates.iter().map(|c| c.seed).collect(),
                failures: g.failures,
            };
            write_json(&dirs.candidates.join(GENERATE_MANIFEST), &m).map_err(|e| (stage, e))?;
            report.sampling_failures = m.failures;
            dirs.mark_done(stage, &k_gen).map_err(|e| (stage, e))?;
            report.computed.push(stage);
        }

        // Score.
        let stage = Stage::Score;
        if !dirs.is_done(stage, &k_score) {
            dirs.clear_from(stage);
            let matcher = ClassicalMatcher {
                params: config.matcher.clone(),
            };
            candidates
                .par_iter_mut()
                .try_for_each(|c| {
                    c.metrics = None;
                    score_candidate(c, scene, &matcher).map(|_| ())
                })
                .map_err(|e| (stage, e))?;
            for c in &candidates {
                save_candidate(c, &dirs.candidates).map_err(|e| (stage, e))?;
            }
            dirs.mark_done(stage, &k_score).map_err(|e| (stage, e))?;
            report.computed.push(stage);
        }

        // Evaluate.
        let stage = Stage::Evaluate;
        if scene.ground_truth.is_none() {
            report.evaluation_skipped = Some(Error::NoGroundTruth.to_string());
        } else if !dirs.is_done(stage, &k_eval) {
            let suite = MetricSuite::from_selection(&config.metrics).map_err(|e| (stage, e))?;
            candidates
                .par_iter_mut()
                .try_for_each(|c| {
                    c.metrics = Some(evaluate_candidate(c, scene, &suite)?);
                    Ok::<_, Error>(())
                })
                .map_err(|e| (stage, e))?;
            for c in &candidates {
                save_candidate(c, &dirs.candidates).map_err(|e| (stage, e))?;
            }
            dirs.mark_done(stage, &k_eval).map_err(|e| (stage, e))?;
            report.computed.push(stage);
        }

        report.candidates = candidates
            .iter()
            .map(|c| CandidateRecord {
                seed: c.seed,
                match_count: c.match_count,
                metrics: c.metrics.clone(),
            })
            .collect();
        Ok(())
    })();

    if let Err((stage, e)) = outcome {
        log::error!("scene {}: {} failed: {e}", scene.scene_id, stage.name());
        report.failure = Some((stage, e.to_string()));
        if report.evaluation_skipped.is_none() {
            report.evaluation_skipped = Some(format!("{} stage failed", stage.name()));
        }
    }
    write_json(&dirs.reports.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Filters each evaluated scene at `filter_rate`, averages the survivors'
/// metrics per scene and then averages the scene means. `+inf` PSNR values
/// are left out and counted. Scenes without metrics are skipped.
pub fn aggregate(reports: &[SceneReport], filter_rate: f64) -> Result<AggregateRow> {
    let mut per_metric: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut row = AggregateRow {
        filter_rate,
        values: BTreeMap::new(),
        scenes: 0,
        survivors: 0,
        psnr_inf_excluded: 0,
    };
    for report in reports.iter().filter(|r| r.is_evaluated()) {
        let kept = rank_and_filter(report.candidates.clone(), filter_rate)?;
        if kept.is_empty() {
            return Err(Error::Stage(format!(
                "scene {} has no survivors at rate {filter_rate}",
                report.scene_id
            )));
        }
        row.scenes += 1;
        row.survivors += kept.len();
        for metric in Metric::ALL {
            let mut sum = 0.0;
            let mut n = 0usize;
            for c in &kept {
                let Some(v) = c.metrics.as_ref().and_then(|m| m.get(metric)) else {
                    continue;
                };
                if v.is_finite() {
                    sum += v;
                    n += 1;
                } else if metric == Metric::Psnr {
                    row.psnr_inf_excluded += 1;
                }
            }
            if n > 0 {
                per_metric.entry(metric.key()).or_default().push(sum / n as f64);
            }
        }
    }
    for (key, means) in per_metric {
        row.values.insert(key.to_string(), means.iter().sum::<f64>() / means.len() as f64);
    }
    Ok(row)
}

/// Runs every scene (up to `config.workers` at once) under `run_dir` and
/// writes `run.json`, `summary.txt` and `summary.csv`. With `resume` unset,
/// stage markers from an earlier run are discarded first.
pub fn run_benchmark<B: TrainableBackend + Clone>(
    scenes: &[Scene],
    base: &B,
    config: &BenchConfig,
    run_dir: &Path,
    resume: bool,
) -> Result<BenchmarkRun> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("benchmark has no scenes".into()));
    }
    let mut ids: Vec<&str> = scenes.iter().map(|s| s.scene_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidConfig(format!("duplicate scene id {:?}", w[0])));
    }
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    if !resume {
        for s in scenes {
            let stages = run_dir.join(&s.scene_id).join("stages");
            if stages.exists() {
                fs::remove_dir_all(&stages).map_err(|e| Error::io(&stages, e))?;
            }
        }
    }

    let started_unix = unix_now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let reports: Vec<SceneReport> = pool.install(|| {
        scenes
            .par_iter()
            .map(|s| run_scene(s, base, config, &run_dir.join(&s.scene_id)))
            .collect::<Result<_>>()
    })?;

    let filtering_sweep = config
        .rates
        .iter()
        .map(|r| aggregate(&reports, *r))
        .collect::<Result<Vec<_>>>()?;
    let run = BenchmarkRun {
        run_id: run_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        config_hash: config.hash(),
        backend_fingerprint: base.fingerprint(),
        scenes: scenes.iter().map(|s| s.scene_id.clone()).collect(),
        aggregate: aggregate(&reports, 0.0)?,
        reports,
        filtering_sweep,
        started_unix,
        finished_unix: unix_now(),
    };
    write_json(&run_dir.join("run.json"), &run)?;
    for (format, name) in [(TableFormat::Text, "summary.txt"), (TableFormat::Csv, "summary.csv")] {
        let path = run_dir.join(name);
        fs::write(&path, emit_table(&run, format)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Text,
    Csv,
}

/// Placeholder for metrics that were not computed.
pub const ABSENT: &str = "—";

/// Four significant digits, fixed notation.
pub fn format_sig4(v: f64) -> String {
    if !v.is_finite() {
        return if v > 0.0 { "inf".into() } else { v.to_string() };
    }
    if v == 0.0 {
        return "0.000".into();
    }
    let decimals = |x: f64| (3 - x.abs().log10().floor() as i32).max(0) as usize;
    let d = decimals(v);
    let s = format!("{v:.d$}");
    // Rounding can carry into a new leading digit (9.9996 → 10.000).
    let rounded: f64 = s.parse().unwrap_or(v);
    let d2 = decimals(rounded);
    if d2 < d {
        format!("{v:.d2$}")
    } else {
        s
    }
}

fn rate_label(rate: f64) -> String {
    format!("{}%", (rate * 100.0 * 100.0).round() / 100.0)
}

/// Renders the filtering sweep, one row per rate. Output depends only on
/// the aggregated values, so identical runs give identical bytes.
pub fn emit_table(run: &BenchmarkRun, format: TableFormat) -> String {
    let cell = |row: &AggregateRow, m: Metric| row.get(m).map(format_sig4).unwrap_or_else(|| ABSENT.into());
    let excluded: usize = run.filtering_sweep.iter().map(|r| r.psnr_inf_excluded).sum();
    match format {
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["filter_rate".to_string()];
            header.extend(Metric::ALL.iter().map(|m| m.label().to_string()));
            header.extend(["scenes".into(), "survivors".into(), "psnr_inf_excluded".into()]);
            w.write_record(&header).expect("in-memory csv");
            for row in &run.filtering_sweep {
                let mut rec = vec![row.filter_rate.to_string()];
                rec.extend(Metric::ALL.iter().map(|m| cell(row, *m)));
                rec.extend([row.scenes.to_string(), row.survivors.to_string(), row.psnr_inf_excluded.to_string()]);
                w.write_record(&rec).expect("in-memory csv");
            }
            String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 fields")
        }
        TableFormat::Text => {
            let mut rows = vec![{
                let mut h = vec!["filter".to_string()];
                h.extend(Metric::ALL.iter().map(|m| m.label().to_string()));
                h
            }];
            for row in &run.filtering_sweep {
                let mut r = vec![rate_label(row.filter_rate)];
                r.extend(Metric::ALL.iter().map(|m| cell(row, *m)));
                rows.push(r);
            }
            let ncol = rows[0].len();
            let widths: Vec<usize> = (0..ncol)
                .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
                .collect();
            let mut out = String::new();
            let scenes = run.filtering_sweep.first().map(|r| r.scenes).unwrap_or(0);
            let _ = writeln!(out, "scenes: {scenes}  candidates per scene: {}", max_candidates(run));
            for r in &rows {
                let line: Vec<String> = r
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (c, w))| {
                        let pad = w - c.chars().count();
                        if i == 0 {
                            format!("{c}{}", " ".repeat(pad))
                        } else {
                            format!("{}{c}", " ".repeat(pad))
                        }
                    })
                    .collect();
                let _ = writeln!(out, "{}", line.join("  "));
            }
            if excluded > 0 {
                let _ = writeln!(out, "PSNR means exclude {excluded} exact matches (+inf) across rows.");
            }
            out
        }
    }
}

fn max_candidates(run: &BenchmarkRun) -> usize {
    run.reports.iter().map(|r| r.candidates.len()).max().unwrap_or(0)
}
