use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scenefill_core::bench::{emit_table, run_benchmark, TableFormat};
use scenefill_core::diffusion::{self, build_toy_backend, DenoiserBackend, ToyDenoiser};
use scenefill_core::lora::{load_adapters, save_adapters, MANIFEST_FILE};
use scenefill_core::metrics::{evaluate_candidate, MetricSuite};
use scenefill_core::sampler::generate;
use scenefill_core::scene::{load_scene, save_candidate, save_scene, Scene};
use scenefill_core::select::{rank_and_filter, score_candidate, ClassicalMatcher};
use scenefill_core::synthetic::make_synthetic_scene;
use scenefill_core::train::{finetune as run_finetune, write_loss_log};
use scenefill_core::Error;

use crate::config::{self, CliConfig};
use crate::{Common, Failure, EXIT_MISMATCH};

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn resolve(common: &Common) -> Result<CliConfig, Failure> {
    let sets = common
        .set
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Failure::config(format!("--set expects KEY=VALUE, got {s:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut cfg = config::load(common.config.as_deref(), &config::env_overrides(), &sets)?;
    if let Some(b) = &common.backend {
        cfg.backend = b.clone();
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.inference.base_seed = s;
    }
    Ok(cfg)
}

fn load_backend(cfg: &CliConfig) -> Result<ToyDenoiser, Failure> {
    if cfg.backend == "toy" {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.toy_seed);
        return Ok(build_toy_backend(cfg.toy.clone(), &mut rng)?);
    }
    if let Some(path) = cfg.backend.strip_prefix("pretrained:") {
        let path = Path::new(path);
        if !path.is_file() {
            return Err(Failure::config(format!("backend checkpoint {} not found", path.display())));
        }
        return Ok(ToyDenoiser::load_checkpoint(path)?);
    }
    Err(Failure::config(format!(
        "backend: expected \"toy\" or \"pretrained:<path>\", got {:?}",
        cfg.backend
    )))
}

fn scene(dir: &Path) -> Result<Scene, Failure> {
    Ok(load_scene(dir)?)
}

pub fn finetune(scene_dir: &Path, out: &Path, iterations: Option<usize>, common: &Common) -> Result<(), Failure> {
    let mut cfg = resolve(common)?;
    if let Some(n) = iterations {
        cfg.train.iterations = n;
    }
    cfg.train.validate()?;
    let scene = scene(scene_dir)?;
    let mut backend = load_backend(&cfg)?;
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let ckpt = out.join("checkpoint");
    let ckpt_dir = (cfg.train.checkpoint_every > 0).then_some(ckpt.as_path());
    let outcome = run_finetune(&scene, &mut backend, &cfg.train, ckpt_dir)?;
    let adapter_dir = out.join("adapters");
    save_adapters(&outcome.adapters, &adapter_dir, &cfg.train.hash(), &backend.fingerprint())?;
    write_loss_log(&out.join("loss.jsonl"), &outcome.loss_history)?;
    let last = outcome.loss_history.last().copied();
    println!(
        "fine-tuned {} for {} iterations ({} adapters, rank {}){}",
        scene.scene_id,
        cfg.train.iterations,
        outcome.adapters.len(),
        outcome.adapters.rank(),
        last.map(|l| format!(", final loss {l:.5}")).unwrap_or_default()
    );
    println!("adapters: {}", adapter_dir.display());
    Ok(())
}

pub struct CompleteFlags {
    pub candidates: Option<usize>,
    pub filter_rate: Option<f64>,
    pub mask_all: bool,
    pub steps: Option<usize>,
}

/// Accepts either an adapter directory or a `finetune` output directory.
fn adapter_dir(path: &Path) -> PathBuf {
    if !path.join(MANIFEST_FILE).is_file() && path.join("adapters").join(MANIFEST_FILE).is_file() {
        path.join("adapters")
    } else {
        path.to_path_buf()
    }
}

pub fn complete(
    scene_dir: &Path,
    adapters: Option<&Path>,
    out: &Path,
    flags: CompleteFlags,
    common: &Common,
) -> Result<(), Failure> {
    let mut cfg = resolve(common)?;
    if let Some(n) = flags.candidates {
        cfg.inference.num_candidates = n;
    }
    if let Some(r) = flags.filter_rate {
        cfg.filter_rate = r;
    }
    if let Some(s) = flags.steps {
        cfg.inference.steps = s;
    }
    cfg.inference.mask_all |= flags.mask_all;
    cfg.inference.validate()?;
    if !(0.0..1.0).contains(&cfg.filter_rate) {
        return Err(Failure::config(format!("filter_rate must be in [0, 1), got {}", cfg.filter_rate)));
    }
    let suite = MetricSuite::from_selection(&cfg.metrics)?;
    let scene = scene(scene_dir)?;
    let mut backend = load_backend(&cfg)?;

    if let Some(dir) = adapters {
        let dir = adapter_dir(dir);
        let (set, manifest) = load_adapters(&dir)?;
        if manifest.backend_fingerprint != backend.fingerprint() {
            return Err(Failure {
                code: EXIT_MISMATCH,
                message: format!(
                    "adapter/backend mismatch: adapters were trained on {}, backend is {}",
                    manifest.backend_fingerprint,
                    backend.fingerprint()
                ),
            });
        }
        backend.attach_adapters(set)?;
    }

    let generation = generate(&scene, &backend, &cfg.inference)?;
    for (seed, msg) in &generation.failures {
        eprintln!("warning: candidate {seed} failed: {msg}");
    }
    let matcher = ClassicalMatcher {
        params: cfg.matcher.clone(),
    };
    let mut candidates = generation.candidates;
    for c in &mut candidates {
        c.image = c.image.quantized();
        score_candidate(c, &scene, &matcher)?;
        if scene.ground_truth.is_some() {
            c.metrics = Some(evaluate_candidate(c, &scene, &suite)?);
        }
    }
    let cand_dir = out.join("candidates");
    for c in &candidates {
        save_candidate(c, &cand_dir)?;
    }
    let total = candidates.len();
    let kept = rank_and_filter(candidates, cfg.filter_rate)?;

    let mut table = String::new();
    let with_metrics = scene.ground_truth.is_some();
    table.push_str(if with_metrics { "rank  seed  matches     PSNR    SSIM\n" } else { "rank  seed  matches\n" });
    for (i, c) in kept.iter().enumerate() {
        let matches = c.match_count.unwrap_or(0);
        match &c.metrics {
            Some(m) if with_metrics => {
                table.push_str(&format!("{:>4}  {:>4}  {:>7}  {:>7.3}  {:>6.4}\n", i + 1, c.seed, matches, m.psnr, m.ssim))
            }
            _ => table.push_str(&format!("{:>4}  {:>4}  {:>7}\n", i + 1, c.seed, matches)),
        }
    }
    let ranking = out.join("ranking.txt");
    fs::write(&ranking, &table).map_err(|e| io_failure(&ranking, e))?;
    println!("{} of {total} candidates kept (filter rate {})", kept.len(), cfg.filter_rate);
    print!("{table}");
    Ok(())
}

pub struct BenchFlags {
    pub run_id: Option<String>,
    pub rates: Option<Vec<f64>>,
    pub resume: bool,
    pub workers: Option<usize>,
    pub iterations: Option<usize>,
    pub candidates: Option<usize>,
    pub steps: Option<usize>,
}

fn scene_dirs(dataset: &Path) -> Result<Vec<PathBuf>, Failure> {
    if !dataset.is_dir() {
        return Err(Failure::config(format!("dataset {} is not a directory", dataset.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dataset)
        .map_err(|e| io_failure(dataset, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Failure::config(format!("empty dataset: no scene directories in {}", dataset.display())));
    }
    Ok(dirs)
}

pub fn bench(dataset: &Path, out: &Path, flags: BenchFlags, common: &Common) -> Result<(), Failure> {
    let mut cfg = resolve(common)?;
    if let Some(r) = flags.rates {
        cfg.rates = r;
    }
    if let Some(w) = flags.workers {
        cfg.workers = w;
    }
    if let Some(n) = flags.iterations {
        cfg.train.iterations = n;
    }
    if let Some(n) = flags.candidates {
        cfg.inference.num_candidates = n;
    }
    if let Some(s) = flags.steps {
        cfg.inference.steps = s;
    }
    let bench_cfg = cfg.bench_config();
    bench_cfg.validate()?;
    let scenes = scene_dirs(dataset)?
        .iter()
        .map(|d| scene(d))
        .collect::<Result<Vec<_>, _>>()?;
    let backend = load_backend(&cfg)?;
    let run_id = flags
        .run_id
        .unwrap_or_else(|| format!("run-{}", scenefill_core::config_hash(&(bench_cfg.hash(), backend.fingerprint()))));
    let run_dir = out.join(&run_id);
    let run = run_benchmark(&scenes, &backend, &bench_cfg, &run_dir, flags.resume)?;
    let recomputed: usize = run.reports.iter().map(|r| r.computed.len()).sum();
    for r in &run.reports {
        if let Some((stage, msg)) = &r.failure {
            eprintln!("warning: scene {}: {} failed: {msg}", r.scene_id, stage.name());
        }
    }
    print!("{}", emit_table(&run, TableFormat::Text));
    println!("run: {} ({recomputed} stages computed)", run_dir.display());
    Ok(())
}

pub fn make_synthetic(out: &Path, count: usize, first_seed: u64, size: usize) -> Result<(), Failure> {
    if size < 16 || size % 2 != 0 {
        return Err(Failure::config(format!("size must be even and at least 16, got {size}")));
    }
    for i in 0..count as u64 {
        let scene = make_synthetic_scene(first_seed + i, (size, size));
        let dir = out.join(&scene.scene_id);
        save_scene(&scene, &dir)?;
        println!("{}", dir.display());
    }
    Ok(())
}

pub fn pretrain_toy(out: &Path, steps: Option<usize>, common: &Common) -> Result<(), Failure> {
    let mut cfg = resolve(common)?;
    if let Some(s) = steps {
        cfg.pretrain.steps = s;
    }
    if let Some(s) = common.seed {
        cfg.pretrain.seed = s;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.toy_seed);
    let mut model = build_toy_backend(cfg.toy.clone(), &mut rng)?;
    let history = diffusion::pretrain_toy(&mut model, &cfg.pretrain)?;
    model.save_checkpoint(out)?;
    let tail = &history[history.len().saturating_sub(50)..];
    if !tail.is_empty() {
        println!(
            "pretrained {} steps, mean loss over last {}: {:.5}",
            history.len(),
            tail.len(),
            tail.iter().sum::<f32>() / tail.len() as f32
        );
    }
    println!("checkpoint: {} (use --backend pretrained:{})", out.display(), out.display());
    Ok(())
}
