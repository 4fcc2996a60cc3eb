//! Adapter fine-tuning with the masked denoising loss.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    forward_noise, gaussian_latent, Conditioning, Latent, MatrixGrads, Prompt, TrainableBackend,
};
use crate::error::{Error, Result};
use crate::lora::{dropout_mask, inject, load_adapters, save_adapters, AdapterSet, TargetFilter};
use crate::mask::{mask_array, sample_mask, MaskSpec};
use crate::optim::AdamMoments;
use crate::scene::{BinaryMask, ImageBuffer, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Learning rate for adapters on denoiser matrices.
    pub lr_denoiser: f32,
    /// Learning rate for adapters on `text.*` matrices.
    pub lr_text_encoder: f32,
    pub rank: usize,
    /// Per-element probability of dropping the prompt, the mask and each
    /// adapter, independently.
    pub dropout_prob: f64,
    pub prompt: String,
    pub mask_spec: MaskSpec,
    pub seed: u64,
    /// Write a resumable checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub targets: TargetFilter,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 16,
            lr_denoiser: 2e-4,
            lr_text_encoder: 4e-5,
            rank: 8,
            dropout_prob: 0.1,
            prompt: "a photo of [V]".into(),
            mask_spec: MaskSpec::default(),
            seed: 0,
            checkpoint_every: 0,
            targets: TargetFilter::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.rank == 0 {
            return Err(Error::InvalidConfig("batch_size and rank must be >= 1".into()));
        }
        if !(self.lr_denoiser > 0.0 && self.lr_text_encoder > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::InvalidConfig(format!(
                "dropout_prob must be in [0, 1), got {}",
                self.dropout_prob
            )));
        }
        self.mask_spec.validate()
    }

    pub fn hash(&self) -> String {
        crate::config_hash(self)
    }
}

/// Per-position loss weights at prediction resolution: all ones for
/// references; for the target, `1 - M_tgt` area-averaged and binarized at
/// 0.5 so the hidden region never contributes.
pub fn loss_weight_map(mask: &BinaryMask, is_target: bool, prediction_shape: (usize, usize)) -> Array2<f32> {
    let (h, w) = prediction_shape;
    if !is_target {
        return Array2::ones((h, w));
    }
    mask.complement().resample(h, w).to_f32()
}

/// `mean(weight · (pred - target)²)` over every latent value, and its
/// gradient with respect to `pred`.
pub fn weighted_mse(pred: &Latent, target: &Latent, weight: &Array2<f32>) -> Result<(f32, Latent)> {
    if pred.dim() != target.dim() || (pred.dim().0, pred.dim().1) != weight.dim() {
        return Err(Error::GeometryMismatch(format!(
            "loss inputs {:?}, {:?}, weights {:?}",
            pred.dim(),
            target.dim(),
            weight.dim()
        )));
    }
    let n = pred.len() as f32;
    let mut grad = pred - target;
    let mut value = 0.0f32;
    Zip::indexed(&mut grad).for_each(|(y, x, _), g| {
        let w = weight[[y, x]];
        value += w * *g * *g;
        *g *= 2.0 * w / n;
    });
    Ok((value / n, grad))
}

/// Scene images at backend resolution. References are center-cropped to a
/// square first; the target is resized as a whole so that training sees the
/// same framing that sampling conditions on. The target's fill region is
/// zeroed first, so nothing inside it can reach the loss or its gradient.
#[derive(Debug, Clone)]
pub struct TrainingData {
    /// References followed by the target.
    pub images: Vec<ImageBuffer>,
    /// Loss weights used whenever the target is drawn.
    pub target_weights: Array2<f32>,
}

impl TrainingData {
    pub fn prepare<B: crate::diffusion::DenoiserBackend + ?Sized>(scene: &Scene, backend: &B) -> Result<Self> {
        let resolution = backend.resolution();
        let (lh, lw, _) = backend.latent_shape();
        let mut images = scene
            .references
            .iter()
            .map(|r| r.to_working_resolution(resolution))
            .collect::<Result<Vec<_>>>()?;
        images.push(scene.masked_target().resize(resolution, resolution)?);
        Ok(Self {
            images,
            target_weights: loss_weight_map(&scene.target_mask, true, (lh, lw)),
        })
    }

    fn target_index(&self) -> usize {
        self.images.len() - 1
    }
}

/// Stream ids for the independent random sources of the training loop.
const STREAM_MASK: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_BATCH: u64 = 4;
const STREAM_INIT: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct RngStreams {
    pub mask: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
    pub batch: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            mask: stream(seed, STREAM_MASK),
            noise: stream(seed, STREAM_NOISE),
            dropout: stream(seed, STREAM_DROPOUT),
            batch: stream(seed, STREAM_BATCH),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngPosition {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngPosition {
    fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Stage(format!("corrupt rng state in checkpoint: {what}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed"))?
            .try_into()
            .map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word_pos"))?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaMoments {
    pub a: AdamMoments,
    pub b: AdamMoments,
}

/// Everything besides the adapters themselves (which live on the backend)
/// needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub moments: BTreeMap<String, DeltaMoments>,
    pub loss_history: Vec<f32>,
    pub streams: RngStreams,
}

impl TrainState {
    pub fn new(adapters: &AdapterSet, seed: u64) -> Self {
        let moments = adapters
            .deltas()
            .map(|d| {
                (
                    d.target_name.clone(),
                    DeltaMoments {
                        a: AdamMoments::new(d.a.len()),
                        b: AdamMoments::new(d.b.len()),
                    },
                )
            })
            .collect();
        Self {
            step: 0,
            moments,
            loss_history: Vec::new(),
            streams: RngStreams::new(seed),
        }
    }
}

/// Random choices for one batch element.
#[derive(Debug, Clone)]
pub struct ElementDraw {
    pub image_index: usize,
    pub is_target: bool,
    pub t: usize,
    pub eps: Latent,
    pub mask: BinaryMask,
    pub drop_prompt: bool,
    pub drop_mask: bool,
    /// Per-adapter activity, aligned with [`AdapterSet::names`].
    pub active: Vec<bool>,
}

/// Draws the random choices for one element from the state's streams.
pub fn draw_element<B: TrainableBackend + ?Sized>(
    state: &mut TrainState,
    backend: &B,
    data: &TrainingData,
    config: &TrainConfig,
) -> Result<ElementDraw> {
    let adapters = backend.adapters().ok_or(Error::NoInjectionTargets)?;
    let (lh, lw, _) = backend.latent_shape();
    let image_index = state.streams.batch.random_range(0..data.images.len());
    let mask = sample_mask(&config.mask_spec, (lh, lw), &mut state.streams.mask)?;
    let t = state.streams.noise.random_range(1..=backend.schedule().len());
    let eps = gaussian_latent(backend.latent_shape(), &mut state.streams.noise);
    let p = config.dropout_prob;
    let drop_prompt = state.streams.dropout.random::<f64>() < p;
    let drop_mask = state.streams.dropout.random::<f64>() < p;
    let active = dropout_mask(adapters, &mut state.streams.dropout);
    Ok(ElementDraw {
        image_index,
        is_target: image_index == data.target_index(),
        t,
        eps,
        mask,
        drop_prompt,
        drop_mask,
        active,
    })
}

/// Loss and effective-weight gradients for one element.
pub fn element_loss<B: TrainableBackend + ?Sized>(
    backend: &B,
    data: &TrainingData,
    prompt: &Prompt,
    draw: &ElementDraw,
) -> Result<(f32, MatrixGrads)> {
    let (lh, lw, _) = backend.latent_shape();
    let x0 = backend.encode(&data.images[draw.image_index])?;
    let x_t = forward_noise(&x0, draw.t, &draw.eps, backend.schedule())?;
    let ones;
    let mask = if draw.drop_mask {
        ones = BinaryMask::ones(lh, lw);
        &ones
    } else {
        &draw.mask
    };
    let masked = mask_array(&x0, mask);
    let empty = Prompt::empty();
    let cond = Conditioning {
        prompt: if draw.drop_prompt { &empty } else { prompt },
        mask,
        masked_image: &masked,
    };
    let weights = if draw.is_target {
        data.target_weights.clone()
    } else {
        Array2::ones((lh, lw))
    };
    backend.noise_vjp(&x_t, draw.t, &cond, &draw.active, &mut |pred| {
        weighted_mse(pred, &draw.eps, &weights)
    })
}

/// Adapter gradients `(dA, dB)` per delta, averaged over the batch.
pub type AdapterGrads = BTreeMap<String, (Array2<f32>, Array2<f32>)>;

/// Batch loss and adapter gradients for a fixed list of draws. Elements
/// are evaluated in parallel and reduced in order.
pub fn batch_gradients<B: TrainableBackend + ?Sized>(
    backend: &B,
    data: &TrainingData,
    prompt: &Prompt,
    draws: &[ElementDraw],
) -> Result<(f32, AdapterGrads)> {
    let adapters = backend.adapters().ok_or(Error::NoInjectionTargets)?;
    let results: Vec<Result<(f32, MatrixGrads)>> = draws
        .par_iter()
        .map(|d| element_loss(backend, data, prompt, d))
        .collect();
    let n = draws.len() as f32;
    let mut loss = 0.0;
    let mut grads: AdapterGrads = adapters
        .deltas()
        .map(|d| (d.target_name.clone(), (Array2::zeros(d.a.dim()), Array2::zeros(d.b.dim()))))
        .collect();
    for (draw, r) in draws.iter().zip(results) {
        let (value, matrix_grads) = r?;
        loss += value / n;
        for (i, delta) in adapters.deltas().enumerate() {
            if !draw.active[i] {
                continue;
            }
            let dw = matrix_grads.get(&delta.target_name).ok_or_else(|| {
                Error::Backend(format!("no gradient for {}", delta.target_name))
            })?;
            let (da, db) = delta.factor_grads(dw);
            let acc = grads.get_mut(&delta.target_name).expect("initialized above");
            acc.0.scaled_add(1.0 / n, &da);
            acc.1.scaled_add(1.0 / n, &db);
        }
    }
    Ok((loss, grads))
}

/// One optimizer step on the adapters attached to `backend`.
pub fn training_step<B: TrainableBackend + ?Sized>(
    state: &mut TrainState,
    backend: &mut B,
    data: &TrainingData,
    config: &TrainConfig,
) -> Result<f32> {
    let prompt = Prompt::parse(&config.prompt);
    let draws = (0..config.batch_size)
        .map(|_| draw_element(state, &*backend, data, config))
        .collect::<Result<Vec<_>>>()?;
    let (loss, grads) = batch_gradients(&*backend, data, &prompt, &draws)?;
    if !loss.is_finite() {
        return Err(Error::NumericalDivergence {
            step: Some(state.step),
        });
    }
    let adapters = backend.adapters_mut().ok_or(Error::NoInjectionTargets)?;
    for delta in adapters.deltas_mut() {
        let lr = if delta.target_name.starts_with("text.") {
            config.lr_text_encoder
        } else {
            config.lr_denoiser
        };
        let (da, db) = &grads[&delta.target_name];
        let m = state
            .moments
            .get_mut(&delta.target_name)
            .ok_or_else(|| Error::Stage(format!("no optimizer state for {}", delta.target_name)))?;
        m.a.step(delta.a.as_slice_mut().expect("standard layout"), da.as_slice().expect("standard layout"), lr);
        m.b.step(delta.b.as_slice_mut().expect("standard layout"), db.as_slice().expect("standard layout"), lr);
    }
    state.step += 1;
    state.loss_history.push(loss);
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub adapters: AdapterSet,
    pub loss_history: Vec<f32>,
    /// Step the run started from (non-zero after a resume).
    pub resumed_from: usize,
}

const STATE_FILE: &str = "train_state.json";
const CHECKPOINT_ADAPTERS: &str = "adapters";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config_hash: String,
    backend_fingerprint: String,
    step: usize,
    moments: BTreeMap<String, DeltaMoments>,
    loss_history: Vec<f32>,
    rng: BTreeMap<String, RngPosition>,
}

fn save_checkpoint<B: TrainableBackend + ?Sized>(
    dir: &Path,
    state: &TrainState,
    backend: &B,
    config_hash: &str,
) -> Result<()> {
    let adapters = backend.adapters().ok_or(Error::NoInjectionTargets)?;
    let fingerprint = backend.fingerprint();
    save_adapters(adapters, &dir.join(CHECKPOINT_ADAPTERS), config_hash, &fingerprint)?;
    let s = &state.streams;
    let ckpt = Checkpoint {
        config_hash: config_hash.into(),
        backend_fingerprint: fingerprint,
        step: state.step,
        moments: state.moments.clone(),
        loss_history: state.loss_history.clone(),
        rng: BTreeMap::from([
            ("mask".into(), RngPosition::of(&s.mask)),
            ("noise".into(), RngPosition::of(&s.noise)),
            ("dropout".into(), RngPosition::of(&s.dropout)),
            ("batch".into(), RngPosition::of(&s.batch)),
        ]),
    };
    let tmp = dir.join(format!("{STATE_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_vec(&ckpt)?).map_err(|e| Error::io(&tmp, e))?;
    let path = dir.join(STATE_FILE);
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

/// Loads a checkpoint if one exists for the same config and backend.
fn load_checkpoint<B: TrainableBackend + ?Sized>(
    dir: &Path,
    backend: &B,
    config_hash: &str,
) -> Result<Option<(TrainState, AdapterSet)>> {
    let path = dir.join(STATE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
    if ckpt.config_hash != config_hash || ckpt.backend_fingerprint != backend.fingerprint() {
        log::info!("ignoring checkpoint at {}: config or backend changed", dir.display());
        return Ok(None);
    }
    let (adapters, _) = load_adapters(&dir.join(CHECKPOINT_ADAPTERS))?;
    let rng = |k: &str| {
        ckpt.rng
            .get(k)
            .ok_or_else(|| Error::Stage(format!("checkpoint lacks rng stream {k}")))?
            .restore()
    };
    let state = TrainState {
        step: ckpt.step,
        moments: ckpt.moments,
        loss_history: ckpt.loss_history,
        streams: RngStreams {
            mask: rng("mask")?,
            noise: rng("noise")?,
            dropout: rng("dropout")?,
            batch: rng("batch")?,
        },
    };
    Ok(Some((state, adapters)))
}

/// Injects adapters into `backend` and trains them on the scene's
/// references and target. The trained adapters stay attached and a copy is
/// returned. With `checkpoint_dir` set, training resumes from a matching
/// checkpoint there and writes one every `checkpoint_every` steps.
pub fn finetune<B: TrainableBackend + ?Sized>(
    scene: &Scene,
    backend: &mut B,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    scene.validate()?;
    let data = TrainingData::prepare(scene, &*backend)?;
    let mut init_rng = stream(config.seed, STREAM_INIT);
    inject(backend, config.rank, &config.targets, config.dropout_prob, &mut init_rng)?;
    let hash = config.hash();

    let mut state = TrainState::new(backend.adapters().expect("injected"), config.seed);
    if let Some(dir) = checkpoint_dir {
        if let Some((saved, adapters)) = load_checkpoint(dir, &*backend, &hash)? {
            backend.detach_adapters();
            backend.attach_adapters(adapters)?;
            log::info!("resuming fine-tuning at step {}", saved.step);
            state = saved;
        }
    }
    let resumed_from = state.step;

    while state.step < config.iterations {
        let loss = training_step(&mut state, backend, &data, config)?;
        if state.step % 100 == 0 {
            log::debug!("step {}: loss {loss:.5}", state.step);
        }
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                save_checkpoint(dir, &state, &*backend, &hash)?;
            }
        }
    }
    Ok(FinetuneOutcome {
        adapters: backend.adapters().expect("injected").clone(),
        loss_history: state.loss_history,
        resumed_from,
    })
}

/// Writes one `{"step": i, "loss": v}` record per line.
pub fn write_loss_log(path: &Path, history: &[f32]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (step, loss) in history.iter().enumerate() {
        let line = serde_json::json!({ "step": step + 1, "loss": loss });
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn single_pixel_squared_error() {
        let pred = Array3::zeros((1, 1, 1));
        let eps = Array3::from_elem((1, 1, 1), 0.5);
        let (loss, grad) = weighted_mse(&pred, &eps, &Array2::ones((1, 1))).unwrap();
        assert_eq!(loss, 0.25);
        assert_eq!(grad[[0, 0, 0]], -1.0);
    }

    #[test]
    fn fully_masked_target_has_no_loss() {
        let w = loss_weight_map(&BinaryMask::ones(8, 8), true, (8, 8));
        let pred = Array3::from_elem((8, 8, 3), 1.0);
        let (loss, grad) = weighted_mse(&pred, &Array3::zeros((8, 8, 3)), &w).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn weight_map_examples() {
        let m = BinaryMask::from_fn(8, 8, |_, x| x < 4);
        assert!(loss_weight_map(&m, false, (4, 4)).iter().all(|v| *v == 1.0));
        assert!(loss_weight_map(&BinaryMask::zeros(8, 8), true, (4, 4))
            .iter()
            .all(|v| *v == 1.0));
        let w = loss_weight_map(&m, true, (4, 4));
        for ((_, x), v) in w.indexed_iter() {
            assert_eq!(*v, if x < 2 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn rng_position_roundtrip() {
        let mut rng = stream(9, STREAM_NOISE);
        let _: [u64; 7] = rng.random();
        let restored = RngPosition::of(&rng).restore().unwrap();
        let mut a = rng.clone();
        let mut b = restored;
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn invalid_config() {
        let cfg = TrainConfig {
            lr_denoiser: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
