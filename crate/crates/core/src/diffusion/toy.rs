//! Small pixel-space convolutional denoiser with an explicit backward pass.
//!
//! Per-pixel input channels are `x_t` (3), the fill mask (1), the masked
//! image (3) and Fourier features of the pixel position. A timestep
//! embedding plus a pooled prompt embedding form a conditioning vector that
//! is added to every hidden pre-activation.
//!
//! ```text
//! z   = silu(conv3(in) + cond)                 unet.conv_in
//! g   = global_proj·mean(z)                    unet.global_proj
//! z  += silu(conv3_d(z) + cond + g) × depth    unet.conv_mid{i}, dilation 2^i
//! z  += silu(dense(z))                         unet.mix
//! eps = conv3(z)                               unet.conv_out
//! cond = time_proj·temb + text_proj·silu(text.encoder·mean(tokens))
//! ```
//!
//! Activations are stored as `P × C` row-major matrices (pixels × channels),
//! which is also the memory order of a [`Latent`].

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    forward_noise, gaussian_latent, Conditioning, DenoiserBackend, Latent, MatrixGrads,
    NoiseSchedule, Prompt, TrainableBackend,
};
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::mask::{mask_array, sample_mask, MaskSpec};
use crate::optim::AdamMoments;
use crate::scene::{BinaryMask, ImageBuffer};
use crate::synthetic::random_view_image;

const CHECKPOINT_FORMAT: &str = "scenefill-toy-denoiser-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyBackendConfig {
    /// Square working side in pixels; a power of two >= 16.
    pub resolution: usize,
    /// Hidden channel width.
    pub channels: usize,
    /// Number of residual 3×3 blocks between input and mixing layers.
    pub depth: usize,
    /// Width of timestep and prompt embeddings.
    pub embedding_dim: usize,
    pub timesteps: usize,
    /// Octaves of positional Fourier features per axis.
    pub position_octaves: usize,
    pub vocab_size: usize,
}

impl Default for ToyBackendConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: 32,
            depth: 3,
            embedding_dim: 32,
            timesteps: 200,
            position_octaves: 5,
            vocab_size: 64,
        }
    }
}

impl ToyBackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 || !self.resolution.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "toy resolution must be a power of two >= 16, got {}",
                self.resolution
            )));
        }
        if self.channels < 4 || self.depth < 1 || self.vocab_size < 1 {
            return Err(Error::InvalidConfig(
                "toy backend needs channels >= 4, depth >= 1, vocab_size >= 1".into(),
            ));
        }
        if self.embedding_dim < 2 || self.embedding_dim % 2 != 0 {
            return Err(Error::InvalidConfig(
                "toy embedding_dim must be even and >= 2".into(),
            ));
        }
        if self.timesteps < 2 {
            return Err(Error::InvalidConfig("toy timesteps must be >= 2".into()));
        }
        Ok(())
    }

    fn input_channels(&self) -> usize {
        7 + 4 * self.position_octaves
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    weight: Array2<f32>,
    bias: Option<Array1<f32>>,
}

/// The toy denoiser. Base weights are only mutated by [`pretrain_toy`];
/// fine-tuning touches the attached [`AdapterSet`] alone.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    config: ToyBackendConfig,
    schedule: NoiseSchedule,
    layers: BTreeMap<String, Linear>,
    token_table: Array2<f32>,
    posenc: Array2<f32>,
    adapters: Option<AdapterSet>,
}

const TEXT_ENCODER: &str = "text.encoder";
const CONV_IN: &str = "unet.conv_in";
const MIX: &str = "unet.mix";
const GLOBAL_PROJ: &str = "unet.global_proj";
const CONV_OUT: &str = "unet.conv_out";
const TEXT_PROJ: &str = "unet.text_proj";
const TIME_PROJ: &str = "unet.time_proj";
const TOKEN_TABLE: &str = "text.token_table";

fn mid_name(i: usize) -> String {
    format!("unet.conv_mid{i}")
}

/// Builds a randomly initialized toy denoiser.
pub fn build_toy_backend<R: Rng + ?Sized>(config: ToyBackendConfig, rng: &mut R) -> Result<ToyDenoiser> {
    config.validate()?;
    let c = config.channels;
    let e = config.embedding_dim;
    let mut layers = BTreeMap::new();
    let dense = |rows: usize, cols: usize, gain: f32, bias: bool, rng: &mut R| {
        let std = gain / (cols as f32).sqrt();
        Linear {
            weight: Array2::from_shape_simple_fn((rows, cols), || {
                std * rng.sample::<f32, _>(StandardNormal)
            }),
            bias: bias.then(|| Array1::zeros(rows)),
        }
    };
    layers.insert(TEXT_ENCODER.to_string(), dense(e, e, 1.0, true, rng));
    layers.insert(CONV_IN.to_string(), dense(c, 9 * config.input_channels(), 1.0, true, rng));
    for i in 0..config.depth {
        layers.insert(mid_name(i), dense(c, 9 * c, 1.0, true, rng));
    }
    layers.insert(MIX.to_string(), dense(c, c, 1.0, true, rng));
    layers.insert(GLOBAL_PROJ.to_string(), dense(c, c, 1.0, true, rng));
    layers.insert(CONV_OUT.to_string(), dense(3, 9 * c, 0.1, true, rng));
    layers.insert(TEXT_PROJ.to_string(), dense(c, e, 1.0, false, rng));
    layers.insert(TIME_PROJ.to_string(), dense(c, e, 1.0, true, rng));
    let token_table =
        Array2::from_shape_simple_fn((config.vocab_size, e), || 0.5 * rng.sample::<f32, _>(StandardNormal));
    Ok(ToyDenoiser {
        schedule: NoiseSchedule::scaled_linear(config.timesteps)?,
        posenc: position_features(config.resolution, config.position_octaves),
        config,
        layers,
        token_table,
        adapters: None,
    })
}

fn position_features(res: usize, octaves: usize) -> Array2<f32> {
    let mut out = Array2::zeros((res * res, 4 * octaves));
    for y in 0..res {
        for x in 0..res {
            let u = (x as f32 + 0.5) / res as f32 * 2.0 - 1.0;
            let v = (y as f32 + 0.5) / res as f32 * 2.0 - 1.0;
            let mut row = out.row_mut(y * res + x);
            for o in 0..octaves {
                let f = std::f32::consts::PI * (1u32 << o) as f32;
                row[4 * o] = (f * u).sin();
                row[4 * o + 1] = (f * u).cos();
                row[4 * o + 2] = (f * v).sin();
                row[4 * o + 3] = (f * v).cos();
            }
        }
    }
    out
}

fn timestep_embedding(t: usize, dim: usize) -> Array1<f32> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10000f32.ln()) * i as f32 / half as f32).exp();
        out[i] = (t as f32 * freq).sin();
        out[half + i] = (t as f32 * freq).cos();
    }
    out
}

fn token_id(token: &str, vocab: usize) -> usize {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    (h % vocab as u64) as usize
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Dilated 3×3 zero-padded patches: row `p` holds the 9 neighbours of pixel `p`,
/// each a contiguous run of `C` channels.
fn im2col(src: &Array2<f32>, h: usize, w: usize, dilation: usize) -> Array2<f32> {
    let c = src.ncols();
    let src = src.as_standard_layout();
    let s = src.as_slice().expect("standard layout");
    let mut out = vec![0.0f32; h * w * 9 * c];
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * 9 * c;
            for k in 0..9 {
                let d = dilation as isize;
                let sy = y as isize + ((k / 3) as isize - 1) * d;
                let sx = x as isize + ((k % 3) as isize - 1) * d;
                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    let from = (sy as usize * w + sx as usize) * c;
                    out[row + k * c..row + (k + 1) * c].copy_from_slice(&s[from..from + c]);
                }
            }
        }
    }
    Array2::from_shape_vec((h * w, 9 * c), out).expect("sized above")
}

/// Adjoint of [`im2col`].
fn col2im(cols: &Array2<f32>, h: usize, w: usize, c: usize, dilation: usize) -> Array2<f32> {
    let cols = cols.as_standard_layout();
    let s = cols.as_slice().expect("standard layout");
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * 9 * c;
            for k in 0..9 {
                let d = dilation as isize;
                let sy = y as isize + ((k / 3) as isize - 1) * d;
                let sx = x as isize + ((k % 3) as isize - 1) * d;
                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    let to = (sy as usize * w + sx as usize) * c;
                    for (d, v) in out[to..to + c].iter_mut().zip(&s[row + k * c..row + (k + 1) * c]) {
                        *d += v;
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((h * w, c), out).expect("sized above")
}

fn outer(a: &Array1<f32>, b: &Array1<f32>) -> Array2<f32> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

struct Cache {
    cols_in: Array2<f32>,
    cols_mid: Vec<Array2<f32>>,
    cols_out: Array2<f32>,
    /// Pre-activations: conv_in, each mid block, mix.
    pre: Vec<Array2<f32>>,
    /// Hidden states after conv_in and after each mid block.
    hidden: Vec<Array2<f32>>,
    temb: Array1<f32>,
    /// Spatial mean of the first hidden state.
    pooled: Array1<f32>,
    prompt_mean: Array1<f32>,
    text_pre: Array1<f32>,
    text_feat: Array1<f32>,
    token_ids: Vec<usize>,
}

/// Gradients for every base parameter, flattened row-major and keyed by
/// parameter name (`<matrix>`, `<matrix>.bias`, `text.token_table`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToyGrads(pub BTreeMap<String, Vec<f32>>);

impl ToyGrads {
    fn put(&mut self, name: &str, values: impl IntoIterator<Item = f32>) {
        let values: Vec<f32> = values.into_iter().collect();
        match self.0.get_mut(name) {
            Some(acc) => acc.iter_mut().zip(values).for_each(|(a, v)| *a += v),
            None => {
                self.0.insert(name.to_string(), values);
            }
        }
    }

    pub fn accumulate(&mut self, other: &ToyGrads) {
        for (k, v) in &other.0 {
            self.put(k, v.iter().copied());
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.0.values_mut().flatten().for_each(|v| *v *= s);
    }
}

type EffectiveWeights<'a> = BTreeMap<&'a str, Cow<'a, Array2<f32>>>;

impl ToyDenoiser {
    pub fn config(&self) -> &ToyBackendConfig {
        &self.config
    }

    /// Dilation of mid block `i`: 1, 2, 4, … capped at a quarter of the
    /// resolution.
    fn dilation(&self, i: usize) -> usize {
        (1usize << i.min(16)).min(self.config.resolution / 4).max(1)
    }

    fn effective_weights(&self, active: Option<&[bool]>) -> EffectiveWeights<'_> {
        self.layers
            .iter()
            .map(|(name, layer)| {
                let delta = self.adapters.as_ref().and_then(|set| {
                    let idx = set.index_of(name)?;
                    let on = active.map(|a| a.get(idx).copied().unwrap_or(true)).unwrap_or(true);
                    on.then(|| set.get(name).expect("indexed"))
                });
                let w = match delta {
                    Some(d) => Cow::Owned(&layer.weight + &d.delta()),
                    None => Cow::Borrowed(&layer.weight),
                };
                (name.as_str(), w)
            })
            .collect()
    }

    fn bias(&self, name: &str) -> &Array1<f32> {
        self.layers[name].bias.as_ref().expect("layer has bias")
    }

    fn check_inputs(&self, x_t: &Latent, cond: &Conditioning<'_>) -> Result<()> {
        let r = self.config.resolution;
        if x_t.dim() != (r, r, 3) || cond.masked_image.dim() != (r, r, 3) {
            return Err(Error::GeometryMismatch(format!(
                "toy backend expects {r}x{r}x3 inputs, got x_t {:?}, masked image {:?}",
                x_t.dim(),
                cond.masked_image.dim()
            )));
        }
        if cond.mask.shape() != (r, r) {
            return Err(Error::GeometryMismatch(format!(
                "toy backend expects a {r}x{r} mask, got {:?}",
                cond.mask.shape()
            )));
        }
        if x_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalDivergence { step: None });
        }
        Ok(())
    }

    fn forward(
        &self,
        w: &EffectiveWeights<'_>,
        x_t: &Latent,
        t: usize,
        cond: &Conditioning<'_>,
    ) -> Result<(Array2<f32>, Cache)> {
        self.check_inputs(x_t, cond)?;
        if t == 0 || t > self.config.timesteps {
            return Err(Error::BadTimestep {
                t,
                max: self.config.timesteps,
            });
        }
        let r = self.config.resolution;
        let p = r * r;
        let c_in = self.config.input_channels();

        let xs = x_t.as_standard_layout();
        let xs = xs.as_slice().expect("standard");
        let ms = cond.masked_image.as_standard_layout();
        let ms = ms.as_slice().expect("standard");
        let mut input = Array2::<f32>::zeros((p, c_in));
        for (i, mut row) in input.rows_mut().into_iter().enumerate() {
            let (y, x) = (i / r, i % r);
            row[0] = xs[3 * i];
            row[1] = xs[3 * i + 1];
            row[2] = xs[3 * i + 2];
            row[3] = if cond.mask.get(y, x) { 1.0 } else { 0.0 };
            row[4] = ms[3 * i];
            row[5] = ms[3 * i + 1];
            row[6] = ms[3 * i + 2];
            row.slice_mut(ndarray::s![7..]).assign(&self.posenc.row(i));
        }

        let temb = timestep_embedding(t, self.config.embedding_dim);
        let token_ids: Vec<usize> = cond
            .prompt
            .tokens()
            .iter()
            .map(|tok| token_id(tok, self.config.vocab_size))
            .collect();
        let mut prompt_mean = Array1::zeros(self.config.embedding_dim);
        for id in &token_ids {
            prompt_mean += &self.token_table.row(*id);
        }
        if !token_ids.is_empty() {
            prompt_mean /= token_ids.len() as f32;
        }
        let text_pre = w[TEXT_ENCODER].dot(&prompt_mean) + self.bias(TEXT_ENCODER);
        let text_feat = text_pre.mapv(silu);
        let cond_vec =
            w[TIME_PROJ].dot(&temb) + self.bias(TIME_PROJ) + w[TEXT_PROJ].dot(&text_feat);

        let cols_in = im2col(&input, r, r, 1);
        let mut a = cols_in.dot(&w[CONV_IN].t());
        a += self.bias(CONV_IN);
        a += &cond_vec;
        let mut z = a.mapv(silu);
        let pooled = z.mean_axis(Axis(0)).expect("non-empty");
        let mid_cond = &cond_vec + &w[GLOBAL_PROJ].dot(&pooled) + self.bias(GLOBAL_PROJ);
        let mut pre = vec![a];
        let mut hidden = vec![z.clone()];
        let mut cols_mid = Vec::with_capacity(self.config.depth);
        for i in 0..self.config.depth {
            let name = mid_name(i);
            let cols = im2col(&z, r, r, self.dilation(i));
            let mut a = cols.dot(&w[name.as_str()].t());
            a += self.bias(&name);
            a += &mid_cond;
            z += &a.mapv(silu);
            cols_mid.push(cols);
            pre.push(a);
            hidden.push(z.clone());
        }
        let mut a = z.dot(&w[MIX].t());
        a += self.bias(MIX);
        z += &a.mapv(silu);
        pre.push(a);

        let cols_out = im2col(&z, r, r, 1);
        let mut out = cols_out.dot(&w[CONV_OUT].t());
        out += self.bias(CONV_OUT);

        Ok((
            out,
            Cache {
                cols_in,
                cols_mid,
                cols_out,
                pre,
                hidden,
                temb,
                pooled,
                prompt_mean,
                text_pre,
                text_feat,
                token_ids,
            },
        ))
    }

    fn backward(&self, w: &EffectiveWeights<'_>, cache: &Cache, d_out: &Array2<f32>) -> ToyGrads {
        let r = self.config.resolution;
        let c = self.config.channels;
        let depth = self.config.depth;
        let mut g = ToyGrads::default();

        g.put(CONV_OUT, d_out.t().dot(&cache.cols_out));
        g.put("unet.conv_out.bias", d_out.sum_axis(Axis(0)));
        let mut dz = col2im(&d_out.dot(&*w[CONV_OUT]), r, r, c, 1);

        let a_mix = &cache.pre[depth + 1];
        let da = &dz * &a_mix.mapv(silu_grad);
        g.put(MIX, da.t().dot(&cache.hidden[depth]));
        g.put("unet.mix.bias", da.sum_axis(Axis(0)));
        dz += &da.dot(&*w[MIX]);

        let mut d_mid_cond = Array1::<f32>::zeros(c);
        for i in (0..depth).rev() {
            let name = mid_name(i);
            let da = &dz * &cache.pre[i + 1].mapv(silu_grad);
            g.put(&name, da.t().dot(&cache.cols_mid[i]));
            let db = da.sum_axis(Axis(0));
            d_mid_cond += &db;
            g.put(&format!("{name}.bias"), db);
            dz += &col2im(&da.dot(&*w[name.as_str()]), r, r, c, self.dilation(i));
        }

        g.put(GLOBAL_PROJ, outer(&d_mid_cond, &cache.pooled));
        g.put("unet.global_proj.bias", d_mid_cond.iter().copied());
        let d_pooled = w[GLOBAL_PROJ].t().dot(&d_mid_cond) / (r * r) as f32;
        dz += &d_pooled;
        let mut d_cond = d_mid_cond;
        let da = &dz * &cache.pre[0].mapv(silu_grad);
        g.put(CONV_IN, da.t().dot(&cache.cols_in));
        let db = da.sum_axis(Axis(0));
        d_cond += &db;
        g.put("unet.conv_in.bias", db);

        g.put(TIME_PROJ, outer(&d_cond, &cache.temb));
        g.put("unet.time_proj.bias", d_cond.iter().copied());
        g.put(TEXT_PROJ, outer(&d_cond, &cache.text_feat));
        let d_feat = w[TEXT_PROJ].t().dot(&d_cond);
        let d_pre = &d_feat * &cache.text_pre.mapv(silu_grad);
        g.put(TEXT_ENCODER, outer(&d_pre, &cache.prompt_mean));
        g.put("text.encoder.bias", d_pre.iter().copied());

        let mut d_table = Array2::<f32>::zeros(self.token_table.dim());
        if !cache.token_ids.is_empty() {
            let d_mean = w[TEXT_ENCODER].t().dot(&d_pre) / cache.token_ids.len() as f32;
            for id in &cache.token_ids {
                let mut row = d_table.row_mut(*id);
                row += &d_mean;
            }
        }
        g.put(TOKEN_TABLE, d_table);
        g
    }

    /// Forward and backward for all base parameters (adapters, if any,
    /// participate fully in the forward pass).
    pub fn full_vjp(
        &self,
        x_t: &Latent,
        t: usize,
        cond: &Conditioning<'_>,
        loss: &mut dyn FnMut(&Latent) -> Result<(f32, Latent)>,
    ) -> Result<(f32, ToyGrads)> {
        let w = self.effective_weights(None);
        let (out, cache) = self.forward(&w, x_t, t, cond)?;
        let pred = self.to_latent(out);
        let (value, d_pred) = loss(&pred)?;
        let d_out = self.to_rows(&d_pred)?;
        Ok((value, self.backward(&w, &cache, &d_out)))
    }

    fn to_latent(&self, out: Array2<f32>) -> Latent {
        let r = self.config.resolution;
        out.into_shape_with_order((r, r, 3)).expect("P×3 output")
    }

    fn to_rows(&self, latent: &Latent) -> Result<Array2<f32>> {
        let r = self.config.resolution;
        if latent.dim() != (r, r, 3) {
            return Err(Error::GeometryMismatch(format!(
                "gradient shape {:?} != prediction shape",
                latent.dim()
            )));
        }
        Ok(latent
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((r * r, 3))
            .expect("sized"))
    }

    /// Visits every base parameter as a flat mutable slice.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut [f32])) {
        for (name, layer) in self.layers.iter_mut() {
            f(name, layer.weight.as_slice_mut().expect("standard"));
            if let Some(b) = layer.bias.as_mut() {
                f(&format!("{name}.bias"), b.as_slice_mut().expect("standard"));
            }
        }
        f(TOKEN_TABLE, self.token_table.as_slice_mut().expect("standard"));
    }

    fn visit_params(&self, mut f: impl FnMut(&str, &[f32])) {
        for (name, layer) in &self.layers {
            f(name, layer.weight.as_slice().expect("standard"));
            if let Some(b) = layer.bias.as_ref() {
                f(&format!("{name}.bias"), b.as_slice().expect("standard"));
            }
        }
        f(TOKEN_TABLE, self.token_table.as_slice().expect("standard"));
    }

    /// SHA-256 over every base parameter in canonical order.
    pub fn base_weight_digest(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit_params(|name, values| {
            hasher.update(name.as_bytes());
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        });
        hex::encode(hasher.finalize())
    }

    /// Writes the base weights (never adapters) as a JSON checkpoint.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut params = BTreeMap::new();
        self.visit_params(|name, values| {
            params.insert(name.to_string(), values.to_vec());
        });
        let ckpt = ToyCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            params,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, serde_json::to_vec(&ckpt)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: ToyCheckpoint = serde_json::from_slice(&bytes).map_err(|e| {
            Error::Backend(format!(
                "{} is not a {CHECKPOINT_FORMAT} checkpoint: {e}",
                path.display()
            ))
        })?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Backend(format!(
                "unsupported checkpoint format {:?}",
                ckpt.format
            )));
        }
        let mut model = build_toy_backend(ckpt.config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut missing = None;
        model.visit_params_mut(|name, slot| match ckpt.params.get(name) {
            Some(v) if v.len() == slot.len() => slot.copy_from_slice(v),
            _ => missing = Some(name.to_string()),
        });
        if let Some(name) = missing {
            return Err(Error::Backend(format!(
                "checkpoint {} lacks a valid parameter {name}",
                path.display()
            )));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ToyCheckpoint {
    format: String,
    config: ToyBackendConfig,
    params: BTreeMap<String, Vec<f32>>,
}

impl DenoiserBackend for ToyDenoiser {
    fn name(&self) -> &str {
        "toy"
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn resolution(&self) -> usize {
        self.config.resolution
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        (self.config.resolution, self.config.resolution, 3)
    }

    fn encode(&self, image: &ImageBuffer) -> Result<Latent> {
        let r = self.config.resolution;
        if image.shape() != (r, r) {
            return Err(Error::GeometryMismatch(format!(
                "toy backend works at {r}x{r}, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        Ok(image.pixels().clone())
    }

    fn decode(&self, latent: &Latent) -> Result<ImageBuffer> {
        ImageBuffer::from_clamped(latent.clone())
    }

    fn reconstruction_tolerance(&self) -> f32 {
        0.0
    }

    fn clip_range(&self) -> Option<(f32, f32)> {
        Some((0.0, 1.0))
    }

    fn predict_noise(&self, x_t: &Latent, t: usize, cond: &Conditioning<'_>) -> Result<Latent> {
        let w = self.effective_weights(None);
        let (out, _) = self.forward(&w, x_t, t, cond)?;
        Ok(self.to_latent(out))
    }

    fn trainable_matrices(&self) -> Vec<(String, ArrayView2<'_, f32>)> {
        self.layers
            .iter()
            .map(|(name, layer)| (name.clone(), layer.weight.view()))
            .collect()
    }

    fn adapters(&self) -> Option<&AdapterSet> {
        self.adapters.as_ref()
    }

    fn adapters_mut(&mut self) -> Option<&mut AdapterSet> {
        self.adapters.as_mut()
    }

    fn attach_adapters(&mut self, adapters: AdapterSet) -> Result<()> {
        if self.adapters.is_some() {
            return Err(Error::AlreadyInjected);
        }
        for d in adapters.deltas() {
            let layer = self.layers.get(&d.target_name).ok_or_else(|| {
                Error::AdapterMismatch(format!("backend has no matrix {}", d.target_name))
            })?;
            if layer.weight.dim() != d.shape() {
                return Err(Error::AdapterMismatch(format!(
                    "{}: adapter {:?} vs weight {:?}",
                    d.target_name,
                    d.shape(),
                    layer.weight.dim()
                )));
            }
        }
        self.adapters = Some(adapters);
        Ok(())
    }

    fn detach_adapters(&mut self) -> Option<AdapterSet> {
        self.adapters.take()
    }

    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).expect("config serializes"));
        hasher.update(self.base_weight_digest().as_bytes());
        format!("toy-{}", &hex::encode(hasher.finalize())[..16])
    }
}

impl TrainableBackend for ToyDenoiser {
    fn noise_vjp(
        &self,
        x_t: &Latent,
        t: usize,
        cond: &Conditioning<'_>,
        active: &[bool],
        loss: &mut dyn FnMut(&Latent) -> Result<(f32, Latent)>,
    ) -> Result<(f32, MatrixGrads)> {
        let w = self.effective_weights(Some(active));
        let (out, cache) = self.forward(&w, x_t, t, cond)?;
        let pred = self.to_latent(out);
        let (value, d_pred) = loss(&pred)?;
        let d_out = self.to_rows(&d_pred)?;
        let grads = self.backward(&w, &cache, &d_out);
        let mut matrices = MatrixGrads::new();
        for (name, layer) in &self.layers {
            let flat = grads.0.get(name).expect("every matrix has a gradient").clone();
            matrices.insert(
                name.clone(),
                Array2::from_shape_vec(layer.weight.dim(), flat).expect("same shape"),
            );
        }
        Ok((value, matrices))
    }
}

/// Full-weight training of the toy denoiser on the synthetic distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub prompt: String,
    /// Probability of each of: empty prompt, all-ones mask.
    pub dropout_prob: f64,
    pub mask_spec: MaskSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 0,
            prompt: "a photo".into(),
            dropout_prob: 0.1,
            mask_spec: MaskSpec::default(),
        }
    }
}

/// Squared error averaged over every output value.
fn mse_loss(pred: &Latent, target: &Latent) -> (f32, Latent) {
    let n = pred.len() as f32;
    let diff = pred - target;
    let value = diff.iter().map(|d| d * d).sum::<f32>() / n;
    (value, diff * (2.0 / n))
}

/// Trains every base parameter with Adam on random synthetic views and
/// random training masks. Returns the per-step mean loss.
pub fn pretrain_toy(model: &mut ToyDenoiser, cfg: &PretrainConfig) -> Result<Vec<f32>> {
    if model.adapters.is_some() {
        return Err(Error::InvalidConfig(
            "detach adapters before pretraining base weights".into(),
        ));
    }
    cfg.mask_spec.validate()?;
    let r = model.config.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut moments: BTreeMap<String, AdamMoments> = BTreeMap::new();
    model.visit_params_mut(|name, p| {
        moments.insert(name.to_string(), AdamMoments::new(p.len()));
    });
    let prompt = Prompt::parse(&cfg.prompt);
    let empty = Prompt::empty();
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut total = ToyGrads::default();
        let mut step_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let image = random_view_image(&mut rng, (r, r));
            let mask = if rng.random::<f64>() < cfg.dropout_prob {
                BinaryMask::ones(r, r)
            } else {
                sample_mask(&cfg.mask_spec, (r, r), &mut rng)?
            };
            let p = if rng.random::<f64>() < cfg.dropout_prob {
                &empty
            } else {
                &prompt
            };
            let t = rng.random_range(1..=model.config.timesteps);
            let x0 = image.pixels().clone();
            let eps = gaussian_latent(x0.dim(), &mut rng);
            let x_t = forward_noise(&x0, t, &eps, &model.schedule)?;
            let masked = mask_array(&x0, &mask);
            let cond = Conditioning {
                prompt: p,
                mask: &mask,
                masked_image: &masked,
            };
            let (loss, grads) = model.full_vjp(&x_t, t, &cond, &mut |pred| Ok(mse_loss(pred, &eps)))?;
            if !loss.is_finite() {
                return Err(Error::NumericalDivergence { step: Some(step) });
            }
            step_loss += loss;
            total.accumulate(&grads);
        }
        total.scale(1.0 / cfg.batch_size as f32);
        model.visit_params_mut(|name, params| {
            let g = &total.0[name];
            moments
                .get_mut(name)
                .expect("moments for every parameter")
                .step(params, g, cfg.learning_rate);
        });
        let mean = step_loss / cfg.batch_size as f32;
        if step % 100 == 0 {
            log::debug!("pretrain step {step}: loss {mean:.4}");
        }
        history.push(mean);
    }
    Ok(history)
}
