//! Low-rank residual adapters `W + ΔW = W + A·B` on frozen backend weights.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::DenoiserBackend;
use crate::error::{Error, Result};

/// `ΔW = scale · A·B` for one named weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankDelta {
    pub target_name: String,
    /// n × r
    pub a: Array2<f32>,
    /// r × n'
    pub b: Array2<f32>,
    pub scale: f32,
}

impl LowRankDelta {
    /// `A` Gaussian with variance `1/r`, `B` zero, so `ΔW = 0`.
    pub fn zero_init<R: Rng + ?Sized>(
        target_name: impl Into<String>,
        rows: usize,
        cols: usize,
        rank: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (rank as f32).sqrt();
        Self {
            target_name: target_name.into(),
            a: Array2::from_shape_simple_fn((rows, rank), || {
                std * rng.sample::<f32, _>(StandardNormal)
            }),
            b: Array2::zeros((rank, cols)),
            scale: 1.0,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.a.nrows(), self.b.ncols())
    }

    pub fn delta(&self) -> Array2<f32> {
        let mut d = self.a.dot(&self.b);
        if self.scale != 1.0 {
            d *= self.scale;
        }
        d
    }

    /// Chain rule from `dL/dW_eff` to `(dL/dA, dL/dB)`.
    pub fn factor_grads(&self, weight_grad: &Array2<f32>) -> (Array2<f32>, Array2<f32>) {
        let mut da = weight_grad.dot(&self.b.t());
        let mut db = self.a.t().dot(weight_grad);
        if self.scale != 1.0 {
            da *= self.scale;
            db *= self.scale;
        }
        (da, db)
    }
}

/// `base + scale · A·B`.
pub fn effective_weight(delta: &LowRankDelta, base: &Array2<f32>) -> Result<Array2<f32>> {
    if delta.a.ncols() != delta.b.nrows() || delta.shape() != base.dim() {
        return Err(Error::GeometryMismatch(format!(
            "delta {} is {:?} (rank {} / {}), base is {:?}",
            delta.target_name,
            delta.shape(),
            delta.a.ncols(),
            delta.b.nrows(),
            base.dim()
        )));
    }
    if delta.scale == 0.0 {
        return Ok(base.clone());
    }
    Ok(base + &delta.delta())
}

/// Name filter: exact names or `prefix*` patterns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TargetFilter(pub Vec<String>);

impl Default for TargetFilter {
    fn default() -> Self {
        Self(vec!["unet.*".into(), "text.*".into()])
    }
}

impl TargetFilter {
    pub fn matches(&self, name: &str) -> bool {
        self.0.iter().any(|pat| match pat.strip_suffix('*') {
            Some(prefix) => name.starts_with(prefix),
            None => name == pat,
        })
    }
}

/// All adapters attached to one backend.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    deltas: BTreeMap<String, LowRankDelta>,
    rank: usize,
    dropout_prob: f64,
}

impl AdapterSet {
    pub fn new(
        deltas: impl IntoIterator<Item = LowRankDelta>,
        rank: usize,
        dropout_prob: f64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidConfig("adapter rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&dropout_prob) {
            return Err(Error::InvalidConfig(format!(
                "adapter dropout must lie in [0,1), got {dropout_prob}"
            )));
        }
        let deltas: BTreeMap<_, _> = deltas
            .into_iter()
            .map(|d| (d.target_name.clone(), d))
            .collect();
        if let Some(d) = deltas.values().find(|d| d.rank() != rank) {
            return Err(Error::InvalidConfig(format!(
                "delta {} has rank {}, set rank is {rank}",
                d.target_name,
                d.rank()
            )));
        }
        Ok(Self {
            deltas,
            rank,
            dropout_prob,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dropout_prob(&self) -> f64 {
        self.dropout_prob
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Delta names in the canonical (sorted) order used by activity masks.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.deltas.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&LowRankDelta> {
        self.deltas.get(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.deltas.keys().position(|k| k == name)
    }

    pub fn deltas(&self) -> impl Iterator<Item = &LowRankDelta> {
        self.deltas.values()
    }

    pub fn deltas_mut(&mut self) -> impl Iterator<Item = &mut LowRankDelta> {
        self.deltas.values_mut()
    }

    /// Bytes of every factor in canonical order; equal bytes mean equal
    /// adapters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for d in self.deltas.values() {
            for v in d.a.iter().chain(d.b.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.deltas.values().all(|d| d.b.iter().all(|v| *v == 0.0))
    }
}

/// Attaches zero-initialized adapters of rank `rank` to every matrix whose
/// name passes `targets`. Matrices whose smaller side does not exceed the
/// rank are skipped since a low-rank factorization of them is not low rank.
pub fn inject<'b, B: DenoiserBackend + ?Sized, R: Rng + ?Sized>(
    backend: &'b mut B,
    rank: usize,
    targets: &TargetFilter,
    dropout_prob: f64,
    rng: &mut R,
) -> Result<&'b AdapterSet> {
    if backend.adapters().is_some() {
        return Err(Error::AlreadyInjected);
    }
    if rank == 0 {
        return Err(Error::InvalidConfig("adapter rank must be >= 1".into()));
    }
    let deltas: Vec<LowRankDelta> = backend
        .trainable_matrices()
        .into_iter()
        .filter(|(name, w)| targets.matches(name) && rank < w.nrows().min(w.ncols()))
        .map(|(name, w)| LowRankDelta::zero_init(name, w.nrows(), w.ncols(), rank, rng))
        .collect();
    if deltas.is_empty() {
        return Err(Error::NoInjectionTargets);
    }
    backend.attach_adapters(AdapterSet::new(deltas, rank, dropout_prob)?)?;
    Ok(backend.adapters().expect("just attached"))
}

/// Per-delta on/off decision for one training step: each delta is disabled
/// independently with probability `dropout_prob`. `true` means active.
pub fn dropout_mask<R: Rng + ?Sized>(adapters: &AdapterSet, rng: &mut R) -> Vec<bool> {
    (0..adapters.len())
        .map(|_| rng.random::<f64>() >= adapters.dropout_prob)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
    scale: f32,
}

/// Metadata stored next to the adapter weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterManifest {
    pub rank: usize,
    pub dropout_prob: f64,
    pub targets: Vec<String>,
    pub scale: f32,
    pub training_config_hash: String,
    pub backend_fingerprint: String,
    entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "deltas.bin";

/// Writes `manifest.json` and `deltas.bin` (little-endian f32, A then B for
/// each delta in canonical order) into `dir`.
pub fn save_adapters(
    adapters: &AdapterSet,
    dir: &Path,
    training_config_hash: &str,
    backend_fingerprint: &str,
) -> Result<AdapterManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut offset = 0;
    for d in adapters.deltas() {
        let (rows, cols) = d.shape();
        entries.push(ManifestEntry {
            name: d.target_name.clone(),
            rows,
            cols,
            offset,
            scale: d.scale,
        });
        offset += (rows + cols) * adapters.rank;
    }
    let manifest = AdapterManifest {
        rank: adapters.rank,
        dropout_prob: adapters.dropout_prob,
        targets: adapters.names().map(str::to_string).collect(),
        scale: adapters.deltas().next().map(|d| d.scale).unwrap_or(1.0),
        training_config_hash: training_config_hash.to_string(),
        backend_fingerprint: backend_fingerprint.to_string(),
        entries,
    };
    let weights = dir.join(WEIGHTS_FILE);
    fs::write(&weights, adapters.to_bytes()).map_err(|e| Error::io(&weights, e))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<AdapterManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_adapters(dir: &Path) -> Result<(AdapterSet, AdapterManifest)> {
    let manifest = load_manifest(dir)?;
    let path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let r = manifest.rank;
    let mut deltas = Vec::new();
    for e in &manifest.entries {
        let (na, nb) = (e.rows * r, r * e.cols);
        let end = e.offset + na + nb;
        if end > floats.len() {
            return Err(Error::AdapterMismatch(format!(
                "{} truncated: need {end} values, have {}",
                WEIGHTS_FILE,
                floats.len()
            )));
        }
        let a = Array2::from_shape_vec((e.rows, r), floats[e.offset..e.offset + na].to_vec())
            .expect("shape checked");
        let b = Array2::from_shape_vec((r, e.cols), floats[e.offset + na..end].to_vec())
            .expect("shape checked");
        deltas.push(LowRankDelta {
            target_name: e.name.clone(),
            a,
            b,
            scale: e.scale,
        });
    }
    Ok((AdapterSet::new(deltas, r, manifest.dropout_prob)?, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank8_factor_shapes() {
        let d = LowRankDelta::zero_init("w", 64, 64, 8, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(d.a.dim(), (64, 8));
        assert_eq!(d.b.dim(), (8, 64));
        assert!(d.delta().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn effective_weight_cases() {
        let base = array![[0.5f32, -1.0], [2.0, 3.0]];
        let mut d = LowRankDelta {
            target_name: "w".into(),
            a: array![[1.0f32], [0.0]],
            b: array![[0.0f32, 1.0]],
            scale: 1.0,
        };
        let zero = Array2::zeros((2, 2));
        assert_eq!(effective_weight(&d, &zero).unwrap(), array![[0.0, 1.0], [0.0, 0.0]]);
        d.scale = 0.0;
        assert_eq!(effective_weight(&d, &base).unwrap(), base);
        d.scale = 1.0;
        d.b.fill(0.0);
        assert_eq!(effective_weight(&d, &base).unwrap(), base);
        assert!(matches!(
            effective_weight(&d, &Array2::zeros((3, 2))),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn factor_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut d = LowRankDelta::zero_init("w", 4, 5, 2, &mut rng);
        d.b.mapv_inplace(|_| rng.random::<f32>() - 0.5);
        let g = Array2::from_shape_fn((4, 5), |(i, j)| (i as f32 - j as f32) * 0.3);
        // L = <g, A·B>
        let loss = |d: &LowRankDelta| (&d.delta() * &g).sum() as f64;
        let (da, db) = d.factor_grads(&g);
        let h = 1e-2f32;
        for ((i, j), v) in da.indexed_iter() {
            let mut p = d.clone();
            p.a[[i, j]] += h;
            let mut m = d.clone();
            m.a[[i, j]] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h as f64);
            assert!((fd - *v as f64).abs() < 1e-3, "dA[{i},{j}] {fd} vs {v}");
        }
        for ((i, j), v) in db.indexed_iter() {
            let mut p = d.clone();
            p.b[[i, j]] += h;
            let mut m = d.clone();
            m.b[[i, j]] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h as f64);
            assert!((fd - *v as f64).abs() < 1e-3, "dB[{i},{j}] {fd} vs {v}");
        }
    }

    #[test]
    fn dropout_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let deltas = (0..3).map(|i| LowRankDelta::zero_init(format!("w{i}"), 8, 8, 2, &mut rng));
        let set = AdapterSet::new(deltas, 2, 0.0).unwrap();
        assert!((0..1000).all(|_| dropout_mask(&set, &mut rng).iter().all(|a| *a)));

        let set = AdapterSet { dropout_prob: 0.1, ..set };
        let mut off = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            for (i, active) in dropout_mask(&set, &mut rng).into_iter().enumerate() {
                off[i] += usize::from(!active);
            }
        }
        for o in off {
            let rate = o as f64 / n as f64;
            assert!((0.08..=0.12).contains(&rate), "off-rate {rate}");
        }
    }

    #[test]
    fn target_filter() {
        let f = TargetFilter::default();
        assert!(f.matches("unet.conv_in"));
        assert!(f.matches("text.encoder"));
        assert!(!f.matches("token_table"));
        let f = TargetFilter(vec!["unet.mix".into()]);
        assert!(f.matches("unet.mix"));
        assert!(!f.matches("unet.mix2"));
    }

    #[test]
    fn archive_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = LowRankDelta::zero_init("unet.a", 10, 12, 3, &mut rng);
        d.b.mapv_inplace(|_| rng.random::<f32>());
        let e = LowRankDelta::zero_init("text.b", 6, 7, 3, &mut rng);
        let set = AdapterSet::new([d, e], 3, 0.1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_adapters(&set, dir.path(), "cfg", "fp").unwrap();
        let (loaded, m2) = load_adapters(dir.path()).unwrap();
        assert_eq!(loaded, set);
        assert_eq!(manifest, m2);
        assert_eq!(m2.targets, vec!["text.b".to_string(), "unet.a".to_string()]);
    }
}
