//! Layered configuration: defaults, then a TOML file, then `SCENEFILL_*`
//! environment variables, then command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use scenefill_core::bench::{BenchConfig, DEFAULT_RATES};
use scenefill_core::diffusion::{PretrainConfig, ToyBackendConfig};
use scenefill_core::metrics::MetricSelection;
use scenefill_core::sampler::InferenceConfig;
use scenefill_core::select::ClassicalParams;
use scenefill_core::train::TrainConfig;

use crate::Failure;

pub const ENV_PREFIX: &str = "SCENEFILL_";

/// Keys whose defaults are the reference hyper-parameters of the method.
const REFERENCE_KEYS: [&str; 8] = [
    "train.iterations",
    "train.batch_size",
    "train.lr_denoiser",
    "train.lr_text_encoder",
    "train.rank",
    "train.dropout_prob",
    "inference.num_candidates",
    "inference.blur_radius_px",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    /// `toy` (randomly initialized, seeded by `toy_seed`) or
    /// `pretrained:<checkpoint.json>`.
    pub backend: String,
    pub toy_seed: u64,
    pub toy: ToyBackendConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub matcher: ClassicalParams,
    pub metrics: MetricSelection,
    /// Fraction of lowest-ranked candidates `complete` drops.
    pub filter_rate: f64,
    /// Filtering rates swept by `bench`.
    pub rates: Vec<f64>,
    /// Scenes `bench` runs concurrently; 0 uses every core.
    pub workers: usize,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            backend: "toy".into(),
            toy_seed: 0,
            toy: ToyBackendConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            matcher: ClassicalParams::default(),
            metrics: MetricSelection::default(),
            filter_rate: 0.0,
            rates: DEFAULT_RATES.to_vec(),
            workers: 1,
        }
    }
}

impl CliConfig {
    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            train: self.train.clone(),
            inference: self.inference.clone(),
            matcher: self.matcher.clone(),
            metrics: self.metrics.clone(),
            rates: self.rates.clone(),
            workers: self.workers,
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::config(msg)
}

fn to_table(config: &CliConfig) -> Table {
    Table::try_from(config).expect("config serializes to TOML")
}

/// Parses a scalar or array the way it would appear on the right of `=` in
/// TOML; anything else is taken as a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets a dotted key. Intermediate tables must exist; the leaf may be new
/// (optional fields are omitted from the serialized defaults) and is then
/// checked when the table is deserialized.
pub fn set_key(table: &mut Table, key: &str, raw: &str) -> Result<(), Failure> {
    let parts: Vec<&str> = key.split('.').collect();
    let (leaf, path) = parts.split_last().ok_or_else(|| invalid("empty key"))?;
    let mut cur = table;
    for p in path {
        cur = match cur.get_mut(*p) {
            Some(Value::Table(t)) => t,
            _ => return Err(invalid(format!("unknown config key {key:?}"))),
        };
    }
    let mut value = parse_value(raw);
    match cur.get(*leaf) {
        None if !known_optional(key) => return Err(invalid(format!("unknown config key {key:?}"))),
        // Keep strings that happen to look like numbers or booleans.
        Some(Value::String(_)) if !value.is_str() => value = Value::String(raw.to_string()),
        _ => {}
    }
    cur.insert((*leaf).to_string(), value);
    Ok(())
}

/// Optional keys absent from the serialized defaults.
fn known_optional(key: &str) -> bool {
    key == "inference.blur_radius_px"
}

fn from_table(table: Table, origin: &str) -> Result<CliConfig, Failure> {
    CliConfig::deserialize(Value::Table(table)).map_err(|e| invalid(format!("{origin}: {e}")))
}

/// Loads the file (if any) and applies environment overrides and `sets`
/// in that order.
pub fn load(file: Option<&Path>, env: &[(String, String)], sets: &[(String, String)]) -> Result<CliConfig, Failure> {
    let base = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str::<CliConfig>(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?
        }
        None => CliConfig::default(),
    };
    let mut table = to_table(&base);
    for (name, raw) in env {
        let key = env_key(name).ok_or_else(|| invalid(format!("{name} is not a config variable")))?;
        set_key(&mut table, &key, raw).map_err(|e| invalid(format!("{name}: {}", e.message)))?;
    }
    for (key, raw) in sets {
        set_key(&mut table, key, raw)?;
    }
    from_table(table, "config override")
}

/// `SCENEFILL_TRAIN__LR_DENOISER` → `train.lr_denoiser`.
pub fn env_key(name: &str) -> Option<String> {
    let rest = name.strip_prefix(ENV_PREFIX)?;
    if rest.is_empty() {
        return None;
    }
    Some(rest.to_ascii_lowercase().replace("__", "."))
}

/// Every `SCENEFILL_*` variable in the process environment, sorted.
pub fn env_overrides() -> Vec<(String, String)> {
    let mut vars: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    vars
}

fn render(value: &Value) -> String {
    match value {
        Value::Float(f) => {
            let narrow = *f as f32;
            if narrow as f64 == *f {
                format!("{narrow:?}")
            } else {
                format!("{f:?}")
            }
        }
        Value::Array(items) => format!("[{}]", items.iter().map(render).collect::<Vec<_>>().join(", ")),
        other => other.to_string(),
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, String)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            v => out.push((key, render(v))),
        }
    }
}

/// Every config key with its default, for `--help`.
pub fn key_listing() -> String {
    let mut rows = Vec::new();
    flatten("", &to_table(&CliConfig::default()), &mut rows);
    rows.push(("inference.blur_radius_px".into(), "unset (8 px per 512 px of width)".into()));
    rows.sort();
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from(
        "Configuration keys (TOML file via --config, SCENEFILL_<SECTION>__<KEY> environment variables,\n\
         or --set key=value; later sources win, dedicated flags win over all):\n",
    );
    for (k, v) in rows {
        let note = if REFERENCE_KEYS.contains(&k.as_str()) { "  (reference setting)" } else { "" };
        out.push_str(&format!("  {k:width$} = {v}{note}\n"));
    }
    out
}
