//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Every
//! field of [`TrainConfig`] and [`SynthConfig`] is addressable, plus the
//! harness keys (`data`, `checkpoint`, `noise_rate`, `psi_values`, ...).
//! Values from `--set key=value` overrides replace file values. Parse errors
//! name the offending key and line.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::synth::{NoiseMode, SynthConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// 1-based line in the config file.
    Line(usize),
    /// A `--set key=value` override.
    Override,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Line(n) => write!(f, "line {n}"),
            Source::Override => write!(f, "--set override"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("{origin}: unknown key {key:?}")]
    UnknownKey { key: String, origin: Source },
    #[error("{origin}: duplicate key {key:?} (already set at {first})")]
    DuplicateKey { key: String, origin: Source, first: Source },
    #[error("{origin}: bad value for {key:?}: {msg}")]
    BadValue { key: String, origin: Source, msg: String },
    #[error("missing required key {key:?}")]
    MissingKey { key: String },
    #[error("bad override {0:?} (expected key=value)")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Every key the harness understands, across all subcommands. A single table
/// keeps one config file usable for a whole gen/noise/train/eval pipeline.
pub const KNOWN_KEYS: &[&str] = &[
    // file plumbing
    "data",
    "checkpoint",
    // synthetic generator
    "num_samples",
    "num_annotators",
    "feature_dim",
    "num_factions",
    "faction_boundary_angle",
    "per_annotator_flip_rate",
    "annotations_per_sample",
    // noise injection
    "noise_rate",
    "noise_seed",
    "noise_mode",
    // training
    "epochs",
    "warmup_epochs",
    "learning_rate",
    "momentum",
    "weight_decay",
    "batch_size",
    "psi",
    "mode",
    "mixup",
    "mixup_alpha",
    "mixture_scope",
    "mixture_family",
    "mixture_max_iter",
    "mixture_tol",
    "mt_norm",
    "entropy_penalty_coeff",
    "class_balance_coeff",
    "hidden_dim",
    "encoder_layers",
    "lr_ramp",
    "averaging",
    "variance_scope",
    "seed",
    "seeds",
    // sweep
    "psi_values",
];

/// Parsed key/value pairs with their origins.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, (String, Source)>,
}

impl ConfigMap {
    /// Parses config text. Duplicate and unknown keys are errors.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut map = ConfigMap::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: content.to_string(),
            })?;
            map.insert(key.trim(), value.trim(), Source::Line(line))?;
        }
        Ok(map)
    }

    fn insert(&mut self, key: &str, value: &str, source: Source) -> Result<(), ConfigError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey { key: key.to_string(), origin: source });
        }
        match self.entries.get(key) {
            // overrides replace file values; two file lines (or two overrides
            // of the same key) are configuration mistakes
            Some(&(_, first)) if source == Source::Override && first != Source::Override => {
                self.entries.insert(key.to_string(), (value.to_string(), source));
                Ok(())
            }
            Some(&(_, first)) => {
                Err(ConfigError::DuplicateKey { key: key.to_string(), origin: source, first })
            }
            None => {
                self.entries.insert(key.to_string(), (value.to_string(), source));
                Ok(())
            }
        }
    }

    /// Applies one `key=value` override on top of file values.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
        self.insert(key.trim(), value.trim(), Source::Override)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    /// Parses the value under `key` if present.
    pub fn get<T>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((value, source)) => value.parse().map(Some).map_err(|e: T::Err| {
                ConfigError::BadValue { key: key.to_string(), origin: *source, msg: e.to_string() }
            }),
        }
    }

    pub fn require<T>(&self, key: &str) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        self.get(key)?.ok_or_else(|| ConfigError::MissingKey { key: key.to_string() })
    }

    /// Comma-separated list value, e.g. `psi_values = 0.25, 0.5, 1`.
    pub fn get_list<T>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        let Some((value, source)) = self.entries.get(key) else {
            return Ok(None);
        };
        value
            .split(',')
            .map(|part| {
                part.trim().parse().map_err(|e: T::Err| ConfigError::BadValue {
                    key: key.to_string(),
                    origin: *source,
                    msg: format!("{e} in element {part:?}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// Canonical text form: sorted `key = value` lines, one per key. Two maps
    /// with the same effective configuration canonicalize identically no
    /// matter the file layout or override order.
    pub fn canonical_string(&self) -> String {
        let mut out = String::new();
        for (key, (value, _)) in &self.entries {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(value);
            out.push('\n');
        }
        out
    }

    /// FNV-1a 64 over the canonical form, as fixed-width hex.
    pub fn hash_hex(&self) -> String {
        format!("{:016x}", fnv1a64(self.canonical_string().as_bytes()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, (v, _))| (k.as_str(), v.as_str()))
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

macro_rules! fill {
    ($map:expr, $cfg:expr, { $($key:literal => $field:ident),+ $(,)? }) => {
        $(if let Some(v) = $map.get($key)? { $cfg.$field = v; })+
    };
}

/// Builds a [`TrainConfig`] from defaults plus any present keys; validates.
pub fn train_config(map: &ConfigMap) -> Result<TrainConfig, ConfigError> {
    let mut cfg = TrainConfig::default();
    fill!(map, cfg, {
        "epochs" => epochs,
        "warmup_epochs" => warmup_epochs,
        "learning_rate" => learning_rate,
        "momentum" => momentum,
        "weight_decay" => weight_decay,
        "batch_size" => batch_size,
        "psi" => psi,
        "mode" => mode,
        "mixup" => mixup,
        "mixup_alpha" => mixup_alpha,
        "mixture_scope" => mixture_scope,
        "mixture_family" => mixture_family,
        "mixture_max_iter" => mixture_max_iter,
        "mixture_tol" => mixture_tol,
        "mt_norm" => mt_norm,
        "entropy_penalty_coeff" => entropy_penalty_coeff,
        "class_balance_coeff" => class_balance_coeff,
        "hidden_dim" => hidden_dim,
        "encoder_layers" => encoder_layers,
        "lr_ramp" => lr_ramp,
        "averaging" => averaging,
        "variance_scope" => variance_scope,
        "seed" => seed,
    });
    if let Some(seeds) = map.get_list("seeds")? {
        cfg.seeds = seeds;
    }
    cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

/// Builds a [`SynthConfig`] from defaults plus any present keys; validates.
pub fn synth_config(map: &ConfigMap) -> Result<SynthConfig, ConfigError> {
    let mut cfg = SynthConfig::default();
    fill!(map, cfg, {
        "num_samples" => num_samples,
        "num_annotators" => num_annotators,
        "feature_dim" => feature_dim,
        "num_factions" => num_factions,
        "faction_boundary_angle" => faction_boundary_angle,
        "per_annotator_flip_rate" => per_annotator_flip_rate,
        "annotations_per_sample" => annotations_per_sample,
        "seed" => seed,
    });
    cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub rate: f64,
    pub seed: u64,
    pub mode: NoiseMode,
}

/// Noise-injection parameters. `noise_rate` is required; `noise_seed` falls
/// back to `seed`, then 0; `noise_mode` defaults to sample-level.
pub fn noise_params(map: &ConfigMap) -> Result<NoiseParams, ConfigError> {
    let rate = map.require("noise_rate")?;
    let seed = match map.get("noise_seed")? {
        Some(s) => s,
        None => map.get("seed")?.unwrap_or(0),
    };
    let mode = map.get("noise_mode")?.unwrap_or(NoiseMode::Sample);
    Ok(NoiseParams { rate, seed, mode })
}

/// Sweep grid: required `psi_values` list.
pub fn psi_values(map: &ConfigMap) -> Result<Vec<f64>, ConfigError> {
    let values = map
        .get_list("psi_values")?
        .ok_or_else(|| ConfigError::MissingKey { key: "psi_values".to_string() })?;
    if values.is_empty() {
        return Err(ConfigError::Invalid("psi_values must be non-empty".to_string()));
    }
    Ok(values)
}
