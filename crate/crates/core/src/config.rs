//! Experiment configuration: `key = value` lines, overridable from the CLI.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::data::ExposureParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    Invalid { key: String, value: String, reason: String },
    #[error("cannot read config: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Independent,
    F2s,
    S2fFull,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Independent, Variant::F2s, Variant::S2fFull];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Independent => "independent",
            Variant::F2s => "f2s",
            Variant::S2fFull => "s2f_full",
        }
    }

    /// Devices upload negative memory and the cloud consumes it.
    pub fn uploads(self) -> bool {
        self != Variant::Independent
    }

    /// The cloud sends interest vectors and `GRU_n` back down.
    pub fn downloads(self) -> bool {
        self == Variant::S2fFull
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| "expected independent, f2s or s2f_full".to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    Ml1m,
    Tsv,
    Synthetic,
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ml1m" => Ok(Self::Ml1m),
            "tsv" => Ok(Self::Tsv),
            "synthetic" => Ok(Self::Synthetic),
            _ => Err("expected ml1m, tsv or synthetic".into()),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ml1m => "ml1m",
            Self::Tsv => "tsv",
            Self::Synthetic => "synthetic",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExposureSource {
    Simulated,
    /// Use the dataset's own exposure rows.
    Column,
}

impl FromStr for ExposureSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "simulated" => Ok(Self::Simulated),
            "column" => Ok(Self::Column),
            _ => Err("expected simulated or column".into()),
        }
    }
}

impl fmt::Display for ExposureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Simulated => "simulated",
            Self::Column => "column",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Data file; ignored for the synthetic format.
    pub dataset: String,
    pub format: DatasetFormat,
    pub dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
    /// Layers in each prediction head.
    pub mlp_layers: usize,
    pub threshold: u32,
    pub slow_epochs: usize,
    pub fast_epochs: usize,
    pub patience: usize,
    /// Number of seeds, starting at `seed`.
    pub seeds: usize,
    pub seed: u64,
    pub variants: Vec<Variant>,
    pub pool_size: usize,
    pub expose_k: usize,
    pub exposure_source: ExposureSource,
    pub n_train_neg: usize,
    pub n_eval_neg: usize,
    pub ks: Vec<usize>,
    /// 0 keeps every user.
    pub max_users: usize,
    pub max_history: usize,
    pub slow_positions: usize,
    pub min_len: usize,
    pub synthetic_users: usize,
    pub synthetic_items: usize,
    pub synthetic_clusters: usize,
    pub synthetic_len: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: String::new(),
            format: DatasetFormat::Ml1m,
            dim: 32,
            batch_size: 256,
            lr: 5e-4,
            l2: 1e-4,
            mlp_layers: 3,
            threshold: 5,
            slow_epochs: 10,
            fast_epochs: 5,
            patience: 2,
            seeds: 3,
            seed: 1,
            variants: Variant::ALL.to_vec(),
            pool_size: 20,
            expose_k: 4,
            exposure_source: ExposureSource::Simulated,
            n_train_neg: 1,
            n_eval_neg: 100,
            ks: vec![1, 5, 10],
            max_users: 0,
            max_history: 50,
            slow_positions: 50,
            min_len: 20,
            synthetic_users: 200,
            synthetic_items: 100,
            synthetic_clusters: 4,
            synthetic_len: 25,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
where
    V::Err: fmt::Display,
{
    value.parse().map_err(|e: V::Err| ConfigError::Invalid {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>, ConfigError>
where
    V::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<V: fmt::Display>(xs: &[V]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 28] = [
        "dataset",
        "format",
        "dim",
        "batch_size",
        "lr",
        "l2",
        "mlp_layers",
        "threshold",
        "slow_epochs",
        "fast_epochs",
        "patience",
        "seeds",
        "seed",
        "variants",
        "pool_size",
        "expose_k",
        "exposure_source",
        "n_train_neg",
        "n_eval_neg",
        "ks",
        "max_users",
        "max_history",
        "slow_positions",
        "min_len",
        "synthetic_users",
        "synthetic_items",
        "synthetic_clusters",
        "synthetic_len",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = v.to_string(),
            "format" => self.format = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "l2" => self.l2 = parse(key, v)?,
            "mlp_layers" => self.mlp_layers = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "slow_epochs" => self.slow_epochs = parse(key, v)?,
            "fast_epochs" => self.fast_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "seeds" => self.seeds = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "variants" | "variant" => self.variants = parse_list(key, v)?,
            "pool_size" => self.pool_size = parse(key, v)?,
            "expose_k" => self.expose_k = parse(key, v)?,
            "exposure_source" => self.exposure_source = parse(key, v)?,
            "n_train_neg" => self.n_train_neg = parse(key, v)?,
            "n_eval_neg" => self.n_eval_neg = parse(key, v)?,
            "ks" => self.ks = parse_list(key, v)?,
            "max_users" => self.max_users = parse(key, v)?,
            "max_history" => self.max_history = parse(key, v)?,
            "slow_positions" => self.slow_positions = parse(key, v)?,
            "min_len" => self.min_len = parse(key, v)?,
            "synthetic_users" => self.synthetic_users = parse(key, v)?,
            "synthetic_items" => self.synthetic_items = parse(key, v)?,
            "synthetic_clusters" => self.synthetic_clusters = parse(key, v)?,
            "synthetic_len" => self.synthetic_len = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then `overrides` in order; validated.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Io(format!("{}: {e}", p.display())))?;
            cfg.apply_str(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, value: String, reason: &str| {
            Err(ConfigError::Invalid {
                key: key.into(),
                value,
                reason: reason.into(),
            })
        };
        let positive: [(&str, usize); 11] = [
            ("dim", self.dim),
            ("batch_size", self.batch_size),
            ("mlp_layers", self.mlp_layers),
            ("threshold", self.threshold as usize),
            ("slow_epochs", self.slow_epochs),
            ("fast_epochs", self.fast_epochs),
            ("seeds", self.seeds),
            ("pool_size", self.pool_size),
            ("n_train_neg", self.n_train_neg),
            ("n_eval_neg", self.n_eval_neg),
            ("max_history", self.max_history),
        ];
        for (key, v) in positive {
            if v == 0 {
                return bad(key, v.to_string(), "must be positive");
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", self.lr.to_string(), "must be positive");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2", self.l2.to_string(), "must be non-negative");
        }
        if self.expose_k > self.pool_size {
            return bad("expose_k", self.expose_k.to_string(), "cannot exceed pool_size");
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks", join(&self.ks), "need one or more positive cutoffs");
        }
        if self.variants.is_empty() {
            return bad("variants", String::new(), "need at least one variant");
        }
        if self.min_len < 11 {
            return bad("min_len", self.min_len.to_string(), "must leave at least one slow-phase item (>= 11)");
        }
        if self.format == DatasetFormat::Synthetic
            && (self.synthetic_clusters == 0 || self.synthetic_items < self.synthetic_clusters)
        {
            return bad("synthetic_clusters", self.synthetic_clusters.to_string(), "need 1..=synthetic_items clusters");
        }
        if self.format != DatasetFormat::Synthetic && self.dataset.is_empty() {
            return bad("dataset", String::new(), "a data file is required for this format");
        }
        Ok(())
    }

    /// Hidden widths of a head with `mlp_layers` layers: 64, 32, 16, ...
    pub fn head_hidden(&self) -> Vec<usize> {
        (0..self.mlp_layers - 1).map(|i| (64usize >> i).max(8)).collect()
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn exposure(&self) -> ExposureParams {
        ExposureParams {
            pool_size: self.pool_size,
            expose_k: self.expose_k,
        }
    }

    /// The config as `key = value` lines; `apply_str` on the output round-trips.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("dataset", self.dataset.clone());
        put("format", self.format.to_string());
        put("dim", self.dim.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put("l2", self.l2.to_string());
        put("mlp_layers", self.mlp_layers.to_string());
        put("threshold", self.threshold.to_string());
        put("slow_epochs", self.slow_epochs.to_string());
        put("fast_epochs", self.fast_epochs.to_string());
        put("patience", self.patience.to_string());
        put("seeds", self.seeds.to_string());
        put("seed", self.seed.to_string());
        put("variants", join(&self.variants));
        put("pool_size", self.pool_size.to_string());
        put("expose_k", self.expose_k.to_string());
        put("exposure_source", self.exposure_source.to_string());
        put("n_train_neg", self.n_train_neg.to_string());
        put("n_eval_neg", self.n_eval_neg.to_string());
        put("ks", join(&self.ks));
        put("max_users", self.max_users.to_string());
        put("max_history", self.max_history.to_string());
        put("slow_positions", self.slow_positions.to_string());
        put("min_len", self.min_len.to_string());
        put("synthetic_users", self.synthetic_users.to_string());
        put("synthetic_items", self.synthetic_items.to_string());
        put("synthetic_clusters", self.synthetic_clusters.to_string());
        put("synthetic_len", self.synthetic_len.to_string());
        s
    }
}
