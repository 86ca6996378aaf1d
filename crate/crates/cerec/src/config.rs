//! Run configuration: a flat `key = value` file with CLI overrides, range
//! validation up front, and cartesian grid expansion over listed values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CerecError, Result};

/// Hyperparameters and flags for one training/evaluation run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    /// Embedding widths `[d_0, d_1, ..., d_L]`; the last entry is the final
    /// embedding and factor dimension.
    pub dims: Vec<usize>,
    pub leaky_slope: f64,
    /// Recommendation list length used for masking and the margin test.
    pub k: usize,
    pub lr: f64,
    pub reg: f64,
    pub lr_policy: f64,
    pub gamma: f64,
    /// Reinforcement depth (path-action steps per episode).
    pub t: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Warm-start passes of uniform-negative training before co-training.
    pub init_epochs: usize,
    pub pretrain_glm: bool,
    pub baseline_on: bool,
    pub exclude_train_at_eval: bool,
    /// When false, trains with uniform negatives only (the ablation
    /// baseline); the policy is neither sampled nor updated.
    pub counterfactual_negatives: bool,
    pub dns_rounds: usize,
    pub dns_pool: usize,
    pub dns_dim: usize,
    pub dns_lr: f64,
    pub eval_ks: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: None,
            dims: vec![64, 32, 64],
            leaky_slope: 0.01,
            k: 20,
            lr: 0.01,
            reg: 1e-4,
            lr_policy: 0.005,
            gamma: 0.95,
            t: 2,
            epochs: 400,
            patience: 10,
            seed: 42,
            init_epochs: 1,
            pretrain_glm: false,
            baseline_on: false,
            exclude_train_at_eval: true,
            counterfactual_negatives: true,
            dns_rounds: 20,
            dns_pool: 10,
            dns_dim: 16,
            dns_lr: 0.05,
            eval_ks: vec![20, 40, 60, 80],
        }
    }
}

impl RunConfig {
    /// Final embedding / factor dimension.
    pub fn dim(&self) -> usize {
        *self.dims.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CerecError::InvalidConfig(msg));
        if self.dims.len() < 2 {
            return bad("dims must list d_0 and at least one layer".into());
        }
        if self.dims.iter().any(|&d| d == 0 || d > 4096) {
            return bad("every dim must be in 1..=4096".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope must be in (0, 1), got {}", self.leaky_slope));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.reg >= 0.0 && self.reg.is_finite()) {
            return bad(format!("reg must be non-negative, got {}", self.reg));
        }
        if !(self.lr_policy >= 0.0 && self.lr_policy.is_finite()) {
            return bad(format!("lr_policy must be non-negative, got {}", self.lr_policy));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(1..=5).contains(&self.t) {
            return bad(format!("t must be in 1..=5, got {}", self.t));
        }
        if self.epochs > 400 {
            return bad(format!("epochs must be <= 400, got {}", self.epochs));
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if self.dns_pool == 0 || self.dns_dim == 0 {
            return bad("dns_pool and dns_dim must be >= 1".into());
        }
        if !(self.dns_lr > 0.0) {
            return bad("dns_lr must be positive".into());
        }
        if self.eval_ks.is_empty() || self.eval_ks.iter().any(|&k| k == 0) {
            return bad("eval_ks must list positive cutoffs".into());
        }
        Ok(())
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Raw parsed config: every value keeps its list form so grids expand later.
#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

const GRID_KEYS: [&str; 5] = ["lr", "reg", "lr_policy", "gamma", "t"];

impl ConfigFile {
    pub fn parse(path: &Path) -> Result<ConfigFile> {
        let body = fs::read_to_string(path)
            .map_err(|e| CerecError::Io { path: path.to_path_buf(), source: e })?;
        let mut entries = BTreeMap::new();
        for (idx, raw) in body.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CerecError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: "expected `key = value`".into(),
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ConfigFile { entries })
    }

    /// CLI `key=value` overrides take precedence over the file.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| {
                CerecError::InvalidArgument(format!("override `{o}` must be key=value"))
            })?;
            self.entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    /// Expand every grid-searchable key (`lr`, `reg`, `lr_policy`, `gamma`,
    /// `t`) into the cartesian product of its comma-separated values.
    pub fn expand(&self) -> Result<Vec<RunConfig>> {
        let mut combos: Vec<BTreeMap<String, String>> = vec![BTreeMap::new()];
        for (key, value) in &self.entries {
            let options: Vec<&str> = if GRID_KEYS.contains(&key.as_str()) {
                value.split(',').map(str::trim).collect()
            } else {
                vec![value.as_str()]
            };
            let mut next = Vec::with_capacity(combos.len() * options.len());
            for combo in &combos {
                for opt in &options {
                    let mut c = combo.clone();
                    c.insert(key.clone(), opt.to_string());
                    next.push(c);
                }
            }
            combos = next;
        }
        combos.into_iter().map(|c| build_config(&c)).collect()
    }

    /// Single config; errors when any grid key lists multiple values.
    pub fn single(&self) -> Result<RunConfig> {
        let configs = self.expand()?;
        if configs.len() != 1 {
            return Err(CerecError::InvalidConfig(format!(
                "expected a single configuration, the grid expands to {}",
                configs.len()
            )));
        }
        Ok(configs.into_iter().next().unwrap())
    }
}

fn build_config(entries: &BTreeMap<String, String>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (key, value) in entries {
        set_field(&mut cfg, key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set_field(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let bad = |what: &str| {
        CerecError::InvalidConfig(format!("bad value `{value}` for `{key}` (expected {what})"))
    };
    match key {
        "data_dir" => cfg.data_dir = Some(PathBuf::from(value)),
        "dims" => {
            cfg.dims = value
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("comma-separated integers"))?;
        }
        "leaky_slope" => cfg.leaky_slope = value.parse().map_err(|_| bad("a float"))?,
        "k" => cfg.k = value.parse().map_err(|_| bad("an integer"))?,
        "lr" => cfg.lr = value.parse().map_err(|_| bad("a float"))?,
        "reg" => cfg.reg = value.parse().map_err(|_| bad("a float"))?,
        "lr_policy" => cfg.lr_policy = value.parse().map_err(|_| bad("a float"))?,
        "gamma" => cfg.gamma = value.parse().map_err(|_| bad("a float"))?,
        "t" => cfg.t = value.parse().map_err(|_| bad("an integer"))?,
        "epochs" => cfg.epochs = value.parse().map_err(|_| bad("an integer"))?,
        "patience" => cfg.patience = value.parse().map_err(|_| bad("an integer"))?,
        "seed" => cfg.seed = value.parse().map_err(|_| bad("an integer"))?,
        "init_epochs" => cfg.init_epochs = value.parse().map_err(|_| bad("an integer"))?,
        "pretrain_glm" => cfg.pretrain_glm = parse_bool(value).ok_or_else(|| bad("a bool"))?,
        "baseline_on" => cfg.baseline_on = parse_bool(value).ok_or_else(|| bad("a bool"))?,
        "exclude_train_at_eval" => {
            cfg.exclude_train_at_eval = parse_bool(value).ok_or_else(|| bad("a bool"))?
        }
        "counterfactual_negatives" => {
            cfg.counterfactual_negatives = parse_bool(value).ok_or_else(|| bad("a bool"))?
        }
        "dns_rounds" => cfg.dns_rounds = value.parse().map_err(|_| bad("an integer"))?,
        "dns_pool" => cfg.dns_pool = value.parse().map_err(|_| bad("an integer"))?,
        "dns_dim" => cfg.dns_dim = value.parse().map_err(|_| bad("an integer"))?,
        "dns_lr" => cfg.dns_lr = value.parse().map_err(|_| bad("a float"))?,
        "eval_ks" => {
            cfg.eval_ks = value
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("comma-separated integers"))?;
        }
        other => {
            return Err(CerecError::InvalidConfig(format!("unknown config key `{other}`")));
        }
    }
    Ok(())
}

fn parse_bool(value: &str) -> Option<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}
