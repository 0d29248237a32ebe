//! Flat, versioned `key = value` run configuration.
//!
//! ```text
//! insure-config v1
//! # comments and blank lines are ignored
//! n_domains = 4
//! gamma = 0.005
//! ```
//!
//! Every key has a default, so a file only lists what it changes. Unknown
//! keys are rejected. [`RunConfig::to_text`] writes the fully resolved
//! document and [`RunConfig::hash`] is the SHA-256 of that text.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::SuiteConfig;
use crate::losses::{DgMode, LossWeights, Purification};
use crate::model::MaskMode;
use crate::synth::{Mixing, RegionSpec};
use crate::trainer::TrainConfig;

pub const CONFIG_HEADER: &str = "insure-config v1";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub n_domains: usize,
    pub n_classes: usize,
    pub n_per_domain: usize,
    pub data_seed: u64,
    pub region: RegionSpec,
    pub probe: bool,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub infer_mask: MaskMode,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    /// The desk-scale benchmark: 4 domains × 4 classes, 8 dims per region,
    /// noise 0.3, identity encoder. Sparsity weight and learning rates are
    /// scaled for 32-dim features (see the README).
    fn default() -> Self {
        Self {
            n_domains: 4,
            n_classes: 4,
            n_per_domain: 400,
            data_seed: 0,
            region: RegionSpec::default(),
            probe: true,
            hidden: vec![64, 64],
            train: TrainConfig {
                lr_mask: 1e-2,
                lr_rest: 1e-3,
                weights: LossWeights {
                    gamma: 0.005,
                    ..LossWeights::multi_dg()
                },
                ..TrainConfig::default()
            },
            infer_mask: MaskMode::Hard,
            seeds: (0..5).collect(),
        }
    }
}

pub fn mode_str(m: DgMode) -> &'static str {
    match m {
        DgMode::Multi => "multi-dg",
        DgMode::Single => "single-dg",
    }
}

pub fn parse_mode(s: &str) -> Option<DgMode> {
    match s {
        "multi-dg" | "multi" => Some(DgMode::Multi),
        "single-dg" | "single" => Some(DgMode::Single),
        _ => None,
    }
}

fn mixing_str(m: Mixing) -> &'static str {
    match m {
        Mixing::Identity => "identity",
        Mixing::RandomOrthogonal => "random-orthogonal",
    }
}

fn purification_str(p: Option<Purification>) -> &'static str {
    match p {
        None => "none",
        Some(Purification::Label) => "label",
        Some(Purification::Domain) => "domain",
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// The trainer's stock optimization settings (γ = 1, rates 3.5e-4 and
    /// 5e-5) on the same benchmark data.
    pub fn stock_training() -> Self {
        Self {
            train: TrainConfig::default(),
            ..Self::default()
        }
    }

    pub fn suite(&self, jobs: usize) -> SuiteConfig {
        SuiteConfig {
            train: self.train.clone(),
            probe: self.probe,
            hidden: self.hidden.clone(),
            infer_mask: self.infer_mask,
            seeds: self.seeds.clone(),
            jobs,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.region.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.n_classes < 2 {
            return Err(ConfigError::Invalid("n_classes must be at least 2".into()));
        }
        if self.n_domains == 0 {
            return Err(ConfigError::Invalid("n_domains must be positive".into()));
        }
        if self.n_per_domain == 0 || !self.n_per_domain.is_multiple_of(self.n_classes) {
            return Err(ConfigError::Invalid(format!(
                "n_per_domain ({}) must be a positive multiple of n_classes ({})",
                self.n_per_domain, self.n_classes
            )));
        }
        if !self.probe && self.hidden.contains(&0) {
            return Err(ConfigError::Invalid("hidden widths must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must list at least one seed".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let r = &self.region;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("n_domains", self.n_domains.to_string());
        kv("n_classes", self.n_classes.to_string());
        kv("n_per_domain", self.n_per_domain.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("k_i", r.k_i.to_string());
        kv("k_ii", r.k_ii.to_string());
        kv("k_iii", r.k_iii.to_string());
        kv("k_iv", r.k_iv.to_string());
        kv("noise_std", r.noise_std.to_string());
        kv("mixing", mixing_str(r.mixing).into());
        kv("class_separation", r.class_separation.to_string());
        kv("class_scale", r.class_scale.to_string());
        kv("domain_scale", r.domain_scale.to_string());
        kv("const_scale", r.const_scale.to_string());
        kv("probe", self.probe.to_string());
        kv("hidden", join(&self.hidden));
        kv("steps", t.steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr_mask", t.lr_mask.to_string());
        kv("lr_rest", t.lr_rest.to_string());
        kv("alpha", t.weights.alpha.to_string());
        kv("beta", t.weights.beta.to_string());
        kv("gamma", t.weights.gamma.to_string());
        kv("eps_ib", t.weights.eps_ib.to_string());
        kv("sma_start", t.sma_start.to_string());
        kv("mode", mode_str(t.mode).into());
        kv("seed", t.seed.to_string());
        kv("msr", t.terms.msr.to_string());
        kv("it", t.terms.it.to_string());
        kv("purification", purification_str(t.terms.purification).into());
        kv("train_mask", t.train_mask.as_str().into());
        kv("infer_mask", self.infer_mask.as_str().into());
        kv("stochastic", t.stochastic.to_string());
        kv("adam_beta1", t.adam.beta1.to_string());
        kv("adam_beta2", t.adam.beta2.to_string());
        kv("adam_eps", t.adam.eps.to_string());
        kv("seeds", join(&self.seeds));
        format!("{CONFIG_HEADER}\n{out}")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let header = lines.by_ref().find(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match header {
            Some((_, l)) if l == CONFIG_HEADER => {}
            Some((n, l)) => {
                return Err(ConfigError::Parse {
                    line: n,
                    message: format!("expected version line {CONFIG_HEADER:?}, found {l:?}"),
                })
            }
            None => {
                return Err(ConfigError::Parse {
                    line: 1,
                    message: format!("missing version line {CONFIG_HEADER:?}"),
                })
            }
        }
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in lines {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: n,
                message: "expected `key = value`".into(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::Parse {
                    line: n,
                    message: format!("duplicate key {k:?}"),
                });
            }
            cfg.set(k, v).map_err(|message| ConfigError::Parse { line: n, message })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, String> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| num(key, x.trim())).collect()
        }
        let t = &mut self.train;
        let r = &mut self.region;
        match key {
            "n_domains" => self.n_domains = num(key, value)?,
            "n_classes" => self.n_classes = num(key, value)?,
            "n_per_domain" => self.n_per_domain = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "k_i" => r.k_i = num(key, value)?,
            "k_ii" => r.k_ii = num(key, value)?,
            "k_iii" => r.k_iii = num(key, value)?,
            "k_iv" => r.k_iv = num(key, value)?,
            "noise_std" => r.noise_std = num(key, value)?,
            "mixing" => {
                r.mixing = match value {
                    "identity" => Mixing::Identity,
                    "random-orthogonal" => Mixing::RandomOrthogonal,
                    _ => return Err(format!("mixing must be identity or random-orthogonal, got {value:?}")),
                }
            }
            "class_separation" => r.class_separation = num(key, value)?,
            "class_scale" => r.class_scale = num(key, value)?,
            "domain_scale" => r.domain_scale = num(key, value)?,
            "const_scale" => r.const_scale = num(key, value)?,
            "probe" => self.probe = num(key, value)?,
            "hidden" => self.hidden = list(key, value)?,
            "steps" => t.steps = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "lr_mask" => t.lr_mask = num(key, value)?,
            "lr_rest" => t.lr_rest = num(key, value)?,
            "alpha" => t.weights.alpha = num(key, value)?,
            "beta" => t.weights.beta = num(key, value)?,
            "gamma" => t.weights.gamma = num(key, value)?,
            "eps_ib" => t.weights.eps_ib = num(key, value)?,
            "sma_start" => t.sma_start = num(key, value)?,
            "mode" => t.mode = parse_mode(value).ok_or_else(|| format!("mode must be multi-dg or single-dg, got {value:?}"))?,
            "seed" => t.seed = num(key, value)?,
            "msr" => t.terms.msr = num(key, value)?,
            "it" => t.terms.it = num(key, value)?,
            "purification" => {
                t.terms.purification = match value {
                    "none" => None,
                    "label" => Some(Purification::Label),
                    "domain" => Some(Purification::Domain),
                    _ => return Err(format!("purification must be label, domain or none, got {value:?}")),
                }
            }
            "train_mask" => t.train_mask = MaskMode::parse(value).ok_or_else(|| format!("train_mask must be hard or soft, got {value:?}"))?,
            "infer_mask" => self.infer_mask = MaskMode::parse(value).ok_or_else(|| format!("infer_mask must be hard or soft, got {value:?}"))?,
            "stochastic" => t.stochastic = num(key, value)?,
            "adam_beta1" => t.adam.beta1 = num(key, value)?,
            "adam_beta2" => t.adam.beta2 = num(key, value)?,
            "adam_eps" => t.adam.eps = num(key, value)?,
            "seeds" => self.seeds = list(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Switches to single-source training with its loss weights.
    pub fn use_single_dg(&mut self) {
        let single = TrainConfig::single_dg();
        self.train.mode = DgMode::Single;
        self.train.weights.alpha = single.weights.alpha;
        self.train.weights.eps_ib = single.weights.eps_ib;
    }
}
