//! INI-style experiment configuration.
//!
//! Sections `[model] [train] [attack] [select] [report]` with a global
//! `seed` key before the first section. Unknown sections or keys are
//! hard errors. Every key has a default, so an absent section is fine.
//!
//! ```ini
//! seed = 42
//!
//! [model]
//! mlp = 784-256-128-10
//!
//! [train]
//! epochs = 10
//! batch_size = 64
//! lr = 0.05
//! momentum = 0.9
//! structure = mixed          ; plain | single | mixed | parallel
//! epsilon = 0.10             ; single-strength training
//! strengths = 0.05,0.10,0.15 ; mixed / parallel
//! size_mode = full           ; full | reduced:0.25
//! static_crafting = false
//! limit = 0                  ; subsample the training set (0 = all)
//!
//! [attack]
//! epsilon = 0.25
//! clamp_lo = 0
//! clamp_hi = 1
//! crafting = self            ; self | substitute:<checkpoint path>
//! dataset = test             ; train | test (craft subcommand)
//!
//! [select]
//! candidates = 0.05,0.10,0.15,0.20,0.25,0.30
//! attack_grid = 0,0.05,0.10,0.15,0.20,0.25,0.30
//! steps = 12
//! walks = 600
//! penalty = 0.01
//! mode = parallel            ; parallel | mixed
//!
//! [report]
//! grid = 0,0.05,0.10,0.15,0.20,0.25,0.30
//! limit = 0                  ; subsample the test set (0 = all)
//! ```

use crate::attack::Crafting;
use crate::data::SizeMode;
use crate::error::{Error, Result};
use crate::nn::NetworkSpec;
use crate::select::SelectMode;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    Plain,
    Single,
    Mixed,
    Parallel,
}

impl std::fmt::Display for Structure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Structure::Plain => "plain",
            Structure::Single => "single",
            Structure::Mixed => "mixed",
            Structure::Parallel => "parallel",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CraftTarget {
    Train,
    Test,
}

/// All experiment settings, populated from defaults and overridden by a
/// config file.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mlp_dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub structure: Structure,
    pub train_epsilon: f64,
    pub strengths: Vec<f64>,
    pub size_mode: SizeMode,
    pub static_crafting: bool,
    pub train_limit: usize,
    pub attack_epsilon: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub crafting: Crafting,
    pub craft_target: CraftTarget,
    pub candidates: Vec<f64>,
    pub select_attack_grid: Vec<f64>,
    pub walk_steps: usize,
    pub walk_count: usize,
    pub penalty: f64,
    pub select_mode: SelectMode,
    pub report_grid: Vec<f64>,
    pub test_limit: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            mlp_dims: vec![784, 256, 128, 10],
            epochs: 10,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            structure: Structure::Plain,
            train_epsilon: 0.10,
            strengths: vec![0.05, 0.10, 0.15],
            size_mode: SizeMode::Full,
            static_crafting: false,
            train_limit: 0,
            attack_epsilon: 0.25,
            clamp_lo: 0.0,
            clamp_hi: 1.0,
            crafting: Crafting::SelfModel,
            craft_target: CraftTarget::Test,
            candidates: vec![0.05, 0.10, 0.15, 0.20, 0.25, 0.30],
            select_attack_grid: vec![0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30],
            walk_steps: 12,
            walk_count: 600,
            penalty: 0.01,
            select_mode: SelectMode::Parallel,
            report_grid: vec![0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30],
            test_limit: 0,
        }
    }
}

fn parse_list(value: &str, key: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number '{v}' in {key}")))
        })
        .collect()
}

fn strip_comment(line: &str) -> &str {
    match line.find(';') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini(&text)
    }

    pub fn from_ini(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(section.as_str(), "model" | "train" | "attack" | "select" | "report")
                {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{section}]",
                        lineno + 1
                    )));
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value).map_err(|e| {
                Error::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let bad_key = || Error::Config(format!("unknown key '{key}' in section [{section}]"));
        let bad_val = |what: &str| Error::Config(format!("bad {what} value: {value}"));
        match (section, key) {
            ("", "seed") => self.seed = value.parse().map_err(|_| bad_val("seed"))?,
            ("", _) => return Err(Error::Config(format!(
                "key '{key}' before any section (only 'seed' is global)"
            ))),
            ("model", "mlp") => {
                self.mlp_dims = value
                    .split('-')
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad_val("mlp dims"))?;
            }
            ("train", "epochs") => self.epochs = value.parse().map_err(|_| bad_val("epochs"))?,
            ("train", "batch_size") => {
                self.batch_size = value.parse().map_err(|_| bad_val("batch_size"))?
            }
            ("train", "lr") => self.lr = value.parse().map_err(|_| bad_val("lr"))?,
            ("train", "momentum") => {
                self.momentum = value.parse().map_err(|_| bad_val("momentum"))?
            }
            ("train", "structure") => {
                self.structure = match value {
                    "plain" => Structure::Plain,
                    "single" => Structure::Single,
                    "mixed" => Structure::Mixed,
                    "parallel" => Structure::Parallel,
                    _ => return Err(bad_val("structure")),
                }
            }
            ("train", "epsilon") => {
                self.train_epsilon = value.parse().map_err(|_| bad_val("epsilon"))?
            }
            ("train", "strengths") => self.strengths = parse_list(value, "strengths")?,
            ("train", "size_mode") => {
                self.size_mode = if value == "full" {
                    SizeMode::Full
                } else if let Some(frac) = value.strip_prefix("reduced:") {
                    SizeMode::Reduced {
                        fraction: frac.parse().map_err(|_| bad_val("size_mode fraction"))?,
                    }
                } else {
                    return Err(bad_val("size_mode"));
                }
            }
            ("train", "static_crafting") => {
                self.static_crafting = value.parse().map_err(|_| bad_val("static_crafting"))?
            }
            ("train", "limit") => {
                self.train_limit = value.parse().map_err(|_| bad_val("limit"))?
            }
            ("attack", "epsilon") => {
                self.attack_epsilon = value.parse().map_err(|_| bad_val("epsilon"))?
            }
            ("attack", "clamp_lo") => {
                self.clamp_lo = value.parse().map_err(|_| bad_val("clamp_lo"))?
            }
            ("attack", "clamp_hi") => {
                self.clamp_hi = value.parse().map_err(|_| bad_val("clamp_hi"))?
            }
            ("attack", "crafting") => {
                self.crafting = if value == "self" {
                    Crafting::SelfModel
                } else if let Some(path) = value.strip_prefix("substitute:") {
                    Crafting::Substitute(path.to_string())
                } else {
                    return Err(bad_val("crafting"));
                }
            }
            ("attack", "dataset") => {
                self.craft_target = match value {
                    "train" => CraftTarget::Train,
                    "test" => CraftTarget::Test,
                    _ => return Err(bad_val("dataset")),
                }
            }
            ("select", "candidates") => self.candidates = parse_list(value, "candidates")?,
            ("select", "attack_grid") => {
                self.select_attack_grid = parse_list(value, "attack_grid")?
            }
            ("select", "steps") => self.walk_steps = value.parse().map_err(|_| bad_val("steps"))?,
            ("select", "walks") => self.walk_count = value.parse().map_err(|_| bad_val("walks"))?,
            ("select", "penalty") => {
                self.penalty = value.parse().map_err(|_| bad_val("penalty"))?
            }
            ("select", "mode") => {
                self.select_mode = match value {
                    "parallel" => SelectMode::Parallel,
                    "mixed" => SelectMode::Mixed,
                    _ => return Err(bad_val("mode")),
                }
            }
            ("report", "grid") => self.report_grid = parse_list(value, "grid")?,
            ("report", "limit") => self.test_limit = value.parse().map_err(|_| bad_val("limit"))?,
            _ => return Err(bad_key()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let ascending = |xs: &[f64], name: &str| -> Result<()> {
            for w in xs.windows(2) {
                if w[1] <= w[0] {
                    return Err(Error::Config(format!("{name} must be strictly ascending")));
                }
            }
            if xs.first().copied().unwrap_or(0.0) < 0.0 {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
            Ok(())
        };
        ascending(&self.strengths, "strengths")?;
        ascending(&self.candidates, "candidates")?;
        ascending(&self.select_attack_grid, "select attack_grid")?;
        ascending(&self.report_grid, "report grid")?;
        if self.train_epsilon < 0.0 || self.attack_epsilon < 0.0 {
            return Err(Error::Config("epsilons must be non-negative".into()));
        }
        Ok(())
    }

    pub fn victim_spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::mlp(&self.mlp_dims)
    }

    /// Canonical text form used for the config digest.
    pub fn canonical(&self) -> String {
        format!("{self:#?}")
    }

    /// Short hex digest identifying the full configuration plus seed.
    pub fn digest(&self) -> String {
        format!("{:08x}", crc32fast::hash(self.canonical().as_bytes()))
    }
}
