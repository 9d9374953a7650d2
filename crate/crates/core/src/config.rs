//! Flat `key = value` run configuration.
//!
//! One setting per line; `#` starts a comment. `profile` selects the defaults
//! (`toy` or `paper`) and may appear on any line; every other key overrides a
//! single default. Unknown and repeated keys are rejected.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{Family, TaskConfig};
use crate::error::{Error, Result};
use crate::hair::{parse_split, ModelConfig};
use crate::train::{Budget, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Toy,
    Paper,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "toy" => Ok(Self::Toy),
            "paper" => Ok(Self::Paper),
            _ => Err(format!("expected `toy` or `paper`, got {s:?}")),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Toy => "toy",
            Self::Paper => "paper",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub degradations: Vec<String>,
    pub eval_only: Vec<String>,
    pub noise_sigmas: Vec<f64>,
    pub train_images: usize,
    pub val_images: usize,
    pub image_size: usize,
    pub seed: u64,
    pub clean_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathSettings {
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSettings,
    pub paths: PathSettings,
}

/// Every recognised key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "profile",
    "model.channels",
    "model.blocks",
    "model.heads",
    "model.boxes",
    "model.expansion",
    "model.split",
    "train.seed",
    "train.steps",
    "train.epochs",
    "train.batch",
    "train.patch",
    "train.flips",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.weight_decay",
    "train.eval_every",
    "data.degradations",
    "data.eval_only",
    "data.noise_sigmas",
    "data.train_images",
    "data.val_images",
    "data.image_size",
    "data.seed",
    "data.clean_dir",
    "paths.out_dir",
    "paths.checkpoint",
    "paths.log",
];

const MAX_LEVELS: usize = 5;
const MAX_CHANNELS: usize = 512;
const MAX_IMAGE: usize = 4096;

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        let smoke = TaskConfig::smoke();
        match profile {
            Profile::Toy => Self {
                profile,
                model: ModelConfig::toy(),
                train: TrainConfig::toy(),
                data: DataSettings {
                    degradations: vec!["noise".into(), "haze".into()],
                    eval_only: Vec::new(),
                    noise_sigmas: vec![25.0],
                    train_images: smoke.train_images,
                    val_images: smoke.val_images,
                    image_size: smoke.image_size,
                    seed: smoke.seed,
                    clean_dir: None,
                },
                paths: PathSettings::default(),
            },
            Profile::Paper => Self {
                profile,
                model: ModelConfig::paper(),
                train: TrainConfig::paper(),
                data: DataSettings {
                    degradations: vec!["noise".into(), "rain".into(), "haze".into()],
                    eval_only: Vec::new(),
                    noise_sigmas: vec![15.0, 25.0, 50.0],
                    train_images: 800,
                    val_images: 100,
                    image_size: 256,
                    seed: 1,
                    clean_dir: None,
                },
                paths: PathSettings::default(),
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(config_err(line, clip(body), "expected `key = value`"));
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(config_err(line, clip(key), "unknown key"));
            }
            if let Some(first) = seen.insert(key, line) {
                return Err(config_err(line, key, format!("already set on line {first}")));
            }
            entries.push((line, key, value));
        }

        let profile = match entries.iter().find(|e| e.1 == "profile") {
            Some(&(line, key, value)) => value.parse().map_err(|r| config_err(line, key, r))?,
            None => Profile::Toy,
        };
        let mut cfg = Self::defaults(profile);
        let mut split_text = None;
        for &(line, key, value) in &entries {
            match key {
                "profile" => {}
                "model.split" => split_text = Some(value),
                _ => cfg.set(key, value).map_err(|r| config_err(line, key, r))?,
            }
        }
        if seen.contains_key("train.steps") && seen.contains_key("train.epochs") {
            return Err(config_err(seen["train.epochs"], "train.epochs", "set either train.steps or train.epochs"));
        }
        let line_of = |key: &str| seen.get(key).copied().unwrap_or(0);
        if let Some(text) = split_text {
            let stages = 2 * cfg.model.levels() - 1;
            cfg.model.split = parse_split(text, stages).map_err(|e| config_err(line_of("model.split"), "model.split", e.to_string()))?;
        }
        cfg.validate(&line_of)?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "model.channels" => m.base_channels = ranged(v, 1, MAX_CHANNELS)?,
            "model.blocks" => m.blocks = ranged_list(v, 1, 32)?,
            "model.heads" => m.heads = ranged_list(v, 1, MAX_CHANNELS)?,
            "model.boxes" => m.box_sizes = ranged_list(v, 1, 64)?,
            "model.expansion" => m.ffn_expansion = real(v, 0.0, 8.0, false)?,
            "train.seed" => t.seed = integer(v)?,
            "train.steps" => t.budget = Budget::Steps(ranged(v, 0, 100_000_000)?),
            "train.epochs" => t.budget = Budget::Epochs(ranged(v, 1, 1_000_000)?),
            "train.batch" => t.batch = ranged(v, 1, 1024)?,
            "train.patch" => t.patch = ranged(v, 8, MAX_IMAGE)?,
            "train.flips" => t.flips = v.parse().map_err(|_| format!("expected true or false, got {v:?}"))?,
            "train.lr" => t.lr = real(v, 0.0, 1.0, true)?,
            "train.beta1" => t.optim.beta1 = real(v, 0.0, 1.0, true).and_then(below_one)?,
            "train.beta2" => t.optim.beta2 = real(v, 0.0, 1.0, true).and_then(below_one)?,
            "train.eps" => t.optim.eps = real(v, 0.0, 1.0, false)?,
            "train.weight_decay" => t.optim.weight_decay = real(v, 0.0, 1.0, true)?,
            "train.eval_every" => t.eval_every = ranged(v, 0, usize::MAX)?,
            "data.degradations" => d.degradations = names(v)?,
            "data.eval_only" => d.eval_only = if v.is_empty() { Vec::new() } else { names(v)? },
            "data.noise_sigmas" => {
                d.noise_sigmas = list(v)?
                    .into_iter()
                    .map(|s| real(s, 0.0, 255.0, true))
                    .collect::<Result<_, _>>()?
            }
            "data.train_images" => d.train_images = ranged(v, 1, 1_000_000)?,
            "data.val_images" => d.val_images = ranged(v, 1, 100_000)?,
            "data.image_size" => d.image_size = ranged(v, 16, MAX_IMAGE)?,
            "data.seed" => d.seed = integer(v)?,
            "data.clean_dir" => d.clean_dir = optional_path(v),
            "paths.out_dir" => self.paths.out_dir = path(v)?,
            "paths.checkpoint" => self.paths.checkpoint = optional_path(v),
            "paths.log" => self.paths.log = optional_path(v),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn validate(&self, line_of: &dyn Fn(&str) -> usize) -> Result<()> {
        let m = &self.model;
        let levels = m.levels();
        if !(2..=MAX_LEVELS).contains(&levels) {
            return Err(config_err(line_of("model.blocks"), "model.blocks", format!("{levels} levels, expected 2 to {MAX_LEVELS}")));
        }
        for (key, len) in [("model.heads", m.heads.len()), ("model.boxes", m.box_sizes.len())] {
            if len != levels {
                return Err(config_err(line_of(key), key, format!("{len} entries for {levels} levels")));
            }
        }
        if m.split == 0 || m.split >= 2 * levels - 1 {
            return Err(config_err(line_of("model.split"), "model.split", format!("split {} does not fit {levels} levels", m.split)));
        }
        if let Err(e) = m.desc() {
            let key = if line_of("model.heads") > 0 { "model.heads" } else { "model.channels" };
            return Err(config_err(line_of(key), key, e.to_string()));
        }

        let d = &self.data;
        if let Err(e) = self.task() {
            let key = if e.to_string().contains("sigma") { "data.noise_sigmas" } else { "data.degradations" };
            return Err(config_err(line_of(key), key, e.to_string()));
        }
        if self.train.patch > d.image_size {
            return Err(config_err(
                line_of("train.patch"),
                "train.patch",
                format!("patch {} exceeds data.image_size {}", self.train.patch, d.image_size),
            ));
        }
        Ok(())
    }

    pub fn task(&self) -> Result<TaskConfig> {
        let d = &self.data;
        let families = |names: &[String]| names.iter().map(|n| Family::preset(n, &d.noise_sigmas)).collect::<Result<Vec<_>>>();
        Ok(TaskConfig {
            families: families(&d.degradations)?,
            eval_only: families(&d.eval_only)?,
            train_images: d.train_images,
            val_images: d.val_images,
            image_size: d.image_size,
            seed: d.seed,
            clean_dir: d.clean_dir.clone(),
        })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.paths.out_dir.join("model.ckpt"))
    }

    pub fn log_path(&self) -> PathBuf {
        self.paths.log.clone().unwrap_or_else(|| self.paths.out_dir.join("metrics.csv"))
    }

    /// Complete listing of every key; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = format!("profile = {}\n", self.profile);
        for (k, v) in model_entries(&self.model) {
            let _ = writeln!(out, "{k} = {v}");
        }
        let t = &self.train;
        let _ = writeln!(out, "train.seed = {}", t.seed);
        let _ = match t.budget {
            Budget::Steps(n) => writeln!(out, "train.steps = {n}"),
            Budget::Epochs(n) => writeln!(out, "train.epochs = {n}"),
        };
        let _ = writeln!(out, "train.batch = {}", t.batch);
        let _ = writeln!(out, "train.patch = {}", t.patch);
        let _ = writeln!(out, "train.flips = {}", t.flips);
        let _ = writeln!(out, "train.lr = {}", t.lr);
        let _ = writeln!(out, "train.beta1 = {}", t.optim.beta1);
        let _ = writeln!(out, "train.beta2 = {}", t.optim.beta2);
        let _ = writeln!(out, "train.eps = {}", t.optim.eps);
        let _ = writeln!(out, "train.weight_decay = {}", t.optim.weight_decay);
        let _ = writeln!(out, "train.eval_every = {}", t.eval_every);
        let d = &self.data;
        let _ = writeln!(out, "data.degradations = {}", d.degradations.join(","));
        let _ = writeln!(out, "data.eval_only = {}", d.eval_only.join(","));
        let _ = writeln!(out, "data.noise_sigmas = {}", join(&d.noise_sigmas));
        let _ = writeln!(out, "data.train_images = {}", d.train_images);
        let _ = writeln!(out, "data.val_images = {}", d.val_images);
        let _ = writeln!(out, "data.image_size = {}", d.image_size);
        let _ = writeln!(out, "data.seed = {}", d.seed);
        let _ = writeln!(out, "data.clean_dir = {}", show_path(&d.clean_dir));
        let _ = writeln!(out, "paths.out_dir = {}", self.paths.out_dir.display());
        let _ = writeln!(out, "paths.checkpoint = {}", show_path(&self.paths.checkpoint));
        let _ = writeln!(out, "paths.log = {}", show_path(&self.paths.log));
        out
    }
}

impl Default for PathSettings {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/hair"),
            checkpoint: None,
            log: None,
        }
    }
}

/// `model.*` entries describing `m`, as stored in configs and checkpoints.
pub fn model_entries(m: &ModelConfig) -> Vec<(&'static str, String)> {
    let stages = 2 * m.levels().max(1) - 1;
    vec![
        ("model.channels", m.base_channels.to_string()),
        ("model.blocks", join(&m.blocks)),
        ("model.heads", join(&m.heads)),
        ("model.boxes", join(&m.box_sizes)),
        ("model.expansion", m.ffn_expansion.to_string()),
        ("model.split", format!("{}+{}", m.split, stages.saturating_sub(m.split))),
    ]
}

/// Reads back [`model_entries`]; `lookup` returns the value stored for a key.
pub fn model_from_entries(lookup: impl Fn(&str) -> Option<String>) -> Result<ModelConfig, String> {
    let get = |k: &str| lookup(k).ok_or_else(|| format!("missing {k}"));
    let with_key = |k: &'static str| move |r: String| format!("{k}: {r}");
    let mut m = ModelConfig {
        base_channels: ranged(&get("model.channels")?, 1, MAX_CHANNELS).map_err(with_key("model.channels"))?,
        blocks: ranged_list(&get("model.blocks")?, 1, 32).map_err(with_key("model.blocks"))?,
        heads: ranged_list(&get("model.heads")?, 1, MAX_CHANNELS).map_err(with_key("model.heads"))?,
        box_sizes: ranged_list(&get("model.boxes")?, 1, 64).map_err(with_key("model.boxes"))?,
        ffn_expansion: real(&get("model.expansion")?, 0.0, 8.0, false).map_err(with_key("model.expansion"))?,
        split: 0,
    };
    if !(2..=MAX_LEVELS).contains(&m.levels()) {
        return Err(format!("model.blocks: {} levels", m.levels()));
    }
    m.split = parse_split(&get("model.split")?, 2 * m.levels() - 1).map_err(|e| e.to_string())?;
    m.desc().map_err(|e| e.to_string())?;
    Ok(m)
}

fn config_err(line: usize, key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        line,
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn clip(s: &str) -> &str {
    match s.char_indices().nth(40) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn list(v: &str) -> Result<Vec<&str>, String> {
    let items: Vec<&str> = v.split(',').map(str::trim).collect();
    if items.iter().any(|s| s.is_empty()) {
        return Err(format!("expected a comma-separated list, got {v:?}"));
    }
    Ok(items)
}

fn integer(v: &str) -> Result<u64, String> {
    v.parse().map_err(|_| format!("expected a non-negative integer, got {v:?}"))
}

fn ranged(v: &str, lo: usize, hi: usize) -> Result<usize, String> {
    let n: usize = v.parse().map_err(|_| format!("expected an integer, got {v:?}"))?;
    if n < lo || n > hi {
        return Err(format!("{n} outside [{lo}, {hi}]"));
    }
    Ok(n)
}

fn ranged_list(v: &str, lo: usize, hi: usize) -> Result<Vec<usize>, String> {
    list(v)?.into_iter().map(|s| ranged(s, lo, hi)).collect()
}

fn real(v: &str, lo: f64, hi: f64, closed_low: bool) -> Result<f64, String> {
    let x: f64 = v.parse().map_err(|_| format!("expected a number, got {v:?}"))?;
    let low_ok = if closed_low { x >= lo } else { x > lo };
    if !x.is_finite() || !low_ok || x > hi {
        let open = if closed_low { '[' } else { '(' };
        return Err(format!("{x} outside {open}{lo}, {hi}]"));
    }
    Ok(x)
}

fn below_one(x: f64) -> Result<f64, String> {
    if x < 1.0 {
        Ok(x)
    } else {
        Err(format!("{x} must be below 1"))
    }
}

fn names(v: &str) -> Result<Vec<String>, String> {
    Ok(list(v)?.into_iter().map(String::from).collect())
}

fn path(v: &str) -> Result<PathBuf, String> {
    if v.is_empty() {
        Err("expected a path".into())
    } else {
        Ok(PathBuf::from(v))
    }
}

fn optional_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}
