//! Plain-text run configuration.
//!
//! `key = value` lines grouped under `[data]`, `[noise]`, `[search]`,
//! `[victim]` and `[experiment]` headers; `#` starts a comment. Reals accept
//! fraction literals such as `8/255`. Unknown keys and sections are errors.
//! [`Config::to_text`] writes every key in a canonical order and parses
//! back to an equal value.

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use armor_tensor::OptimizerConfig;

use crate::augment::{AugKind, AugOp};
use crate::data::SyntheticSpec;
use crate::eval::VictimConfig;
use crate::noise::{NoiseGenConfig, NoiseMode};
use crate::{ArmorError, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Cifar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SyntheticSpec,
    /// Directory of the CIFAR-10 binary batches.
    pub path: PathBuf,
    /// Keep only the first `n` training samples per class.
    pub subset: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            synthetic: SyntheticSpec::default(),
            path: PathBuf::from("cifar-10-batches-bin"),
            subset: None,
        }
    }
}

/// Victim augmentation as written in configuration files.
#[derive(Clone, Debug, PartialEq)]
pub enum AugmentSetting {
    Off,
    /// Per-class policy re-selected during training.
    Search,
    /// A uniformly drawn operation per sample.
    Random,
    /// Fixed policy read from a file.
    PolicyFile(PathBuf),
}

impl fmt::Display for AugmentSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentSetting::Off => f.write_str("off"),
            AugmentSetting::Search => f.write_str("search"),
            AugmentSetting::Random => f.write_str("random"),
            AugmentSetting::PolicyFile(p) => write!(f, "policy:{}", p.display()),
        }
    }
}

impl FromStr for AugmentSetting {
    type Err = ArmorError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "off" => AugmentSetting::Off,
            "on" | "search" => AugmentSetting::Search,
            "random" => AugmentSetting::Random,
            _ => match s.strip_prefix("policy:") {
                Some(p) if !p.is_empty() => AugmentSetting::PolicyFile(PathBuf::from(p)),
                _ => {
                    return Err(ArmorError::Config(format!(
                        "augmentation must be off, on, search, random or policy:<path>, got `{s}`"
                    )))
                }
            },
        })
    }
}

/// Where a grid cell's noise comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseSource {
    None,
    Random,
    Base,
    Armor,
    File(PathBuf),
}

impl fmt::Display for NoiseSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseSource::None => f.write_str("none"),
            NoiseSource::Random => f.write_str("random"),
            NoiseSource::Base => f.write_str("base"),
            NoiseSource::Armor => f.write_str("armor"),
            NoiseSource::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl FromStr for NoiseSource {
    type Err = ArmorError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => NoiseSource::None,
            "random" => NoiseSource::Random,
            "base" => NoiseSource::Base,
            "armor" => NoiseSource::Armor,
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => NoiseSource::File(PathBuf::from(p)),
                _ => {
                    return Err(ArmorError::Config(format!(
                        "noise source must be none, random, base, armor or file:<path>, got `{s}`"
                    )))
                }
            },
        })
    }
}

/// Scenario grid: every noise source × augmentation × seed offset.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentGrid {
    pub noises: Vec<NoiseSource>,
    pub augments: Vec<AugmentSetting>,
    /// Added to the data, noise and victim seeds of each cell.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            noises: vec![NoiseSource::None, NoiseSource::Base, NoiseSource::Armor],
            augments: vec![AugmentSetting::Off, AugmentSetting::Search],
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub data: DataConfig,
    pub noise: NoiseGenConfig,
    pub victim: VictimConfig,
    pub victim_augment: AugmentSetting,
    /// Epochs between policy re-selections for searched victim augmentation.
    pub victim_search_refresh: usize,
    pub experiment: ExperimentGrid,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            noise: NoiseGenConfig::default(),
            victim: VictimConfig::default(),
            victim_augment: AugmentSetting::Off,
            victim_search_refresh: 10,
            experiment: ExperimentGrid::default(),
        }
    }
}

/// A real in decimal or `a/b` form.
fn parse_real<T: FromStr + std::ops::Div<Output = T>>(s: &str) -> Option<T> {
    match s.split_once('/') {
        Some((a, b)) => Some(a.trim().parse::<T>().ok()? / b.trim().parse::<T>().ok()?),
        None => s.parse().ok(),
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

fn parse_list<T: FromStr>(s: &str) -> Option<Vec<T>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

fn parse_ops(s: &str) -> Option<Vec<AugOp>> {
    if s == "all" {
        return Some(AugKind::ALL.into_iter().map(AugOp::new).collect());
    }
    s.split(',')
        .map(|p| AugKind::from_name(p.trim()).map(AugOp::new))
        .collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn ops_text(ops: &[AugOp]) -> String {
    let all: Vec<AugOp> = AugKind::ALL.into_iter().map(AugOp::new).collect();
    if ops == all.as_slice() {
        "all".into()
    } else {
        ops.iter().map(|o| o.kind.name()).collect::<Vec<_>>().join(",")
    }
}

fn optimizer_keys(s: &mut String, o: &OptimizerConfig) {
    s.push_str(&format!("learning_rate = {}\n", o.learning_rate));
    s.push_str(&format!("momentum = {}\n", o.momentum));
    s.push_str(&format!("weight_decay = {}\n", o.weight_decay));
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section = String::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ArmorError::Parse {
                    line: line_no,
                    message: format!("unterminated section header `{line}`"),
                })?;
                if !["data", "noise", "search", "victim", "experiment"].contains(&name.trim()) {
                    return Err(ArmorError::UnknownKey {
                        line: line_no,
                        key: format!("[{}]", name.trim()),
                    });
                }
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ArmorError::Parse {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            // Outside any section, dotted keys name their section and bare
            // keys belong to [noise].
            let full = if !section.is_empty() {
                format!("{section}.{key}")
            } else if key.contains('.') {
                key.to_string()
            } else {
                format!("noise.{key}")
            };
            if !seen.insert(full.clone()) {
                return Err(ArmorError::Parse {
                    line: line_no,
                    message: format!("duplicate key `{full}`"),
                });
            }
            cfg.set(&full, value).map_err(|e| match e {
                SetError::Unknown => ArmorError::UnknownKey {
                    line: line_no,
                    key: if section.is_empty() { key.to_string() } else { full.clone() },
                },
                SetError::Invalid => ArmorError::Parse {
                    line: line_no,
                    message: format!("invalid value `{value}` for `{full}`"),
                },
            })?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), SetError> {
        fn req<T>(o: Option<T>) -> std::result::Result<T, SetError> {
            o.ok_or(SetError::Invalid)
        }
        let d = &mut self.data;
        let s = &mut d.synthetic;
        let n = &mut self.noise;
        let vc = &mut self.victim;
        match key {
            "data.source" => {
                d.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "cifar" => DataSource::Cifar,
                    _ => return Err(SetError::Invalid),
                }
            }
            "data.path" => d.path = PathBuf::from(v),
            "data.subset" => d.subset = if v == "none" { None } else { Some(req(v.parse().ok())?) },
            "data.classes" => s.classes = req(v.parse().ok())?,
            "data.channels" => s.channels = req(v.parse().ok())?,
            "data.height" => s.height = req(v.parse().ok())?,
            "data.width" => s.width = req(v.parse().ok())?,
            "data.per_class" => s.per_class = req(v.parse().ok())?,
            "data.contrast" => s.contrast = req(parse_real(v))?,
            "data.jitter" => s.jitter = req(parse_real(v))?,
            "data.seed" => s.seed = req(v.parse().ok())?,

            "noise.epsilon" => n.epsilon = req(parse_real(v))?,
            "noise.pgd_steps" => n.pgd_steps = req(v.parse().ok())?,
            "noise.surrogate_batches" => n.surrogate_batches = req(v.parse().ok())?,
            "noise.stop_error" => n.stop_error = req(parse_real(v))?,
            "noise.max_rounds" => n.max_rounds = req(v.parse().ok())?,
            "noise.policy_refresh" => n.policy_refresh = req(v.parse().ok())?,
            "noise.mode" => n.mode = req(v.parse::<NoiseMode>().ok())?,
            "noise.step_size" => n.step_size = req(parse_real(v))?,
            "noise.fixed_step" => n.fixed_step = if v == "none" { None } else { Some(req(parse_real(v))?) },
            "noise.nonlocal" => n.use_nonlocal = req(parse_bool(v))?,
            "noise.seed" => n.seed = req(v.parse().ok())?,
            "noise.batch_size" => n.batch_size = req(v.parse().ok())?,
            "noise.widths" => n.widths = req(parse_list(v))?,
            "noise.learning_rate" => n.optimizer.learning_rate = req(parse_real(v))?,
            "noise.momentum" => n.optimizer.momentum = req(parse_real(v))?,
            "noise.weight_decay" => n.optimizer.weight_decay = req(parse_real(v))?,
            "noise.beta" => n.beta = req(parse_real(v))?,
            "noise.step_c" => n.step_c = req(parse_real(v))?,
            "noise.fresh_draw_per_step" => n.fresh_draw_per_step = req(parse_bool(v))?,
            "noise.aux_pretrain_epochs" => n.aux_pretrain_epochs = req(v.parse().ok())?,

            "search.aux_epochs" => n.search.aux_train_epochs = req(v.parse().ok())?,
            "search.batch_size" => n.search.batch_size = req(v.parse().ok())?,
            "search.ops" => n.search.op_set = req(parse_ops(v))?,
            "search.draws_per_class" => n.search.similarity_batches_per_class = req(v.parse().ok())?,

            "victim.widths" => vc.widths = req(parse_list(v))?,
            "victim.nonlocal" => vc.nonlocal = req(parse_bool(v))?,
            "victim.epochs" => vc.epochs = req(v.parse().ok())?,
            "victim.batch_size" => vc.batch_size = req(v.parse().ok())?,
            "victim.learning_rate" => vc.optimizer.learning_rate = req(parse_real(v))?,
            "victim.momentum" => vc.optimizer.momentum = req(parse_real(v))?,
            "victim.weight_decay" => vc.optimizer.weight_decay = req(parse_real(v))?,
            "victim.seed" => vc.seed = req(v.parse().ok())?,
            "victim.augment" => self.victim_augment = req(v.parse().ok())?,
            "victim.search_refresh" => self.victim_search_refresh = req(v.parse().ok())?,

            "experiment.noise" => self.experiment.noises = req(parse_list(v))?,
            "experiment.augment" => self.experiment.augments = req(parse_list(v))?,
            "experiment.seeds" => self.experiment.seeds = req(parse_list(v))?,
            _ => return Err(SetError::Unknown),
        }
        Ok(())
    }

    /// Canonical text form listing every key.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let s = &d.synthetic;
        let n = &self.noise;
        let v = &self.victim;
        let mut t = String::new();
        t.push_str("[data]\n");
        t.push_str(&format!(
            "source = {}\n",
            match d.source {
                DataSource::Synthetic => "synthetic",
                DataSource::Cifar => "cifar",
            }
        ));
        t.push_str(&format!("path = {}\n", d.path.display()));
        t.push_str(&format!("subset = {}\n", d.subset.map_or("none".into(), |v| v.to_string())));
        t.push_str(&format!("classes = {}\n", s.classes));
        t.push_str(&format!("channels = {}\n", s.channels));
        t.push_str(&format!("height = {}\n", s.height));
        t.push_str(&format!("width = {}\n", s.width));
        t.push_str(&format!("per_class = {}\n", s.per_class));
        t.push_str(&format!("contrast = {}\n", s.contrast));
        t.push_str(&format!("jitter = {}\n", s.jitter));
        t.push_str(&format!("seed = {}\n", s.seed));

        t.push_str("\n[noise]\n");
        t.push_str(&format!("epsilon = {}\n", n.epsilon));
        t.push_str(&format!("pgd_steps = {}\n", n.pgd_steps));
        t.push_str(&format!("surrogate_batches = {}\n", n.surrogate_batches));
        t.push_str(&format!("stop_error = {}\n", n.stop_error));
        t.push_str(&format!("max_rounds = {}\n", n.max_rounds));
        t.push_str(&format!("policy_refresh = {}\n", n.policy_refresh));
        t.push_str(&format!("mode = {}\n", n.mode));
        t.push_str(&format!("step_size = {}\n", n.step_size));
        t.push_str(&format!("fixed_step = {}\n", n.fixed_step.map_or("none".into(), |v| v.to_string())));
        t.push_str(&format!("nonlocal = {}\n", n.use_nonlocal));
        t.push_str(&format!("seed = {}\n", n.seed));
        t.push_str(&format!("batch_size = {}\n", n.batch_size));
        t.push_str(&format!("widths = {}\n", join(&n.widths)));
        optimizer_keys(&mut t, &n.optimizer);
        t.push_str(&format!("beta = {}\n", n.beta));
        t.push_str(&format!("step_c = {}\n", n.step_c));
        t.push_str(&format!("fresh_draw_per_step = {}\n", n.fresh_draw_per_step));
        t.push_str(&format!("aux_pretrain_epochs = {}\n", n.aux_pretrain_epochs));

        t.push_str("\n[search]\n");
        t.push_str(&format!("aux_epochs = {}\n", n.search.aux_train_epochs));
        t.push_str(&format!("batch_size = {}\n", n.search.batch_size));
        t.push_str(&format!("ops = {}\n", ops_text(&n.search.op_set)));
        t.push_str(&format!("draws_per_class = {}\n", n.search.similarity_batches_per_class));

        t.push_str("\n[victim]\n");
        t.push_str(&format!("widths = {}\n", join(&v.widths)));
        t.push_str(&format!("nonlocal = {}\n", v.nonlocal));
        t.push_str(&format!("epochs = {}\n", v.epochs));
        t.push_str(&format!("batch_size = {}\n", v.batch_size));
        optimizer_keys(&mut t, &v.optimizer);
        t.push_str(&format!("seed = {}\n", v.seed));
        t.push_str(&format!("augment = {}\n", self.victim_augment));
        t.push_str(&format!("search_refresh = {}\n", self.victim_search_refresh));

        t.push_str("\n[experiment]\n");
        t.push_str(&format!("noise = {}\n", join(&self.experiment.noises)));
        t.push_str(&format!("augment = {}\n", join(&self.experiment.augments)));
        t.push_str(&format!("seeds = {}\n", join(&self.experiment.seeds)));
        t
    }

}

enum SetError {
    Unknown,
    Invalid,
}
