//! Flat key = value config files with [section] headers.
//!
//! Grammar, intentionally small:
//!
//! ```text
//! file     := line*
//! line     := blank | comment | section | entry
//! comment  := '#' ...
//! section  := '[' name ']'
//! entry    := key ' = '? value          (spaces around '=' optional)
//! ```
//!
//! Sections used by the tools: `[data]`, `[training]`, `[attack]`,
//! `[experiment]`. Unknown sections and unknown keys are errors, with the
//! offending line number in the message. Values never span lines.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use bfa_core::attack::{AttackConfig, Heuristic};
use bfa_core::data::Dataset;
use bfa_core::model::Model;
use bfa_core::train::TrainingConfig;

/// Parsed config: section -> key -> (line, value).
#[derive(Debug, Default, Clone)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, (usize, String)>>,
}

const KNOWN_SECTIONS: &[&str] = &["data", "training", "attack", "experiment"];

impl RawConfig {
    pub fn parse(text: &str) -> Result<RawConfig> {
        let mut cfg = RawConfig::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                let name = name.trim();
                if !KNOWN_SECTIONS.contains(&name) {
                    bail!("line {line_no}: unknown section [{name}] (expected one of {KNOWN_SECTIONS:?})");
                }
                section = Some(name.to_string());
                cfg.sections.entry(name.to_string()).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {line_no}: expected `key = value`, got {line:?}");
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                bail!("line {line_no}: empty key");
            }
            let Some(section) = &section else {
                bail!("line {line_no}: `{key}` appears before any [section] header");
            };
            let entries = cfg.sections.get_mut(section).expect("section exists");
            if let Some((prev, _)) = entries.get(key) {
                bail!("line {line_no}: duplicate key `{key}` in [{section}] (first set at line {prev})");
            }
            entries.insert(key.to_string(), (line_no, value.to_string()));
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RawConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        RawConfig::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    fn section<'a>(&'a self, name: &'a str) -> Section<'a> {
        Section {
            name,
            entries: self.sections.get(name),
        }
    }

    /// Errors on any key the consumer never read.
    fn check_consumed(&self, consumed: &[(&str, &[&str])]) -> Result<()> {
        for (section, entries) in &self.sections {
            let allowed = consumed
                .iter()
                .find(|(s, _)| s == section)
                .map(|(_, keys)| *keys)
                .unwrap_or(&[]);
            for (key, (line, _)) in entries {
                if !allowed.contains(&key.as_str()) {
                    bail!("line {line}: unknown key `{key}` in [{section}]");
                }
            }
        }
        Ok(())
    }
}

struct Section<'a> {
    name: &'a str,
    entries: Option<&'a BTreeMap<String, (usize, String)>>,
}

impl<'a> Section<'a> {
    fn raw(&self, key: &str) -> Option<&'a str> {
        self.entries.and_then(|e| e.get(key)).map(|(_, v)| v.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(e) = self.entries.and_then(|e| e.get(key)) else {
            return Ok(None);
        };
        let (line, value) = e;
        value
            .parse::<T>()
            .map(Some)
            .map_err(|err| anyhow!("line {line}: field `{key}` in [{}]: {err}", self.name))
    }

    fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.parse(key)?
            .ok_or_else(|| anyhow!("missing required key `{key}` in [{}]", self.name))
    }

    fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(e) = self.entries.and_then(|e| e.get(key)) else {
            return Ok(None);
        };
        let (line, value) = e;
        value
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<T>()
                    .map_err(|err| anyhow!("line {line}: field `{key}` in [{}]: {err}", self.name))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }
}

/// Where the dataset comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    Mnist { dir: PathBuf },
    Synthetic { samples: usize, dims: usize, classes: usize, seed: u64 },
}

impl DataSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSpec::Mnist { dir } => bfa_core::data::load_mnist(dir)
                .with_context(|| format!("loading MNIST from {}", dir.display())),
            DataSpec::Synthetic { samples, dims, classes, seed } => {
                Ok(bfa_core::data::synthetic_gaussians(*samples, *dims, *classes, *seed)?)
            }
        }
    }

    pub fn canonical_text(&self) -> String {
        match self {
            DataSpec::Mnist { dir } => format!("source = mnist\ndir = {}\n", dir.display()),
            DataSpec::Synthetic { samples, dims, classes, seed } => format!(
                "source = synthetic\nsamples = {samples}\ndims = {dims}\nclasses = {classes}\nseed = {seed}\n"
            ),
        }
    }
}

const DATA_KEYS: &[&str] = &["source", "dir", "samples", "dims", "classes", "seed"];
const TRAINING_KEYS: &[&str] = &[
    "arch", "lr", "scheduler", "epochs", "batch_size", "weight_decay", "init", "dropout", "seed",
];
const ATTACK_KEYS: &[&str] = &[
    "attack_set_size", "goals", "budget", "mask", "heuristic", "candidates_per_layer", "eval_subsample", "seed",
];
const EXPERIMENT_KEYS: &[&str] = &["train_seeds", "attack_seeds", "out"];

/// [data] section; `data_dir_override` comes from --data-dir.
pub fn data_spec(cfg: &RawConfig, data_dir_override: Option<&PathBuf>) -> Result<DataSpec> {
    let s = cfg.section("data");
    let source = s.raw("source").unwrap_or("mnist");
    match source {
        "mnist" => {
            let dir = data_dir_override
                .cloned()
                .or_else(|| s.raw("dir").map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("data/mnist"));
            Ok(DataSpec::Mnist { dir })
        }
        "synthetic" => Ok(DataSpec::Synthetic {
            samples: s.parse_or("samples", 2000)?,
            dims: s.parse_or("dims", 16)?,
            classes: s.parse_or("classes", 4)?,
            seed: s.parse_or("seed", 1)?,
        }),
        other => bail!("field `source` in [data]: unknown source {other:?} (mnist, synthetic)"),
    }
}

/// [training] section -> (arch id, config).
pub fn training_config(cfg: &RawConfig, seed_override: Option<u64>) -> Result<(String, TrainingConfig)> {
    let s = cfg.section("training");
    let arch: String = s.require("arch")?;
    Model::from_arch_id(&arch).map_err(|e| anyhow!("field `arch` in [training]: {e}"))?;
    let defaults = TrainingConfig::default();
    let config = TrainingConfig {
        lr: s.parse_or("lr", defaults.lr)?,
        scheduler: s.parse_or("scheduler", defaults.scheduler)?,
        epochs: s.parse_or("epochs", defaults.epochs)?,
        batch_size: s.parse_or("batch_size", defaults.batch_size)?,
        weight_decay: s.parse_or("weight_decay", defaults.weight_decay)?,
        init: s.parse_or("init", defaults.init)?,
        dropout: s.parse_or("dropout", defaults.dropout)?,
        seed: seed_override.map(Ok).unwrap_or_else(|| s.parse_or("seed", defaults.seed))?,
    };
    config.validate()?;
    Ok((arch, config))
}

/// Attackable-layer selector, resolved against a model's layer names.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum MaskSpec {
    #[default]
    All,
    Layers(Vec<String>),
}

impl std::str::FromStr for MaskSpec {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<MaskSpec, Self::Err> {
        if s == "all" {
            Ok(MaskSpec::All)
        } else {
            Ok(MaskSpec::Layers(s.split(',').map(|p| p.trim().to_string()).collect()))
        }
    }
}

impl MaskSpec {
    /// Resolves names ("conv1", "dense4") or ordinals ("0", "4") to
    /// weighted-layer ordinals.
    pub fn resolve(&self, model: &Model) -> Result<Option<Vec<usize>>> {
        match self {
            MaskSpec::All => Ok(None),
            MaskSpec::Layers(names) => {
                let count = model.weighted_layers().len();
                let mut out = Vec::new();
                for name in names {
                    if let Ok(ord) = name.parse::<usize>() {
                        if ord >= count {
                            bail!("mask layer {ord} out of range ({count} weighted layers)");
                        }
                        out.push(ord);
                        continue;
                    }
                    let found = (0..count).find(|&o| model.weighted_layer_name(o) == *name);
                    match found {
                        Some(ord) => out.push(ord),
                        None => bail!(
                            "mask layer {name:?} not in {}: {:?}",
                            model.arch_id,
                            (0..count).map(|o| model.weighted_layer_name(o)).collect::<Vec<_>>()
                        ),
                    }
                }
                Ok(Some(out))
            }
        }
    }
}

/// Flag overrides for the [attack] section.
#[derive(Debug, Clone, Default)]
pub struct AttackOverrides {
    pub seed: Option<u64>,
    pub budget: Option<usize>,
    pub goals: Option<Vec<f64>>,
    pub mask: Option<MaskSpec>,
    pub heuristic: Option<Heuristic>,
    pub eval_subsample: Option<usize>,
}

/// [attack] section -> config; the mask needs a model to resolve names.
pub fn attack_config(cfg: &RawConfig, model: &Model, over: &AttackOverrides) -> Result<AttackConfig> {
    let s = cfg.section("attack");
    let defaults = AttackConfig::default();
    let mask_spec = match &over.mask {
        Some(m) => m.clone(),
        None => s.parse_or("mask", MaskSpec::All)?,
    };
    let config = AttackConfig {
        attack_set_size: s.parse_or("attack_set_size", defaults.attack_set_size)?,
        goals: match &over.goals {
            Some(g) => g.clone(),
            None => s.parse_list("goals")?.unwrap_or(defaults.goals),
        },
        budget: over.budget.map(Ok).unwrap_or_else(|| s.parse_or("budget", defaults.budget))?,
        layer_mask: mask_spec.resolve(model)?,
        heuristic: match over.heuristic {
            Some(h) => h,
            None => s.parse_or("heuristic", defaults.heuristic)?,
        },
        candidates_per_layer: s.parse_or("candidates_per_layer", defaults.candidates_per_layer)?,
        eval_subsample: over
            .eval_subsample
            .map(Ok)
            .unwrap_or_else(|| s.parse_or("eval_subsample", defaults.eval_subsample))?,
        seed: over.seed.map(Ok).unwrap_or_else(|| s.parse_or("seed", defaults.seed))?,
    };
    config.validate(model)?;
    Ok(config)
}

/// A full experiment: one training template, seed grids, one attack config.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub arch: String,
    pub data: DataSpec,
    pub training: TrainingConfig,
    pub attack_template: RawConfig,
    pub train_seeds: Vec<u64>,
    pub attack_seeds: Vec<u64>,
    pub out: PathBuf,
}

pub fn experiment_plan(
    cfg: &RawConfig,
    data_dir_override: Option<&PathBuf>,
    out_override: Option<&PathBuf>,
) -> Result<ExperimentPlan> {
    cfg.check_consumed(&[
        ("data", DATA_KEYS),
        ("training", TRAINING_KEYS),
        ("attack", ATTACK_KEYS),
        ("experiment", EXPERIMENT_KEYS),
    ])?;
    let s = cfg.section("experiment");
    let train_seeds: Vec<u64> = s
        .parse_list("train_seeds")?
        .ok_or_else(|| anyhow!("missing required key `train_seeds` in [experiment]"))?;
    let attack_seeds: Vec<u64> = s
        .parse_list("attack_seeds")?
        .ok_or_else(|| anyhow!("missing required key `attack_seeds` in [experiment]"))?;
    for (name, seeds) in [("train_seeds", &train_seeds), ("attack_seeds", &attack_seeds)] {
        if seeds.is_empty() {
            bail!("field `{name}` in [experiment] must be nonempty");
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            bail!("field `{name}` in [experiment] has duplicate seeds");
        }
    }
    let out = out_override
        .cloned()
        .or_else(|| s.raw("out").map(PathBuf::from))
        .ok_or_else(|| anyhow!("missing `out` in [experiment] (or pass --out)"))?;
    let (arch, training) = training_config(cfg, None)?;
    let data = data_spec(cfg, data_dir_override)?;
    Ok(ExperimentPlan {
        arch,
        data,
        training,
        attack_template: cfg.clone(),
        train_seeds,
        attack_seeds,
        out,
    })
}

impl ExperimentPlan {
    /// Canonical resolved text, written to plan.lock and hashed.
    pub fn canonical_text(&self, sample_model: &Model, attack: &AttackConfig) -> String {
        let _ = sample_model;
        let seeds = |v: &[u64]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "# bfa experiment plan (resolved)\n[data]\n{}[training]\n{}[attack]\n{}[experiment]\ntrain_seeds = {}\nattack_seeds = {}\n",
            self.data.canonical_text(),
            self.training.canonical_text(&self.arch),
            attack.canonical_text(),
            seeds(&self.train_seeds),
            seeds(&self.attack_seeds),
        )
    }
}

/// Strict validation for train/attack configs (unknown keys rejected).
pub fn check_train_file(cfg: &RawConfig) -> Result<()> {
    cfg.check_consumed(&[("data", DATA_KEYS), ("training", TRAINING_KEYS)])
}

pub fn check_attack_file(cfg: &RawConfig) -> Result<()> {
    cfg.check_consumed(&[("data", DATA_KEYS), ("attack", ATTACK_KEYS)])
}
