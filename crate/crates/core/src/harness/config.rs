//! Experiment configuration and its flat dotted-key representation.

use std::fmt;
use std::str::FromStr;

use toml::Value;

use crate::error::{Error, Result};
use crate::harness::optim::AdamConfig;
use crate::losses::{DistanceKind, LossWeights, ObjectiveSpec, Toggles};
use crate::model::ModelDims;
use crate::synthgen::GeneratorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Protocol {
    #[default]
    MultiSource,
    SingleSource,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::MultiSource => "multi-source",
            Protocol::SingleSource => "single-source",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi-source" | "multi" => Ok(Protocol::MultiSource),
            "single-source" | "single" => Ok(Protocol::SingleSource),
            _ => Err(Error::Config(format!(
                "unknown protocol `{s}`; expected multi-source or single-source"
            ))),
        }
    }
}

/// Hidden widths of the model; input widths and class count come from the
/// generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub embed_half: usize,
    pub encoder_hidden: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub trans_hidden: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            embed_half: 16,
            encoder_hidden: 64,
            proj_hidden: 64,
            proj_out: 16,
            trans_hidden: 64,
        }
    }
}

/// One training source set and the targets evaluated after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arrangement {
    pub sources: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Arrangement {
    pub fn label(&self, target: usize) -> String {
        let s: Vec<String> = self.sources.iter().map(|d| format!("d{d}")).collect();
        format!("{}->d{target}", s.join("+"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub modality_names: Vec<String>,
    pub model: ModelShape,
    pub weights: LossWeights,
    pub tau: f64,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Held-out fraction of each (source domain, class) cell.
    pub val_fraction: f64,
    pub toggles: Toggles,
    pub distance_kind: DistanceKind,
    pub protocol: Protocol,
    /// Explicit sources; empty means enumerate every arrangement of the protocol.
    pub sources: Vec<usize>,
    /// Explicit targets; empty means every domain not in `sources`.
    pub targets: Vec<usize>,
    pub seed: u64,
    pub finetune_epochs: usize,
    pub finetune_learning_rate: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            train_per_domain: 350,
            test_per_domain: 1000,
            modality_names: vec!["video".into(), "flow".into(), "audio".into()],
            model: ModelShape::default(),
            weights: LossWeights::default(),
            tau: 0.1,
            optimizer: AdamConfig::default(),
            batch_size: 16,
            epochs: 15,
            val_fraction: 0.1,
            toggles: Toggles::all(),
            distance_kind: DistanceKind::default(),
            protocol: Protocol::default(),
            sources: Vec::new(),
            targets: Vec::new(),
            seed: 0,
            finetune_epochs: 10,
            finetune_learning_rate: 3e-3,
        }
    }
}

/// Every configurable key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "data.seed",
    "data.num_classes",
    "data.num_domains",
    "data.shared_latent_dim",
    "data.specific_latent_dims",
    "data.obs_dims",
    "data.shared_fraction",
    "data.latent_sigma",
    "data.domain_shift_scale",
    "data.specific_drift",
    "data.noise_sigma",
    "data.train_per_domain",
    "data.test_per_domain",
    "data.modality_names",
    "model.embed_half",
    "model.encoder_hidden",
    "model.proj_hidden",
    "model.proj_out",
    "model.trans_hidden",
    "loss.alpha_con",
    "loss.alpha_dis",
    "loss.alpha_trans",
    "loss.tau",
    "loss.distance",
    "loss.toggles",
    "optim.learning_rate",
    "optim.beta1",
    "optim.beta2",
    "optim.epsilon",
    "train.batch_size",
    "train.epochs",
    "train.val_fraction",
    "protocol.kind",
    "protocol.sources",
    "protocol.targets",
    "finetune.epochs",
    "finetune.learning_rate",
];

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::Config(format!("{key}: expected a number, got {v}"))),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(Error::Config(format!("{key}: expected a non-negative integer, got {v}"))),
    }
}

fn as_u64(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(Error::Config(format!("{key}: expected a non-negative integer, got {v}"))),
    }
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| Error::Config(format!("{key}: expected a string, got {v}")))
}

fn as_list<T>(key: &str, v: &Value, item: impl Fn(&str, &Value) -> Result<T>) -> Result<Vec<T>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Config(format!("{key}: expected a list, got {v}")))?;
    arr.iter().map(|x| item(key, x)).collect()
}

fn fmt_f64(x: f64) -> String {
    let s = format!("{x:?}");
    if s.contains(['.', 'e', 'E']) || !x.is_finite() {
        s
    } else {
        format!("{s}.0")
    }
}

fn fmt_list<T>(v: &[T], f: impl Fn(&T) -> String) -> String {
    let items: Vec<String> = v.iter().map(f).collect();
    format!("[{}]", items.join(", "))
}

fn quote(s: &str) -> String {
    Value::String(s.to_string()).to_string()
}

impl ExperimentConfig {
    /// Full-size reference widths and training hyperparameters at the default data shape.
    pub fn paper() -> Self {
        let mut c = Self::default();
        c.model = ModelShape {
            embed_half: 256,
            encoder_hidden: 2048,
            proj_hidden: 2048,
            proj_out: 128,
            trans_hidden: 2048,
        };
        c.optimizer.learning_rate = 1e-4;
        c.batch_size = 16;
        c.epochs = 15;
        c
    }

    /// Toy sizes tuned to train in seconds on one core.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.optimizer.learning_rate = 1e-3;
        c.weights.alpha_dis = 0.01;
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown profile `{name}`; expected desk or paper"))),
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            input_dims: self.generator.obs_dims.clone(),
            embed_half: self.model.embed_half,
            encoder_hidden: self.model.encoder_hidden,
            proj_hidden: self.model.proj_hidden,
            proj_out: self.model.proj_out,
            trans_hidden: self.model.trans_hidden,
            num_classes: self.generator.num_classes,
        }
    }

    pub fn objective(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            toggles: self.toggles,
            weights: self.weights,
            tau: self.tau,
            distance_kind: self.distance_kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model_dims().validate()?;
        self.weights.validate()?;
        self.optimizer.validate()?;
        self.toggles.validate()?;
        let m = self.generator.num_modalities();
        if self.modality_names.len() != m {
            return Err(Error::Config(format!(
                "{} modality names for {m} modalities",
                self.modality_names.len()
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if !(self.finetune_learning_rate > 0.0) {
            return Err(Error::Config("finetune.learning_rate must be positive".into()));
        }
        if self.train_per_domain == 0 || self.test_per_domain == 0 {
            return Err(Error::Config("per-domain sample counts must be positive".into()));
        }
        let d = self.generator.num_domains;
        for &x in self.sources.iter().chain(&self.targets) {
            if x >= d {
                return Err(Error::Config(format!("domain {x} out of range for {d} domains")));
            }
        }
        if self.sources.iter().any(|s| self.targets.contains(s)) {
            return Err(Error::Config("source and target domains overlap".into()));
        }
        if self.sources.is_empty() && !self.targets.is_empty() {
            return Err(Error::Config("targets given without sources".into()));
        }
        self.arrangements().map(|_| ())
    }

    /// Every (sources, targets) training run the protocol calls for.
    pub fn arrangements(&self) -> Result<Vec<Arrangement>> {
        let d = self.generator.num_domains;
        let all: Vec<usize> = (0..d).collect();
        let out = if !self.sources.is_empty() {
            let targets = if self.targets.is_empty() {
                all.iter().copied().filter(|x| !self.sources.contains(x)).collect()
            } else {
                self.targets.clone()
            };
            vec![Arrangement {
                sources: self.sources.clone(),
                targets,
            }]
        } else {
            match self.protocol {
                Protocol::MultiSource => all
                    .iter()
                    .map(|&t| Arrangement {
                        sources: all.iter().copied().filter(|&x| x != t).collect(),
                        targets: vec![t],
                    })
                    .collect(),
                Protocol::SingleSource => all
                    .iter()
                    .map(|&s| Arrangement {
                        sources: vec![s],
                        targets: all.iter().copied().filter(|&x| x != s).collect(),
                    })
                    .collect(),
            }
        };
        if out.iter().any(|a| a.sources.is_empty() || a.targets.is_empty()) {
            return Err(Error::Config(format!(
                "{} with {d} domain(s) leaves an empty source or target set",
                self.protocol
            )));
        }
        Ok(out)
    }

    /// Resolved `(key, value)` pairs; values are TOML literals.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let g = &self.generator;
        let vals = vec![
            self.seed.to_string(),
            g.seed.to_string(),
            g.num_classes.to_string(),
            g.num_domains.to_string(),
            g.shared_latent_dim.to_string(),
            fmt_list(&g.specific_latent_dims, usize::to_string),
            fmt_list(&g.obs_dims, usize::to_string),
            fmt_list(&g.shared_fraction, |x| fmt_f64(*x)),
            fmt_f64(g.latent_sigma),
            fmt_f64(g.domain_shift_scale),
            fmt_f64(g.specific_drift),
            fmt_f64(g.noise_sigma),
            self.train_per_domain.to_string(),
            self.test_per_domain.to_string(),
            fmt_list(&self.modality_names, |s| quote(s)),
            self.model.embed_half.to_string(),
            self.model.encoder_hidden.to_string(),
            self.model.proj_hidden.to_string(),
            self.model.proj_out.to_string(),
            self.model.trans_hidden.to_string(),
            fmt_f64(self.weights.alpha_con),
            fmt_f64(self.weights.alpha_dis),
            fmt_f64(self.weights.alpha_trans),
            fmt_f64(self.tau),
            quote(&self.distance_kind.to_string()),
            quote(&self.toggles.to_string()),
            fmt_f64(self.optimizer.learning_rate),
            fmt_f64(self.optimizer.beta1),
            fmt_f64(self.optimizer.beta2),
            fmt_f64(self.optimizer.epsilon),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            fmt_f64(self.val_fraction),
            quote(&self.protocol.to_string()),
            fmt_list(&self.sources, usize::to_string),
            fmt_list(&self.targets, usize::to_string),
            self.finetune_epochs.to_string(),
            fmt_f64(self.finetune_learning_rate),
        ];
        KEYS.iter().copied().zip(vals).collect()
    }

    /// `key = value` lines; parseable back with [`ExperimentConfig::set`].
    pub fn echo(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let g = &mut self.generator;
        match key {
            "seed" => self.seed = as_u64(key, v)?,
            "data.seed" => g.seed = as_u64(key, v)?,
            "data.num_classes" => g.num_classes = as_usize(key, v)?,
            "data.num_domains" => g.num_domains = as_usize(key, v)?,
            "data.shared_latent_dim" => g.shared_latent_dim = as_usize(key, v)?,
            "data.specific_latent_dims" => g.specific_latent_dims = as_list(key, v, as_usize)?,
            "data.obs_dims" => g.obs_dims = as_list(key, v, as_usize)?,
            "data.shared_fraction" => g.shared_fraction = as_list(key, v, as_f64)?,
            "data.latent_sigma" => g.latent_sigma = as_f64(key, v)?,
            "data.domain_shift_scale" => g.domain_shift_scale = as_f64(key, v)?,
            "data.specific_drift" => g.specific_drift = as_f64(key, v)?,
            "data.noise_sigma" => g.noise_sigma = as_f64(key, v)?,
            "data.train_per_domain" => self.train_per_domain = as_usize(key, v)?,
            "data.test_per_domain" => self.test_per_domain = as_usize(key, v)?,
            "data.modality_names" => {
                self.modality_names = as_list(key, v, |k, x| as_str(k, x).map(str::to_string))?
            }
            "model.embed_half" => self.model.embed_half = as_usize(key, v)?,
            "model.encoder_hidden" => self.model.encoder_hidden = as_usize(key, v)?,
            "model.proj_hidden" => self.model.proj_hidden = as_usize(key, v)?,
            "model.proj_out" => self.model.proj_out = as_usize(key, v)?,
            "model.trans_hidden" => self.model.trans_hidden = as_usize(key, v)?,
            "loss.alpha_con" => self.weights.alpha_con = as_f64(key, v)?,
            "loss.alpha_dis" => self.weights.alpha_dis = as_f64(key, v)?,
            "loss.alpha_trans" => self.weights.alpha_trans = as_f64(key, v)?,
            "loss.tau" => self.tau = as_f64(key, v)?,
            "loss.distance" => self.distance_kind = as_str(key, v)?.parse()?,
            "loss.toggles" => self.toggles = as_str(key, v)?.parse()?,
            "optim.learning_rate" => self.optimizer.learning_rate = as_f64(key, v)?,
            "optim.beta1" => self.optimizer.beta1 = as_f64(key, v)?,
            "optim.beta2" => self.optimizer.beta2 = as_f64(key, v)?,
            "optim.epsilon" => self.optimizer.epsilon = as_f64(key, v)?,
            "train.batch_size" => self.batch_size = as_usize(key, v)?,
            "train.epochs" => self.epochs = as_usize(key, v)?,
            "train.val_fraction" => self.val_fraction = as_f64(key, v)?,
            "protocol.kind" => self.protocol = as_str(key, v)?.parse()?,
            "protocol.sources" => self.sources = as_list(key, v, as_usize)?,
            "protocol.targets" => self.targets = as_list(key, v, as_usize)?,
            "finetune.epochs" => self.finetune_epochs = as_usize(key, v)?,
            "finetune.learning_rate" => self.finetune_learning_rate = as_f64(key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}`; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Apply every leaf of a TOML document, flattening tables into dotted keys.
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let mut flat = Vec::new();
        flatten("", &Value::Table(table), &mut flat);
        for (k, v) in flat {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Apply one `KEY=VALUE` override. The value is read as a TOML literal,
    /// falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.set(k.trim(), &value)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}
