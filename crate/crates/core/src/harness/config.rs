//! Experiment configuration and its text format.
//!
//! ```text
//! # comment
//! [synth]
//! shift_scale = 0.6
//! [experiment]
//! methods = WOMETA, MAML, SSML
//! shots = 1, 3, 5, 10
//! ```
//!
//! Overrides use `section.key=value`.

use std::path::PathBuf;
use std::str::FromStr;

use crate::adapt::AdaptConfig;
use crate::backbones::{BackboneKind, ModelSpec};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::meta::MetaConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    WoMeta,
    Maml,
    Ssml,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::WoMeta, Method::Maml, Method::Ssml];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::WoMeta => "WOMETA",
            Method::Maml => "MAML",
            Method::Ssml => "SSML",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace(['/', '-', '_'], "").as_str() {
            "WOMETA" => Ok(Method::WoMeta),
            "MAML" => Ok(Method::Maml),
            "SSML" => Ok(Method::Ssml),
            other => Err(Error::Config(format!("unknown method `{other}` (WOMETA|MAML|SSML)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth(SynthConfig),
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Architecture; channels, time length and class count are taken from
    /// the data at run time.
    pub model: ModelSpec,
    pub meta: MetaConfig,
    pub adapt: AdaptConfig,
    pub methods: Vec<Method>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Target subjects by index; `None` runs every subject.
    pub targets: Option<Vec<usize>>,
    pub eval_fraction: f64,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Synth(SynthConfig::default()),
            model: ModelSpec::new(BackboneKind::Stnn, 32, 128, 2),
            meta: MetaConfig::default(),
            adapt: AdaptConfig::default(),
            methods: Method::ALL.to_vec(),
            shots: vec![1, 3, 5, 10],
            seeds: vec![0],
            targets: None,
            eval_fraction: 0.3,
            threads: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("cannot parse `{value}` as a boolean for `{key}`"))),
    }
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "" | "all" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl ExperimentConfig {
    fn synth_mut(&mut self) -> &mut SynthConfig {
        if !matches!(self.data, DataSource::Synth(_)) {
            self.data = DataSource::Synth(SynthConfig::default());
        }
        match &mut self.data {
            DataSource::Synth(s) => s,
            DataSource::File(_) => unreachable!(),
        }
    }

    /// Sets one `section.key`.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        let k = full.as_str();
        let v = value.trim();
        match (section, key) {
            ("data", "path") => self.data = DataSource::File(PathBuf::from(v)),
            ("data", "eval_fraction") | ("experiment", "eval_fraction") => self.eval_fraction = parse(k, v)?,
            ("synth", "n_subjects") => self.synth_mut().n_subjects = parse(k, v)?,
            ("synth", "n_classes") => self.synth_mut().n_classes = parse(k, v)?,
            ("synth", "channels") => self.synth_mut().channels = parse(k, v)?,
            ("synth", "time_len") => self.synth_mut().time_len = parse(k, v)?,
            ("synth", "samples_per_subject") => self.synth_mut().samples_per_subject = parse(k, v)?,
            ("synth", "shift_scale") => self.synth_mut().shift_scale = parse(k, v)?,
            ("synth", "class_separation") => self.synth_mut().class_separation = parse(k, v)?,
            ("synth", "bias_scale") => self.synth_mut().bias_scale = parse(k, v)?,
            ("synth", "noise_sd") => self.synth_mut().noise_sd = parse(k, v)?,
            ("synth", "seed") => self.synth_mut().seed = parse(k, v)?,
            ("model", "kind") => self.model.kind = parse(k, v)?,
            ("model", "mlp_hidden") => self.model.mlp_hidden = parse(k, v)?,
            ("model", "stnn_spatial") => self.model.stnn_spatial = parse(k, v)?,
            ("model", "stnn_temporal") => self.model.stnn_temporal = parse(k, v)?,
            ("model", "cnn_filters") => {
                let f: Vec<usize> = parse_list(k, v)?;
                self.model.cnn_filters = f
                    .try_into()
                    .map_err(|_| Error::Config("model.cnn_filters needs four entries".into()))?;
            }
            ("model", "cnn_first_kernel") => self.model.cnn_first_kernel = parse(k, v)?,
            ("model", "cnn_kernel") => self.model.cnn_kernel = parse(k, v)?,
            ("model", "cnn_spatial") => self.model.cnn_spatial = parse(k, v)?,
            ("meta", "alpha") => self.meta.alpha = parse(k, v)?,
            ("meta", "beta") => self.meta.beta = parse(k, v)?,
            ("meta", "subjects_per_batch") => self.meta.subjects_per_batch = optional(k, v)?,
            ("meta", "inner_steps") => self.meta.inner_steps = parse(k, v)?,
            ("meta", "inner_batch") => self.meta.inner_batch = parse(k, v)?,
            ("meta", "max_epochs") => self.meta.max_epochs = parse(k, v)?,
            ("meta", "patience") => self.meta.patience = parse(k, v)?,
            ("meta", "val_fraction") => self.meta.val_fraction = parse(k, v)?,
            ("meta", "holdout") => self.meta.holdout = v.parse()?,
            ("meta", "center_lr") => self.meta.center_lr = parse(k, v)?,
            ("meta", "center_weight") => self.meta.center_weight = parse(k, v)?,
            ("meta", "reduction") => self.meta.reduction = v.parse()?,
            ("adapt", "epsilon") => self.adapt.epsilon = parse(k, v)?,
            ("adapt", "sigma") => self.adapt.sigma = parse(k, v)?,
            ("adapt", "gamma") => self.adapt.gamma = parse(k, v)?,
            ("adapt", "alpha") => self.adapt.alpha = parse(k, v)?,
            ("adapt", "weight_decay") => self.adapt.weight_decay = parse(k, v)?,
            ("adapt", "outer_epochs") => self.adapt.outer_epochs = parse(k, v)?,
            ("adapt", "batches_per_epoch") => self.adapt.batches_per_epoch = parse(k, v)?,
            ("adapt", "max_batch") => self.adapt.max_batch = parse(k, v)?,
            ("adapt", "refresh_support") => self.adapt.refresh_support = parse_bool(k, v)?,
            ("adapt", "min_per_class") => self.adapt.min_per_class = parse(k, v)?,
            ("adapt", "reduction") => self.adapt.reduction = v.parse()?,
            ("adapt", "n_shot") => self.adapt.n_shot = parse(k, v)?,
            ("experiment", "methods") => self.methods = parse_list(k, v)?,
            ("experiment", "shots") => self.shots = parse_list(k, v)?,
            ("experiment", "seeds") => self.seeds = parse_list(k, v)?,
            ("experiment", "targets") => {
                self.targets = match v {
                    "" | "all" => None,
                    _ => Some(parse_list(k, v)?),
                }
            }
            ("experiment", "threads") => self.threads = optional(k, v)?,
            _ => return Err(Error::Config(format!("unknown setting `{full}`"))),
        }
        Ok(())
    }

    /// Applies an override of the form `section.key=value`.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is missing a section")))?;
        self.set(section.trim(), key.trim(), value)
    }

    /// Applies every setting in a config file's text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            if section.is_empty() {
                return Err(Error::Config(format!("line {}: setting outside a [section]", no + 1)));
            }
            self.set(&section, k.trim(), v).map_err(|e| e.context(format!("config line {}", no + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.shots.is_empty() && self.methods.iter().any(|m| *m != Method::WoMeta) {
            return Err(Error::Config("at least one shot count is required".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.meta.validate()?;
        self.adapt.validate()?;
        if let DataSource::Synth(s) = &self.data {
            s.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_and_overrides() {
        let mut cfg = ExperimentConfig::from_text(
            "# grid\n[synth]\nshift_scale = 0.7\n[experiment]\nmethods = WOMETA, SSML\nshots = 0, 5\nseeds = 1,2,3\n",
        )
        .unwrap();
        cfg.set_override("adapt.epsilon=0.95").unwrap();
        assert_eq!(cfg.methods, vec![Method::WoMeta, Method::Ssml]);
        assert_eq!(cfg.shots, vec![0, 5]);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.adapt.epsilon, 0.95);
        match cfg.data {
            DataSource::Synth(s) => assert_eq!(s.shift_scale, 0.7),
            DataSource::File(_) => panic!("expected synthetic data"),
        }
    }

    #[test]
    fn unknown_keys_and_bad_lines() {
        assert!(ExperimentConfig::from_text("[meta]\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_text("alpha = 1\n").is_err());
        assert!(ExperimentConfig::default().set_override("meta.alpha").is_err());
        assert!("W/O-Meta".parse::<Method>().is_ok());
    }
}
