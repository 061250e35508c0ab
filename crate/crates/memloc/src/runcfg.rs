//! Run configuration: one TOML file describing a full experiment, plus
//! `key=value` overrides so a CLI flag can adjust any field without a custom
//! flag per knob. The merged ("effective") config is what gets stamped into
//! run artifacts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attrib::{AttribParams, Method, Scope};
use crate::corpus::{CollectionCriteria, CorpusParams};
use crate::deletion::DeletionParams;
use crate::inject::InjectParams;
use crate::model::{AdamParams, FinetuneParams, ModelConfig, TrainParams};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Attribution methods to run, by name; empty means all of them.
    pub methods: Vec<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0, methods: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { steps: 2000, batch_size: 16, lr: 1e-3, log_every: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectSection {
    pub sequences: usize,
    pub seq_len: usize,
    pub gamma_percent: f64,
    pub seed_offset: u64,
    pub k_values: Vec<f64>,
    pub finetune_lr: f64,
    pub finetune_max_steps: usize,
    pub finetune_loss_threshold: f64,
}

impl Default for InjectSection {
    fn default() -> Self {
        let f = FinetuneParams::default();
        let p = InjectParams::default();
        InjectSection {
            sequences: p.sequences,
            seq_len: p.seq_len,
            gamma_percent: p.gamma_percent,
            seed_offset: p.seed_offset,
            k_values: p.k_values,
            finetune_lr: f.adam.lr,
            finetune_max_steps: f.max_steps,
            finetune_loss_threshold: f.loss_threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelSection {
    pub k_values: Vec<f64>,
    pub scope: Scope,
    pub skip_bottom_layer: bool,
    pub dev_count: usize,
}

impl Default for DelSection {
    fn default() -> Self {
        let d = DeletionParams::default();
        DelSection {
            k_values: d.k_values,
            scope: d.scope,
            skip_bottom_layer: d.skip_bottom_layer,
            dev_count: d.dev_count,
        }
    }
}

/// Everything a run needs, with usable defaults for every field.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub corpus: CorpusParams,
    pub collect: CollectionCriteria,
    pub inject: InjectSection,
    pub del: DelSection,
    pub attrib: AttribParams,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        crate::report::atomic_write(path, text.as_bytes())
    }

    /// Apply one `section.field=value` override by editing the TOML form, so
    /// any field addressable in the file is addressable from the command line.
    pub fn with_override(&self, assignment: &str) -> Result<RunConfig> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let keys: Vec<&str> = path.split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(Error::Config(format!("override key `{path}` has an empty segment")));
        }
        let mut root = toml::Value::try_from(self)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;

        let mut cursor = &mut root;
        for k in &keys[..keys.len() - 1] {
            cursor = cursor
                .get_mut(k)
                .ok_or_else(|| Error::Config(format!("unknown config section `{k}`")))?;
        }
        let last = keys[keys.len() - 1];
        let slot = cursor
            .get_mut(last)
            .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?;
        *slot = parse_toml_value(raw)
            .map_err(|e| Error::Config(format!("value for `{path}`: {e}")))?;

        // No validate() here: one assignment may leave the config in a state
        // that only a later assignment makes consistent, so callers validate
        // once after applying the whole batch.
        root.try_into()
            .map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        if self.train.steps == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("train.steps and train.batch_size must be positive".into()));
        }
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            return Err(Error::Config("train.lr must be a positive number".into()));
        }
        for name in &self.run.methods {
            Method::from_name(name)?;
        }
        for &k in self.inject.k_values.iter().chain(self.del.k_values.iter()) {
            if !(k > 0.0 && k <= 100.0) {
                return Err(Error::Config(format!("k percentage {k} outside (0, 100]")));
            }
        }
        self.to_inject_params().validate(self.model.total_neurons())?;
        Ok(())
    }

    /// Requested methods, defaulting to all of them.
    pub fn methods(&self) -> Result<Vec<Method>> {
        if self.run.methods.is_empty() {
            return Ok(Method::ALL.to_vec());
        }
        self.run.methods.iter().map(|n| Method::from_name(n)).collect()
    }

    pub fn to_train_params(&self) -> TrainParams {
        TrainParams {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            adam: AdamParams::with_lr(self.train.lr),
            seed: self.run.seed,
            log_every: self.train.log_every,
        }
    }

    pub fn to_inject_params(&self) -> InjectParams {
        InjectParams {
            sequences: self.inject.sequences,
            seq_len: self.inject.seq_len,
            gamma_percent: self.inject.gamma_percent,
            seed_offset: self.inject.seed_offset,
            k_values: self.inject.k_values.clone(),
            finetune: FinetuneParams {
                adam: AdamParams::with_lr(self.inject.finetune_lr),
                max_steps: self.inject.finetune_max_steps,
                loss_threshold: self.inject.finetune_loss_threshold,
            },
            attrib: self.attrib.clone(),
        }
    }

    pub fn to_deletion_params(&self) -> DeletionParams {
        DeletionParams {
            k_values: self.del.k_values.clone(),
            scope: self.del.scope,
            skip_bottom_layer: self.del.skip_bottom_layer,
            dev_count: self.del.dev_count,
            attrib: self.attrib.clone(),
            seed: self.run.seed,
        }
    }
}

/// Parse an override value: TOML scalar/array syntax first, bare string last.
fn parse_toml_value(raw: &str) -> std::result::Result<toml::Value, String> {
    let probe = format!("v = {raw}");
    if let Ok(table) = probe.parse::<toml::Table>() {
        return Ok(table["v"].clone());
    }
    // not valid TOML as-is (e.g. an unquoted string like per_layer)
    Ok(toml::Value::String(raw.to_string()))
}
