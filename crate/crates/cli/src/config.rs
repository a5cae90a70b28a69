use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mtpbias_core::corpus::CorpusConfig;
use mtpbias_core::decoding::DecodeConfig;
use mtpbias_core::experiment::{AblationRow, EvalSettings, TuneGrid};
use mtpbias_core::model::ModelConfig;
use mtpbias_core::training::TrainingConfig;

use crate::error::{CliError, Result};

/// File name of the resolved configuration written next to every output.
pub const RESOLVED: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub training: TrainingConfig,
    pub decode: DecodeConfig,
    pub eval: EvalSection,
    pub paths: Paths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Bias-list sizes evaluated by `eval`.
    pub list_sizes: Vec<usize>,
    /// Biasing weights evaluated by `eval`; empty means `decode.lambda`.
    pub lambdas: Vec<f64>,
    /// Thresholds evaluated by `eval`; empty means `decode.gamma`.
    pub gammas: Vec<f64>,
    pub sweep_lambdas: Vec<f64>,
    pub rows: Vec<String>,
    pub heuristic_weights: Option<Vec<f32>>,
    pub settings: EvalSettings,
    pub tune: TuneGrid,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            list_sizes: vec![0, 100, 200, 500],
            lambdas: Vec::new(),
            gammas: Vec::new(),
            sweep_lambdas: vec![1.0, 2.0, 4.0, 8.0],
            rows: AblationRow::ALL.iter().map(|r| r.id().to_string()).collect(),
            heuristic_weights: None,
            settings: EvalSettings::default(),
            tune: TuneGrid::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub reports_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus_dir: "runs/corpus".into(),
            checkpoint_dir: "runs/model".into(),
            reports_dir: "runs/reports".into(),
        }
    }
}

impl RunConfig {
    /// Parses a config file (or the defaults when `path` is `None`) and
    /// applies `section.key=value` overrides, whose values are TOML.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        self.training.validate(&self.model)?;
        self.decode.validate()?;
        if self.model.vocab_size != self.corpus.vocab.size {
            return Err(CliError::Config(format!(
                "model.vocab_size {} differs from corpus.vocab.size {}",
                self.model.vocab_size, self.corpus.vocab.size
            )));
        }
        if self.model.feature_dim != self.corpus.feature_dim {
            return Err(CliError::Config(format!(
                "model.feature_dim {} differs from corpus.feature_dim {}",
                self.model.feature_dim, self.corpus.feature_dim
            )));
        }
        if self.eval.list_sizes.is_empty() {
            return Err(CliError::Config("eval.list_sizes must not be empty".into()));
        }
        if self.eval.settings.jobs == 0 {
            return Err(CliError::Config("eval.settings.jobs must be positive".into()));
        }
        for r in &self.eval.rows {
            AblationRow::parse(r)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RESOLVED), self.to_toml()?)?;
        Ok(())
    }

    pub fn lambdas(&self) -> Vec<f64> {
        if self.eval.lambdas.is_empty() {
            vec![self.decode.lambda]
        } else {
            self.eval.lambdas.clone()
        }
    }

    pub fn gammas(&self) -> Vec<f64> {
        if self.eval.gammas.is_empty() {
            vec![self.decode.gamma]
        } else {
            self.eval.gammas.clone()
        }
    }

    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            max_len: self.decode.max_len,
            ..self.eval.settings.clone()
        }
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut at = table;
    for s in sections {
        let entry = at
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        at = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {s} is not a section")))?;
    }
    at.insert(last.to_string(), value);
    Ok(())
}
