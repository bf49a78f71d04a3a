//! Run configurations: flags over a TOML file over built-in defaults.

use std::path::{Path, PathBuf};

use meshgen::preprocess::DEFAULT_NEGATION_CUES;
use meshgen::seqgen::{Combine, Variant};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GoldSampling {
    Random,
    Stratified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Modified,
    Bce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Undefined {
    Exclude,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BleuAveraging {
    Sentence,
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConceptsConfig {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub gold_subset_size: usize,
    pub gold_sampling: GoldSampling,
    pub validation_count: usize,
    pub test_count: usize,
    pub max_classes: usize,
    pub embed_dim: usize,
    pub filter_widths: Vec<usize>,
    pub maps_per_width: usize,
    pub branch_dense_units: usize,
    pub dropout: f64,
    pub lambda: Vec<f64>,
    pub seq_len: usize,
    pub objective: ObjectiveKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_token_count: usize,
    pub negation_cues: Vec<String>,
    pub pathology_classes: Option<PathBuf>,
}

impl Default for TrainConceptsConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            out: None,
            seed: 42,
            gold_subset_size: 1000,
            gold_sampling: GoldSampling::Random,
            validation_count: 300,
            test_count: 300,
            max_classes: 102,
            embed_dim: 128,
            filter_widths: vec![3, 4, 5],
            maps_per_width: 512,
            branch_dense_units: 254,
            dropout: 0.5,
            lambda: vec![0.5, 0.2, 0.3],
            seq_len: meshgen::preprocess::REPORT_LEN,
            objective: ObjectiveKind::Modified,
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            patience: 10,
            threshold: 0.5,
            min_token_count: 1,
            negation_cues: DEFAULT_NEGATION_CUES.iter().map(|s| s.to_string()).collect(),
            pathology_classes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConceptsConfig {
    pub model: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threshold: f64,
}

impl Default for PredictConceptsConfig {
    fn default() -> Self {
        Self {
            model: None,
            corpus: None,
            out: None,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainGeneratorConfig {
    pub annotations: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub variant: Variant,
    pub combine: Option<Combine>,
    pub hidden: usize,
    pub word_dim: Option<usize>,
    pub transition_dim: Option<usize>,
    pub image_before_start: bool,
    pub seed: u64,
    pub validation_count: usize,
    pub test_count: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
}

impl Default for TrainGeneratorConfig {
    fn default() -> Self {
        Self {
            annotations: None,
            embeddings: None,
            out: None,
            variant: Variant::Rnn1,
            combine: None,
            hidden: 512,
            word_dim: None,
            transition_dim: None,
            image_before_start: false,
            seed: 42,
            validation_count: 300,
            test_count: 300,
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub model: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ids: Option<PathBuf>,
    pub temperature: Option<f64>,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            model: None,
            embeddings: None,
            out: None,
            ids: None,
            temperature: None,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub pred: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub pathology_classes: Option<PathBuf>,
    pub undefined: Undefined,
    pub bleu_mode: BleuAveraging,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            pred: None,
            truth: None,
            out: None,
            pathology_classes: None,
            undefined: Undefined::Exclude,
            bleu_mode: BleuAveraging::Sentence,
        }
    }
}

/// Loads a config file, or the defaults when no file is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("config {}: {e}", path.display())))
}

/// Writes the resolved config next to the run's outputs.
pub fn echo<T: Serialize>(config: &T, out_dir: &Path) -> CliResult<()> {
    let text = toml::to_string(config).map_err(|e| CliError::config(format!("cannot serialise config: {e}")))?;
    meshgen::data::write_atomic(&out_dir.join(ECHO_FILE), text.as_bytes())?;
    Ok(())
}

pub fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::config(format!("missing required --{flag}")))
}

/// Creates the output directory.
pub fn out_dir(value: &Option<PathBuf>) -> CliResult<&Path> {
    let dir = required(value, "out")?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Replaces `target` with the flag value when the flag was given.
pub fn set<T>(target: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *target = v;
    }
}
