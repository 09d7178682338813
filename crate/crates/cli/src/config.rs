//! Run configuration, read from a TOML file.
//!
//! Relative paths are resolved against the directory holding the config file.
//! Environment variables are never consulted.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use layoutprior::annotations::{AnnotationKind, DataType, DEFAULT_MASK_POINTS};
use layoutprior::evalsuite::{DEFAULT_BINS, DEFAULT_EPSILON, DEFAULT_GRID};
use layoutprior::Template;

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default, rename = "dataset")]
    pub datasets: Vec<DatasetConfig>,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub render: RenderSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub path: PathBuf,
    /// `box`, `key point` (or `keypoint`) or `mask`.
    pub kind: String,
    #[serde(default = "default_data_type")]
    pub data_type: String,
    pub proportion: f64,
}

fn default_data_type() -> String {
    DataType::MultipleInstances.word().to_string()
}

impl DatasetConfig {
    pub fn annotation_kind(&self) -> Result<AnnotationKind, CliError> {
        AnnotationKind::from_word(&self.kind).ok_or_else(|| {
            CliError::Config(format!(
                "dataset '{}': unknown kind '{}'",
                self.name, self.kind
            ))
        })
    }

    pub fn data_type(&self) -> Result<DataType, CliError> {
        DataType::from_word(&self.data_type).ok_or_else(|| {
            CliError::Config(format!(
                "dataset '{}': unknown data type '{}'",
                self.name, self.data_type
            ))
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Lines to draw; all available scenes when absent.
    pub lines: Option<usize>,
    /// `a` or `a+b`.
    pub templates: String,
    pub special_words: bool,
    pub mask_points: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            lines: None,
            templates: "a+b".into(),
            special_words: true,
            mask_points: DEFAULT_MASK_POINTS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateMix {
    OnlyA,
    Mixed,
}

impl CorpusConfig {
    pub fn template_mix(&self) -> Result<TemplateMix, CliError> {
        match self.templates.as_str() {
            "a" => Ok(TemplateMix::OnlyA),
            "a+b" => Ok(TemplateMix::Mixed),
            other => Err(CliError::Config(format!(
                "corpus.templates must be 'a' or 'a+b', got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub context_window: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            context_window: 256,
            layers: 2,
            heads: 4,
            embed_dim: 128,
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Also keep a numbered checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Continue from `checkpoint.bin` in the output directory when present.
    pub resume: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 1000,
            batch_size: 16,
            learning_rate: 1e-3,
            checkpoint_every: 0,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub count: usize,
    /// Prompts per category for the evaluation-style generator.
    pub per_category: usize,
    pub temperature: f64,
    /// 0 disables top-k filtering.
    pub top_k: usize,
    pub top_p: Option<f64>,
    pub max_tokens: Option<usize>,
    pub constrained: bool,
    /// `a`, `b`, or absent to let the first body symbol decide.
    pub template: Option<String>,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            count: 16,
            per_category: 8,
            temperature: 1.0,
            top_k: 40,
            top_p: None,
            max_tokens: None,
            constrained: true,
            template: None,
        }
    }
}

impl SampleSection {
    pub fn template(&self) -> Result<Option<Template>, CliError> {
        match self.template.as_deref() {
            None => Ok(None),
            Some("a") => Ok(Some(Template::A)),
            Some("b") => Ok(Some(Template::B)),
            Some(other) => Err(CliError::Config(format!(
                "sample.template must be 'a' or 'b', got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub grid: usize,
    pub bins: usize,
    pub epsilon: f64,
    pub per_category: usize,
    pub retry_factor: usize,
    pub multiplicity: bool,
    pub require_minimum: bool,
    /// Categories to evaluate; all ground-truth categories when empty.
    pub categories: Vec<String>,
    /// Decoding for evaluation is unconstrained unless set.
    pub constrained: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            grid: DEFAULT_GRID,
            bins: DEFAULT_BINS,
            epsilon: DEFAULT_EPSILON,
            per_category: 80,
            retry_factor: 4,
            multiplicity: false,
            require_minimum: true,
            categories: Vec::new(),
            constrained: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSection {
    pub stroke_width: f64,
    pub font_size: f64,
}

impl Default for RenderSection {
    fn default() -> Self {
        RenderSection {
            stroke_width: 2.0,
            font_size: 12.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(e.to_string().replace('\n', " ")))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut cfg.datasets {
            d.path = base.join(&d.path);
        }
        cfg.out_dir = base.join(&cfg.out_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !self.datasets.is_empty() {
            let total: f64 = self.datasets.iter().map(|d| d.proportion).sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(CliError::Config(format!(
                    "dataset proportions sum to {total}, expected 1"
                )));
            }
        }
        for d in &self.datasets {
            if !(d.proportion >= 0.0) {
                return Err(CliError::Config(format!(
                    "dataset '{}' has a negative proportion",
                    d.name
                )));
            }
            if !d.path.exists() {
                return Err(CliError::Config(format!(
                    "dataset '{}': {} does not exist",
                    d.name,
                    d.path.display()
                )));
            }
            d.annotation_kind()?;
            d.data_type()?;
        }
        self.corpus.template_mix()?;
        self.sample.template()?;
        if self.train.batch_size == 0 {
            return Err(CliError::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 1\nout_dir = \"out\"\n").unwrap();
        assert_eq!(cfg.eval.grid, 64);
        assert_eq!(cfg.sample.top_k, 40);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn rejects_bad_proportions_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("a.json");
        std::fs::write(&data, "{}").unwrap();
        let text = format!(
            "seed = 1\nout_dir = \"o\"\n[[dataset]]\nname = \"a\"\npath = {:?}\nkind = \"box\"\nproportion = 0.4\n",
            data.display().to_string()
        );
        let cfg: RunConfig = toml::from_str(&text).unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        assert!(toml::from_str::<RunConfig>("seed = 1\nout_dir = \"o\"\nbogus = 2\n").is_err());
    }
}
