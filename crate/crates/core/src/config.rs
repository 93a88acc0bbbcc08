//! Experiment configuration: JSON files with strict schemas, validated
//! completely before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::fusion::FusionSpec;
use crate::nn::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

pub const METHOD_UNIMODAL: &str = "unimodal";
pub const METHOD_CNN_SUM: &str = "cnn_sum";
pub const METHOD_CNN_MAJOR: &str = "cnn_major";

/// Score-level methods reuse per-modality models instead of training a
/// fused one, so they carry no FusionSpec.
pub fn is_score_method(name: &str) -> bool {
    matches!(name, METHOD_UNIMODAL | METHOD_CNN_SUM | METHOD_CNN_MAJOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Pools generated on the fly; the experiment runner re-derives the
    /// generator seed per repetition.
    Synthetic { spec: SynthSpec },
    /// Pre-extracted embeddings in JSON-lines files.
    Embeddings {
        train_path: PathBuf,
        test_path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden ReLU layer widths of each modality network, before the
    /// embedding layer. Empty means the embedding layer reads the raw
    /// features directly.
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    /// Width of the post-fusion joint representation layer.
    #[serde(default = "default_joint_dim")]
    pub joint_dim: usize,
}

fn default_embedding_dim() -> usize {
    1024
}

fn default_joint_dim() -> usize {
    1024
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dims: Vec::new(),
            embedding_dim: default_embedding_dim(),
            joint_dim: default_joint_dim(),
        }
    }
}

/// One comparison row group. Score methods (`unimodal`, `cnn_sum`,
/// `cnn_major`) take no fusion spec; every other method requires one.
/// Within a method's FusionSpec, subset indices refer to positions in the
/// evaluated modality subset, not the full modality list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: String,
    #[serde(default)]
    pub fusion: Option<FusionSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub methods: Vec<MethodConfig>,
    /// Modality index subsets to evaluate, indices into the sorted
    /// modality-name list. None means one subset covering everything.
    #[serde(default)]
    pub subsets: Option<Vec<Vec<usize>>>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
}

fn default_repetitions() -> usize {
    5
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("experiment.methods is empty".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("experiment.repetitions must be >= 1".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for method in &self.methods {
            if method.name.is_empty() {
                return Err(Error::Config("experiment method with empty name".into()));
            }
            if !seen.insert(&method.name) {
                return Err(Error::Config(format!(
                    "duplicate experiment method {:?}",
                    method.name
                )));
            }
            match (&method.fusion, is_score_method(&method.name)) {
                (Some(_), true) => {
                    return Err(Error::Config(format!(
                        "method {:?} is score-level and takes no fusion spec",
                        method.name
                    )));
                }
                (None, false) => {
                    return Err(Error::Config(format!(
                        "method {:?} requires a fusion spec",
                        method.name
                    )));
                }
                _ => {}
            }
        }
        if let Some(subsets) = &self.subsets {
            if subsets.is_empty() {
                return Err(Error::Config("experiment.subsets is empty".into()));
            }
            for subset in subsets {
                if subset.is_empty() {
                    return Err(Error::Config("experiment subset is empty".into()));
                }
                let mut sorted = subset.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != subset.len() {
                    return Err(Error::Config(format!(
                        "experiment subset {subset:?} repeats a modality index"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    /// Global seed: every random decision downstream derives from it.
    #[serde(default)]
    pub seed: u64,
    pub data: DataSource,
    #[serde(default = "default_sets_per_subject")]
    pub sets_per_subject: usize,
    #[serde(default = "default_sets_per_subject")]
    pub sets_per_subject_test: usize,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Fusion used by the single-model `train` command; experiment methods
    /// carry their own specs.
    #[serde(default = "default_fusion")]
    pub fusion: FusionSpec,
    #[serde(default)]
    pub experiment: Option<ExperimentGrid>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

fn default_sets_per_subject() -> usize {
    250
}

fn default_fusion() -> FusionSpec {
    FusionSpec::generalized(crate::fusion::DEFAULT_SKETCH_DIM, 0)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        if self.sets_per_subject == 0 {
            return Err(Error::Config("sets_per_subject must be >= 1".into()));
        }
        if self.sets_per_subject_test == 0 {
            return Err(Error::Config("sets_per_subject_test must be >= 1".into()));
        }
        if self.model.embedding_dim == 0 {
            return Err(Error::Config("model.embedding_dim must be >= 1".into()));
        }
        if self.model.joint_dim == 0 {
            return Err(Error::Config("model.joint_dim must be >= 1".into()));
        }
        if self.model.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("model.hidden_dims entries must be >= 1".into()));
        }
        self.train.validate()?;
        if self.fusion.sketch_dim == 0 {
            return Err(Error::Config("fusion.sketch_dim must be >= 1".into()));
        }
        if let DataSource::Synthetic { spec } = &self.data {
            spec.validate()?;
        }
        if let Some(grid) = &self.experiment {
            grid.validate()?;
        }
        Ok(())
    }

    /// The comparison grid run when the config omits one: score baselines
    /// plus the three feature-fusion methods, over all modalities, using
    /// the config's sketch dimension.
    pub fn grid_or_default(&self) -> ExperimentGrid {
        self.experiment.clone().unwrap_or_else(|| {
            let d = self.fusion.sketch_dim;
            ExperimentGrid {
                methods: vec![
                    MethodConfig {
                        name: METHOD_UNIMODAL.into(),
                        fusion: None,
                    },
                    MethodConfig {
                        name: METHOD_CNN_SUM.into(),
                        fusion: None,
                    },
                    MethodConfig {
                        name: METHOD_CNN_MAJOR.into(),
                        fusion: None,
                    },
                    MethodConfig {
                        name: "concat".into(),
                        fusion: Some(FusionSpec::concat()),
                    },
                    MethodConfig {
                        name: "tensor_sketch".into(),
                        fusion: Some(FusionSpec::tensor_sketch(d, 0)),
                    },
                    MethodConfig {
                        name: "generalized".into(),
                        fusion: Some(FusionSpec::generalized(d, 0)),
                    },
                ],
                subsets: None,
                repetitions: default_repetitions(),
            }
        })
    }
}
