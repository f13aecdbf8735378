use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, BaselineConfig, EncoderConfig, FfVariant, ModelSpec};
use crate::signal::{load_bundle, load_csv, synth_generate, Dataset, Experiment};
use crate::tokenize::TokenizerConfig;
use crate::train::TrainConfig;

/// Reporting epochs for task adaptation.
pub const TASK_ADAPT_GRID: [u64; 5] = [1, 2, 5, 20, 40];
/// Reporting epochs for dataset adaptation.
pub const DATASET_ADAPT_GRID: [u64; 5] = [1, 2, 5, 10, 20];
/// Labelled-set sizes for the scarcity sweep.
pub const SCARCITY_GRID: [usize; 3] = [100, 200, 400];

/// Where the samples come from. Paths are relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        n_classes: usize,
        per_class: usize,
        length: usize,
        noise_sigma: f64,
        seed: u64,
    },
    Bundle {
        path: PathBuf,
    },
    Csv {
        path: PathBuf,
        has_labels: bool,
        sample_rate_hz: f64,
    },
}

impl DataSource {
    /// Any failure to produce the data is reported as a config error.
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        let res = match self {
            DataSource::Synthetic {
                n_classes,
                per_class,
                length,
                noise_sigma,
                seed,
            } => synth_generate(*n_classes, *per_class, *length, *noise_sigma, *seed),
            DataSource::Bundle { path } => load_bundle(base.join(path)),
            DataSource::Csv {
                path,
                has_labels,
                sample_rate_hz,
            } => load_csv(base.join(path), *has_labels, *sample_rate_hz),
        };
        res.map_err(|e| Error::Config(format!("cannot load data: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Stratified split of one dataset.
    Baseline { test_fraction: f64 },
    /// One run per entry of `n_train`, each pretraining on `n_pretrain`
    /// held-aside samples.
    Scarcity {
        n_pretrain: usize,
        n_train: Vec<usize>,
        n_test: usize,
    },
    TaskAdapt { held_out: Vec<u8>, test_fraction: f64 },
    /// Pretrains on `pretrain_data`, fine-tunes on `data`.
    DatasetAdapt { test_fraction: f64 },
    /// Stratified split of generated data; the quick end-to-end check.
    Synthetic { test_fraction: f64 },
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Baseline { .. } => "baseline",
            ExperimentKind::Scarcity { .. } => "scarcity",
            ExperimentKind::TaskAdapt { .. } => "task_adapt",
            ExperimentKind::DatasetAdapt { .. } => "dataset_adapt",
            ExperimentKind::Synthetic { .. } => "synthetic",
        }
    }

    /// Epochs at which test accuracy goes into the result table, besides
    /// the final one.
    pub fn report_epochs(&self) -> &'static [u64] {
        match self {
            ExperimentKind::TaskAdapt { .. } => &TASK_ADAPT_GRID,
            ExperimentKind::DatasetAdapt { .. } => &DATASET_ADAPT_GRID,
            _ => &[],
        }
    }

    /// One split per sweep point, paired with its labelled-set size
    /// (0 when the split is fractional).
    pub fn splits(&self) -> Vec<(usize, Experiment)> {
        match self {
            ExperimentKind::Baseline { test_fraction } | ExperimentKind::Synthetic { test_fraction } => {
                vec![(0, Experiment::Baseline { test_fraction: *test_fraction })]
            }
            ExperimentKind::Scarcity {
                n_pretrain,
                n_train,
                n_test,
            } => n_train
                .iter()
                .map(|&n| {
                    (
                        n,
                        Experiment::Scarcity {
                            n_pretrain: *n_pretrain,
                            n_train: n,
                            n_test: *n_test,
                        },
                    )
                })
                .collect(),
            ExperimentKind::TaskAdapt {
                held_out,
                test_fraction,
            } => vec![(
                0,
                Experiment::TaskAdapt {
                    held_out: held_out.clone(),
                    test_fraction: *test_fraction,
                },
            )],
            ExperimentKind::DatasetAdapt { test_fraction } => {
                vec![(0, Experiment::DatasetAdapt { test_fraction: *test_fraction })]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Transformer,
    TransformerPretrained,
    Cnn,
    Mlp,
}

impl ModelChoice {
    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::Transformer => "transformer",
            ModelChoice::TransformerPretrained => "transformer_pretrained",
            ModelChoice::Cnn => "cnn",
            ModelChoice::Mlp => "mlp",
        }
    }
}

/// Starting point for the encoder before overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Width 256, 4 layers, 32 heads.
    Full,
    /// Width 64, 2 layers, 4 heads.
    Desk,
}

/// Optional replacements for individual encoder fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderOverrides {
    pub model_dim: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_layers: Option<usize>,
    pub dropout: Option<f64>,
    pub ff_hidden_dim: Option<usize>,
    pub ff_variant: Option<FfVariant>,
    pub mlp_embedder: Option<bool>,
}

/// A complete run description, read from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub experiment: ExperimentKind,
    pub data: DataSource,
    /// Source dataset for dataset adaptation.
    pub pretrain_data: Option<DataSource>,
    pub tokenizer: TokenizerConfig,
    pub model: ModelChoice,
    pub profile: Profile,
    pub encoder: EncoderOverrides,
    /// Schedule, batch size, augmentation and masking.
    pub train: TrainConfig,
    /// Masked pretraining epochs run before fine-tuning. Only used by
    /// `transformer_pretrained`; 0 means load `checkpoint` instead.
    pub pretrain_epochs: u64,
    pub checkpoint: Option<PathBuf>,
    /// Each seed gets its own split, initialisation and run directory.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Fill the `seconds` column of metrics files. Off keeps reruns
    /// byte-identical.
    pub record_wall_time: bool,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "baseline".into(),
            experiment: ExperimentKind::Baseline { test_fraction: 0.2 },
            data: DataSource::Bundle {
                path: "../data/cwru.sigb".into(),
            },
            pretrain_data: None,
            tokenizer: TokenizerConfig::fourier(),
            model: ModelChoice::Transformer,
            profile: Profile::Full,
            encoder: EncoderOverrides::default(),
            train: TrainConfig::default(),
            pretrain_epochs: 0,
            checkpoint: None,
            seeds: vec![0, 1, 2],
            out_dir: "../runs".into(),
            record_wall_time: false,
            base_dir: PathBuf::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad experiment config: {e}")))
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// `out_dir/name`.
    pub fn run_root(&self) -> PathBuf {
        self.resolve(&self.out_dir).join(&self.name)
    }

    pub fn augment_p(&self) -> f64 {
        self.train.augment.probability
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run name {:?} must be a plain file name", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        self.train.validate()?;
        match &self.experiment {
            ExperimentKind::Baseline { test_fraction }
            | ExperimentKind::Synthetic { test_fraction }
            | ExperimentKind::TaskAdapt { test_fraction, .. }
            | ExperimentKind::DatasetAdapt { test_fraction } => {
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(Error::Config(format!("test_fraction {test_fraction} not in (0, 1)")));
                }
            }
            ExperimentKind::Scarcity { n_train, .. } => {
                if n_train.is_empty() {
                    return Err(Error::Config("scarcity needs at least one n_train".into()));
                }
            }
        }
        if matches!(self.experiment, ExperimentKind::Synthetic { .. }) && !matches!(self.data, DataSource::Synthetic { .. }) {
            return Err(Error::Config("the synthetic experiment needs synthetic data".into()));
        }
        if matches!(self.experiment, ExperimentKind::DatasetAdapt { .. }) && self.pretrain_data.is_none() {
            return Err(Error::Config("dataset_adapt needs pretrain_data".into()));
        }
        if self.model == ModelChoice::TransformerPretrained {
            if self.pretrain_epochs == 0 && self.checkpoint.is_none() {
                return Err(Error::Config(
                    "transformer_pretrained needs a checkpoint path or pretrain_epochs > 0".into(),
                ));
            }
            if self.tokenizer.is_trainable() {
                return Err(Error::Config("pretraining needs a fixed (constant or Fourier) tokenizer".into()));
            }
        }
        self.model_spec(2).and_then(|s| s.validate())
    }

    /// Network layout for `n_classes` outputs.
    pub fn model_spec(&self, n_classes: usize) -> Result<ModelSpec> {
        let td = self.tokenizer.token_dim();
        let o = &self.encoder;
        let arch = match self.model {
            ModelChoice::Transformer | ModelChoice::TransformerPretrained => {
                let mut e = match self.profile {
                    Profile::Full => EncoderConfig {
                        input_dim: td,
                        n_classes,
                        ..EncoderConfig::default()
                    },
                    Profile::Desk => EncoderConfig::desk(td, n_classes),
                };
                e.model_dim = o.model_dim.unwrap_or(e.model_dim);
                e.n_heads = o.n_heads.unwrap_or(e.n_heads);
                e.n_layers = o.n_layers.unwrap_or(e.n_layers);
                e.dropout = o.dropout.unwrap_or(e.dropout);
                e.ff_hidden_dim = o.ff_hidden_dim.or(e.ff_hidden_dim);
                e.ff_variant = o.ff_variant.unwrap_or(e.ff_variant);
                e.mlp_embedder = o.mlp_embedder.unwrap_or(e.mlp_embedder);
                ArchConfig::Transformer(e)
            }
            ModelChoice::Cnn | ModelChoice::Mlp => {
                let b = BaselineConfig {
                    in_channels: td,
                    n_classes,
                    dropout: o.dropout.unwrap_or(BaselineConfig::default().dropout),
                };
                if self.model == ModelChoice::Cnn {
                    ArchConfig::Cnn(b)
                } else {
                    ArchConfig::Mlp(b)
                }
            }
        };
        Ok(ModelSpec {
            tokenizer: self.tokenizer.clone(),
            arch,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(ExperimentKind::TaskAdapt { held_out: vec![3], test_fraction: 0.2 }.report_epochs(), &[1, 2, 5, 20, 40]);
        assert_eq!(ExperimentKind::DatasetAdapt { test_fraction: 0.2 }.report_epochs(), &[1, 2, 5, 10, 20]);
        assert_eq!(SCARCITY_GRID, [100, 200, 400]);
    }

    #[test]
    fn pretrained_without_checkpoint_is_rejected() {
        let cfg = ExperimentConfig {
            model: ModelChoice::TransformerPretrained,
            ..ExperimentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let ok = ExperimentConfig {
            checkpoint: Some("pre.ffck".into()),
            ..cfg
        };
        ok.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"epochz": 3}"#).is_err());
    }

    #[test]
    fn overrides_apply() {
        let cfg = ExperimentConfig {
            profile: Profile::Desk,
            encoder: EncoderOverrides {
                n_layers: Some(3),
                ..Default::default()
            },
            ..ExperimentConfig::default()
        };
        let ArchConfig::Transformer(e) = cfg.model_spec(4).unwrap().arch else {
            panic!("transformer expected")
        };
        assert_eq!((e.model_dim, e.n_layers, e.n_heads, e.n_classes, e.input_dim), (64, 3, 4, 4, 3));
    }
}
