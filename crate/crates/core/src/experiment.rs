//! JSON experiment documents: where the data comes from, the model and
//! training settings, and where outputs go.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::analysis::AblationMode;
use crate::data::{generate_dataset, load_dataset, load_sidecar, DatasetConfig};
use crate::embeddings::{build_label_embeddings, load_word_vectors, LabelEmbeddingTable};
use crate::encoders::VideoSample;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// A dataset given inline as a generator config, or as a path to a
/// dataset file with its JSON sidecar.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Inline(DatasetConfig),
    File(PathBuf),
}

impl Serialize for DataSource {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            DataSource::Inline(c) => c.serialize(s),
            DataSource::File(p) => p.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for DataSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        match v {
            serde_json::Value::String(p) => Ok(DataSource::File(p.into())),
            other => serde_json::from_value(other).map(DataSource::Inline).map_err(serde::de::Error::custom),
        }
    }
}

impl DataSource {
    /// The generator config: inline, or read from the file's sidecar.
    pub fn config(&self) -> Result<DatasetConfig> {
        match self {
            DataSource::Inline(c) => Ok(c.clone()),
            DataSource::File(p) => Ok(load_sidecar(p)?.config),
        }
    }

    pub fn samples(&self) -> Result<Vec<VideoSample>> {
        match self {
            DataSource::Inline(c) => generate_dataset(c),
            DataSource::File(p) => load_dataset(p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Held-out split. When absent, the training generator config is rerun
    /// with its seed advanced by one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_data: Option<DataSource>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Whitespace-separated word-vector file; labels fall back to hashed
    /// vectors when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_vectors: Option<PathBuf>,
    #[serde(default = "default_ablation_mode")]
    pub ablation_mode: AblationMode,
    pub output_dir: PathBuf,
    /// Seeds generation of inline data, initialisation and sample order.
    pub seed: u64,
}

fn default_ablation_mode() -> AblationMode {
    AblationMode::Masking
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            data: DataSource::Inline(DatasetConfig::separable(0)),
            test_data: None,
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 20,
                pretrain_epochs: 3,
                ..TrainConfig::default()
            },
            word_vectors: None,
            ablation_mode: AblationMode::Masking,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        };
        cfg.set_seed(0);
        cfg
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text)?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Sets the experiment seed and every seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.model.init_seed = seed;
        if let DataSource::Inline(c) = &mut self.data {
            c.seed = seed;
        }
    }

    /// Checks every section and reports all problems at once. File-backed
    /// data is checked when its sidecar is read.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut take = |r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Validation(p)) => problems.extend(p),
            Err(e) => problems.push(e.to_string()),
        };
        for src in std::iter::once(&self.data).chain(self.test_data.as_ref()) {
            if let DataSource::Inline(c) = src {
                take(c.validate());
            }
        }
        take(self.model.validate());
        take(self.train.validate());
        if let (DataSource::Inline(a), Some(DataSource::Inline(b))) = (&self.data, &self.test_data) {
            if a.class_region_map() != b.class_region_map() {
                take(Err(Error::Validation(vec!["test data classes differ from training classes".into()])));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig> {
        let c = self.data.config()?;
        c.validate()?;
        Ok(c)
    }

    pub fn train_samples(&self) -> Result<Vec<VideoSample>> {
        self.data.samples()
    }

    pub fn test_samples(&self) -> Result<Vec<VideoSample>> {
        match &self.test_data {
            Some(src) => src.samples(),
            None => {
                let mut c = self.dataset_config()?;
                c.seed = c.seed.wrapping_add(1);
                generate_dataset(&c)
            }
        }
    }

    pub fn label_embeddings(&self, data: &DatasetConfig) -> Result<LabelEmbeddingTable> {
        let vectors = self.word_vectors.as_deref().map(load_word_vectors).transpose()?;
        let names: Vec<Vec<String>> = data.classes.iter().map(|c| c.name.clone()).collect();
        let dim = match vectors.as_ref().and_then(|m| m.values().next()) {
            Some(v) => v.len(),
            None => self.train.embed_dim,
        };
        build_label_embeddings(&names, vectors.as_ref(), dim, self.seed)
    }

    /// Creates the output directory and writes `config.json` into it.
    pub fn write_snapshot(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.output_dir)?;
        let path = self.output_dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
