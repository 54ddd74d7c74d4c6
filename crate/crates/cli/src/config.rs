//! Experiment configuration documents and dataset resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hessianscope::data::{self, Dataset};
use hessianscope::model::NetworkSpec;
use hessianscope::train::TrainConfig;

use crate::error::{CliError, CliResult};

/// Environment variable naming a directory that holds MNIST IDX files.
pub const MNIST_DIR_ENV: &str = "HESSIANSCOPE_MNIST_DIR";

/// One JSON document describing a complete run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub recipe: Option<String>,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: Option<NetworkSpec>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub phase2: Option<Phase2Config>,
    #[serde(default)]
    pub spectrum: SpectrumConfig,
    #[serde(default)]
    pub rmt: RmtConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Blobs {
        k: usize,
        dim: usize,
        per_cluster: usize,
        #[serde(default = "one")]
        cov_scale: f64,
    },
    /// A single standard normal cloud with uninformative binary labels.
    SingleBlob { dim: usize, n: usize },
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
        train: usize,
        #[serde(default)]
        test: usize,
        /// Side of the square pooling block; 1 keeps all 784 pixels.
        #[serde(default = "one_usize")]
        pool: usize,
    },
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

/// Continuation with a different batch size after the main training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase2Config {
    pub batch_size: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    #[serde(default)]
    pub cutoff: Option<f64>,
    #[serde(default)]
    pub decompose: bool,
    #[serde(default = "default_cap")]
    pub cap: usize,
    /// Number of leading eigenvalues kept in per-rank profile tables.
    #[serde(default = "default_top")]
    pub top: usize,
}

fn default_cap() -> usize {
    hessianscope::autodiff::DEFAULT_DENSE_CAP
}

fn default_top() -> usize {
    120
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig {
            cutoff: None,
            decompose: false,
            cap: default_cap(),
            top: default_top(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmtConfig {
    #[serde(default = "default_rmt_m")]
    pub m: usize,
    #[serde(default = "default_rmt_n")]
    pub n: usize,
    #[serde(default)]
    pub spikes: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_tau")]
    pub tau_rel: f64,
    #[serde(default)]
    pub margin: Option<f64>,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

fn default_rmt_m() -> usize {
    500
}

fn default_rmt_n() -> usize {
    500
}

fn default_trials() -> usize {
    10
}

fn default_tau() -> f64 {
    hessianscope::ggn::DEFAULT_TAU_REL
}

fn default_bins() -> usize {
    60
}

impl Default for RmtConfig {
    fn default() -> Self {
        RmtConfig {
            m: default_rmt_m(),
            n: default_rmt_n(),
            spikes: Vec::new(),
            trials: default_trials(),
            tau_rel: default_tau(),
            margin: None,
            bins: default_bins(),
        }
    }
}

/// Values a recipe iterates over.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub k: Vec<usize>,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub batch_sizes: Vec<usize>,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model(&self) -> CliResult<&NetworkSpec> {
        self.model.as_ref().ok_or_else(|| CliError::Config("config has no `model` section".into()))
    }

    pub fn data(&self) -> CliResult<&DataConfig> {
        self.data.as_ref().ok_or_else(|| CliError::Config("config has no `data` section".into()))
    }

    pub fn train(&self) -> CliResult<&TrainConfig> {
        self.train.as_ref().ok_or_else(|| CliError::Config("config has no `train` section".into()))
    }
}

/// Training set and optional held-out set built from a data section.
pub struct LoadedData {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl DataConfig {
    /// Builds the datasets; all randomness comes from `seed`.
    pub fn load(&self, seed: u64) -> CliResult<LoadedData> {
        match *self {
            DataConfig::Blobs {
                k,
                dim,
                per_cluster,
                cov_scale,
            } => Ok(LoadedData {
                train: data::gen_blobs(k, dim, per_cluster, cov_scale, seed)?,
                test: None,
            }),
            DataConfig::SingleBlob { dim, n } => Ok(LoadedData {
                train: data::gen_single_blob(dim, n, seed)?,
                test: None,
            }),
            DataConfig::Mnist {
                ref dir,
                train,
                test,
                pool,
            } => {
                let dir = dir.clone().unwrap_or_else(default_mnist_dir);
                let (images, labels) = find_idx_pair(&dir)?;
                let raw = data::read_idx(&images, &labels)?;
                let idx = data::subsample_indices(raw.len(), train + test, seed)?;
                let mut all = raw.to_dataset(&idx, seed)?;
                if pool > 1 {
                    all = all.downsample_images(raw.rows, pool)?;
                }
                let (train_set, test_set) = all.split_at(train);
                Ok(LoadedData {
                    train: train_set,
                    test: (test > 0).then_some(test_set),
                })
            }
        }
    }

    /// Input dimension the loaded data will have.
    pub fn input_dim(&self) -> usize {
        match *self {
            DataConfig::Blobs { dim, .. } | DataConfig::SingleBlob { dim, .. } => dim,
            DataConfig::Mnist { pool, .. } => {
                let side = 28 / pool.max(1);
                side * side
            }
        }
    }
}

pub fn default_mnist_dir() -> PathBuf {
    std::env::var_os(MNIST_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

/// Locates an image/label IDX pair inside `dir`, compressed or not.
pub fn find_idx_pair(dir: &Path) -> CliResult<(PathBuf, PathBuf)> {
    const STEMS: [(&str, &str); 3] = [
        ("mnist10k-images-idx3-ubyte", "mnist10k-labels-idx1-ubyte"),
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ];
    for (img, lbl) in STEMS {
        for ext in ["", ".gz"] {
            let (i, l) = (dir.join(format!("{img}{ext}")), dir.join(format!("{lbl}{ext}")));
            if i.is_file() && l.is_file() {
                return Ok((i, l));
            }
        }
    }
    Err(CliError::Config(format!(
        "no MNIST IDX files found in {} (set {MNIST_DIR_ENV})",
        dir.display()
    )))
}
