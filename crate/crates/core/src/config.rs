//! TOML experiment files.
//!
//! ```toml
//! [model]
//! kind = "lenet5"          # lenet5 | vgg16 | vgg19
//! widths = [8, 16, 32]     # lenet5: conv1, conv2, hidden fc
//! classes = 10
//!
//! [data]
//! train = "mnist:train"
//! test = "mnist:test"
//!
//! [train]
//! epochs = 20
//!
//! [growth]
//! beta = 0.6
//!
//! [prune]
//! gamma_w = 0.5
//!
//! [hardware]
//! word_bits = 16
//! ```
//!
//! Every key is optional; omitted keys take the library defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::HwConfig;
use crate::error::{Error, Result};
use crate::graph::NetworkSpec;
use crate::plasticity::{NoiseMode, PlasticityConfig, SelectionPolicy};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Lenet5,
    Vgg16,
    Vgg19,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// LeNet-5 widths `[conv1, conv2, hidden]`.
    pub widths: Vec<usize>,
    /// VGG first-block width; later blocks use `seed * [1, 2, 4, 8, 8]`.
    pub seed_width: Option<usize>,
    /// LeNet-5 input `[channels, height, width]`.
    pub input: Vec<usize>,
    pub classes: usize,
    /// Seed of the weight initialization stream.
    pub init_seed: u64,
    /// Reference widths, conv and fc, ending with the class count.
    pub baseline: Option<Vec<usize>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Lenet5,
            widths: vec![8, 16, 32],
            seed_width: None,
            input: vec![1, 28, 28],
            classes: 10,
            init_seed: 0,
            baseline: None,
        }
    }
}

impl ModelSection {
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        if self.classes < 2 {
            return Err(Error::Config(format!("classes = {} must be at least 2", self.classes)));
        }
        match self.kind {
            ModelKind::Lenet5 => {
                let [c1, c2, hidden] = self.widths[..] else {
                    return Err(Error::Config(format!("lenet5 needs 3 widths, got {:?}", self.widths)));
                };
                let [c, h, w] = self.input[..] else {
                    return Err(Error::Config(format!("input must be [c, h, w], got {:?}", self.input)));
                };
                if [c1, c2, hidden, c, h, w].contains(&0) {
                    return Err(Error::Config("widths and input extents must be positive".into()));
                }
                Ok(NetworkSpec::lenet5_for_input((c, h, w), c1, c2, hidden, self.classes))
            }
            ModelKind::Vgg16 | ModelKind::Vgg19 => {
                let per_block: &[usize] = if self.kind == ModelKind::Vgg16 {
                    &[2, 2, 3, 3, 3]
                } else {
                    &[2, 2, 4, 4, 4]
                };
                let seed = self.seed_width.unwrap_or(64);
                if seed == 0 {
                    return Err(Error::Config("seed_width must be positive".into()));
                }
                Ok(NetworkSpec::vgg_depth(per_block, seed, self.classes))
            }
        }
    }

    /// The reference widths used for comparison; LeNet-5 defaults to
    /// `[20, 50, 500, classes]`, VGG to the 64-wide model.
    pub fn baseline_widths(&self) -> Vec<usize> {
        if let Some(b) = &self.baseline {
            return b.clone();
        }
        match self.kind {
            ModelKind::Lenet5 => vec![20, 50, 500, self.classes],
            ModelKind::Vgg16 | ModelKind::Vgg19 => {
                let dense = ModelSection {
                    seed_width: Some(64),
                    ..self.clone()
                };
                dense
                    .network_spec()
                    .map(|s| {
                        s.layers
                            .iter()
                            .filter_map(|l| match l {
                                crate::graph::LayerSpec::Conv { out, .. } | crate::graph::LayerSpec::Fc { out } => {
                                    Some(*out)
                                }
                                _ => None,
                            })
                            .collect()
                    })
                    .unwrap_or_default()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Source string such as `mnist:train` or `synth:classes=10,n=100`.
    pub train: Option<String>,
    pub test: Option<String>,
    /// Directory holding the MNIST IDX files.
    pub mnist_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr0: d.lr0,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrowthSection {
    pub beta: f64,
    pub sigma: f64,
    pub mu: f64,
    pub noise: NoiseMode,
    pub f_growth: f64,
    pub tau_capa: Option<usize>,
    pub selection_policy: SelectionPolicy,
    pub rng_seed: u64,
}

impl Default for GrowthSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        let p = PlasticityConfig::default();
        Self {
            beta: p.beta,
            sigma: p.sigma,
            mu: p.mu,
            noise: p.noise,
            f_growth: d.f_growth,
            tau_capa: None,
            selection_policy: p.selection_policy,
            rng_seed: p.rng_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub gamma_w: f64,
    pub gamma_f: f64,
    pub gamma_n: f64,
    pub f_pruning: f64,
    pub tau_accu: f64,
    pub max_iterations: Option<usize>,
}

impl Default for PruneSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        let p = PlasticityConfig::default();
        Self {
            gamma_w: p.gamma_w,
            gamma_f: p.gamma_f,
            gamma_n: p.gamma_n,
            f_pruning: d.f_pruning,
            tau_accu: d.tau_accu,
            max_iterations: d.max_prune_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub growth: GrowthSection,
    pub prune: PruneSection,
    pub hardware: HwConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.train_config()?;
        cfg.model.network_spec()?;
        cfg.hardware.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Trainer settings. `tau_capa` defaults to the first baseline width.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let baseline = self.model.baseline_widths();
        let tau_capa = match (self.growth.tau_capa, baseline.first()) {
            (Some(t), _) => t,
            (None, Some(&b)) => b,
            (None, None) => return Err(Error::Config("tau_capa needs a baseline".into())),
        };
        let cfg = TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr0: self.train.lr0,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            f_growth: self.growth.f_growth,
            f_pruning: self.prune.f_pruning,
            tau_capa,
            tau_accu: self.prune.tau_accu,
            baseline_widths: baseline,
            max_prune_iterations: self.prune.max_iterations,
            seed: self.train.seed,
            plasticity: PlasticityConfig {
                beta: self.growth.beta,
                sigma: self.growth.sigma,
                mu: self.growth.mu,
                noise: self.growth.noise,
                gamma_w: self.prune.gamma_w,
                gamma_f: self.prune.gamma_f,
                gamma_n: self.prune.gamma_n,
                selection_policy: self.growth.selection_policy,
                rng_seed: self.growth.rng_seed,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads a bare `[hardware]`-style table; a file holding a `[hardware]`
/// section is accepted as well.
pub fn load_hw_config(path: &Path) -> Result<HwConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_hw_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_hw_config(text: &str) -> Result<HwConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let hw: HwConfig = match table.get("hardware") {
        Some(section) => section.clone().try_into(),
        None => toml::Value::Table(table).try_into(),
    }
    .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    hw.validate()?;
    Ok(hw)
}
