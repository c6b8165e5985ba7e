//! Flat TOML run configuration. Every key is required and unknown keys are
//! rejected, so a config file fully determines a run.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use xmorpher::architecture::ArchConfig;
use xmorpher::registration::{Similarity, TrainConfig};
use xmorpher::windowing::WindowConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: [usize; 3],
    pub embed_channels: usize,
    pub levels: usize,
    pub rounds: usize,
    pub window: [usize; 3],
    pub magnification: [usize; 3],
    pub heads: Vec<usize>,
    pub no_cross: bool,
    pub lr: f64,
    pub iterations: usize,
    pub lambda: f64,
    /// `"mse"` or `"ncc"`.
    pub similarity: String,
    pub ncc_radius: usize,
    pub seed: u64,
    pub dice_weight: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        let train = TrainConfig::default();
        Self {
            input: arch.input,
            embed_channels: arch.embed_channels,
            levels: arch.levels,
            rounds: arch.rounds,
            window: arch.window.base,
            magnification: arch.window.magnification,
            heads: arch.heads,
            no_cross: arch.no_cross,
            lr: train.lr,
            iterations: train.iterations,
            lambda: train.lambda,
            similarity: "mse".into(),
            ncc_radius: 2,
            seed: train.seed,
            dice_weight: train.dice_weight,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| anyhow::anyhow!("{}", e.message()))?;
        cfg.arch()?;
        cfg.train()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn arch(&self) -> anyhow::Result<ArchConfig> {
        let arch = ArchConfig {
            input: self.input,
            embed_channels: self.embed_channels,
            levels: self.levels,
            rounds: self.rounds,
            window: WindowConfig {
                base: self.window,
                magnification: self.magnification,
            },
            heads: self.heads.clone(),
            no_cross: self.no_cross,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn train(&self) -> anyhow::Result<TrainConfig> {
        let similarity = match self.similarity.as_str() {
            "mse" => Similarity::Mse,
            "ncc" => Similarity::Ncc {
                radius: self.ncc_radius,
            },
            other => bail!("similarity must be \"mse\" or \"ncc\", got {other:?}"),
        };
        let cfg = TrainConfig {
            lr: self.lr,
            iterations: self.iterations,
            lambda: self.lambda,
            similarity,
            seed: self.seed,
            dice_weight: self.dice_weight,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
