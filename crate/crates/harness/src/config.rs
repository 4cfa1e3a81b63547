use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use pgp_core::ir::{parse_ir, NetworkIR, Variant};
use pgp_core::optim::{DEFAULT_LR_MAX, DEFAULT_LR_MIN, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};
use pgp_core::AggregateMode;
use serde::{Deserialize, Serialize};

use crate::augment::Augment;
use crate::data::{load_dataset, Splits, SyntheticSpec};

/// Everything that determines a training run. Missing keys in a JSON config
/// take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base network in IR text; the reference network when absent.
    pub net_ir: Option<PathBuf>,
    /// Directory with `train/` and `test/` splits; synthetic data when absent.
    pub data_dir: Option<PathBuf>,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub data_seed: u64,
    pub amplitude: f64,
    pub train_variant: Variant,
    pub test_variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// First seed; run `k` uses `seed + k`.
    pub seed: u64,
    pub runs: usize,
    pub augmentations: Vec<Augment>,
    pub aggregate_mode: AggregateMode,
    pub eval_batch_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = SyntheticSpec::default();
        ExperimentConfig {
            net_ir: None,
            data_dir: None,
            classes: data.classes,
            height: data.h,
            width: data.w,
            train_samples: data.train,
            test_samples: data.test,
            data_seed: data.seed,
            amplitude: data.amplitude,
            train_variant: Variant::Base,
            test_variant: Variant::Base,
            epochs: 30,
            batch_size: 64,
            lr_max: DEFAULT_LR_MAX,
            lr_min: DEFAULT_LR_MIN,
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed: 0,
            runs: 3,
            augmentations: Vec::new(),
            aggregate_mode: AggregateMode::Logits,
            eval_batch_size: 250,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size > 0, "batch_size must be positive");
        ensure!(self.eval_batch_size > 0, "eval_batch_size must be positive");
        ensure!(self.runs > 0, "runs must be positive");
        ensure!(self.classes > 0, "classes must be positive");
        ensure!(
            self.lr_max.is_finite() && self.lr_min.is_finite() && self.lr_min >= 0.0 && self.lr_max >= self.lr_min,
            "need 0 ≤ lr_min ≤ lr_max, got lr_min={} lr_max={}",
            self.lr_min,
            self.lr_max
        );
        ensure!((0.0..1.0).contains(&self.momentum), "momentum must be in [0, 1)");
        ensure!(self.weight_decay >= 0.0, "weight_decay must be non-negative");
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|k| self.seed + k).collect()
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            amplitude: self.amplitude,
            ..SyntheticSpec::new(
                self.classes,
                self.height,
                self.width,
                self.train_samples,
                self.test_samples,
                self.data_seed,
            )
        }
    }

    pub fn load_data(&self) -> Result<Splits> {
        match &self.data_dir {
            Some(dir) => load_dataset(dir, self.classes),
            None => Splits::synthetic(&self.synthetic_spec()),
        }
    }

    /// The base network for data of shape `input`.
    pub fn base_net(&self, input: (usize, usize, usize)) -> Result<NetworkIR> {
        let net = match &self.net_ir {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                parse_ir(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => NetworkIR::reference(input, self.classes)?,
        };
        ensure!(
            net.input == input,
            "network input {:?} does not match data {:?}",
            net.input,
            input
        );
        ensure!(net.is_base(), "the configured network must be a base network (no pgp, dilation 1)");
        let out = net.output_shape()?;
        ensure!(
            out.c == self.classes && out.h == 1 && out.w == 1,
            "network output is {}x{}x{}, expected {} class scores",
            out.c,
            out.h,
            out.w,
            self.classes
        );
        Ok(net)
    }
}
