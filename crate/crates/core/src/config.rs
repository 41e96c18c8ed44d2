//! Flat `section.key=value` configuration for the command-line harness.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, so an empty file is a complete configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugmentPolicy;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::mean_teacher::{AdamConfig, EmaConfig, TrainerConfig};
use crate::network::{FusionMode, NetworkConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_test: usize,
    /// Labeled samples held out for best-checkpoint selection.
    pub n_validation: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_labeled: 16,
            n_unlabeled: 66,
            n_test: 10,
            n_validation: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub split: SplitConfig,
    pub augment: AugmentPolicy,
    pub network: NetworkConfig,
    pub loss: LossWeights,
    pub ema: EmaConfig,
    pub optimizer: AdamConfig,
    pub total_epochs: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub init_seed: u64,
    pub train_seed: u64,
    /// Keep a numbered checkpoint every this many epochs (0 disables them).
    pub checkpoint_every: usize,
    pub use_russ: bool,
    pub use_spatial_attention: bool,
    /// When false the unlabeled split is ignored and training is supervised only.
    pub use_unlabeled: bool,
    pub ablation_seeds: usize,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("data"),
            dataset: DatasetSpec::default(),
            split: SplitConfig::default(),
            augment: AugmentPolicy::default(),
            network: NetworkConfig::default(),
            loss: LossWeights::default(),
            ema: EmaConfig::default(),
            optimizer: AdamConfig::default(),
            total_epochs: 200,
            labeled_batch: 4,
            unlabeled_batch: 8,
            init_seed: 0,
            train_seed: 0,
            checkpoint_every: 10,
            use_russ: true,
            use_spatial_attention: true,
            use_unlabeled: true,
            ablation_seeds: 5,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

impl TrainConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.dataset;
        let s = &self.split;
        let a = &self.augment;
        let l = &self.loss;
        let o = &self.optimizer;
        vec![
            ("data.dir", self.dataset_dir.display().to_string()),
            ("data.image_height", d.image_height.to_string()),
            ("data.image_width", d.image_width.to_string()),
            ("data.n_samples", d.n_samples.to_string()),
            ("data.tube_width_min", d.tube_width_range.0.to_string()),
            ("data.tube_width_max", d.tube_width_range.1.to_string()),
            ("data.contrast_a", d.contrast_a.to_string()),
            ("data.contrast_b", d.contrast_b.to_string()),
            ("data.noise_sigma_a", d.noise_sigma_a.to_string()),
            ("data.noise_sigma_b", d.noise_sigma_b.to_string()),
            ("data.seed", d.seed.to_string()),
            ("split.n_labeled", s.n_labeled.to_string()),
            ("split.n_unlabeled", s.n_unlabeled.to_string()),
            ("split.n_test", s.n_test.to_string()),
            ("split.n_validation", s.n_validation.to_string()),
            ("split.seed", s.seed.to_string()),
            ("augment.noise_sigma", a.noise_sigma.to_string()),
            ("augment.gamma_min", a.gamma_range.0.to_string()),
            ("augment.gamma_max", a.gamma_range.1.to_string()),
            ("augment.brightness_delta", a.brightness_delta.to_string()),
            ("augment.m_copies", a.m_copies.to_string()),
            ("network.base_width", self.network.base_width.to_string()),
            ("network.depth", self.network.depth.to_string()),
            ("network.n_classes", self.network.n_classes.to_string()),
            ("loss.alpha_sup", l.alpha_sup.to_string()),
            ("loss.lambda_max", l.lambda_max.to_string()),
            ("loss.rampup_epochs", l.rampup_epochs.to_string()),
            ("loss.dice_smooth", l.dice_smooth.to_string()),
            ("ema.decay", self.ema.decay.to_string()),
            ("optim.learning_rate", o.learning_rate.to_string()),
            ("optim.weight_decay", o.weight_decay.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.eps", o.eps.to_string()),
            ("train.total_epochs", self.total_epochs.to_string()),
            ("train.labeled_batch", self.labeled_batch.to_string()),
            ("train.unlabeled_batch", self.unlabeled_batch.to_string()),
            ("train.init_seed", self.init_seed.to_string()),
            ("train.seed", self.train_seed.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("ablation.use_russ", self.use_russ.to_string()),
            (
                "ablation.use_spatial_attention",
                self.use_spatial_attention.to_string(),
            ),
            ("ablation.use_unlabeled", self.use_unlabeled.to_string()),
            ("ablation.n_seeds", self.ablation_seeds.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.dataset;
        match key {
            "data.dir" => self.dataset_dir = PathBuf::from(v),
            "data.image_height" => d.image_height = parse_value(key, v)?,
            "data.image_width" => d.image_width = parse_value(key, v)?,
            "data.n_samples" => d.n_samples = parse_value(key, v)?,
            "data.tube_width_min" => d.tube_width_range.0 = parse_value(key, v)?,
            "data.tube_width_max" => d.tube_width_range.1 = parse_value(key, v)?,
            "data.contrast_a" => d.contrast_a = parse_value(key, v)?,
            "data.contrast_b" => d.contrast_b = parse_value(key, v)?,
            "data.noise_sigma_a" => d.noise_sigma_a = parse_value(key, v)?,
            "data.noise_sigma_b" => d.noise_sigma_b = parse_value(key, v)?,
            "data.seed" => d.seed = parse_value(key, v)?,
            "split.n_labeled" => self.split.n_labeled = parse_value(key, v)?,
            "split.n_unlabeled" => self.split.n_unlabeled = parse_value(key, v)?,
            "split.n_test" => self.split.n_test = parse_value(key, v)?,
            "split.n_validation" => self.split.n_validation = parse_value(key, v)?,
            "split.seed" => self.split.seed = parse_value(key, v)?,
            "augment.noise_sigma" => self.augment.noise_sigma = parse_value(key, v)?,
            "augment.gamma_min" => self.augment.gamma_range.0 = parse_value(key, v)?,
            "augment.gamma_max" => self.augment.gamma_range.1 = parse_value(key, v)?,
            "augment.brightness_delta" => self.augment.brightness_delta = parse_value(key, v)?,
            "augment.m_copies" => self.augment.m_copies = parse_value(key, v)?,
            "network.base_width" => self.network.base_width = parse_value(key, v)?,
            "network.depth" => self.network.depth = parse_value(key, v)?,
            "network.n_classes" => self.network.n_classes = parse_value(key, v)?,
            "loss.alpha_sup" => self.loss.alpha_sup = parse_value(key, v)?,
            "loss.lambda_max" => self.loss.lambda_max = parse_value(key, v)?,
            "loss.rampup_epochs" => self.loss.rampup_epochs = parse_value(key, v)?,
            "loss.dice_smooth" => self.loss.dice_smooth = parse_value(key, v)?,
            "ema.decay" => self.ema.decay = parse_value(key, v)?,
            "optim.learning_rate" => self.optimizer.learning_rate = parse_value(key, v)?,
            "optim.weight_decay" => self.optimizer.weight_decay = parse_value(key, v)?,
            "optim.beta1" => self.optimizer.beta1 = parse_value(key, v)?,
            "optim.beta2" => self.optimizer.beta2 = parse_value(key, v)?,
            "optim.eps" => self.optimizer.eps = parse_value(key, v)?,
            "train.total_epochs" => self.total_epochs = parse_value(key, v)?,
            "train.labeled_batch" => self.labeled_batch = parse_value(key, v)?,
            "train.unlabeled_batch" => self.unlabeled_batch = parse_value(key, v)?,
            "train.init_seed" => self.init_seed = parse_value(key, v)?,
            "train.seed" => self.train_seed = parse_value(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "ablation.use_russ" => self.use_russ = parse_value(key, v)?,
            "ablation.use_spatial_attention" => self.use_spatial_attention = parse_value(key, v)?,
            "ablation.use_unlabeled" => self.use_unlabeled = parse_value(key, v)?,
            "ablation.n_seeds" => self.ablation_seeds = parse_value(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply_assignment(line).map_err(|e| match e {
                Error::InvalidConfig { field, reason } => {
                    Error::config(field, format!("line {}: {reason}", lineno + 1))
                }
                other => other,
            })?;
        }
        Ok(())
    }

    /// Applies a single `key=value` override.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment.trim(), "expected key=value"))?;
        self.set(key.trim(), value)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply_text(text)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn network_config(&self) -> NetworkConfig {
        let fusion = if self.use_spatial_attention {
            FusionMode::SpatialAttention
        } else {
            FusionMode::Concat
        };
        NetworkConfig {
            fusion,
            ..self.network.clone()
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            augment: self.augment.clone(),
            loss: self.loss.clone(),
            ema: self.ema.clone(),
            optimizer: self.optimizer.clone(),
            total_epochs: self.total_epochs,
            use_russ: self.use_russ,
        }
    }

    /// Checks value ranges; paths are checked by the commands that use them.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.augment.validate()?;
        self.network_config().validate()?;
        self.network_config()
            .check_input_shape(self.dataset.image_height, self.dataset.image_width)?;
        self.trainer_config().validate()?;
        let s = &self.split;
        if s.n_labeled == 0 {
            return Err(Error::config("split.n_labeled", "must be at least 1"));
        }
        if s.n_validation >= s.n_labeled {
            return Err(Error::config(
                "split.n_validation",
                "must leave at least one labeled training sample",
            ));
        }
        if s.n_labeled + s.n_unlabeled + s.n_test > self.dataset.n_samples {
            return Err(Error::config(
                "split",
                format!(
                    "{} + {} + {} samples requested but data.n_samples = {}",
                    s.n_labeled, s.n_unlabeled, s.n_test, self.dataset.n_samples
                ),
            ));
        }
        if self.labeled_batch == 0 {
            return Err(Error::config("train.labeled_batch", "must be at least 1"));
        }
        if self.unlabeled_batch == 0 {
            return Err(Error::config("train.unlabeled_batch", "must be at least 1"));
        }
        if self.ablation_seeds == 0 {
            return Err(Error::config("ablation.n_seeds", "must be at least 1"));
        }
        Ok(())
    }
}
