use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "yes")]
    pub flip: bool,
    /// Random translation by up to this many pixels (zero fill), i.e. a
    /// random crop of the padded image. 0 disables cropping.
    #[serde(default)]
    pub crop_pad: usize,
}

fn yes() -> bool {
    true
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            crop_pad: 0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip: false,
            crop_pad: 0,
        }
    }
}

fn d_batch() -> usize {
    64
}
fn d_epochs() -> usize {
    100
}
fn d_lr_coeff() -> f64 {
    1.5e-4
}
fn d_wd() -> f64 {
    0.05
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}

/// Optimisation settings shared by distillation and supervised pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub total_epochs: usize,
    /// Defaults to 40, or `40·total/200` when training for fewer than 200
    /// epochs.
    #[serde(default)]
    pub warmup_epochs: Option<usize>,
    /// Base learning rate per 256 samples: `lr = lr_coeff · batch_size / 256`.
    #[serde(default = "d_lr_coeff")]
    pub lr_coeff: f64,
    #[serde(default)]
    pub final_lr: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl TrainConfig {
    pub fn base_lr(&self) -> f64 {
        self.lr_coeff * self.batch_size as f64 / 256.0
    }

    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or(if self.total_epochs >= 200 {
            40
        } else {
            (40 * self.total_epochs) / 200
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("total_epochs must be at least 1"));
        }
        if self.warmup() >= self.total_epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} must be below total_epochs {}",
                self.warmup(),
                self.total_epochs
            )));
        }
        if !(self.lr_coeff > 0.0) || !(self.final_lr >= 0.0) || self.final_lr > self.base_lr() {
            return Err(Error::config("need lr_coeff > 0 and 0 <= final_lr <= base lr"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("betas must lie in [0, 1) and eps must be > 0"));
        }
        Ok(())
    }
}
