use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{Checkpoint, Dataset, ModelFile};
use crate::tensor::Tensor;
use crate::vit::forward_unchecked;

/// Tolerance on the unit norm of normalized rows.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Class-token features, one row per sample, with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    features: Tensor,
    labels: Vec<usize>,
    normalized: bool,
}

impl FeatureBank {
    /// `features` is `n×d`. With `normalize`, rows are scaled to unit L2
    /// norm; an all-zero row stays zero.
    pub fn new(features: Tensor, labels: Vec<usize>, normalize: bool) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::dim(format!("feature matrix must be 2-D, got {:?}", features.shape())));
        }
        if features.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} feature rows but {} labels",
                features.shape()[0],
                labels.len()
            )));
        }
        if let Some(v) = features.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature {v}")));
        }
        let mut bank = FeatureBank {
            features,
            labels,
            normalized: false,
        };
        if normalize {
            bank.normalize();
        }
        Ok(bank)
    }

    pub fn normalize(&mut self) {
        let d = self.dim();
        if d > 0 {
            for row in self.features.data_mut().chunks_mut(d) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
        }
        self.normalized = true;
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features.data()[i * d..(i + 1) * d]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Named tensors `features`, `labels` and `normalized` (a 0/1 scalar).
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.push("features", self.features.clone());
        ck.push("labels", Tensor::vector(self.labels.iter().map(|&l| l as f64).collect()));
        ck.push("normalized", Tensor::scalar(self.normalized as u8 as f64));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let features = ck.require("features")?.clone();
        let labels = ck
            .require("labels")?
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Dataset(format!("label {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let normalized = ck.require("normalized")?.item()? != 0.0;
        let mut bank = FeatureBank::new(features, labels, false)?;
        bank.normalized = normalized;
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Contract check used by the classifiers.
    pub(crate) fn require_normalized(&self, what: &str) -> Result<()> {
        if !self.normalized {
            return Err(Error::contract(format!("{what} bank is not L2-normalized")));
        }
        Ok(())
    }
}

/// Encoder class tokens (before any projector) of every sample, in dataset
/// order, without augmentation. The bank is L2-normalized.
pub fn extract_features(model: &ModelFile, data: &Dataset) -> Result<FeatureBank> {
    model.params.audit(&model.config)?;
    let cfg = &model.config;
    if cfg.image_size != data.height || cfg.image_size != data.width || cfg.in_chans != data.channels {
        return Err(Error::config(format!(
            "model expects {}x{}x{} images, dataset has {}x{}x{}",
            cfg.in_chans, cfg.image_size, cfg.image_size, data.channels, data.height, data.width
        )));
    }
    let rows: Vec<Vec<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| Ok(forward_unchecked(&data.image(i), &model.params, cfg, false)?.class_token))
        .collect::<Result<_>>()?;
    let d = cfg.embed_dim();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let labels = (0..data.len()).map(|i| data.label(i)).collect();
    FeatureBank::new(Tensor::new([data.len(), d], flat)?, labels, true)
}
