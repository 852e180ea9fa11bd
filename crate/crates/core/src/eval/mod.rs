//! Frozen-feature evaluation (k-NN, linear probe) and attention export.

mod export;
mod features;
mod knn;
mod probe;

use serde::{Deserialize, Serialize};

pub use export::{
    attention_drift, export_attention, heatmap_pgm, upsample_nearest, AttentionComparison, AttentionExport,
    LayerSelector,
};
pub use features::{extract_features, FeatureBank, UNIT_NORM_TOL};
pub use knn::{knn_classify, knn_predict, KnnConfig};
pub use probe::{linear_probe, train_probe, LinearProbe, ProbeConfig};

use crate::error::Result;

/// `eval` section of a run configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub knn: KnnConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.knn.validate()?;
        self.probe.validate()
    }
}
