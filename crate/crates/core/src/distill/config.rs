use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Resampling kernel for moving teacher patch attention onto the student grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Keys cubic convolution, `a = -0.5`.
    #[default]
    Bicubic,
    Bilinear,
    Nearest,
}

/// How several heads are fused into one distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Softmax of the tempered sum of log-probabilities.
    #[default]
    LogSum,
    Mean,
    Min,
    Max,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::LogSum,
        Aggregation::Mean,
        Aggregation::Min,
        Aggregation::Max,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::LogSum => "log_sum",
            Aggregation::Mean => "mean",
            Aggregation::Min => "min",
            Aggregation::Max => "max",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionLayers {
    #[default]
    Last,
    /// Average of the per-layer losses; needs equal depths.
    All,
}

impl AttentionLayers {
    pub fn name(self) -> &'static str {
        match self {
            AttentionLayers::Last => "last",
            AttentionLayers::All => "all",
        }
    }
}

/// Reduction over heads in the per-head cases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadReduction {
    #[default]
    Sum,
    Mean,
}

/// Reduction of the squared class-token error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaReduction {
    #[default]
    Mean,
    SumSquares,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

/// Teacher/student shape relation for attention guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgCase {
    /// Same heads, same patches: per-head KL.
    A,
    /// Same heads, different patches: interpolate teacher, per-head KL.
    B,
    /// Different heads, same patches: aggregate both sides, one KL.
    C,
    /// Both differ: interpolate teacher, aggregate both sides, one KL.
    D,
}

impl AgCase {
    pub fn name(self) -> &'static str {
        match self {
            AgCase::A => "a",
            AgCase::B => "b",
            AgCase::C => "c",
            AgCase::D => "d",
        }
    }

    pub fn detect(teacher_heads: usize, student_heads: usize, teacher_patches: usize, student_patches: usize) -> Self {
        match (teacher_heads == student_heads, teacher_patches == student_patches) {
            (true, true) => AgCase::A,
            (true, false) => AgCase::B,
            (false, true) => AgCase::C,
            (false, false) => AgCase::D,
        }
    }
}

fn default_lambda() -> f64 {
    0.1
}
fn default_temperature() -> f64 {
    10.0
}
fn default_log_floor() -> f64 {
    1e-8
}
fn default_projector_depth() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_log_floor")]
    pub log_floor: f64,
    #[serde(default)]
    pub interpolation: Interpolation,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub attention_layers: AttentionLayers,
    #[serde(default)]
    pub align_patch_tokens: bool,
    #[serde(default)]
    pub head_reduction: HeadReduction,
    #[serde(default)]
    pub pa_reduction: PaReduction,
    #[serde(default = "default_projector_depth")]
    pub projector_depth: usize,
    #[serde(default)]
    pub projector_activation: Activation,
    /// Force a case instead of detecting it from the shapes.
    #[serde(default)]
    pub case: Option<AgCase>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: default_lambda(),
            temperature: default_temperature(),
            log_floor: default_log_floor(),
            interpolation: Interpolation::default(),
            aggregation: Aggregation::default(),
            attention_layers: AttentionLayers::default(),
            align_patch_tokens: false,
            head_reduction: HeadReduction::default(),
            pa_reduction: PaReduction::default(),
            projector_depth: default_projector_depth(),
            projector_activation: Activation::default(),
            case: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config(format!(
                "log_floor must be > 0, got {}",
                self.log_floor
            )));
        }
        if self.projector_depth == 0 {
            return Err(Error::config("projector_depth must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = DistillConfig::default();
        assert_eq!(c.lambda, 0.1);
        assert_eq!(c.temperature, 10.0);
        assert_eq!(c.log_floor, 1e-8);
        assert_eq!(c.interpolation, Interpolation::Bicubic);
        assert_eq!(c.aggregation, Aggregation::LogSum);
        assert_eq!(c.projector_depth, 4);
        c.validate().unwrap();
        let parsed: DistillConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, c);
    }

    #[test]
    fn validation() {
        let mut c = DistillConfig {
            lambda: -0.1,
            ..DistillConfig::default()
        };
        assert!(c.validate().is_err());
        c.lambda = 0.0;
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        c.temperature = 1.0;
        c.log_floor = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn case_detection() {
        assert_eq!(AgCase::detect(4, 4, 16, 16), AgCase::A);
        assert_eq!(AgCase::detect(4, 4, 16, 4), AgCase::B);
        assert_eq!(AgCase::detect(4, 2, 16, 16), AgCase::C);
        assert_eq!(AgCase::detect(4, 2, 16, 4), AgCase::D);
    }
}
