use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::train::TrainConfig;
use crate::vit::ViTConfig;

/// Everything a run needs, as one JSON document. Unknown keys are rejected
/// at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub vit_teacher: ViTConfig,
    pub vit_student: ViTConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    /// Distillation schedule.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Supervised teacher schedule for `make-teacher`; falls back to `train`.
    #[serde(default)]
    pub pretrain: Option<TrainConfig>,
}

fn at(path: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config(m) | Error::Contract(m) => Error::schema(path, m),
        other => other,
    })
}

impl RunConfig {
    /// Parses and validates; errors carry the JSON path of the offending
    /// value.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::schema(if path.is_empty() { "." } else { &path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        at("vit_teacher", self.vit_teacher.validate())?;
        at("vit_student", self.vit_student.validate())?;
        at("distill", self.distill.validate())?;
        at("train", self.train.validate())?;
        at("eval", self.eval.validate())?;
        if let Some(p) = &self.pretrain {
            at("pretrain", p.validate())?;
        }
        if self.vit_teacher.image_size != self.vit_student.image_size
            || self.vit_teacher.in_chans != self.vit_student.in_chans
        {
            return Err(Error::schema("vit_student", "image_size and in_chans must match the teacher"));
        }
        Ok(())
    }

    pub fn pretrain(&self) -> &TrainConfig {
        self.pretrain.as_ref().unwrap_or(&self.train)
    }
}
