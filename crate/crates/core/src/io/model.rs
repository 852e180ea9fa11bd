use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{tensor_text, text_tensor, Checkpoint};
use crate::distill::{Activation, Projector, ProjectorWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{named, Linear, ViTConfig, ViTParams, WeightTree};

const META: &str = "meta.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    vit: ViTConfig,
    #[serde(default)]
    projector_activation: Option<Activation>,
}

/// An encoder with its optional projector and classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub config: ViTConfig,
    pub params: ViTParams,
    pub projector: Option<Projector>,
    /// `D × classes` linear classifier on the class token.
    pub head: Option<Linear<Tensor>>,
}

impl ModelFile {
    pub fn encoder(config: ViTConfig, params: ViTParams) -> Self {
        ModelFile {
            config,
            params,
            projector: None,
            head: None,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = Meta {
            vit: self.config.clone(),
            projector_activation: self.projector.as_ref().map(|p| p.activation),
        };
        let mut ck = Checkpoint::new();
        ck.push(META, text_tensor(&serde_json::to_string(&meta)?));
        for (name, t) in named(&self.params, "encoder") {
            ck.push(name, t.clone());
        }
        if let Some(p) = &self.projector {
            for (name, t) in named(&p.weights, "projector") {
                ck.push(name, t.clone());
            }
        }
        if let Some(h) = &self.head {
            for (name, t) in named(h, "head") {
                ck.push(name, t.clone());
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: Meta = serde_json::from_str(&tensor_text(ck.require(META)?)?)?;
        let config = meta.vit;
        config.validate()?;
        let mut params = ViTParams::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
        fill(&mut params, "encoder", ck)?;
        params.audit(&config)?;

        let projector = match ck.get("projector.layers.0.weight") {
            None => None,
            Some(first) => {
                let mut layers = Vec::new();
                while let (Some(w), Some(b)) = (
                    ck.get(&format!("projector.layers.{}.weight", layers.len())),
                    ck.get(&format!("projector.layers.{}.bias", layers.len())),
                ) {
                    layers.push(Linear {
                        weight: w.clone(),
                        bias: b.clone(),
                    });
                }
                let (in_dim, out_dim) = first.dims2()?;
                let p = Projector {
                    in_dim,
                    out_dim,
                    activation: meta.projector_activation.unwrap_or_default(),
                    weights: ProjectorWeights { layers },
                };
                check_projector(&p)?;
                Some(p)
            }
        };

        let head = match (ck.get("head.weight"), ck.get("head.bias")) {
            (Some(w), Some(b)) => {
                let (d, classes) = w.dims2()?;
                if d != config.embed_dim() || b.shape() != [classes] {
                    return Err(Error::config(format!(
                        "head of shape {:?}/{:?} does not fit embed dim {}",
                        w.shape(),
                        b.shape(),
                        config.embed_dim()
                    )));
                }
                Some(Linear {
                    weight: w.clone(),
                    bias: b.clone(),
                })
            }
            (None, None) => None,
            _ => return Err(Error::config("head needs both weight and bias")),
        };
        Ok(ModelFile {
            config,
            params,
            projector,
            head,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn fill<W: WeightTree<Tensor>>(tree: &mut W, prefix: &str, ck: &Checkpoint) -> Result<()> {
    let mut err = None;
    tree.visit_mut(prefix, &mut |name, slot| {
        if err.is_some() {
            return;
        }
        match ck.get(&name) {
            Some(t) if t.shape() == slot.shape() => *slot = t.clone(),
            Some(t) => {
                err = Some(Error::config(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )))
            }
            None => err = Some(Error::config(format!("checkpoint has no tensor `{name}`"))),
        }
    });
    err.map_or(Ok(()), Err)
}

fn check_projector(p: &Projector) -> Result<()> {
    let mut width = p.in_dim;
    for (i, l) in p.weights.layers.iter().enumerate() {
        let (r, c) = l.weight.dims2()?;
        if r != width || c != p.out_dim || l.bias.shape() != [c] {
            return Err(Error::config(format!(
                "projector layer {i} has shape {:?}/{:?}",
                l.weight.shape(),
                l.bias.shape()
            )));
        }
        width = c;
    }
    Ok(())
}
