use rand::Rng;

use super::config::Activation;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{init_linear, linear, Linear, WeightTree};

/// Stack of affine layers mapping student width to teacher width.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorWeights<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T> ProjectorWeights<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> ProjectorWeights<U> {
        ProjectorWeights {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("layers.{i}"), f))
                .collect(),
        }
    }
}

impl<T> WeightTree<T> for ProjectorWeights<T> {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, l) in self.layers.iter().enumerate() {
            let name = if p.is_empty() {
                format!("layers.{i}")
            } else {
                format!("{p}.layers.{i}")
            };
            l.visit(&name, f);
        }
    }
    fn visit_mut<'a>(&'a mut self, p: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let name = if p.is_empty() {
                format!("layers.{i}")
            } else {
                format!("{p}.layers.{i}")
            };
            l.visit_mut(&name, f);
        }
    }
}

/// Student → teacher feature map. Hidden layers have the teacher width and
/// are followed by the activation; the last layer is purely affine.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub weights: ProjectorWeights<Tensor>,
}

pub type ProjectorVars = ProjectorWeights<Var>;

impl Projector {
    pub fn init(in_dim: usize, out_dim: usize, depth: usize, activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        if depth == 0 || in_dim == 0 || out_dim == 0 {
            return Err(Error::config("projector needs positive depth and widths"));
        }
        let layers = (0..depth)
            .map(|i| init_linear(rng, if i == 0 { in_dim } else { out_dim }, out_dim))
            .collect();
        Ok(Projector {
            in_dim,
            out_dim,
            activation,
            weights: ProjectorWeights { layers },
        })
    }

    pub fn depth(&self) -> usize {
        self.weights.layers.len()
    }

    pub fn to_vars(&self, tape: &mut Tape, trainable: bool) -> ProjectorVars {
        self.weights.map(&mut |_, t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Applies the projector to `x` of shape `[in_dim]` or `rows × in_dim`,
    /// preserving the leading layout.
    pub fn forward(&self, tape: &mut Tape, vars: &ProjectorVars, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let (rows, width) = match shape[..] {
            [w] => (1, w),
            [r, w] => (r, w),
            _ => return Err(Error::dim(format!("projector input of shape {shape:?}"))),
        };
        if width != self.in_dim {
            return Err(Error::config(format!(
                "projector expects width {}, got {width}",
                self.in_dim
            )));
        }
        let mut h = tape.reshape(x, &[rows, width])?;
        let last = vars.layers.len() - 1;
        for (i, layer) in vars.layers.iter().enumerate() {
            h = linear(tape, h, layer)?;
            if i < last && self.activation == Activation::Gelu {
                h = tape.gelu(h);
            }
        }
        if shape.len() == 1 {
            tape.reshape(h, &[self.out_dim])
        } else {
            Ok(h)
        }
    }
}
