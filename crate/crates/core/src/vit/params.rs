//! Weight containers for the encoder.
//!
//! Every container is generic over its leaf type so that the same layout holds
//! concrete [`Tensor`]s, tape handles ([`Var`]) during a forward pass, or
//! optimizer moments. [`ViTParams`] is the concrete instantiation.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, Uniform};

use super::config::{BlockForm, PosEmbed, ViTConfig};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Affine map `x · weight + bias` with `weight: in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

/// Layer-norm affine pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T> {
    /// Present only for [`BlockForm::PreLn`].
    pub ln_attn: Option<Norm<T>>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub proj: Linear<T>,
    pub ln_mlp: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitWeights<T> {
    pub patch_embed: Linear<T>,
    pub cls_token: T,
    /// Learnable table over all `N + 1` tokens; `None` for fixed embeddings.
    pub pos_embed: Option<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub norm: Norm<T>,
}

pub type ViTParams = VitWeights<Tensor>;
pub type VitVars = VitWeights<Var>;

/// Named traversal over a weight container in a fixed order.
pub trait WeightTree<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T> Linear<T> {
    pub fn map<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Linear<U> {
        Linear {
            weight: f(&join(p, "weight"), &self.weight),
            bias: f(&join(p, "bias"), &self.bias),
        }
    }
}

impl<T> WeightTree<T> for Linear<T> {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(p, "weight"), &self.weight);
        f(join(p, "bias"), &self.bias);
    }
    fn visit_mut<'a>(&'a mut self, p: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(join(p, "weight"), &mut self.weight);
        f(join(p, "bias"), &mut self.bias);
    }
}

impl<T> Norm<T> {
    pub fn map<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Norm<U> {
        Norm {
            gamma: f(&join(p, "gamma"), &self.gamma),
            beta: f(&join(p, "beta"), &self.beta),
        }
    }
}

impl<T> WeightTree<T> for Norm<T> {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(p, "gamma"), &self.gamma);
        f(join(p, "beta"), &self.beta);
    }
    fn visit_mut<'a>(&'a mut self, p: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(join(p, "gamma"), &mut self.gamma);
        f(join(p, "beta"), &mut self.beta);
    }
}

impl<T> BlockWeights<T> {
    pub fn map<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> BlockWeights<U> {
        BlockWeights {
            ln_attn: self.ln_attn.as_ref().map(|n| n.map(&join(p, "ln_attn"), f)),
            query: self.query.map(&join(p, "attn.query"), f),
            key: self.key.map(&join(p, "attn.key"), f),
            value: self.value.map(&join(p, "attn.value"), f),
            proj: self.proj.map(&join(p, "attn.proj"), f),
            ln_mlp: self.ln_mlp.map(&join(p, "ln_mlp"), f),
            fc1: self.fc1.map(&join(p, "mlp.fc1"), f),
            fc2: self.fc2.map(&join(p, "mlp.fc2"), f),
        }
    }
}

impl<T> WeightTree<T> for BlockWeights<T> {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a T)) {
        if let Some(n) = &self.ln_attn {
            n.visit(&join(p, "ln_attn"), f);
        }
        self.query.visit(&join(p, "attn.query"), f);
        self.key.visit(&join(p, "attn.key"), f);
        self.value.visit(&join(p, "attn.value"), f);
        self.proj.visit(&join(p, "attn.proj"), f);
        self.ln_mlp.visit(&join(p, "ln_mlp"), f);
        self.fc1.visit(&join(p, "mlp.fc1"), f);
        self.fc2.visit(&join(p, "mlp.fc2"), f);
    }
    fn visit_mut<'a>(&'a mut self, p: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        if let Some(n) = &mut self.ln_attn {
            n.visit_mut(&join(p, "ln_attn"), f);
        }
        self.query.visit_mut(&join(p, "attn.query"), f);
        self.key.visit_mut(&join(p, "attn.key"), f);
        self.value.visit_mut(&join(p, "attn.value"), f);
        self.proj.visit_mut(&join(p, "attn.proj"), f);
        self.ln_mlp.visit_mut(&join(p, "ln_mlp"), f);
        self.fc1.visit_mut(&join(p, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(p, "mlp.fc2"), f);
    }
}

impl<T> VitWeights<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> VitWeights<U> {
        VitWeights {
            patch_embed: self.patch_embed.map("patch_embed", f),
            cls_token: f("cls_token", &self.cls_token),
            pos_embed: self.pos_embed.as_ref().map(|t| f("pos_embed", t)),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("blocks.{i}"), f))
                .collect(),
            norm: self.norm.map("norm", f),
        }
    }
}

impl<T> WeightTree<T> for VitWeights<T> {
    fn visit<'a>(&'a self, p: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.patch_embed.visit(&join(p, "patch_embed"), f);
        f(join(p, "cls_token"), &self.cls_token);
        if let Some(t) = &self.pos_embed {
            f(join(p, "pos_embed"), t);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(p, &format!("blocks.{i}")), f);
        }
        self.norm.visit(&join(p, "norm"), f);
    }
    fn visit_mut<'a>(&'a mut self, p: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        self.patch_embed.visit_mut(&join(p, "patch_embed"), f);
        f(join(p, "cls_token"), &mut self.cls_token);
        if let Some(t) = &mut self.pos_embed {
            f(join(p, "pos_embed"), t);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(p, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join(p, "norm"), f);
    }
}

/// Every leaf of a tree as `(name, leaf)` in traversal order.
pub fn named<'a, T, W: WeightTree<T> + ?Sized>(tree: &'a W, prefix: &str) -> Vec<(String, &'a T)> {
    let mut out = Vec::new();
    tree.visit(prefix, &mut |n, t| out.push((n, t)));
    out
}

/// Gradients of every leaf in a var tree, zero-filled where none arrived.
pub fn collect_grads<W>(vars: &W, tape: &Tape) -> Vec<Tensor>
where
    W: WeightTree<Var> + ?Sized,
{
    let mut out = Vec::new();
    vars.visit("", &mut |_, v| out.push(tape.grad_or_zeros(*v)));
    out
}

pub(crate) fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::new([fan_in, fan_out], data).expect("shape matches")
}

pub fn init_linear(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Linear<Tensor> {
    Linear {
        weight: xavier(rng, fan_in, fan_out),
        bias: Tensor::zeros([fan_out]),
    }
}

fn init_norm(n: usize) -> Norm<Tensor> {
    Norm {
        gamma: Tensor::full([n], 1.0),
        beta: Tensor::zeros([n]),
    }
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

impl ViTParams {
    /// Xavier-uniform linear layers, zero biases, unit LN gains, and
    /// N(0, 0.02²) class token / position table.
    pub fn init(cfg: &ViTConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim();
        let hidden = cfg.mlp_hidden();
        let blocks = (0..cfg.layers)
            .map(|_| BlockWeights {
                ln_attn: (cfg.block_form == BlockForm::PreLn).then(|| init_norm(d)),
                query: init_linear(rng, d, d),
                key: init_linear(rng, d, d),
                value: init_linear(rng, d, d),
                proj: init_linear(rng, d, d),
                ln_mlp: init_norm(d),
                fc1: init_linear(rng, d, hidden),
                fc2: init_linear(rng, hidden, d),
            })
            .collect();
        Ok(VitWeights {
            patch_embed: init_linear(rng, cfg.patch_dim(), d),
            cls_token: normal(rng, &[d], 0.02),
            pos_embed: (cfg.pos_embed == PosEmbed::Learnable)
                .then(|| normal(rng, &[cfg.tokens(), d], 0.02)),
            blocks,
            norm: init_norm(d),
        })
    }

    /// The parameter layout a config implies, as `(name, shape)` pairs.
    pub fn expected_shapes(cfg: &ViTConfig) -> Result<Vec<(String, Vec<usize>)>> {
        cfg.validate()?;
        // Shapes only; the RNG draws are irrelevant here.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = Self::init(cfg, &mut rng)?;
        Ok(named(&template, "")
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect())
    }

    /// Checks that names and shapes agree with `cfg`, listing every offender.
    pub fn audit(&self, cfg: &ViTConfig) -> Result<()> {
        let expected = Self::expected_shapes(cfg)?;
        let actual: Vec<(String, Vec<usize>)> = named(self, "")
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let mut problems = Vec::new();
        for (name, shape) in &expected {
            match actual.iter().find(|(n, _)| n == name) {
                None => problems.push(format!("{name}: missing")),
                Some((_, s)) if s != shape => {
                    problems.push(format!("{name}: shape {s:?}, expected {shape:?}"))
                }
                _ => {}
            }
        }
        for (name, _) in &actual {
            if !expected.iter().any(|(n, _)| n == name) {
                problems.push(format!("{name}: unexpected"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "parameter audit failed: {}",
                problems.join("; ")
            )))
        }
    }

    pub fn num_params(&self) -> usize {
        named(self, "").iter().map(|(_, t)| t.numel()).sum()
    }

    /// Puts the weights on a tape; `trainable = false` records constants.
    pub fn to_vars(&self, tape: &mut Tape, trainable: bool) -> VitVars {
        self.map(&mut |_, t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn audit_accepts_fresh_params_and_names_offenders() {
        let cfg = ViTConfig::new(16, 8, 2, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ViTParams::init(&cfg, &mut rng).unwrap();
        p.audit(&cfg).unwrap();
        p.blocks[1].fc1.bias = Tensor::zeros([3]);
        let err = p.audit(&cfg).unwrap_err().to_string();
        assert!(err.contains("blocks.1.mlp.fc1.bias"), "{err}");
    }

    #[test]
    fn layout_depends_on_block_form_and_pos_embed() {
        let base = ViTConfig::new(16, 8, 1, 1, 4);
        let eq4 = ViTParams::expected_shapes(&base).unwrap();
        let pre = ViTParams::expected_shapes(&base.clone().with_block_form(BlockForm::PreLn)).unwrap();
        assert_eq!(pre.len(), eq4.len() + 2);
        let fixed = ViTParams::expected_shapes(&base.with_pos_embed(PosEmbed::FixedSincos)).unwrap();
        assert!(!fixed.iter().any(|(n, _)| n == "pos_embed"));
        assert!(eq4.iter().any(|(n, s)| n == "pos_embed" && s == &vec![5, 4]));
    }

    #[test]
    fn map_and_visit_agree_on_order() {
        let cfg = ViTConfig::new(16, 8, 2, 2, 4).with_block_form(BlockForm::PreLn);
        let p = ViTParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut tape = Tape::new();
        let vars = p.to_vars(&mut tape, true);
        let tensors = named(&p, "");
        let handles = named(&vars, "");
        assert_eq!(tensors.len(), handles.len());
        for ((n1, t), (n2, v)) in tensors.iter().zip(&handles) {
            assert_eq!(n1, n2);
            assert_eq!(tape.value(**v), *t);
        }
    }
}
