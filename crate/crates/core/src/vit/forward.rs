use super::config::{BlockForm, PosEmbed, ViTConfig};
use super::params::{BlockWeights, Linear, Norm, ViTParams, VitVars};
use crate::distill::ClassAttention;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Handles into a tape for one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    /// Final (normalized) tokens, `(N+1)×D`.
    pub tokens: Var,
    /// Row 0 of `tokens`, shape `[D]`.
    pub class_token: Var,
    /// Rows `1..=N` of `tokens`, shape `N×D`.
    pub patch_tokens: Var,
    /// `maps[l][h]`: post-softmax attention map of layer `l`, head `h`.
    pub maps: Vec<Vec<Var>>,
    /// `class_rows[l][h]`: row 0 of `maps[l][h]`, shape `[N+1]`.
    pub class_rows: Vec<Vec<Var>>,
}

/// Per-layer, per-head class-token attention extracted from a pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    /// Side length of the square patch grid.
    pub grid: usize,
    pub layers: Vec<LayerAttention>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttention {
    /// One probability vector of length `N+1` per head.
    pub class_rows: Vec<Vec<f64>>,
    /// Full `(N+1)×(N+1)` maps, kept only on request.
    pub full: Option<Vec<Tensor>>,
}

impl AttentionRecord {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn class_attention(&self, layer: usize) -> ClassAttention {
        ClassAttention::new_unchecked(self.layers[layer].class_rows.clone(), (self.grid, self.grid))
    }

    pub fn last(&self) -> ClassAttention {
        self.class_attention(self.layers.len() - 1)
    }
}

/// Plain-value result of [`vit_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub class_token: Vec<f64>,
    pub patch_tokens: Tensor,
    pub attention: AttentionRecord,
}

/// Cuts a `C×H×W` image into `N` flattened patches (`N × C·p·p`), grid rows
/// first, each patch flattened channel-major then row-major.
pub fn patchify(image: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    let (c, s, p) = (cfg.in_chans, cfg.image_size, cfg.patch_size);
    if image.shape() != [c, s, s] {
        return Err(Error::config(format!(
            "image shape {:?} does not match config [{c}, {s}, {s}]",
            image.shape()
        )));
    }
    let side = cfg.grid_side();
    let px = image.data();
    let mut out = Vec::with_capacity(image.numel());
    for gy in 0..side {
        for gx in 0..side {
            for ch in 0..c {
                for y in 0..p {
                    let row = (ch * s + gy * p + y) * s + gx * p;
                    out.extend_from_slice(&px[row..row + p]);
                }
            }
        }
    }
    Tensor::new([side * side, cfg.patch_dim()], out)
}

/// Fixed 2-D sine/cosine position table, `(N+1)×D` with a zero class row.
/// Half the channels encode the grid row, half the column.
pub fn sincos_table(cfg: &ViTConfig) -> Tensor {
    let d = cfg.embed_dim();
    let side = cfg.grid_side();
    let quarter = d / 4;
    let mut out = vec![0.0; cfg.tokens() * d];
    for gy in 0..side {
        for gx in 0..side {
            let row = &mut out[(1 + gy * side + gx) * d..(2 + gy * side + gx) * d];
            for (half, pos) in [(0, gy as f64), (1, gx as f64)] {
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    row[half * 2 * quarter + i] = (pos * omega).sin();
                    row[half * 2 * quarter + quarter + i] = (pos * omega).cos();
                }
            }
        }
    }
    Tensor::new([cfg.tokens(), d], out).expect("table shape")
}

pub(crate) fn linear(tape: &mut Tape, x: Var, l: &Linear<Var>) -> Result<Var> {
    let y = tape.matmul(x, l.weight)?;
    tape.add_row(y, l.bias)
}

fn norm(tape: &mut Tape, x: Var, n: &Norm<Var>) -> Result<Var> {
    let y = tape.layer_norm(x)?;
    let y = tape.mul_row(y, n.gamma)?;
    tape.add_row(y, n.beta)
}

/// Tokens `z⁰ = [cls; patches · W + b] + pos`, shape `(N+1)×D`.
pub fn patch_embed(tape: &mut Tape, vars: &VitVars, image: &Tensor, cfg: &ViTConfig) -> Result<Var> {
    let patches = tape.constant(patchify(image, cfg)?);
    let projected = linear(tape, patches, &vars.patch_embed)?;
    let cls = tape.reshape(vars.cls_token, &[1, cfg.embed_dim()])?;
    let z = tape.concat(&[cls, projected], 0)?;
    let pos = match (cfg.pos_embed, vars.pos_embed) {
        (PosEmbed::Learnable, Some(p)) => p,
        (PosEmbed::FixedSincos, None) => tape.constant(sincos_table(cfg)),
        _ => return Err(Error::config("position embedding does not match config")),
    };
    tape.add(z, pos)
}

/// Multi-head self-attention over `z: T×D`. Returns the output-projected
/// head concatenation and the `H` post-softmax `T×T` maps.
pub fn msa_forward(
    tape: &mut Tape,
    z: Var,
    block: &BlockWeights<Var>,
    cfg: &ViTConfig,
) -> Result<(Var, Vec<Var>)> {
    let d = cfg.head_dim;
    let q = linear(tape, z, &block.query)?;
    let k = linear(tape, z, &block.key)?;
    let v = linear(tape, z, &block.value)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut maps = Vec::with_capacity(cfg.heads);
    let mut outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * d, (h + 1) * d);
        let qh = tape.slice(q, 1, lo, hi)?;
        let kh = tape.slice(k, 1, lo, hi)?;
        let vh = tape.slice(v, 1, lo, hi)?;
        let logits = tape.matmul_t(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let attn = tape.softmax(logits, 1)?;
        outs.push(tape.matmul(attn, vh)?);
        maps.push(attn);
    }
    let y = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat(&outs, 1)?
    };
    Ok((linear(tape, y, &block.proj)?, maps))
}

fn mlp(tape: &mut Tape, x: Var, block: &BlockWeights<Var>) -> Result<Var> {
    let h = linear(tape, x, &block.fc1)?;
    let h = tape.gelu(h);
    linear(tape, h, &block.fc2)
}

/// One transformer block in the configured [`BlockForm`].
pub fn block_forward(
    tape: &mut Tape,
    z: Var,
    block: &BlockWeights<Var>,
    cfg: &ViTConfig,
) -> Result<(Var, Vec<Var>)> {
    match cfg.block_form {
        BlockForm::PaperEq4 => {
            let (y, maps) = msa_forward(tape, z, block, cfg)?;
            let s = tape.add(y, z)?;
            let u = norm(tape, s, &block.ln_mlp)?;
            let m = mlp(tape, u, block)?;
            Ok((tape.add(m, z)?, maps))
        }
        BlockForm::PreLn => {
            let ln = block
                .ln_attn
                .as_ref()
                .ok_or_else(|| Error::config("pre_ln block without ln_attn weights"))?;
            let a = norm(tape, z, ln)?;
            let (y, maps) = msa_forward(tape, a, block, cfg)?;
            let x = tape.add(z, y)?;
            let u = norm(tape, x, &block.ln_mlp)?;
            let m = mlp(tape, u, block)?;
            Ok((tape.add(x, m)?, maps))
        }
    }
}

/// Full encoder pass recorded on `tape`.
pub fn encode(tape: &mut Tape, vars: &VitVars, image: &Tensor, cfg: &ViTConfig) -> Result<EncoderVars> {
    if vars.blocks.len() != cfg.layers {
        return Err(Error::config(format!(
            "{} blocks for a {}-layer config",
            vars.blocks.len(),
            cfg.layers
        )));
    }
    let mut z = patch_embed(tape, vars, image, cfg)?;
    let mut maps = Vec::with_capacity(cfg.layers);
    for block in &vars.blocks {
        let (next, m) = block_forward(tape, z, block, cfg)?;
        z = next;
        maps.push(m);
    }
    let tokens = norm(tape, z, &vars.norm)?;
    let t = cfg.tokens();
    let d = cfg.embed_dim();
    let cls_row = tape.slice(tokens, 0, 0, 1)?;
    let class_token = tape.reshape(cls_row, &[d])?;
    let patch_tokens = tape.slice(tokens, 0, 1, t)?;
    let mut class_rows = Vec::with_capacity(maps.len());
    for layer in &maps {
        let mut rows = Vec::with_capacity(layer.len());
        for &m in layer {
            let r = tape.slice(m, 0, 0, 1)?;
            rows.push(tape.reshape(r, &[t])?);
        }
        class_rows.push(rows);
    }
    Ok(EncoderVars {
        tokens,
        class_token,
        patch_tokens,
        maps,
        class_rows,
    })
}

/// Gradient-free encoder pass over plain tensors.
pub fn vit_forward(
    image: &Tensor,
    params: &ViTParams,
    cfg: &ViTConfig,
    record_full_maps: bool,
) -> Result<EncoderOutput> {
    params.audit(cfg)?;
    forward_unchecked(image, params, cfg, record_full_maps)
}

/// [`vit_forward`] without the parameter audit, for hot loops over a model
/// that has already been audited.
pub(crate) fn forward_unchecked(
    image: &Tensor,
    params: &ViTParams,
    cfg: &ViTConfig,
    record_full_maps: bool,
) -> Result<EncoderOutput> {
    let mut tape = Tape::new();
    let vars = params.to_vars(&mut tape, false);
    let enc = encode(&mut tape, &vars, image, cfg)?;
    let layers = enc
        .class_rows
        .iter()
        .zip(&enc.maps)
        .map(|(rows, maps)| LayerAttention {
            class_rows: rows.iter().map(|&r| tape.value(r).data().to_vec()).collect(),
            full: record_full_maps.then(|| maps.iter().map(|&m| tape.value(m).clone()).collect()),
        })
        .collect();
    Ok(EncoderOutput {
        class_token: tape.value(enc.class_token).data().to_vec(),
        patch_tokens: tape.value(enc.patch_tokens).clone(),
        attention: AttentionRecord {
            grid: cfg.grid_side(),
            layers,
        },
    })
}
