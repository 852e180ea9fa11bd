use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{
    aggregate_heads, interpolate_attention, kl_divergence, ag_loss_value, ClassAttention, DistillConfig,
};
use crate::error::{Error, Result};
use crate::io::{Checkpoint, ModelFile};
use crate::tensor::Tensor;
use crate::vit::vit_forward;

/// Which encoder layer to read attention from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    #[default]
    Last,
    /// Zero-based layer index.
    Index(usize),
}

/// Class-token attention of one layer for one image, ready for plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    pub layer: usize,
    pub image_size: usize,
    pub attention: ClassAttention,
    /// Log-sum aggregate over heads, length `N+1`.
    pub aggregate: Vec<f64>,
}

/// KL distances of one model's maps to a reference aggregate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionComparison {
    /// `KL(reference aggregate ‖ aggregate)`.
    pub aggregate_kl: f64,
    /// `KL(reference aggregate ‖ head h)`.
    pub head_kl: Vec<f64>,
    /// [`attention_drift`] of the two layers.
    pub drift: f64,
}

/// Attention-guidance loss between two plain records, used as a metric.
pub fn attention_drift(teacher: &ClassAttention, student: &ClassAttention, cfg: &DistillConfig) -> Result<f64> {
    ag_loss_value(teacher, student, cfg)
}

/// Runs `model` on `image` and keeps the class attention of the selected
/// layer.
pub fn export_attention(
    model: &ModelFile,
    image: &Tensor,
    layer: LayerSelector,
    cfg: &DistillConfig,
) -> Result<AttentionExport> {
    let out = vit_forward(image, &model.params, &model.config, false)?;
    let depth = out.attention.num_layers();
    let l = match layer {
        LayerSelector::Last => depth - 1,
        LayerSelector::Index(i) if i < depth => i,
        LayerSelector::Index(i) => {
            return Err(Error::config(format!("layer {i} requested, model has {depth}")));
        }
    };
    let attention = out.attention.class_attention(l);
    let aggregate = aggregate_heads(attention.heads(), cfg.temperature, cfg.log_floor)?;
    Ok(AttentionExport {
        layer: l,
        image_size: model.config.image_size,
        attention,
        aggregate,
    })
}

impl AttentionExport {
    pub fn grid(&self) -> usize {
        self.attention.grid().0
    }

    /// Patch part of each head, row-major over the grid. Each sums to the
    /// head's patch mass `1 − a_0`.
    pub fn head_maps(&self) -> Vec<Vec<f64>> {
        self.attention.heads().iter().map(|h| h[1..].to_vec()).collect()
    }

    pub fn aggregate_map(&self) -> Vec<f64> {
        self.aggregate[1..].to_vec()
    }

    /// Maps this export onto `reference`'s grid when they differ and
    /// compares it with the reference aggregate.
    pub fn compare(&self, reference: &AttentionExport, cfg: &DistillConfig) -> Result<AttentionComparison> {
        let (from, to) = (self.attention.grid(), reference.attention.grid());
        let resample = |row: &[f64]| -> Result<Vec<f64>> {
            if from == to {
                Ok(row.to_vec())
            } else {
                Ok(interpolate_attention(row, from, to, cfg.interpolation)?.values)
            }
        };
        let r = &reference.aggregate;
        let aggregate_kl = kl_divergence(r, &resample(&self.aggregate)?, cfg.log_floor)?;
        let head_kl = self
            .attention
            .heads()
            .iter()
            .map(|h| kl_divergence(r, &resample(h)?, cfg.log_floor))
            .collect::<Result<_>>()?;
        let drift = attention_drift(&reference.attention, &self.attention, cfg)?;
        Ok(AttentionComparison {
            aggregate_kl,
            head_kl,
            drift,
        })
    }

    /// Writes `head_{h}.pgm` per head and `aggregate.pgm`, upsampled to the
    /// image size, plus `attention.akd` with the raw values. Returns the
    /// written paths.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let g = self.grid();
        let mut written = Vec::new();
        let mut raw = Checkpoint::new();
        raw.push("layer", Tensor::scalar(self.layer as f64));
        for (h, map) in self.head_maps().into_iter().enumerate() {
            let path = dir.join(format!("head_{h}.pgm"));
            fs::write(&path, heatmap_pgm(&map, g, self.image_size)?)?;
            written.push(path);
            raw.push(format!("head.{h}"), Tensor::new([g, g], map)?);
            raw.push(format!("cls.{h}"), Tensor::scalar(self.attention.heads()[h][0]));
        }
        let agg = self.aggregate_map();
        let path = dir.join("aggregate.pgm");
        fs::write(&path, heatmap_pgm(&agg, g, self.image_size)?)?;
        written.push(path);
        raw.push("aggregate", Tensor::new([g, g], agg)?);
        raw.push("aggregate.cls", Tensor::scalar(self.aggregate[0]));
        let path = dir.join("attention.akd");
        raw.save(&path)?;
        written.push(path);
        Ok(written)
    }
}

/// Nearest-neighbor upsampling of a `grid×grid` map to `size×size`.
pub fn upsample_nearest(map: &[f64], grid: usize, size: usize) -> Result<Vec<f64>> {
    if map.len() != grid * grid || grid == 0 || size == 0 {
        return Err(Error::dim(format!("{} values for a {grid}x{grid} grid", map.len())));
    }
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let gy = y * grid / size;
        for x in 0..size {
            out.push(map[gy * grid + x * grid / size]);
        }
    }
    Ok(out)
}

/// 8-bit binary PGM of a map scaled so its minimum is 0 and maximum 255.
/// A constant map is written as all zeros.
pub fn heatmap_pgm(map: &[f64], grid: usize, size: usize) -> Result<Vec<u8>> {
    let up = upsample_nearest(map, grid, size)?;
    let lo = up.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = up.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = format!("P5\n{size} {size}\n255\n").into_bytes();
    bytes.extend(up.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(bytes)
}
