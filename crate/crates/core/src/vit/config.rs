use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the MSA and MLP halves of a block are wired together.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockForm {
    /// `z' = MLP(LN(MSA(z) + z)) + z`: one norm, placed before the MLP.
    #[default]
    PaperEq4,
    /// Conventional pre-norm block: `x = z + MSA(LN(z))`, `z' = x + MLP(LN(x))`.
    PreLn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEmbed {
    #[default]
    Learnable,
    /// 2-D sine/cosine table; the class token gets a zero row.
    FixedSincos,
}

fn default_in_chans() -> usize {
    3
}

/// Architecture hyperparameters of one vision transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_in_chans")]
    pub in_chans: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Hidden width of the MLP; `None` means `4 * embed_dim`.
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
    #[serde(default)]
    pub block_form: BlockForm,
    #[serde(default)]
    pub pos_embed: PosEmbed,
}

impl ViTConfig {
    pub fn new(image_size: usize, patch_size: usize, layers: usize, heads: usize, head_dim: usize) -> Self {
        ViTConfig {
            image_size,
            patch_size,
            in_chans: 3,
            layers,
            heads,
            head_dim,
            mlp_hidden: None,
            block_form: BlockForm::default(),
            pos_embed: PosEmbed::default(),
        }
    }

    pub fn with_block_form(mut self, form: BlockForm) -> Self {
        self.block_form = form;
        self
    }

    pub fn with_pos_embed(mut self, pos: PosEmbed) -> Self {
        self.pos_embed = pos;
        self
    }

    pub fn with_in_chans(mut self, c: usize) -> Self {
        self.in_chans = c;
        self
    }

    pub fn with_mlp_hidden(mut self, hidden: usize) -> Self {
        self.mlp_hidden = Some(hidden);
        self
    }

    pub fn embed_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or(4 * self.embed_dim())
    }

    /// Patches per side of the square grid.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.in_chans * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_chans", self.in_chans),
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        let d = self.embed_dim();
        if self.mlp_hidden() == 0 || !self.mlp_hidden().is_multiple_of(d) {
            return Err(Error::config(format!(
                "mlp_hidden {} must be a positive multiple of embed_dim {d}",
                self.mlp_hidden()
            )));
        }
        if self.pos_embed == PosEmbed::FixedSincos && !d.is_multiple_of(4) {
            return Err(Error::config(format!(
                "fixed_sincos position embedding needs embed_dim divisible by 4, got {d}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counting() {
        let cfg = ViTConfig::new(32, 8, 2, 2, 4);
        assert_eq!(cfg.num_patches(), 16);
        assert_eq!(cfg.tokens(), 17);
        assert_eq!(cfg.embed_dim(), 8);
        assert_eq!(cfg.mlp_hidden(), 32);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_non_dividing_patch() {
        assert!(ViTConfig::new(30, 8, 1, 1, 4).validate().is_err());
        assert!(ViTConfig::new(32, 8, 1, 1, 4).with_mlp_hidden(6).validate().is_err());
        assert!(ViTConfig::new(32, 8, 1, 1, 6)
            .with_pos_embed(PosEmbed::FixedSincos)
            .validate()
            .is_err());
    }

    #[test]
    fn serde_names() {
        let cfg: ViTConfig = serde_json::from_str(
            r#"{"image_size":32,"patch_size":16,"layers":1,"heads":1,"head_dim":4,
                "block_form":"pre_ln","pos_embed":"fixed_sincos"}"#,
        )
        .unwrap();
        assert_eq!(cfg.block_form, BlockForm::PreLn);
        assert_eq!(cfg.pos_embed, PosEmbed::FixedSincos);
        assert!(serde_json::from_str::<ViTConfig>(
            r#"{"image_size":32,"patch_size":16,"layers":1,"heads":1,"head_dim":4,"depth":3}"#
        )
        .is_err());
    }
}
