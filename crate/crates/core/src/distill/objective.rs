use super::attention::ClassAttention;
use super::config::DistillConfig;
use super::loss::{ag_loss_layers, pa_loss, patch_token_alignment, total_loss};
use super::projector::{Projector, ProjectorVars};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{EncoderOutput, EncoderVars};

/// Everything the student needs from one teacher pass over one view.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTargets {
    pub class_token: Vec<f64>,
    /// Kept only when patch-token alignment is enabled.
    pub patch_tokens: Option<Tensor>,
    /// Class attention of every teacher layer, first to last.
    pub attention: Vec<ClassAttention>,
}

impl TeacherTargets {
    pub fn from_output(out: &EncoderOutput, keep_patches: bool) -> Self {
        TeacherTargets {
            class_token: out.class_token.clone(),
            patch_tokens: keep_patches.then(|| out.patch_tokens.clone()),
            attention: (0..out.attention.num_layers())
                .map(|l| out.attention.class_attention(l))
                .collect(),
        }
    }
}

/// Per-sample loss handles on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    /// Class-token alignment, plus patch alignment when enabled.
    pub pa: Var,
    pub ag: Var,
    pub total: Var,
}

/// `L_c + λ·L_a` for one sample.
///
/// With `λ = 0` the guidance term is still evaluated for reporting but kept
/// off the gradient path.
pub fn sample_loss(
    tape: &mut Tape,
    targets: &TeacherTargets,
    student: &EncoderVars,
    student_grid: usize,
    projector: &Projector,
    proj_vars: &ProjectorVars,
    cfg: &DistillConfig,
) -> Result<SampleLoss> {
    let t_cls = tape.constant(Tensor::vector(targets.class_token.clone()));
    let mut pa = pa_loss(tape, t_cls, student.class_token, projector, proj_vars, cfg.pa_reduction)?;
    if cfg.align_patch_tokens {
        let patches = targets
            .patch_tokens
            .as_ref()
            .ok_or_else(|| Error::contract("patch alignment enabled but teacher patch tokens were not kept"))?;
        let t_patches = tape.constant(patches.clone());
        let extra = patch_token_alignment(tape, t_patches, student.patch_tokens, projector, proj_vars)?;
        pa = tape.add(pa, extra)?;
    }

    let grid = (student_grid, student_grid);
    let ag = if cfg.lambda == 0.0 {
        // Re-host the student rows as constants so no gradient flows.
        let rows: Vec<Vec<Var>> = student
            .class_rows
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|&r| {
                        let v = tape.value(r).clone();
                        tape.constant(v)
                    })
                    .collect()
            })
            .collect();
        let v = ag_loss_layers(tape, &targets.attention, &rows, grid, cfg)?;
        tape.detach(v)
    } else {
        ag_loss_layers(tape, &targets.attention, &student.class_rows, grid, cfg)?
    };
    let total = total_loss(tape, pa, ag, cfg.lambda)?;
    Ok(SampleLoss { pa, ag, total })
}
