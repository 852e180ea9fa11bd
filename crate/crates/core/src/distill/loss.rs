//! Projector alignment, attention guidance and their weighted sum.
//!
//! Teacher-side inputs are always treated as fixed targets: tensors are
//! detached before use and attention arrives as plain [`ClassAttention`]
//! values, so no gradient can reach the teacher.

use super::attention::{aggregate_var, kl_divergence_var, ClassAttention};
use super::config::{AgCase, AttentionLayers, DistillConfig, HeadReduction, PaReduction};
use super::interpolate::interpolate_attention;
use super::projector::{Projector, ProjectorVars};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

fn squared_error(tape: &mut Tape, target: Var, pred: Var, reduction: PaReduction) -> Result<Var> {
    let diff = tape.sub(target, pred)?;
    let sq = tape.mul(diff, diff)?;
    Ok(match reduction {
        PaReduction::Mean => tape.mean(sq),
        PaReduction::SumSquares => tape.sum(sq),
    })
}

/// Squared error between the teacher class token and the projected student
/// class token, reduced over the teacher width.
pub fn pa_loss(
    tape: &mut Tape,
    teacher_cls: Var,
    student_cls: Var,
    projector: &Projector,
    vars: &ProjectorVars,
    reduction: PaReduction,
) -> Result<Var> {
    let t_width = tape.value(teacher_cls).numel();
    if tape.value(teacher_cls).rank() != 1 || t_width != projector.out_dim {
        return Err(Error::config(format!(
            "teacher class token of shape {:?} does not match projector output {}",
            tape.value(teacher_cls).shape(),
            projector.out_dim
        )));
    }
    let target = tape.detach(teacher_cls);
    let projected = projector.forward(tape, vars, student_cls)?;
    squared_error(tape, target, projected, reduction)
}

/// Mean squared error between teacher patch tokens and projected student patch
/// tokens, averaged over tokens and channels. Grids must match.
pub fn patch_token_alignment(
    tape: &mut Tape,
    teacher_patches: Var,
    student_patches: Var,
    projector: &Projector,
    vars: &ProjectorVars,
) -> Result<Var> {
    let (n_t, d_t) = tape.value(teacher_patches).dims2()?;
    let (n_s, _) = tape.value(student_patches).dims2()?;
    if n_t != n_s {
        return Err(Error::Unsupported(format!(
            "patch token alignment between {n_t} teacher and {n_s} student patches"
        )));
    }
    if d_t != projector.out_dim {
        return Err(Error::config(format!(
            "teacher width {d_t} does not match projector output {}",
            projector.out_dim
        )));
    }
    let target = tape.detach(teacher_patches);
    let projected = projector.forward(tape, vars, student_patches)?;
    squared_error(tape, target, projected, PaReduction::Mean)
}

fn check_grid(grid: (usize, usize), len: usize, who: &str) -> Result<()> {
    if grid.0 != grid.1 {
        return Err(Error::dim(format!("{who} grid {}x{} is not square", grid.0, grid.1)));
    }
    if grid.0 * grid.1 + 1 != len {
        return Err(Error::dim(format!(
            "{who} attention has {len} entries, grid {}x{} needs {}",
            grid.0,
            grid.1,
            grid.0 * grid.1 + 1
        )));
    }
    Ok(())
}

fn reduce_heads(tape: &mut Tape, terms: &[Var], reduction: HeadReduction) -> Result<Var> {
    let rows: Vec<Var> = terms
        .iter()
        .map(|&t| tape.reshape(t, &[1]))
        .collect::<Result<_>>()?;
    let stacked = if rows.len() == 1 {
        rows[0]
    } else {
        tape.concat(&rows, 0)?
    };
    Ok(match reduction {
        HeadReduction::Sum => tape.sum(stacked),
        HeadReduction::Mean => tape.mean(stacked),
    })
}

/// Attention-guidance loss for one layer.
///
/// `student` holds one `[N_s + 1]` class-attention row per student head on
/// `tape`. The teacher/student case is detected from head and patch counts
/// unless `cfg.case` forces one.
pub fn ag_loss(
    tape: &mut Tape,
    teacher: &ClassAttention,
    student: &[Var],
    student_grid: (usize, usize),
    cfg: &DistillConfig,
) -> Result<Var> {
    let m_s = student
        .first()
        .map(|&v| tape.value(v).numel())
        .ok_or_else(|| Error::contract("student attention has no heads"))?;
    check_grid(teacher.grid(), teacher.num_patches() + 1, "teacher")?;
    check_grid(student_grid, m_s, "student")?;
    let (h_t, h_s) = (teacher.num_heads(), student.len());
    let (n_t, n_s) = (teacher.num_patches(), m_s - 1);
    let case = match cfg.case {
        Some(forced) => {
            let ok = match forced {
                AgCase::A => h_t == h_s && n_t == n_s,
                AgCase::B => h_t == h_s,
                AgCase::C => n_t == n_s,
                AgCase::D => true,
            };
            if !ok {
                return Err(Error::dim(format!(
                    "case {forced:?} cannot pair {h_t} heads/{n_t} patches with {h_s} heads/{n_s} patches"
                )));
            }
            forced
        }
        None => AgCase::detect(h_t, h_s, n_t, n_s),
    };
    let eps = cfg.log_floor;

    let interpolated = || -> Result<Vec<Vec<f64>>> {
        teacher
            .heads()
            .iter()
            .map(|h| {
                interpolate_attention(h, teacher.grid(), student_grid, cfg.interpolation).map(|r| r.values)
            })
            .collect()
    };

    match case {
        AgCase::A | AgCase::B => {
            let targets = if case == AgCase::A {
                teacher.heads().to_vec()
            } else {
                interpolated()?
            };
            let terms = targets
                .iter()
                .zip(student)
                .map(|(p, &q)| kl_divergence_var(tape, p, q, eps))
                .collect::<Result<Vec<_>>>()?;
            reduce_heads(tape, &terms, cfg.head_reduction)
        }
        AgCase::C | AgCase::D => {
            let targets = if case == AgCase::C {
                teacher.heads().to_vec()
            } else {
                interpolated()?
            };
            let t_vars: Vec<Var> = targets
                .into_iter()
                .map(|h| tape.constant(Tensor::vector(h)))
                .collect();
            let t_agg = aggregate_var(tape, &t_vars, cfg.aggregation, cfg.temperature, eps)?;
            let target = tape.value(t_agg).data().to_vec();
            let s_agg = aggregate_var(tape, student, cfg.aggregation, cfg.temperature, eps)?;
            kl_divergence_var(tape, &target, s_agg, eps)
        }
    }
}

/// Attention guidance over the configured layer selection. `teacher` and
/// `student` are ordered from the first to the last layer.
pub fn ag_loss_layers(
    tape: &mut Tape,
    teacher: &[ClassAttention],
    student: &[Vec<Var>],
    student_grid: (usize, usize),
    cfg: &DistillConfig,
) -> Result<Var> {
    let (Some(t_last), Some(s_last)) = (teacher.last(), student.last()) else {
        return Err(Error::contract("attention guidance over zero layers"));
    };
    match cfg.attention_layers {
        AttentionLayers::Last => ag_loss(tape, t_last, s_last, student_grid, cfg),
        AttentionLayers::All => {
            if teacher.len() != student.len() {
                return Err(Error::Unsupported(format!(
                    "all-layer attention guidance between {} teacher and {} student layers",
                    teacher.len(),
                    student.len()
                )));
            }
            let per_layer = teacher
                .iter()
                .zip(student)
                .map(|(t, s)| {
                    let l = ag_loss(tape, t, s, student_grid, cfg)?;
                    tape.reshape(l, &[1])
                })
                .collect::<Result<Vec<_>>>()?;
            let stacked = if per_layer.len() == 1 {
                per_layer[0]
            } else {
                tape.concat(&per_layer, 0)?
            };
            Ok(tape.mean(stacked))
        }
    }
}

/// Value of [`ag_loss`] for two plain attention records; no gradients.
pub fn ag_loss_value(teacher: &ClassAttention, student: &ClassAttention, cfg: &DistillConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = student
        .heads()
        .iter()
        .map(|h| tape.constant(Tensor::vector(h.clone())))
        .collect();
    let loss = ag_loss(&mut tape, teacher, &vars, student.grid(), cfg)?;
    tape.value(loss).item()
}

/// `L = pa + λ·ag`.
pub fn total_loss(tape: &mut Tape, pa: Var, ag: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::contract(format!("lambda {lambda} must be >= 0")));
    }
    let weighted = tape.scale(ag, lambda);
    let pa = tape.reshape(pa, &[])?;
    let weighted = tape.reshape(weighted, &[])?;
    tape.add(pa, weighted)
}
