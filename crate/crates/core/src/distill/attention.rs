use super::config::Aggregation;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Tolerance for "is a probability vector" checks on inputs.
pub const NORMALIZATION_TOL: f64 = 1e-5;

/// Class-token attention of every head of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAttention {
    heads: Vec<Vec<f64>>,
    grid: (usize, usize),
}

impl ClassAttention {
    /// Checks that each head is a probability vector of length `w·h + 1`.
    pub fn new(heads: Vec<Vec<f64>>, grid: (usize, usize)) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::contract("class attention with no heads"));
        }
        let m = grid.0 * grid.1 + 1;
        for (h, row) in heads.iter().enumerate() {
            if row.len() != m {
                return Err(Error::dim(format!(
                    "head {h} has {} entries, grid {}x{} needs {m}",
                    row.len(),
                    grid.0,
                    grid.1
                )));
            }
            check_distribution(row, &format!("head {h}"))?;
        }
        Ok(ClassAttention { heads, grid })
    }

    pub(crate) fn new_unchecked(heads: Vec<Vec<f64>>, grid: (usize, usize)) -> Self {
        ClassAttention { heads, grid }
    }

    pub fn heads(&self) -> &[Vec<f64>] {
        &self.heads
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// `(w, h)` of the patch grid.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

pub(crate) fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what}: non-finite entry {v}")));
    }
    if let Some(v) = p.iter().find(|&&v| v < 0.0) {
        return Err(Error::contract(format!("{what}: negative probability {v}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::contract(format!("{what}: sums to {s}, not 1")));
    }
    Ok(())
}

/// `KL(p ‖ q) = Σ p_j ln(max(p_j, ε) / max(q_j, ε))` with `p` a fixed target.
/// Only `q` carries gradient.
pub fn kl_divergence_var(tape: &mut Tape, p: &[f64], q: Var, eps: f64) -> Result<Var> {
    let qv = tape.value(q);
    if qv.numel() != p.len() {
        return Err(Error::dim(format!(
            "KL between lengths {} and {}",
            p.len(),
            qv.numel()
        )));
    }
    check_distribution(p, "KL target")?;
    check_distribution(qv.data(), "KL prediction")?;
    let q = if qv.rank() == 1 {
        q
    } else {
        tape.reshape(q, &[p.len()])?
    };
    let qc = tape.clamp_min(q, eps);
    let lq = tape.log(qc)?;
    let pv = tape.constant(Tensor::vector(p.to_vec()));
    let cross = tape.mul(pv, lq)?;
    let plogp = tape.constant(Tensor::vector(
        p.iter().map(|&pj| pj * pj.max(eps).ln()).collect(),
    ));
    let terms = tape.sub(plogp, cross)?;
    Ok(tape.sum(terms))
}

/// Value-only KL divergence.
pub fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    if q.is_empty() {
        return Err(Error::dim("KL of empty vectors"));
    }
    let qv = tape.constant(Tensor::vector(q.to_vec()));
    let kl = kl_divergence_var(&mut tape, p, qv, eps)?;
    tape.value(kl).item()
}

fn stack_heads(tape: &mut Tape, heads: &[Var]) -> Result<Var> {
    let first = heads
        .first()
        .ok_or_else(|| Error::contract("aggregation over an empty head list"))?;
    let m = tape.value(*first).numel();
    let rows = heads
        .iter()
        .map(|&h| tape.reshape(h, &[1, m]))
        .collect::<Result<Vec<_>>>()?;
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        tape.concat(&rows, 0)
    }
}

/// Log-sum fusion: `softmax((1/T) Σ_h ln max(a^h, ε))`.
pub fn aggregate_heads_var(tape: &mut Tape, heads: &[Var], temperature: f64, eps: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::contract(format!("temperature {temperature} must be > 0")));
    }
    let stacked = stack_heads(tape, heads)?;
    let floored = tape.clamp_min(stacked, eps);
    let logs = tape.log(floored)?;
    let summed = tape.sum_axis(logs, 0)?;
    let logits = tape.scale(summed, 1.0 / temperature);
    tape.softmax(logits, 0)
}

/// Elementwise mean/min/max over heads, floored at `ε` and renormalized.
pub fn aggregate_heads_alt_var(tape: &mut Tape, heads: &[Var], strategy: Aggregation, eps: f64) -> Result<Var> {
    let stacked = stack_heads(tape, heads)?;
    let fused = match strategy {
        Aggregation::Mean => {
            let s = tape.sum_axis(stacked, 0)?;
            tape.scale(s, 1.0 / heads.len() as f64)
        }
        Aggregation::Min => tape.min_axis(stacked, 0)?,
        Aggregation::Max => tape.max_axis(stacked, 0)?,
        Aggregation::LogSum => {
            return Err(Error::contract(
                "log_sum is not an alternative strategy; use aggregate_heads",
            ))
        }
    };
    let floored = tape.clamp_min(fused, eps);
    tape.normalize_sum(floored)
}

/// Dispatches on `strategy`; `temperature` only affects [`Aggregation::LogSum`].
pub fn aggregate_var(tape: &mut Tape, heads: &[Var], strategy: Aggregation, temperature: f64, eps: f64) -> Result<Var> {
    match strategy {
        Aggregation::LogSum => aggregate_heads_var(tape, heads, temperature, eps),
        other => aggregate_heads_alt_var(tape, heads, other, eps),
    }
}

fn on_tape<F>(heads: &[Vec<f64>], f: F) -> Result<Vec<f64>>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    if heads.is_empty() {
        return Err(Error::contract("aggregation over an empty head list"));
    }
    let m = heads[0].len();
    for (h, row) in heads.iter().enumerate() {
        if row.len() != m {
            return Err(Error::dim(format!("head {h} has length {}, expected {m}", row.len())));
        }
        check_distribution(row, &format!("head {h}"))?;
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = heads
        .iter()
        .map(|h| tape.constant(Tensor::vector(h.clone())))
        .collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data().to_vec())
}

/// Log-sum aggregation of plain head distributions.
pub fn aggregate_heads(heads: &[Vec<f64>], temperature: f64, eps: f64) -> Result<Vec<f64>> {
    on_tape(heads, |t, v| aggregate_heads_var(t, v, temperature, eps))
}

/// Mean/min/max aggregation of plain head distributions.
pub fn aggregate_heads_alt(heads: &[Vec<f64>], strategy: Aggregation, eps: f64) -> Result<Vec<f64>> {
    on_tape(heads, |t, v| aggregate_heads_alt_var(t, v, strategy, eps))
}
