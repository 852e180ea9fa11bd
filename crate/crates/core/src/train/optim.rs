use std::f64::consts::PI;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear warmup from 0 to the base rate, then cosine decay to `final_lr`.
/// `fraction` is the elapsed share of training.
pub fn lr_at(fraction: f64, cfg: &TrainConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::contract(format!("training fraction {fraction} outside [0, 1]")));
    }
    let base = cfg.base_lr();
    let w = cfg.warmup() as f64 / cfg.total_epochs as f64;
    if fraction < w {
        return Ok(base * fraction / w);
    }
    let progress = if w < 1.0 { (fraction - w) / (1.0 - w) } else { 1.0 };
    Ok(cfg.final_lr + (base - cfg.final_lr) * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Whether weight decay applies: biases, norm affines and the class token
/// are exempt.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with("cls_token"))
}

/// AdamW moments and step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

/// One AdamW update. Parameters arrive as `(name, tensor)` pairs in a fixed
/// order that must match `grads` and stay the same across calls.
pub fn adamw_step(
    params: &mut [(String, &mut Tensor)],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim(format!(
                "`{name}`: gradient shape {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient {bad} in `{name}`")));
        }
    }
    if state.step == 0 && state.m.is_empty() {
        state.m = params.iter().map(|(_, p)| Tensor::zeros(p.shape().to_vec())).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, (_, p))| m.shape() != p.shape()) {
        return Err(Error::dim("optimizer state does not match the parameter list"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, ((name, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let shrink = if decays(name) { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mj = b1 * *mj + (1.0 - b1) * gj;
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
            let mhat = *mj / c1;
            let vhat = *vj / c2;
            *pj = *pj * shrink - lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg() -> TrainConfig {
        TrainConfig {
            total_epochs: 10,
            warmup_epochs: Some(2),
            lr_coeff: 1e-3,
            batch_size: 256,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let c = cfg();
        assert_eq!(lr_at(0.0, &c).unwrap(), 0.0);
        assert_abs_diff_eq!(lr_at(0.2, &c).unwrap(), 1e-3, epsilon = 1e-15);
        // Cosine midpoint: 0.2 + 0.8 / 2.
        assert_abs_diff_eq!(lr_at(0.6, &c).unwrap(), 5e-4, epsilon = 1e-15);
        assert_abs_diff_eq!(lr_at(1.0, &c).unwrap(), 0.0, epsilon = 1e-15);
        let below = lr_at(0.2 - 1e-12, &c).unwrap();
        assert!((below - 1e-3).abs() < 1e-12);
        assert!(matches!(lr_at(1.5, &c), Err(Error::Contract(_))));
        assert!(matches!(lr_at(-0.1, &c), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let c = TrainConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let before = p.clone();
        let mut st = OptimizerState::default();
        adamw_step(&mut [("w.weight".into(), &mut p)], &[Tensor::zeros([2])], &mut st, 0.1, &c).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn positive_gradient_decreases() {
        let mut p = Tensor::scalar(1.0);
        let mut st = OptimizerState::default();
        adamw_step(&mut [("x.weight".into(), &mut p)], &[Tensor::scalar(1.0)], &mut st, 0.01, &cfg()).unwrap();
        assert!(p.item().unwrap() < 1.0);
    }

    #[test]
    fn decay_exclusions() {
        assert!(decays("student.blocks.0.attn.query.weight"));
        assert!(decays("student.pos_embed"));
        assert!(!decays("student.blocks.0.attn.query.bias"));
        assert!(!decays("student.norm.gamma"));
        assert!(!decays("student.blocks.1.ln_mlp.beta"));
        assert!(!decays("student.cls_token"));
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut st = OptimizerState::default();
        let err = adamw_step(
            &mut [("student.fc.weight".into(), &mut p)],
            &[Tensor::vector(vec![f64::NAN])],
            &mut st,
            0.1,
            &cfg(),
        )
        .unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("student.fc.weight")));
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn converges_on_a_convex_quadratic() {
        // f(x) = ½ Σ a_i (x_i - c_i)², gradient a ⊙ (x - c). Cosine schedule
        // from 1.0 over exactly 100 steps; light momentum avoids overshoot.
        let a = [1.0, 4.0, 0.5];
        let c = [1.0, -2.0, 3.0];
        let tc = TrainConfig {
            total_epochs: 100,
            warmup_epochs: Some(0),
            lr_coeff: 1.0,
            batch_size: 256,
            weight_decay: 0.0,
            beta1: 0.5,
            ..TrainConfig::default()
        };
        let mut x = Tensor::vector(vec![0.0; 3]);
        let mut st = OptimizerState::default();
        let grad = |x: &Tensor| Tensor::vector((0..3).map(|i| a[i] * (x.data()[i] - c[i])).collect());
        for k in 0..100 {
            let g = grad(&x);
            let lr = lr_at(k as f64 / 100.0, &tc).unwrap();
            adamw_step(&mut [("x".into(), &mut x)], &[g], &mut st, lr, &tc).unwrap();
        }
        let g = grad(&x);
        let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "gradient norm {norm}");
    }
}
