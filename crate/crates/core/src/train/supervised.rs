//! Supervised pretraining of a classifier ViT, used to produce teachers.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::common::{epoch_plan, reduce_ordered, scale_all, step_lr};
use super::config::TrainConfig;
use super::optim::{adamw_step, OptimizerState};
use crate::error::{Error, Result};
use crate::io::{Dataset, ModelFile};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{collect_grads, encode, forward_unchecked, init_linear, linear, Linear, ViTConfig, ViTParams, WeightTree};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub wall_time_s: f64,
}

/// `-log softmax(logits)[label]` and whether the arg-max hits the label.
pub(crate) fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<(Var, bool)> {
    let lp = tape.log_softmax(logits, 0)?;
    let v = tape.value(lp).data();
    if label >= v.len() {
        return Err(Error::Dataset(format!("label {label} outside {} classes", v.len())));
    }
    let hit = argmax(v) == label;
    let pick = tape.slice(lp, 0, label, label + 1)?;
    let s = tape.sum(pick);
    Ok((tape.scale(s, -1.0), hit))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn head_logits(tape: &mut Tape, cls: Var, head: &Linear<Var>) -> Result<Var> {
    let d = tape.value(cls).numel();
    let row = tape.reshape(cls, &[1, d])?;
    let out = linear(tape, row, head)?;
    let c = tape.value(out).numel();
    tape.reshape(out, &[c])
}

/// Class predictions of a model with a head, in dataset order.
pub fn predict(model: &ModelFile, data: &Dataset) -> Result<Vec<usize>> {
    let head = model
        .head
        .as_ref()
        .ok_or_else(|| Error::config("model has no classification head"))?;
    model.params.audit(&model.config)?;
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let out = forward_unchecked(&data.image(i), &model.params, &model.config, false)?;
            let mut tape = Tape::new();
            let cls = tape.constant(Tensor::vector(out.class_token));
            let h = head.map("", &mut |_, t| tape.constant(t.clone()));
            let logits = head_logits(&mut tape, cls, &h)?;
            Ok(argmax(tape.value(logits).data()))
        })
        .collect()
}

pub fn accuracy(model: &ModelFile, data: &Dataset) -> Result<f64> {
    let pred = predict(model, data)?;
    let hits = pred.iter().enumerate().filter(|&(i, &p)| p == data.label(i)).count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Trains encoder and linear head with cross-entropy on the class token.
/// Validation accuracy is measured after every epoch when `val` is given.
pub fn pretrain_classifier(
    config: &ViTConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(ModelFile, Vec<SupervisedMetrics>)> {
    config.validate()?;
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let classes = train.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ModelFile {
        config: config.clone(),
        params: ViTParams::init(config, &mut rng)?,
        projector: None,
        head: Some(init_linear(&mut rng, config.embed_dim(), classes)),
    };
    let mut state = OptimizerState::default();
    let mut history = Vec::with_capacity(cfg.total_epochs);
    let n = train.len();
    let steps = n.div_ceil(cfg.batch_size);
    for epoch in 0..cfg.total_epochs {
        let start = Instant::now();
        let (order, views) = epoch_plan(cfg.seed, epoch, n, &cfg.augment);
        let mut sums = [0.0; 2];
        let mut lr = 0.0;
        for (k, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<_> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| (i, views[k * cfg.batch_size + j]))
                .collect();
            let m = &model;
            let head = m.head.as_ref().expect("set above");
            let (mut grads, stats) = reduce_ordered(&items, |&(i, view)| {
                let img = view.apply(train, i);
                let mut tape = Tape::new();
                let vars = m.params.to_vars(&mut tape, true);
                let h = head.map("", &mut |_, t| tape.leaf(t.clone()));
                let enc = encode(&mut tape, &vars, &img, &m.config)?;
                let logits = head_logits(&mut tape, enc.class_token, &h)?;
                let (loss, hit) = cross_entropy(&mut tape, logits, train.label(i))?;
                let value = tape.value(loss).data()[0];
                tape.backward(loss)?;
                let mut g = collect_grads(&vars, &tape);
                g.extend(collect_grads(&h, &tape));
                Ok((g, [value, hit as u8 as f64]))
            })?;
            scale_all(&mut grads, 1.0 / chunk.len() as f64);
            sums[0] += stats[0];
            sums[1] += stats[1];
            lr = step_lr(cfg, epoch, k, steps)?;
            let mut named: Vec<(String, &mut Tensor)> = Vec::new();
            let ModelFile { params, head, .. } = &mut model;
            params.visit_mut("encoder", &mut |n, t| named.push((n, t)));
            head.as_mut().expect("set above").visit_mut("head", &mut |n, t| named.push((n, t)));
            adamw_step(&mut named, &grads, &mut state, lr, cfg)?;
        }
        let val_accuracy = val.map(|v| accuracy(&model, v)).transpose()?;
        let m = SupervisedMetrics {
            epoch: epoch + 1,
            lr,
            loss: sums[0] / n as f64,
            train_accuracy: sums[1] / n as f64,
            val_accuracy,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "pretrain epoch {} lr {:.3e} loss {:.4} train acc {:.3} val acc {:?} ({:.1}s)",
            m.epoch,
            m.lr,
            m.loss,
            m.train_accuracy,
            m.val_accuracy,
            m.wall_time_s
        );
        history.push(m);
    }
    Ok((model, history))
}
