use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::FeatureBank;
use super::knn::hit_rate;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::{adamw_step, lr_at, OptimizerState, TrainConfig};

fn d_epochs() -> usize {
    50
}
fn d_lr() -> f64 {
    1e-3
}
fn d_batch() -> usize {
    64
}

/// Linear probe training: AdamW with a cosine schedule, no warmup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl ProbeConfig {
    fn optimizer(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            total_epochs: self.epochs,
            warmup_epochs: Some(0),
            lr_coeff: self.lr * 256.0 / self.batch_size.max(1) as f64,
            weight_decay: self.weight_decay,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()
    }
}

/// Affine classifier `W x + b` learned on frozen features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    /// `C×d`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearProbe {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        self.weight
            .data()
            .chunks(d)
            .zip(self.bias.data())
            .map(|(w, b)| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect()
    }

    pub fn predict(&self, bank: &FeatureBank) -> Vec<usize> {
        (0..bank.len())
            .map(|i| crate::train::argmax(&self.logits(bank.row(i))))
            .collect()
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

/// Trains a softmax cross-entropy probe on `train`, starting from zero
/// weights.
pub fn train_probe(train: &FeatureBank, classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("empty probe training bank".into()));
    }
    let opt = cfg.optimizer();
    let d = train.dim();
    let mut probe = LinearProbe {
        weight: Tensor::zeros([classes, d]),
        bias: Tensor::zeros([classes]),
    };
    let mut state = OptimizerState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps = train.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (k, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut gw = Tensor::zeros([classes, d]);
            let mut gb = Tensor::zeros([classes]);
            for &i in chunk {
                let x = train.row(i);
                let mut p = probe.logits(x);
                softmax_in_place(&mut p);
                p[train.labels()[i]] -= 1.0;
                for (c, &pc) in p.iter().enumerate() {
                    gb.data_mut()[c] += pc;
                    for (g, &xj) in gw.data_mut()[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *g += pc * xj;
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            gw.data_mut().iter_mut().for_each(|v| *v *= scale);
            gb.data_mut().iter_mut().for_each(|v| *v *= scale);
            let f = (epoch as f64 + k as f64 / steps as f64) / cfg.epochs as f64;
            let lr = lr_at(f.min(1.0), &opt)?;
            let LinearProbe { weight, bias } = &mut probe;
            let mut named = [("probe.weight".to_string(), weight), ("probe.bias".to_string(), bias)];
            adamw_step(&mut named, &[gw, gb], &mut state, lr, &opt)?;
        }
    }
    Ok(probe)
}

/// Test accuracy of a probe trained on `train`.
pub fn linear_probe(train: &FeatureBank, test: &FeatureBank, cfg: &ProbeConfig) -> Result<f64> {
    if train.dim() != test.dim() {
        return Err(Error::dim(format!("feature widths differ: {} vs {}", train.dim(), test.dim())));
    }
    let classes = train.num_classes().max(test.num_classes());
    let probe = train_probe(train, classes, cfg)?;
    Ok(hit_rate(&probe.predict(test), test.labels()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn bank(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> FeatureBank {
        let (n, d) = (rows.len(), rows[0].len());
        FeatureBank::new(Tensor::new([n, d], rows.concat()).unwrap(), labels, false).unwrap()
    }

    #[test]
    fn separable_two_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut make = |n: usize| {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n {
                // Class by the sign of the first coordinate, with a gap of 0.6.
                let label = i % 2;
                let sign = if label == 1 { 1.0 } else { -1.0 };
                let mut x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                x[0] = sign * rng.gen_range(0.3..1.0);
                rows.push(x);
                labels.push(label);
            }
            bank(rows, labels)
        };
        let (train, test) = (make(400), make(400));
        let acc = linear_probe(&train, &test, &ProbeConfig::default()).unwrap();
        assert!(acc >= 0.99, "{acc}");
    }

    #[test]
    fn zero_features_pick_the_prior_class() {
        // 3:1 class ratio; only the bias can learn, and it learns the prior.
        let labels: Vec<usize> = (0..80).map(|i| (i % 4 == 0) as usize).collect();
        let train = bank(vec![vec![0.0; 4]; 80], labels.clone());
        let test = bank(vec![vec![0.0; 4]; 80], labels);
        let acc = linear_probe(&train, &test, &ProbeConfig::default()).unwrap();
        assert_eq!(acc, 0.75);
    }

    #[test]
    fn accuracy_is_a_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows: Vec<Vec<f64>> = (0..50).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let labels = (0..50).map(|_| rng.gen_range(0..3)).collect();
        let b = bank(rows, labels);
        let cfg = ProbeConfig {
            epochs: 5,
            ..ProbeConfig::default()
        };
        let acc = linear_probe(&b, &b, &cfg).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
