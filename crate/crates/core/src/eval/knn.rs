use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::FeatureBank;
use crate::error::{Error, Result};

fn d_k() -> usize {
    20
}
fn d_tau() -> f64 {
    0.07
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnnConfig {
    #[serde(default = "d_k")]
    pub k: usize,
    /// Vote temperature: a neighbor at similarity `s` votes `exp(s/τ)`.
    #[serde(default = "d_tau")]
    pub temperature: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            k: d_k(),
            temperature: d_tau(),
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!("temperature {} must be > 0", self.temperature)));
        }
        Ok(())
    }
}

/// Weighted k-NN label for every query row.
pub fn knn_predict(train: &FeatureBank, query: &FeatureBank, cfg: &KnnConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    train.require_normalized("train")?;
    query.require_normalized("query")?;
    if cfg.k > train.len() {
        return Err(Error::contract(format!("k = {} exceeds the {} bank entries", cfg.k, train.len())));
    }
    if train.dim() != query.dim() {
        return Err(Error::dim(format!("feature widths differ: {} vs {}", train.dim(), query.dim())));
    }
    let classes = train.num_classes();
    Ok((0..query.len())
        .into_par_iter()
        .map(|q| {
            let x = query.row(q);
            let mut sims: Vec<(f64, usize)> = (0..train.len())
                .map(|i| (train.row(i).iter().zip(x).map(|(a, b)| a * b).sum(), i))
                .collect();
            // Highest similarity first, lower index on ties.
            let by_sim = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            if cfg.k < sims.len() {
                sims.select_nth_unstable_by(cfg.k - 1, by_sim);
                sims.truncate(cfg.k);
            }
            sims.sort_by(by_sim);
            let mut votes = vec![0.0; classes];
            for &(s, i) in &sims {
                votes[train.labels()[i]] += (s / cfg.temperature).exp();
            }
            let mut best = 0;
            for (c, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Top-1 accuracy of [`knn_predict`] against the query labels.
pub fn knn_classify(train: &FeatureBank, query: &FeatureBank, cfg: &KnnConfig) -> Result<f64> {
    let pred = knn_predict(train, query, cfg)?;
    Ok(hit_rate(&pred, query.labels()))
}

pub(crate) fn hit_rate(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn bank(rows: Vec<[f64; 2]>, labels: Vec<usize>) -> FeatureBank {
        let n = rows.len();
        FeatureBank::new(Tensor::new([n, 2], rows.concat()).unwrap(), labels, true).unwrap()
    }

    fn clusters(seed: u64, per: usize) -> (Vec<[f64; 2]>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, centre) in [[3.0, 1.0], [-1.0, 3.0]].iter().enumerate() {
            for _ in 0..per {
                rows.push([centre[0] + noise.sample(&mut rng), centre[1] + noise.sample(&mut rng)]);
                labels.push(c);
            }
        }
        (rows, labels)
    }

    #[test]
    fn self_match_with_k1() {
        let (rows, labels) = clusters(1, 30);
        let b = bank(rows, labels);
        let acc = knn_classify(&b, &b, &KnnConfig { k: 1, ..KnnConfig::default() }).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn separated_clusters() {
        let (rows, labels) = clusters(2, 100);
        let (qrows, qlabels) = clusters(3, 100);
        let acc = knn_classify(&bank(rows, labels), &bank(qrows, qlabels), &KnnConfig::default()).unwrap();
        assert!(acc >= 0.99, "{acc}");
    }

    #[test]
    fn shuffled_labels_are_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let classes = 4;
        let mut make = |n: usize| {
            let rows: Vec<[f64; 2]> = (0..n).map(|_| [noise.sample(&mut rng), noise.sample(&mut rng)]).collect();
            let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
            labels.shuffle(&mut rng);
            bank(rows, labels)
        };
        let train = make(2000);
        let query = make(2000);
        let acc = knn_classify(&train, &query, &KnnConfig::default()).unwrap();
        assert!((acc - 0.25).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn k_above_bank_size_is_a_contract_error() {
        let b = bank(vec![[1.0, 0.0], [0.0, 1.0]], vec![0, 1]);
        let err = knn_classify(&b, &b, &KnnConfig { k: 3, ..KnnConfig::default() });
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn unnormalized_bank_is_rejected() {
        let raw = FeatureBank::new(Tensor::new([1, 2], vec![1.0, 1.0]).unwrap(), vec![0], false).unwrap();
        let cfg = KnnConfig { k: 1, ..KnnConfig::default() };
        assert!(matches!(knn_classify(&raw, &raw, &cfg), Err(Error::Contract(_))));
    }
}
