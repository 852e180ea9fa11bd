use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{AugmentConfig, TrainConfig};
use super::optim::lr_at;
use crate::error::Result;
use crate::io::Dataset;
use crate::tensor::Tensor;

/// The single view drawn for one sample in one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct View {
    pub flip: bool,
    pub dx: i32,
    pub dy: i32,
}

impl View {
    pub fn draw(aug: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let flip = aug.flip && rng.gen_bool(0.5);
        let p = aug.crop_pad as i32;
        let (dx, dy) = if p > 0 {
            (rng.gen_range(-p..=p), rng.gen_range(-p..=p))
        } else {
            (0, 0)
        };
        View { flip, dx, dy }
    }

    /// Mirrored and translated copy of `data`'s sample `i`; pixels shifted
    /// in from outside are zero.
    pub fn apply(&self, data: &Dataset, i: usize) -> Tensor {
        let img = data.image_flipped(i, self.flip);
        if self.dx == 0 && self.dy == 0 {
            return img;
        }
        let (c, h, w) = (data.channels, data.height as i32, data.width as i32);
        let src = img.data();
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for y in 0..h {
                let sy = y + self.dy;
                if !(0..h).contains(&sy) {
                    continue;
                }
                for x in 0..w {
                    let sx = x + self.dx;
                    if (0..w).contains(&sx) {
                        out[((ch as i32 * h + y) * w + x) as usize] = src[((ch as i32 * h + sy) * w + sx) as usize];
                    }
                }
            }
        }
        Tensor::new(img.shape().to_vec(), out).expect("same shape")
    }
}

/// Sample order and views of one epoch, drawn from a stream keyed by the
/// seed and epoch only.
pub(crate) fn epoch_plan(seed: u64, epoch: usize, n: usize, aug: &AugmentConfig) -> (Vec<usize>, Vec<View>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let views = order.iter().map(|_| View::draw(aug, &mut rng)).collect();
    (order, views)
}

/// Per-step learning rate at step `k` of `steps_per_epoch` in `epoch`.
pub(crate) fn step_lr(cfg: &TrainConfig, epoch: usize, k: usize, steps_per_epoch: usize) -> Result<f64> {
    let f = (epoch as f64 + k as f64 / steps_per_epoch as f64) / cfg.total_epochs as f64;
    lr_at(f.min(1.0), cfg)
}

/// Evaluates `f` on every item in parallel and sums the returned gradients
/// and statistics in item order, so the result does not depend on the
/// thread count.
pub(crate) fn reduce_ordered<T, F, const K: usize>(items: &[T], f: F) -> Result<(Vec<Tensor>, [f64; K])>
where
    T: Sync,
    F: Fn(&T) -> Result<(Vec<Tensor>, [f64; K])> + Sync,
{
    let parts: Vec<(Vec<Tensor>, [f64; K])> = items.par_iter().map(&f).collect::<Result<_>>()?;
    let mut it = parts.into_iter();
    let (mut grads, mut stats) = it.next().expect("non-empty batch");
    for (g, s) in it {
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
        for k in 0..K {
            stats[k] += s[k];
        }
    }
    Ok((grads, stats))
}

pub(crate) fn scale_all(grads: &mut [Tensor], factor: f64) {
    for g in grads {
        for v in g.data_mut() {
            *v *= factor;
        }
    }
}
