//! Resampling teacher class attention onto a student patch grid.
//!
//! The patch part of a class-attention vector is viewed as an `h×w` image
//! (row-major over the grid), resampled separably with half-pixel centers,
//! clamped at zero and rescaled so the patches again carry `1 - a0`.

use super::config::Interpolation;
use crate::error::{Error, Result};

/// Keys cubic-convolution parameter.
pub const KEYS_A: f64 = -0.5;

/// Keys cubic convolution kernel.
pub fn keys_kernel(x: f64) -> f64 {
    let a = KEYS_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source coordinate (in input cells) sampled by output cell `dst`.
fn source_coord(dst: usize, len_in: usize, len_out: usize) -> f64 {
    (dst as f64 + 0.5) * (len_in as f64 / len_out as f64) - 0.5
}

/// Dense `len_out × len_in` 1-D resampling matrix. Taps that fall off the
/// grid are clamped to the nearest edge cell.
fn weights_1d(len_in: usize, len_out: usize, mode: Interpolation) -> Vec<f64> {
    let mut w = vec![0.0; len_out * len_in];
    let clamp = |i: isize| i.clamp(0, len_in as isize - 1) as usize;
    for o in 0..len_out {
        let row = &mut w[o * len_in..(o + 1) * len_in];
        match mode {
            Interpolation::Nearest => {
                let s = ((o as f64 + 0.5) * len_in as f64 / len_out as f64).floor() as isize;
                row[clamp(s)] = 1.0;
            }
            Interpolation::Bilinear => {
                let s = source_coord(o, len_in, len_out);
                let base = s.floor();
                let t = s - base;
                row[clamp(base as isize)] += 1.0 - t;
                row[clamp(base as isize + 1)] += t;
            }
            Interpolation::Bicubic => {
                let s = source_coord(o, len_in, len_out);
                let base = s.floor() as isize;
                for tap in base - 1..=base + 2 {
                    row[clamp(tap)] += keys_kernel(s - tap as f64);
                }
            }
        }
    }
    w
}

/// Resamples a row-major `h_in×w_in` field to `h_out×w_out`.
pub fn resample_grid(
    field: &[f64],
    (w_in, h_in): (usize, usize),
    (w_out, h_out): (usize, usize),
    mode: Interpolation,
) -> Result<Vec<f64>> {
    if field.len() != w_in * h_in {
        return Err(Error::dim(format!(
            "field of {} values does not fill a {w_in}x{h_in} grid",
            field.len()
        )));
    }
    let wx = weights_1d(w_in, w_out, mode);
    let wy = weights_1d(h_in, h_out, mode);
    // Rows first: tmp = field · wxᵀ  (h_in × w_out).
    let mut tmp = vec![0.0; h_in * w_out];
    for y in 0..h_in {
        for xo in 0..w_out {
            tmp[y * w_out + xo] = (0..w_in)
                .map(|xi| field[y * w_in + xi] * wx[xo * w_in + xi])
                .sum();
        }
    }
    let mut out = vec![0.0; h_out * w_out];
    for yo in 0..h_out {
        for xo in 0..w_out {
            out[yo * w_out + xo] = (0..h_in)
                .map(|yi| wy[yo * h_in + yi] * tmp[yi * w_out + xo])
                .sum();
        }
    }
    Ok(out)
}

/// Result of [`interpolate_attention`].
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolated {
    /// Length `N_s + 1`; entry 0 is the untouched class self-attention.
    pub values: Vec<f64>,
    /// Set when no positive patch mass survived clamping and the patches
    /// were filled uniformly instead.
    pub uniform_fallback: bool,
}

/// Moves one head's class attention from `grid_t` to `grid_s` and rescales
/// the patch entries to sum to `1 - a0`.
pub fn interpolate_attention(
    head: &[f64],
    grid_t: (usize, usize),
    grid_s: (usize, usize),
    mode: Interpolation,
) -> Result<Interpolated> {
    let n_t = grid_t.0 * grid_t.1;
    let n_s = grid_s.0 * grid_s.1;
    if head.len() != n_t + 1 {
        return Err(Error::dim(format!(
            "attention of length {} does not match a {}x{} grid plus class token",
            head.len(),
            grid_t.0,
            grid_t.1
        )));
    }
    if n_s == 0 {
        return Err(Error::dim("empty student grid"));
    }
    let a0 = head[0];
    let mut patches = resample_grid(&head[1..], grid_t, grid_s, mode)?;
    for p in &mut patches {
        *p = p.max(0.0);
    }
    let mass: f64 = patches.iter().sum();
    let target = 1.0 - a0;
    let uniform_fallback = !(mass > 0.0);
    if uniform_fallback {
        patches.fill(target / n_s as f64);
    } else {
        let k = target / mass;
        for p in &mut patches {
            *p *= k;
        }
    }
    let mut values = Vec::with_capacity(n_s + 1);
    values.push(a0);
    values.extend(patches);
    Ok(Interpolated {
        values,
        uniform_fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn kernel_interpolates_integers() {
        assert_eq!(keys_kernel(0.0), 1.0);
        for x in [1.0, 2.0, -1.0, -2.0, 2.5] {
            assert_abs_diff_eq!(keys_kernel(x), 0.0, epsilon = 1e-15);
        }
        // Partition of unity at any phase.
        for t in [0.1, 0.25, 0.5, 0.9] {
            let s: f64 = (-1..=2).map(|k| keys_kernel(t - k as f64)).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn same_grid_is_identity_for_every_mode() {
        let head = vec![0.1, 0.2, 0.05, 0.3, 0.35];
        for mode in [Interpolation::Bicubic, Interpolation::Bilinear, Interpolation::Nearest] {
            let out = interpolate_attention(&head, (2, 2), (2, 2), mode).unwrap();
            for (a, b) in out.values.iter().zip(&head) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
            assert!(!out.uniform_fallback);
        }
    }

    #[test]
    fn uniform_field_stays_uniform() {
        let a0 = 0.2;
        let mut head = vec![a0];
        head.extend(std::iter::repeat_n((1.0 - a0) / 16.0, 16));
        for mode in [Interpolation::Bicubic, Interpolation::Bilinear, Interpolation::Nearest] {
            for grid_s in [(2, 2), (3, 3), (8, 8)] {
                let out = interpolate_attention(&head, (4, 4), grid_s, mode).unwrap();
                let n_s = (grid_s.0 * grid_s.1) as f64;
                assert_abs_diff_eq!(out.values[0], a0);
                for v in &out.values[1..] {
                    assert_abs_diff_eq!(*v, (1.0 - a0) / n_s, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn nearest_downsample_of_one_hot() {
        // One-hot at grid cell (row 1, col 2) of a 4x4 map; half-pixel
        // nearest sampling reads input cells 1 and 3 on each axis.
        let mut head = vec![0.0; 17];
        head[0] = 0.5;
        head[1 + 4 + 3] = 0.5; // row 1, col 3: sampled by output (0, 1)
        let out = interpolate_attention(&head, (4, 4), (2, 2), Interpolation::Nearest).unwrap();
        assert_eq!(out.values, vec![0.5, 0.0, 0.5, 0.0, 0.0]);

        // A cell that no output samples loses all mass -> uniform fallback.
        let mut head = vec![0.0; 17];
        head[0] = 0.2;
        head[1] = 0.8;
        let out = interpolate_attention(&head, (4, 4), (2, 2), Interpolation::Nearest).unwrap();
        assert!(out.uniform_fallback);
        for v in &out.values[1..] {
            assert_abs_diff_eq!(*v, 0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn bicubic_overshoot_is_clamped() {
        // A sharp spike produces negative lobes on upsampling.
        let mut head = vec![0.0; 17];
        head[0] = 0.1;
        head[1 + 5] = 0.9;
        let raw = resample_grid(&head[1..], (4, 4), (8, 8), Interpolation::Bicubic).unwrap();
        assert!(raw.iter().any(|&v| v < 0.0));
        let out = interpolate_attention(&head, (4, 4), (8, 8), Interpolation::Bicubic).unwrap();
        assert!(out.values.iter().all(|&v| v >= 0.0));
        assert_abs_diff_eq!(out.values.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn length_mismatch_is_dimension_error() {
        let err = interpolate_attention(&[0.5, 0.5], (2, 2), (1, 1), Interpolation::Bicubic);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }
}
