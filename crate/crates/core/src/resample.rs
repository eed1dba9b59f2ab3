//! Separable bicubic resampling of `[H, W, C]` images.
//!
//! Follows the Pillow convention: a cubic kernel with `a = -0.5`, pixel-center
//! alignment, the kernel widened by the scale factor when shrinking
//! (anti-aliasing), and taps renormalized to sum to one near the borders.

use crate::tensor::Array;

const A: f64 = -0.5;

pub fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Per-output-sample `(first input index, weights)` for resizing `input → output`.
pub fn taps(input: usize, output: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = input as f64 / output as f64;
    let fs = scale.max(1.0);
    let support = 2.0 * fs;
    (0..output)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support + 0.5).floor().max(0.0)) as usize;
            let hi = ((center + support + 0.5).floor() as usize).min(input);
            let mut w: Vec<f64> = (lo..hi)
                .map(|x| cubic((x as f64 - center + 0.5) / fs))
                .collect();
            let total: f64 = w.iter().sum();
            if total != 0.0 {
                w.iter_mut().for_each(|v| *v /= total);
            }
            (lo, w)
        })
        .collect()
}

/// Bicubic resize of an `[H, W, C]` image to `[oh, ow, C]` (no clamping).
pub fn resize_bicubic(img: &Array, oh: usize, ow: usize) -> Array {
    let s = img.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let tx = taps(w, ow);
    let mut horiz = vec![0.0; h * ow * c];
    for y in 0..h {
        for (x, (lo, wts)) in tx.iter().enumerate() {
            let out = &mut horiz[(y * ow + x) * c..(y * ow + x + 1) * c];
            for (k, wt) in wts.iter().enumerate() {
                let src = &img.data()[(y * w + lo + k) * c..(y * w + lo + k + 1) * c];
                for ch in 0..c {
                    out[ch] += wt * src[ch];
                }
            }
        }
    }
    let ty = taps(h, oh);
    let mut out = vec![0.0; oh * ow * c];
    for (y, (lo, wts)) in ty.iter().enumerate() {
        for (k, wt) in wts.iter().enumerate() {
            let src = &horiz[(lo + k) * ow * c..(lo + k + 1) * ow * c];
            let dst = &mut out[y * ow * c..(y + 1) * ow * c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wt * s;
            }
        }
    }
    Array::new(vec![oh, ow, c], out)
}

/// Bicubic resize clamped to `[0, 1]`.
pub fn resize_clamped(img: &Array, oh: usize, ow: usize) -> Array {
    resize_bicubic(img, oh, ow).map(|v| v.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        // a = -0.5 at x = 0.5: (1.5·0.5 − 2.5)·0.25 + 1
        assert!((cubic(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn taps_sum_to_one() {
        for &(i, o) in &[(128, 64), (64, 128), (37, 11), (5, 17)] {
            for (_, w) in taps(i, o) {
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Array::full(&[9, 13, 3], 0.37);
        for (oh, ow) in [(4, 6), (18, 26)] {
            let r = resize_bicubic(&img, oh, ow);
            assert!(r.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn identity_size_is_identity() {
        let img = Array::from_fn(&[6, 7, 2], |i| (i as f64 * 0.3).sin());
        let r = resize_bicubic(&img, 6, 7);
        for (a, b) in r.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
