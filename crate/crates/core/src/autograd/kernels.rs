//! Fused kernels with hand-written gradients.

/// Layout of a multi-scale deformable attention call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeformShape {
    /// `(rows, cols)` of each value level.
    pub levels: Vec<(usize, usize)>,
    /// Row offset of each level in the flattened value sequence.
    pub starts: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub points: usize,
    pub queries: usize,
}

impl DeformShape {
    pub fn new(levels: Vec<(usize, usize)>, heads: usize, head_dim: usize, points: usize, queries: usize) -> Self {
        let mut starts = Vec::with_capacity(levels.len());
        let mut acc = 0;
        for &(h, w) in &levels {
            starts.push(acc);
            acc += h * w;
        }
        Self {
            levels,
            starts,
            heads,
            head_dim,
            points,
            queries,
        }
    }

    pub fn num_values(&self) -> usize {
        self.levels.iter().map(|(h, w)| h * w).sum()
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Bilinear corner taps for a normalized location on an `h × w` grid
/// (pixel centers at `(i + 0.5) / w`, zero padding outside).
#[inline]
fn corners(lx: f64, ly: f64, h: usize, w: usize) -> [(Option<usize>, f64, f64, f64); 4] {
    let x = lx * w as f64 - 0.5;
    let y = ly * h as f64 - 0.5;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0i = x0 as i64;
    let y0i = y0 as i64;
    let at = |yy: i64, xx: i64| -> Option<usize> {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            Some(yy as usize * w + xx as usize)
        } else {
            None
        }
    };
    // (index, weight, d weight / dx, d weight / dy) in pixel units
    [
        (at(y0i, x0i), (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (at(y0i, x0i + 1), fx * (1.0 - fy), 1.0 - fy, -fx),
        (at(y0i + 1, x0i), (1.0 - fx) * fy, -fy, 1.0 - fx),
        (at(y0i + 1, x0i + 1), fx * fy, fy, fx),
    ]
}

/// `value: [Nv, H, D]`, `loc: [Q, H, L, K, 2]`, `weights: [Q, H, L, K]` → `[Q, H*D]`.
pub(crate) fn deform_forward(s: &DeformShape, value: &[f64], loc: &[f64], weights: &[f64]) -> Vec<f64> {
    let (hh, d, l_n, k_n) = (s.heads, s.head_dim, s.num_levels(), s.points);
    let mut out = vec![0.0; s.queries * hh * d];
    for q in 0..s.queries {
        for h in 0..hh {
            let o = &mut out[(q * hh + h) * d..(q * hh + h + 1) * d];
            for l in 0..l_n {
                let (lh, lw) = s.levels[l];
                for k in 0..k_n {
                    let wi = ((q * hh + h) * l_n + l) * k_n + k;
                    let a = weights[wi];
                    let lx = loc[wi * 2];
                    let ly = loc[wi * 2 + 1];
                    for (idx, cw, _, _) in corners(lx, ly, lh, lw) {
                        if let Some(p) = idx {
                            let f = a * cw;
                            if f == 0.0 {
                                continue;
                            }
                            let base = ((s.starts[l] + p) * hh + h) * d;
                            for (oc, vc) in o.iter_mut().zip(&value[base..base + d]) {
                                *oc += f * vc;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`deform_forward`] with respect to value, loc and weights.
pub(crate) fn deform_backward(
    s: &DeformShape,
    value: &[f64],
    loc: &[f64],
    weights: &[f64],
    grad_out: &[f64],
    mut g_value: Option<&mut [f64]>,
    mut g_loc: Option<&mut [f64]>,
    mut g_weights: Option<&mut [f64]>,
) {
    let (hh, d, l_n, k_n) = (s.heads, s.head_dim, s.num_levels(), s.points);
    for q in 0..s.queries {
        for h in 0..hh {
            let go = &grad_out[(q * hh + h) * d..(q * hh + h + 1) * d];
            for l in 0..l_n {
                let (lh, lw) = s.levels[l];
                for k in 0..k_n {
                    let wi = ((q * hh + h) * l_n + l) * k_n + k;
                    let a = weights[wi];
                    let lx = loc[wi * 2];
                    let ly = loc[wi * 2 + 1];
                    let mut sample_dot = 0.0;
                    let mut dx = 0.0;
                    let mut dy = 0.0;
                    for (idx, cw, cdx, cdy) in corners(lx, ly, lh, lw) {
                        let Some(p) = idx else { continue };
                        let base = ((s.starts[l] + p) * hh + h) * d;
                        let v = &value[base..base + d];
                        let dot: f64 = go.iter().zip(v).map(|(g, v)| g * v).sum();
                        sample_dot += cw * dot;
                        dx += cdx * dot;
                        dy += cdy * dot;
                        if let Some(gv) = g_value.as_deref_mut() {
                            let f = a * cw;
                            for (gvc, gc) in gv[base..base + d].iter_mut().zip(go) {
                                *gvc += f * gc;
                            }
                        }
                    }
                    if let Some(gw) = g_weights.as_deref_mut() {
                        gw[wi] += sample_dot;
                    }
                    if let Some(gl) = g_loc.as_deref_mut() {
                        gl[wi * 2] += a * dx * lw as f64;
                        gl[wi * 2 + 1] += a * dy * lh as f64;
                    }
                }
            }
        }
    }
}

/// `[H, W, C]` → `[H*W, k*k*C]` patches with zero padding `k / 2`, ordered `(ky, kx, c)`.
pub(crate) fn im2col(src: &[f64], h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as i64;
    let cols = k * k * c;
    let mut out = vec![0.0; h * w * cols];
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * cols..(y * w + x + 1) * cols];
            for ky in 0..k {
                let yy = y as i64 + ky as i64 - pad;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                for kx in 0..k {
                    let xx = x as i64 + kx as i64 - pad;
                    if xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    let s = (yy as usize * w + xx as usize) * c;
                    let dst = (ky * k + kx) * c;
                    row[dst..dst + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
    out
}

pub(crate) fn col2im_acc(grad: &[f64], h: usize, w: usize, c: usize, k: usize, dst: &mut [f64]) {
    let pad = (k / 2) as i64;
    let cols = k * k * c;
    for y in 0..h {
        for x in 0..w {
            let row = &grad[(y * w + x) * cols..(y * w + x + 1) * cols];
            for ky in 0..k {
                let yy = y as i64 + ky as i64 - pad;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                for kx in 0..k {
                    let xx = x as i64 + kx as i64 - pad;
                    if xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    let s = (yy as usize * w + xx as usize) * c;
                    let src = (ky * k + kx) * c;
                    for (d, g) in dst[s..s + c].iter_mut().zip(&row[src..src + c]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with logits, numerically stable.
#[inline]
pub(crate) fn bce_logits(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

/// Sigmoid focal loss for one logit/target pair and its derivative in the logit.
#[inline]
pub(crate) fn focal_with_grad(x: f64, t: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let ce = bce_logits(x, t);
    let p_t = p * t + (1.0 - p) * (1.0 - t);
    let alpha_t = if alpha >= 0.0 {
        alpha * t + (1.0 - alpha) * (1.0 - t)
    } else {
        1.0
    };
    let m = (1.0 - p_t).max(0.0);
    let mod_g = m.powf(gamma);
    let loss = alpha_t * mod_g * ce;
    let dp = p * (1.0 - p);
    let dmod = if gamma == 0.0 {
        0.0
    } else {
        -gamma * m.powf(gamma - 1.0) * (2.0 * t - 1.0) * dp
    };
    let grad = alpha_t * (dmod * ce + mod_g * (p - t));
    (loss, grad)
}
