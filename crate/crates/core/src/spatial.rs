//! Row-index builders for padding, cropping, shifting and windowing token grids.
//!
//! Every spatial rearrangement in the model is a row gather over a flattened
//! `(H*W, C)` grid, so these functions only produce index vectors.

use crate::autograd::{Graph, Var, PAD_ROW};

pub fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Indices that embed an `h × w` grid into the top-left of `hp × wp` (zero padding).
pub fn pad_index(h: usize, w: usize, hp: usize, wp: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(hp * wp);
    for y in 0..hp {
        for x in 0..wp {
            idx.push(if y < h && x < w { y * w + x } else { PAD_ROW });
        }
    }
    idx
}

/// Indices that keep the top-left `h × w` of an `hs × ws` grid.
pub fn crop_index(ws: usize, h: usize, w: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            idx.push(y * ws + x);
        }
    }
    idx
}

/// Nearest-neighbour ×2 upsampling of an `h × w` grid, cropped to `th × tw`.
pub fn upsample2_index(h: usize, w: usize, th: usize, tw: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(th * tw);
    for y in 0..th {
        for x in 0..tw {
            idx.push((y / 2).min(h - 1) * w + (x / 2).min(w - 1));
        }
    }
    idx
}

/// Gather order that cyclically shifts a padded `hp × wp` grid by `-shift` and
/// partitions it into `win × win` windows (window-major, then row-major inside).
/// Positions that fall outside the valid `h × w` region map to [`PAD_ROW`].
pub fn window_partition_index(h: usize, w: usize, hp: usize, wp: usize, win: usize, shift: usize) -> Vec<usize> {
    let (nwy, nwx) = (hp / win, wp / win);
    let mut idx = Vec::with_capacity(hp * wp);
    for wy in 0..nwy {
        for wx in 0..nwx {
            for iy in 0..win {
                for ix in 0..win {
                    let y = (wy * win + iy + shift) % hp;
                    let x = (wx * win + ix + shift) % wp;
                    idx.push(if y < h && x < w { y * w + x } else { PAD_ROW });
                }
            }
        }
    }
    idx
}

/// Inverse of [`window_partition_index`] restricted to the valid `h × w` tokens.
pub fn window_reverse_index(h: usize, w: usize, hp: usize, wp: usize, win: usize, shift: usize) -> Vec<usize> {
    let nwx = wp / win;
    let mut idx = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let ys = (y + hp - shift % hp) % hp;
            let xs = (x + wp - shift % wp) % wp;
            let window = (ys / win) * nwx + xs / win;
            idx.push(window * win * win + (ys % win) * win + xs % win);
        }
    }
    idx
}

/// Crops a `[hs, ws, c]` grid to `[h, w, c]`; no-op when already that size.
pub fn crop(g: &mut Graph<'_>, x: Var, h: usize, w: usize) -> Var {
    let s = g.shape(x).to_vec();
    if s[0] == h && s[1] == w {
        return x;
    }
    let idx = crop_index(s[1], h, w);
    let flat = g.reshape(x, &[s[0] * s[1], s[2]]);
    let out = g.gather_rows(flat, &idx);
    g.reshape(out, &[h, w, s[2]])
}

/// Zero-pads a `[h, w, c]` grid on the bottom/right to `[hp, wp, c]`.
pub fn pad(g: &mut Graph<'_>, x: Var, hp: usize, wp: usize) -> Var {
    let s = g.shape(x).to_vec();
    if s[0] == hp && s[1] == wp {
        return x;
    }
    let idx = pad_index(s[0], s[1], hp, wp);
    let flat = g.reshape(x, &[s[0] * s[1], s[2]]);
    let out = g.gather_rows(flat, &idx);
    g.reshape(out, &[hp, wp, s[2]])
}
