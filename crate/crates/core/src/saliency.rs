//! Per-level saliency logits, top-down refinement and Gaussian centrality targets.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::boxes::GtBox;
use crate::encoder::FeaturePyramid;
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{Activation, Linear, Mlp};
use crate::params::{Init, ParamId};
use crate::spatial;
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencyConfig {
    /// Width after the first projection; split evenly into local and global halves.
    pub hidden: usize,
    /// Gaussian width in units of the box half-extent.
    pub sigma: f64,
    pub alpha_init: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            sigma: 1.0 / 3.0,
            alpha_init: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Refined saliency logits per level (`[H_l, W_l, 1]`) and the shared `α`.
#[derive(Clone, Debug)]
pub struct SaliencyPyramid {
    pub maps: Vec<Var>,
    pub alpha: Var,
}

/// Where the cells of one pyramid level sit on the image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelGeometry {
    pub h: usize,
    pub w: usize,
    /// Cell size in input pixels.
    pub stride: f64,
    pub image_h: f64,
    pub image_w: f64,
}

impl LevelGeometry {
    /// Geometry of every level of an `image_h × image_w` input with `patch`-pixel
    /// stem patches.
    pub fn pyramid(dims: &[(usize, usize)], patch: usize, image_h: usize, image_w: usize) -> Vec<Self> {
        dims.iter()
            .enumerate()
            .map(|(l, &(h, w))| Self {
                h,
                w,
                stride: (patch << l) as f64,
                image_h: image_h as f64,
                image_w: image_w as f64,
            })
            .collect()
    }

    /// Normalized image coordinates of the center of cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            (j as f64 + 0.5) * self.stride / self.image_w,
            (i as f64 + 0.5) * self.stride / self.image_h,
        )
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-cell centrality target for one level.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceTarget {
    /// `[H, W]` values in `[0, 1]`.
    pub c: Array,
    pub sigma: f64,
    pub boxes: Vec<GtBox>,
}

/// `exp(-(dx² + dy²) / 2σ²)` for offsets already normalized by the half-extent.
pub fn gaussian_confidence(dx: f64, dy: f64, sigma: f64) -> f64 {
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

pub fn confidence_target(boxes: &[GtBox], geom: &LevelGeometry, sigma: f64) -> Result<ConfidenceTarget> {
    if sigma <= 0.0 {
        return config_err(format!("sigma must be positive, got {sigma}"));
    }
    for b in boxes {
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(Error::DegenerateBox(format!("zero-area box {:?}", b.cxcywh())));
        }
    }
    let mut c = Array::zeros(&[geom.h, geom.w]);
    for i in 0..geom.h {
        for j in 0..geom.w {
            let (x, y) = geom.cell_center(i, j);
            let mut best = 0.0f64;
            for b in boxes {
                let dx = (x - b.cx) / (b.w / 2.0);
                let dy = (y - b.cy) / (b.h / 2.0);
                if dx.abs() <= 1.0 && dy.abs() <= 1.0 {
                    best = best.max(gaussian_confidence(dx, dy, sigma));
                }
            }
            c.data_mut()[i * geom.w + j] = best;
        }
    }
    Ok(ConfidenceTarget {
        c,
        sigma,
        boxes: boxes.to_vec(),
    })
}

/// Saliency for one level: project, split into local/global halves, pool the
/// global half over space, fuse, and map to one logit per cell.
#[derive(Clone, Debug)]
pub struct SaliencyPredictor {
    pub mlp1: Linear,
    pub mlp2: Mlp,
    pub hidden: usize,
}

impl SaliencyPredictor {
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, hidden: usize) -> Self {
        Self {
            mlp1: Linear::new(init, &format!("{name}.mlp1"), in_dim, hidden, true),
            mlp2: Mlp::new(init, &format!("{name}.mlp2"), hidden, hidden, 1, Activation::Gelu),
            hidden,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, f: Var) -> Result<Var> {
        self.forward_with_pool(g, f, true)
    }

    /// `pool = false` skips the global averaging (ablation).
    pub fn forward_with_pool(&self, g: &mut Graph<'_>, f: Var, pool: bool) -> Result<Var> {
        let s = g.shape(f).to_vec();
        if s.len() != 3 || s[2] != self.mlp1.in_dim {
            return shape_err(format!("saliency predictor of width {} got {s:?}", self.mlp1.in_dim));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let n = h * w;
        let x = g.reshape(f, &[n, c]);
        let x = self.mlp1.forward(g, x);
        let x = g.gelu(x);
        let half = self.hidden / 2;
        let local = g.slice_cols(x, 0, half);
        let global = g.slice_cols(x, half, self.hidden - half);
        let global = if pool {
            let m = g.mean_rows(global);
            g.broadcast_rows(m, n)
        } else {
            global
        };
        let fused = g.concat_cols(&[local, global]);
        let y = self.mlp2.forward(g, fused);
        Ok(g.reshape(y, &[h, w, 1]))
    }
}

/// `α · UP(S_l) + P_{l-1}` with nearest ×2 upsampling cropped to the finer grid.
pub fn propagate(g: &mut Graph<'_>, s_l: Var, p_prev: Var, alpha: Var) -> Result<Var> {
    let (sl, sp) = (g.shape(s_l).to_vec(), g.shape(p_prev).to_vec());
    if sl.len() != 3 || sp.len() != 3 || sl[2] != 1 || sp[2] != 1 {
        return shape_err(format!("saliency maps must be [H, W, 1]: {sl:?}, {sp:?}"));
    }
    let fits = |coarse: usize, fine: usize| matches!((2 * coarse).checked_sub(fine), Some(0 | 1));
    if !fits(sl[0], sp[0]) || !fits(sl[1], sp[1]) {
        return shape_err(format!("cannot upsample {sl:?} onto {sp:?}"));
    }
    let idx = spatial::upsample2_index(sl[0], sl[1], sp[0], sp[1]);
    let flat = g.reshape(s_l, &[sl[0] * sl[1], 1]);
    let up = g.gather_rows(flat, &idx);
    let up = g.mul_bcast(up, alpha);
    let p = g.reshape(p_prev, &[sp[0] * sp[1], 1]);
    let out = g.add(up, p);
    Ok(g.reshape(out, &[sp[0], sp[1], 1]))
}

#[derive(Clone, Debug)]
pub struct SaliencyHead {
    pub config: SaliencyConfig,
    pub predictors: Vec<SaliencyPredictor>,
    pub alpha: ParamId,
}

impl SaliencyHead {
    pub fn new(init: &mut Init<'_>, config: &SaliencyConfig, channels: &[usize]) -> Result<Self> {
        if config.hidden < 2 || !config.hidden.is_multiple_of(2) {
            return config_err(format!("saliency hidden width must be even, got {}", config.hidden));
        }
        let predictors = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| SaliencyPredictor::new(init, &format!("saliency.level{l}"), c, config.hidden))
            .collect();
        let alpha = init.constant("saliency.alpha", &[1], config.alpha_init);
        Ok(Self {
            config: config.clone(),
            predictors,
            alpha,
        })
    }

    /// Raw per-level predictions without propagation.
    pub fn predict(&self, g: &mut Graph<'_>, pyramid: &FeaturePyramid) -> Result<Vec<Var>> {
        if pyramid.levels.len() != self.predictors.len() {
            return Err(Error::Contract(format!(
                "saliency head has {} levels, pyramid has {}",
                self.predictors.len(),
                pyramid.levels.len()
            )));
        }
        self.predictors
            .iter()
            .zip(&pyramid.levels)
            .map(|(p, &f)| p.forward(g, f))
            .collect()
    }

    /// Propagated maps, coarsest level first in the recursion, returned finest first.
    pub fn forward(&self, g: &mut Graph<'_>, pyramid: &FeaturePyramid) -> Result<SaliencyPyramid> {
        let raw = self.predict(g, pyramid)?;
        let alpha = g.param(self.alpha);
        let mut maps = raw.clone();
        for l in (0..raw.len().saturating_sub(1)).rev() {
            maps[l] = propagate(g, maps[l + 1], raw[l], alpha)?;
        }
        Ok(SaliencyPyramid { maps, alpha })
    }
}

/// Mean sigmoid focal loss over every cell of every level.
pub fn saliency_loss(
    g: &mut Graph<'_>,
    maps: &[Var],
    targets: &[Array],
    focal_alpha: f64,
    focal_gamma: f64,
) -> Result<Var> {
    if maps.len() != targets.len() {
        return shape_err(format!("{} maps vs {} targets", maps.len(), targets.len()));
    }
    let mut flat = Vec::with_capacity(maps.len());
    let mut t = Vec::new();
    for (&m, c) in maps.iter().zip(targets) {
        let n = g.value(m).len();
        if c.len() != n {
            return shape_err(format!("map {:?} vs target {:?}", g.shape(m), c.shape()));
        }
        if c.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("saliency targets must lie in [0, 1]".into()));
        }
        flat.push(g.reshape(m, &[n, 1]));
        t.extend_from_slice(c.data());
    }
    let logits = if flat.len() == 1 { flat[0] } else { g.concat_rows(&flat) };
    let n = t.len();
    let losses = g.sigmoid_focal(logits, Array::new(vec![n, 1], t), focal_alpha, focal_gamma);
    Ok(g.mean(losses))
}
