//! U-shaped decoder that turns the shared pyramid back into a ×2 image.
//!
//! Starting from `F_4`, each step expands the grid (×2 space, ÷2 channels),
//! fuses the matching encoder level by concatenation plus a linear projection,
//! and runs residual windowed-attention blocks. Two further expansions reach the
//! input resolution, where the LR image itself is the skip. A conv / LeakyReLU /
//! pixel-shuffle / conv head then produces the ×2 output.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{effective_window, FeaturePyramid, SwinLayer};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{Conv2d, LayerNorm, Linear};
use crate::params::Init;
use crate::resample;
use crate::spatial::{self, ceil_div};
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrConfig {
    /// Residual blocks after each expansion.
    pub blocks_per_level: usize,
    /// Channels after the pixel shuffle.
    pub recon_channels: usize,
    pub leaky_slope: f64,
    /// Add a bicubic upsample of the LR input to the decoder output.
    pub global_residual: bool,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            blocks_per_level: 1,
            recon_channels: 8,
            leaky_slope: 0.2,
            global_residual: true,
        }
    }
}

/// A super-resolved image and the id of the LR input it came from.
#[derive(Clone, Debug)]
pub struct SrImage {
    pub image: Array,
    pub source_id: Option<String>,
}

/// LayerNorm → per-pixel linear `C → 2C` (a 2×2 stride-2 transposed
/// convolution) → rearrange to `(2h, 2w, C/2)`.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub norm: LayerNorm,
    pub deconv: Linear,
    pub dim: usize,
}

impl PatchExpand {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Result<Self> {
        if !dim.is_multiple_of(2) || dim == 0 {
            return config_err(format!("patch expand needs an even channel count, got {dim}"));
        }
        Ok(Self {
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim),
            deconv: Linear::new(init, &format!("{name}.deconv"), dim, 2 * dim, true),
            dim,
        })
    }

    /// Output column `(dy * 2 + dx) * C/2 + c` lands at pixel `(2y+dy, 2x+dx)`, channel `c`.
    pub fn forward(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return shape_err(format!("patch expand of width {} got {s:?}", self.dim));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let t = g.reshape(z, &[h * w, c]);
        let t = self.norm.forward(g, t);
        let t = self.deconv.forward(g, t);
        let t = g.reshape(t, &[h, w, 2, 2, c / 2]);
        let t = g.permute(t, &[0, 2, 1, 3, 4]);
        Ok(g.reshape(t, &[2 * h, 2 * w, c / 2]))
    }
}

/// `(H, W, r²k)` → `(rH, rW, k)` with `r = 2`; channel `c·4 + dy·2 + dx`
/// goes to pixel `(2y+dy, 2x+dx)`.
pub fn pixel_shuffle(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || !s[2].is_multiple_of(4) {
        return config_err(format!("pixel shuffle needs channels divisible by 4, got {s:?}"));
    }
    let (h, w, k) = (s[0], s[1], s[2] / 4);
    let t = g.reshape(x, &[h, w, k, 2, 2]);
    let t = g.permute(t, &[0, 3, 1, 4, 2]);
    Ok(g.reshape(t, &[2 * h, 2 * w, k]))
}

/// Inverse of [`pixel_shuffle`] on plain arrays.
pub fn pixel_unshuffle(x: &Array) -> Array {
    let s = x.shape();
    let (h, w, k) = (s[0] / 2, s[1] / 2, s[2]);
    x.clone()
        .reshape(&[h, 2, w, 2, k])
        .permute(&[0, 2, 4, 1, 3])
        .reshape(&[h, w, 4 * k])
}

/// Decoder stage: expand, optional skip fusion, residual blocks.
#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub expand: PatchExpand,
    pub fuse: Linear,
    pub blocks: Vec<SwinLayer>,
}

#[derive(Clone, Debug)]
pub struct SrDecoder {
    pub config: SrConfig,
    pub window: usize,
    /// Three pyramid levels (`F_3`, `F_2`, `F_1`), then half and full LR resolution.
    pub levels: Vec<DecoderLevel>,
    pub conv_in: Conv2d,
    pub conv_out: Conv2d,
}

impl SrDecoder {
    pub fn new(
        init: &mut Init<'_>,
        config: &SrConfig,
        channels: &[usize],
        heads: &[usize],
        window: usize,
        mlp_ratio: f64,
    ) -> Result<Self> {
        if channels.len() != 4 {
            return config_err("SR decoder needs four encoder channel widths");
        }
        if !channels[0].is_multiple_of(4) {
            return config_err(format!("first stage width {} must be divisible by 4", channels[0]));
        }
        if config.recon_channels == 0 {
            return config_err("recon_channels must be positive");
        }
        let mut levels = Vec::new();
        let mut dim = channels[3];
        for i in 0..5 {
            let name = format!("sr.level{i}");
            let expand = PatchExpand::new(init, &format!("{name}.expand"), dim)?;
            let out = dim / 2;
            let skip = if i < 3 { channels[2 - i] } else if i == 4 { 3 } else { 0 };
            let head_count = if i < 3 { heads[2 - i] } else { 1 };
            let fuse = Linear::xavier(init, &format!("{name}.fuse"), out + skip, out);
            let blocks = (0..config.blocks_per_level)
                .map(|b| SwinLayer::new(init, &format!("{name}.block{b}"), out, head_count, window, mlp_ratio))
                .collect();
            levels.push(DecoderLevel { expand, fuse, blocks });
            dim = out;
        }
        let k = config.recon_channels;
        let conv_in = Conv2d::new(init, "sr.conv_in", dim, 4 * k, 3);
        // near-zero output conv: training starts close to the bicubic residual
        let conv_out = Conv2d::scaled(init, "sr.conv_out", k, 3, 3, 0.01);
        Ok(Self {
            config: config.clone(),
            window,
            levels,
            conv_in,
            conv_out,
        })
    }

    fn run_blocks(&self, g: &mut Graph<'_>, level: &DecoderLevel, mut z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        let win = effective_window(self.window, s[0], s[1]);
        for (i, b) in level.blocks.iter().enumerate() {
            z = b.forward(g, z, win, i % 2 == 1)?;
        }
        Ok(z)
    }

    /// Conv → LeakyReLU → pixel shuffle → conv; `(H, W, C)` → `(2H, 2W, 3)`.
    pub fn reconstruct(&self, g: &mut Graph<'_>, f: Var) -> Result<Var> {
        let y = self.conv_in.forward(g, f);
        let y = g.leaky_relu(y, self.config.leaky_slope);
        let y = pixel_shuffle(g, y)?;
        Ok(self.conv_out.forward(g, y))
    }

    /// Unclamped `(2H, 2W, 3)` prediction from the pyramid and the LR image.
    pub fn decode(&self, g: &mut Graph<'_>, pyramid: &FeaturePyramid, lr: Var) -> Result<Var> {
        if pyramid.levels.len() != 4 || pyramid.dims.len() != 4 {
            return Err(Error::Contract(format!(
                "SR decoding needs all four pyramid levels, got {}",
                pyramid.levels.len()
            )));
        }
        let (h, w) = pyramid.source_dims;
        let targets = [
            pyramid.dims[2],
            pyramid.dims[1],
            pyramid.dims[0],
            (ceil_div(h, 2), ceil_div(w, 2)),
            (h, w),
        ];
        let mut z = pyramid.levels[3];
        for (i, level) in self.levels.iter().enumerate() {
            z = level.expand.forward(g, z)?;
            let (th, tw) = targets[i];
            z = spatial::crop(g, z, th, tw);
            let c = g.shape(z)[2];
            let flat = g.reshape(z, &[th * tw, c]);
            let fused = match i {
                0..=2 => {
                    let skip = pyramid.levels[2 - i];
                    let sc = g.shape(skip)[2];
                    let skip = g.reshape(skip, &[th * tw, sc]);
                    g.concat_cols(&[flat, skip])
                }
                4 => {
                    let skip = g.reshape(lr, &[th * tw, 3]);
                    g.concat_cols(&[flat, skip])
                }
                _ => flat,
            };
            let fused = level.fuse.forward(g, fused);
            z = g.reshape(fused, &[th, tw, c]);
            z = self.run_blocks(g, level, z)?;
        }
        let mut out = self.reconstruct(g, z)?;
        if self.config.global_residual {
            let up = resample::resize_bicubic(g.value(lr), 2 * h, 2 * w);
            let up = g.constant(up);
            out = g.add(out, up);
        }
        Ok(out)
    }
}

/// Clamps a decoded image to `[0, 1]` for output.
pub fn finalize(image: &Array) -> Array {
    image.map(|v| v.clamp(0.0, 1.0))
}

/// Mean absolute error between prediction and HR target.
pub fn sr_loss(g: &mut Graph<'_>, sr: Var, hr: Var) -> Result<Var> {
    if g.shape(sr) != g.shape(hr) {
        return shape_err(format!("SR {:?} vs HR {:?}", g.shape(sr), g.shape(hr)));
    }
    let d = g.sub(sr, hr);
    let d = g.abs(d);
    Ok(g.mean(d))
}
