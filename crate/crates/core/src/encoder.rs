//! Shared four-stage hierarchical windowed-attention encoder.
//!
//! Stage `s` produces `F_s` at `1 / 2^(s+1)` of the input resolution: the stem
//! embeds 4×4 patches for stage 1, and stages 2–4 start with a 2×2 patch merge
//! that halves the grid and doubles the channels. Each stage then stacks
//! windowed-attention layers that alternate plain and half-window shifted
//! windows.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, PAD_ROW};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{Activation, LayerNorm, Linear, Mlp};
use crate::params::{Init, ParamId};
use crate::spatial::{self, ceil_div};
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub window_size: usize,
    pub stage_depths: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub mlp_ratio: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Small configuration that trains in CI time.
    pub fn desk() -> Self {
        Self {
            patch_size: 4,
            window_size: 8,
            stage_depths: vec![1, 1, 1, 1],
            stage_channels: vec![24, 48, 96, 192],
            num_heads: vec![1, 2, 4, 8],
            mlp_ratio: 4.0,
        }
    }

    /// Swin-T layout: channels 96/192/384/768.
    pub fn swin_tiny() -> Self {
        Self {
            patch_size: 4,
            window_size: 8,
            stage_depths: vec![2, 2, 6, 2],
            stage_channels: vec![96, 192, 384, 768],
            num_heads: vec![3, 6, 12, 24],
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 4 || self.stage_depths.len() != 4 || self.num_heads.len() != 4 {
            return config_err("encoder needs exactly four stages of channels, depths and heads");
        }
        for s in 1..4 {
            if self.stage_channels[s] != 2 * self.stage_channels[s - 1] {
                return config_err(format!(
                    "stage channels must double: {:?}",
                    self.stage_channels
                ));
            }
        }
        for (c, h) in self.stage_channels.iter().zip(&self.num_heads) {
            if *h == 0 || c % h != 0 {
                return config_err(format!("{h} heads do not divide {c} channels"));
            }
        }
        if self.patch_size == 0 || self.window_size == 0 {
            return config_err("patch and window size must be positive");
        }
        if self.mlp_ratio <= 0.0 {
            return config_err("mlp_ratio must be positive");
        }
        Ok(())
    }

    /// Output grid of every stage for an `h × w` input.
    pub fn level_dims(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut dims = vec![(ceil_div(h, self.patch_size), ceil_div(w, self.patch_size))];
        for _ in 1..4 {
            let (ph, pw) = *dims.last().unwrap();
            dims.push((ceil_div(ph, 2), ceil_div(pw, 2)));
        }
        dims
    }
}

/// Encoder outputs `F_1..F_4`, each a `[H_s, W_s, C_s]` graph value.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub dims: Vec<(usize, usize)>,
    pub channels: Vec<usize>,
    /// `(H, W)` of the unpadded input image.
    pub source_dims: (usize, usize),
}

impl FeaturePyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Stem: non-overlapping `p × p` patches projected to `C_1`, then normalized.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub patch: usize,
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new(init: &mut Init<'_>, name: &str, patch: usize, dim: usize) -> Self {
        Self {
            patch,
            proj: Linear::new(init, &format!("{name}.proj"), patch * patch * 3, dim, true),
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim),
        }
    }

    /// `[H, W, 3]` → `[ceil(H/p), ceil(W/p), C_1]`, zero-padding bottom/right.
    pub fn forward(&self, g: &mut Graph<'_>, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[2] != 3 {
            return shape_err(format!("patch embedding expects [H, W, 3], got {s:?}"));
        }
        let (h, w) = (s[0], s[1]);
        if h == 0 || w == 0 {
            return Err(Error::DegenerateInput(format!("empty image {s:?}")));
        }
        let p = self.patch;
        let (gh, gw) = (ceil_div(h, p), ceil_div(w, p));
        let mut idx = Vec::with_capacity(gh * gw * p * p);
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        let (y, x) = (py * p + dy, px * p + dx);
                        idx.push(if y < h && x < w { y * w + x } else { PAD_ROW });
                    }
                }
            }
        }
        let flat = g.reshape(image, &[h * w, 3]);
        let patches = g.gather_rows(flat, &idx);
        let patches = g.reshape(patches, &[gh * gw, p * p * 3]);
        let t = self.proj.forward(g, patches);
        let t = self.norm.forward(g, t);
        let c = self.proj.out_dim;
        Ok(g.reshape(t, &[gh, gw, c]))
    }
}

/// Multi-head self-attention inside non-overlapping windows, with a learned
/// relative position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub dim: usize,
    pub heads: usize,
    /// Largest window this module supports (size of the bias table).
    pub max_window: usize,
    pub qkv: Linear,
    pub proj: Linear,
    pub rel_bias: ParamId,
}

/// Result of a windowed attention call, with the attention probabilities kept
/// for inspection.
pub struct WindowAttentionOutput {
    pub tokens: Var,
    /// `[num_windows * heads, win², win²]` softmax rows.
    pub attention: Var,
}

impl WindowAttention {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, max_window: usize) -> Self {
        let table = (2 * max_window - 1) * (2 * max_window - 1);
        Self {
            dim,
            heads,
            max_window,
            qkv: Linear::new(init, &format!("{name}.qkv"), dim, 3 * dim, true),
            proj: Linear::new(init, &format!("{name}.proj"), dim, dim, true),
            rel_bias: init.trunc_normal(&format!("{name}.rel_bias"), &[table, heads], 0.02),
        }
    }

    fn relative_index(&self, win: usize) -> Vec<usize> {
        let m = self.max_window;
        let span = 2 * m - 1;
        let n = win * win;
        let mut idx = Vec::with_capacity(n * n);
        for a in 0..n {
            let (ya, xa) = (a / win, a % win);
            for b in 0..n {
                let (yb, xb) = (b / win, b % win);
                let dy = ya + m - 1 - yb;
                let dx = xa + m - 1 - xb;
                idx.push(dy * span + dx);
            }
        }
        idx
    }

    /// Additive mask separating regions that are not adjacent before the shift.
    fn shift_mask(hp: usize, wp: usize, win: usize, shift: usize, heads: usize) -> Array {
        let region = |v: usize, len: usize| -> usize {
            if v < len - win {
                0
            } else if v < len - shift {
                1
            } else {
                2
            }
        };
        let (nwy, nwx) = (hp / win, wp / win);
        let n = win * win;
        let mut data = Vec::with_capacity(nwy * nwx * heads * n * n);
        for wy in 0..nwy {
            for wx in 0..nwx {
                let labels: Vec<usize> = (0..n)
                    .map(|i| {
                        let y = wy * win + i / win;
                        let x = wx * win + i % win;
                        region(y, hp) * 3 + region(x, wp)
                    })
                    .collect();
                for _ in 0..heads {
                    for a in 0..n {
                        for b in 0..n {
                            data.push(if labels[a] == labels[b] { 0.0 } else { -100.0 });
                        }
                    }
                }
            }
        }
        Array::new(vec![nwy * nwx, heads * n * n], data)
    }

    /// Attention over `tokens: [h*w, C]` laid out on an `h × w` grid.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        tokens: Var,
        h: usize,
        w: usize,
        win: usize,
        shift: bool,
    ) -> Result<WindowAttentionOutput> {
        if win == 0 || win > h.min(w) {
            return config_err(format!("window {win} does not fit a {h}x{w} grid"));
        }
        if win > self.max_window {
            return config_err(format!("window {win} exceeds bias table size {}", self.max_window));
        }
        let shift_by = if shift && win < h.min(w) { win / 2 } else { 0 };
        let hp = ceil_div(h, win) * win;
        let wp = ceil_div(w, win) * win;
        let (c, heads) = (self.dim, self.heads);
        let dh = c / heads;
        let n = win * win;
        let nw = (hp / win) * (wp / win);

        let part = spatial::window_partition_index(h, w, hp, wp, win, shift_by);
        let windows = g.gather_rows(tokens, &part);
        let qkv = self.qkv.forward(g, windows);
        let qkv = g.reshape(qkv, &[nw, n, 3, heads, dh]);
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]);
        let qkv = g.reshape(qkv, &[3 * nw * heads, n, dh]);
        let q = g.slice_rows(qkv, 0, nw * heads);
        let k = g.slice_rows(qkv, nw * heads, nw * heads);
        let v = g.slice_rows(qkv, 2 * nw * heads, nw * heads);

        let scores = g.bmm(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let table = g.param(self.rel_bias);
        let bias = g.gather_rows(table, &self.relative_index(win));
        let bias = g.reshape(bias, &[n, n, heads]);
        let bias = g.permute(bias, &[2, 0, 1]);
        let scores = g.reshape(scores, &[nw, heads * n * n]);
        let mut scores = g.add_bcast(scores, bias);
        if shift_by > 0 {
            let mask = g.constant(Self::shift_mask(hp, wp, win, shift_by, heads));
            scores = g.add(scores, mask);
        }
        let scores = g.reshape(scores, &[nw * heads, n, n]);
        let attn = g.softmax(scores);
        let out = g.bmm(attn, v, false, false);
        let out = g.reshape(out, &[nw, heads, n, dh]);
        let out = g.permute(out, &[0, 2, 1, 3]);
        let out = g.reshape(out, &[nw * n, c]);
        let out = self.proj.forward(g, out);
        let rev = spatial::window_reverse_index(h, w, hp, wp, win, shift_by);
        let tokens = g.gather_rows(out, &rev);
        Ok(WindowAttentionOutput { tokens, attention: attn })
    }
}

/// One residual layer `T + MLP(LN(T + Attn(LN(T))))`.
///
/// The attention branch feeds the MLP input rather than the output sum, so a
/// single outer residual wraps both sublayers.
#[derive(Clone, Debug)]
pub struct SwinLayer {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl SwinLayer {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, window: usize, mlp_ratio: f64) -> Self {
        let hidden = ((dim as f64) * mlp_ratio).round().max(1.0) as usize;
        Self {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim),
            attn: WindowAttention::new(init, &format!("{name}.attn"), dim, heads, window),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(init, &format!("{name}.mlp"), dim, hidden, dim, Activation::Gelu),
        }
    }

    /// `x: [h, w, C]` → same shape.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, win: usize, shift: bool) -> Result<Var> {
        Ok(self.forward_with_attention(g, x, win, shift)?.0)
    }

    pub fn forward_with_attention(&self, g: &mut Graph<'_>, x: Var, win: usize, shift: bool) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.attn.dim {
            return shape_err(format!("layer of width {} got {s:?}", self.attn.dim));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let t = g.reshape(x, &[h * w, c]);
        let a = self.norm1.forward(g, t);
        let out = self.attn.forward(g, a, h, w, win, shift)?;
        let u = g.add(t, out.tokens);
        let v = self.norm2.forward(g, u);
        let m = self.mlp.forward(g, v);
        let y = g.add(t, m);
        Ok((g.reshape(y, &[h, w, c]), out.attention))
    }
}

/// Largest usable window for a grid: the configured size, clamped to the grid side.
pub fn effective_window(window: usize, h: usize, w: usize) -> usize {
    window.min(h).min(w).max(1)
}

/// 2×2 neighbourhood concat → LayerNorm → linear `4C → 2C`.
#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
    pub in_dim: usize,
}

impl PatchMerging {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        Self {
            norm: LayerNorm::new(init, &format!("{name}.norm"), 4 * dim),
            reduction: Linear::new(init, &format!("{name}.reduction"), 4 * dim, 2 * dim, false),
            in_dim: dim,
        }
    }

    /// Row order of the `[h/2 * w/2 * 4, C]` neighbourhood gather: `(0,0)`,
    /// `(1,0)`, `(0,1)`, `(1,1)` offsets within each 2×2 block.
    pub fn neighbourhood_index(h: usize, w: usize) -> Vec<usize> {
        let (h2, w2) = (ceil_div(h, 2), ceil_div(w, 2));
        let mut idx = Vec::with_capacity(h2 * w2 * 4);
        for y in 0..h2 {
            for x in 0..w2 {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (yy, xx) = (2 * y + dy, 2 * x + dx);
                    idx.push(if yy < h && xx < w { yy * w + xx } else { PAD_ROW });
                }
            }
        }
        idx
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.in_dim {
            return shape_err(format!("patch merging of width {} got {s:?}", self.in_dim));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if h == 0 || w == 0 {
            return Err(Error::DegenerateInput(format!("cannot merge an empty {h}x{w} grid")));
        }
        let (h2, w2) = (ceil_div(h, 2), ceil_div(w, 2));
        let flat = g.reshape(x, &[h * w, c]);
        let nb = g.gather_rows(flat, &Self::neighbourhood_index(h, w));
        let nb = g.reshape(nb, &[h2 * w2, 4 * c]);
        let nb = self.norm.forward(g, nb);
        let y = self.reduction.forward(g, nb);
        Ok(g.reshape(y, &[h2, w2, 2 * c]))
    }
}

/// One encoder stage: optional patch merge, then `depth` windowed layers.
#[derive(Clone, Debug)]
pub struct SwinStage {
    pub merge: Option<PatchMerging>,
    pub layers: Vec<SwinLayer>,
    pub window: usize,
}

impl SwinStage {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut x = match &self.merge {
            Some(m) => m.forward(g, x)?,
            None => x,
        };
        let s = g.shape(x).to_vec();
        let win = effective_window(self.window, s[0], s[1]);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x, win, i % 2 == 1)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct SharedEncoder {
    pub config: EncoderConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<SwinStage>,
}

impl SharedEncoder {
    pub fn new(init: &mut Init<'_>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let c = &config.stage_channels;
        let embed = PatchEmbed::new(init, "encoder.embed", config.patch_size, c[0]);
        let stages = (0..4)
            .map(|s| {
                let merge = (s > 0).then(|| PatchMerging::new(init, &format!("encoder.stage{}.merge", s + 1), c[s - 1]));
                let layers = (0..config.stage_depths[s])
                    .map(|l| {
                        SwinLayer::new(
                            init,
                            &format!("encoder.stage{}.layer{l}", s + 1),
                            c[s],
                            config.num_heads[s],
                            config.window_size,
                            config.mlp_ratio,
                        )
                    })
                    .collect();
                SwinStage {
                    merge,
                    layers,
                    window: config.window_size,
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embed,
            stages,
        })
    }

    /// Embeds the image for stage 1.
    pub fn patch_embed(&self, g: &mut Graph<'_>, image: Var) -> Result<Var> {
        self.embed.forward(g, image)
    }

    /// `image: [H, W, 3]` in `[0, 1]` → `F_1..F_4`.
    pub fn encode(&self, g: &mut Graph<'_>, image: Var) -> Result<FeaturePyramid> {
        let s = g.shape(image).to_vec();
        let mut x = self.patch_embed(g, image)?;
        let mut levels = Vec::with_capacity(4);
        let mut dims = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.forward(g, x)?;
            let sh = g.shape(x);
            dims.push((sh[0], sh[1]));
            levels.push(x);
        }
        Ok(FeaturePyramid {
            levels,
            dims,
            channels: self.config.stage_channels.clone(),
            source_dims: (s[0], s[1]),
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::{ParamGroup, ParamStore};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            patch_size: 4,
            window_size: 4,
            stage_depths: vec![2, 1, 1, 0],
            stage_channels: vec![8, 16, 32, 64],
            num_heads: vec![2, 2, 4, 4],
            mlp_ratio: 2.0,
        }
    }

    fn build(cfg: &EncoderConfig) -> (SharedEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init::new(&mut store, &mut rng, ParamGroup::Feat);
        let enc = SharedEncoder::new(&mut init, cfg).unwrap();
        (enc, store)
    }

    fn image(h: usize, w: usize) -> Array {
        Array::from_fn(&[h, w, 3], |i| ((i * 37 % 101) as f64) / 100.0)
    }

    #[test]
    fn patch_embed_pads_non_divisible_input() {
        let (enc, store) = build(&tiny());
        let mut g = Graph::new(&store);
        let x = g.constant(image(250, 250));
        let t = enc.patch_embed(&mut g, x).unwrap();
        assert_eq!(g.shape(t), &[63, 63, 8]);
    }

    #[test]
    fn single_patch_image() {
        let (enc, store) = build(&tiny());
        let mut g = Graph::new(&store);
        let x = g.constant(image(4, 4));
        let t = enc.patch_embed(&mut g, x).unwrap();
        assert_eq!(g.shape(t), &[1, 1, 8]);
    }

    #[test]
    fn non_rgb_input_is_rejected() {
        let (enc, store) = build(&tiny());
        let mut g = Graph::new(&store);
        let x = g.constant(Array::zeros(&[8, 8, 4]));
        assert!(matches!(enc.patch_embed(&mut g, x), Err(Error::Shape(_))));
    }

    #[test]
    fn oversized_window_is_a_config_error() {
        let (enc, store) = build(&tiny());
        let mut g = Graph::new(&store);
        let x = g.constant(Array::zeros(&[9, 8]));
        let attn = &enc.stages[0].layers[0].attn;
        assert!(matches!(attn.forward(&mut g, x, 3, 3, 4, false), Err(Error::Config(_))));
    }

    #[test]
    fn config_rejects_non_doubling_channels() {
        let mut cfg = tiny();
        cfg.stage_channels = vec![8, 16, 24, 64];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (enc, store) = build(&tiny());
        let mut g = Graph::new(&store);
        let x = g.constant(image(32, 32));
        let t = enc.patch_embed(&mut g, x).unwrap();
        for shift in [false, true] {
            let (_, attn) = enc.stages[0].layers[0].forward_with_attention(&mut g, t, 4, shift).unwrap();
            let a = g.value(attn);
            for row in a.data().chunks(a.cols()) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shift_and_partition_invert_exactly() {
        // identity attention: partition then reverse must give back the input
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let src = Array::from_fn(&[7 * 6, 5], |i| (i as f64).sin());
        let x = g.constant(src.clone());
        let (h, w, win, shift) = (7, 6, 4, 2);
        let (hp, wp) = (8, 8);
        let part = g.gather_rows(x, &spatial::window_partition_index(h, w, hp, wp, win, shift));
        let back = g.gather_rows(part, &spatial::window_reverse_index(h, w, hp, wp, win, shift));
        assert_eq!(g.value(back), &src);
    }

    #[test]
    fn zero_output_projection_leaves_mlp_residual() {
        let (enc, mut store) = build(&tiny());
        let layer = enc.stages[0].layers[0].clone();
        store.value_mut(layer.attn.proj.weight).data_mut().fill(0.0);
        let mut g = Graph::new(&store);
        let x = g.constant(Array::from_fn(&[4, 4, 8], |i| (i as f64 * 0.37).cos()));
        let y = layer.forward(&mut g, x, 4, false).unwrap();
        // oracle: T + MLP(LN2(T)) with Attn ≡ 0
        let t = g.reshape(x, &[16, 8]);
        let v = layer.norm2.forward(&mut g, t);
        let m = layer.mlp.forward(&mut g, v);
        let expect = g.add(t, m);
        assert_eq!(g.value(y).data(), g.value(expect).data());
    }

    #[test]
    fn depth_zero_stage_is_a_pure_merge() {
        let (enc, store) = build(&tiny());
        let stage = &enc.stages[3];
        assert!(stage.layers.is_empty());
        let merge = stage.merge.as_ref().unwrap();
        let mut g = Graph::new(&store);
        let src = Array::from_fn(&[2, 2, 32], |i| (i as f64 * 0.11).sin());
        let x = g.constant(src.clone());
        let y = stage.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 64]);
        // oracle: concat (0,0),(1,0),(0,1),(1,1) → normalize → project
        let px = |y: usize, x: usize| &src.data()[(y * 2 + x) * 32..(y * 2 + x + 1) * 32];
        let cat: Vec<f64> = [px(0, 0), px(1, 0), px(0, 1), px(1, 1)].concat();
        let mean = cat.iter().sum::<f64>() / 128.0;
        let var = cat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 128.0;
        let normed: Vec<f64> = cat.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
        let wmat = store.value(merge.reduction.weight);
        for o in 0..64 {
            let expect: f64 = (0..128).map(|i| normed[i] * wmat.data()[i * 64 + o]).sum();
            assert!((g.value(y).data()[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_dims_follow_ceil_law() {
        let (enc, store) = build(&tiny());
        for &(h, w) in &[(64, 64), (50, 70), (16, 16)] {
            let mut g = Graph::new(&store);
            let x = g.constant(image(h, w));
            let p = enc.encode(&mut g, x).unwrap();
            for s in 0..4 {
                let f = 1 << (s + 2);
                assert_eq!(p.dims[s], (h.div_ceil(f), w.div_ceil(f)));
                assert_eq!(g.shape(p.levels[s])[2], tiny().stage_channels[s]);
            }
        }
    }
}
