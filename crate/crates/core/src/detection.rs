//! Deformable-attention detector on the shared pyramid, plus matching and losses.
//!
//! The encoder runs saliency-filtered deformable layers over the flattened
//! pyramid tokens. Two-stage initialization picks the top-scoring encoder
//! tokens as reference boxes, and each decoder layer refines them with
//! self-attention, deformable cross-attention and an FFN.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::boxes::{cxcywh_to_xyxy, giou_unchecked, GtBox};
use crate::deformable::{DeformableEncoderLayer, MsDeformAttn, SamplingFrame, TokenLayout};
use crate::encoder::FeaturePyramid;
use crate::error::{config_err, shape_err, Error, Result};
use crate::filter::{self, BackgroundEmbedding, FilterConfig, FilterSchedule};
use crate::matching::hungarian;
use crate::nn::{Activation, DeepMlp, LayerNorm, Linear, Mlp};
use crate::params::{Init, ParamId};
use crate::tensor::Array;

/// Bias giving an initial foreground probability of 0.01.
pub fn prior_bias() -> f64 {
    -((1.0 - 0.01) / 0.01f64).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub d_model: usize,
    pub heads: usize,
    pub points: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    /// Largest grid side the background table covers.
    pub max_grid: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub match_weights: MatchWeights,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 8,
            points: 4,
            encoder_layers: 6,
            decoder_layers: 3,
            num_queries: 50,
            ffn_dim: 128,
            num_classes: 4,
            max_grid: 128,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            match_weights: MatchWeights::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self, filter: &FilterConfig, levels: usize) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return config_err(format!("{} heads do not divide d_model {}", self.heads, self.d_model));
        }
        if !self.d_model.is_multiple_of(4) {
            return config_err("d_model must be divisible by 4 for the positional encoding");
        }
        if self.points == 0 || self.num_queries == 0 || self.num_classes == 0 || self.decoder_layers == 0 {
            return config_err("points, queries, classes and decoder layers must be positive");
        }
        filter.schedule().validate(levels, self.encoder_layers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchWeights {
    pub class: f64,
    pub bbox: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            bbox: 5.0,
            giou: 2.0,
        }
    }
}

/// Loss weights for the detection, saliency and SR terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cls: f64,
    pub bbox: f64,
    pub giou: f64,
    pub sa: f64,
    pub sr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            bbox: 5.0,
            giou: 2.0,
            sa: 1.0,
            sr: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, w) in [
            ("cls", self.cls),
            ("bbox", self.bbox),
            ("giou", self.giou),
            ("sa", self.sa),
            ("sr", self.sr),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return config_err(format!("loss weight {n} = {w} must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Sine encoding of values in `[0, 1]`: `feats` features per value, sin/cos interleaved.
pub fn sine_embed(values: &[f64], feats: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len() * feats);
    for &v in values {
        let s = v * 2.0 * std::f64::consts::PI;
        for i in 0..feats {
            let t = 10000f64.powf((2 * (i / 2)) as f64 / feats as f64);
            out.push(if i % 2 == 0 { (s / t).sin() } else { (s / t).cos() });
        }
    }
    out
}

pub(crate) fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(1e-5, 1.0 - 1e-5);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Standard multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            heads,
            q: Linear::xavier(init, &format!("{name}.q"), dim, dim),
            k: Linear::xavier(init, &format!("{name}.k"), dim, dim),
            v: Linear::xavier(init, &format!("{name}.v"), dim, dim),
            out: Linear::xavier(init, &format!("{name}.out"), dim, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, q: Var, k: Var, v: Var) -> Var {
        let (nq, d) = (g.shape(q)[0], self.q.out_dim);
        let nk = g.shape(k)[0];
        let h = self.heads;
        let dh = d / h;
        let split = |g: &mut Graph<'_>, x: Var, n: usize| {
            let x = g.reshape(x, &[n, h, dh]);
            g.permute(x, &[1, 0, 2])
        };
        let qp = self.q.forward(g, q);
        let qh = split(g, qp, nq);
        let kp = self.k.forward(g, k);
        let kh = split(g, kp, nk);
        let vp = self.v.forward(g, v);
        let vh = split(g, vp, nk);
        let s = g.bmm(qh, kh, false, true);
        let s = g.scale(s, 1.0 / (dh as f64).sqrt());
        let a = g.softmax(s);
        let o = g.bmm(a, vh, false, false);
        let o = g.permute(o, &[1, 0, 2]);
        let o = g.reshape(o, &[nq, d]);
        self.out.forward(g, o)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MsDeformAttn,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    fn new(init: &mut Init<'_>, name: &str, cfg: &DetectorConfig, levels: usize) -> Self {
        let d = cfg.d_model;
        Self {
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self_attn"), d, cfg.heads),
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), d),
            cross_attn: MsDeformAttn::new(init, &format!("{name}.cross_attn"), d, cfg.heads, levels, cfg.points),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), d),
            ffn: Mlp::new(init, &format!("{name}.ffn"), d, cfg.ffn_dim, d, Activation::Relu),
            norm3: LayerNorm::new(init, &format!("{name}.norm3"), d),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph<'_>,
        tgt: Var,
        qpos: Var,
        memory: Var,
        dims: &[(usize, usize)],
        frame: &SamplingFrame,
    ) -> Var {
        let q = g.add(tgt, qpos);
        let sa = self.self_attn.forward(g, q, q, tgt);
        let x = g.add(tgt, sa);
        let x = self.norm1.forward(g, x);
        let q = g.add(x, qpos);
        let ca = self.cross_attn.forward(g, q, memory, dims, frame);
        let x = g.add(x, ca);
        let x = self.norm2.forward(g, x);
        let f = self.ffn.forward(g, x);
        let x = g.add(x, f);
        self.norm3.forward(g, x)
    }
}

/// Class logits `[Q, classes]` and sigmoid boxes `[Q, 4]` (cx, cy, w, h).
#[derive(Clone, Copy, Debug)]
pub struct PredictionSet {
    pub logits: Var,
    pub boxes: Var,
}

#[derive(Clone, Debug)]
pub struct DetectionOutput {
    /// Final decoder layer.
    pub main: PredictionSet,
    /// Earlier decoder layers, first to second-to-last.
    pub aux: Vec<PredictionSet>,
    /// Two-stage proposals picked from the encoder.
    pub encoder: PredictionSet,
    /// Active-set size per encoder layer.
    pub active_sizes: Vec<usize>,
    /// Deformable sampling sites spent in the encoder.
    pub encoder_sites: u64,
}

impl DetectionOutput {
    /// Every prediction set that receives a loss.
    pub fn all_sets(&self) -> Vec<PredictionSet> {
        let mut v = vec![self.main];
        v.extend(self.aux.iter().copied());
        v.push(self.encoder);
        v
    }
}

fn box_head(init: &mut Init<'_>, name: &str, d: usize) -> DeepMlp {
    DeepMlp {
        layers: vec![
            Linear::xavier(init, &format!("{name}.0"), d, d),
            Linear::xavier(init, &format!("{name}.1"), d, d),
            Linear::zeros_with_bias(init, &format!("{name}.2"), d, Array::zeros(&[4])),
        ],
    }
}

fn class_head(init: &mut Init<'_>, name: &str, d: usize, classes: usize) -> Linear {
    Linear {
        weight: init.xavier(&format!("{name}.weight"), d, classes),
        bias: Some(init.constant(&format!("{name}.bias"), &[classes], prior_bias())),
        in_dim: d,
        out_dim: classes,
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    pub filter: FilterConfig,
    schedule: FilterSchedule,
    pub input_proj: Vec<(Linear, LayerNorm)>,
    pub level_embed: ParamId,
    pub encoder: Vec<DeformableEncoderLayer>,
    pub background: Option<BackgroundEmbedding>,
    pub enc_output: Linear,
    pub enc_norm: LayerNorm,
    pub enc_class: Linear,
    pub enc_bbox: DeepMlp,
    pub tgt_embed: ParamId,
    pub ref_point_head: DeepMlp,
    pub decoder: Vec<DecoderLayer>,
    pub class_head: Linear,
    pub bbox_head: DeepMlp,
}

impl Detector {
    pub fn new(init: &mut Init<'_>, config: &DetectorConfig, filter: &FilterConfig, channels: &[usize]) -> Result<Self> {
        let levels = channels.len();
        config.validate(filter, levels)?;
        let d = config.d_model;
        let input_proj = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                (
                    Linear::xavier(init, &format!("det.input_proj{l}"), c, d),
                    LayerNorm::new(init, &format!("det.input_norm{l}"), d),
                )
            })
            .collect();
        let level_embed = init.trunc_normal("det.level_embed", &[levels, d], 0.02);
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                DeformableEncoderLayer::new(
                    init,
                    &format!("det.encoder{i}"),
                    d,
                    config.heads,
                    levels,
                    config.points,
                    config.ffn_dim,
                )
            })
            .collect();
        let background = if filter.background_embedding {
            Some(BackgroundEmbedding::new(init, "det.background", config.max_grid, config.max_grid, d)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            filter: filter.clone(),
            schedule: filter.schedule(),
            input_proj,
            level_embed,
            encoder,
            background,
            enc_output: Linear::xavier(init, "det.enc_output", d, d),
            enc_norm: LayerNorm::new(init, "det.enc_norm", d),
            enc_class: class_head(init, "det.enc_class", d, config.num_classes),
            enc_bbox: box_head(init, "det.enc_bbox", d),
            tgt_embed: init.trunc_normal("det.tgt_embed", &[config.num_queries, d], 0.02),
            ref_point_head: DeepMlp::new(init, "det.ref_point_head", &[2 * d, d, d]),
            decoder: (0..config.decoder_layers)
                .map(|i| DecoderLayer::new(init, &format!("det.decoder{i}"), config, levels))
                .collect(),
            class_head: class_head(init, "det.class", d, config.num_classes),
            bbox_head: box_head(init, "det.bbox", d),
        })
    }

    /// Flattened projected tokens `[N, d]` and their positional terms.
    fn embed_tokens(&self, g: &mut Graph<'_>, pyramid: &FeaturePyramid, layout: &TokenLayout) -> Result<(Var, Var)> {
        if pyramid.levels.len() != self.input_proj.len() {
            return Err(Error::Contract(format!(
                "detector expects {} levels, got {}",
                self.input_proj.len(),
                pyramid.levels.len()
            )));
        }
        let d = self.config.d_model;
        let mut parts = Vec::with_capacity(pyramid.levels.len());
        for ((proj, norm), &f) in self.input_proj.iter().zip(&pyramid.levels) {
            let s = g.shape(f).to_vec();
            let x = g.reshape(f, &[s[0] * s[1], s[2]]);
            let x = proj.forward(g, x);
            parts.push(norm.forward(g, x));
        }
        let tokens = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        let refs = layout.reference_points();
        let mut pos = Vec::with_capacity(refs.len() * d);
        for r in &refs {
            pos.extend(sine_embed(&[r[1]], d / 2));
            pos.extend(sine_embed(&[r[0]], d / 2));
        }
        let pos = g.constant(Array::new(vec![refs.len(), d], pos));
        let lvl: Vec<usize> = (0..layout.len()).map(|t| layout.cell(t).0).collect();
        let table = g.param(self.level_embed);
        let le = g.gather_rows(table, &lvl);
        Ok((tokens, g.add(pos, le)))
    }

    /// Runs the filtered encoder. `scores` ranks tokens; `None` keeps all active.
    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        pyramid: &FeaturePyramid,
        layout: &TokenLayout,
        scores: Option<&[f64]>,
    ) -> Result<(Var, Vec<usize>)> {
        let (mut tokens, pos) = self.embed_tokens(g, pyramid, layout)?;
        for geom in &layout.geoms {
            if self.background.is_some() && (geom.h > self.config.max_grid || geom.w > self.config.max_grid) {
                return config_err(format!(
                    "grid {}x{} exceeds max_grid {}",
                    geom.h, geom.w, self.config.max_grid
                ));
            }
        }
        let frame = SamplingFrame::points(&layout.reference_points(), layout, self.config.heads, self.config.points);
        let counts = layout.counts();
        let dims = layout.dims();
        let mut sizes = Vec::with_capacity(self.encoder.len());
        for (l, layer) in self.encoder.iter().enumerate() {
            match (self.filter.enabled, scores) {
                (true, Some(s)) => {
                    let set = filter::select_active(s, &counts, &self.schedule, l)?;
                    sizes.push(set.len());
                    tokens = filter::filtered_encoder_layer(
                        g,
                        layer,
                        tokens,
                        pos,
                        layout,
                        &frame,
                        &set.phi,
                        self.background.as_ref(),
                    )?;
                }
                _ => {
                    sizes.push(layout.len());
                    tokens = layer.forward(g, tokens, pos, tokens, &dims, &frame);
                }
            }
        }
        Ok((tokens, sizes))
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        pyramid: &FeaturePyramid,
        layout: &TokenLayout,
        scores: Option<&[f64]>,
    ) -> Result<DetectionOutput> {
        let sites0 = g.stats.attention_sites;
        let (memory, active_sizes) = self.encode(g, pyramid, layout, scores)?;
        let encoder_sites = g.stats.attention_sites - sites0;
        let n = layout.len();
        let d = self.config.d_model;

        // two-stage proposals: fixed-size boxes on every token, refined by the encoder heads
        let refs = layout.reference_points();
        let mut prop = Vec::with_capacity(n * 4);
        for (t, r) in refs.iter().enumerate() {
            let wh = 0.05 * (1u32 << layout.cell(t).0) as f64;
            prop.extend([inverse_sigmoid(r[0]), inverse_sigmoid(r[1]), inverse_sigmoid(wh), inverse_sigmoid(wh)]);
        }
        let prop = g.constant(Array::new(vec![n, 4], prop));
        let om = self.enc_output.forward(g, memory);
        let om = self.enc_norm.forward(g, om);
        let enc_logits = self.enc_class.forward(g, om);
        let enc_delta = self.enc_bbox.forward(g, om);
        let enc_unact = g.add(enc_delta, prop);
        let q = self.config.num_queries.min(n);
        if q < self.config.num_queries {
            log::warn!("{} queries requested but only {n} tokens; using {q}", self.config.num_queries);
        }
        let best: Vec<f64> = g
            .value(enc_logits)
            .data()
            .chunks(self.config.num_classes)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut top = top_indices(&best, q);
        top.sort_unstable_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));
        let sel_logits = g.gather_rows(enc_logits, &top);
        let sel_unact = g.gather_rows(enc_unact, &top);
        let sel_boxes = g.sigmoid(sel_unact);
        let encoder = PredictionSet {
            logits: sel_logits,
            boxes: sel_boxes,
        };

        let mut ref_boxes: Vec<[f64; 4]> = g
            .value(sel_boxes)
            .data()
            .chunks(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        let table = g.param(self.tgt_embed);
        let mut tgt = g.slice_rows(table, 0, q);
        let dims = layout.dims();
        let mut sets = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let emb: Vec<f64> = ref_boxes.iter().flat_map(|b| sine_embed(b, d / 2)).collect();
            let emb = g.constant(Array::new(vec![q, 2 * d], emb));
            let qpos = self.ref_point_head.forward(g, emb);
            let frame = SamplingFrame::boxes(&ref_boxes, layout, self.config.heads, self.config.points);
            tgt = layer.forward(g, tgt, qpos, memory, &dims, &frame);
            let delta = self.bbox_head.forward(g, tgt);
            let inv: Vec<f64> = ref_boxes.iter().flat_map(|b| b.map(inverse_sigmoid)).collect();
            let inv = g.constant(Array::new(vec![q, 4], inv));
            let unact = g.add(delta, inv);
            let boxes = g.sigmoid(unact);
            let logits = self.class_head.forward(g, tgt);
            ref_boxes = g
                .value(boxes)
                .data()
                .chunks(4)
                .map(|c| [c[0], c[1], c[2], c[3]])
                .collect();
            sets.push(PredictionSet { logits, boxes });
        }
        let main = sets.pop().expect("at least one decoder layer");
        Ok(DetectionOutput {
            main,
            aux: sets,
            encoder,
            active_sizes,
            encoder_sites,
        })
    }
}

fn top_indices(scores: &[f64], k: usize) -> Vec<usize> {
    crate::filter::top_k(scores, k)
}

/// One predicted detection in pixel `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class_id: usize,
    pub score: f64,
    pub bbox: [f64; 4],
}

/// Highest-scoring `(query, class)` pairs converted to pixel boxes.
pub fn postprocess(
    logits: &Array,
    boxes: &Array,
    image_id: u64,
    img_w: f64,
    img_h: f64,
    max_dets: usize,
) -> Vec<Detection> {
    let classes = logits.cols();
    let scores: Vec<f64> = logits.data().iter().map(|&x| sigmoid(x)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(max_dets)
        .map(|i| {
            let (q, c) = (i / classes, i % classes);
            let b = boxes.row(q);
            let [x0, y0, x1, y1] = cxcywh_to_xyxy([b[0], b[1], b[2], b[3]]);
            Detection {
                image_id,
                class_id: c,
                score: scores[i],
                bbox: [x0 * img_w, y0 * img_h, (x1 - x0) * img_w, (y1 - y0) * img_h],
            }
        })
        .collect()
}

/// `[Q, G]` matching cost: focal class cost, L1 box distance and `1 - GIoU`.
pub fn match_cost(
    logits: &Array,
    boxes: &Array,
    gts: &[GtBox],
    w: &MatchWeights,
    focal_alpha: f64,
    focal_gamma: f64,
) -> Vec<Vec<f64>> {
    let q = logits.rows();
    (0..q)
        .map(|i| {
            let lg = logits.row(i);
            let b = boxes.row(i);
            let pb = [b[0], b[1], b[2], b[3]];
            gts.iter()
                .map(|gt| {
                    let p = sigmoid(lg[gt.class_id]);
                    let neg = (1.0 - focal_alpha) * p.powf(focal_gamma) * -(1.0 - p + 1e-8).ln();
                    let pos = focal_alpha * (1.0 - p).powf(focal_gamma) * -(p + 1e-8).ln();
                    let t = gt.cxcywh();
                    let l1: f64 = pb.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum();
                    let gi = giou_unchecked(cxcywh_to_xyxy(pb), cxcywh_to_xyxy(t));
                    w.class * (pos - neg) + w.bbox * l1 + w.giou * (1.0 - gi)
                })
                .collect()
        })
        .collect()
}

/// Optimal `(query, gt)` pairs.
pub fn hungarian_match(
    logits: &Array,
    boxes: &Array,
    gts: &[GtBox],
    w: &MatchWeights,
    focal_alpha: f64,
    focal_gamma: f64,
) -> Result<Vec<(usize, usize)>> {
    if gts.len() > logits.rows() {
        return Err(Error::Contract(format!(
            "{} ground-truth boxes but only {} queries",
            gts.len(),
            logits.rows()
        )));
    }
    if gts.is_empty() {
        return Ok(Vec::new());
    }
    Ok(hungarian(&match_cost(logits, boxes, gts, w, focal_alpha, focal_gamma)))
}

#[derive(Clone, Copy, Debug)]
pub struct DetLosses {
    pub cls: Var,
    pub bbox: Var,
    pub giou: Var,
}

/// Per-pair `GIoU` of predicted `[M, 4]` cxcywh boxes against constant targets.
pub fn giou_graph(g: &mut Graph<'_>, pred: Var, target: &Array) -> Var {
    let m = target.rows();
    let col = |g: &mut Graph<'_>, i: usize| g.slice_cols(pred, i, 1);
    let (cx, cy, w, h) = (col(g, 0), col(g, 1), col(g, 2), col(g, 3));
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    let px0 = g.sub(cx, hw);
    let px1 = g.add(cx, hw);
    let py0 = g.sub(cy, hh);
    let py1 = g.add(cy, hh);
    let t: Vec<[f64; 4]> = target
        .data()
        .chunks(4)
        .map(|c| cxcywh_to_xyxy([c[0], c[1], c[2], c[3]]))
        .collect();
    let tcol = |g: &mut Graph<'_>, i: usize| g.constant(Array::new(vec![m, 1], t.iter().map(|b| b[i]).collect()));
    let (tx0, ty0, tx1, ty1) = (tcol(g, 0), tcol(g, 1), tcol(g, 2), tcol(g, 3));
    let tarea = g.constant(Array::new(
        vec![m, 1],
        t.iter().map(|b| (b[2] - b[0]) * (b[3] - b[1])).collect(),
    ));
    let ix0 = g.maximum(px0, tx0);
    let ix1 = g.minimum(px1, tx1);
    let iy0 = g.maximum(py0, ty0);
    let iy1 = g.minimum(py1, ty1);
    let iw = g.sub(ix1, ix0);
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);
    let parea = g.mul(w, h);
    let union = g.add(parea, tarea);
    let union = g.sub(union, inter);
    let iou = g.div(inter, union);
    let ex0 = g.minimum(px0, tx0);
    let ex1 = g.maximum(px1, tx1);
    let ey0 = g.minimum(py0, ty0);
    let ey1 = g.maximum(py1, ty1);
    let ew = g.sub(ex1, ex0);
    let eh = g.sub(ey1, ey0);
    let enclose = g.mul(ew, eh);
    let gap = g.sub(enclose, union);
    let frac = g.div(gap, enclose);
    g.sub(iou, frac)
}

/// Focal classification, L1 box and GIoU losses for one prediction set.
pub fn detection_losses(
    g: &mut Graph<'_>,
    set: PredictionSet,
    gts: &[GtBox],
    assignment: &[(usize, usize)],
    focal_alpha: f64,
    focal_gamma: f64,
) -> Result<DetLosses> {
    let ls = g.shape(set.logits).to_vec();
    let bs = g.shape(set.boxes).to_vec();
    if ls.len() != 2 || bs != [ls[0], 4] {
        return shape_err(format!("logits {ls:?} and boxes {bs:?} do not match"));
    }
    let (q, classes) = (ls[0], ls[1]);
    let mut target = Array::zeros(&[q, classes]);
    for &(qi, gi) in assignment {
        let c = gts[gi].class_id;
        if c >= classes {
            return Err(Error::Contract(format!("class {c} outside {classes} classes")));
        }
        target.data_mut()[qi * classes + c] = 1.0;
    }
    let focal = g.sigmoid_focal(set.logits, target, focal_alpha, focal_gamma);
    let focal = g.sum(focal);
    let cls = g.scale(focal, 1.0 / (gts.len().max(1)) as f64);
    if assignment.is_empty() {
        let bbox = g.constant(Array::scalar(0.0));
        let giou = g.constant(Array::scalar(0.0));
        return Ok(DetLosses { cls, bbox, giou });
    }
    let m = assignment.len();
    let qi: Vec<usize> = assignment.iter().map(|p| p.0).collect();
    let pred = g.gather_rows(set.boxes, &qi);
    let tgt = Array::new(vec![m, 4], assignment.iter().flat_map(|p| gts[p.1].cxcywh()).collect());
    let tv = g.constant(tgt.clone());
    let diff = g.sub(pred, tv);
    let diff = g.abs(diff);
    let bbox = g.mean(diff);
    let gi = giou_graph(g, pred, &tgt);
    let one_minus = g.scale(gi, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let giou = g.mean(one_minus);
    Ok(DetLosses { cls, bbox, giou })
}

/// Matches and sums losses over the final, auxiliary and encoder prediction sets.
pub fn set_losses(g: &mut Graph<'_>, out: &DetectionOutput, gts: &[GtBox], cfg: &DetectorConfig) -> Result<DetLosses> {
    let mut acc: Option<DetLosses> = None;
    for set in out.all_sets() {
        let assignment = hungarian_match(
            g.value(set.logits),
            g.value(set.boxes),
            gts,
            &cfg.match_weights,
            cfg.focal_alpha,
            cfg.focal_gamma,
        )?;
        let l = detection_losses(g, set, gts, &assignment, cfg.focal_alpha, cfg.focal_gamma)?;
        acc = Some(match acc {
            None => l,
            Some(a) => DetLosses {
                cls: g.add(a.cls, l.cls),
                bbox: g.add(a.bbox, l.bbox),
                giou: g.add(a.giou, l.giou),
            },
        });
    }
    Ok(acc.expect("at least one prediction set"))
}

/// Loss terms that feed the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub bbox: Var,
    pub giou: Var,
    pub sa: Var,
    pub sr: Option<Var>,
}

/// Stage 1: detection and saliency terms only. Stage 2 adds the weighted SR term.
pub fn stage_loss(g: &mut Graph<'_>, terms: &LossTerms, w: &LossWeights, stage: u8) -> Result<Var> {
    w.validate()?;
    let mut total = g.scale(terms.cls, w.cls);
    for (v, wt) in [(terms.bbox, w.bbox), (terms.giou, w.giou), (terms.sa, w.sa)] {
        let s = g.scale(v, wt);
        total = g.add(total, s);
    }
    match stage {
        1 => Ok(total),
        2 => {
            let sr = terms
                .sr
                .ok_or_else(|| Error::Contract("stage 2 needs the SR loss".into()))?;
            let s = g.scale(sr, w.sr);
            Ok(g.add(total, s))
        }
        s => config_err(format!("unknown training stage {s}")),
    }
}
