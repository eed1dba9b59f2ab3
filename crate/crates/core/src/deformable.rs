//! Multi-scale deformable attention and the encoder layer built on it.

use std::f64::consts::PI;

use crate::autograd::{DeformShape, Graph, Var};
use crate::nn::{Activation, LayerNorm, Linear, Mlp};
use crate::params::Init;
use crate::saliency::LevelGeometry;
use crate::tensor::Array;

/// Flattened multi-scale token sequence: level 0 first, row-major inside a level.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    pub geoms: Vec<LevelGeometry>,
    pub starts: Vec<usize>,
}

impl TokenLayout {
    pub fn new(geoms: Vec<LevelGeometry>) -> Self {
        let mut starts = Vec::with_capacity(geoms.len());
        let mut acc = 0;
        for g in &geoms {
            starts.push(acc);
            acc += g.len();
        }
        Self { geoms, starts }
    }

    pub fn len(&self) -> usize {
        self.geoms.iter().map(|g| g.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_levels(&self) -> usize {
        self.geoms.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.geoms.iter().map(|g| g.len()).collect()
    }

    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.geoms.iter().map(|g| (g.h, g.w)).collect()
    }

    /// `(level, row, col)` of a flat token index.
    pub fn cell(&self, token: usize) -> (usize, usize, usize) {
        let l = self.starts.iter().rposition(|&s| s <= token).unwrap_or(0);
        let local = token - self.starts[l];
        (l, local / self.geoms[l].w, local % self.geoms[l].w)
    }

    /// Fraction of each level's padded grid covered by the image, `(x, y)`.
    pub fn valid_ratios(&self) -> Vec<(f64, f64)> {
        self.geoms
            .iter()
            .map(|g| (g.image_w / (g.w as f64 * g.stride), g.image_h / (g.h as f64 * g.stride)))
            .collect()
    }

    /// Image-normalized center of every token.
    pub fn reference_points(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.len());
        for g in &self.geoms {
            for i in 0..g.h {
                for j in 0..g.w {
                    let (x, y) = g.cell_center(i, j);
                    out.push([x, y]);
                }
            }
        }
        out
    }
}

/// Sampling-location affine terms: `loc = offset * scale + base`, both `[Q, H*L*K*2]`.
#[derive(Clone, Debug)]
pub struct SamplingFrame {
    pub scale: Array,
    pub base: Array,
}

impl SamplingFrame {
    /// Point references: offsets are measured in cells of each level.
    pub fn points(refs: &[[f64; 2]], layout: &TokenLayout, heads: usize, points: usize) -> Self {
        let ratios = layout.valid_ratios();
        let dims = layout.dims();
        Self::build(refs.len(), heads, dims.len(), points, |q, l, c| {
            let r = if c == 0 { ratios[l].0 } else { ratios[l].1 };
            let n = if c == 0 { dims[l].1 } else { dims[l].0 };
            (1.0 / n as f64, refs[q][c] * r)
        })
    }

    /// Box references `cx, cy, w, h`: offsets scale with half the box size over `K`.
    pub fn boxes(refs: &[[f64; 4]], layout: &TokenLayout, heads: usize, points: usize) -> Self {
        let ratios = layout.valid_ratios();
        let levels = layout.num_levels();
        Self::build(refs.len(), heads, levels, points, |q, l, c| {
            let r = if c == 0 { ratios[l].0 } else { ratios[l].1 };
            (refs[q][2 + c] * r * 0.5 / points as f64, refs[q][c] * r)
        })
    }

    fn build(
        queries: usize,
        heads: usize,
        levels: usize,
        points: usize,
        f: impl Fn(usize, usize, usize) -> (f64, f64),
    ) -> Self {
        let cols = heads * levels * points * 2;
        let mut scale = Vec::with_capacity(queries * cols);
        let mut base = Vec::with_capacity(queries * cols);
        for q in 0..queries {
            for _ in 0..heads {
                for l in 0..levels {
                    for _ in 0..points {
                        for c in 0..2 {
                            let (s, b) = f(q, l, c);
                            scale.push(s);
                            base.push(b);
                        }
                    }
                }
            }
        }
        Self {
            scale: Array::new(vec![queries, cols], scale),
            base: Array::new(vec![queries, cols], base),
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let pick = |a: &Array| {
            let c = a.cols();
            let mut d = Vec::with_capacity(rows.len() * c);
            for &r in rows {
                d.extend_from_slice(a.row(r));
            }
            Array::new(vec![rows.len(), c], d)
        };
        Self {
            scale: pick(&self.scale),
            base: pick(&self.base),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MsDeformAttn {
    pub dim: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub value_proj: Linear,
    pub offsets: Linear,
    pub weights: Linear,
    pub out_proj: Linear,
}

impl MsDeformAttn {
    /// Offsets start on a ring of directions (one per head) growing with the
    /// point index; attention weights start uniform.
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, levels: usize, points: usize) -> Self {
        let mut bias = Vec::with_capacity(heads * levels * points * 2);
        for h in 0..heads {
            let t = 2.0 * PI * h as f64 / heads as f64;
            let (c, s) = (t.cos(), t.sin());
            let m = c.abs().max(s.abs());
            for _ in 0..levels {
                for k in 0..points {
                    bias.push(c / m * (k + 1) as f64);
                    bias.push(s / m * (k + 1) as f64);
                }
            }
        }
        let nb = bias.len();
        Self {
            dim,
            heads,
            levels,
            points,
            value_proj: Linear::xavier(init, &format!("{name}.value_proj"), dim, dim),
            offsets: Linear::zeros_with_bias(init, &format!("{name}.offsets"), dim, Array::new(vec![nb], bias)),
            weights: Linear::zeros_with_bias(
                init,
                &format!("{name}.weights"),
                dim,
                Array::zeros(&[heads * levels * points]),
            ),
            out_proj: Linear::xavier(init, &format!("{name}.out_proj"), dim, dim),
        }
    }

    /// `query: [Q, d]` attends over `value: [Nv, d]` laid out as `level_dims`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        query: Var,
        value: Var,
        level_dims: &[(usize, usize)],
        frame: &SamplingFrame,
    ) -> Var {
        let q = g.shape(query)[0];
        let nv = g.shape(value)[0];
        let (hh, l, k) = (self.heads, self.levels, self.points);
        let dh = self.dim / hh;
        let v = self.value_proj.forward(g, value);
        let v = g.reshape(v, &[nv, hh, dh]);
        let off = self.offsets.forward(g, query);
        let scale = g.constant(frame.scale.clone());
        let base = g.constant(frame.base.clone());
        let loc = g.mul(off, scale);
        let loc = g.add(loc, base);
        let loc = g.reshape(loc, &[q, hh, l, k, 2]);
        let aw = self.weights.forward(g, query);
        let aw = g.reshape(aw, &[q * hh, l * k]);
        let aw = g.softmax(aw);
        let aw = g.reshape(aw, &[q, hh, l, k]);
        let shape = DeformShape::new(level_dims.to_vec(), hh, dh, k, q);
        let out = g.deform_attn(v, loc, aw, shape);
        self.out_proj.forward(g, out)
    }
}

/// `q = LN(q + A(q + pos)); q = LN(q + FFN(q))`.
#[derive(Clone, Debug)]
pub struct DeformableEncoderLayer {
    pub attn: MsDeformAttn,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl DeformableEncoderLayer {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        levels: usize,
        points: usize,
        ffn: usize,
    ) -> Self {
        Self {
            attn: MsDeformAttn::new(init, &format!("{name}.attn"), dim, heads, levels, points),
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim),
            ffn: Mlp::new(init, &format!("{name}.ffn"), dim, ffn, dim, Activation::Relu),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim),
        }
    }

    /// Updates `queries` (with positions `pos`) against the full token set `memory`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        queries: Var,
        pos: Var,
        memory: Var,
        level_dims: &[(usize, usize)],
        frame: &SamplingFrame,
    ) -> Var {
        let qp = g.add(queries, pos);
        let a = self.attn.forward(g, qp, memory, level_dims, frame);
        let x = g.add(queries, a);
        let x = self.norm1.forward(g, x);
        let f = self.ffn.forward(g, x);
        let x = g.add(x, f);
        self.norm2.forward(g, x)
    }
}
