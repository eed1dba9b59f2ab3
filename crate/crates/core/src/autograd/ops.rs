use super::kernels::{self, DeformShape};
use super::{Graph, Op, Unary, Var};
use crate::tensor::{gemm, numel, Array};

/// Row index meaning "zero row" in [`Graph::gather_rows`].
pub const PAD_ROW: usize = usize::MAX;

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Graph<'_> {
    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Array::new(va.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::min, Op::Minimum(a, b))
    }

    /// `a + b` with `b` tiled over the leading elements of `a` (`a.len() % b.len() == 0`).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let n = vb.len();
        assert!(n > 0 && va.len() % n == 0, "cannot broadcast {:?} onto {:?}", vb.shape(), va.shape());
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vb.data()[i % n])
            .collect();
        let out = Array::new(va.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::AddBcast(a, b), rg)
    }

    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let n = vb.len();
        assert!(n > 0 && va.len() % n == 0, "cannot broadcast {:?} onto {:?}", vb.shape(), va.shape());
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vb.data()[i % n])
            .collect();
        let out = Array::new(va.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::MulBcast(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64, f64) -> f64 = match kind {
            Unary::Exp => |x, _| x.exp(),
            Unary::Log => |x, _| x.ln(),
            Unary::Sigmoid => |x, _| kernels::sigmoid(x),
            Unary::Relu => |x, _| x.max(0.0),
            Unary::Gelu => |x, _| gelu(x),
            Unary::LeakyRelu(_) => |x, s| if x >= 0.0 { x } else { s * x },
            Unary::Abs => |x, _| x.abs(),
            Unary::Tanh => |x, _| x.tanh(),
            Unary::Square => |x, _| x * x,
            Unary::Sqrt => |x, _| x.sqrt(),
        };
        let slope = if let Unary::LeakyRelu(s) = kind { s } else { 0.0 };
        let out = self.value(a).map(|x| f(x, slope));
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Unary(a, kind), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    /// Batched matrix product. Both operands are `[batch, rows, cols]` (or 2-D
    /// for `batch == 1`); `ta`/`tb` transpose the last two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, ar, ac) = split_batch(&sa);
        let (batch_b, br, bc) = split_batch(&sb);
        assert_eq!(batch, batch_b, "bmm batch mismatch {sa:?} vs {sb:?}");
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, kb, "bmm inner dims {sa:?} x {sb:?} (ta={ta}, tb={tb})");
        let mut out = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    ta,
                    &vb[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.any_grad(&[a, b]);
        self.push(
            Array::new(shape, out),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
            },
            rg,
        )
    }

    /// `[.., K] x [K, N]`, flattening leading axes of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let k = *sa.last().expect("matmul on scalar");
        let rows = numel(&sa) / k.max(1);
        let a2 = if sa.len() == 2 { a } else { self.reshape(a, &[rows, k]) };
        let out = self.bmm(a2, b, false, false);
        if sa.len() == 2 {
            out
        } else {
            let n = self.shape(b)[1];
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            self.reshape(out, &shape)
        }
    }

    /// `x W + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bcast(y, b),
            None => y,
        }
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Reshape(a), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let out = self.value(a).permute(axes);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Permute(a, axes.to_vec()), rg)
    }

    /// Selects rows along the first axis; [`PAD_ROW`] yields a zero row.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Var {
        let v = self.value(src);
        let rows = v.shape()[0];
        let row = v.len() / rows.max(1);
        let mut data = vec![0.0; idx.len() * row];
        for (o, &i) in idx.iter().enumerate() {
            if i != PAD_ROW {
                assert!(i < rows, "gather index {i} out of {rows} rows");
                data[o * row..(o + 1) * row].copy_from_slice(&v.data()[i * row..(i + 1) * row]);
            }
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let rg = self.any_grad(&[src]);
        self.push(
            Array::new(shape, data),
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Copy of `base` with rows `idx` replaced by the rows of `src` (indices unique).
    pub fn scatter_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Var {
        let vb = self.value(base);
        let vs = self.value(src);
        let rows = vb.shape()[0];
        let row = vb.len() / rows.max(1);
        assert_eq!(vs.len(), idx.len() * row, "scatter source has wrong size");
        let mut data = vb.data().to_vec();
        for (o, &i) in idx.iter().enumerate() {
            data[i * row..(i + 1) * row].copy_from_slice(&vs.data()[o * row..(o + 1) * row]);
        }
        let out = Array::new(vb.shape().to_vec(), data);
        let rg = self.any_grad(&[base, src]);
        self.push(
            out,
            Op::Scatter {
                base,
                src,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Concatenates along the last axis; all inputs share the leading shape.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let rows = numel(&lead);
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            assert_eq!(v.len(), rows * w, "concat_cols leading shape mismatch");
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.any_grad(parts);
        self.push(Array::new(shape, data), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &tail[..], "concat_rows trailing shape mismatch");
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = self.any_grad(parts);
        self.push(Array::new(shape, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let v = self.value(src);
        let c = v.cols();
        assert!(start + len <= c, "slice_cols {start}+{len} beyond {c}");
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.any_grad(&[src]);
        self.push(Array::new(shape, data), Op::SliceCols { src, start }, rg)
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Var {
        let v = self.value(src);
        let rows = v.shape()[0];
        assert!(start + len <= rows, "slice_rows {start}+{len} beyond {rows}");
        let row = v.len() / rows.max(1);
        let data = v.data()[start * row..(start + len) * row].to_vec();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let rg = self.any_grad(&[src]);
        self.push(Array::new(shape, data), Op::SliceRows { src, start }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let out = Array::new(v.shape().to_vec(), data);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Normalization over the last axis without affine terms.
    pub fn layer_norm_raw(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut data = v.data().to_vec();
        let mut rstd = Vec::with_capacity(v.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        let out = Array::new(v.shape().to_vec(), data);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::LayerNorm { src: a, rstd }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.any_grad(&[a]);
        self.push(Array::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        let rg = self.any_grad(&[a]);
        self.push(Array::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over all rows of a `[rows, C]` view → `[1, C]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let rows = v.rows();
        let mut out = vec![0.0; c];
        for row in v.data().chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|x| *x /= rows.max(1) as f64);
        let rg = self.any_grad(&[a]);
        self.push(Array::new(vec![1, c], out), Op::MeanRows(a), rg)
    }

    /// `[1, C]` → `[n, C]`.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let v = self.value(a);
        let c = v.len();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let rg = self.any_grad(&[a]);
        self.push(Array::new(vec![n, c], data), Op::BroadcastRows(a), rg)
    }

    /// Elementwise sigmoid focal loss against constant (possibly soft) targets.
    pub fn sigmoid_focal(&mut self, logits: Var, targets: Array, alpha: f64, gamma: f64) -> Var {
        let v = self.value(logits);
        assert_eq!(v.len(), targets.len(), "focal targets size mismatch");
        let data = v
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| kernels::focal_with_grad(x, t, alpha, gamma).0)
            .collect();
        let out = Array::new(v.shape().to_vec(), data);
        let rg = self.any_grad(&[logits]);
        self.push(
            out,
            Op::SigmoidFocal {
                logits,
                targets,
                alpha,
                gamma,
            },
            rg,
        )
    }

    /// Multi-scale deformable sampling: `value [Nv, H, D]`, normalized
    /// `loc [Q, H, L, K, 2]`, `weights [Q, H, L, K]` → `[Q, H*D]`.
    pub fn deform_attn(&mut self, value: Var, loc: Var, weights: Var, shape: DeformShape) -> Var {
        assert_eq!(self.value(value).len(), shape.num_values() * shape.heads * shape.head_dim);
        let nw = shape.queries * shape.heads * shape.num_levels() * shape.points;
        assert_eq!(self.value(weights).len(), nw);
        assert_eq!(self.value(loc).len(), nw * 2);
        let out = kernels::deform_forward(
            &shape,
            self.value(value).data(),
            self.value(loc).data(),
            self.value(weights).data(),
        );
        self.stats.attention_sites += (shape.queries * shape.heads * shape.points) as u64;
        let out = Array::new(vec![shape.queries, shape.heads * shape.head_dim], out);
        let rg = self.any_grad(&[value, loc, weights]);
        self.push(
            out,
            Op::DeformAttn {
                value,
                loc,
                weights,
                shape,
            },
            rg,
        )
    }

    /// `[H, W, C]` → `[H*W, k*k*C]` patches for a stride-1 same-padded convolution.
    pub fn im2col(&mut self, src: Var, k: usize) -> Var {
        let s = self.shape(src).to_vec();
        assert_eq!(s.len(), 3, "im2col expects [H, W, C]");
        let (h, w, c) = (s[0], s[1], s[2]);
        let data = kernels::im2col(self.value(src).data(), h, w, c, k);
        let rg = self.any_grad(&[src]);
        self.push(
            Array::new(vec![h * w, k * k * c], data),
            Op::Im2Col { src, h, w, c, k },
            rg,
        )
    }
}

fn split_batch(s: &[usize]) -> (usize, usize, usize) {
    match s.len() {
        2 => (1, s[0], s[1]),
        3 => (s[0], s[1], s[2]),
        _ => panic!("bmm expects 2-D or 3-D operands, got {s:?}"),
    }
}
