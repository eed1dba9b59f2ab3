use super::kernels;
use super::ops::{gelu_grad, PAD_ROW};
use super::{Gradients, Graph, Op, Unary, Var};
use crate::tensor::{gemm, inverse_axes};

struct Acc {
    grads: Vec<Option<Vec<f64>>>,
}

impl Acc {
    /// Mutable gradient buffer for `v`, zero-initialized on first use.
    fn buf(&mut self, g: &Graph<'_>, v: Var) -> Option<&mut Vec<f64>> {
        if !g.nodes[v.0].requires_grad {
            return None;
        }
        let n = g.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn add(&mut self, g: &Graph<'_>, v: Var, src: impl IntoIterator<Item = f64>) {
        if let Some(buf) = self.buf(g, v) {
            for (b, s) in buf.iter_mut().zip(src) {
                *b += s;
            }
        }
    }
}

pub(super) fn run(g: &Graph<'_>, loss: Var) -> Gradients {
    let n = g.nodes.len();
    let mut acc = Acc { grads: vec![None; n] };
    assert_eq!(g.value(loss).len(), 1, "backward from non-scalar {:?}", g.shape(loss));
    if g.nodes[loss.0].requires_grad {
        acc.grads[loss.0] = Some(vec![1.0]);
    }
    for i in (0..=loss.0).rev() {
        let node = &g.nodes[i];
        if !node.requires_grad {
            continue;
        }
        let Some(gout) = acc.grads[i].take() else { continue };
        step(g, &mut acc, i, &gout);
        acc.grads[i] = Some(gout);
    }
    let params = g.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
    Gradients {
        grads: acc.grads,
        params,
    }
}

fn step(g: &Graph<'_>, acc: &mut Acc, i: usize, gout: &[f64]) {
    let node = &g.nodes[i];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc.add(g, *a, gout.iter().copied());
            acc.add(g, *b, gout.iter().copied());
        }
        Op::Sub(a, b) => {
            acc.add(g, *a, gout.iter().copied());
            acc.add(g, *b, gout.iter().map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (g.value(*a).data(), g.value(*b).data());
            acc.add(g, *a, gout.iter().zip(vb).map(|(g, y)| g * y));
            acc.add(g, *b, gout.iter().zip(va).map(|(g, x)| g * x));
        }
        Op::Div(a, b) => {
            let (va, vb) = (g.value(*a).data(), g.value(*b).data());
            acc.add(g, *a, gout.iter().zip(vb).map(|(g, y)| g / y));
            acc.add(
                g,
                *b,
                gout.iter().zip(va.iter().zip(vb)).map(|(g, (x, y))| -g * x / (y * y)),
            );
        }
        Op::Maximum(a, b) | Op::Minimum(a, b) => {
            let is_max = matches!(node.op, Op::Maximum(..));
            let (va, vb) = (g.value(*a).data(), g.value(*b).data());
            // ties route to the first operand
            let pick_a: Vec<bool> = va
                .iter()
                .zip(vb)
                .map(|(x, y)| if is_max { x >= y } else { x <= y })
                .collect();
            acc.add(g, *a, gout.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }));
            acc.add(g, *b, gout.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }));
        }
        Op::AddBcast(a, b) => {
            acc.add(g, *a, gout.iter().copied());
            if let Some(buf) = acc.buf(g, *b) {
                let n = buf.len();
                for (k, gv) in gout.iter().enumerate() {
                    buf[k % n] += gv;
                }
            }
        }
        Op::MulBcast(a, b) => {
            let (va, vb) = (g.value(*a).data(), g.value(*b).data());
            let n = vb.len();
            acc.add(g, *a, gout.iter().enumerate().map(|(k, gv)| gv * vb[k % n]));
            if let Some(buf) = acc.buf(g, *b) {
                for (k, gv) in gout.iter().enumerate() {
                    buf[k % n] += gv * va[k];
                }
            }
        }
        Op::Scale(a, s) => acc.add(g, *a, gout.iter().map(|x| x * s)),
        Op::AddScalar(a) => acc.add(g, *a, gout.iter().copied()),
        Op::Unary(a, kind) => {
            let x = g.value(*a).data();
            let y = out.data();
            let d: Vec<f64> = match kind {
                Unary::Exp => gout.iter().zip(y).map(|(g, y)| g * y).collect(),
                Unary::Log => gout.iter().zip(x).map(|(g, x)| g / x).collect(),
                Unary::Sigmoid => gout.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                Unary::Relu => gout
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
                Unary::Gelu => gout.iter().zip(x).map(|(g, x)| g * gelu_grad(*x)).collect(),
                Unary::LeakyRelu(s) => gout
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x >= 0.0 { *g } else { g * s })
                    .collect(),
                Unary::Abs => gout
                    .iter()
                    .zip(x)
                    .map(|(g, x)| g * if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 })
                    .collect(),
                Unary::Tanh => gout.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                Unary::Square => gout.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect(),
                Unary::Sqrt => gout.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect(),
            };
            acc.add(g, *a, d);
        }
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            ta,
            tb,
        } => {
            let (batch, m, k, n, ta, tb) = (*batch, *m, *k, *n, *ta, *tb);
            let va = g.value(*a).data();
            let vb = g.value(*b).data();
            if let Some(buf) = acc.buf(g, *a) {
                for i in 0..batch {
                    let gc = &gout[i * m * n..(i + 1) * m * n];
                    let bb = &vb[i * k * n..(i + 1) * k * n];
                    let da = &mut buf[i * m * k..(i + 1) * m * k];
                    match (ta, tb) {
                        (false, false) => gemm(m, n, k, gc, false, bb, true, da, 1.0),
                        (false, true) => gemm(m, n, k, gc, false, bb, false, da, 1.0),
                        (true, false) => gemm(k, n, m, bb, false, gc, true, da, 1.0),
                        (true, true) => gemm(k, n, m, bb, true, gc, true, da, 1.0),
                    }
                }
            }
            if let Some(buf) = acc.buf(g, *b) {
                for i in 0..batch {
                    let gc = &gout[i * m * n..(i + 1) * m * n];
                    let aa = &va[i * m * k..(i + 1) * m * k];
                    let db = &mut buf[i * k * n..(i + 1) * k * n];
                    match (ta, tb) {
                        (false, false) => gemm(k, m, n, aa, true, gc, false, db, 1.0),
                        (true, false) => gemm(k, m, n, aa, false, gc, false, db, 1.0),
                        (false, true) => gemm(n, m, k, gc, true, aa, false, db, 1.0),
                        (true, true) => gemm(n, m, k, gc, true, aa, true, db, 1.0),
                    }
                }
            }
        }
        Op::Reshape(a) => acc.add(g, *a, gout.iter().copied()),
        Op::Permute(a, axes) => {
            let gp = crate::tensor::Array::new(out.shape().to_vec(), gout.to_vec()).permute(&inverse_axes(axes));
            acc.add(g, *a, gp.into_data());
        }
        Op::Gather { src, idx } => {
            let rows = g.shape(*src)[0];
            let row = g.value(*src).len() / rows.max(1);
            if let Some(buf) = acc.buf(g, *src) {
                for (o, &r) in idx.iter().enumerate() {
                    if r == PAD_ROW {
                        continue;
                    }
                    for (d, s) in buf[r * row..(r + 1) * row].iter_mut().zip(&gout[o * row..(o + 1) * row]) {
                        *d += s;
                    }
                }
            }
        }
        Op::Scatter { base, src, idx } => {
            let rows = g.shape(*base)[0];
            let row = g.value(*base).len() / rows.max(1);
            if let Some(buf) = acc.buf(g, *base) {
                let mut mask = vec![true; rows];
                for &r in idx {
                    mask[r] = false;
                }
                for (r, keep) in mask.iter().enumerate() {
                    if *keep {
                        for (d, s) in buf[r * row..(r + 1) * row].iter_mut().zip(&gout[r * row..(r + 1) * row]) {
                            *d += s;
                        }
                    }
                }
            }
            if let Some(buf) = acc.buf(g, *src) {
                for (o, &r) in idx.iter().enumerate() {
                    for (d, s) in buf[o * row..(o + 1) * row].iter_mut().zip(&gout[r * row..(r + 1) * row]) {
                        *d += s;
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let rows = out.rows();
            let mut off = 0;
            for &p in parts {
                let w = g.value(p).cols();
                if let Some(buf) = acc.buf(g, p) {
                    for r in 0..rows {
                        for (d, s) in buf[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(&gout[r * total + off..r * total + off + w])
                        {
                            *d += s;
                        }
                    }
                }
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = g.value(p).len();
                acc.add(g, p, gout[off..off + len].iter().copied());
                off += len;
            }
        }
        Op::SliceCols { src, start } => {
            let c = g.value(*src).cols();
            let w = out.cols();
            let rows = out.rows();
            if let Some(buf) = acc.buf(g, *src) {
                for r in 0..rows {
                    for (d, s) in buf[r * c + start..r * c + start + w]
                        .iter_mut()
                        .zip(&gout[r * w..(r + 1) * w])
                    {
                        *d += s;
                    }
                }
            }
        }
        Op::SliceRows { src, start } => {
            let rows = g.shape(*src)[0];
            let row = g.value(*src).len() / rows.max(1);
            if let Some(buf) = acc.buf(g, *src) {
                let off = start * row;
                for (d, s) in buf[off..off + gout.len()].iter_mut().zip(gout) {
                    *d += s;
                }
            }
        }
        Op::Softmax(a) => {
            let c = out.cols();
            let y = out.data();
            let mut d = vec![0.0; y.len()];
            for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(gout.chunks(c)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = yv * (gv - dot);
                }
            }
            acc.add(g, *a, d);
        }
        Op::LayerNorm { src, rstd } => {
            let c = out.cols();
            let xhat = out.data();
            let mut d = vec![0.0; xhat.len()];
            for (r, ((dr, xr), gr)) in d.chunks_mut(c).zip(xhat.chunks(c)).zip(gout.chunks(c)).enumerate() {
                let mg = gr.iter().sum::<f64>() / c as f64;
                let mgx = gr.iter().zip(xr).map(|(g, x)| g * x).sum::<f64>() / c as f64;
                for ((dv, xv), gv) in dr.iter_mut().zip(xr).zip(gr) {
                    *dv = rstd[r] * (gv - mg - xv * mgx);
                }
            }
            acc.add(g, *src, d);
        }
        Op::Sum(a) => {
            let gv = gout[0];
            let n = g.value(*a).len();
            acc.add(g, *a, std::iter::repeat_n(gv, n));
        }
        Op::Mean(a) => {
            let n = g.value(*a).len();
            let gv = gout[0] / n.max(1) as f64;
            acc.add(g, *a, std::iter::repeat_n(gv, n));
        }
        Op::MeanRows(a) => {
            let v = g.value(*a);
            let rows = v.rows().max(1) as f64;
            let c = v.cols();
            let n = v.len();
            acc.add(g, *a, (0..n).map(|k| gout[k % c] / rows));
        }
        Op::BroadcastRows(a) => {
            if let Some(buf) = acc.buf(g, *a) {
                let c = buf.len();
                for (k, gv) in gout.iter().enumerate() {
                    buf[k % c] += gv;
                }
            }
        }
        Op::SigmoidFocal {
            logits,
            targets,
            alpha,
            gamma,
        } => {
            let x = g.value(*logits).data();
            let d = x
                .iter()
                .zip(targets.data())
                .zip(gout)
                .map(|((&x, &t), gv)| gv * kernels::focal_with_grad(x, t, *alpha, *gamma).1);
            acc.add(g, *logits, d);
        }
        Op::DeformAttn {
            value,
            loc,
            weights,
            shape,
        } => {
            let vv = g.value(*value).data();
            let vl = g.value(*loc).data();
            let vw = g.value(*weights).data();
            let mut gv = g.nodes[value.0].requires_grad.then(|| vec![0.0; vv.len()]);
            let mut gl = g.nodes[loc.0].requires_grad.then(|| vec![0.0; vl.len()]);
            let mut gw = g.nodes[weights.0].requires_grad.then(|| vec![0.0; vw.len()]);
            kernels::deform_backward(
                shape,
                vv,
                vl,
                vw,
                gout,
                gv.as_deref_mut(),
                gl.as_deref_mut(),
                gw.as_deref_mut(),
            );
            if let Some(d) = gv {
                acc.add(g, *value, d);
            }
            if let Some(d) = gl {
                acc.add(g, *loc, d);
            }
            if let Some(d) = gw {
                acc.add(g, *weights, d);
            }
        }
        Op::Im2Col { src, h, w, c, k } => {
            if let Some(buf) = acc.buf(g, *src) {
                kernels::col2im_acc(gout, *h, *w, *c, *k, buf);
            }
        }
    }
}
