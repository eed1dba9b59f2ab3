use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{max_rel_error, numeric_grad};
use super::{DeformShape, Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Array;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    Array::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Checks d/dx of `sum(op(x...) * r)` for each input against finite differences.
fn check(inputs: Vec<Array>, build: impl Fn(&mut Graph<'_>, &[Var]) -> Var) {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let probe = {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|a| g.constant(a.clone())).collect();
        let out = build(&mut g, &vars);
        rand_array(&mut rng, g.shape(out), -1.0, 1.0)
    };
    let eval = |ins: &[Array]| -> f64 {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = ins.iter().map(|a| g.constant(a.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let mut g = Graph::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|a| g.input(a.clone())).collect();
    let out = build(&mut g, &vars);
    let r = g.constant(probe.clone());
    let prod = g.mul(out, r);
    let loss = g.sum(prod);
    let grads = g.backward(loss);
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.of(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let numeric = numeric_grad(&inputs[k], 1e-6, |x| {
            let mut ins = inputs.clone();
            ins[k] = x.clone();
            eval(&ins)
        });
        let err = max_rel_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-5, "input {k}: rel err {err}\nanalytic {analytic:?}\nnumeric {numeric:?}");
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(5)
}

#[test]
fn elementwise_binary_grads() {
    let mut r = rng();
    let a = rand_array(&mut r, &[3, 4], -2.0, 2.0);
    let b = rand_array(&mut r, &[3, 4], 0.5, 2.0);
    check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.div(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.maximum(v[0], v[1]));
    check(vec![a, b], |g, v| g.minimum(v[0], v[1]));
}

#[test]
fn broadcast_grads() {
    let mut r = rng();
    let a = rand_array(&mut r, &[2, 3, 4], -2.0, 2.0);
    let b = rand_array(&mut r, &[4], -1.0, 1.0);
    let c = rand_array(&mut r, &[3, 4], -1.0, 1.0);
    check(vec![a.clone(), b.clone()], |g, v| g.add_bcast(v[0], v[1]));
    check(vec![a.clone(), b], |g, v| g.mul_bcast(v[0], v[1]));
    check(vec![a, c], |g, v| g.add_bcast(v[0], v[1]));
}

#[test]
fn unary_grads() {
    let mut r = rng();
    let a = rand_array(&mut r, &[10], -2.0, 2.0);
    let pos = rand_array(&mut r, &[10], 0.2, 2.0);
    check(vec![a.clone()], |g, v| g.exp(v[0]));
    check(vec![pos.clone()], |g, v| g.log(v[0]));
    check(vec![pos], |g, v| g.sqrt(v[0]));
    check(vec![a.clone()], |g, v| g.sigmoid(v[0]));
    check(vec![a.clone()], |g, v| g.relu(v[0]));
    check(vec![a.clone()], |g, v| g.gelu(v[0]));
    check(vec![a.clone()], |g, v| g.leaky_relu(v[0], 0.2));
    check(vec![a.clone()], |g, v| g.abs(v[0]));
    check(vec![a.clone()], |g, v| g.tanh(v[0]));
    check(vec![a.clone()], |g, v| g.square(v[0]));
    check(vec![a.clone()], |g, v| g.scale(v[0], -1.7));
    check(vec![a], |g, v| g.add_scalar(v[0], 0.3));
}

#[test]
fn matmul_grads_all_transposes() {
    let mut r = rng();
    for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta {
            rand_array(&mut r, &[2, 4, 3], -1.0, 1.0)
        } else {
            rand_array(&mut r, &[2, 3, 4], -1.0, 1.0)
        };
        let b = if tb {
            rand_array(&mut r, &[2, 5, 4], -1.0, 1.0)
        } else {
            rand_array(&mut r, &[2, 4, 5], -1.0, 1.0)
        };
        check(vec![a, b], move |g, v| g.bmm(v[0], v[1], ta, tb));
    }
    let x = rand_array(&mut r, &[2, 3, 4], -1.0, 1.0);
    let w = rand_array(&mut r, &[4, 2], -1.0, 1.0);
    let b = rand_array(&mut r, &[2], -1.0, 1.0);
    check(vec![x, w, b], |g, v| g.linear(v[0], v[1], Some(v[2])));
}

#[test]
fn layout_grads() {
    let mut r = rng();
    let a = rand_array(&mut r, &[3, 4, 2], -1.0, 1.0);
    check(vec![a.clone()], |g, v| g.permute(v[0], &[2, 0, 1]));
    check(vec![a.clone()], |g, v| g.reshape(v[0], &[12, 2]));
    check(vec![a.clone()], |g, v| g.gather_rows(v[0], &[2, 0, 2, super::PAD_ROW, 1]));
    check(vec![a.clone()], |g, v| g.slice_cols(v[0], 1, 1));
    check(vec![a.clone()], |g, v| g.slice_rows(v[0], 1, 2));
    let b = rand_array(&mut r, &[3, 4, 3], -1.0, 1.0);
    check(vec![a.clone(), b], |g, v| g.concat_cols(&[v[0], v[1]]));
    let c = rand_array(&mut r, &[2, 4, 2], -1.0, 1.0);
    check(vec![a.clone(), c.clone()], |g, v| g.concat_rows(&[v[0], v[1]]));
    check(vec![a, c], |g, v| g.scatter_rows(v[0], v[1], &[2, 0]));
}

#[test]
fn reduction_and_norm_grads() {
    let mut r = rng();
    let a = rand_array(&mut r, &[4, 5], -2.0, 2.0);
    check(vec![a.clone()], |g, v| g.softmax(v[0]));
    check(vec![a.clone()], |g, v| g.layer_norm_raw(v[0], 1e-5));
    check(vec![a.clone()], |g, v| g.sum(v[0]));
    check(vec![a.clone()], |g, v| g.mean(v[0]));
    check(vec![a.clone()], |g, v| g.mean_rows(v[0]));
    let row = rand_array(&mut r, &[1, 5], -1.0, 1.0);
    check(vec![row], |g, v| g.broadcast_rows(v[0], 3));
    let t = Array::from_fn(&[4, 5], |i| [0.0, 1.0, 0.3, 0.8][i % 4]);
    check(vec![a], move |g, v| g.sigmoid_focal(v[0], t.clone(), 0.25, 2.0));
}

#[test]
fn im2col_grad() {
    let mut r = rng();
    let a = rand_array(&mut r, &[3, 4, 2], -1.0, 1.0);
    check(vec![a], |g, v| g.im2col(v[0], 3));
}

#[test]
fn deform_attn_grads() {
    let mut r = rng();
    let shape = DeformShape::new(vec![(3, 4), (2, 2)], 2, 3, 2, 3);
    let nv = shape.num_values();
    let value = rand_array(&mut r, &[nv, 2, 3], -1.0, 1.0);
    // keep sample points away from integer pixel boundaries where bilinear
    // interpolation is not differentiable
    let loc = rand_array(&mut r, &[3, 2, 2, 2, 2], -0.1, 1.1);
    let weights = rand_array(&mut r, &[3, 2, 2, 2], 0.0, 1.0);
    check(vec![value, loc, weights], move |g, v| g.deform_attn(v[0], v[1], v[2], shape.clone()));
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = ParamStore::new();
    let p = store.add("p", crate::params::ParamGroup::Sr, Array::full(&[2], 1.0));
    store.set_frozen(crate::params::ParamGroup::Sr, true);
    let mut g = Graph::new(&store);
    let v = g.param(p);
    let x = g.input(Array::full(&[2], 3.0));
    let y = g.mul(v, x);
    let l = g.sum(y);
    let grads = g.backward(l);
    assert!(grads.param(p).is_none());
    assert_eq!(grads.of(x).unwrap(), &[1.0, 1.0]);
}
