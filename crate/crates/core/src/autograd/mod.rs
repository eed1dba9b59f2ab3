//! Reverse-mode automatic differentiation over [`Array`] values.
//!
//! A [`Graph`] is built eagerly: every op computes its value immediately and
//! records how to propagate gradients back to its inputs. Parameters enter the
//! graph through [`Graph::param`], which consults the store's freeze flags so
//! frozen groups become constants and never receive a gradient.
//!
//! Shape mismatches inside ops are programming errors and panic; the model
//! modules validate user-facing shapes before building graph nodes.

mod backward;
pub mod gradcheck;
pub(crate) mod kernels;
mod ops;
#[cfg(test)]
mod tests;

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Array;

pub use kernels::DeformShape;
pub use ops::PAD_ROW;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Unary {
    Exp,
    Log,
    Sigmoid,
    Relu,
    Gelu,
    LeakyRelu(f64),
    Abs,
    Tanh,
    Square,
    Sqrt,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Maximum(Var, Var),
    Minimum(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    Scatter {
        base: Var,
        src: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
    },
    SliceRows {
        src: Var,
        start: usize,
    },
    Softmax(Var),
    LayerNorm {
        src: Var,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    BroadcastRows(Var),
    SigmoidFocal {
        logits: Var,
        targets: Array,
        alpha: f64,
        gamma: f64,
    },
    DeformAttn {
        value: Var,
        loc: Var,
        weights: Var,
        shape: DeformShape,
    },
    Im2Col {
        src: Var,
        h: usize,
        w: usize,
        c: usize,
        k: usize,
    },
}

pub(crate) struct Node {
    pub(crate) value: Array,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Counters gathered while building a graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GraphStats {
    /// Deformable-attention sampling sites evaluated: queries × heads × points.
    pub attention_sites: u64,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
    pub stats: GraphStats,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
            stats: GraphStats::default(),
        }
    }

    /// A graph that records no gradient information (inference).
    pub fn inference(store: &'p ParamStore) -> Self {
        let mut g = Self::new(store);
        g.grad_enabled = false;
        g
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(id)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf input that accumulates a gradient (used for input-sensitivity checks).
    pub fn input(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a parameter (once per graph). Frozen parameters enter as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let trainable = self.store.is_trainable(id);
        let value = self.store.value(id).clone();
        let v = if trainable {
            self.push(value, Op::Leaf, true)
        } else {
            self.push(value, Op::Leaf, false)
        };
        self.param_vars.insert(id, v);
        v
    }

    /// Copy of a value cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Runs reverse-mode accumulation from a scalar.
    pub fn backward(&self, loss: Var) -> Gradients {
        backward::run(self, loss)
    }
}

/// Gradients for every node of a graph after [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of every trainable parameter that took part in the graph.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<(ParamId, &[f64])> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.of(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|&(_, v)| self.of(v))
    }
}
