//! Parameterized building blocks shared by the encoder, decoders and heads.

use crate::autograd::{Graph, Var};
use crate::params::{Init, ParamId};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Truncated-normal (σ = 0.02) weight, zero bias.
    pub fn new(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = init.trunc_normal(&format!("{name}.weight"), &[in_dim, out_dim], 0.02);
        let bias = bias.then(|| init.constant(&format!("{name}.bias"), &[out_dim], 0.0));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Glorot-uniform weight, zero bias.
    pub fn xavier(init: &mut Init<'_>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = init.xavier(&format!("{name}.weight"), in_dim, out_dim);
        let bias = Some(init.constant(&format!("{name}.bias"), &[out_dim], 0.0));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Zero weight with a caller-provided bias.
    pub fn zeros_with_bias(init: &mut Init<'_>, name: &str, in_dim: usize, bias: crate::tensor::Array) -> Self {
        let out_dim = bias.len();
        let weight = init.constant(&format!("{name}.weight"), &[in_dim, out_dim], 0.0);
        let bias = Some(init.from_array(&format!("{name}.bias"), bias));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        Self {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0),
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.layer_norm_raw(x, LN_EPS);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_bcast(n, gamma);
        g.add_bcast(y, beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

/// Two-layer perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, hidden: usize, out: usize, act: Activation) -> Self {
        Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, out, true),
            act,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = match self.act {
            Activation::Gelu => g.gelu(h),
            Activation::Relu => g.relu(h),
        };
        self.fc2.forward(g, h)
    }
}

/// Stack of linear layers with ReLU between them (box and point heads).
#[derive(Clone, Debug)]
pub struct DeepMlp {
    pub layers: Vec<Linear>,
}

impl DeepMlp {
    pub fn new(init: &mut Init<'_>, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::xavier(init, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h);
            if i < last {
                h = g.relu(h);
            }
        }
        h
    }
}

/// Same-padded stride-1 convolution on `[H, W, C]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: usize,
    pub proj: Linear,
}

impl Conv2d {
    /// Uniform `±1/sqrt(fan_in)` weight and bias; the transformer σ = 0.02
    /// init shrinks the signal too much through stacked convolutions.
    pub fn new(init: &mut Init<'_>, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self::scaled(init, name, in_ch, out_ch, kernel, 1.0)
    }

    /// As [`Conv2d::new`] with the init range multiplied by `scale`.
    pub fn scaled(init: &mut Init<'_>, name: &str, in_ch: usize, out_ch: usize, kernel: usize, scale: f64) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        let fan_in = kernel * kernel * in_ch;
        let bound = scale / (fan_in as f64).sqrt();
        let weight = init.uniform(&format!("{name}.weight"), &[fan_in, out_ch], bound);
        let bias = Some(init.uniform(&format!("{name}.bias"), &[out_ch], bound));
        Self {
            kernel,
            proj: Linear {
                weight,
                bias,
                in_dim: fan_in,
                out_dim: out_ch,
            },
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let cols = g.im2col(x, self.kernel);
        let y = self.proj.forward(g, cols);
        g.reshape(y, &[s[0], s[1], self.proj.out_dim])
    }
}
