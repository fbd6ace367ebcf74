use serde::{Deserialize, Serialize};

use super::graph::{Binding, Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    /// x·sigmoid(x)
    Silu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Silu => {
                let s = g.sigmoid(x);
                g.mul(x, s)
            }
        }
    }
}

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut RngStream) -> Result<Self> {
        let w = store.register_uniform(&format!("{name}.w"), &[input, output], input, rng)?;
        let b = store.register(&format!("{name}.b"), Tensor::zeros(&[1, output]))?;
        Ok(Self { w, b, input, output })
    }

    /// Same as [`Linear::new`] with all weights zero.
    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let w = store.register(&format!("{name}.w"), Tensor::zeros(&[input, output]))?;
        let b = store.register(&format!("{name}.b"), Tensor::zeros(&[1, output]))?;
        Ok(Self { w, b, input, output })
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, p: Binding<'a>, x: NodeId) -> NodeId {
        let w = g.load(p, self.w);
        let b = g.load(p, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// Plain-value forward pass for a single row.
    pub fn eval_row(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.value(self.w).data();
        let mut y = store.value(self.b).data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (yo, wv) in y.iter_mut().zip(&w[i * self.output..(i + 1) * self.output]) {
                *yo += xi * wv;
            }
        }
        y
    }
}

/// Stack of linear layers with an activation between them (not after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `layers` counts linear maps; `layers == 1` is a single affine map.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        layers: usize,
        activation: Activation,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let layers = layers.max(1);
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let i = if l == 0 { input } else { hidden };
            let o = if l + 1 == layers { output } else { hidden };
            out.push(Linear::new(store, &format!("{name}.{l}"), i, o, rng)?);
        }
        Ok(Self {
            layers: out,
            activation,
        })
    }

    /// Zeroes the final layer so the initial output is exactly zero.
    pub fn zero_last(&self, store: &mut ParamStore) {
        if let Some(last) = self.layers.last() {
            store.value_mut(last.w).data_mut().fill(0.0);
            store.value_mut(last.b).data_mut().fill(0.0);
        }
    }

    pub fn input(&self) -> usize {
        self.layers[0].input
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, p: Binding<'a>, x: NodeId) -> NodeId {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h);
            if i + 1 < n {
                h = self.activation.apply(g, h);
            }
        }
        h
    }

    /// Plain-value forward pass for a single row, without recording a tape.
    pub fn eval_row(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.eval_row(store, &h);
            if i + 1 < n {
                for v in &mut h {
                    *v = match self.activation {
                        Activation::Relu => v.max(0.0),
                        Activation::Tanh => v.tanh(),
                        Activation::Silu => *v * super::graph::sigmoid(*v),
                    };
                }
            }
        }
        h
    }
}
