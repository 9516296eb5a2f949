use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SparseOp, Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
        }
    }
}

/// Affine layer `x W + b` with `U(-1/√fan_in, 1/√fan_in)` initialisation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw = |rows, cols| {
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Matrix::from_vec(rows, cols, data)
        };
        let w = draw(input, output);
        let b = draw(1, output);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w);
        tape.add_bias(xw, b)
    }

    /// Graph convolution: `Â (x W) + b`.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        propagation: &Rc<SparseOp>,
    ) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w);
        let ax = tape.propagate(xw, propagation.clone());
        tape.add_bias(ax, b)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.input, self.output)
    }
}

/// Two dense layers with an activation in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2 {
    pub first: Dense,
    pub second: Dense,
    pub activation: Activation,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: (usize, usize, usize),
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            first: Dense::new(store, &format!("{name}.0"), widths.0, widths.1, rng),
            second: Dense::new(store, &format!("{name}.1"), widths.1, widths.2, rng),
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.first.forward(tape, store, x);
        let h = self.activation.apply(tape, h);
        self.second.forward(tape, store, h)
    }

    pub fn input_width(&self) -> usize {
        self.first.input
    }

    pub fn output_width(&self) -> usize {
        self.second.output
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        vec![self.first.shape(), self.second.shape()]
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.first.weight,
            self.first.bias,
            self.second.weight,
            self.second.bias,
        ]
    }
}

/// Stack of graph convolutions; the activation follows every layer but the
/// last.
#[derive(Clone, Debug, PartialEq)]
pub struct Gcn {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Gcn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        propagation: &Rc<SparseOp>,
    ) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_graph(tape, store, h, propagation);
            if i + 1 < self.layers.len() {
                h = self.activation.apply(tape, h);
            }
        }
        h
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(Dense::shape).collect()
    }
}
