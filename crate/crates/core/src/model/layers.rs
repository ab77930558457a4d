use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Affine map applied to a batch of row vectors: `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `inputs x outputs`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LinearGrad {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DMatrix::zeros(inputs, outputs),
            bias: DVector::zeros(outputs),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            weight: DMatrix::from_fn(inputs, outputs, |_, _| rng.random_range(-limit..limit)),
            bias: DVector::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.weight;
        for (j, mut col) in y.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.bias[j]);
        }
        y
    }

    /// Parameter gradients and the gradient w.r.t. the input.
    pub(crate) fn backward(&self, x: &DMatrix<f64>, grad_out: &DMatrix<f64>) -> (LinearGrad, DMatrix<f64>) {
        let weight = x.tr_mul(grad_out);
        let bias = DVector::from_iterator(grad_out.ncols(), grad_out.column_iter().map(|c| c.sum()));
        let grad_in = grad_out * self.weight.transpose();
        (LinearGrad { weight, bias }, grad_in)
    }

    pub(crate) fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

pub(crate) fn tanh_inplace(m: &mut DMatrix<f64>) {
    m.apply(|v| *v = v.tanh());
}

/// Backprop through `a = tanh(pre)` given the activation `a`.
pub(crate) fn tanh_backward(activation: &DMatrix<f64>, grad: &DMatrix<f64>) -> DMatrix<f64> {
    activation.zip_map(grad, |a, g| g * (1.0 - a * a))
}

/// Numerically stable row-wise softmax.
pub(crate) fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub(crate) struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, lr: f64, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((param, grad), vel) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((p, g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                let g = g + self.weight_decay * *p;
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
    }
}
