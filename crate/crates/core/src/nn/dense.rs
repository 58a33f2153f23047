//! Fully connected layer `y = activation(W x + b)` with analytic backward.

use rand::Rng;

use super::activation::Activation;
use super::params::{join, Params};
use super::tensor::{axpy, dot, Tensor2};
use crate::error::{dim_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// Shape (out, in).
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Gradients of a single dense layer for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub grad_x: Vec<f64>,
    pub grad_w: Tensor2,
    pub grad_b: Vec<f64>,
}

impl DenseLayer {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weight: Tensor2::from_vec(out_dim, in_dim, data).expect("finite init"),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn from_parts(weight: Tensor2, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(dim_err(format!(
                "bias length {} != weight rows {}",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor2::zeros(self.out_dim(), self.in_dim()),
            bias: vec![0.0; self.out_dim()],
            activation: self.activation,
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(dim_err(format!(
                "dense input length {} != in_dim {}",
                x.len(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    pub fn pre_activation(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok((0..self.out_dim())
            .map(|j| self.bias[j] + dot(self.weight.row(j), x))
            .collect())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_with_pre(x)?.1)
    }

    /// Returns `(pre_activation, output)`.
    pub fn forward_with_pre(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let pre = self.pre_activation(x)?;
        let out = pre.iter().map(|&z| self.activation.apply(z)).collect();
        Ok((pre, out))
    }

    /// Analytic gradients for a single input, recomputing the forward pass.
    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<DenseGrads> {
        let (pre, out) = self.forward_with_pre(x)?;
        let mut acc = self.zeros_like();
        let grad_x = self.backward_accumulate(x, &pre, &out, grad_out, &mut acc)?;
        Ok(DenseGrads {
            grad_x,
            grad_w: acc.weight,
            grad_b: acc.bias,
        })
    }

    /// Adds this input's parameter gradients into `acc` and returns dL/dx.
    pub fn backward_accumulate(
        &self,
        x: &[f64],
        pre: &[f64],
        out: &[f64],
        grad_out: &[f64],
        acc: &mut DenseLayer,
    ) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if grad_out.len() != self.out_dim() || pre.len() != self.out_dim() {
            return Err(dim_err(format!(
                "dense grad_out length {} != out_dim {}",
                grad_out.len(),
                self.out_dim()
            )));
        }
        let mut grad_x = vec![0.0; self.in_dim()];
        for j in 0..self.out_dim() {
            let delta = grad_out[j] * self.activation.derivative(pre[j], out[j]);
            if delta == 0.0 {
                continue;
            }
            acc.bias[j] += delta;
            axpy(delta, x, acc.weight.row_mut(j));
            axpy(delta, self.weight.row(j), &mut grad_x);
        }
        Ok(grad_x)
    }

    /// Applies the layer to every row of `x` (shape n × in), returning
    /// `(pre, out)` of shape n × out. Each output accumulates the bias first,
    /// then input terms in index order, so results do not depend on which
    /// other rows are in the batch.
    pub fn forward_rows(&self, x: &Tensor2) -> Result<(Tensor2, Tensor2)> {
        if x.cols() != self.in_dim() {
            return Err(dim_err(format!(
                "dense batch width {} != in_dim {}",
                x.cols(),
                self.in_dim()
            )));
        }
        let wt = self.weight.transpose();
        let n = x.rows();
        let out_dim = self.out_dim();
        let mut pre = Tensor2::zeros(n, out_dim);
        for i in 0..n {
            let xi = x.row(i);
            let row = pre.row_mut(i);
            row.copy_from_slice(&self.bias);
            for (k, &xk) in xi.iter().enumerate() {
                axpy(xk, wt.row(k), row);
            }
        }
        let mut out = pre.clone();
        for v in out.data_mut() {
            *v = self.activation.apply(*v);
        }
        Ok((pre, out))
    }
}

impl Params for DenseLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "weight"), self.weight.data());
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), self.weight.data_mut());
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Forward through a stack of layers, keeping every layer's input, pre-activation and output.
#[derive(Debug, Clone)]
pub struct StackTrace {
    pub inputs: Vec<Vec<f64>>,
    pub pres: Vec<Vec<f64>>,
    pub outs: Vec<Vec<f64>>,
}

impl StackTrace {
    pub fn output(&self) -> &[f64] {
        self.outs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn stack_forward(layers: &[DenseLayer], x: &[f64]) -> Result<StackTrace> {
    let mut trace = StackTrace {
        inputs: Vec::with_capacity(layers.len()),
        pres: Vec::with_capacity(layers.len()),
        outs: Vec::with_capacity(layers.len()),
    };
    let mut cur = x.to_vec();
    for layer in layers {
        let (pre, out) = layer.forward_with_pre(&cur)?;
        trace.inputs.push(cur);
        trace.pres.push(pre);
        cur = out.clone();
        trace.outs.push(out);
    }
    if layers.is_empty() {
        trace.outs.push(cur);
    }
    Ok(trace)
}

/// Backward through a stack, accumulating into `acc` (same shapes); returns dL/dx.
pub fn stack_backward(
    layers: &[DenseLayer],
    trace: &StackTrace,
    grad_out: &[f64],
    acc: &mut [DenseLayer],
) -> Result<Vec<f64>> {
    let mut g = grad_out.to_vec();
    for (i, layer) in layers.iter().enumerate().rev() {
        g = layer.backward_accumulate(
            &trace.inputs[i],
            &trace.pres[i],
            &trace.outs[i],
            &g,
            &mut acc[i],
        )?;
    }
    Ok(g)
}
