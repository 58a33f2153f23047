//! Layer normalisation over a single feature vector.
//!
//! Population variance, epsilon inside the square root:
//! `y = gain * (x - mean) / sqrt(var + eps) + shift`.

use super::params::{join, Params};
use crate::error::{dim_err, Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormGrads {
    pub grad_x: Vec<f64>,
    pub grad_gain: Vec<f64>,
    pub grad_shift: Vec<f64>,
}

impl LayerNorm {
    /// Unit gain, zero shift.
    pub fn new(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            shift: vec![0.0; dim],
            eps: DEFAULT_EPS,
        }
    }

    pub fn from_parts(gain: Vec<f64>, shift: Vec<f64>, eps: f64) -> Result<Self> {
        if gain.len() != shift.len() {
            return Err(dim_err("layernorm gain/shift length mismatch"));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layernorm eps must be > 0, got {eps}")));
        }
        Ok(Self { gain, shift, eps })
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gain: vec![0.0; self.dim()],
            shift: vec![0.0; self.dim()],
            eps: self.eps,
        }
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() < 2 {
            return Err(dim_err(format!(
                "layernorm needs at least 2 features, got {}",
                x.len()
            )));
        }
        if x.len() != self.dim() {
            return Err(dim_err(format!(
                "layernorm input length {} != {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Returns (normalised x, 1/sqrt(var + eps)).
    fn normalize(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + self.eps).sqrt();
        (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let (xhat, _) = self.normalize(x);
        Ok(xhat
            .iter()
            .zip(self.gain.iter().zip(&self.shift))
            .map(|(h, (g, s))| g * h + s)
            .collect())
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<LayerNormGrads> {
        let mut acc = self.zeros_like();
        let grad_x = self.backward_accumulate(x, grad_out, &mut acc)?;
        Ok(LayerNormGrads {
            grad_x,
            grad_gain: acc.gain,
            grad_shift: acc.shift,
        })
    }

    /// Adds gain/shift gradients into `acc` and returns dL/dx.
    pub fn backward_accumulate(
        &self,
        x: &[f64],
        grad_out: &[f64],
        acc: &mut LayerNorm,
    ) -> Result<Vec<f64>> {
        self.check(x)?;
        if grad_out.len() != x.len() {
            return Err(dim_err("layernorm grad_out length mismatch"));
        }
        let n = x.len() as f64;
        let (xhat, inv_std) = self.normalize(x);
        let mut dxhat = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            acc.gain[i] += grad_out[i] * xhat[i];
            acc.shift[i] += grad_out[i];
            dxhat.push(grad_out[i] * self.gain[i]);
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / n;
        Ok(dxhat
            .iter()
            .zip(&xhat)
            .map(|(d, h)| inv_std * (d - mean_d - h * mean_dx))
            .collect())
    }
}

impl Params for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "shift"), &self.shift);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "shift"), &mut self.shift);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_maps_to_zero() {
        let ln = LayerNorm::new(4);
        assert_eq!(ln.forward(&[5.0; 4]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn unit_variance_pair() {
        let ln = LayerNorm::from_parts(vec![1.0; 2], vec![0.0; 2], 1e-300).unwrap();
        let y = ln.forward(&[1.0, -1.0]).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gain_returns_shift() {
        let ln = LayerNorm::from_parts(vec![0.0; 3], vec![0.5, -1.0, 2.0], 1e-5).unwrap();
        assert_eq!(ln.forward(&[3.0, -7.0, 0.1]).unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn too_short_is_an_error() {
        let ln = LayerNorm::new(1);
        assert!(ln.forward(&[1.0]).is_err());
        assert!(LayerNorm::new(3).forward(&[1.0, 2.0]).is_err());
        assert!(LayerNorm::from_parts(vec![1.0], vec![0.0], 0.0).is_err());
    }

    #[test]
    fn constant_input_gain_gradient_is_zero() {
        let ln = LayerNorm::new(4);
        let g = ln.backward(&[2.0; 4], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        assert!(g.grad_gain.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let ln = LayerNorm::new(3);
        let g = ln.backward(&[1.0, 4.0, -2.0], &[0.0; 3]).unwrap();
        assert!(g.grad_x.iter().chain(&g.grad_gain).chain(&g.grad_shift).all(|&v| v == 0.0));
    }
}
