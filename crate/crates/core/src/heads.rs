//! Volume and density heads, mass composition `m = V · ρ`, and the
//! absolute-log-difference training loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::dense::{stack_backward, stack_forward, StackTrace};
use crate::nn::{sigmoid, Activation, DenseLayer, Params};

/// Lower bound on the volume factor so the predicted mass stays positive.
pub const V_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityActivationConfig {
    pub rho_min: f64,
    pub rho_max: f64,
}

impl Default for DensityActivationConfig {
    fn default() -> Self {
        Self {
            rho_min: 50.0,
            rho_max: 20000.0,
        }
    }
}

impl DensityActivationConfig {
    pub fn new(rho_min: f64, rho_max: f64) -> Result<Self> {
        let c = Self { rho_min, rho_max };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho_min > 0.0 && self.rho_min < self.rho_max && self.rho_max.is_finite()) {
            return Err(Error::Config(format!(
                "density bounds must satisfy 0 < rho_min < rho_max, got ({}, {})",
                self.rho_min, self.rho_max
            )));
        }
        Ok(())
    }

    /// Log-space sigmoid: `exp(ln ρmin + σ(x)·(ln ρmax − ln ρmin))`, clamped to the bounds.
    pub fn activate(&self, x: f64) -> f64 {
        let lo = self.rho_min.ln();
        let span = self.rho_max.ln() - lo;
        (lo + sigmoid(x) * span).exp().clamp(self.rho_min, self.rho_max)
    }

    /// dρ/dx at pre-activation `x`.
    pub fn derivative(&self, x: f64) -> f64 {
        let span = self.rho_max.ln() - self.rho_min.ln();
        let s = sigmoid(x);
        self.activate(x) * span * s * (1.0 - s)
    }
}

/// `max(relu(x), V_FLOOR)`.
pub fn volume_activation(x: f64) -> f64 {
    x.max(0.0).max(V_FLOOR)
}

pub fn volume_activation_derivative(x: f64) -> f64 {
    if x > V_FLOOR {
        1.0
    } else {
        0.0
    }
}

/// `max(unit · relu(x), V_FLOOR)`: the head reads out in multiples of `unit` m³.
pub fn scaled_volume_activation(x: f64, unit: f64) -> f64 {
    volume_activation(unit * x)
}

pub fn scaled_volume_activation_derivative(x: f64, unit: f64) -> f64 {
    unit * volume_activation_derivative(unit * x)
}

/// Shared head body: `in → hidden (tanh) → 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionHead {
    pub layers: Vec<DenseLayer>,
}

impl RegressionHead {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            layers: vec![
                DenseLayer::new(in_dim, hidden, Activation::Tanh, rng),
                DenseLayer::new(hidden, 1, Activation::Identity, rng),
            ],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(DenseLayer::zeros_like).collect(),
        }
    }

    /// Scalar pre-activation and the trace for backward.
    pub fn forward(&self, x: &[f64]) -> Result<(f64, StackTrace)> {
        let trace = stack_forward(&self.layers, x)?;
        Ok((trace.output()[0], trace))
    }

    pub fn backward(&self, trace: &StackTrace, grad_pre: f64, acc: &mut RegressionHead) -> Result<Vec<f64>> {
        stack_backward(&self.layers, trace, &[grad_pre], &mut acc.layers)
    }
}

impl Params for RegressionHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.layers.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.layers.visit_mut(prefix, f);
    }
}

/// Volume head with non-negative (floored) output.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeHead {
    pub body: RegressionHead,
    /// m³ per unit of head output.
    pub unit: f64,
}

impl VolumeHead {
    /// The output bias starts at `init_bias` so the ReLU is live at initialisation.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, hidden: usize, init_bias: f64, rng: &mut R) -> Self {
        let mut body = RegressionHead::new(in_dim, hidden, rng);
        body.layers[1].bias[0] = init_bias;
        Self { body, unit: 1.0 }
    }

    pub fn with_unit(mut self, unit: f64) -> Self {
        self.unit = unit;
        self
    }

    pub fn activate(&self, pre: f64) -> f64 {
        scaled_volume_activation(pre, self.unit)
    }

    pub fn derivative(&self, pre: f64) -> f64 {
        scaled_volume_activation_derivative(pre, self.unit)
    }

    pub fn predict(&self, fused: &[f64]) -> Result<f64> {
        Ok(self.activate(self.body.forward(fused)?.0))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            body: self.body.zeros_like(),
            unit: self.unit,
        }
    }
}

impl Params for VolumeHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.body.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.body.visit_mut(prefix, f);
    }
}

/// Density head with the bounded log-space activation.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityHead {
    pub body: RegressionHead,
    pub bounds: DensityActivationConfig,
}

impl DensityHead {
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: usize,
        bounds: DensityActivationConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            body: RegressionHead::new(in_dim, hidden, rng),
            bounds,
        }
    }

    pub fn predict(&self, fused: &[f64]) -> Result<f64> {
        Ok(self.bounds.activate(self.body.forward(fused)?.0))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            body: self.body.zeros_like(),
            bounds: self.bounds,
        }
    }
}

impl Params for DensityHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.body.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.body.visit_mut(prefix, f);
    }
}

pub fn volume_head(params: &VolumeHead, fused: &[f64]) -> Result<f64> {
    params.predict(fused)
}

pub fn density_head(params: &DensityHead, fused: &[f64]) -> Result<f64> {
    params.predict(fused)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassPrediction {
    pub volume: f64,
    pub density: f64,
    pub mass: f64,
    /// (image, geometry, text); zero for disabled cues.
    pub gate_weights: Option<[f64; 3]>,
}

/// `m̂ = V̂ · ρ̂` after checking both factors against their constraints.
pub fn compose_mass(
    volume: f64,
    density: f64,
    bounds: &DensityActivationConfig,
) -> Result<MassPrediction> {
    if !(volume >= V_FLOOR && volume.is_finite()) {
        return Err(Error::Contract(format!("volume factor {volume} below floor {V_FLOOR}")));
    }
    if !(density >= bounds.rho_min && density <= bounds.rho_max) {
        return Err(Error::Contract(format!(
            "density factor {density} outside [{}, {}]",
            bounds.rho_min, bounds.rho_max
        )));
    }
    Ok(MassPrediction {
        volume,
        density,
        mass: volume * density,
        gate_weights: None,
    })
}

/// `|ln m − ln m̂|` and its derivative with respect to `m̂` (0 at equality).
pub fn alde_loss(mass: f64, predicted: f64) -> Result<(f64, f64)> {
    if !(mass > 0.0 && predicted > 0.0 && mass.is_finite() && predicted.is_finite()) {
        return Err(Error::Domain(format!(
            "log loss needs positive finite masses, got ({mass}, {predicted})"
        )));
    }
    let diff = predicted.ln() - mass.ln();
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok((diff.abs(), sign / predicted))
}
