//! The factored mass model: cue encoders → fusion → volume and density heads.

use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::fusion::{Fusion, FusionCache};
use crate::geometry::{PointEncoder, PointEncoderCache};
use crate::geometry::{normalize_depth, sample_points, unproject, PointCloud};
use crate::heads::{
    alde_loss, compose_mass, DensityHead,
    MassPrediction, VolumeHead,
};
use crate::nn::dense::{stack_backward, stack_forward, StackTrace};
use crate::nn::params::join;
use crate::nn::{Activation, DenseLayer, LayerNorm, Params};
use crate::rng::{derive_seed, hash_str, stream};
use crate::semantics::{MaterialEmbedding, MaterialId, TextEncoder};
use crate::synthbench::{thickness_volume, Dataset, Split};

use super::config::ModelConfig;

/// A benchmark sample reduced to what the models consume.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub split: Split,
    pub category: String,
    pub seen: bool,
    pub mass: f64,
    pub true_volume: f64,
    pub true_density: f64,
    pub appearance: Vec<f64>,
    /// Centred, scale-normalised, resampled to a fixed size.
    pub points: PointCloud,
    /// Material parsed from the free-text description (may be unknown).
    pub material: MaterialId,
    pub material_text: String,
    /// Depth-thickness volume estimate in world units.
    pub thickness_volume: f64,
}

/// Mask bbox → depth normalisation → unprojection → fixed-size resampling.
/// The resampling seed depends only on `seed` and the sample id.
pub fn prepare_dataset(ds: &Dataset, n_points: usize, seed: u64) -> Result<Vec<PreparedSample>> {
    let camera = ds.camera();
    let render = &ds.config.render;
    ds.samples
        .iter()
        .map(|s| {
            let bbox = s.depth.mask_bbox();
            let normalized = normalize_depth(&s.depth, &bbox)?;
            let cloud = unproject(&normalized, &camera)?;
            let points = sample_points(&cloud, n_points, derive_seed(seed, hash_str(&s.id)))?;
            Ok(PreparedSample {
                id: s.id.clone(),
                split: s.split,
                category: s.category.clone(),
                seen: s.split != Split::TestUnseen,
                mass: s.mass,
                true_volume: s.true_volume,
                true_density: s.true_density,
                appearance: s.appearance.clone(),
                points,
                material: ds.vocab.parse_material(&s.material_text),
                material_text: s.material_text.clone(),
                thickness_volume: thickness_volume(
                    &s.depth,
                    render.pixel_scale(),
                    render.center_depth,
                ),
            })
        })
        .collect()
}

/// Appearance encoder: `A → D (tanh) → D → LayerNorm`.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceEncoder {
    pub layers: Vec<DenseLayer>,
    pub norm: LayerNorm,
}

impl AppearanceEncoder {
    pub fn new<R: rand::Rng + ?Sized>(in_dim: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            layers: vec![
                DenseLayer::new(in_dim, dim, Activation::Tanh, rng),
                DenseLayer::new(dim, dim, Activation::Identity, rng),
            ],
            norm: LayerNorm::new(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(DenseLayer::zeros_like).collect(),
            norm: self.norm.zeros_like(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, StackTrace)> {
        let trace = stack_forward(&self.layers, x)?;
        Ok((self.norm.forward(trace.output())?, trace))
    }

    pub fn backward(&self, trace: &StackTrace, grad: &[f64], acc: &mut Self) -> Result<()> {
        let g = self
            .norm
            .backward_accumulate(trace.output(), grad, &mut acc.norm)?;
        stack_backward(&self.layers, trace, &g, &mut acc.layers)?;
        Ok(())
    }
}

impl Params for AppearanceEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.layers.visit(&join(prefix, "mlp"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.layers.visit_mut(&join(prefix, "mlp"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// A mass estimate; factored models also expose their two factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mass: f64,
    pub volume: Option<f64>,
    pub density: Option<f64>,
    /// (image, geometry, text); zero for disabled cues.
    pub gate_weights: Option<[f64; 3]>,
}

impl From<MassPrediction> for Estimate {
    fn from(p: MassPrediction) -> Self {
        Self {
            mass: p.mass,
            volume: Some(p.volume),
            density: Some(p.density),
            gate_weights: p.gate_weights,
        }
    }
}

/// Anything that can score prepared samples.
pub trait Predictor {
    fn estimate(&self, s: &PreparedSample) -> Result<Estimate>;

    /// Samples a model cannot score (e.g. unparsed material for the rule baseline).
    fn accepts(&self, _s: &PreparedSample) -> bool {
        true
    }
}

impl<T: Trainable> Predictor for T {
    fn estimate(&self, s: &PreparedSample) -> Result<Estimate> {
        Trainable::estimate(self, s)
    }

    fn accepts(&self, s: &PreparedSample) -> bool {
        Trainable::accepts(self, s)
    }
}

/// Anything the training loop can fit with the log-ratio loss.
pub trait Trainable: Params + Clone {
    fn estimate(&self, s: &PreparedSample) -> Result<Estimate>;

    /// Adds `scale · ∂L/∂θ` for one sample into `grads` and returns the loss.
    fn accumulate(&self, s: &PreparedSample, grads: &mut Self, scale: f64) -> Result<f64>;

    /// A zero-filled container with the same parameter layout.
    fn gradient_buffer(&self) -> Self;

    /// Samples a model cannot score (e.g. unparsed material for the rule baseline).
    fn accepts(&self, _s: &PreparedSample) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MassModel {
    pub config: ModelConfig,
    pub appearance: Option<AppearanceEncoder>,
    pub geometry: Option<PointEncoder>,
    pub text: Option<TextEncoder>,
    pub fusion: Fusion,
    pub volume: VolumeHead,
    pub density: DensityHead,
}

/// Intermediate values from [`MassModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tokens: Vec<Vec<f64>>,
    appearance: Option<StackTrace>,
    geometry: Option<PointEncoderCache>,
    fusion: FusionCache,
    volume: StackTrace,
    volume_pre: f64,
    density: StackTrace,
    density_pre: f64,
}

impl MassModel {
    /// `vocab_len` is the number of known materials; the embedding table gets
    /// one extra row for unparsed text.
    pub fn new(config: &ModelConfig, vocab_len: usize) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        let mut rng = stream(config.seed, 0x4d4f_4445);
        let cues = config.cues;
        let appearance = cues
            .image
            .then(|| AppearanceEncoder::new(config.appearance_dim, d, &mut rng));
        let geometry = if cues.volume {
            Some(PointEncoder::new(&config.point_widths, d, config.n_points, &mut rng)?)
        } else {
            None
        };
        let text = if cues.density {
            let table = MaterialEmbedding::new(vocab_len + 1, d, derive_seed(config.seed, 0x5445_5854))?;
            Some(TextEncoder::new(table))
        } else {
            None
        };
        let fusion = Fusion::new(config.fusion, cues.count(), d, &mut rng);
        let fused = fusion.out_dim();
        let volume = VolumeHead::new(fused, config.head_hidden, config.volume_init_bias, &mut rng)
            .with_unit(config.volume_unit);
        let density = DensityHead::new(fused, config.head_hidden, config.density_bounds, &mut rng);
        Ok(Self {
            config: config.clone(),
            appearance,
            geometry,
            text,
            fusion,
            volume,
            density,
        })
    }

    pub fn forward(&self, s: &PreparedSample) -> Result<(MassPrediction, ForwardCache)> {
        let mut tokens = Vec::with_capacity(3);
        let mut app_trace = None;
        let mut geo_cache = None;
        if let Some(enc) = &self.appearance {
            if s.appearance.len() != self.config.appearance_dim {
                return Err(dim_err(format!(
                    "appearance vector has {} entries, expected {}",
                    s.appearance.len(),
                    self.config.appearance_dim
                )));
            }
            let (tok, trace) = enc.forward(&s.appearance)?;
            tokens.push(tok);
            app_trace = Some(trace);
        }
        if let Some(enc) = &self.geometry {
            let (tok, cache) = enc.forward(&s.points)?;
            tokens.push(tok);
            geo_cache = Some(cache);
        }
        if let Some(enc) = &self.text {
            tokens.push(enc.encode(s.material)?);
        }
        let (fused, fusion_cache) = self.fusion.forward(&tokens)?;
        let (volume_pre, volume_trace) = self.volume.body.forward(&fused.vector)?;
        let (density_pre, density_trace) = self.density.body.forward(&fused.vector)?;
        let v = self.volume.activate(volume_pre);
        let rho = self.density.bounds.activate(density_pre);
        let mut pred = compose_mass(v, rho, &self.density.bounds)?;
        pred.gate_weights = fused.gate_weights.as_ref().map(|w| self.expand_gates(w));
        Ok((
            pred,
            ForwardCache {
                tokens,
                appearance: app_trace,
                geometry: geo_cache,
                fusion: fusion_cache,
                volume: volume_trace,
                volume_pre,
                density: density_trace,
                density_pre,
            },
        ))
    }

    /// Maps gate weights over enabled cues to (image, geometry, text).
    fn expand_gates(&self, w: &[f64]) -> [f64; 3] {
        let mut out = [0.0; 3];
        let enabled = [self.appearance.is_some(), self.geometry.is_some(), self.text.is_some()];
        let mut k = 0;
        for (slot, on) in out.iter_mut().zip(enabled) {
            if on {
                *slot = w[k];
                k += 1;
            }
        }
        out
    }

    /// Back-propagates `∂L/∂m̂` through both heads, fusion and encoders.
    pub fn backward(
        &self,
        s: &PreparedSample,
        pred: &MassPrediction,
        cache: &ForwardCache,
        grad_mass: f64,
        acc: &mut MassModel,
    ) -> Result<()> {
        let gv = grad_mass * pred.density * self.volume.derivative(cache.volume_pre);
        let grho = grad_mass * pred.volume * self.density.bounds.derivative(cache.density_pre);
        let mut grad_fused = self.volume.body.backward(&cache.volume, gv, &mut acc.volume.body)?;
        let g2 = self
            .density
            .body
            .backward(&cache.density, grho, &mut acc.density.body)?;
        for (a, b) in grad_fused.iter_mut().zip(&g2) {
            *a += b;
        }
        let token_grads = self
            .fusion
            .backward(&cache.tokens, &cache.fusion, &grad_fused, &mut acc.fusion)?;
        let mut k = 0;
        if let (Some(enc), Some(trace), Some(a)) =
            (&self.appearance, &cache.appearance, acc.appearance.as_mut())
        {
            enc.backward(trace, &token_grads[k], a)?;
            k += 1;
        }
        if let (Some(enc), Some(gc), Some(a)) = (&self.geometry, &cache.geometry, acc.geometry.as_mut()) {
            enc.backward(&s.points, gc, &token_grads[k], a)?;
            k += 1;
        }
        if let (Some(enc), Some(a)) = (&self.text, acc.text.as_mut()) {
            enc.backward(s.material, &token_grads[k], a)?;
        }
        Ok(())
    }

    pub fn predict(&self, s: &PreparedSample) -> Result<MassPrediction> {
        Ok(self.forward(s)?.0)
    }

    /// The frozen embedding table, if the text cue is enabled.
    pub fn frozen_table(&self) -> Option<&MaterialEmbedding> {
        self.text.as_ref().map(|t| &t.table)
    }

    pub fn set_frozen_table(&mut self, table: MaterialEmbedding) -> Result<()> {
        match self.text.as_mut() {
            Some(t) if t.table.table().rows() == table.table().rows() && t.table.dim() == table.dim() => {
                t.table = table;
                Ok(())
            }
            Some(_) => Err(Error::Format("embedding table shape mismatch".into())),
            None => Err(Error::Format("model has no text encoder".into())),
        }
    }
}

impl Trainable for MassModel {
    fn estimate(&self, s: &PreparedSample) -> Result<Estimate> {
        Ok(self.forward(s)?.0.into())
    }

    fn accumulate(&self, s: &PreparedSample, grads: &mut Self, scale: f64) -> Result<f64> {
        let (pred, cache) = self.forward(s)?;
        let (loss, dl) = alde_loss(s.mass, pred.mass)?;
        self.backward(s, &pred, &cache, scale * dl, grads)?;
        Ok(loss)
    }

    fn gradient_buffer(&self) -> Self {
        Self {
            config: self.config.clone(),
            appearance: self.appearance.as_ref().map(AppearanceEncoder::zeros_like),
            geometry: self.geometry.as_ref().map(PointEncoder::zeros_like),
            text: self.text.as_ref().map(TextEncoder::zeros_like),
            fusion: self.fusion.zeros_like(),
            volume: self.volume.zeros_like(),
            density: self.density.zeros_like(),
        }
    }
}

impl Params for MassModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.appearance.visit(&join(prefix, "image"), f);
        self.geometry.visit(&join(prefix, "geometry"), f);
        self.text.visit(&join(prefix, "text"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.volume.visit(&join(prefix, "volume"), f);
        self.density.visit(&join(prefix, "density"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.appearance.visit_mut(&join(prefix, "image"), f);
        self.geometry.visit_mut(&join(prefix, "geometry"), f);
        self.text.visit_mut(&join(prefix, "text"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.volume.visit_mut(&join(prefix, "volume"), f);
        self.density.visit_mut(&join(prefix, "density"), f);
    }
}
