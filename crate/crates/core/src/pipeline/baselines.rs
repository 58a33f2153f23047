//! Reference predictors: appearance-only direct regression, the rule-based
//! density table, and the best-possible material-only predictor.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::geometry::PointEncoder;
use crate::heads::{alde_loss, VolumeHead};
use crate::metrics::{MetricsReport, Stratify};
use crate::nn::dense::{stack_backward, stack_forward};
use crate::nn::params::join;
use crate::nn::{Activation, DenseLayer, Params};
use crate::rng::stream;
use crate::semantics::MaterialVocab;
use crate::synthbench::Split;

use super::config::ModelConfig;
use super::model::{Estimate, PreparedSample, Trainable};
use super::train::PredictionRow;

/// Appearance vector → three dense layers → softplus mass.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectRegressor {
    pub layers: Vec<DenseLayer>,
}

impl DirectRegressor {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            layers: vec![
                DenseLayer::new(in_dim, hidden, Activation::Tanh, rng),
                DenseLayer::new(hidden, hidden, Activation::Tanh, rng),
                DenseLayer::new(hidden, 1, Activation::Softplus, rng),
            ],
        }
    }

    pub fn from_config(config: &ModelConfig) -> Self {
        Self::new(
            config.appearance_dim,
            config.head_hidden,
            &mut stream(config.seed, 0x4449_5245),
        )
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn mass(&self, appearance: &[f64]) -> Result<f64> {
        Ok(stack_forward(&self.layers, appearance)?.output()[0])
    }

    /// Adds `scale · ∂L/∂θ` for the log-ratio loss and returns the loss.
    pub fn accumulate_appearance(
        &self,
        appearance: &[f64],
        mass: f64,
        grads: &mut Self,
        scale: f64,
    ) -> Result<f64> {
        let trace = stack_forward(&self.layers, appearance)?;
        let (loss, dl) = alde_loss(mass, trace.output()[0])?;
        stack_backward(&self.layers, &trace, &[scale * dl], &mut grads.layers)?;
        Ok(loss)
    }

    fn check(&self, s: &PreparedSample) -> Result<()> {
        if s.appearance.len() != self.in_dim() {
            return Err(dim_err(format!(
                "appearance vector has {} entries, expected {}",
                s.appearance.len(),
                self.in_dim()
            )));
        }
        Ok(())
    }
}

impl Trainable for DirectRegressor {
    fn estimate(&self, s: &PreparedSample) -> Result<Estimate> {
        self.check(s)?;
        Ok(Estimate {
            mass: self.mass(&s.appearance)?,
            volume: None,
            density: None,
            gate_weights: None,
        })
    }

    fn accumulate(&self, s: &PreparedSample, grads: &mut Self, scale: f64) -> Result<f64> {
        self.check(s)?;
        self.accumulate_appearance(&s.appearance, s.mass, grads, scale)
    }

    fn gradient_buffer(&self) -> Self {
        Self {
            layers: self.layers.iter().map(DenseLayer::zeros_like).collect(),
        }
    }
}

impl Params for DirectRegressor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.layers.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.layers.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Where the rule-based baseline takes its volume from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VolumeSource {
    /// A geometry-only volume head, trained with the density factor pinned
    /// to the table value of each sample's parsed material.
    #[default]
    Trained,
    /// Depth-thickness integration over the silhouette (no learning).
    Oracle,
}

impl std::str::FromStr for VolumeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trained" => Ok(Self::Trained),
            "oracle" => Ok(Self::Oracle),
            _ => Err(Error::Config(format!("unknown volume source '{s}'"))),
        }
    }
}

/// Geometry encoder + volume head; density comes from the material table.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleBasedModel {
    pub geometry: PointEncoder,
    pub volume: VolumeHead,
    /// Table density per material id (index = id); unknown has none.
    pub densities: Vec<f64>,
}

impl RuleBasedModel {
    pub fn new(config: &ModelConfig, vocab: &MaterialVocab) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, 0x5255_4c45);
        let geometry = PointEncoder::new(
            &config.point_widths,
            config.feature_dim,
            config.n_points,
            &mut rng,
        )?;
        let volume = VolumeHead::new(
            config.feature_dim,
            config.head_hidden,
            config.volume_init_bias,
            &mut rng,
        )
        .with_unit(config.volume_unit);
        Ok(Self {
            geometry,
            volume,
            densities: table_densities(vocab)?,
        })
    }

    fn density(&self, s: &PreparedSample) -> Result<f64> {
        self.densities
            .get(s.material.0)
            .copied()
            .ok_or_else(|| Error::UnknownMaterial(s.material_text.clone()))
    }
}

fn table_densities(vocab: &MaterialVocab) -> Result<Vec<f64>> {
    (0..vocab.len())
        .map(|i| vocab.rule_based_density(crate::semantics::MaterialId(i)))
        .collect()
}

impl Trainable for RuleBasedModel {
    fn estimate(&self, s: &PreparedSample) -> Result<Estimate> {
        let rho = self.density(s)?;
        let (pre, _) = self.volume.body.forward(&self.geometry.encode(&s.points)?)?;
        let v = self.volume.activate(pre);
        Ok(Estimate {
            mass: v * rho,
            volume: Some(v),
            density: Some(rho),
            gate_weights: None,
        })
    }

    fn accumulate(&self, s: &PreparedSample, grads: &mut Self, scale: f64) -> Result<f64> {
        let rho = self.density(s)?;
        let (feature, cache) = self.geometry.forward(&s.points)?;
        let (pre, trace) = self.volume.body.forward(&feature)?;
        let v = self.volume.activate(pre);
        let (loss, dl) = alde_loss(s.mass, v * rho)?;
        let gpre = scale * dl * rho * self.volume.derivative(pre);
        let gfeat = self.volume.body.backward(&trace, gpre, &mut grads.volume.body)?;
        self.geometry.backward(&s.points, &cache, &gfeat, &mut grads.geometry)?;
        Ok(loss)
    }

    fn gradient_buffer(&self) -> Self {
        Self {
            geometry: self.geometry.zeros_like(),
            volume: self.volume.zeros_like(),
            densities: self.densities.clone(),
        }
    }

    fn accepts(&self, s: &PreparedSample) -> bool {
        s.material.0 < self.densities.len()
    }
}

impl Params for RuleBasedModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.geometry.visit(&join(prefix, "geometry"), f);
        self.volume.visit(&join(prefix, "volume"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.geometry.visit_mut(&join(prefix, "geometry"), f);
        self.volume.visit_mut(&join(prefix, "volume"), f);
    }
}

/// Rule-based predictions with the thickness-integration volume proxy.
pub fn rule_based_oracle_predictions(
    data: &[PreparedSample],
    vocab: &MaterialVocab,
    splits: &[Split],
) -> Result<(Vec<PredictionRow>, usize)> {
    let mut rows = Vec::new();
    let mut unknown = 0;
    for s in data.iter().filter(|s| splits.contains(&s.split)) {
        if vocab.is_unknown(s.material) {
            unknown += 1;
            continue;
        }
        let rho = vocab.rule_based_density(s.material)?;
        let v = s.thickness_volume;
        let e = Estimate {
            mass: v * rho,
            volume: Some(v),
            density: Some(rho),
            gate_weights: None,
        };
        rows.push(PredictionRow::new(s, &e));
    }
    Ok((rows, unknown))
}

/// Number of samples in `splits` whose material text did not parse.
pub fn count_unknown(data: &[PreparedSample], vocab: &MaterialVocab, splits: &[Split]) -> usize {
    data.iter()
        .filter(|s| splits.contains(&s.split) && vocab.is_unknown(s.material))
        .count()
}

/// Lowest test ALDE reachable by any predictor that sees only the material:
/// per material, the median of `ln m` minimises the summed absolute log error.
pub fn density_floor_oracle(data: &[PreparedSample]) -> Result<f64> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for s in data.iter().filter(|s| s.split.is_test()) {
        groups.entry(s.material.0).or_default().push(s.mass.ln());
    }
    if groups.is_empty() {
        return Err(Error::Domain("density floor needs a non-empty test split".into()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for logs in groups.values_mut() {
        logs.sort_by(f64::total_cmp);
        let median = logs[logs.len() / 2];
        total += logs.iter().map(|l| (l - median).abs()).sum::<f64>();
        n += logs.len();
    }
    Ok(total / n as f64)
}

/// Summary of a rule-based evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleBasedReport {
    pub report: MetricsReport,
    pub excluded_unknown: usize,
    pub rows: Vec<PredictionRow>,
}

pub fn rule_based_report(rows: Vec<PredictionRow>, excluded_unknown: usize) -> Result<RuleBasedReport> {
    let report = super::train::report(&rows, Stratify::SeenUnseen)?;
    Ok(RuleBasedReport {
        report,
        excluded_unknown,
        rows,
    })
}
