//! Model, training and generator configuration, plus the plain-text
//! `key = value` config format used by the CLI and checkpoint headers.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionVariant;
use crate::heads::DensityActivationConfig;
use crate::synthbench::{GeneratorConfig, APPEARANCE_DIM};

/// Which evidence streams feed the fusion block. `density` is the material
/// (text) cue and `volume` the geometry cue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CueMask {
    pub image: bool,
    pub density: bool,
    pub volume: bool,
}

impl CueMask {
    pub const ALL: CueMask = CueMask {
        image: true,
        density: true,
        volume: true,
    };

    /// The seven non-empty subsets in ablation-table order: singles, pairs, all.
    pub fn ablation_grid() -> [CueMask; 7] {
        let m = |image, density, volume| CueMask {
            image,
            density,
            volume,
        };
        [
            m(true, false, false),
            m(false, true, false),
            m(false, false, true),
            m(true, true, false),
            m(true, false, true),
            m(false, true, true),
            m(true, true, true),
        ]
    }

    pub fn count(&self) -> usize {
        [self.image, self.density, self.volume]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

impl fmt::Display for CueMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names = Vec::new();
        if self.image {
            names.push("image");
        }
        if self.density {
            names.push("density");
        }
        if self.volume {
            names.push("volume");
        }
        write!(f, "{}", names.join(","))
    }
}

impl std::str::FromStr for CueMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut m = CueMask {
            image: false,
            density: false,
            volume: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "image" | "appearance" => m.image = true,
                "density" | "text" | "material" => m.density = true,
                "volume" | "geometry" => m.volume = true,
                other => return Err(Error::Config(format!("unknown cue '{other}'"))),
            }
        }
        if m.is_empty() {
            return Err(Error::Config("at least one cue must be enabled".into()));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub fusion: FusionVariant,
    pub cues: CueMask,
    pub n_points: usize,
    /// Widths of the shared per-point layers.
    pub point_widths: Vec<usize>,
    pub density_bounds: DensityActivationConfig,
    pub head_hidden: usize,
    pub appearance_dim: usize,
    /// Initial output bias of the volume head, in `volume_unit`s.
    pub volume_init_bias: f64,
    /// m³ per unit of volume-head output.
    pub volume_unit: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            fusion: FusionVariant::Gated,
            cues: CueMask::ALL,
            n_points: 1024,
            point_widths: vec![64],
            density_bounds: DensityActivationConfig::default(),
            head_hidden: 64,
            appearance_dim: APPEARANCE_DIM,
            volume_init_bias: 20.0,
            volume_unit: 1e-4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cues.is_empty() {
            return Err(Error::Config("at least one cue must be enabled".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("feature_dim must be >= 2".into()));
        }
        if self.n_points == 0 || self.head_hidden == 0 || self.appearance_dim == 0 {
            return Err(Error::Config("n_points, head_hidden and appearance_dim must be >= 1".into()));
        }
        if self.point_widths.is_empty() || self.point_widths.contains(&0) {
            return Err(Error::Config("point_widths must be a non-empty list of positive widths".into()));
        }
        if !self.volume_init_bias.is_finite() {
            return Err(Error::Config("volume_init_bias must be finite".into()));
        }
        if !(self.volume_unit > 0.0 && self.volume_unit.is_finite()) {
            return Err(Error::Config("volume_unit must be positive".into()));
        }
        self.density_bounds.validate()
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let widths: Vec<String> = self.point_widths.iter().map(usize::to_string).collect();
        vec![
            ("seed".into(), self.seed.to_string()),
            ("feature_dim".into(), self.feature_dim.to_string()),
            ("fusion".into(), self.fusion.as_str().into()),
            ("cues".into(), self.cues.to_string()),
            ("n_points".into(), self.n_points.to_string()),
            ("point_widths".into(), widths.join(",")),
            ("rho_min".into(), self.density_bounds.rho_min.to_string()),
            ("rho_max".into(), self.density_bounds.rho_max.to_string()),
            ("head_hidden".into(), self.head_hidden.to_string()),
            ("appearance_dim".into(), self.appearance_dim.to_string()),
            ("volume_init_bias".into(), self.volume_init_bias.to_string()),
            ("volume_unit".into(), self.volume_unit.to_string()),
        ]
    }

    /// Applies one key; returns `Ok(false)` when the key is not a model key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "fusion" => self.fusion = value.parse()?,
            "cues" => self.cues = value.parse()?,
            "n_points" => self.n_points = parse(key, value)?,
            "point_widths" => {
                self.point_widths = value
                    .split(',')
                    .map(|w| parse(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "rho_min" => self.density_bounds.rho_min = parse(key, value)?,
            "rho_max" => self.density_bounds.rho_max = parse(key, value)?,
            "head_hidden" => self.head_hidden = parse(key, value)?,
            "appearance_dim" => self.appearance_dim = parse(key, value)?,
            "volume_init_bias" => self.volume_init_bias = parse(key, value)?,
            "volume_unit" => self.volume_unit = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            lr: 1e-4,
            batch_size: 1,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("shuffle_seed".into(), self.shuffle_seed.to_string()),
        ]
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "shuffle_seed" => self.shuffle_seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub fn generator_to_kv(g: &GeneratorConfig) -> Vec<(String, String)> {
    vec![
        ("n_train".into(), g.n_train.to_string()),
        ("n_test".into(), g.n_test.to_string()),
        ("unseen_fraction".into(), g.unseen_fraction.to_string()),
        ("resolution".into(), g.render.resolution.to_string()),
        ("frame_size".into(), g.render.frame_size.to_string()),
        ("center_depth".into(), g.render.center_depth.to_string()),
        ("appearance_sigma".into(), g.appearance.noise_sigma.to_string()),
        ("dim_min".into(), g.dim_min.to_string()),
        ("dim_max".into(), g.dim_max.to_string()),
        ("hollow_prob".into(), g.hollow_prob.to_string()),
        ("fill_min".into(), g.fill_min.to_string()),
        ("scale_jitter".into(), g.scale_jitter.to_string()),
    ]
}

pub fn generator_apply(g: &mut GeneratorConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "n_train" => g.n_train = parse(key, value)?,
        "n_test" => g.n_test = parse(key, value)?,
        "unseen_fraction" => g.unseen_fraction = parse(key, value)?,
        "resolution" => g.render.resolution = parse(key, value)?,
        "frame_size" => g.render.frame_size = parse(key, value)?,
        "center_depth" => g.render.center_depth = parse(key, value)?,
        "appearance_sigma" => g.appearance.noise_sigma = parse(key, value)?,
        "dim_min" => g.dim_min = parse(key, value)?,
        "dim_max" => g.dim_max = parse(key, value)?,
        "hollow_prob" => g.hollow_prob = parse(key, value)?,
        "fill_min" => g.fill_min = parse(key, value)?,
        "scale_jitter" => g.scale_jitter = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

/// Parses `key = value` lines. `#` starts a comment; later keys override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn format_kv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Everything a CLI run needs, assembled from a config file plus overrides.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: GeneratorConfig,
}

impl RunConfig {
    pub fn apply_map(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in map {
            self.apply(k, v)?;
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.apply(key, value)?
            || self.train.apply(key, value)?
            || generator_apply(&mut self.data, key, value)?
        {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config key '{key}'")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_map(&parse_kv(&text)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut v = self.model.to_kv();
        v.extend(self.train.to_kv());
        v.extend(generator_to_kv(&self.data));
        v
    }
}
