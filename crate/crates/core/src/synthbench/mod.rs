//! Procedural benchmark: primitive shapes with analytic volume, material
//! densities, exact masses, orthographic depth renders with masks, noisy
//! appearance descriptors and a seen/unseen category split.

mod io;

pub use io::{load_dataset, read_depth_map, write_dataset, write_depth_map, MANIFEST_FILE};

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, DepthMap};
use crate::rng::{self, derive_seed, SplitMix64};
use crate::semantics::{MaterialId, MaterialVocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Box,
    Cylinder,
    Sphere,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Box, ShapeKind::Cylinder, ShapeKind::Sphere];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Sphere => "sphere",
        }
    }
}

/// Dimensions in metres. Cylinders stand upright (axis along image rows).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Box { w: f64, h: f64, d: f64 },
    Cylinder { r: f64, h: f64 },
    Sphere { r: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub shape: Shape,
    /// Solid fraction of the enclosed volume, in (0, 1].
    pub fill_ratio: f64,
}

impl ShapeSpec {
    pub fn new(shape: Shape, fill_ratio: f64) -> Result<Self> {
        let dims: &[f64] = match &shape {
            Shape::Box { w, h, d } => &[*w, *h, *d],
            Shape::Cylinder { r, h } => &[*r, *h],
            Shape::Sphere { r } => &[*r],
        };
        if dims.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("shape dimensions must be > 0: {shape:?}")));
        }
        if !(fill_ratio > 0.0 && fill_ratio <= 1.0) {
            return Err(Error::Config(format!("fill ratio {fill_ratio} outside (0, 1]")));
        }
        Ok(Self { shape, fill_ratio })
    }

    pub fn kind(&self) -> ShapeKind {
        match self.shape {
            Shape::Box { .. } => ShapeKind::Box,
            Shape::Cylinder { .. } => ShapeKind::Cylinder,
            Shape::Sphere { .. } => ShapeKind::Sphere,
        }
    }

    /// Enclosed volume, ignoring the fill ratio.
    pub fn geometric_volume(&self) -> f64 {
        match self.shape {
            Shape::Box { w, h, d } => w * h * d,
            Shape::Cylinder { r, h } => PI * r * r * h,
            Shape::Sphere { r } => 4.0 / 3.0 * PI * r * r * r,
        }
    }

    /// Visible (width, height) of the front silhouette.
    pub fn silhouette_extent(&self) -> (f64, f64) {
        match self.shape {
            Shape::Box { w, h, .. } => (w, h),
            Shape::Cylinder { r, h } => (2.0 * r, h),
            Shape::Sphere { r } => (2.0 * r, 2.0 * r),
        }
    }

    /// Silhouette area over its bounding-rectangle area.
    pub fn silhouette_fill(&self) -> f64 {
        match self.shape {
            Shape::Box { .. } | Shape::Cylinder { .. } => 1.0,
            Shape::Sphere { .. } => PI / 4.0,
        }
    }

    /// Depth of the surface nearest the camera at lateral offset (x, y) from
    /// the shape centre, or `None` outside the silhouette.
    fn front_depth(&self, x: f64, y: f64, center_depth: f64) -> Option<f64> {
        match self.shape {
            Shape::Box { w, h, d } => {
                (x.abs() <= 0.5 * w && y.abs() <= 0.5 * h).then_some(center_depth - 0.5 * d)
            }
            Shape::Cylinder { r, h } => (x.abs() < r && y.abs() <= 0.5 * h)
                .then(|| center_depth - (r * r - x * x).sqrt()),
            Shape::Sphere { r } => {
                let q = r * r - x * x - y * y;
                (q > 0.0).then(|| center_depth - q.sqrt())
            }
        }
    }
}

/// Effective mass-bearing volume: enclosed volume times fill ratio.
pub fn analytic_volume(s: &ShapeSpec) -> f64 {
    s.geometric_volume() * s.fill_ratio
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub resolution: usize,
    /// Side length of the square field of view, metres.
    pub frame_size: f64,
    /// Camera-to-shape-centre distance, metres.
    pub center_depth: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            frame_size: 0.5,
            center_depth: 2.0,
        }
    }
}

impl RenderConfig {
    pub fn pixel_scale(&self) -> f64 {
        self.frame_size / self.resolution as f64
    }

    pub fn camera(&self) -> Camera {
        Camera::Orthographic {
            scale: self.pixel_scale(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.resolution < 16 {
            return Err(Error::Config(format!(
                "render resolution {} below 16",
                self.resolution
            )));
        }
        if !(self.frame_size > 0.0 && self.center_depth > 0.0) {
            return Err(Error::Config("frame size and centre depth must be > 0".into()));
        }
        Ok(())
    }
}

/// Front-facing orthographic depth of the shape centred in frame.
/// A pixel is inside the object when its centre is.
pub fn render_depth(s: &ShapeSpec, cfg: &RenderConfig) -> Result<DepthMap> {
    cfg.validate()?;
    let n = cfg.resolution;
    let scale = cfg.pixel_scale();
    let half = 0.5 * cfg.frame_size;
    let mut depth = vec![0.0; n * n];
    let mut mask = vec![false; n * n];
    let mut count = 0;
    for v in 0..n {
        let y = (v as f64 + 0.5) * scale - half;
        for u in 0..n {
            let x = (u as f64 + 0.5) * scale - half;
            if let Some(z) = s.front_depth(x, y, cfg.center_depth) {
                depth[v * n + u] = z;
                mask[v * n + u] = true;
                count += 1;
            }
        }
    }
    if count < 3 {
        return Err(Error::DegenerateInput(format!(
            "shape covers {count} pixels at resolution {n}"
        )));
    }
    DepthMap::new(n, n, depth, mask)
}

/// Volume proxy for front/back-symmetric objects: each masked pixel
/// contributes a column of thickness `2·(center_depth − depth)`.
pub fn thickness_volume(depth: &DepthMap, pixel_scale: f64, center_depth: f64) -> f64 {
    depth
        .masked_pixels()
        .map(|(_, _, z)| 2.0 * (center_depth - z).max(0.0))
        .sum::<f64>()
        * pixel_scale
        * pixel_scale
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AppearanceConfig {
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    /// Length used to normalise the visible dimensions.
    pub dim_scale: f64,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            dim_scale: 0.35,
        }
    }
}

/// Number of entries in an appearance descriptor.
pub const APPEARANCE_DIM: usize = 6;

/// Deterministic pseudo-colour for a material name, each channel in [0, 1].
pub fn material_color(name: &str) -> [f64; 3] {
    let h = rng::hash_str(name);
    [0, 21, 42].map(|shift| ((h >> shift) & 0x1f_ffff) as f64 / 0x1f_ffff as f64)
}

/// `[width, height, silhouette fill, r, g, b] + N(0, σ²)` with width and
/// height normalised by `dim_scale`.
pub fn synth_appearance(
    s: &ShapeSpec,
    material_name: &str,
    noise_seed: u64,
    cfg: &AppearanceConfig,
) -> Vec<f64> {
    let (w, h) = s.silhouette_extent();
    let [r, g, b] = material_color(material_name);
    let mut v = vec![w / cfg.dim_scale, h / cfg.dim_scale, s.silhouette_fill(), r, g, b];
    if cfg.noise_sigma > 0.0 {
        let mut rng = SplitMix64::new(noise_seed);
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("positive sigma");
        for x in &mut v {
            *x += normal.sample(&mut rng);
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test_seen" => Ok(Split::TestSeen),
            "test_unseen" => Ok(Split::TestUnseen),
            other => Err(Error::Format(format!("unknown split '{other}'"))),
        }
    }

    pub fn is_test(self) -> bool {
        self != Split::Train
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub shape: ShapeSpec,
    pub material: MaterialId,
    /// Effective (fill-scaled) volume, m³.
    pub true_volume: f64,
    pub true_density: f64,
    pub mass: f64,
    pub depth: DepthMap,
    pub appearance: Vec<f64>,
    pub material_text: String,
    pub category: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub unseen_fraction: f64,
    pub render: RenderConfig,
    pub appearance: AppearanceConfig,
    /// Log-uniform range for box edges and cylinder heights, metres.
    pub dim_min: f64,
    pub dim_max: f64,
    /// Probability that an object is hollow (fill drawn from `[fill_min, 1]`).
    pub hollow_prob: f64,
    pub fill_min: f64,
    /// Half-width of the log-uniform global scale jitter (0 disables).
    pub scale_jitter: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 500,
            unseen_fraction: 0.25,
            render: RenderConfig::default(),
            appearance: AppearanceConfig::default(),
            dim_min: 0.05,
            dim_max: 0.35,
            hollow_prob: 0.5,
            fill_min: 0.3,
            scale_jitter: 0.0,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        self.render.validate()?;
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("train and test sizes must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.unseen_fraction) {
            return Err(Error::Config(format!(
                "unseen fraction {} outside [0, 1)",
                self.unseen_fraction
            )));
        }
        if !(self.dim_min > 0.0 && self.dim_min < self.dim_max) {
            return Err(Error::Config("need 0 < dim_min < dim_max".into()));
        }
        if !(self.fill_min > 0.0 && self.fill_min <= 1.0) || !(0.0..=1.0).contains(&self.hollow_prob) {
            return Err(Error::Config("invalid fill settings".into()));
        }
        if !(self.scale_jitter >= 0.0) || self.appearance.noise_sigma < 0.0 {
            return Err(Error::Config("jitter and noise must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub categories: Vec<String>,
    pub unseen: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub seed: u64,
    pub vocab: MaterialVocab,
    pub samples: Vec<Sample>,
    pub manifest: SplitManifest,
    /// Intrinsics supplied with ingested data; synthetic renders use the
    /// orthographic camera of `config.render`.
    pub camera: Option<Camera>,
}

impl Dataset {
    pub fn camera(&self) -> Camera {
        self.camera.unwrap_or_else(|| self.config.render.camera())
    }

    pub fn split(&self, which: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == which)
    }

    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.split.is_test())
    }
}

pub fn category_name(kind: ShapeKind, material: &str) -> String {
    format!("{}/{}", kind.as_str(), material)
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo.ln()..=hi.ln()).exp()
}

/// Picks held-out categories so every material and every shape kind keeps at
/// least one training category.
fn choose_unseen(
    kinds: &[ShapeKind],
    vocab: &MaterialVocab,
    fraction: f64,
    rng: &mut SplitMix64,
) -> Result<Vec<(ShapeKind, usize)>> {
    let all: Vec<(ShapeKind, usize)> = kinds
        .iter()
        .flat_map(|&k| (0..vocab.len()).map(move |m| (k, m)))
        .collect();
    if all.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 categories, have {}",
            all.len()
        )));
    }
    let want = (fraction * all.len() as f64).round() as usize;
    let mut order = all.clone();
    order.shuffle(rng);
    let mut unseen: Vec<(ShapeKind, usize)> = Vec::new();
    for cand in order {
        if unseen.len() == want {
            break;
        }
        let seen_after = |pred: &dyn Fn(&(ShapeKind, usize)) -> bool| {
            all.iter()
                .filter(|c| pred(c) && **c != cand && !unseen.contains(c))
                .count()
        };
        if seen_after(&|c| c.0 == cand.0) > 0 && seen_after(&|c| c.1 == cand.1) > 0 {
            unseen.push(cand);
        }
    }
    if unseen.len() != want {
        return Err(Error::Config(format!(
            "cannot hold out {want} of {} categories while keeping every material and shape in training",
            all.len()
        )));
    }
    unseen.sort();
    Ok(unseen)
}

fn draw_shape(kind: ShapeKind, cfg: &GeneratorConfig, rng: &mut SplitMix64) -> Shape {
    let (lo, hi) = (cfg.dim_min, cfg.dim_max);
    match kind {
        ShapeKind::Box => {
            let w = log_uniform(rng, lo, hi);
            let h = log_uniform(rng, lo, hi);
            let d = (w * h).sqrt() * log_uniform(rng, 0.5, 2.0);
            Shape::Box { w, h, d }
        }
        ShapeKind::Cylinder => Shape::Cylinder {
            r: log_uniform(rng, 0.6 * lo, 0.6 * hi),
            h: log_uniform(rng, lo, hi),
        },
        ShapeKind::Sphere => Shape::Sphere {
            r: log_uniform(rng, 0.6 * lo, 0.6 * hi),
        },
    }
}

const TEXT_TEMPLATES: [&str; 4] = ["{}", "made of {}", "primarily {}", "{} body"];

fn material_text(vocab: &MaterialVocab, id: MaterialId, rng: &mut SplitMix64) -> String {
    let m = vocab.get(id).expect("known material");
    let k = rng.random_range(0..=m.aliases.len());
    let word = if k == 0 { &m.name } else { &m.aliases[k - 1] };
    let tpl = TEXT_TEMPLATES[rng.random_range(0..TEXT_TEMPLATES.len())];
    tpl.replace("{}", word)
}

fn generate_sample(
    index: usize,
    split: Split,
    kind: ShapeKind,
    material: MaterialId,
    cfg: &GeneratorConfig,
    vocab: &MaterialVocab,
    seed: u64,
) -> Result<Sample> {
    let mut rng = rng::stream(seed, index as u64 + 1);
    let shape = draw_shape(kind, cfg, &mut rng);
    let fill = if rng.random_bool(cfg.hollow_prob) {
        rng.random_range(cfg.fill_min..=1.0)
    } else {
        1.0
    };
    let spec = ShapeSpec::new(shape, fill)?;
    let mat = vocab.get(material).expect("known material");
    let density = rng.random_range(mat.rho_lo..=mat.rho_hi);
    let volume = analytic_volume(&spec);
    let text = material_text(vocab, material, &mut rng);
    let mut render = cfg.render;
    if cfg.scale_jitter > 0.0 {
        let j = log_uniform(&mut rng, 1.0 / (1.0 + cfg.scale_jitter), 1.0 + cfg.scale_jitter);
        render.frame_size /= j;
    }
    let noise_seed = rng.next_u64();
    Ok(Sample {
        id: format!("s{index:05}"),
        shape: spec,
        material,
        true_volume: volume,
        true_density: density,
        mass: volume * density,
        depth: render_depth(&spec, &render)?,
        appearance: synth_appearance(&spec, &mat.name, noise_seed, &cfg.appearance),
        material_text: text,
        category: category_name(kind, &mat.name),
        split,
    })
}

/// Generates `n_train` training samples over seen categories and `n_test`
/// test samples over all categories. Deterministic in `seed`.
pub fn generate_dataset(
    cfg: &GeneratorConfig,
    vocab: &MaterialVocab,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate()?;
    let mut split_rng = rng::stream(seed, 0);
    let kinds = ShapeKind::ALL;
    let unseen = choose_unseen(&kinds, vocab, cfg.unseen_fraction, &mut split_rng)?;
    let all: Vec<(ShapeKind, usize)> = kinds
        .iter()
        .flat_map(|&k| (0..vocab.len()).map(move |m| (k, m)))
        .collect();
    let seen: Vec<(ShapeKind, usize)> =
        all.iter().copied().filter(|c| !unseen.contains(c)).collect();

    let mut samples = Vec::with_capacity(cfg.n_train + cfg.n_test);
    let sample_seed = derive_seed(seed, 0x5a4d_504c);
    for i in 0..cfg.n_train + cfg.n_test {
        let mut pick = rng::stream(seed, 0x1000_0000 + i as u64);
        let (kind, m) = if i < cfg.n_train {
            seen[pick.random_range(0..seen.len())]
        } else {
            all[pick.random_range(0..all.len())]
        };
        let split = if i < cfg.n_train {
            Split::Train
        } else if unseen.contains(&(kind, m)) {
            Split::TestUnseen
        } else {
            Split::TestSeen
        };
        samples.push(generate_sample(
            i,
            split,
            kind,
            MaterialId(m),
            cfg,
            vocab,
            sample_seed,
        )?);
    }
    let name = |&(k, m): &(ShapeKind, usize)| category_name(k, &vocab.entries()[m].name);
    Ok(Dataset {
        config: cfg.clone(),
        seed,
        vocab: vocab.clone(),
        samples,
        manifest: SplitManifest {
            categories: all.iter().map(name).collect(),
            unseen: unseen.iter().map(name).collect(),
        },
        camera: None,
    })
}
