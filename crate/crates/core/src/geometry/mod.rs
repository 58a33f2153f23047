//! Geometry cue: depth normalisation, unprojection to an object-centred point
//! cloud, point sampling and the set encoder.

mod encoder;

pub use encoder::{PointEncoder, PointEncoderCache};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng::SplitMix64;

/// Per-pixel depth in metres with an object mask. Row-major, `v * width + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    mask: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depth: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if depth.len() != n || mask.len() != n {
            return Err(dim_err(format!(
                "depth map {width}x{height}: got {} depths and {} mask entries",
                depth.len(),
                mask.len()
            )));
        }
        let mut count = 0;
        for (i, (&d, &m)) in depth.iter().zip(&mask).enumerate() {
            if m {
                if !(d.is_finite() && d > 0.0) {
                    return Err(Error::DegenerateInput(format!(
                        "masked pixel {i} has invalid depth {d}"
                    )));
                }
                count += 1;
            }
        }
        if count < 3 {
            return Err(Error::DegenerateInput(format!(
                "depth map has {count} masked pixels, need at least 3"
            )));
        }
        Ok(Self {
            width,
            height,
            depth,
            mask,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.mask[i].then_some(self.depth[i])
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Iterates `(u, v, depth)` over masked-in pixels in row-major order.
    pub fn masked_pixels(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(i, _)| (i % self.width, i / self.width, self.depth[i]))
    }

    /// Tight pixel bounding box of the mask; pixel `u` covers `[u, u + 1)`.
    pub fn mask_bbox(&self) -> BBox {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (u, v, _) in self.masked_pixels() {
            x0 = x0.min(u);
            y0 = y0.min(v);
            x1 = x1.max(u);
            y1 = y1.max(v);
        }
        BBox {
            x_min: x0 as f64,
            y_min: y0 as f64,
            x_max: (x1 + 1) as f64,
            y_max: (y1 + 1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(dim_err(format!("degenerate bounding box {self:?}")));
        }
        Ok(())
    }

    pub fn diagonal(&self) -> Result<f64> {
        self.validate()?;
        Ok((self.x_max - self.x_min).hypot(self.y_max - self.y_min))
    }
}

pub fn bbox_diagonal(b: &BBox) -> Result<f64> {
    b.diagonal()
}

/// Divides masked-in depths by the bounding-box diagonal; background is left as is.
pub fn normalize_depth(d: &DepthMap, b: &BBox) -> Result<DepthMap> {
    let diag = b.diagonal()?;
    let depth = d
        .depth
        .iter()
        .zip(&d.mask)
        .map(|(&z, &m)| if m { z / diag } else { z })
        .collect();
    DepthMap::new(d.width, d.height, depth, d.mask.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Camera {
    /// Parallel projection with `scale` world units per pixel.
    Orthographic { scale: f64 },
    Pinhole { focal_px: f64, cx: f64, cy: f64 },
}

impl Camera {
    fn lift(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        match *self {
            Camera::Orthographic { scale } => [u * scale, v * scale, z],
            Camera::Pinhole { focal_px, cx, cy } => {
                [(u - cx) * z / focal_px, (v - cy) * z / focal_px, z]
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Camera::Orthographic { scale } => scale.is_finite() && scale > 0.0,
            Camera::Pinhole { focal_px, cx, cy } => {
                focal_px.is_finite() && focal_px > 0.0 && cx.is_finite() && cy.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid camera {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::DegenerateInput("empty point cloud".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("non-finite point coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Translates the cloud so its centroid is at the origin.
    pub fn centered(mut self) -> Self {
        let c = self.centroid();
        for p in &mut self.points {
            for k in 0..3 {
                p[k] -= c[k];
            }
        }
        self
    }

    /// Per-axis `(min, max)`.
    pub fn bounds(&self) -> [(f64, f64); 3] {
        let mut b = [(f64::INFINITY, f64::NEG_INFINITY); 3];
        for p in &self.points {
            for k in 0..3 {
                b[k].0 = b[k].0.min(p[k]);
                b[k].1 = b[k].1.max(p[k]);
            }
        }
        b
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            points: order.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

/// One point per masked-in pixel, in camera coordinates, without centring.
pub fn lift_points(d: &DepthMap, camera: &Camera) -> Result<PointCloud> {
    camera.validate()?;
    if d.masked_count() < 3 {
        return Err(Error::DegenerateInput("fewer than 3 masked pixels".into()));
    }
    let points = d
        .masked_pixels()
        .map(|(u, v, z)| camera.lift(u as f64, v as f64, z))
        .collect();
    PointCloud::new(points)
}

/// Lifts masked-in pixels to 3D and centres the result on its centroid.
pub fn unproject(d: &DepthMap, camera: &Camera) -> Result<PointCloud> {
    Ok(lift_points(d, camera)?.centered())
}

/// Draws exactly `n` points: without replacement when the cloud is large
/// enough, otherwise with replacement.
pub fn sample_points(pc: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(dim_err("cannot sample 0 points"));
    }
    if pc.is_empty() {
        return Err(Error::DegenerateInput("empty point cloud".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let points = if pc.len() >= n {
        index::sample(&mut rng, pc.len(), n)
            .into_iter()
            .map(|i| pc.points[i])
            .collect()
    } else {
        (0..n)
            .map(|_| pc.points[rng.random_range(0..pc.len())])
            .collect()
    };
    Ok(PointCloud { points })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_map(w: usize, h: usize, z: f64) -> DepthMap {
        DepthMap::new(w, h, vec![z; w * h], vec![true; w * h]).unwrap()
    }

    #[test]
    fn diagonals() {
        assert_eq!(BBox::new(0., 0., 3., 4.).unwrap().diagonal().unwrap(), 5.0);
        assert_eq!(BBox::new(2., 3., 7., 15.).unwrap().diagonal().unwrap(), 13.0);
        assert!(BBox::new(0., 0., 1., 0.).is_err());
        let bad = BBox {
            x_min: 0.,
            y_min: 0.,
            x_max: 1.,
            y_max: 0.,
        };
        assert!(bbox_diagonal(&bad).is_err());
    }

    #[test]
    fn normalize_uniform_depth() {
        let d = full_map(3, 4, 10.0);
        let n = normalize_depth(&d, &BBox::new(0., 0., 3., 4.).unwrap()).unwrap();
        assert!(n.depth().iter().all(|&z| z == 2.0));
        assert_eq!(n.mask(), d.mask());
    }

    #[test]
    fn unit_diagonal_is_idempotent() {
        let d = DepthMap::new(2, 2, vec![0.3, 1.7, 2.0, 9.0], vec![true; 4]).unwrap();
        let b = BBox::new(0., 0., 0.6, 0.8).unwrap();
        let once = normalize_depth(&d, &b).unwrap();
        let twice = normalize_depth(&once, &b).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn too_few_pixels_rejected() {
        let err = DepthMap::new(2, 2, vec![1.0; 4], vec![true, true, false, false]);
        assert!(matches!(err, Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn constant_plane_centres_to_zero_depth() {
        let pc = unproject(&full_map(2, 2, 1.0), &Camera::Orthographic { scale: 1.0 }).unwrap();
        assert_eq!(pc.len(), 4);
        assert!(pc.points().iter().all(|p| p[2] == 0.0));
    }

    #[test]
    fn pinhole_principal_point_on_axis() {
        let mut depth = vec![1.0; 9];
        depth[4] = 2.5;
        let d = DepthMap::new(3, 3, depth, vec![true; 9]).unwrap();
        let cam = Camera::Pinhole {
            focal_px: 100.0,
            cx: 1.0,
            cy: 1.0,
        };
        let pc = lift_points(&d, &cam).unwrap();
        assert_eq!(pc.points()[4], [0.0, 0.0, 2.5]);
    }

    #[test]
    fn sampling_contracts() {
        let pts: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let pc = PointCloud::new(pts).unwrap();
        let perm = sample_points(&pc, 10, 4).unwrap();
        let mut xs: Vec<f64> = perm.points().iter().map(|p| p[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs, (0..10).map(|i| i as f64).collect::<Vec<_>>());

        let one = sample_points(&pc, 1, 4).unwrap();
        assert!(pc.points().contains(&one.points()[0]));

        let many = sample_points(&pc, 25, 9).unwrap();
        assert_eq!(many.len(), 25);
        assert_eq!(many, sample_points(&pc, 25, 9).unwrap());
        assert!(sample_points(&pc, 0, 1).is_err());
    }
}
