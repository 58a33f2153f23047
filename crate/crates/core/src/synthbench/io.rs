//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.csv      one record per sample
//! <dir>/dataset.json      generator config, seed, category split
//! <dir>/materials.txt     material vocabulary
//! <dir>/depth/<id>.depth  ASCII depth grid ("P2D", width height, rows)
//! <dir>/depth/<id>.rle    run-length mask, one line per row
//! ```
//!
//! Reals are written in shortest round-trip form, so a write/read cycle is exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, GeneratorConfig, Sample, Shape, ShapeSpec, Split, SplitManifest};
use crate::error::{Error, Result};
use crate::geometry::{Camera, DepthMap};
use crate::semantics::MaterialVocab;

pub const MANIFEST_FILE: &str = "manifest.csv";
const META_FILE: &str = "dataset.json";
const VOCAB_FILE: &str = "materials.txt";
const DEPTH_MAGIC: &str = "P2D";

const COLUMNS: [&str; 12] = [
    "id",
    "split",
    "category",
    "shape",
    "fill",
    "material",
    "material_text",
    "rho",
    "volume",
    "mass",
    "depth_path",
    "appearance",
];

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    seed: u64,
    config: GeneratorConfig,
    manifest: SplitManifest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    camera: Option<Camera>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn shape_to_string(s: &Shape) -> String {
    match *s {
        Shape::Box { w, h, d } => format!("box:{w};{h};{d}"),
        Shape::Cylinder { r, h } => format!("cylinder:{r};{h}"),
        Shape::Sphere { r } => format!("sphere:{r}"),
    }
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad {what} value '{s}'")))
}

fn shape_from_str(s: &str) -> Result<Shape> {
    let (kind, rest) = s
        .split_once(':')
        .ok_or_else(|| Error::Format(format!("bad shape '{s}'")))?;
    let v: Vec<f64> = rest
        .split(';')
        .map(|x| parse_f64(x, "shape"))
        .collect::<Result<_>>()?;
    match (kind, v.as_slice()) {
        ("box", [w, h, d]) => Ok(Shape::Box { w: *w, h: *h, d: *d }),
        ("cylinder", [r, h]) => Ok(Shape::Cylinder { r: *r, h: *h }),
        ("sphere", [r]) => Ok(Shape::Sphere { r: *r }),
        _ => Err(Error::Format(format!("bad shape '{s}'"))),
    }
}

/// Writes a depth grid and its run-length mask sidecar (`.rle`).
pub fn write_depth_map(path: &Path, d: &DepthMap) -> Result<()> {
    let mut grid = format!("{DEPTH_MAGIC}\n{} {}\n", d.width(), d.height());
    let mut rle = format!("{} {}\n", d.width(), d.height());
    for v in 0..d.height() {
        let row = &d.depth()[v * d.width()..(v + 1) * d.width()];
        let mask = &d.mask()[v * d.width()..(v + 1) * d.width()];
        let cells: Vec<String> = row
            .iter()
            .zip(mask)
            .map(|(z, &m)| if m { z.to_string() } else { "0".to_string() })
            .collect();
        grid.push_str(&cells.join(" "));
        grid.push('\n');
        // Alternating run lengths, starting with a (possibly empty) background run.
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for &m in mask {
            if m == current {
                len += 1;
            } else {
                runs.push(len.to_string());
                current = m;
                len = 1;
            }
        }
        runs.push(len.to_string());
        rle.push_str(&runs.join(" "));
        rle.push('\n');
    }
    write_file(path, &grid)?;
    write_file(&path.with_extension("rle"), &rle)
}

fn parse_dims(line: Option<&str>, path: &Path) -> Result<(usize, usize)> {
    let bad = || Error::Format(format!("{}: bad size line", path.display()));
    let mut it = line.ok_or_else(bad)?.split_whitespace();
    let w = it.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
    let h = it.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
    Ok((w, h))
}

pub fn read_depth_map(path: &Path) -> Result<DepthMap> {
    let grid = read_file(path)?;
    let mut lines = grid.lines();
    if lines.next().map(str::trim) != Some(DEPTH_MAGIC) {
        return Err(Error::Format(format!("{}: missing {DEPTH_MAGIC} header", path.display())));
    }
    let (w, h) = parse_dims(lines.next(), path)?;
    let depth: Vec<f64> = lines
        .flat_map(str::split_whitespace)
        .map(|x| parse_f64(x, "depth"))
        .collect::<Result<_>>()?;

    let rle_path = path.with_extension("rle");
    let rle = read_file(&rle_path)?;
    let mut lines = rle.lines();
    if parse_dims(lines.next(), &rle_path)? != (w, h) {
        return Err(Error::Format(format!("{}: size mismatch", rle_path.display())));
    }
    let mut mask = Vec::with_capacity(w * h);
    for line in lines.take(h) {
        let mut value = false;
        let start = mask.len();
        for run in line.split_whitespace() {
            let n: usize = run
                .parse()
                .map_err(|_| Error::Format(format!("{}: bad run '{run}'", rle_path.display())))?;
            mask.extend(std::iter::repeat_n(value, n));
            value = !value;
        }
        if mask.len() - start != w {
            return Err(Error::Format(format!("{}: row width mismatch", rle_path.display())));
        }
    }
    DepthMap::new(w, h, depth, mask)
}

fn depth_rel_path(id: &str) -> PathBuf {
    Path::new("depth").join(format!("{id}.depth"))
}

/// Writes the full dataset under `dir` (created if needed).
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("depth")).map_err(|e| Error::io(dir, e))?;
    let meta = DatasetMeta {
        seed: ds.seed,
        config: ds.config.clone(),
        manifest: ds.manifest.clone(),
        camera: ds.camera,
    };
    write_file(&dir.join(META_FILE), &serde_json::to_string_pretty(&meta)?)?;
    write_file(&dir.join(VOCAB_FILE), &ds.vocab.to_text())?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&manifest_path)?;
    w.write_record(COLUMNS)?;
    for s in &ds.samples {
        let rel = depth_rel_path(&s.id);
        write_depth_map(&dir.join(&rel), &s.depth)?;
        let appearance: Vec<String> = s.appearance.iter().map(f64::to_string).collect();
        w.write_record([
            s.id.clone(),
            s.split.as_str().to_string(),
            s.category.clone(),
            shape_to_string(&s.shape.shape),
            s.shape.fill_ratio.to_string(),
            ds.vocab.name(s.material).to_string(),
            s.material_text.clone(),
            s.true_density.to_string(),
            s.true_volume.to_string(),
            s.mass.to_string(),
            rel.to_string_lossy().replace('\\', "/"),
            appearance.join(" "),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_str(&read_file(&dir.join(META_FILE))?)?;
    let vocab = MaterialVocab::load(&dir.join(VOCAB_FILE))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut r = csv::Reader::from_path(&manifest_path)?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(COLUMNS) {
        return Err(Error::Format(format!(
            "{}: unexpected columns {:?}",
            manifest_path.display(),
            headers
        )));
    }
    let mut samples = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let material = vocab
            .id_of(f(5))
            .ok_or_else(|| Error::Format(format!("unknown material '{}'", f(5))))?;
        let appearance = f(11)
            .split_whitespace()
            .map(|x| parse_f64(x, "appearance"))
            .collect::<Result<_>>()?;
        samples.push(Sample {
            id: f(0).to_string(),
            split: Split::parse(f(1))?,
            category: f(2).to_string(),
            shape: ShapeSpec::new(shape_from_str(f(3))?, parse_f64(f(4), "fill")?)?,
            material,
            material_text: f(6).to_string(),
            true_density: parse_f64(f(7), "rho")?,
            true_volume: parse_f64(f(8), "volume")?,
            mass: parse_f64(f(9), "mass")?,
            depth: read_depth_map(&dir.join(f(10)))?,
            appearance,
        });
    }
    Ok(Dataset {
        config: meta.config,
        seed: meta.seed,
        vocab,
        samples,
        manifest: meta.manifest,
        camera: meta.camera,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::generate_dataset;

    #[test]
    fn dataset_round_trips_exactly() {
        let cfg = GeneratorConfig {
            n_train: 12,
            n_test: 8,
            ..GeneratorConfig::default()
        };
        let ds = generate_dataset(&cfg, &MaterialVocab::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn rle_handles_leading_object_pixels() {
        let d = DepthMap::new(3, 2, vec![1.0, 2.0, 0.0, 0.0, 0.5, 0.5], vec![
            true, true, false, false, true, true,
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.depth");
        write_depth_map(&p, &d).unwrap();
        assert_eq!(fs::read_to_string(p.with_extension("rle")).unwrap(), "3 2\n0 2 1\n1 2\n");
        assert_eq!(read_depth_map(&p).unwrap(), d);
    }

    #[test]
    fn shape_strings() {
        for s in [
            Shape::Box { w: 0.1, h: 0.25, d: 1.0 / 3.0 },
            Shape::Cylinder { r: 0.2, h: 0.3 },
            Shape::Sphere { r: 0.05 },
        ] {
            assert_eq!(shape_from_str(&shape_to_string(&s)).unwrap(), s);
        }
        assert!(shape_from_str("cone:1").is_err());
    }
}
