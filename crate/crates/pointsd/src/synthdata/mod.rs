//! Procedural corpus generation and persistence.
//!
//! On-disk layout:
//!
//! ```text
//! <root>/manifest.txt                      key = value, line based
//! <root>/<split>/<sample_id>/points.f32le  raw LE f32, N x 3 row-major
//! <root>/<split>/<sample_id>/view_<v>.pgm  binary PGM, 8-bit
//! <root>/<split>/<sample_id>/label.txt     category index, decimal ASCII
//! ```

pub mod render;
pub mod shapes;

pub use render::{read_pgm, render_views, stitch_images, write_pgm, RenderedImage};
pub use shapes::{generate_shape, Category, ShapeSpec, CATEGORY_NAMES};

use crate::error::{Error, Result};
use crate::geometry::{normalize_unit_sphere, PointCloud};
use crate::rng;
use rand::Rng;
use rayon::prelude::*;
use std::io::Read;
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub categories: usize,
    pub samples_per_category: usize,
    pub points: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub train_fraction: f64,
    pub jitter: f32,
    pub master_seed: u64,
}

impl DatasetConfig {
    pub fn total_samples(&self) -> usize {
        self.categories * self.samples_per_category
    }

    pub fn train_per_category(&self) -> usize {
        (self.samples_per_category as f64 * self.train_fraction).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.categories == 0 || self.categories > CATEGORY_NAMES.len() {
            return Err(Error::SynthData(format!("dataset: categories must be 1..={}", CATEGORY_NAMES.len())));
        }
        if self.samples_per_category == 0 || self.points == 0 || self.views == 0 {
            return Err(Error::SynthData("dataset: counts must be positive".into()));
        }
        let tr = self.train_per_category();
        if tr == 0 || tr >= self.samples_per_category {
            return Err(Error::SynthData(format!(
                "dataset: train fraction {} leaves an empty split",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// One generated object: points, its rendered views, and bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub category: usize,
    pub cloud: PointCloud,
    pub views: Vec<RenderedImage>,
}

/// Loaded corpus with the original config echoed from the manifest.
pub struct Corpus {
    pub config: DatasetConfig,
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> &[SampleRecord] {
        match name {
            "train" => &self.train,
            _ => &self.test,
        }
    }
}

fn sample_id(global: usize) -> String {
    format!("s{global:05}")
}

/// Generate the record for one global sample index. Deterministic in
/// `(master_seed, global index)` alone, so generation order never matters.
pub fn generate_sample(cfg: &DatasetConfig, global: usize) -> Result<SampleRecord> {
    let category = global / cfg.samples_per_category;
    let cat = Category::from_index(category)
        .ok_or_else(|| Error::SynthData(format!("category index {category} out of range")))?;
    let mut r = rng::stream(cfg.master_seed, "sample", global as u64);
    let shape_seed: u64 = r.gen();
    let spec = ShapeSpec::sample(cat, &mut r, shape_seed);
    let shape = generate_shape(&spec)?;
    let mut pts = shape.sample_points(cfg.points);
    if cfg.jitter > 0.0 {
        for p in &mut pts {
            for v in p.iter_mut() {
                *v += rng::normal(&mut r) * cfg.jitter;
            }
        }
    }
    let cloud = normalize_unit_sphere(&PointCloud::with_label(pts, category))?;
    let views = render_views(&cloud, cfg.views, cfg.height, cfg.width);
    Ok(SampleRecord { id: sample_id(global), category, cloud, views })
}

fn split_of(cfg: &DatasetConfig, global: usize) -> &'static str {
    if global % cfg.samples_per_category < cfg.train_per_category() {
        "train"
    } else {
        "test"
    }
}

/// Build and persist the corpus. Samples are generated in parallel; each is
/// written to a temp directory and renamed into place, so partial runs never
/// leave half-written records.
pub fn build_dataset(cfg: &DatasetConfig, root: &Path) -> Result<()> {
    cfg.validate()?;
    for split in ["train", "test"] {
        std::fs::create_dir_all(root.join(split)).map_err(|e| Error::io(root.display().to_string(), e))?;
    }
    (0..cfg.total_samples())
        .into_par_iter()
        .try_for_each(|global| -> Result<()> {
            let rec = generate_sample(cfg, global)?;
            write_sample(cfg, root, global, &rec)
        })?;
    write_manifest(cfg, root)
}

fn write_sample(cfg: &DatasetConfig, root: &Path, global: usize, rec: &SampleRecord) -> Result<()> {
    let split_dir = root.join(split_of(cfg, global));
    let tmp = split_dir.join(format!(".tmp-{}", rec.id));
    let final_dir = split_dir.join(&rec.id);
    if final_dir.exists() {
        std::fs::remove_dir_all(&final_dir).map_err(|e| Error::io(final_dir.display().to_string(), e))?;
    }
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;

    let mut bytes = Vec::with_capacity(rec.cloud.len() * 12);
    for p in &rec.cloud.points {
        for v in p {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let ppath = tmp.join("points.f32le");
    std::fs::write(&ppath, bytes).map_err(|e| Error::io(ppath.display().to_string(), e))?;
    for (v, img) in rec.views.iter().enumerate() {
        write_pgm(&tmp.join(format!("view_{v}.pgm")), img)?;
    }
    let lpath = tmp.join("label.txt");
    std::fs::write(&lpath, format!("{}\n", rec.category)).map_err(|e| Error::io(lpath.display().to_string(), e))?;
    std::fs::rename(&tmp, &final_dir).map_err(|e| Error::io(final_dir.display().to_string(), e))?;
    Ok(())
}

fn write_manifest(cfg: &DatasetConfig, root: &Path) -> Result<()> {
    let names: Vec<&str> = CATEGORY_NAMES[..cfg.categories].to_vec();
    let text = format!(
        "format_version = {}\ncategories = {}\nsamples_per_category = {}\npoints = {}\nviews = {}\nheight = {}\nwidth = {}\ntrain_fraction = {}\njitter = {}\nmaster_seed = {}\n",
        FORMAT_VERSION,
        names.join(","),
        cfg.samples_per_category,
        cfg.points,
        cfg.views,
        cfg.height,
        cfg.width,
        cfg.train_fraction,
        cfg.jitter,
        cfg.master_seed,
    );
    let path = root.join("manifest.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn parse_manifest(root: &Path) -> Result<DatasetConfig> {
    let path = root.join("manifest.txt");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| Error::MissingArtifact(format!("dataset manifest {}", path.display())))?;
    let mut kv = std::collections::HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::SynthData(format!("manifest: malformed line '{line}'")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| Error::SynthData(format!("manifest: missing key '{k}'")));
    let version: u32 = get("format_version")?.parse().map_err(|_| Error::SynthData("manifest: bad format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::SynthData(format!("manifest: unsupported format_version {version}")));
    }
    let categories = get("categories")?.split(',').count();
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::SynthData(format!("manifest: bad value for '{k}'")))
    };
    Ok(DatasetConfig {
        categories,
        samples_per_category: num("samples_per_category")?,
        points: num("points")?,
        views: num("views")?,
        height: num("height")?,
        width: num("width")?,
        train_fraction: get("train_fraction")?.parse().map_err(|_| Error::SynthData("manifest: bad train_fraction".into()))?,
        jitter: get("jitter")?.parse().map_err(|_| Error::SynthData("manifest: bad jitter".into()))?,
        master_seed: get("master_seed")?.parse().map_err(|_| Error::SynthData("manifest: bad master_seed".into()))?,
    })
}

fn read_sample(cfg: &DatasetConfig, dir: &Path, id: &str) -> Result<SampleRecord> {
    let ppath = dir.join("points.f32le");
    let mut bytes = Vec::new();
    std::fs::File::open(&ppath)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(ppath.display().to_string(), e))?;
    if bytes.len() != cfg.points * 12 {
        return Err(Error::SynthData(format!("{}: expected {} bytes, found {}", ppath.display(), cfg.points * 12, bytes.len())));
    }
    let mut points = Vec::with_capacity(cfg.points);
    for chunk in bytes.chunks_exact(12) {
        points.push([
            f32::from_le_bytes(chunk[0..4].try_into().unwrap()),
            f32::from_le_bytes(chunk[4..8].try_into().unwrap()),
            f32::from_le_bytes(chunk[8..12].try_into().unwrap()),
        ]);
    }
    let lpath = dir.join("label.txt");
    let label: usize = std::fs::read_to_string(&lpath)
        .map_err(|e| Error::io(lpath.display().to_string(), e))?
        .trim()
        .parse()
        .map_err(|_| Error::SynthData(format!("{}: bad label", lpath.display())))?;
    let mut views = Vec::with_capacity(cfg.views);
    for v in 0..cfg.views {
        views.push(read_pgm(&dir.join(format!("view_{v}.pgm")), v)?);
    }
    Ok(SampleRecord { id: id.to_string(), category: label, cloud: PointCloud::with_label(points, label), views })
}

/// Load a corpus previously written by [`build_dataset`].
pub fn load_dataset(root: &Path) -> Result<Corpus> {
    let cfg = parse_manifest(root)?;
    let mut splits = Vec::new();
    for split in ["train", "test"] {
        let ids: Vec<(usize, String)> = (0..cfg.total_samples())
            .filter(|&g| split_of(&cfg, g) == split)
            .map(|g| (g, sample_id(g)))
            .collect();
        let records: Vec<SampleRecord> = ids
            .into_par_iter()
            .map(|(_, id)| {
                let dir = root.join(split).join(&id);
                if !dir.exists() {
                    return Err(Error::MissingArtifact(format!("dataset sample {}", dir.display())));
                }
                read_sample(&cfg, &dir, &id)
            })
            .collect::<Result<Vec<_>>>()?;
        splits.push(records);
    }
    let test = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Corpus { config: cfg, train, test })
}

/// Directory of one sample, for tools that address records directly.
pub fn sample_dir(root: &Path, cfg: &DatasetConfig, global: usize) -> PathBuf {
    root.join(split_of(cfg, global)).join(sample_id(global))
}
