//! Counting samples, synthetic dot-image generation, and the on-disk dataset
//! layout.
//!
//! A dataset directory holds `images/<id>.dmap-input`, `density/<id>.dmap`,
//! `annotations.csv` and `dataset.json`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::density::{generate_density_map, DensityMap, PointAnnotations};
use crate::error::{Error, Result};
use crate::gconv::FeatureMap;
use crate::io::{self, fmt_float};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// 1×H×W image.
    pub image: FeatureMap,
    pub annotations: PointAnnotations,
    /// Training target generated from `annotations`.
    pub density: DensityMap,
}

impl Sample {
    pub fn count(&self) -> f64 {
        self.annotations.len() as f64
    }

    /// Same image with new annotations and a regenerated target.
    pub fn with_annotations(&self, annotations: PointAnnotations) -> Result<Self> {
        let density = generate_density_map(&annotations, self.density.beta)?;
        Ok(Self {
            id: self.id.clone(),
            image: self.image.clone(),
            annotations,
            density,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub beta: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean_count(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(Sample::count).sum::<f64>() / self.samples.len() as f64
    }
}

/// Spatial arrangement of synthetic objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// Uniform over the image, `margin` pixels from every edge.
    Uniform { margin: f64 },
    /// Sites of a square lattice with the given period, each jittered
    /// uniformly by up to `jitter` per axis.
    Rows { period: f64, jitter: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub beta: f64,
    /// Standard deviation of each rendered object blob.
    pub object_sigma: f64,
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    /// Standard deviation of additive background noise.
    pub noise_std: f64,
    pub layout: Layout,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            count_min: 5,
            count_max: 80,
            beta: 4.0,
            object_sigma: 1.5,
            amplitude_min: 0.8,
            amplitude_max: 1.2,
            noise_std: 0.05,
            layout: Layout::Uniform { margin: 2.0 },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive");
        }
        if self.count_min > self.count_max {
            return bad("count_min exceeds count_max");
        }
        if !(self.beta > 0.0 && self.object_sigma > 0.0) {
            return bad("beta and object_sigma must be positive");
        }
        if !(self.amplitude_min <= self.amplitude_max && self.noise_std >= 0.0) {
            return bad("amplitude range or noise level invalid");
        }
        match self.layout {
            Layout::Uniform { margin } => {
                if !(margin >= 0.0 && 2.0 * margin < self.height.min(self.width) as f64) {
                    return bad("margin leaves no room for objects");
                }
            }
            Layout::Rows { period, jitter } => {
                if !(period >= 1.0 && jitter >= 0.0 && jitter < period / 2.0) {
                    return bad("rows layout needs period ≥ 1 and jitter < period/2");
                }
                if self.count_max > self.lattice_sites(period).len() {
                    return bad("count_max exceeds the number of lattice sites");
                }
            }
        }
        Ok(())
    }

    fn lattice_sites(&self, period: f64) -> Vec<[f64; 2]> {
        let mut sites = Vec::new();
        let mut y = period / 2.0;
        while y < self.height as f64 {
            let mut x = period / 2.0;
            while x < self.width as f64 {
                sites.push([x, y]);
                x += period;
            }
            y += period;
        }
        sites
    }
}

/// Rounds to the precision the annotation CSV stores, so reloaded datasets
/// are identical to generated ones.
fn csv_exact(v: f64) -> f64 {
    fmt_float(v).parse().expect("formatted float parses")
}

fn sample_points(cfg: &SynthConfig, count: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let limit = |v: f64, n: f64| v.clamp(0.0, n.next_down());
    match cfg.layout {
        Layout::Uniform { margin } => (0..count)
            .map(|_| {
                let x = rng.random_range(margin..w - margin);
                let y = rng.random_range(margin..h - margin);
                [csv_exact(limit(x, w)), csv_exact(limit(y, h))]
            })
            .collect(),
        Layout::Rows { period, jitter } => {
            let mut sites = cfg.lattice_sites(period);
            for i in (1..sites.len()).rev() {
                sites.swap(i, rng.random_range(0..=i));
            }
            sites
                .into_iter()
                .take(count)
                .map(|[x, y]| {
                    let jx = if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
                    let jy = if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
                    [csv_exact(limit(x + jx, w)), csv_exact(limit(y + jy, h))]
                })
                .collect()
        }
    }
}

/// Renders Gaussian blobs at the points plus background noise; values are
/// rounded to f32 so the image survives the binary dump unchanged.
fn render(cfg: &SynthConfig, points: &[[f64; 2]], rng: &mut ChaCha8Rng) -> Result<FeatureMap> {
    let (h, w) = (cfg.height, cfg.width);
    let mut img = vec![0.0; h * w];
    let reach = (4.0 * cfg.object_sigma).ceil();
    let inv = 1.0 / (2.0 * cfg.object_sigma * cfg.object_sigma);
    for &[x, y] in points {
        let amp = if cfg.amplitude_max > cfg.amplitude_min {
            rng.random_range(cfg.amplitude_min..cfg.amplitude_max)
        } else {
            cfg.amplitude_min
        };
        let r0 = (y - reach).ceil().max(0.0) as usize;
        let r1 = ((y + reach).floor() as usize).min(h - 1);
        let c0 = (x - reach).ceil().max(0.0) as usize;
        let c1 = ((x + reach).floor() as usize).min(w - 1);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let d2 = (row as f64 - y).powi(2) + (col as f64 - x).powi(2);
                img[row * w + col] += amp * (-d2 * inv).exp();
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for v in img.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    for v in img.iter_mut() {
        *v = *v as f32 as f64;
    }
    FeatureMap::new(1, h, w, img)
}

/// `n` samples, deterministic in `seed`; ids are `{prefix}{index:04}`.
pub fn generate_dataset(cfg: &SynthConfig, n: usize, seed: u64, prefix: &str) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let count = rng.random_range(cfg.count_min..=cfg.count_max);
        let points = sample_points(cfg, count, &mut rng);
        let image = render(cfg, &points, &mut rng)?;
        let annotations = PointAnnotations::new(points, cfg.height, cfg.width)?;
        let density = generate_density_map(&annotations, cfg.beta)?;
        samples.push(Sample {
            id: format!("{prefix}{i:04}"),
            image,
            annotations,
            density,
        });
    }
    Ok(Dataset {
        samples,
        beta: cfg.beta,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    height: usize,
    width: usize,
    beta: f64,
    ids: Vec<String>,
}

/// Writes the dataset layout into `dir`, creating it if needed. Returns
/// the written file paths relative to `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<Vec<String>> {
    let first = ds
        .samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot save an empty dataset".into()))?;
    let (h, w) = (first.image.height(), first.image.width());
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("density"))?;
    let mut written = Vec::new();
    let mut groups = BTreeMap::new();
    for s in &ds.samples {
        if s.image.shape() != (1, h, w) {
            return Err(Error::Shape(format!("sample {} has a different size", s.id)));
        }
        let img = format!("images/{}.dmap-input", s.id);
        io::write_dmap(&dir.join(&img), h, w, s.image.data())?;
        let den = format!("density/{}.dmap", s.id);
        io::write_dmap(&dir.join(&den), h, w, &s.density.values)?;
        written.push(img);
        written.push(den);
        groups.insert(s.id.clone(), s.annotations.points().to_vec());
    }
    io::write_annotations(&dir.join("annotations.csv"), &groups)?;
    written.push("annotations.csv".into());
    let meta = DatasetMeta {
        height: h,
        width: w,
        beta: ds.beta,
        ids: ds.samples.iter().map(|s| s.id.clone()).collect(),
    };
    std::fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&meta)?)?;
    written.push("dataset.json".into());
    Ok(written)
}

/// Reads a dataset written by [`save_dataset`]; targets are regenerated from
/// the annotations.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("dataset.json"))?)?;
    let groups = io::read_annotations(&dir.join("annotations.csv"))?;
    let mut samples = Vec::with_capacity(meta.ids.len());
    for id in &meta.ids {
        let (h, w, values) = io::read_dmap(&dir.join(format!("images/{id}.dmap-input")))?;
        if (h, w) != (meta.height, meta.width) {
            return Err(Error::Format(format!("image {id} is {h}×{w}")));
        }
        let points = groups.get(id).cloned().unwrap_or_default();
        let annotations = PointAnnotations::new(points, h, w)?;
        let density = generate_density_map(&annotations, meta.beta)?;
        samples.push(Sample {
            id: id.clone(),
            image: FeatureMap::new(1, h, w, values)?,
            annotations,
            density,
        });
    }
    Ok(Dataset {
        samples,
        beta: meta.beta,
    })
}
