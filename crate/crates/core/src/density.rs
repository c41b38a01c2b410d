//! Ground-truth density maps from point annotations, and the moments of the
//! density map when annotations carry Gaussian placement error.
//!
//! Annotation points are `(x, y)` with `x` along columns and `y` along rows.
//! Pixel `(row, col)` is evaluated at its integer center `(col, row)`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotations {
    points: Vec<[f64; 2]>,
    height: usize,
    width: usize,
}

impl PointAnnotations {
    pub fn new(points: Vec<[f64; 2]>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image size must be positive".into()));
        }
        for &[x, y] in &points {
            let inside = x.is_finite()
                && y.is_finite()
                && x >= 0.0
                && y >= 0.0
                && x < width as f64
                && y < height as f64;
            if !inside {
                return Err(Error::OutOfBounds {
                    x,
                    y,
                    width,
                    height,
                });
            }
        }
        Ok(Self {
            points,
            height,
            width,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(Vec::new(), height, width)
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Union with another annotation set on the same image.
    pub fn merged(&self, other: &Self) -> Result<Self> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape("annotation sets cover different images".into()));
        }
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        Self::new(points, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Generation variance β in pixels².
    pub beta: f64,
}

impl DensityMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Half-width of the truncation box for variance `beta`.
pub fn support_radius(beta: f64) -> usize {
    ((3.0 * beta.sqrt()).ceil() as usize).max(1)
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")))
    }
}

/// Adds N(p; point, βI) for every pixel inside the box of half-width
/// `radius` around each point. Points may lie outside the image.
fn splat(values: &mut [f64], height: usize, width: usize, points: &[[f64; 2]], beta: f64) {
    let reach = support_radius(beta) as f64;
    let norm = 1.0 / (2.0 * PI * beta);
    let inv = 1.0 / (2.0 * beta);
    for &[x, y] in points {
        let c0 = (x - reach).ceil().max(0.0);
        let c1 = (x + reach).floor().min(width as f64 - 1.0);
        let r0 = (y - reach).ceil().max(0.0);
        let r1 = (y + reach).floor().min(height as f64 - 1.0);
        if c0 > c1 || r0 > r1 {
            continue;
        }
        let (c0, c1, r0, r1) = (c0 as usize, c1 as usize, r0 as usize, r1 as usize);
        for row in r0..=r1 {
            let dy = row as f64 - y;
            let fy = norm * (-dy * dy * inv).exp();
            let line = &mut values[row * width..(row + 1) * width];
            for (col, v) in line.iter_mut().enumerate().take(c1 + 1).skip(c0) {
                let dx = col as f64 - x;
                *v += fy * (-dx * dx * inv).exp();
            }
        }
    }
}

/// y(p) = Σ_i N(p; D_i, βI), truncated per point by the 3σ box.
pub fn generate_density_map(ann: &PointAnnotations, beta: f64) -> Result<DensityMap> {
    check_beta(beta)?;
    let mut values = vec![0.0; ann.height * ann.width];
    splat(&mut values, ann.height, ann.width, &ann.points, beta);
    Ok(DensityMap {
        values,
        height: ann.height,
        width: ann.width,
        beta,
    })
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Mass of the continuous kernels that falls outside the pixel cells of the
/// image, summed over points.
pub fn boundary_mass_loss(ann: &PointAnnotations, beta: f64) -> f64 {
    let s = beta.sqrt();
    let inside = |c: f64, extent: usize| {
        normal_cdf((extent as f64 - 0.5 - c) / s) - normal_cdf((-0.5 - c) / s)
    };
    ann.points
        .iter()
        .map(|&[x, y]| 1.0 - inside(x, ann.width) * inside(y, ann.height))
        .sum()
}

/// How annotation points are displaced by [`perturb_annotations_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Displacement {
    /// Uniform direction, magnitude uniform in `[0, radius]`.
    #[default]
    Euclidean,
    /// Each axis independently uniform in `[-radius, radius]`.
    PerAxis,
}

pub fn perturb_annotations(
    ann: &PointAnnotations,
    radius: f64,
    seed: u64,
) -> Result<PointAnnotations> {
    perturb_annotations_with(ann, radius, Displacement::Euclidean, seed)
}

/// Moves every point by an i.i.d. random displacement bounded by `radius`
/// and clamps the result into the image.
pub fn perturb_annotations_with(
    ann: &PointAnnotations,
    radius: f64,
    model: Displacement,
    seed: u64,
) -> Result<PointAnnotations> {
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "displacement radius must be non-negative, got {radius}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_x = (ann.width as f64).next_down();
    let max_y = (ann.height as f64).next_down();
    let points = ann
        .points
        .iter()
        .map(|&[x, y]| {
            let (dx, dy) = match model {
                Displacement::Euclidean => {
                    let theta = 2.0 * PI * rng.random::<f64>();
                    let m = radius * rng.random::<f64>();
                    (m * theta.cos(), m * theta.sin())
                }
                Displacement::PerAxis => (
                    radius * (2.0 * rng.random::<f64>() - 1.0),
                    radius * (2.0 * rng.random::<f64>() - 1.0),
                ),
            };
            [(x + dx).clamp(0.0, max_x), (y + dy).clamp(0.0, max_y)]
        })
        .collect();
    Ok(PointAnnotations {
        points,
        height: ann.height,
        width: ann.width,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseMoments {
    pub mean_map: Vec<f64>,
    pub var_map: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub beta: f64,
    /// 2β, the normalizer scale of the squared kernel.
    pub gamma: f64,
    /// Variance of the squared-kernel Gaussian, β/2 + ε².
    pub delta: f64,
    pub eps_std: f64,
}

impl NoiseMoments {
    fn zeros(height: usize, width: usize, beta: f64, eps_std: f64) -> Self {
        Self {
            mean_map: vec![0.0; height * width],
            var_map: vec![0.0; height * width],
            height,
            width,
            beta,
            gamma: 2.0 * beta,
            delta: 0.5 * beta + eps_std * eps_std,
            eps_std,
        }
    }
}

/// E[φ_β(a − e)^p · 1{|a − e| ≤ reach}] for e ~ N(0, s²), p ∈ {1, 2}, in 1D.
///
/// φ_β(a − e)·φ_{s²}(e) = φ_{β+s²}(a)·φ_v(e − m), so the truncated expectation
/// is the untruncated one times a Gaussian window probability. The squared
/// kernel is (4πβ)^{-1/2}·φ_{β/2}.
fn axis_moment(a: f64, beta: f64, s2: f64, reach: f64, squared: bool) -> f64 {
    let (var, scale) = if squared {
        (0.5 * beta, 1.0 / (2.0 * (PI * beta).sqrt()))
    } else {
        (beta, 1.0)
    };
    let total = var + s2;
    let base = (-(a * a) / (2.0 * total)).exp() / (2.0 * PI * total).sqrt();
    let m = a * s2 / total;
    let sd = (var * s2 / total).sqrt();
    let window = normal_cdf((a + reach - m) / sd) - normal_cdf((a - reach - m) / sd);
    scale * base * window
}

/// Exact per-pixel mean and variance of `generate_density_map` when each
/// annotation is displaced by independent N(0, eps_std²·I) error.
///
/// The mean is the kernel convolved with the error law, i.e. a Gaussian of
/// variance β + ε², times the probability that the displaced truncation box
/// still covers the pixel. The variance uses the squared kernel, a Gaussian
/// of variance δ = β/2 + ε² scaled by 1/(2πγ), minus the squared mean.
pub fn analytic_noise_moments(
    ann: &PointAnnotations,
    beta: f64,
    eps_std: f64,
) -> Result<NoiseMoments> {
    check_beta(beta)?;
    if !(eps_std.is_finite() && eps_std >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps_std must be non-negative, got {eps_std}"
        )));
    }
    let (h, w) = (ann.height, ann.width);
    let mut out = NoiseMoments::zeros(h, w, beta, eps_std);
    if eps_std == 0.0 {
        out.mean_map = generate_density_map(ann, beta)?.values;
        return Ok(out);
    }
    let s2 = eps_std * eps_std;
    let reach = support_radius(beta) as f64;
    let mut mx = vec![0.0; w];
    let mut my = vec![0.0; h];
    let mut qx = vec![0.0; w];
    let mut qy = vec![0.0; h];
    for &[x, y] in &ann.points {
        for col in 0..w {
            let a = col as f64 - x;
            mx[col] = axis_moment(a, beta, s2, reach, false);
            qx[col] = axis_moment(a, beta, s2, reach, true);
        }
        for row in 0..h {
            let a = row as f64 - y;
            my[row] = axis_moment(a, beta, s2, reach, false);
            qy[row] = axis_moment(a, beta, s2, reach, true);
        }
        for row in 0..h {
            for col in 0..w {
                let mean = my[row] * mx[col];
                let second = qy[row] * qx[col];
                out.mean_map[row * w + col] += mean;
                out.var_map[row * w + col] += second - mean * mean;
            }
        }
    }
    for v in &mut out.var_map {
        *v = v.max(0.0);
    }
    Ok(out)
}

/// Empirical mean and (unbiased) variance of the density map over `trials`
/// regenerations with N(0, eps_std²·I) annotation error.
pub fn monte_carlo_noise_moments(
    ann: &PointAnnotations,
    beta: f64,
    eps_std: f64,
    trials: usize,
    seed: u64,
) -> Result<NoiseMoments> {
    check_beta(beta)?;
    if trials < 2 {
        return Err(Error::InvalidArgument("need at least two trials".into()));
    }
    if !(eps_std.is_finite() && eps_std >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps_std must be non-negative, got {eps_std}"
        )));
    }
    let (h, w) = (ann.height, ann.width);
    let mut out = NoiseMoments::zeros(h, w, beta, eps_std);
    let mut m2 = vec![0.0; h * w];
    let mut sample = vec![0.0; h * w];
    let mut moved = ann.points.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, eps_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for t in 1..=trials {
        for (dst, src) in moved.iter_mut().zip(&ann.points) {
            dst[0] = src[0] + normal.sample(&mut rng);
            dst[1] = src[1] + normal.sample(&mut rng);
        }
        sample.iter_mut().for_each(|v| *v = 0.0);
        splat(&mut sample, h, w, &moved, beta);
        let n = t as f64;
        for ((mean, acc), &x) in out.mean_map.iter_mut().zip(&mut m2).zip(&sample) {
            let delta = x - *mean;
            *mean += delta / n;
            *acc += delta * (x - *mean);
        }
    }
    let denom = (trials - 1) as f64;
    for (v, acc) in out.var_map.iter_mut().zip(&m2) {
        *v = acc / denom;
    }
    Ok(out)
}
