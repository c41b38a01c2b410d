//! Discrete 2D Gaussian kernels.
//!
//! Grids are indexed `[row][col]` with axis 0 running down the rows and
//! axis 1 across the columns. Offsets, means and covariances all use the
//! same (axis 0, axis 1) order. Kernels are point-sampled from the analytic
//! density and never renormalized, so truncation mass loss is visible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest standard deviation a sampled or trained kernel may reach.
pub const SIGMA_FLOOR: f64 = 0.05;

/// Symmetric 2×2 covariance in pixels².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Covariance2 {
    pub xx: f64,
    pub yy: f64,
    pub xy: f64,
}

impl Covariance2 {
    pub fn new(xx: f64, yy: f64, xy: f64) -> Result<Self> {
        let cov = Self { xx, yy, xy };
        cov.validate()?;
        Ok(cov)
    }

    pub fn isotropic(variance: f64) -> Result<Self> {
        Self::new(variance, variance, 0.0)
    }

    /// Axis-aligned covariance from per-axis standard deviations.
    pub fn from_std(sigma0: f64, sigma1: f64) -> Result<Self> {
        Self::new(sigma0 * sigma0, sigma1 * sigma1, 0.0)
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn is_spd(&self) -> bool {
        self.xx.is_finite()
            && self.yy.is_finite()
            && self.xy.is_finite()
            && self.xx > 0.0
            && self.yy > 0.0
            && self.det() > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_spd() {
            Ok(())
        } else {
            Err(Error::InvalidCovariance(format!(
                "xx={}, yy={}, xy={} is not symmetric positive-definite",
                self.xx, self.yy, self.xy
            )))
        }
    }

    pub fn max_std(&self) -> f64 {
        self.xx.max(self.yy).sqrt()
    }

    /// Per-axis standard deviations (ignores the off-diagonal term).
    pub fn stds(&self) -> [f64; 2] {
        [self.xx.sqrt(), self.yy.sqrt()]
    }

    /// Evaluates N(offset; 0, Σ).
    pub fn density(&self, offset: [f64; 2]) -> f64 {
        let det = self.det();
        let [d0, d1] = offset;
        let q = if self.xy == 0.0 {
            d0 * d0 / self.xx + d1 * d1 / self.yy
        } else {
            (self.yy * d0 * d0 - 2.0 * self.xy * d0 * d1 + self.xx * d1 * d1) / det
        };
        (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
    }
}

/// 3σ support rule: `max(1, ceil(3·σ_max))`.
pub fn auto_support_radius(cov: &Covariance2) -> usize {
    ((3.0 * cov.max_std()).ceil() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    /// Offset of the kernel center in pixels.
    pub mean: [f64; 2],
    pub cov: Covariance2,
    /// Half-width of the truncation box around the mean.
    pub support_radius: usize,
}

impl KernelSpec {
    pub fn new(mean: [f64; 2], cov: Covariance2, support_radius: usize) -> Self {
        Self {
            mean,
            cov,
            support_radius,
        }
    }

    pub fn centered(cov: Covariance2, support_radius: usize) -> Self {
        Self::new([0.0, 0.0], cov, support_radius)
    }

    pub fn with_auto_support(mean: [f64; 2], cov: Covariance2) -> Self {
        Self::new(mean, cov, auto_support_radius(&cov))
    }

    /// Half-width of the grid the kernel is materialized on.
    pub fn grid_radius(&self) -> usize {
        let reach = self.mean[0].abs().max(self.mean[1].abs()).ceil() as usize;
        self.support_radius + reach
    }
}

/// A square grid of weights centered on offset (0, 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteKernel {
    radius: usize,
    weights: Vec<f64>,
}

impl DiscreteKernel {
    pub fn from_grid(radius: usize, weights: Vec<f64>) -> Result<Self> {
        let side = 2 * radius + 1;
        if weights.len() != side * side {
            return Err(Error::Shape(format!(
                "kernel grid of radius {radius} needs {} weights, got {}",
                side * side,
                weights.len()
            )));
        }
        Ok(Self { radius, weights })
    }

    pub fn zeros(radius: usize) -> Self {
        let side = 2 * radius + 1;
        Self {
            radius,
            weights: vec![0.0; side * side],
        }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Index pair of the (0, 0) offset.
    pub fn origin(&self) -> (usize, usize) {
        (self.radius, self.radius)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.side() + j]
    }

    /// Weight at a signed offset, zero outside the grid.
    pub fn at_offset(&self, d0: isize, d1: isize) -> f64 {
        let r = self.radius as isize;
        if d0.abs() > r || d1.abs() > r {
            return 0.0;
        }
        self.get((d0 + r) as usize, (d1 + r) as usize)
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Copies the kernel onto a larger grid, keeping the origin fixed.
    pub fn padded_to(&self, radius: usize) -> Result<Self> {
        if radius < self.radius {
            return Err(Error::Shape(format!(
                "cannot shrink a radius-{} kernel to radius {radius}",
                self.radius
            )));
        }
        let mut out = Self::zeros(radius);
        let pad = radius - self.radius;
        let side = out.side();
        for i in 0..self.side() {
            for j in 0..self.side() {
                out.weights[(i + pad) * side + j + pad] = self.get(i, j);
            }
        }
        Ok(out)
    }
}

/// Point-samples N(x; μ, Σ) on the integer grid.
///
/// The grid is centered on the origin and wide enough to hold the box of
/// half-width `support_radius` around the mean; weights outside that box are
/// zero. With an integer mean this is exactly the zero-mean kernel
/// translated by the mean.
pub fn make_gaussian_kernel(spec: &KernelSpec) -> Result<DiscreteKernel> {
    spec.cov.validate()?;
    if spec.support_radius < 1 {
        return Err(Error::InvalidArgument(
            "support radius must be at least 1".into(),
        ));
    }
    if !spec.mean.iter().all(|m| m.is_finite()) {
        return Err(Error::InvalidArgument("kernel mean must be finite".into()));
    }
    let radius = spec.grid_radius();
    let side = 2 * radius + 1;
    let box_half = spec.support_radius as f64;
    let mut weights = vec![0.0; side * side];
    for i in 0..side {
        let d0 = (i as f64 - radius as f64) - spec.mean[0];
        if d0.abs() > box_half {
            continue;
        }
        for j in 0..side {
            let d1 = (j as f64 - radius as f64) - spec.mean[1];
            if d1.abs() > box_half {
                continue;
            }
            weights[i * side + j] = spec.cov.density([d0, d1]);
        }
    }
    Ok(DiscreteKernel { radius, weights })
}

/// Sampled population of zero-mean kernels sharing one grid size.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    kernels: Vec<DiscreteKernel>,
    specs: Vec<KernelSpec>,
}

impl KernelBank {
    pub fn new(specs: Vec<KernelSpec>) -> Result<Self> {
        let first = specs.first().ok_or(Error::EmptyBank)?;
        let radius = first.grid_radius();
        let mut kernels = Vec::with_capacity(specs.len());
        for spec in &specs {
            let kernel = make_gaussian_kernel(spec)?;
            if kernel.radius() != radius {
                return Err(Error::Shape(format!(
                    "bank grids must share radius {radius}, got {}",
                    kernel.radius()
                )));
            }
            kernels.push(kernel);
        }
        Ok(Self { kernels, specs })
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn radius(&self) -> usize {
        self.kernels[0].radius()
    }

    pub fn kernels(&self) -> &[DiscreteKernel] {
        &self.kernels
    }

    pub fn specs(&self) -> &[KernelSpec] {
        &self.specs
    }
}

/// Samples `count` zero-mean, axis-aligned kernels whose per-axis standard
/// deviation is `base_sigma + u`, with `u` uniform in `perturb` and the result
/// floored at [`SIGMA_FLOOR`].
///
/// When `support_radius` is `None` every kernel uses the 3σ rule evaluated at
/// the largest reachable σ, so the grid size does not depend on the draw.
pub fn sample_kernel_bank(
    count: usize,
    base_sigma: f64,
    perturb: (f64, f64),
    support_radius: Option<usize>,
    seed: u64,
) -> Result<KernelBank> {
    if count == 0 {
        return Err(Error::EmptyBank);
    }
    let (lo, hi) = perturb;
    if !(base_sigma.is_finite() && lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::InvalidArgument(format!(
            "bad sampling range: base {base_sigma}, perturbation [{lo}, {hi}]"
        )));
    }
    if base_sigma + lo <= SIGMA_FLOOR {
        return Err(Error::InvalidArgument(format!(
            "base sigma {base_sigma} plus lower perturbation {lo} must exceed {SIGMA_FLOOR}"
        )));
    }
    let radius = match support_radius {
        Some(0) => {
            return Err(Error::InvalidArgument(
                "support radius must be at least 1".into(),
            ))
        }
        Some(r) => r,
        None => ((3.0 * (base_sigma + hi)).ceil() as usize).max(1),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        let u0: f64 = rng.random();
        let u1: f64 = rng.random();
        let s0 = (base_sigma + lo + (hi - lo) * u0).max(SIGMA_FLOOR);
        let s1 = (base_sigma + lo + (hi - lo) * u1).max(SIGMA_FLOOR);
        specs.push(KernelSpec::centered(Covariance2::from_std(s0, s1)?, radius));
    }
    KernelBank::new(specs)
}

/// Frobenius inner product of two equally sized grids.
pub fn kernel_inner_product(a: &DiscreteKernel, b: &DiscreteKernel) -> Result<f64> {
    if a.radius() != b.radius() {
        return Err(Error::Shape(format!(
            "inner product of radius-{} and radius-{} grids",
            a.radius(),
            b.radius()
        )));
    }
    Ok(a.weights.iter().zip(&b.weights).map(|(x, y)| x * y).sum())
}
