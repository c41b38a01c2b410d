use super::ops::conv_accumulate;
use super::{check_mix, mix_channels, FeatureMap, GaussConvLayer};
use crate::error::{Error, Result};
use crate::kernels::{make_gaussian_kernel, DiscreteKernel, KernelSpec};

/// Size limits for the slow reference paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleGuard {
    pub max_kernels: usize,
    pub max_side: usize,
}

impl OracleGuard {
    pub const MASSIVE: Self = Self {
        max_kernels: 64,
        max_side: 64,
    };
    pub const LRA: Self = Self {
        max_kernels: 32,
        max_side: 64,
    };

    fn check(&self, what: &str, kernels: usize, h: usize, w: usize) -> Result<()> {
        if kernels > self.max_kernels || h > self.max_side || w > self.max_side {
            return Err(Error::OracleSize(format!(
                "{what}: {kernels} kernels on {h}×{w} exceeds {} kernels on {}×{}",
                self.max_kernels, self.max_side, self.max_side
            )));
        }
        Ok(())
    }
}

/// How the LRA oracle realizes a kernel with a nonzero mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanPlacement {
    /// Sample N(x; μ, Σ) directly on the grid.
    Baked,
    /// Bilinearly translate the zero-mean grid by μ.
    BilinearPreshift,
}

/// Same-padding direct convolution of every channel with every kernel,
/// summed over kernels.
fn convolve_sum(input: &FeatureMap, kernels: &[DiscreteKernel]) -> Vec<Vec<f64>> {
    let (c, h, w) = input.shape();
    (0..c)
        .map(|ch| {
            let mut out = vec![0.0; h * w];
            for k in kernels {
                conv_accumulate(input.channel(ch), h, w, k.weights(), k.radius(), 0, &mut out);
            }
            out
        })
        .collect()
}

/// Y = mix · (Σ_i G(μ_i, Σ_i) ∗ X) + b with N separately materialized
/// kernels, each convolved directly.
pub fn forward_massive_oracle(
    input: &FeatureMap,
    specs: &[KernelSpec],
    mix: &[f64],
    bias: &[f64],
) -> Result<FeatureMap> {
    forward_massive_oracle_guarded(input, specs, mix, bias, OracleGuard::MASSIVE)
}

pub fn forward_massive_oracle_guarded(
    input: &FeatureMap,
    specs: &[KernelSpec],
    mix: &[f64],
    bias: &[f64],
    guard: OracleGuard,
) -> Result<FeatureMap> {
    if specs.is_empty() {
        return Err(Error::EmptyBank);
    }
    let (c, h, w) = input.shape();
    guard.check("massive oracle", specs.len(), h, w)?;
    check_mix(c, mix, bias)?;
    let kernels = specs
        .iter()
        .map(make_gaussian_kernel)
        .collect::<Result<Vec<_>>>()?;
    let pre = convolve_sum(input, &kernels);
    Ok(mix_channels(&pre, mix, bias, h, w))
}

/// Zero-mean kernel `base` translated by `mu` with bilinear weights, on a
/// grid enlarged to hold every tap.
pub fn preshifted_kernel(base: &DiscreteKernel, mu: [f64; 2]) -> Result<DiscreteKernel> {
    let reach = mu[0].abs().max(mu[1].abs()).ceil() as usize + 1;
    let grid = base.padded_to(base.radius() + reach)?;
    let side = grid.side();
    let shifted = super::shift_bilinear(grid.weights(), side, side, mu);
    DiscreteKernel::from_grid(grid.radius(), shifted)
}

/// Y = mix · (Σ_k σ(w)_k Σ_j G(μ_k, Σ_j) ∗ X) + b with mean-baked kernels.
pub fn forward_lra_oracle(input: &FeatureMap, layer: &GaussConvLayer) -> Result<FeatureMap> {
    forward_lra_oracle_with(input, layer, MeanPlacement::Baked, OracleGuard::LRA)
}

/// All K² kernels G(μ_k, Σ_j) are materialized; the K that share a mean are
/// summed before convolving, which is exact by linearity.
pub fn forward_lra_oracle_with(
    input: &FeatureMap,
    layer: &GaussConvLayer,
    placement: MeanPlacement,
    guard: OracleGuard,
) -> Result<FeatureMap> {
    layer.validate()?;
    let (c, h, w) = input.shape();
    if c != layer.c_in {
        return Err(Error::Shape(format!(
            "layer expects {} input channels, got {c}",
            layer.c_in
        )));
    }
    guard.check("lra oracle", layer.k(), h, w)?;
    let weights = layer.fused_weights()?;
    let covs = layer.covariances()?;
    let zero_mean = layer.zero_mean_kernels()?;
    let mut grouped = Vec::with_capacity(layer.k());
    for (&mu, &wk) in layer.means.iter().zip(&weights) {
        let parts = match placement {
            MeanPlacement::Baked => covs
                .iter()
                .map(|&cov| make_gaussian_kernel(&KernelSpec::new(mu, cov, layer.grid_radius)))
                .collect::<Result<Vec<_>>>()?,
            MeanPlacement::BilinearPreshift => zero_mean
                .iter()
                .map(|k| preshifted_kernel(k, mu))
                .collect::<Result<Vec<_>>>()?,
        };
        let radius = parts.iter().map(|k| k.radius()).max().unwrap_or(0);
        let mut acc = DiscreteKernel::zeros(radius);
        for part in parts {
            let part = part.padded_to(radius)?;
            for (a, b) in acc.weights_mut().iter_mut().zip(part.weights()) {
                *a += wk * b;
            }
        }
        grouped.push(acc);
    }
    let pre = convolve_sum(input, &grouped);
    Ok(mix_channels(&pre, &layer.mix, &layer.bias, h, w))
}
