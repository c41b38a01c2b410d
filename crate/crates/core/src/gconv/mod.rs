//! Low-rank Gaussian convolution.
//!
//! A layer filters every input channel with the sum of K zero-mean Gaussian
//! kernels, translates the result by K learned means with bilinear
//! interpolation, fuses the translations with softmax weights, and finally
//! mixes channels pointwise and adds a bias. The slow oracles materialize
//! the same kernels with their means baked in and convolve directly.

mod backward;
mod complexity;
mod layer;
pub(crate) mod ops;
mod oracle;

pub use backward::{backward, backward_cached, LayerGradients};
pub use complexity::{complexity_count, OpCounts};
pub use layer::{mean_lattice, param_from_sigma, sigma_from_param, FastCache, GaussConvLayer};
pub use ops::shift_bilinear;
pub use oracle::{
    forward_lra_oracle, forward_lra_oracle_with, forward_massive_oracle,
    forward_massive_oracle_guarded, preshifted_kernel, MeanPlacement, OracleGuard,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// C×H×W feature tensor, row-major within each channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape("feature map dimensions must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}×{height}×{width} map needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("feature map contains non-finite values".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Pointwise channel mix `Y_o = Σ_c mix[o][c]·pre_c + bias_o`.
pub(crate) fn mix_channels(
    pre: &[Vec<f64>],
    mix: &[f64],
    bias: &[f64],
    height: usize,
    width: usize,
) -> FeatureMap {
    let c_in = pre.len();
    let c_out = bias.len();
    let n = height * width;
    let mut out = FeatureMap::zeros(c_out, height, width);
    for o in 0..c_out {
        let dst = out.channel_mut(o);
        dst.iter_mut().for_each(|v| *v = bias[o]);
        for (c, plane) in pre.iter().enumerate() {
            let m = mix[o * c_in + c];
            if m == 0.0 {
                continue;
            }
            for (d, s) in dst.iter_mut().zip(plane) {
                *d += m * s;
            }
        }
        debug_assert_eq!(dst.len(), n);
    }
    out
}

pub(crate) fn check_mix(c_in: usize, mix: &[f64], bias: &[f64]) -> Result<()> {
    if bias.is_empty() {
        return Err(Error::Shape("layer needs at least one output channel".into()));
    }
    if mix.len() != bias.len() * c_in {
        return Err(Error::Shape(format!(
            "mix has {} entries, expected {}×{}",
            mix.len(),
            bias.len(),
            c_in
        )));
    }
    Ok(())
}
