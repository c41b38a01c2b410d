use serde::{Deserialize, Serialize};

use super::ops::{bilinear_taps, conv_accumulate, shift_add};
use super::{check_mix, mix_channels, FeatureMap};
use crate::error::{Error, Result};
use crate::io::hex;
use crate::kernels::{make_gaussian_kernel, Covariance2, DiscreteKernel, KernelSpec, SIGMA_FLOOR};
use crate::lowrank::softmax_normalize;

/// σ = floor + softplus(p).
pub fn sigma_from_param(p: f64) -> f64 {
    SIGMA_FLOOR + softplus(p)
}

/// Inverse of [`sigma_from_param`]; σ at or below the floor maps to a large
/// negative parameter.
pub fn param_from_sigma(sigma: f64) -> f64 {
    let excess = (sigma - SIGMA_FLOOR).max(1e-9);
    // ln(e^x - 1), stable for large x.
    excess + (-(-excess).exp_m1()).ln()
}

fn softplus(p: f64) -> f64 {
    if p > 0.0 {
        p + (-p).exp().ln_1p()
    } else {
        p.exp().ln_1p()
    }
}

fn sigmoid(p: f64) -> f64 {
    if p >= 0.0 {
        1.0 / (1.0 + (-p).exp())
    } else {
        let e = p.exp();
        e / (1.0 + e)
    }
}

/// Centered row-major lattice of `k` means with the given spacing, clamped
/// componentwise to `±limit`.
pub fn mean_lattice(k: usize, spacing: f64, limit: f64) -> Vec<[f64; 2]> {
    if k == 0 {
        return Vec::new();
    }
    let cols = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    let c0 = (rows as f64 - 1.0) / 2.0;
    let c1 = (cols as f64 - 1.0) / 2.0;
    (0..k)
        .map(|i| {
            let r = (i / cols) as f64;
            let c = (i % cols) as f64;
            [
                ((r - c0) * spacing).clamp(-limit, limit),
                ((c - c1) * spacing).clamp(-limit, limit),
            ]
        })
        .collect()
}

/// Parameters of one low-rank Gaussian convolution layer.
///
/// Kernel `j` has per-axis standard deviation
/// `sigma_from_param(sigma_params[j]) · aspect[j]`, with the smaller aspect
/// component equal to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub grid_radius: usize,
    pub logits: Vec<f64>,
    pub sigma_params: Vec<f64>,
    pub aspect: Vec<[f64; 2]>,
    pub means: Vec<[f64; 2]>,
    /// Row-major `c_out × c_in`.
    pub mix: Vec<f64>,
    pub bias: Vec<f64>,
    /// PCA eigenvalues the basis was selected with; metadata only.
    pub eigenvalues: Vec<f64>,
    pub train_means: bool,
}

/// Intermediates of [`GaussConvLayer::forward_cached`] reused by the
/// backward pass.
#[derive(Debug, Clone)]
pub struct FastCache {
    pub(crate) pad: usize,
    pub(crate) weights: Vec<f64>,
    pub(crate) kernels: Vec<DiscreteKernel>,
    pub(crate) kernel_sum: Vec<f64>,
    /// Σ_j G(0, Σ_j) ∗ X_c on the extended plane, per input channel.
    pub(crate) summed: Vec<Vec<f64>>,
    /// Fused translations per input channel, before channel mixing.
    pub(crate) fused: Vec<Vec<f64>>,
}

impl GaussConvLayer {
    /// Builds a layer from covariances; the smaller per-axis σ becomes the
    /// trainable scale and the ratio is kept as the aspect.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        c_out: usize,
        grid_radius: usize,
        covariances: &[Covariance2],
        logits: Vec<f64>,
        means: Vec<[f64; 2]>,
        mix: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let mut sigma_params = Vec::with_capacity(covariances.len());
        let mut aspect = Vec::with_capacity(covariances.len());
        for cov in covariances {
            cov.validate()?;
            let [s0, s1] = cov.stds();
            let base = s0.min(s1).max(SIGMA_FLOOR);
            sigma_params.push(param_from_sigma(base));
            aspect.push([(s0 / base).max(1.0), (s1 / base).max(1.0)]);
        }
        let layer = Self {
            c_in,
            c_out,
            grid_radius,
            logits,
            sigma_params,
            aspect,
            means,
            mix,
            bias,
            eigenvalues: Vec::new(),
            train_means: false,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.logits.len();
        if k == 0 {
            return Err(Error::InvalidArgument("layer needs K ≥ 1".into()));
        }
        if self.sigma_params.len() != k || self.aspect.len() != k || self.means.len() != k {
            return Err(Error::Shape(format!(
                "K={k} but {} sigma params, {} aspects, {} means",
                self.sigma_params.len(),
                self.aspect.len(),
                self.means.len()
            )));
        }
        if self.grid_radius == 0 {
            return Err(Error::InvalidArgument("grid radius must be at least 1".into()));
        }
        if self.c_in == 0 || self.c_out == 0 || self.bias.len() != self.c_out {
            return Err(Error::Shape("channel counts disagree with bias".into()));
        }
        check_mix(self.c_in, &self.mix, &self.bias)?;
        let limit = self.grid_radius as f64;
        for m in &self.means {
            if !(m[0].abs() <= limit && m[1].abs() <= limit) {
                return Err(Error::InvalidArgument(format!(
                    "mean {m:?} exceeds grid radius {limit}"
                )));
            }
        }
        for a in &self.aspect {
            if !(a[0] >= 1.0 && a[1] >= 1.0 && a[0].is_finite() && a[1].is_finite()) {
                return Err(Error::InvalidArgument(format!("aspect {a:?} must be ≥ 1")));
            }
        }
        let finite = self
            .logits
            .iter()
            .chain(&self.sigma_params)
            .chain(&self.mix)
            .chain(&self.bias)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("layer parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn fused_weights(&self) -> Result<Vec<f64>> {
        softmax_normalize(&self.logits)
    }

    /// Per-axis standard deviations of every kernel.
    pub fn sigmas(&self) -> Vec<[f64; 2]> {
        self.sigma_params
            .iter()
            .zip(&self.aspect)
            .map(|(&p, a)| {
                let s = sigma_from_param(p);
                [s * a[0], s * a[1]]
            })
            .collect()
    }

    /// dσ_axis / dp for every kernel.
    pub(crate) fn sigma_slopes(&self) -> Vec<[f64; 2]> {
        self.sigma_params
            .iter()
            .zip(&self.aspect)
            .map(|(&p, a)| {
                let s = sigmoid(p);
                [s * a[0], s * a[1]]
            })
            .collect()
    }

    pub fn covariances(&self) -> Result<Vec<Covariance2>> {
        self.sigmas()
            .into_iter()
            .map(|[s0, s1]| Covariance2::from_std(s0, s1))
            .collect()
    }

    /// The K zero-mean kernels on the layer grid.
    pub fn zero_mean_kernels(&self) -> Result<Vec<DiscreteKernel>> {
        self.covariances()?
            .into_iter()
            .map(|cov| make_gaussian_kernel(&KernelSpec::centered(cov, self.grid_radius)))
            .collect()
    }

    /// Padding of the extended plane needed by the largest translation.
    pub(crate) fn pad(&self) -> usize {
        let reach = self
            .means
            .iter()
            .map(|m| m[0].abs().max(m[1].abs()))
            .fold(0.0, f64::max);
        reach.ceil() as usize + 1
    }

    pub fn forward_fast(&self, input: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_cached(input)?.0)
    }

    /// Fast path: one convolution per input channel with the summed zero-mean
    /// kernel (equal to summing the K separate convolutions), then K weighted
    /// bilinear translations, then channel mixing.
    pub fn forward_cached(&self, input: &FeatureMap) -> Result<(FeatureMap, FastCache)> {
        self.validate()?;
        let (c, h, w) = input.shape();
        if c != self.c_in {
            return Err(Error::Shape(format!(
                "layer expects {} input channels, got {c}",
                self.c_in
            )));
        }
        let weights = self.fused_weights()?;
        let kernels = self.zero_mean_kernels()?;
        let side = 2 * self.grid_radius + 1;
        let mut kernel_sum = vec![0.0; side * side];
        for k in &kernels {
            for (s, v) in kernel_sum.iter_mut().zip(k.weights()) {
                *s += v;
            }
        }
        let pad = self.pad();
        let ext = (h + 2 * pad) * (w + 2 * pad);
        let taps: Vec<_> = self.means.iter().map(|&m| bilinear_taps(m)).collect();
        let mut summed = Vec::with_capacity(c);
        let mut fused = Vec::with_capacity(c);
        for ch in 0..c {
            let mut s = vec![0.0; ext];
            conv_accumulate(input.channel(ch), h, w, &kernel_sum, self.grid_radius, pad, &mut s);
            let mut u = vec![0.0; h * w];
            for (wk, tk) in weights.iter().zip(&taps) {
                for tap in tk {
                    if tap.weight != 0.0 {
                        shift_add(&s, pad, &mut u, h, w, tap.offset, wk * tap.weight);
                    }
                }
            }
            summed.push(s);
            fused.push(u);
        }
        let out = mix_channels(&fused, &self.mix, &self.bias, h, w);
        Ok((
            out,
            FastCache {
                pad,
                weights,
                kernels,
                kernel_sum,
                summed,
                fused,
            },
        ))
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let means = if self.train_means { 2 * self.k() } else { 0 };
        2 * self.k() + means + self.mix.len() + self.bias.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&LayerRecord::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: LayerRecord = serde_json::from_str(text)?;
        rec.try_into()
    }
}

/// Serialized layer; every real is the hex of its IEEE-754 bit pattern.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerRecord {
    grid_radius: usize,
    c_in: usize,
    c_out: usize,
    means: Vec<[String; 2]>,
    sigma_params: Vec<String>,
    aspect: Vec<[String; 2]>,
    logits: Vec<String>,
    mix: Vec<String>,
    bias: Vec<String>,
    eigenvalues: Vec<String>,
    train_means: bool,
}

impl From<&GaussConvLayer> for LayerRecord {
    fn from(l: &GaussConvLayer) -> Self {
        Self {
            grid_radius: l.grid_radius,
            c_in: l.c_in,
            c_out: l.c_out,
            means: l.means.iter().map(|m| hex::encode_pair(*m)).collect(),
            sigma_params: hex::encode_all(&l.sigma_params),
            aspect: l.aspect.iter().map(|a| hex::encode_pair(*a)).collect(),
            logits: hex::encode_all(&l.logits),
            mix: hex::encode_all(&l.mix),
            bias: hex::encode_all(&l.bias),
            eigenvalues: hex::encode_all(&l.eigenvalues),
            train_means: l.train_means,
        }
    }
}

impl TryFrom<LayerRecord> for GaussConvLayer {
    type Error = Error;

    fn try_from(r: LayerRecord) -> Result<Self> {
        let layer = Self {
            c_in: r.c_in,
            c_out: r.c_out,
            grid_radius: r.grid_radius,
            logits: hex::decode_all(&r.logits)?,
            sigma_params: hex::decode_all(&r.sigma_params)?,
            aspect: r.aspect.iter().map(hex::decode_pair).collect::<Result<_>>()?,
            means: r.means.iter().map(hex::decode_pair).collect::<Result<_>>()?,
            mix: hex::decode_all(&r.mix)?,
            bias: hex::decode_all(&r.bias)?,
            eigenvalues: hex::decode_all(&r.eigenvalues)?,
            train_means: r.train_means,
        };
        layer.validate()?;
        Ok(layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_map_round_trip_and_floor() {
        for s in [0.06, 0.3, 1.0, 2.5, 9.0] {
            assert!((sigma_from_param(param_from_sigma(s)) - s).abs() < 1e-9);
        }
        assert!(sigma_from_param(-50.0) >= SIGMA_FLOOR);
        assert!(sigma_from_param(-50.0) < SIGMA_FLOOR + 1e-12);
    }

    #[test]
    fn lattice_is_centered_and_clamped() {
        let m = mean_lattice(16, 1.0, 4.0);
        assert_eq!(m.len(), 16);
        assert_eq!(m[0], [-1.5, -1.5]);
        assert_eq!(m[15], [1.5, 1.5]);
        let sum: f64 = m.iter().map(|p| p[0] + p[1]).sum();
        assert_eq!(sum, 0.0);
        assert_eq!(mean_lattice(1, 1.0, 2.0), vec![[0.0, 0.0]]);
        assert!(mean_lattice(16, 4.0, 2.0).iter().all(|p| p[0].abs() <= 2.0));
    }

    #[test]
    fn constructor_validates() {
        let cov = [Covariance2::from_std(1.0, 2.0).unwrap()];
        let ok = GaussConvLayer::new(1, 2, 3, &cov, vec![0.0], vec![[0.0, 0.0]], vec![1.0, 2.0], vec![0.0, 0.0]);
        let layer = ok.unwrap();
        let s = layer.sigmas()[0];
        assert!((s[0] - 1.0).abs() < 1e-9 && (s[1] - 2.0).abs() < 1e-9);
        assert!(GaussConvLayer::new(1, 2, 3, &cov, vec![0.0], vec![[4.0, 0.0]], vec![1.0, 2.0], vec![0.0, 0.0]).is_err());
        assert!(GaussConvLayer::new(1, 2, 3, &cov, vec![0.0], vec![[0.0, 0.0]], vec![1.0], vec![0.0, 0.0]).is_err());
        assert!(GaussConvLayer::new(1, 1, 3, &[], vec![], vec![], vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn json_is_bit_faithful() {
        let covs = [
            Covariance2::from_std(0.7, 1.3).unwrap(),
            Covariance2::from_std(1.1, 1.1).unwrap(),
        ];
        let mut layer = GaussConvLayer::new(
            2,
            1,
            3,
            &covs,
            vec![0.1 + 0.2, -1.0 / 3.0],
            vec![[0.25, -0.5], [1.0 / 7.0, 0.0]],
            vec![std::f64::consts::PI, -1e-300],
            vec![5e-324],
        )
        .unwrap();
        layer.eigenvalues = vec![1.0 / 3.0];
        let back = GaussConvLayer::from_json(&layer.to_json().unwrap()).unwrap();
        assert_eq!(back, layer);
        for (a, b) in back.sigma_params.iter().zip(&layer.sigma_params) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
