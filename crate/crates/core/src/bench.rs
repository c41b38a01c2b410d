//! Wall-clock and operation-count comparison of the three evaluation
//! strategies: N materialized kernels, K² mean-baked kernels, and K zero-mean
//! kernels followed by K bilinear translations.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gconv::ops::conv_backward;
use crate::gconv::{
    backward_cached, complexity_count, forward_lra_oracle_with, forward_massive_oracle_guarded, FeatureMap,
    GaussConvLayer, MeanPlacement, OpCounts, OracleGuard,
};
use crate::io::fmt_float;
use crate::kernels::{make_gaussian_kernel, sample_kernel_bank, DiscreteKernel, KernelSpec};
use crate::report::{quantile, Table};

/// Size limits for benchmark runs of the slow paths.
pub const BENCH_GUARD: OracleGuard = OracleGuard {
    max_kernels: 1024,
    max_side: 128,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub image_size: usize,
    pub channels_in: usize,
    pub channels_out: usize,
    /// Kernel count of the vanilla variant.
    pub n: usize,
    pub k: usize,
    pub grid_radius: usize,
    pub repetitions: usize,
    pub warmup_runs: usize,
    /// Also time the input-gradient passes.
    pub backward: bool,
    /// K values for the fast-path scaling sweep; empty skips it.
    pub k_sweep: Vec<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels_in: 4,
            channels_out: 4,
            n: 256,
            k: 16,
            grid_radius: 4,
            repetitions: 5,
            warmup_runs: 2,
            backward: true,
            k_sweep: vec![2, 4, 8, 16],
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 5 || self.warmup_runs < 2 {
            return Err(Error::Config("benchmarks need ≥ 5 repetitions and ≥ 2 warmup runs".into()));
        }
        if self.image_size == 0 || self.channels_in == 0 || self.channels_out == 0 || self.k == 0 || self.n == 0 {
            return Err(Error::Config("benchmark sizes must be positive".into()));
        }
        if self.grid_radius == 0 {
            return Err(Error::Config("grid_radius must be positive".into()));
        }
        if self.n > BENCH_GUARD.max_kernels || self.image_size > BENCH_GUARD.max_side {
            return Err(Error::ReduceSize(format!(
                "N={} on {}² exceeds {} kernels on {}²",
                self.n, self.image_size, BENCH_GUARD.max_kernels, BENCH_GUARD.max_side
            )));
        }
        if self.k > BENCH_GUARD.max_kernels || self.k_sweep.iter().any(|&k| k == 0) {
            return Err(Error::Config("K values must lie in 1..=1024".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub variant: String,
    pub direction: String,
    pub median_ms: f64,
    pub q1_ms: f64,
    pub q3_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl Timing {
    fn from_samples(variant: &str, direction: &str, samples_ms: Vec<f64>) -> Self {
        Self {
            variant: variant.into(),
            direction: direction.into(),
            median_ms: quantile(&samples_ms, 0.5),
            q1_ms: quantile(&samples_ms, 0.25),
            q3_ms: quantile(&samples_ms, 0.75),
            samples_ms,
        }
    }

    pub fn iqr_ms(&self) -> f64 {
        self.q3_ms - self.q1_ms
    }
}

/// Max elementwise differences measured before timing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Parity {
    pub fast_vs_lra: f64,
    /// Present when the vanilla bank is the K² mean/covariance pairs.
    pub vanilla_vs_lra: Option<f64>,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub op_counts: OpCounts,
    pub predicted_vanilla_over_fast: f64,
    pub timings: Vec<Timing>,
    pub parity: Parity,
    pub forward_vanilla_over_fast: f64,
    pub forward_lra_over_fast: f64,
    pub forward_vanilla_over_lra: f64,
    /// `(K, median forward ms)` of the fast path.
    pub k_sweep: Vec<(usize, f64)>,
}

impl BenchReport {
    pub fn median(&self, variant: &str, direction: &str) -> Option<f64> {
        self.timings
            .iter()
            .find(|t| t.variant == variant && t.direction == direction)
            .map(|t| t.median_ms)
    }

    /// Measured forward ordering fast < lra < vanilla.
    pub fn ordering_holds(&self) -> bool {
        match (
            self.median("fast", "forward"),
            self.median("lra", "forward"),
            self.median("vanilla", "forward"),
        ) {
            (Some(f), Some(l), Some(v)) => f < l && l < v,
            _ => false,
        }
    }

    /// Every sweep point lies within a factor of two of the least-squares
    /// line through the sweep.
    pub fn sweep_is_linear(&self) -> bool {
        linear_within_factor(&self.k_sweep, 2.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per (variant, direction).
    pub fn table(&self) -> Result<Table> {
        let mut t = Table::new(&["variant", "direction", "median_ms", "q1_ms", "q3_ms", "iqr_ms", "predicted_ops"]);
        for timing in &self.timings {
            let ops = match timing.variant.as_str() {
                "vanilla" => self.op_counts.vanilla,
                "lra" => self.op_counts.lra,
                _ => self.op_counts.fast,
            };
            t.push(vec![
                timing.variant.clone(),
                timing.direction.clone(),
                fmt_float(timing.median_ms),
                fmt_float(timing.q1_ms),
                fmt_float(timing.q3_ms),
                fmt_float(timing.iqr_ms()),
                ops.to_string(),
            ])?;
        }
        Ok(t)
    }
}

/// Whether every `(x, y)` is within `factor` of the least-squares line.
pub fn linear_within_factor(points: &[(usize, f64)], factor: f64) -> bool {
    if points.len() < 2 {
        return true;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 as f64 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    points.iter().all(|&(x, y)| {
        let fit = icpt + slope * x as f64;
        fit > 0.0 && y <= factor * fit && y >= fit / factor
    })
}

/// Integer lattice `{-c/2, …, c - 1 - c/2}²` filled row-major, c = ⌈√k⌉.
pub fn integer_mean_lattice(k: usize) -> Vec<[f64; 2]> {
    let cols = (k as f64).sqrt().ceil() as usize;
    let half = (cols / 2) as f64;
    (0..k)
        .map(|i| [(i / cols) as f64 - half, (i % cols) as f64 - half])
        .collect()
}

/// Layer with K sampled covariances, integer means, uniform logits and
/// random mixing.
pub fn bench_layer(cfg: &BenchConfig, k: usize, seed: u64) -> Result<GaussConvLayer> {
    let bank = sample_kernel_bank(k, 1.0, (-0.5, 0.5), Some(cfg.grid_radius), seed)?;
    let covs: Vec<_> = bank.specs().iter().map(|s| s.cov).collect();
    let means = integer_mean_lattice(k);
    let limit = cfg.grid_radius as f64;
    if means.iter().flatten().any(|m| m.abs() > limit) {
        return Err(Error::Config(format!("K={k} needs means beyond grid radius {}", cfg.grid_radius)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mix = (0..cfg.channels_in * cfg.channels_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bias = (0..cfg.channels_out).map(|_| rng.random_range(-0.1..0.1)).collect();
    GaussConvLayer::new(cfg.channels_in, cfg.channels_out, cfg.grid_radius, &covs, vec![0.0; k], means, mix, bias)
}

/// Vanilla bank and its mixing matrix. When N = K² the bank is every
/// (μ_k, Σ_j) pair with the mix scaled by 1/K, which reproduces the layer.
fn vanilla_bank(cfg: &BenchConfig, layer: &GaussConvLayer) -> Result<(Vec<KernelSpec>, Vec<f64>, bool)> {
    let k = layer.k();
    if cfg.n == k * k {
        let covs = layer.covariances()?;
        let specs = layer
            .means
            .iter()
            .flat_map(|&mu| covs.iter().map(move |&cov| KernelSpec::new(mu, cov, layer.grid_radius)))
            .collect();
        let mix = layer.mix.iter().map(|m| m / k as f64).collect();
        return Ok((specs, mix, true));
    }
    let bank = sample_kernel_bank(cfg.n, 1.0, (-0.5, 0.5), Some(cfg.grid_radius), cfg.seed ^ 0xba4c)?;
    let lattice = integer_mean_lattice(k);
    let specs = bank
        .specs()
        .iter()
        .enumerate()
        .map(|(i, s)| KernelSpec::new(lattice[i % k], s.cov, cfg.grid_radius))
        .collect();
    Ok((specs, layer.mix.clone(), false))
}

fn time_runs(cfg: &BenchConfig, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    for _ in 0..cfg.warmup_runs {
        f()?;
    }
    let mut samples = Vec::with_capacity(cfg.repetitions);
    for _ in 0..cfg.repetitions {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(samples)
}

/// Input gradient of `mix · Σ_i K_i ∗ X` by direct adjoint convolutions.
fn direct_input_gradient(kernels: &[DiscreteKernel], mix: &[f64], upstream: &FeatureMap, c_in: usize) -> FeatureMap {
    let (c_out, h, w) = upstream.shape();
    let mut dx = FeatureMap::zeros(c_in, h, w);
    let mut d_pre = vec![0.0; h * w];
    for c in 0..c_in {
        d_pre.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..c_out {
            let m = mix[o * c_in + c];
            for (d, g) in d_pre.iter_mut().zip(upstream.channel(o)) {
                *d += m * g;
            }
        }
        for k in kernels {
            conv_backward(&d_pre, h, w, k.weights(), k.radius(), 0, &d_pre, Some(dx.channel_mut(c)), None);
        }
    }
    dx
}

/// Kernels the LRA oracle convolves with: per mean, the weighted sum of the
/// K mean-baked kernels.
fn lra_kernels(layer: &GaussConvLayer) -> Result<Vec<DiscreteKernel>> {
    let weights = layer.fused_weights()?;
    let covs = layer.covariances()?;
    let mut out = Vec::with_capacity(layer.k());
    for (&mu, &wk) in layer.means.iter().zip(&weights) {
        let parts = covs
            .iter()
            .map(|&cov| make_gaussian_kernel(&KernelSpec::new(mu, cov, layer.grid_radius)))
            .collect::<Result<Vec<_>>>()?;
        let radius = parts.iter().map(DiscreteKernel::radius).max().unwrap_or(0);
        let mut acc = DiscreteKernel::zeros(radius);
        for p in parts {
            let p = p.padded_to(radius)?;
            for (a, b) in acc.weights_mut().iter_mut().zip(p.weights()) {
                *a += wk * b;
            }
        }
        out.push(acc);
    }
    Ok(out)
}

fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Runs the parity gate, then times every variant. Vanilla and LRA
/// backward passes time the input gradient only; the fast backward is the
/// full parameter gradient.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let s = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let input = random_map(cfg.channels_in, s, s, &mut rng);
    let upstream = random_map(cfg.channels_out, s, s, &mut rng);
    let layer = bench_layer(cfg, cfg.k, cfg.seed)?;
    let (specs, vanilla_mix, paired) = vanilla_bank(cfg, &layer)?;

    let tolerance = 1e-8;
    let fast = layer.forward_fast(&input)?;
    let lra = forward_lra_oracle_with(&input, &layer, MeanPlacement::Baked, BENCH_GUARD)?;
    let fast_vs_lra = fast.max_abs_diff(&lra);
    let vanilla_vs_lra = if paired {
        let v = forward_massive_oracle_guarded(&input, &specs, &vanilla_mix, &layer.bias, BENCH_GUARD)?;
        Some(v.max_abs_diff(&lra))
    } else {
        None
    };
    if fast_vs_lra > tolerance || vanilla_vs_lra.is_some_and(|d| d > tolerance) {
        return Err(Error::InvalidArgument(format!(
            "parity gate failed: fast/lra {fast_vs_lra:e}, vanilla/lra {vanilla_vs_lra:?}"
        )));
    }

    let mut timings = Vec::new();
    let t = time_runs(cfg, || forward_massive_oracle_guarded(&input, &specs, &vanilla_mix, &layer.bias, BENCH_GUARD).map(drop))?;
    timings.push(Timing::from_samples("vanilla", "forward", t));
    let t = time_runs(cfg, || forward_lra_oracle_with(&input, &layer, MeanPlacement::Baked, BENCH_GUARD).map(drop))?;
    timings.push(Timing::from_samples("lra", "forward", t));
    let t = time_runs(cfg, || layer.forward_fast(&input).map(drop))?;
    timings.push(Timing::from_samples("fast", "forward", t));

    if cfg.backward {
        let t = time_runs(cfg, || {
            let kernels = specs.iter().map(make_gaussian_kernel).collect::<Result<Vec<_>>>()?;
            direct_input_gradient(&kernels, &vanilla_mix, &upstream, cfg.channels_in);
            Ok(())
        })?;
        timings.push(Timing::from_samples("vanilla", "backward", t));
        let t = time_runs(cfg, || {
            direct_input_gradient(&lra_kernels(&layer)?, &layer.mix, &upstream, cfg.channels_in);
            Ok(())
        })?;
        timings.push(Timing::from_samples("lra", "backward", t));
        let t = time_runs(cfg, || {
            let (_, cache) = layer.forward_cached(&input)?;
            backward_cached(&input, &layer, &cache, &upstream).map(drop)
        })?;
        timings.push(Timing::from_samples("fast", "backward", t));
    }

    let mut k_sweep = Vec::with_capacity(cfg.k_sweep.len());
    for &k in &cfg.k_sweep {
        let l = bench_layer(cfg, k, cfg.seed)?;
        let t = time_runs(cfg, || l.forward_fast(&input).map(drop))?;
        k_sweep.push((k, quantile(&t, 0.5)));
    }

    let op_counts = complexity_count(&layer, input.shape(), cfg.n);
    let med = |v: &str| {
        timings
            .iter()
            .find(|t| t.variant == v && t.direction == "forward")
            .map(|t| t.median_ms)
            .expect("forward timing recorded")
    };
    Ok(BenchReport {
        config: cfg.clone(),
        op_counts,
        predicted_vanilla_over_fast: op_counts.vanilla_over_fast(),
        forward_vanilla_over_fast: med("vanilla") / med("fast"),
        forward_lra_over_fast: med("lra") / med("fast"),
        forward_vanilla_over_lra: med("vanilla") / med("lra"),
        timings,
        parity: Parity {
            fast_vs_lra,
            vanilla_vs_lra,
            tolerance,
        },
        k_sweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig {
            image_size: 16,
            channels_in: 2,
            channels_out: 2,
            n: 16,
            k: 4,
            grid_radius: 2,
            k_sweep: vec![1, 2, 4],
            ..BenchConfig::default()
        }
    }

    #[test]
    fn lattice_is_integer_and_centered() {
        let m = integer_mean_lattice(16);
        assert_eq!(m[0], [-2.0, -2.0]);
        assert_eq!(m[15], [1.0, 1.0]);
        assert_eq!(integer_mean_lattice(1), vec![[0.0, 0.0]]);
    }

    #[test]
    fn small_bench_has_all_variants() {
        let r = run_bench(&small()).unwrap();
        for v in ["vanilla", "lra", "fast"] {
            for d in ["forward", "backward"] {
                assert!(r.median(v, d).unwrap() > 0.0);
            }
        }
        assert!(r.parity.vanilla_vs_lra.unwrap() <= 1e-8);
        assert_eq!(r.k_sweep.len(), 3);
        assert_eq!(r.table().unwrap().rows.len(), 6);
    }

    #[test]
    fn direct_gradient_matches_fast_backward() {
        let cfg = small();
        let layer = bench_layer(&cfg, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_map(2, 16, 16, &mut rng);
        let up = random_map(2, 16, 16, &mut rng);
        let direct = direct_input_gradient(&lra_kernels(&layer).unwrap(), &layer.mix, &up, 2);
        let (_, cache) = layer.forward_cached(&x).unwrap();
        let fast = backward_cached(&x, &layer, &cache, &up).unwrap();
        assert!(direct.max_abs_diff(&fast.d_input) < 1e-10);
    }

    #[test]
    fn degenerate_sizes_are_comparable() {
        let cfg = BenchConfig {
            image_size: 32,
            channels_in: 1,
            channels_out: 1,
            n: 1,
            k: 1,
            grid_radius: 1,
            backward: false,
            k_sweep: vec![],
            ..BenchConfig::default()
        };
        let r = run_bench(&cfg).unwrap();
        let m: Vec<f64> = ["vanilla", "lra", "fast"].iter().map(|v| r.median(v, "forward").unwrap()).collect();
        let (lo, hi) = m.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi <= 3.0 * lo, "{m:?}");
    }

    #[test]
    fn guards_and_validation() {
        let too_big = BenchConfig {
            n: 2000,
            ..BenchConfig::default()
        };
        assert!(matches!(run_bench(&too_big), Err(Error::ReduceSize(_))));
        let few = BenchConfig {
            repetitions: 4,
            ..BenchConfig::default()
        };
        assert!(matches!(run_bench(&few), Err(Error::Config(_))));
    }

    #[test]
    fn linear_fit_check() {
        assert!(linear_within_factor(&[(2, 1.0), (4, 2.1), (8, 3.9), (16, 8.0)], 2.0));
        assert!(!linear_within_factor(&[(2, 1.0), (4, 1.0), (8, 1.0), (16, 50.0)], 2.0));
    }
}
