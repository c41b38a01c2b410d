//! Scripted studies: across-replica prediction variance, robustness of
//! count accuracy to displaced training annotations, and rendering of
//! effective Gaussian filters.

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, Dataset, SynthConfig};
use crate::density::{perturb_annotations_with, Displacement};
use crate::error::{Error, Result};
use crate::gconv::GaussConvLayer;
use crate::io::{fmt_float, pgm_bytes};
use crate::kernels::{make_gaussian_kernel, DiscreteKernel, KernelSpec};
use crate::net::{evaluate, train, ConvKind, Layer, Model, NetworkConfig, TrainOptions};
use crate::report::{mean_var, quantile, ExperimentReport, Table};

/// Data shared by both studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyData {
    pub synth: SynthConfig,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for StudyData {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train_size: 200,
            test_size: 50,
            seed: 0,
        }
    }
}

impl StudyData {
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config("study datasets must be non-empty".into()));
        }
        let train = generate_dataset(&self.synth, self.train_size, self.seed, "train")?;
        let test = generate_dataset(&self.synth, self.test_size, self.seed.wrapping_add(1), "test")?;
        Ok((train, test))
    }
}

/// Training set whose annotations are displaced by up to `radius`; targets
/// are regenerated from the displaced points.
pub fn displaced(ds: &Dataset, radius: f64, mode: Displacement, seed: u64) -> Result<Dataset> {
    let samples = ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let moved = perturb_annotations_with(&s.annotations, radius, mode, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
            s.with_annotations(moved)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        beta: ds.beta,
    })
}

fn variants(base: &NetworkConfig) -> [(ConvKind, NetworkConfig); 2] {
    [
        (ConvKind::Standard, base.with_kind(ConvKind::Standard)),
        (ConvKind::Gaussian, base.with_kind(ConvKind::Gaussian)),
    ]
}

fn kind_name(kind: ConvKind) -> &'static str {
    match kind {
        ConvKind::Standard => "standard",
        ConvKind::Gaussian => "gaussian",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceStudyConfig {
    pub replicas: usize,
    /// Architecture shared by both variants; `conv_kind` is overridden.
    pub network: NetworkConfig,
    pub train: TrainOptions,
    pub data: StudyData,
    /// Displacement applied to training annotations.
    pub noise_radius: f64,
    /// Side of the box filter defining local density.
    pub window: usize,
    /// Local-density quantiles bounding the low and high regions.
    pub low_quantile: f64,
    pub high_quantile: f64,
    /// Replica seeds start here; consecutive replicas add one.
    pub seed: u64,
    /// Give every replica the same seed.
    pub identical_seeds: bool,
}

impl Default for VarianceStudyConfig {
    fn default() -> Self {
        Self {
            replicas: 5,
            network: NetworkConfig::default(),
            train: TrainOptions::default(),
            data: StudyData::default(),
            noise_radius: 2.0,
            window: 16,
            low_quantile: 0.25,
            high_quantile: 0.75,
            seed: 0,
            identical_seeds: false,
        }
    }
}

impl VarianceStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicas < 2 {
            return Err(Error::Config("variance study needs at least 2 replicas".into()));
        }
        if !(0.0 <= self.low_quantile && self.low_quantile < self.high_quantile && self.high_quantile <= 1.0) {
            return Err(Error::Config("quantile thresholds must be ordered within [0, 1]".into()));
        }
        if self.window == 0 || !(self.noise_radius >= 0.0) {
            return Err(Error::Config("window must be positive and noise radius non-negative".into()));
        }
        self.network.validate()
    }
}

/// Mean of `plane` over a `window`-wide box centered on every pixel, with
/// zeros outside the image.
fn box_filter(plane: &[f64], h: usize, w: usize, window: usize) -> Vec<f64> {
    let lo = window / 2;
    let hi = window - lo;
    let mut integral = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            integral[(y + 1) * (w + 1) + x + 1] =
                plane[y * w + x] + integral[y * (w + 1) + x + 1] + integral[(y + 1) * (w + 1) + x] - integral[y * (w + 1) + x];
        }
    }
    let area = (window * window) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(lo), (y + hi).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(lo), (x + hi).min(w));
            let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
                + integral[y0 * (w + 1) + x0];
            out[y * w + x] = s / area;
        }
    }
    out
}

/// Per test image, `(low mask, high mask)` from the local ground-truth
/// density and quantile thresholds pooled over the test set.
fn region_masks(test: &Dataset, cfg: &VarianceStudyConfig) -> Vec<(Vec<bool>, Vec<bool>)> {
    let local: Vec<Vec<f64>> = test
        .samples
        .iter()
        .map(|s| box_filter(&s.density.values, s.density.height, s.density.width, cfg.window))
        .collect();
    let pooled: Vec<f64> = local.iter().flatten().copied().collect();
    let lo = quantile(&pooled, cfg.low_quantile);
    let hi = quantile(&pooled, cfg.high_quantile);
    local
        .iter()
        .map(|l| (l.iter().map(|&v| v <= lo).collect(), l.iter().map(|&v| v >= hi).collect()))
        .collect()
}

fn masked_sum(values: &[f64], mask: &[bool]) -> f64 {
    values.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum()
}

/// Trains `replicas` models per variant on displaced annotations and
/// measures the across-replica variance of predicted counts per test image,
/// for whole images and for low and high local-density regions.
pub fn run_variance_study(cfg: &VarianceStudyConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let (clean, test) = cfg.data.generate()?;
    let noisy = displaced(&clean, cfg.noise_radius, Displacement::Euclidean, cfg.data.seed ^ 0xd15)?;
    let masks = region_masks(&test, cfg);
    let mut report = ExperimentReport::new("variance_study", serde_json::to_value(cfg)?);
    report.optimizer = Some(cfg.train.optimizer_info());
    let mut table = Table::new(&["variant", "replica", "seed", "mae", "mse", "status"]);
    for (kind, net) in variants(&cfg.network) {
        let name = kind_name(kind);
        // counts[replica][image][region]
        let mut counts: Vec<Vec<[f64; 3]>> = Vec::new();
        for r in 0..cfg.replicas {
            let seed = if cfg.identical_seeds { cfg.seed } else { cfg.seed + r as u64 };
            let net = NetworkConfig { seed, ..net.clone() };
            let opts = TrainOptions {
                shuffle_seed: seed,
                ..cfg.train.clone()
            };
            match train(&net, &noisy, &opts, None) {
                Ok((state, _)) => {
                    let mut per_image = Vec::with_capacity(test.len());
                    for (s, (low, high)) in test.samples.iter().zip(&masks) {
                        let d = state.model.predict_density(&s.image)?;
                        per_image.push([d.iter().sum(), masked_sum(&d, high), masked_sum(&d, low)]);
                    }
                    let (mae, mse) = evaluate(&state.model, &test)?;
                    table.push(vec![name.into(), r.to_string(), seed.to_string(), fmt_float(mae), fmt_float(mse), "ok".into()])?;
                    counts.push(per_image);
                }
                Err(Error::Diverged { epoch, step, .. }) => {
                    report.notes.push(format!("{name} replica {r} diverged at epoch {epoch}, step {step}; excluded"));
                    table.push(vec![name.into(), r.to_string(), seed.to_string(), "nan".into(), "nan".into(), "diverged".into()])?;
                }
                Err(e) => return Err(e),
            }
        }
        report.metrics.insert(format!("{name}_replicas_ok"), counts.len() as f64);
        if counts.len() < 2 {
            report.notes.push(format!("{name}: fewer than two replicas converged; variance undefined"));
            continue;
        }
        for (ri, region) in ["whole", "high", "low"].iter().enumerate() {
            let vars: Vec<f64> = (0..test.len())
                .map(|i| mean_var(&counts.iter().map(|c| c[i][ri]).collect::<Vec<_>>()).1)
                .collect();
            report
                .metrics
                .insert(format!("{name}_mean_var_{region}"), vars.iter().sum::<f64>() / vars.len() as f64);
        }
    }
    report.table = table;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessStudyConfig {
    /// Displacement radii in pixels, ascending from 0.
    pub ladder: Vec<f64>,
    pub seeds: Vec<u64>,
    pub displacement: Displacement,
    pub network: NetworkConfig,
    pub train: TrainOptions,
    pub data: StudyData,
}

impl Default for RobustnessStudyConfig {
    fn default() -> Self {
        Self {
            ladder: vec![0.0, 1.0, 2.0, 4.0, 8.0],
            seeds: vec![0, 1, 2],
            displacement: Displacement::Euclidean,
            network: NetworkConfig::default(),
            train: TrainOptions::default(),
            data: StudyData::default(),
        }
    }
}

impl RobustnessStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ladder.first() != Some(&0.0) {
            return Err(Error::Config("ladder must start at 0".into()));
        }
        if self.ladder.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("ladder must be strictly ascending".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.network.validate()
    }
}

/// Mean and standard error of the MAE per ladder rung, per variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationCurve {
    pub variant: String,
    pub radii: Vec<f64>,
    pub mean_mae: Vec<f64>,
    pub se_mae: Vec<f64>,
}

impl DegradationCurve {
    /// MAE at the largest radius over MAE at radius 0.
    pub fn relative_degradation(&self) -> f64 {
        self.mean_mae[self.mean_mae.len() - 1] / self.mean_mae[0]
    }

    /// Each rung is at least the previous one minus one standard error of
    /// their difference.
    pub fn non_decreasing_within_se(&self) -> bool {
        self.mean_mae.windows(2).zip(self.se_mae.windows(2)).all(|(m, s)| {
            let se = (s[0] * s[0] + s[1] * s[1]).sqrt();
            m[1] >= m[0] - se
        })
    }
}

/// Displaces training annotations by every ladder radius, trains both
/// variants per seed, and evaluates on clean test annotations.
pub fn run_robustness_study(cfg: &RobustnessStudyConfig) -> Result<(ExperimentReport, Vec<DegradationCurve>)> {
    cfg.validate()?;
    let (clean, test) = cfg.data.generate()?;
    let mut report = ExperimentReport::new("robustness_study", serde_json::to_value(cfg)?);
    report.optimizer = Some(cfg.train.optimizer_info());
    let mut table = Table::new(&["radius", "variant", "seed", "mae", "mse"]);
    let mut curves = Vec::new();
    for (kind, net) in variants(&cfg.network) {
        let name = kind_name(kind);
        let mut curve = DegradationCurve {
            variant: name.into(),
            radii: cfg.ladder.clone(),
            mean_mae: Vec::new(),
            se_mae: Vec::new(),
        };
        for &radius in &cfg.ladder {
            let mut maes = Vec::new();
            for &seed in &cfg.seeds {
                let train_set = displaced(&clean, radius, cfg.displacement, seed ^ 0xa11)?;
                let net = NetworkConfig { seed, ..net.clone() };
                let opts = TrainOptions {
                    shuffle_seed: seed,
                    ..cfg.train.clone()
                };
                match train(&net, &train_set, &opts, None) {
                    Ok((state, _)) => {
                        let (mae, mse) = evaluate(&state.model, &test)?;
                        table.push(vec![fmt_float(radius), name.into(), seed.to_string(), fmt_float(mae), fmt_float(mse)])?;
                        maes.push(mae);
                    }
                    Err(Error::Diverged { epoch, step, .. }) => {
                        report
                            .notes
                            .push(format!("{name} radius {radius} seed {seed} diverged at epoch {epoch}, step {step}; excluded"));
                        table.push(vec![fmt_float(radius), name.into(), seed.to_string(), "nan".into(), "nan".into()])?;
                    }
                    Err(e) => return Err(e),
                }
            }
            if maes.is_empty() {
                return Err(Error::InvalidArgument(format!("{name}: every seed diverged at radius {radius}")));
            }
            let (m, v) = mean_var(&maes);
            curve.mean_mae.push(m);
            curve.se_mae.push((v / maes.len() as f64).sqrt());
        }
        report.metrics.insert(format!("{name}_relative_degradation"), curve.relative_degradation());
        report.metrics.insert(
            format!("{name}_non_decreasing"),
            if curve.non_decreasing_within_se() { 1.0 } else { 0.0 },
        );
        for (r, m) in curve.radii.iter().zip(&curve.mean_mae) {
            report.metrics.insert(format!("{name}_mae_r{r}"), *m);
        }
        curves.push(curve);
    }
    report.table = table;
    Ok((report, curves))
}

/// Grayscale rendering of one Gaussian layer's effective filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterImage {
    /// Position of the layer in [`Model::layers`] order.
    pub layer_index: usize,
    pub side: usize,
    pub values: Vec<f64>,
    pub pgm: Vec<u8>,
}

/// Σ_k σ(w)_k · G(μ_k, Σ_k) on a grid wide enough for every mean.
pub fn effective_filter(layer: &GaussConvLayer) -> Result<DiscreteKernel> {
    let weights = layer.fused_weights()?;
    let parts = layer
        .covariances()?
        .into_iter()
        .zip(&layer.means)
        .map(|(cov, &mu)| make_gaussian_kernel(&KernelSpec::new(mu, cov, layer.grid_radius)))
        .collect::<Result<Vec<_>>>()?;
    let radius = parts.iter().map(DiscreteKernel::radius).max().unwrap_or(layer.grid_radius);
    let mut acc = DiscreteKernel::zeros(radius);
    for (p, w) in parts.into_iter().zip(weights) {
        let p = p.padded_to(radius)?;
        for (a, b) in acc.weights_mut().iter_mut().zip(p.weights()) {
            *a += w * b;
        }
    }
    Ok(acc)
}

/// One image per Gaussian layer, normalized to the full 8-bit range.
pub fn export_effective_filters(model: &Model) -> Result<Vec<FilterImage>> {
    let mut out = Vec::new();
    for (i, layer) in model.layers().enumerate() {
        if let Layer::Gaussian(l) = layer {
            let k = effective_filter(l)?;
            let side = k.side();
            out.push(FilterImage {
                layer_index: i,
                side,
                values: k.weights().to_vec(),
                pgm: pgm_bytes(side, side, k.weights())?,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("model has no Gaussian layer".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::parse_pgm;
    use crate::kernels::Covariance2;
    use crate::net::{build_model, ColumnSpec, LayerSpec};

    fn tiny_network() -> NetworkConfig {
        NetworkConfig {
            columns: vec![ColumnSpec {
                layers: vec![LayerSpec::new(2, 2, 4, 0.3, true), LayerSpec::new(2, 1, 2, 0.1, false)],
            }],
            head: LayerSpec::new(1, 1, 2, 0.1, false),
            fusion: false,
            bank_size: 20,
            ..NetworkConfig::default()
        }
    }

    fn tiny_data() -> StudyData {
        StudyData {
            synth: SynthConfig {
                height: 16,
                width: 16,
                count_min: 1,
                count_max: 8,
                ..SynthConfig::default()
            },
            train_size: 6,
            test_size: 4,
            seed: 3,
        }
    }

    #[test]
    fn box_filter_of_constant_interior() {
        let plane = vec![2.0; 64];
        let f = box_filter(&plane, 8, 8, 4);
        assert!((f[3 * 8 + 3] - 2.0).abs() < 1e-12);
        assert!((f[0] - 2.0 * 4.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn identical_seeds_collapse_variance() {
        let cfg = VarianceStudyConfig {
            replicas: 2,
            network: tiny_network(),
            train: TrainOptions {
                epochs: 1,
                ..TrainOptions::default()
            },
            data: tiny_data(),
            identical_seeds: true,
            ..VarianceStudyConfig::default()
        };
        let r = run_variance_study(&cfg).unwrap();
        for v in ["standard", "gaussian"] {
            assert_eq!(r.metric(&format!("{v}_mean_var_whole")), Some(0.0));
        }
        assert_eq!(r.table.rows.len(), 4);
    }

    #[test]
    fn robustness_rows_follow_ladder() {
        let cfg = RobustnessStudyConfig {
            ladder: vec![0.0, 2.0],
            seeds: vec![0, 1],
            network: tiny_network(),
            train: TrainOptions {
                epochs: 1,
                ..TrainOptions::default()
            },
            data: tiny_data(),
            ..RobustnessStudyConfig::default()
        };
        let (report, curves) = run_robustness_study(&cfg).unwrap();
        assert_eq!(report.table.rows.len(), 2 * 2 * 2);
        assert_eq!(curves.len(), 2);
        assert!(curves.iter().all(|c| c.mean_mae.len() == 2));
        let bad = RobustnessStudyConfig {
            ladder: vec![1.0, 2.0],
            ..cfg
        };
        assert!(run_robustness_study(&bad).is_err());
    }

    #[test]
    fn zero_radius_keeps_annotations() {
        let (train, _) = tiny_data().generate().unwrap();
        assert_eq!(displaced(&train, 0.0, Displacement::Euclidean, 1).unwrap(), train);
    }

    fn single_layer(k: usize, means: Vec<[f64; 2]>) -> GaussConvLayer {
        let covs = vec![Covariance2::isotropic(1.0).unwrap(); k];
        GaussConvLayer::new(1, 1, 3, &covs, vec![0.0; k], means, vec![1.0], vec![0.0]).unwrap()
    }

    #[test]
    fn single_centered_blob() {
        let f = effective_filter(&single_layer(1, vec![[0.0, 0.0]])).unwrap();
        let side = f.side();
        let c = side / 2;
        let max = f.weights().iter().cloned().fold(0.0, f64::max);
        assert_eq!(f.get(c, c), max);
    }

    #[test]
    fn symmetric_means_give_fourfold_symmetry() {
        let means = vec![[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]];
        let f = effective_filter(&single_layer(4, means)).unwrap();
        let n = f.side();
        for i in 0..n {
            for j in 0..n {
                let v = f.get(i, j);
                assert!((v - f.get(j, n - 1 - i)).abs() < 1e-15);
                assert!((v - f.get(n - 1 - i, n - 1 - j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn exports_one_pgm_per_gaussian_layer() {
        let model = build_model(&tiny_network()).unwrap();
        let imgs = export_effective_filters(&model).unwrap();
        assert_eq!(imgs.len(), 3);
        for img in &imgs {
            let (h, w, px) = parse_pgm(&img.pgm).unwrap();
            assert_eq!((h, w), (img.side, img.side));
            assert_eq!(px.iter().copied().max(), Some(255));
        }
        let standard = build_model(&tiny_network().with_kind(ConvKind::Standard)).unwrap();
        assert!(export_effective_filters(&standard).is_err());
    }
}
