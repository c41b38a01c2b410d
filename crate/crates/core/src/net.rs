//! Desk-scale counting networks built from either grid-filter or low-rank
//! Gaussian convolution layers, with an MSE density loss and an
//! adaptive-moment training loop.
//!
//! A model runs several columns on the same image. Each column is a chain of
//! convolution, ReLU and optional 2×2 max-pooling stages; column outputs are
//! concatenated, optionally extended with block-averaged pyramid levels, and
//! reduced to one density channel by a head layer without activation. The
//! low-resolution prediction is upsampled by nearest neighbour to the target
//! size.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::gconv::ops::conv_accumulate;
use crate::gconv::ops::conv_backward;
use crate::gconv::{backward_cached, mean_lattice, FastCache, FeatureMap, GaussConvLayer};
use crate::io::hex;
use crate::kernels::sample_kernel_bank;
use crate::lowrank::{init_weights, pca_select};
use crate::report::{median, EpochRecord, ExperimentReport, OptimizerInfo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    Standard,
    Gaussian,
}

/// One convolution stage. `k`, `base_sigma` and `sigma_perturb` only affect
/// Gaussian layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub channels: usize,
    pub grid_radius: usize,
    pub k: usize,
    pub base_sigma: f64,
    pub sigma_perturb: [f64; 2],
    #[serde(default)]
    pub pool: bool,
}

impl LayerSpec {
    pub fn new(channels: usize, grid_radius: usize, k: usize, perturb: f64, pool: bool) -> Self {
        Self {
            channels,
            grid_radius,
            k,
            base_sigma: 1.0,
            sigma_perturb: [-perturb, perturb],
            pool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub columns: Vec<ColumnSpec>,
    /// Output layer; must have one channel and no pooling.
    pub head: LayerSpec,
    /// Append 2× and 4× block-averaged copies of the fused features.
    pub fusion: bool,
    pub conv_kind: ConvKind,
    pub train_means: bool,
    /// Kernels sampled per Gaussian layer before PCA.
    pub bank_size: usize,
    /// Density targets are multiplied by this factor during training.
    pub target_scale: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let column = |r: usize, ch: usize| ColumnSpec {
            layers: vec![
                LayerSpec::new(ch, r, 16, 0.5, true),
                LayerSpec::new(ch, r, 16, 0.5, true),
                LayerSpec::new(ch, 2, 4, 0.1, false),
                LayerSpec::new(ch, 2, 2, 0.1, false),
            ],
        };
        Self {
            in_channels: 1,
            columns: vec![column(4, 8), column(3, 6)],
            head: LayerSpec::new(1, 1, 4, 0.1, false),
            fusion: true,
            conv_kind: ConvKind::Gaussian,
            train_means: false,
            bank_size: 100,
            target_scale: 100.0,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    /// Single-column model with two convolutions and one pooling stage.
    pub fn tiny() -> Self {
        Self {
            columns: vec![ColumnSpec {
                layers: vec![
                    LayerSpec::new(4, 3, 16, 0.5, true),
                    LayerSpec::new(4, 2, 4, 0.1, false),
                ],
            }],
            head: LayerSpec::new(1, 1, 4, 0.1, false),
            fusion: false,
            ..Self::default()
        }
    }

    pub fn with_kind(&self, kind: ConvKind) -> Self {
        Self {
            conv_kind: kind,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.columns.is_empty() {
            return bad("at least one column is required".into());
        }
        let pools = |c: &ColumnSpec| c.layers.iter().filter(|l| l.pool).count();
        let first = pools(&self.columns[0]);
        for (i, col) in self.columns.iter().enumerate() {
            if col.layers.is_empty() {
                return bad(format!("column {i} has no layers"));
            }
            if pools(col) != first {
                return bad(format!("column {i} pools {} times, column 0 pools {first}", pools(col)));
            }
        }
        for (i, l) in self.columns.iter().flat_map(|c| &c.layers).chain([&self.head]).enumerate() {
            if l.channels == 0 || l.grid_radius == 0 || l.k == 0 {
                return bad(format!("layer {i}: channels, grid_radius and k must be positive"));
            }
            if !(l.base_sigma.is_finite() && l.sigma_perturb[0] <= l.sigma_perturb[1]) {
                return bad(format!("layer {i}: invalid sigma range"));
            }
        }
        if self.head.channels != 1 || self.head.pool {
            return bad("head must have one channel and no pooling".into());
        }
        if self.conv_kind == ConvKind::Gaussian && self.bank_size == 0 {
            return bad("bank_size must be positive".into());
        }
        if !(self.target_scale.is_finite() && self.target_scale > 0.0) {
            return bad("target_scale must be positive".into());
        }
        Ok(())
    }

    pub fn downsample(&self) -> usize {
        1 << self.columns[0].layers.iter().filter(|l| l.pool).count()
    }
}

/// Grid-filter convolution with the same mixing and bias layout as the
/// Gaussian layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub radius: usize,
    /// `c_out × c_in × side × side`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl StandardConvLayer {
    fn side(&self) -> usize {
        2 * self.radius + 1
    }

    fn kernel(&self, o: usize, c: usize) -> &[f64] {
        let a = self.side() * self.side();
        let start = (o * self.c_in + c) * a;
        &self.weights[start..start + a]
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let (c_in, h, w) = x.shape();
        if c_in != self.c_in {
            return Err(Error::Shape(format!("expected {} channels, got {c_in}", self.c_in)));
        }
        let mut out = FeatureMap::zeros(self.c_out, h, w);
        for o in 0..self.c_out {
            let dst = out.channel_mut(o);
            dst.iter_mut().for_each(|v| *v = self.bias[o]);
            for c in 0..c_in {
                conv_accumulate(x.channel(c), h, w, self.kernel(o, c), self.radius, 0, dst);
            }
        }
        Ok(out)
    }

    /// Returns the input gradient and `[d_weights, d_bias]`.
    pub fn backward(&self, x: &FeatureMap, upstream: &FeatureMap) -> (FeatureMap, Vec<f64>) {
        let (c_in, h, w) = x.shape();
        let a = self.side() * self.side();
        let mut dx = FeatureMap::zeros(c_in, h, w);
        let mut grads = vec![0.0; self.weights.len() + self.c_out];
        for o in 0..self.c_out {
            let g = upstream.channel(o);
            for c in 0..c_in {
                let start = (o * self.c_in + c) * a;
                conv_backward(
                    x.channel(c),
                    h,
                    w,
                    self.kernel(o, c),
                    self.radius,
                    0,
                    g,
                    Some(dx.channel_mut(c)),
                    Some(&mut grads[start..start + a]),
                );
            }
            grads[self.weights.len() + o] = g.iter().sum();
        }
        (dx, grads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Gaussian(GaussConvLayer),
    Standard(StandardConvLayer),
}

#[derive(Debug, Clone)]
enum LayerCache {
    Gaussian(Box<FastCache>),
    Standard,
}

impl Layer {
    pub fn c_in(&self) -> usize {
        match self {
            Self::Gaussian(l) => l.c_in,
            Self::Standard(l) => l.c_in,
        }
    }

    pub fn c_out(&self) -> usize {
        match self {
            Self::Gaussian(l) => l.c_out,
            Self::Standard(l) => l.c_out,
        }
    }

    pub fn kind(&self) -> ConvKind {
        match self {
            Self::Gaussian(_) => ConvKind::Gaussian,
            Self::Standard(_) => ConvKind::Standard,
        }
    }

    /// Trainable values: logits, σ parameters, means when trainable, mix and
    /// bias for Gaussian layers; weights and bias for standard ones.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Self::Gaussian(l) => {
                let mut p = l.logits.clone();
                p.extend_from_slice(&l.sigma_params);
                if l.train_means {
                    p.extend(l.means.iter().flatten());
                }
                p.extend_from_slice(&l.mix);
                p.extend_from_slice(&l.bias);
                p
            }
            Self::Standard(l) => {
                let mut p = l.weights.clone();
                p.extend_from_slice(&l.bias);
                p
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Gaussian(l) => l.parameter_count(),
            Self::Standard(l) => l.weights.len() + l.bias.len(),
        }
    }

    fn set_params(&mut self, p: &[f64]) {
        let mut it = p.iter().copied();
        let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|v| *v = it.next().expect("parameter count"));
        match self {
            Self::Gaussian(l) => {
                fill(&mut l.logits);
                fill(&mut l.sigma_params);
                if l.train_means {
                    for m in l.means.iter_mut() {
                        fill(m);
                    }
                    // Means stay inside the grid.
                    let r = l.grid_radius as f64;
                    for m in l.means.iter_mut().flatten() {
                        *m = m.clamp(-r, r);
                    }
                }
                fill(&mut l.mix);
                fill(&mut l.bias);
            }
            Self::Standard(l) => {
                fill(&mut l.weights);
                fill(&mut l.bias);
            }
        }
    }

    fn forward(&self, x: &FeatureMap) -> Result<(FeatureMap, LayerCache)> {
        match self {
            Self::Gaussian(l) => {
                let (y, cache) = l.forward_cached(x)?;
                Ok((y, LayerCache::Gaussian(Box::new(cache))))
            }
            Self::Standard(l) => Ok((l.forward(x)?, LayerCache::Standard)),
        }
    }

    fn backward(&self, x: &FeatureMap, cache: &LayerCache, up: &FeatureMap) -> Result<(FeatureMap, Vec<f64>)> {
        match (self, cache) {
            (Self::Gaussian(l), LayerCache::Gaussian(c)) => {
                let g = backward_cached(x, l, c, up)?;
                let mut p = g.d_logits;
                p.extend_from_slice(&g.d_sigma_params);
                if l.train_means {
                    p.extend(g.d_means.iter().flatten());
                }
                p.extend_from_slice(&g.d_mix);
                p.extend_from_slice(&g.d_bias);
                Ok((g.d_input, p))
            }
            (Self::Standard(l), LayerCache::Standard) => Ok(l.backward(x, up)),
            _ => unreachable!("cache kind always matches its layer"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub layer: Layer,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub columns: Vec<Vec<Stage>>,
    pub head: Layer,
}

fn layer_seed(master: &mut ChaCha8Rng) -> u64 {
    master.next_u64()
}

fn build_layer(cfg: &NetworkConfig, spec: &LayerSpec, c_in: usize, seed: u64) -> Result<Layer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = spec.grid_radius;
    let c_out = spec.channels;
    match cfg.conv_kind {
        ConvKind::Standard => {
            let side = 2 * r + 1;
            let std = (2.0 / (c_in * side * side) as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            Ok(Layer::Standard(StandardConvLayer {
                c_in,
                c_out,
                radius: r,
                weights: (0..c_out * c_in * side * side).map(|_| normal.sample(&mut rng)).collect(),
                bias: vec![0.0; c_out],
            }))
        }
        ConvKind::Gaussian => {
            let bank = sample_kernel_bank(
                cfg.bank_size.max(spec.k),
                spec.base_sigma,
                (spec.sigma_perturb[0], spec.sigma_perturb[1]),
                Some(r),
                rng.random(),
            )?;
            let basis = init_weights(&pca_select(&bank, spec.k)?, r)?;
            let k = basis.k();
            let std = (2.0 / c_in as f64).sqrt() / k as f64;
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            // Positive kernels keep non-negative inputs non-negative, so the
            // mix sign alone decides whether a channel starts dead; signs
            // alternate across output channels.
            let mix = (0..c_out * c_in)
                .map(|i| {
                    let v = normal.sample(&mut rng).abs();
                    if (i / c_in) % 2 == 0 {
                        v
                    } else {
                        -v
                    }
                })
                .collect();
            let mut layer = GaussConvLayer::new(
                c_in,
                c_out,
                r,
                &basis.covariances,
                basis.logits.clone(),
                mean_lattice(k, 1.0, r as f64),
                mix,
                vec![0.0; c_out],
            )?;
            layer.eigenvalues = basis.eigenvalues.clone();
            layer.train_means = cfg.train_means;
            Ok(Layer::Gaussian(layer))
        }
    }
}

/// Deterministic construction from the config and its seed.
pub fn build_model(cfg: &NetworkConfig) -> Result<Model> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut columns = Vec::with_capacity(cfg.columns.len());
    let mut fused = 0;
    for col in &cfg.columns {
        let mut c_in = cfg.in_channels;
        let mut stages = Vec::with_capacity(col.layers.len());
        for spec in &col.layers {
            let layer = build_layer(cfg, spec, c_in, layer_seed(&mut master))?;
            c_in = spec.channels;
            stages.push(Stage { layer, pool: spec.pool });
        }
        fused += c_in;
        columns.push(stages);
    }
    let head_in = if cfg.fusion { 3 * fused } else { fused };
    let head = build_layer(cfg, &cfg.head, head_in, layer_seed(&mut master))?;
    Ok(Model {
        config: cfg.clone(),
        columns,
        head,
    })
}

#[derive(Debug, Clone)]
struct StageTrace {
    input: FeatureMap,
    cache: LayerCache,
    activated: FeatureMap,
    pool_idx: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
struct Trace {
    stages: Vec<Vec<StageTrace>>,
    head_input: FeatureMap,
    head_cache: LayerCache,
    fused_channels: usize,
    levels: Vec<usize>,
    low_shape: (usize, usize),
}

fn relu(x: &mut FeatureMap) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

fn max_pool2(x: &FeatureMap) -> Result<(FeatureMap, Vec<usize>)> {
    let (c, h, w) = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("cannot pool a {h}×{w} map")));
    }
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    let data = x.data();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xx + dx;
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                out.push(data[best]);
                idx.push(best);
            }
        }
    }
    Ok((FeatureMap::new(c, oh, ow, out)?, idx))
}

/// Replaces every s×s block by its mean; self-adjoint.
fn block_mean(plane: &[f64], h: usize, w: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let inv = 1.0 / (s * s) as f64;
    for by in (0..h).step_by(s) {
        for bx in (0..w).step_by(s) {
            let mut acc = 0.0;
            for y in by..by + s {
                acc += plane[y * w + bx..y * w + bx + s].iter().sum::<f64>();
            }
            let m = acc * inv;
            for y in by..by + s {
                out[y * w + bx..y * w + bx + s].iter_mut().for_each(|v| *v = m);
            }
        }
    }
    out
}

fn pyramid_levels(fusion: bool, h: usize, w: usize) -> Result<Vec<usize>> {
    if !fusion {
        return Ok(Vec::new());
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Shape(format!("pyramid fusion needs sides divisible by 4, got {h}×{w}")));
    }
    Ok(vec![2, 4])
}

fn upsample(low: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    let (big_h, big_w) = (h * f, w * f);
    let mut out = vec![0.0; big_h * big_w];
    for y in 0..big_h {
        for x in 0..big_w {
            out[y * big_w + x] = low[(y / f) * w + x / f];
        }
    }
    out
}

fn upsample_adjoint(grad: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    let big_w = w * f;
    let mut out = vec![0.0; h * w];
    for (i, g) in grad.iter().enumerate() {
        let (y, x) = (i / big_w, i % big_w);
        out[(y / f) * w + x / f] += g;
    }
    out
}

impl Model {
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.columns.iter().flatten().map(|s| &s.layer).chain([&self.head])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.columns.iter_mut().flatten().map(|s| &mut s.layer).chain([&mut self.head])
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Layer::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers().flat_map(Layer::params).collect()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::Shape(format!("{} parameters for a model of {}", p.len(), self.param_count())));
        }
        let mut offset = 0;
        for layer in self.layers_mut() {
            let n = layer.param_count();
            layer.set_params(&p[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_image(&self, image: &FeatureMap) -> Result<()> {
        let (c, h, w) = image.shape();
        let f = self.config.downsample();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!("model expects {} channels, got {c}", self.config.in_channels)));
        }
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("image {h}×{w} is not divisible by {f}")));
        }
        Ok(())
    }

    /// Prediction at target resolution in training units.
    fn forward_trace(&self, image: &FeatureMap) -> Result<(Vec<f64>, Trace)> {
        self.check_image(image)?;
        let mut stages = Vec::with_capacity(self.columns.len());
        let mut outputs = Vec::with_capacity(self.columns.len());
        for col in &self.columns {
            let mut x = image.clone();
            let mut traces = Vec::with_capacity(col.len());
            for stage in col {
                let (mut y, cache) = stage.layer.forward(&x)?;
                relu(&mut y);
                let (next, pool_idx) = if stage.pool {
                    let (p, idx) = max_pool2(&y)?;
                    (p, Some(idx))
                } else {
                    (y.clone(), None)
                };
                traces.push(StageTrace {
                    input: std::mem::replace(&mut x, next),
                    cache,
                    activated: y,
                    pool_idx,
                });
            }
            outputs.push(x);
            stages.push(traces);
        }
        let (_, h, w) = outputs[0].shape();
        let mut data = Vec::new();
        for o in &outputs {
            data.extend_from_slice(o.data());
        }
        let fused_channels: usize = outputs.iter().map(FeatureMap::channels).sum();
        let levels = pyramid_levels(self.config.fusion, h, w)?;
        for &s in &levels {
            for c in 0..fused_channels {
                let plane = data[c * h * w..(c + 1) * h * w].to_vec();
                data.extend(block_mean(&plane, h, w, s));
            }
        }
        let head_input = FeatureMap::new(fused_channels * (1 + levels.len()), h, w, data)?;
        let (low, head_cache) = self.head.forward(&head_input)?;
        let pred = upsample(low.data(), h, w, self.config.downsample());
        Ok((
            pred,
            Trace {
                stages,
                head_input,
                head_cache,
                fused_channels,
                levels,
                low_shape: (h, w),
            },
        ))
    }

    fn backward(&self, trace: &Trace, d_pred: &[f64]) -> Result<Vec<f64>> {
        let (h, w) = trace.low_shape;
        let n = h * w;
        let d_low = FeatureMap::new(1, h, w, upsample_adjoint(d_pred, h, w, self.config.downsample()))?;
        let (d_head_in, head_grads) = self.head.backward(&trace.head_input, &trace.head_cache, &d_low)?;
        let mut d_fused = d_head_in.data()[..trace.fused_channels * n].to_vec();
        for (li, &s) in trace.levels.iter().enumerate() {
            let base = (1 + li) * trace.fused_channels * n;
            for c in 0..trace.fused_channels {
                let g = &d_head_in.data()[base + c * n..base + (c + 1) * n];
                for (d, v) in d_fused[c * n..(c + 1) * n].iter_mut().zip(block_mean(g, h, w, s)) {
                    *d += v;
                }
            }
        }
        let mut grads_per_column = Vec::with_capacity(self.columns.len());
        let mut offset = 0;
        for (col, traces) in self.columns.iter().zip(&trace.stages) {
            let c_out = col.last().expect("non-empty column").layer.c_out();
            let mut up = FeatureMap::new(c_out, h, w, d_fused[offset * n..(offset + c_out) * n].to_vec())?;
            offset += c_out;
            let mut grads: Vec<Vec<f64>> = Vec::with_capacity(col.len());
            for (stage, t) in col.iter().zip(traces).rev() {
                let (c, sh, sw) = t.activated.shape();
                let mut d_act = match &t.pool_idx {
                    Some(idx) => {
                        let mut d = FeatureMap::zeros(c, sh, sw);
                        let dd = d.data_mut();
                        for (&i, g) in idx.iter().zip(up.data()) {
                            dd[i] += g;
                        }
                        d
                    }
                    None => up,
                };
                for (d, a) in d_act.data_mut().iter_mut().zip(t.activated.data()) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
                let (d_in, g) = stage.layer.backward(&t.input, &t.cache, &d_act)?;
                grads.push(g);
                up = d_in;
            }
            grads.reverse();
            grads_per_column.push(grads);
        }
        let mut flat: Vec<f64> = grads_per_column.into_iter().flatten().flatten().collect();
        flat.extend(head_grads);
        Ok(flat)
    }

    /// Predicted density map at image resolution.
    pub fn predict_density(&self, image: &FeatureMap) -> Result<Vec<f64>> {
        let (pred, _) = self.forward_trace(image)?;
        let s = self.config.target_scale;
        Ok(pred.into_iter().map(|v| v / s).collect())
    }

    /// Gradient of `loss(sample)` with respect to the flattened parameters,
    /// and the loss itself.
    pub fn loss_and_grad(&self, sample: &Sample) -> Result<(f64, Vec<f64>, f64)> {
        let (pred, trace) = self.forward_trace(&sample.image)?;
        let s = self.config.target_scale;
        let target: Vec<f64> = sample.density.values.iter().map(|v| v * s).collect();
        let (loss, d_pred) = mse_density_loss(&pred, &target)?;
        let grads = self.backward(&trace, &d_pred)?;
        Ok((loss, grads, pred.iter().sum::<f64>() / s))
    }

    pub fn loss(&self, sample: &Sample) -> Result<f64> {
        let (pred, _) = self.forward_trace(&sample.image)?;
        let s = self.config.target_scale;
        let target: Vec<f64> = sample.density.values.iter().map(|v| v * s).collect();
        Ok(mse_density_loss(&pred, &target)?.0)
    }

    /// Writes `topology.json` and `layers.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<String>> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("topology.json"), serde_json::to_string_pretty(&self.config)?)?;
        let records = self.layers().map(LayerFile::from_layer).collect::<Result<Vec<_>>>()?;
        std::fs::write(dir.join("layers.json"), serde_json::to_string_pretty(&records)?)?;
        Ok(vec!["topology.json".into(), "layers.json".into()])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: NetworkConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("topology.json"))?)?;
        let records: Vec<LayerFile> = serde_json::from_str(&std::fs::read_to_string(dir.join("layers.json"))?)?;
        let mut model = build_model(&cfg)?;
        let count = model.layers().count();
        if records.len() != count {
            return Err(Error::Format(format!("{} layer records for {count} layers", records.len())));
        }
        for (slot, rec) in model.layers_mut().zip(records) {
            let layer = rec.into_layer()?;
            if (layer.kind(), layer.c_in(), layer.c_out()) != (slot.kind(), slot.c_in(), slot.c_out()) {
                return Err(Error::Format("layer record does not fit the topology".into()));
            }
            *slot = layer;
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerFile {
    Gaussian {
        layer: serde_json::Value,
    },
    Standard {
        c_in: usize,
        c_out: usize,
        radius: usize,
        weights: Vec<String>,
        bias: Vec<String>,
    },
}

impl LayerFile {
    fn from_layer(layer: &Layer) -> Result<Self> {
        Ok(match layer {
            Layer::Gaussian(l) => Self::Gaussian {
                layer: serde_json::from_str(&l.to_json()?)?,
            },
            Layer::Standard(l) => Self::Standard {
                c_in: l.c_in,
                c_out: l.c_out,
                radius: l.radius,
                weights: hex::encode_all(&l.weights),
                bias: hex::encode_all(&l.bias),
            },
        })
    }

    fn into_layer(self) -> Result<Layer> {
        match self {
            Self::Gaussian { layer } => Ok(Layer::Gaussian(GaussConvLayer::from_json(&layer.to_string())?)),
            Self::Standard {
                c_in,
                c_out,
                radius,
                weights,
                bias,
            } => {
                let side = 2 * radius + 1;
                let weights = hex::decode_all(&weights)?;
                let bias = hex::decode_all(&bias)?;
                if weights.len() != c_out * c_in * side * side || bias.len() != c_out {
                    return Err(Error::Format("standard layer record has wrong sizes".into()));
                }
                Ok(Layer::Standard(StandardConvLayer {
                    c_in,
                    c_out,
                    radius,
                    weights,
                    bias,
                }))
            }
        }
    }
}

/// Mean squared error over pixels and its gradient `2(pred − target)/n`.
pub fn mse_density_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Sum of the predicted density map.
pub fn predict_count(model: &Model, image: &FeatureMap) -> Result<f64> {
    Ok(model.predict_density(image)?.iter().sum())
}

/// Mean absolute and root-mean-square count error.
pub fn count_errors(pairs: &[(f64, f64)]) -> (f64, f64) {
    let n = pairs.len() as f64;
    let mae = pairs.iter().map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mse = (pairs.iter().map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mse >= mae * (1.0 - 1e-12), "RMSE {mse} below MAE {mae}");
    (mae, mse)
}

pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let pairs = dataset
        .samples
        .iter()
        .map(|s| Ok((predict_count(model, &s.image)?, s.count())))
        .collect::<Result<Vec<_>>>()?;
    Ok(count_errors(&pairs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seeds the per-epoch shuffles.
    pub shuffle_seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            shuffle_seed: 0,
        }
    }
}

impl TrainOptions {
    fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training options {self:?}")))
        }
    }

    pub fn optimizer_info(&self) -> OptimizerInfo {
        OptimizerInfo {
            name: "adam".into(),
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean sample loss of every optimizer step.
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(model: Model, lr: f64) -> Self {
        let n = model.param_count();
        Self {
            model,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
            epoch: 0,
            lr,
            loss_history: Vec::new(),
        }
    }

    fn adam_step(&mut self, grad: &[f64], opts: &TrainOptions) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - opts.beta1.powi(t);
        let c2 = 1.0 - opts.beta2.powi(t);
        let mut p = self.model.params();
        for i in 0..p.len() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = opts.beta1 * *m + (1.0 - opts.beta1) * grad[i];
            *v = opts.beta2 * *v + (1.0 - opts.beta2) * grad[i] * grad[i];
            p[i] -= self.lr * (*m / c1) / ((*v / c2).sqrt() + opts.eps);
        }
        self.model.set_params(&p)
    }
}

/// Builds a model from `cfg` and trains it; see [`train_model`].
pub fn train(
    cfg: &NetworkConfig,
    dataset: &Dataset,
    opts: &TrainOptions,
    eval: Option<&Dataset>,
) -> Result<(TrainState, ExperimentReport)> {
    train_model(build_model(cfg)?, dataset, opts, eval)
}

/// Mini-batch training with Adam. Gradients are averaged over each batch in
/// sample order; counts reported per epoch come from the forward passes made
/// during that epoch, and the optional evaluation set is scored after it.
pub fn train_model(
    model: Model,
    dataset: &Dataset,
    opts: &TrainOptions,
    eval: Option<&Dataset>,
) -> Result<(TrainState, ExperimentReport)> {
    opts.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut report = ExperimentReport::new(
        "train",
        serde_json::json!({ "network": model.config, "options": opts, "train_size": dataset.len() }),
    );
    report.optimizer = Some(opts.optimizer_info());
    let mut state = TrainState::new(model, opts.lr);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.shuffle_seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut losses = Vec::with_capacity(dataset.len());
        let mut pairs = Vec::with_capacity(dataset.len());
        for batch in order.chunks(opts.batch_size) {
            let snapshot = state.clone();
            let mut grad = vec![0.0; state.model.param_count()];
            let mut batch_loss = 0.0;
            for &i in batch {
                let sample = &dataset.samples[i];
                let (loss, g, count) = state.model.loss_and_grad(sample)?;
                if !loss.is_finite() || !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::Diverged {
                        epoch,
                        step: state.step,
                        last_finite: Box::new(snapshot),
                    });
                }
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
                batch_loss += loss;
                losses.push(loss);
                pairs.push((count, sample.count()));
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            state.adam_step(&grad, opts)?;
            if !state.model.params().iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step: state.step,
                    last_finite: Box::new(snapshot),
                });
            }
            state.loss_history.push(batch_loss * scale);
        }
        state.epoch = epoch + 1;
        let (train_mae, train_mse) = count_errors(&pairs);
        let (eval_mae, eval_mse) = match eval {
            Some(ds) => {
                let (a, b) = evaluate(&state.model, ds)?;
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        report.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss_mean: losses.iter().sum::<f64>() / losses.len() as f64,
            loss_median: median(&losses),
            train_mae,
            train_mse,
            eval_mae,
            eval_mse,
        });
    }
    if let Some(last) = report.epochs.last() {
        report.metrics.insert("final_loss_mean".into(), last.loss_mean);
        report.metrics.insert("final_train_mae".into(), last.train_mae);
        if let (Some(a), Some(b)) = (last.eval_mae, last.eval_mse) {
            report.metrics.insert("final_eval_mae".into(), a);
            report.metrics.insert("final_eval_mse".into(), b);
        }
    }
    report.metrics.insert("parameters".into(), state.model.param_count() as f64);
    report.metrics.insert("steps".into(), state.step as f64);
    Ok((state, report))
}
