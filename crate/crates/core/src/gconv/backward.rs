use super::ops::{bilinear_taps, conv_backward, shift_add_adjoint, shifted_dot};
use super::{FastCache, FeatureMap, GaussConvLayer};
use crate::error::{Error, Result};

/// Gradients of a scalar loss with respect to a layer's input and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub d_input: FeatureMap,
    pub d_logits: Vec<f64>,
    pub d_sigma_params: Vec<f64>,
    pub d_means: Vec<[f64; 2]>,
    /// Row-major `c_out × c_in`.
    pub d_mix: Vec<f64>,
    pub d_bias: Vec<f64>,
}

/// Reverse-mode gradients of [`GaussConvLayer::forward_fast`].
pub fn backward(input: &FeatureMap, layer: &GaussConvLayer, upstream: &FeatureMap) -> Result<LayerGradients> {
    let (_, cache) = layer.forward_cached(input)?;
    backward_cached(input, layer, &cache, upstream)
}

/// As [`backward`], reusing the intermediates of a matching forward call.
pub fn backward_cached(
    input: &FeatureMap,
    layer: &GaussConvLayer,
    cache: &FastCache,
    upstream: &FeatureMap,
) -> Result<LayerGradients> {
    let (c_in, h, w) = input.shape();
    if upstream.shape() != (layer.c_out, h, w) {
        return Err(Error::Shape(format!(
            "upstream {:?} does not match output {:?}",
            upstream.shape(),
            (layer.c_out, h, w)
        )));
    }
    let k = layer.k();
    let n = h * w;
    let pad = cache.pad;
    let ext = (h + 2 * pad) * (w + 2 * pad);

    let d_bias: Vec<f64> = (0..layer.c_out).map(|o| upstream.channel(o).iter().sum()).collect();
    let mut d_mix = vec![0.0; layer.c_out * c_in];
    for o in 0..layer.c_out {
        let g = upstream.channel(o);
        for c in 0..c_in {
            d_mix[o * c_in + c] = g.iter().zip(&cache.fused[c]).map(|(a, b)| a * b).sum();
        }
    }

    let taps: Vec<_> = layer.means.iter().map(|&m| bilinear_taps(m)).collect();
    let mut d_weights = vec![0.0; k];
    let mut d_means = vec![[0.0; 2]; k];
    let mut d_input = FeatureMap::zeros(c_in, h, w);
    let side = 2 * layer.grid_radius + 1;
    let mut d_kernel_sum = vec![0.0; side * side];
    let mut d_fused = vec![0.0; n];
    let mut d_summed = vec![0.0; ext];
    for c in 0..c_in {
        d_fused.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..layer.c_out {
            let m = layer.mix[o * c_in + c];
            if m != 0.0 {
                for (d, g) in d_fused.iter_mut().zip(upstream.channel(o)) {
                    *d += m * g;
                }
            }
        }
        d_summed.iter_mut().for_each(|v| *v = 0.0);
        for (j, tk) in taps.iter().enumerate() {
            let wk = cache.weights[j];
            for tap in tk {
                if tap.weight == 0.0 && tap.dweight == [0.0, 0.0] {
                    continue;
                }
                let dot = shifted_dot(&cache.summed[c], pad, &d_fused, h, w, tap.offset);
                d_weights[j] += tap.weight * dot;
                d_means[j][0] += wk * tap.dweight[0] * dot;
                d_means[j][1] += wk * tap.dweight[1] * dot;
                if tap.weight != 0.0 {
                    shift_add_adjoint(&d_fused, h, w, &mut d_summed, pad, tap.offset, wk * tap.weight);
                }
            }
        }
        conv_backward(
            input.channel(c),
            h,
            w,
            &cache.kernel_sum,
            layer.grid_radius,
            pad,
            &d_summed,
            Some(d_input.channel_mut(c)),
            Some(&mut d_kernel_sum),
        );
    }

    let dot: f64 = cache.weights.iter().zip(&d_weights).map(|(a, b)| a * b).sum();
    let d_logits = cache
        .weights
        .iter()
        .zip(&d_weights)
        .map(|(wm, dm)| wm * (dm - dot))
        .collect();

    let sigmas = layer.sigmas();
    let slopes = layer.sigma_slopes();
    let r = layer.grid_radius as isize;
    let d_sigma_params = cache
        .kernels
        .iter()
        .enumerate()
        .map(|(j, kern)| {
            let [s0, s1] = sigmas[j];
            let mut g0 = 0.0;
            let mut g1 = 0.0;
            for (idx, (&kv, &dk)) in kern.weights().iter().zip(&d_kernel_sum).enumerate() {
                if kv == 0.0 {
                    continue;
                }
                let d0 = (idx / side) as f64 - r as f64;
                let d1 = (idx % side) as f64 - r as f64;
                let t = kv * dk;
                g0 += t * (d0 * d0 / (s0 * s0 * s0) - 1.0 / s0);
                g1 += t * (d1 * d1 / (s1 * s1 * s1) - 1.0 / s1);
            }
            g0 * slopes[j][0] + g1 * slopes[j][1]
        })
        .collect();

    Ok(LayerGradients {
        d_input,
        d_logits,
        d_sigma_params,
        d_means,
        d_mix,
        d_bias,
    })
}
