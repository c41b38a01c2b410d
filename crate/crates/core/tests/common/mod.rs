//! Independent PCA oracle: power iteration with deflation on the centered
//! data matrix, using compensated dot products for roughly twice working
//! precision.
#![allow(dead_code)]

use gaunet::kernels::KernelBank;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Error-free product and sum folded into a compensated dot product.
pub fn dot2(a: &[f64], b: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let p = x * y;
        let pe = x.mul_add(y, -p);
        let t = s + p;
        let z = t - s;
        let se = (s - (t - z)) + (p - z);
        s = t;
        c += se + pe;
    }
    s + c
}

pub fn norm2(v: &[f64]) -> f64 {
    dot2(v, v).sqrt()
}

pub struct Centered {
    pub rows: Vec<Vec<f64>>,
    pub cols: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

pub fn centered(bank: &KernelBank) -> Centered {
    let n = bank.len();
    let dim = bank.kernels()[0].weights().len();
    let ones = vec![1.0; n];
    let mean: Vec<f64> = (0..dim)
        .map(|j| {
            let col: Vec<f64> = bank.kernels().iter().map(|k| k.weights()[j]).collect();
            dot2(&col, &ones) / n as f64
        })
        .collect();
    let rows: Vec<Vec<f64>> = bank
        .kernels()
        .iter()
        .map(|k| k.weights().iter().zip(&mean).map(|(w, m)| w - m).collect())
        .collect();
    let cols = (0..dim).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
    Centered { rows, cols, mean }
}

pub fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let c = dot2(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
    }
}

/// Leading `k` eigenpairs of XᵀX/(n−1), largest first.
pub fn power_deflation(x: &Centered, k: usize, seed: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = x.rows.len();
    let dim = x.cols.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::new();
    let mut vecs: Vec<Vec<f64>> = Vec::new();
    let apply = |v: &[f64]| -> (Vec<f64>, f64) {
        let u: Vec<f64> = x.rows.iter().map(|r| dot2(r, v)).collect();
        let w: Vec<f64> = x.cols.iter().map(|c| dot2(c, &u)).collect();
        (w, dot2(&u, &u) / (n - 1) as f64)
    };
    for _ in 0..k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        project_out(&mut v, &vecs);
        let nv = norm2(&v);
        v.iter_mut().for_each(|a| *a /= nv);
        let mut lambda = 0.0;
        for it in 0..200_000 {
            let (mut w, rq) = apply(&v);
            project_out(&mut w, &vecs);
            let nw = norm2(&w);
            if nw == 0.0 {
                break;
            }
            w.iter_mut().for_each(|a| *a /= nw);
            let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            let settled = (rq - lambda).abs() <= 1e-15 * rq.abs();
            lambda = rq;
            if it > 10 && delta < 1e-13 && settled {
                break;
            }
        }
        lambda = apply(&v).1;
        vals.push(lambda);
        vecs.push(v);
    }
    (vals, vecs)
}


use gaunet::gconv::{backward, FeatureMap, GaussConvLayer};
use gaunet::kernels::Covariance2;

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Random layer whose means are integers when `integer_means`, otherwise
/// uniform within the grid radius.
pub fn random_layer(
    rng: &mut ChaCha8Rng,
    c_in: usize,
    c_out: usize,
    k: usize,
    radius: usize,
    integer_means: bool,
) -> GaussConvLayer {
    let covs: Vec<_> = (0..k)
        .map(|_| Covariance2::from_std(rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)).unwrap())
        .collect();
    let r = radius as f64;
    let means = (0..k)
        .map(|_| {
            if integer_means {
                let ri = radius as i64;
                [rng.random_range(-ri..=ri) as f64, rng.random_range(-ri..=ri) as f64]
            } else {
                [rng.random_range(-r..r), rng.random_range(-r..r)]
            }
        })
        .collect();
    GaussConvLayer::new(
        c_in,
        c_out,
        radius,
        &covs,
        (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
        means,
        (0..c_in * c_out).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn pairing(layer: &GaussConvLayer, x: &FeatureMap, up: &FeatureMap) -> f64 {
    let y = layer.forward_fast(x).unwrap();
    y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
}

/// |a − n| / max(|a|, |n|, 1e−6).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error per parameter class between the analytic
/// gradient of ⟨upstream, forward_fast(x)⟩ and central differences.
pub fn gradient_errors(layer: &GaussConvLayer, x: &FeatureMap, up: &FeatureMap, step: f64) -> Vec<(&'static str, f64)> {
    let g = backward(x, layer, up).unwrap();
    let central = |plus: f64, minus: f64| (plus - minus) / (2.0 * step);
    let perturbed = |edit: &dyn Fn(&mut GaussConvLayer, f64)| {
        let mut p = layer.clone();
        edit(&mut p, step);
        let mut m = layer.clone();
        edit(&mut m, -step);
        central(pairing(&p, x, up), pairing(&m, x, up))
    };
    let mut out = Vec::new();
    let mut worst = 0.0f64;
    for i in 0..x.data().len() {
        let mut p = x.clone();
        p.data_mut()[i] += step;
        let mut m = x.clone();
        m.data_mut()[i] -= step;
        let fd = central(pairing(layer, &p, up), pairing(layer, &m, up));
        worst = worst.max(rel_err(g.d_input.data()[i], fd));
    }
    out.push(("input", worst));
    let k = layer.k();
    out.push((
        "logits",
        (0..k)
            .map(|j| rel_err(g.d_logits[j], perturbed(&|l, h| l.logits[j] += h)))
            .fold(0.0, f64::max),
    ));
    out.push((
        "sigma_params",
        (0..k)
            .map(|j| rel_err(g.d_sigma_params[j], perturbed(&|l, h| l.sigma_params[j] += h)))
            .fold(0.0, f64::max),
    ));
    if layer.train_means {
        out.push((
            "means",
            (0..k)
                .flat_map(|j| (0..2).map(move |a| (j, a)))
                .map(|(j, a)| rel_err(g.d_means[j][a], perturbed(&|l, h| l.means[j][a] += h)))
                .fold(0.0, f64::max),
        ));
    }
    out.push((
        "mix",
        (0..layer.mix.len())
            .map(|i| rel_err(g.d_mix[i], perturbed(&|l, h| l.mix[i] += h)))
            .fold(0.0, f64::max),
    ));
    out.push((
        "bias",
        (0..layer.bias.len())
            .map(|i| rel_err(g.d_bias[i], perturbed(&|l, h| l.bias[i] += h)))
            .fold(0.0, f64::max),
    ));
    out
}
