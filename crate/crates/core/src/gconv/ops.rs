//! Direct convolution and bilinear shift primitives on row-major planes.
//!
//! Extended planes carry `pad` extra pixels on every side: element
//! `[row][col]` of an extended plane holds position `(row - pad, col - pad)`.

/// `out += kernel ∗ x` where `out` is the extended plane of `x` with padding
/// `pad`; positions outside `x` read as zero.
pub(crate) fn conv_accumulate(
    x: &[f64],
    h: usize,
    w: usize,
    kernel: &[f64],
    radius: usize,
    pad: usize,
    out: &mut [f64],
) {
    let side = 2 * radius + 1;
    let ow = w + 2 * pad;
    let oh = h + 2 * pad;
    for i in 0..side {
        let d0 = i as isize - radius as isize;
        let (y0, y1) = span(d0, pad, h, oh);
        for j in 0..side {
            let k = kernel[i * side + j];
            if k == 0.0 {
                continue;
            }
            let d1 = j as isize - radius as isize;
            let (x0, x1) = span(d1, pad, w, ow);
            if x0 >= x1 {
                continue;
            }
            for oy in y0..y1 {
                let iy = (oy as isize - pad as isize - d0) as usize;
                let src = &x[iy * w..(iy + 1) * w];
                let dst = &mut out[oy * ow..(oy + 1) * ow];
                let ix0 = (x0 as isize - pad as isize - d1) as usize;
                for (d, s) in dst[x0..x1].iter_mut().zip(&src[ix0..ix0 + (x1 - x0)]) {
                    *d += k * s;
                }
            }
        }
    }
}

/// Adjoint of [`conv_accumulate`]: `dx += Kᵀ dout` and `dkernel += x ⋆ dout`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f64],
    h: usize,
    w: usize,
    kernel: &[f64],
    radius: usize,
    pad: usize,
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dkernel: Option<&mut [f64]>,
) {
    let side = 2 * radius + 1;
    let ow = w + 2 * pad;
    let oh = h + 2 * pad;
    let mut dx = dx;
    let mut dkernel = dkernel;
    for i in 0..side {
        let d0 = i as isize - radius as isize;
        let (y0, y1) = span(d0, pad, h, oh);
        for j in 0..side {
            let d1 = j as isize - radius as isize;
            let (x0, x1) = span(d1, pad, w, ow);
            if x0 >= x1 {
                continue;
            }
            let k = kernel[i * side + j];
            let ix0 = (x0 as isize - pad as isize - d1) as usize;
            let mut acc = 0.0;
            for oy in y0..y1 {
                let iy = (oy as isize - pad as isize - d0) as usize;
                let g = &dout[oy * ow + x0..oy * ow + x1];
                if dkernel.is_some() {
                    let src = &x[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                    acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(dx) = dx.as_deref_mut() {
                    if k != 0.0 {
                        let dst = &mut dx[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                        for (d, gv) in dst.iter_mut().zip(g) {
                            *d += k * gv;
                        }
                    }
                }
            }
            if let Some(dk) = dkernel.as_deref_mut() {
                dk[i * side + j] += acc;
            }
        }
    }
}

/// Output index range along one axis for which `out_index - pad - d` lands
/// inside `[0, n)`.
fn span(d: isize, pad: usize, n: usize, out_n: usize) -> (usize, usize) {
    let lo = (pad as isize + d).max(0) as usize;
    let hi = ((pad as isize + d + n as isize).min(out_n as isize)).max(0) as usize;
    (lo.min(hi), hi)
}

/// Bilinear taps of a shift by `mu`: integer offsets `floor(mu) + (a, b)`
/// with their weights and the derivatives of the weights with respect to
/// each component of `mu`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub offset: [isize; 2],
    pub weight: f64,
    pub dweight: [f64; 2],
}

pub(crate) fn bilinear_taps(mu: [f64; 2]) -> [Tap; 4] {
    let f0 = mu[0].floor();
    let f1 = mu[1].floor();
    let t0 = mu[0] - f0;
    let t1 = mu[1] - f1;
    let w0 = [1.0 - t0, t0];
    let w1 = [1.0 - t1, t1];
    let s = [-1.0, 1.0];
    let mut taps = [Tap {
        offset: [0, 0],
        weight: 0.0,
        dweight: [0.0, 0.0],
    }; 4];
    for a in 0..2 {
        for b in 0..2 {
            taps[a * 2 + b] = Tap {
                offset: [f0 as isize + a as isize, f1 as isize + b as isize],
                weight: w0[a] * w1[b],
                dweight: [s[a] * w1[b], w0[a] * s[b]],
            };
        }
    }
    taps
}

/// Dot product between `dst_like` (h×w) and the extended plane `src`
/// read at `p - offset`; out-of-range reads are zero.
pub(crate) fn shifted_dot(
    src: &[f64],
    pad: usize,
    dst_like: &[f64],
    h: usize,
    w: usize,
    offset: [isize; 2],
) -> f64 {
    let sw = w + 2 * pad;
    let sh = h + 2 * pad;
    let mut acc = 0.0;
    for_each_row(h, w, sh, sw, pad, offset, |y, x0, x1, sy, sx0| {
        let a = &dst_like[y * w + x0..y * w + x1];
        let b = &src[sy * sw + sx0..sy * sw + sx0 + (x1 - x0)];
        acc += a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    });
    acc
}

/// `dst[p] += scale · src[p - offset]` for `p` in the h×w plane.
#[allow(clippy::too_many_arguments)]
pub(crate) fn shift_add(
    src: &[f64],
    pad: usize,
    dst: &mut [f64],
    h: usize,
    w: usize,
    offset: [isize; 2],
    scale: f64,
) {
    let sw = w + 2 * pad;
    let sh = h + 2 * pad;
    for_each_row(h, w, sh, sw, pad, offset, |y, x0, x1, sy, sx0| {
        let d = &mut dst[y * w + x0..y * w + x1];
        let s = &src[sy * sw + sx0..sy * sw + sx0 + (x1 - x0)];
        for (a, b) in d.iter_mut().zip(s) {
            *a += scale * b;
        }
    });
}

/// Adjoint of [`shift_add`]: `src[p - offset] += scale · dst[p]`.
pub(crate) fn shift_add_adjoint(
    dst: &[f64],
    h: usize,
    w: usize,
    src: &mut [f64],
    pad: usize,
    offset: [isize; 2],
    scale: f64,
) {
    let sw = w + 2 * pad;
    let sh = h + 2 * pad;
    for_each_row(h, w, sh, sw, pad, offset, |y, x0, x1, sy, sx0| {
        let d = &dst[y * w + x0..y * w + x1];
        let s = &mut src[sy * sw + sx0..sy * sw + sx0 + (x1 - x0)];
        for (a, b) in s.iter_mut().zip(d) {
            *a += scale * b;
        }
    });
}

/// Visits, per output row `y`, the column range `[x0, x1)` whose source
/// position `p - offset + pad` lies inside the sh×sw extended plane.
fn for_each_row<F: FnMut(usize, usize, usize, usize, usize)>(
    h: usize,
    w: usize,
    sh: usize,
    sw: usize,
    pad: usize,
    offset: [isize; 2],
    mut f: F,
) {
    let shift0 = pad as isize - offset[0];
    let shift1 = pad as isize - offset[1];
    let x0 = (-shift1).max(0) as usize;
    let x1 = (sw as isize - shift1).min(w as isize);
    if x1 <= x0 as isize {
        return;
    }
    let x1 = x1 as usize;
    for y in 0..h {
        let sy = y as isize + shift0;
        if sy < 0 || sy >= sh as isize {
            continue;
        }
        f(y, x0, x1, sy as usize, (x0 as isize + shift1) as usize);
    }
}

/// Translates an h×w map by `mu` with bilinear weights; reads outside the
/// map are zero. Output `[p] = Σ a_ij · map[p - floor(mu) - (i, j)]`.
pub fn shift_bilinear(map: &[f64], h: usize, w: usize, mu: [f64; 2]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for tap in bilinear_taps(mu) {
        if tap.weight != 0.0 {
            shift_add(map, 0, &mut out, h, w, tap.offset, tap.weight);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], h: usize, w: usize, k: &[f64], r: usize) -> Vec<f64> {
        let side = 2 * r + 1;
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let mut acc = 0.0;
                for i in 0..side as isize {
                    for j in 0..side as isize {
                        let sy = y - (i - r as isize);
                        let sx = xx - (j - r as isize);
                        if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                            acc += k[(i * side as isize + j) as usize]
                                * x[(sy * w as isize + sx) as usize];
                        }
                    }
                }
                out[(y * w as isize + xx) as usize] = acc;
            }
        }
        out
    }

    fn ramp(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 * 0.37 + seed).sin() * 3.0).round() / 3.0).collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        let (h, w, r) = (7, 9, 2);
        let x = ramp(h * w, 0.3);
        let k = ramp(25, 1.1);
        let mut out = vec![0.0; h * w];
        conv_accumulate(&x, h, w, &k, r, 0, &mut out);
        let want = naive_conv(&x, h, w, &k, r);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn extended_conv_crops_to_same_conv() {
        let (h, w, r, pad) = (6, 5, 2, 3);
        let x = ramp(h * w, 0.9);
        let k = ramp(25, 2.0);
        let mut ext = vec![0.0; (h + 2 * pad) * (w + 2 * pad)];
        conv_accumulate(&x, h, w, &k, r, pad, &mut ext);
        let same = naive_conv(&x, h, w, &k, r);
        for y in 0..h {
            for xx in 0..w {
                let e = ext[(y + pad) * (w + 2 * pad) + xx + pad];
                assert!((e - same[y * w + xx]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let (h, w, r, pad) = (5, 6, 1, 2);
        let x = ramp(h * w, 0.1);
        let k = ramp(9, 0.7);
        let g = ramp((h + 2 * pad) * (w + 2 * pad), 1.9);
        let mut out = vec![0.0; g.len()];
        conv_accumulate(&x, h, w, &k, r, pad, &mut out);
        let lhs: f64 = out.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; h * w];
        let mut dk = vec![0.0; 9];
        conv_backward(&x, h, w, &k, r, pad, &g, Some(&mut dx), Some(&mut dk));
        let via_x: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let via_k: f64 = dk.iter().zip(&k).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_k).abs() < 1e-10);
    }

    #[test]
    fn zero_shift_is_bit_exact_identity() {
        let m = ramp(30, 0.4);
        assert_eq!(shift_bilinear(&m, 5, 6, [0.0, 0.0]), m);
    }

    #[test]
    fn integer_shift_moves_rows() {
        let (h, w) = (4, 3);
        let m: Vec<f64> = (0..12).map(|i| i as f64 + 1.0).collect();
        let out = shift_bilinear(&m, h, w, [1.0, 0.0]);
        for x in 0..w {
            assert_eq!(out[x], 0.0);
        }
        for y in 1..h {
            for x in 0..w {
                assert_eq!(out[y * w + x], m[(y - 1) * w + x]);
            }
        }
    }

    #[test]
    fn half_pixel_shift_splits_impulse() {
        let (h, w) = (5, 5);
        let mut m = vec![0.0; 25];
        m[2 * w + 2] = 1.0;
        let out = shift_bilinear(&m, h, w, [0.5, 0.0]);
        assert_eq!(out[2 * w + 2], 0.5);
        assert_eq!(out[3 * w + 2], 0.5);
        assert_eq!(out.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn shift_adjoint_identity() {
        let (h, w, pad) = (4, 5, 2);
        let src = ramp((h + 2 * pad) * (w + 2 * pad), 0.2);
        let g = ramp(h * w, 3.3);
        for offset in [[0, 0], [1, -2], [-3, 2], [2, 3]] {
            let mut dst = vec![0.0; h * w];
            shift_add(&src, pad, &mut dst, h, w, offset, 1.5);
            let lhs: f64 = dst.iter().zip(&g).map(|(a, b)| a * b).sum();
            let mut dsrc = vec![0.0; src.len()];
            shift_add_adjoint(&g, h, w, &mut dsrc, pad, offset, 1.5);
            let rhs: f64 = dsrc.iter().zip(&src).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
            assert!((shifted_dot(&src, pad, &g, h, w, offset) * 1.5 - lhs).abs() < 1e-12);
        }
    }
}
