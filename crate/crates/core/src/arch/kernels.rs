//! Real-valued kernels of the training path. Inputs hold ±1 values, so the
//! results equal the integer kernels of `binmath` exactly.

use crate::binmath::ConvGeometry;

/// Visits every (output position, tap, input channel of group) triple.
/// `f(out_base, in_index_or_none, weight_row_base, group)`; padding taps pass
/// `None` and read `-1`.
#[inline]
fn for_taps(
    h: usize,
    w: usize,
    geo: &ConvGeometry,
    oh: usize,
    ow: usize,
    mut f: impl FnMut(usize, Option<usize>, usize, usize),
) {
    let cin = geo.in_channels;
    let cin_g = geo.in_per_group();
    let cout = geo.out_channels;
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * cout;
            for ky in 0..geo.kernel_h {
                let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                for kx in 0..geo.kernel_w {
                    let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                    let inside = iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize;
                    let pix = if inside { (iy as usize * w + ix as usize) * cin } else { 0 };
                    for g in 0..geo.groups {
                        for ci in 0..cin_g {
                            let src = inside.then_some(pix + g * cin_g + ci);
                            let wrow = ((ky * geo.kernel_w + kx) * cin_g + ci) * cout;
                            f(obase, src, wrow, g);
                        }
                    }
                }
            }
        }
    }
}

/// One sample of a grouped convolution; `out` is `[oh, ow, cout]`, zeroed by
/// the caller.
pub fn conv_forward(x: &[f64], h: usize, w: usize, geo: &ConvGeometry, wts: &[f64], out: &mut [f64]) {
    let (oh, ow) = geo.output_hw(h, w).expect("validated geometry");
    let cog = geo.out_per_group();
    for_taps(h, w, geo, oh, ow, |ob, src, wr, g| {
        let xv = src.map_or(-1.0, |i| x[i]);
        let o = &mut out[ob + g * cog..ob + (g + 1) * cog];
        let wrow = &wts[wr + g * cog..wr + (g + 1) * cog];
        for (o, w) in o.iter_mut().zip(wrow) {
            *o += xv * w;
        }
    });
}

/// Accumulates the weight gradient and, if requested, the input gradient of
/// one conv sample from the pre-activation gradient `dz`.
pub fn conv_backward(
    x: &[f64],
    h: usize,
    w: usize,
    geo: &ConvGeometry,
    wts: &[f64],
    dz: &[f64],
    dw: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let (oh, ow) = geo.output_hw(h, w).expect("validated geometry");
    let cog = geo.out_per_group();
    for_taps(h, w, geo, oh, ow, |ob, src, wr, g| {
        let xv = src.map_or(-1.0, |i| x[i]);
        let d = &dz[ob + g * cog..ob + (g + 1) * cog];
        let r = wr + g * cog..wr + (g + 1) * cog;
        for (dw, d) in dw[r.clone()].iter_mut().zip(d) {
            *dw += xv * d;
        }
        if let (Some(dx), Some(i)) = (dx.as_deref_mut(), src) {
            dx[i] += wts[r].iter().zip(d).map(|(w, d)| w * d).sum::<f64>();
        }
    });
}

/// Grouped dense over one sample. Weights are `[fan_group, out]`; with
/// `dup` every input of a group is read twice in a row, so a group of `k`
/// inputs has `2k` weight rows.
pub fn dense_forward(x: &[f64], groups: usize, dup: bool, wts: &[f64], n_out: usize, out: &mut [f64]) {
    let in_g = x.len() / groups;
    let og = n_out / groups;
    let rep = if dup { 2 } else { 1 };
    for g in 0..groups {
        let o = &mut out[g * og..(g + 1) * og];
        for i in 0..in_g * rep {
            let xv = x[g * in_g + i / rep];
            let row = &wts[i * n_out + g * og..i * n_out + (g + 1) * og];
            for (o, w) in o.iter_mut().zip(row) {
                *o += xv * w;
            }
        }
    }
}

pub fn dense_backward(
    x: &[f64],
    groups: usize,
    dup: bool,
    wts: &[f64],
    n_out: usize,
    dz: &[f64],
    dw: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let in_g = x.len() / groups;
    let og = n_out / groups;
    let rep = if dup { 2 } else { 1 };
    for g in 0..groups {
        let d = &dz[g * og..(g + 1) * og];
        for i in 0..in_g * rep {
            let xi = g * in_g + i / rep;
            let r = i * n_out + g * og..i * n_out + (g + 1) * og;
            for (dw, d) in dw[r.clone()].iter_mut().zip(d) {
                *dw += x[xi] * d;
            }
            if let Some(dx) = dx.as_deref_mut() {
                dx[xi] += wts[r].iter().zip(d).map(|(w, d)| w * d).sum::<f64>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binmath::{bin_conv2d, bin_dense, BitTensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pm1(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
    }

    fn bits(shape: &[usize], v: &[f64]) -> BitTensor {
        BitTensor::from_signs(shape, v).unwrap()
    }

    #[test]
    fn conv_matches_integer_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, groups) in &[(1, 1), (2, 2), (1, 4)] {
            let geo = ConvGeometry {
                kernel_h: 3,
                kernel_w: 3,
                in_channels: 8,
                out_channels: 4,
                groups,
                stride,
                padding: 1,
            };
            let x = pm1(&mut rng, 5 * 6 * 8);
            let w = pm1(&mut rng, geo.weight_shape().iter().product());
            let (oh, ow) = geo.output_hw(5, 6).unwrap();
            let mut out = vec![0.0; oh * ow * 4];
            conv_forward(&x, 5, 6, &geo, &w, &mut out);
            let z = bin_conv2d(&bits(&[5, 6, 8], &x), &bits(&geo.weight_shape(), &w), &geo).unwrap();
            let zf: Vec<f64> = z.values.iter().map(|v| *v as f64).collect();
            assert_eq!(out, zf);
        }
    }

    #[test]
    fn dense_matches_integer_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = pm1(&mut rng, 12);
        let w = pm1(&mut rng, 12 / 2 * 2 * 6);
        let mut out = vec![0.0; 6];
        dense_forward(&x, 2, true, &w, 6, &mut out);
        let dup: Vec<f64> = x.iter().flat_map(|v| [*v, *v]).collect();
        let z = bin_dense(&bits(&[24], &dup), &bits(&[12, 6], &w), 2).unwrap();
        assert_eq!(out, z.iter().map(|v| *v as f64).collect::<Vec<_>>());
    }

    /// `f(x, w) = Σ dz·conv(x, w)` is affine in each argument, so a unit step
    /// in one coordinate changes `f` by exactly the gradient there.
    #[test]
    fn conv_backward_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geo = ConvGeometry {
            kernel_h: 3,
            kernel_w: 3,
            in_channels: 4,
            out_channels: 4,
            groups: 2,
            stride: 2,
            padding: 1,
        };
        let (h, w) = (5, 4);
        let (oh, ow) = geo.output_hw(h, w).unwrap();
        let x: Vec<f64> = (0..h * w * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wt: Vec<f64> = (0..geo.weight_shape().iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dz: Vec<f64> = (0..oh * ow * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |x: &[f64], wt: &[f64]| {
            let mut o = vec![0.0; oh * ow * 4];
            conv_forward(x, h, w, &geo, wt, &mut o);
            o.iter().zip(&dz).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut dw = vec![0.0; wt.len()];
        let mut dx = vec![0.0; x.len()];
        conv_backward(&x, h, w, &geo, &wt, &dz, &mut dw, Some(&mut dx));
        let base = f(&x, &wt);
        for i in 0..wt.len() {
            let mut w2 = wt.clone();
            w2[i] += 1.0;
            assert!((f(&x, &w2) - base - dw[i]).abs() < 1e-9);
        }
        for i in 0..x.len() {
            let mut x2 = x.clone();
            x2[i] += 1.0;
            assert!((f(&x2, &wt) - base - dx[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn dense_backward_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for dup in [false, true] {
            let rows = if dup { 8 } else { 4 };
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wt: Vec<f64> = (0..rows * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dz: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = |x: &[f64], wt: &[f64]| {
                let mut o = vec![0.0; 6];
                dense_forward(x, 2, dup, wt, 6, &mut o);
                o.iter().zip(&dz).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut dw = vec![0.0; wt.len()];
            let mut dx = vec![0.0; 8];
            dense_backward(&x, 2, dup, &wt, 6, &dz, &mut dw, Some(&mut dx));
            let base = f(&x, &wt);
            for i in 0..wt.len() {
                let mut w2 = wt.clone();
                w2[i] += 1.0;
                assert!((f(&x, &w2) - base - dw[i]).abs() < 1e-9);
            }
            for i in 0..8 {
                let mut x2 = x.clone();
                x2[i] += 1.0;
                assert!((f(&x2, &wt) - base - dx[i]).abs() < 1e-9);
            }
        }
    }
}
