//! Direct nested-loop reference implementations, written for clarity rather
//! than speed, and the randomized comparisons run against them.

use cpga_core::guided_filter::{fast_guided_filter_tensors, GuidedFilterParams};
use cpga_core::metrics::{psnr, ssim_plane};
use cpga_core::priors::{bright_channel_patch, dark_channel_patch, PatchSpec};
use cpga_core::tensor::{box_filter_forward, resize_bilinear_forward};
use cpga_core::{Tape, Tensor};
use rand::Rng;

/// Plain `[C][H][W]` view in `f64`.
pub type Planes = Vec<Vec<Vec<f64>>>;

pub fn planes(t: &Tensor) -> Planes {
    let (c, h, w) = t.chw().unwrap();
    (0..c)
        .map(|ch| (0..h).map(|y| (0..w).map(|x| t.data()[(ch * h + y) * w + x] as f64).collect()).collect())
        .collect()
}

pub fn max_abs_diff(t: &Tensor, p: &Planes) -> f64 {
    let flat: Vec<f64> = p.iter().flatten().flatten().copied().collect();
    assert_eq!(flat.len(), t.numel());
    t.data().iter().zip(&flat).map(|(&a, b)| (a as f64 - b).abs()).fold(0.0, f64::max)
}

pub fn conv2d(x: &Planes, w: &[Vec<Vec<Vec<f64>>>], b: &[f64], stride: usize, pad: usize) -> Planes {
    let (h, wd) = (x[0].len(), x[0][0].len());
    let k = w[0][0].len();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![vec![vec![0.0; ow]; oh]; w.len()];
    for (o, plane) in out.iter_mut().enumerate() {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[o];
                for (c, xc) in x.iter().enumerate() {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += w[o][c][ky][kx] * xc[iy as usize][ix as usize];
                            }
                        }
                    }
                }
                plane[oy][ox] = acc;
            }
        }
    }
    out
}

/// Pixels of the clipped `(2r+1)^2` window around `(y, x)`.
fn window(h: usize, w: usize, y: usize, x: usize, r: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
        for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
            out.push((yy, xx));
        }
    }
    out
}

pub fn box_mean(x: &Planes, r: usize) -> Planes {
    x.iter()
        .map(|p| {
            let (h, w) = (p.len(), p[0].len());
            (0..h)
                .map(|y| {
                    (0..w)
                        .map(|xx| {
                            let win = window(h, w, y, xx, r);
                            win.iter().map(|&(a, b)| p[a][b]).sum::<f64>() / win.len() as f64
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Extreme over all channels and the clipped window.
pub fn patch_extreme(img: &Planes, r: usize, dark: bool) -> Planes {
    let (h, w) = (img[0].len(), img[0][0].len());
    let plane = (0..h)
        .map(|y| {
            (0..w)
                .map(|x| {
                    let mut best = if dark { f64::INFINITY } else { f64::NEG_INFINITY };
                    for (yy, xx) in window(h, w, y, x, r) {
                        for c in img {
                            best = if dark { best.min(c[yy][xx]) } else { best.max(c[yy][xx]) };
                        }
                    }
                    best
                })
                .collect()
        })
        .collect();
    vec![plane]
}

/// Bilinear resize written as a sum of hat-function weights over every source sample.
pub fn resize(x: &Planes, h2: usize, w2: usize) -> Planes {
    let (h, w) = (x[0].len(), x[0][0].len());
    let coord = |d: usize, src: usize, dst: usize| {
        let p = (d as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
        p.clamp(0.0, (src - 1) as f64)
    };
    let hat = |p: f64, i: usize| (1.0 - (p - i as f64).abs()).max(0.0);
    x.iter()
        .map(|p| {
            (0..h2)
                .map(|y| {
                    let py = coord(y, h, h2);
                    (0..w2)
                        .map(|xx| {
                            let px = coord(xx, w, w2);
                            let mut acc = 0.0;
                            for (i, row) in p.iter().enumerate() {
                                for (j, v) in row.iter().enumerate() {
                                    acc += hat(py, i) * hat(px, j) * v;
                                }
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Fast guided filter from per-window ridge least squares: in every clipped
/// window fit `src ~ a * guide + b` minimising the mean squared residual plus
/// `eps * a^2`, average the coefficients of the windows covering each pixel,
/// upsample them and apply them to the full-resolution guide.
pub fn guided_filter(guide_low: &Planes, src_low: &Planes, guide_full: &Planes, r: usize, eps: f64) -> Planes {
    let (h, w) = (guide_low[0].len(), guide_low[0][0].len());
    let (big_h, big_w) = (guide_full[0].len(), guide_full[0][0].len());
    let mut out = Vec::new();
    for c in 0..guide_low.len() {
        let (g, s) = (&guide_low[c], &src_low[c]);
        let mut a = vec![vec![0.0; w]; h];
        let mut b = vec![vec![0.0; w]; h];
        for y in 0..h {
            for x in 0..w {
                let win = window(h, w, y, x, r);
                let n = win.len() as f64;
                let (mut si, mut sp, mut sii, mut sip) = (0.0, 0.0, 0.0, 0.0);
                for &(yy, xx) in &win {
                    let (i, p) = (g[yy][xx], s[yy][xx]);
                    si += i;
                    sp += p;
                    sii += i * i;
                    sip += i * p;
                }
                // Normal equations [[sii + n eps, si], [si, n]] [a, b] = [sip, sp].
                let (m00, m01, m11) = (sii + n * eps, si, n);
                let det = m00 * m11 - m01 * m01;
                a[y][x] = (sip * m11 - m01 * sp) / det;
                b[y][x] = (m00 * sp - m01 * sip) / det;
            }
        }
        let ma = box_mean(&vec![a], r);
        let mb = box_mean(&vec![b], r);
        let (ua, ub) = (resize(&ma, big_h, big_w), resize(&mb, big_h, big_w));
        let plane = (0..big_h)
            .map(|y| (0..big_w).map(|x| ua[0][y][x] * guide_full[c][y][x] + ub[0][y][x]).collect())
            .collect();
        out.push(plane);
    }
    out
}

pub fn psnr_direct(a: &Planes, b: &Planes) -> f64 {
    let (mut se, mut n) = (0.0, 0.0);
    for (pa, pb) in a.iter().flatten().zip(b.iter().flatten()) {
        for (x, y) in pa.iter().zip(pb) {
            se += (x - y) * (x - y);
            n += 1.0;
        }
    }
    10.0 * (1.0 / (se / n)).log10()
}

/// SSIM with an 11x11 Gaussian window (sigma 1.5), statistics gathered
/// window by window from explicit 2-D weights.
pub fn ssim_direct(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let mut wts = vec![vec![0.0; k]; k];
    let mut total = 0.0;
    for (i, row) in wts.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = (a.len(), a[0].len());
    let (mut sum, mut count) = (0.0, 0.0);
    for y in 0..=h - k {
        for x in 0..=w - k {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = wts[i][j] / total;
                    let (p, q) = (a[y + i][x + j], b[y + i][x + j]);
                    mx += wt * p;
                    my += wt * q;
                    sxx += wt * p * p;
                    syy += wt * q * q;
                    sxy += wt * p * q;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            sum += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    sum / count
}

pub struct OracleCase {
    pub name: &'static str,
    pub tol: f64,
    /// Absolute discrepancy between the implementation and its oracle.
    pub run: fn(u64) -> f64,
}

fn dims(seed: u64, lo: usize, hi: usize) -> (usize, usize) {
    let mut r = super::rng(seed ^ 0xd1e5);
    (r.gen_range(lo..=hi), r.gen_range(lo..=hi))
}

fn conv_case(seed: u64) -> f64 {
    let mut r = super::rng(seed);
    let (h, w) = dims(seed, 3, 9);
    let (cin, cout) = (r.gen_range(1..=4), r.gen_range(1..=4));
    let k = [1, 3, 5][r.gen_range(0..3)];
    let stride = r.gen_range(1..=2);
    let pad = k / 2;
    let x = super::uniform(&[cin, h, w], -1.0, 1.0, seed);
    let wt = super::uniform(&[cout, cin, k, k], -1.0, 1.0, seed + 1);
    let b = super::uniform(&[cout], -1.0, 1.0, seed + 2);
    let tape = Tape::new();
    let got = tape
        .constant(x.clone())
        .conv2d(&tape.constant(wt.clone()), &tape.constant(b.clone()), stride, pad)
        .unwrap()
        .to_tensor();
    let w4: Vec<Vec<Vec<Vec<f64>>>> = (0..cout)
        .map(|o| planes(&Tensor::new(&[cin, k, k], wt.data()[o * cin * k * k..(o + 1) * cin * k * k].to_vec()).unwrap()))
        .collect();
    let bf: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    max_abs_diff(&got, &conv2d(&planes(&x), &w4, &bf, stride, pad))
}

fn box_case(seed: u64) -> f64 {
    let (h, w) = dims(seed, 1, 10);
    let radius = super::rng(seed).gen_range(1..=3);
    let x = super::uniform(&[2, h, w], 0.0, 1.0, seed);
    max_abs_diff(&box_filter_forward(&x, radius).unwrap(), &box_mean(&planes(&x), radius))
}

fn patch_case(seed: u64) -> f64 {
    let (h, w) = dims(seed, 1, 10);
    let radius = super::rng(seed).gen_range(0..=3);
    let img = super::uniform(&[3, h, w], 0.0, 1.0, seed);
    let spec = PatchSpec { radius };
    let p = planes(&img);
    let d = max_abs_diff(&dark_channel_patch(&img, spec).unwrap(), &patch_extreme(&p, radius, true));
    d.max(max_abs_diff(&bright_channel_patch(&img, spec).unwrap(), &patch_extreme(&p, radius, false)))
}

fn resize_case(seed: u64) -> f64 {
    let (h, w) = dims(seed, 1, 8);
    let (h2, w2) = dims(seed + 1, 1, 16);
    let x = super::uniform(&[2, h, w], 0.0, 1.0, seed);
    max_abs_diff(&resize_bilinear_forward(&x, h2, w2).unwrap(), &resize(&planes(&x), h2, w2))
}

fn guided_case(seed: u64) -> f64 {
    let scale = super::rng(seed).gen_range(1..=3);
    let full = super::uniform(&[3, 12 * scale, 12 * scale], 0.0, 1.0, seed);
    let guide_low = resize_bilinear_forward(&full, 12, 12).unwrap();
    let src_low = super::uniform(&[3, 12, 12], -0.05, 1.05, seed + 1);
    let params = GuidedFilterParams { radius: 2, eps: 1e-2 };
    let got = fast_guided_filter_tensors(&guide_low, &src_low, &full, params).unwrap();
    max_abs_diff(&got, &guided_filter(&planes(&guide_low), &planes(&src_low), &planes(&full), 2, 1e-2))
}

fn psnr_case(seed: u64) -> f64 {
    let (h, w) = dims(seed, 1, 12);
    let a = super::uniform(&[3, h, w], 0.0, 1.0, seed);
    let b = super::uniform(&[3, h, w], 0.0, 1.0, seed + 1);
    (psnr(&a, &b, 1.0).unwrap() - psnr_direct(&planes(&a), &planes(&b))).abs()
}

fn ssim_case(seed: u64) -> f64 {
    let (h, w) = dims(seed, 11, 20);
    let a = super::uniform(&[1, h, w], 0.0, 1.0, seed);
    let noise = super::uniform(&[1, h, w], -0.2, 0.2, seed + 1);
    let b = Tensor::from_fn(&[1, h, w], |i| (a.data()[i] * 0.8 + noise.data()[i]).clamp(0.0, 1.0));
    (ssim_plane(&a, &b, 1.0).unwrap() - ssim_direct(&planes(&a)[0], &planes(&b)[0])).abs()
}

pub fn oracle_suite() -> Vec<OracleCase> {
    vec![
        OracleCase { name: "conv2d", tol: 1e-5, run: conv_case },
        OracleCase { name: "box_filter", tol: 1e-6, run: box_case },
        OracleCase { name: "patch priors", tol: 0.0, run: patch_case },
        OracleCase { name: "resize_bilinear", tol: 1e-6, run: resize_case },
        OracleCase { name: "guided filter", tol: 1e-5, run: guided_case },
        OracleCase { name: "psnr", tol: 1e-6, run: psnr_case },
        OracleCase { name: "ssim", tol: 1e-4, run: ssim_case },
    ]
}
