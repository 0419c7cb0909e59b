//! 2-D convolution via im2col and `f64` GEMM, processed in bands of output rows.

use super::tape::Var;
use super::Tensor;
use crate::error::{Error, Result};

/// Upper bound on im2col buffer elements per band.
const BAND_ELEMS: usize = 1 << 20;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn resolve(input: &[usize], weight: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [cin, h, w] = input[..] else {
            return Err(Error::shape(
                "conv2d",
                format!("input must be [C_in, H, W], got {input:?}"),
            ));
        };
        let [cout, wcin, kh, kw] = weight[..] else {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be [C_out, C_in, k, k], got {weight:?}"),
            ));
        };
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("C_in: input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square with odd size, got {kh}x{kw}"),
            ));
        }
        if bias != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("C_out: bias has shape {bias:?}, weight has {cout} filters"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("H/W: padded input {}x{} smaller than kernel {k}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn band_rows(&self) -> usize {
        (BAND_ELEMS / (self.patch_len() * self.ow).max(1)).clamp(1, self.oh)
    }

    fn bands(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.band_rows();
        let oh = self.oh;
        (0..oh).step_by(step).map(move |r0| (r0, (r0 + step).min(oh)))
    }

    fn flops(&self) -> u64 {
        2 * (self.k * self.k * self.cin * self.cout * self.oh * self.ow) as u64
    }

    /// Signed input coordinate for output position `o` and kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize) -> isize {
        (o * self.stride + t) as isize - self.pad as isize
    }

    /// Fills `cols[(ci*k + ky)*k + kx][(r - r0)*ow + ox]` for output rows `r0..r1`.
    fn im2col(&self, x: &[f32], r0: usize, r1: usize, cols: &mut [f64]) {
        let n = (r1 - r0) * self.ow;
        let mut row = 0;
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for (bi, r) in (r0..r1).enumerate() {
                        let iy = self.src(r, ky);
                        let seg = &mut dst[bi * self.ow..(bi + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            seg.fill(0.0);
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in seg.iter_mut().enumerate() {
                            let ix = self.src(ox, kx);
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src_row[ix as usize] as f64
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds `cols` back onto the input gradient.
    fn col2im(&self, cols: &[f64], r0: usize, r1: usize, dx: &mut [f64]) {
        let n = (r1 - r0) * self.ow;
        let mut row = 0;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let src = &cols[row * n..(row + 1) * n];
                    for (bi, r) in (r0..r1).enumerate() {
                        let iy = self.src(r, ky);
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &v) in src[bi * self.ow..(bi + 1) * self.ow].iter().enumerate() {
                            let ix = self.src(ox, kx);
                            if ix >= 0 && ix < self.w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c[m x n] = a[m x k] * b[k x n]` with explicit strides, accumulating when `beta = 1`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert!(c.len() >= m * n);
    // SAFETY: bounds asserted above; c is row-major m x n and does not alias a or b.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn forward(g: &Geometry, x: &[f32], weight: &[f64], bias: &[f32]) -> Vec<f32> {
    let kk = g.patch_len();
    let mut out = vec![0.0f32; g.cout * g.oh * g.ow];
    let mut cols = vec![0.0f64; kk * g.band_rows() * g.ow];
    let mut acc = vec![0.0f64; g.cout * g.band_rows() * g.ow];
    for (r0, r1) in g.bands() {
        let n = (r1 - r0) * g.ow;
        g.im2col(x, r0, r1, &mut cols);
        gemm(g.cout, kk, n, weight, (kk, 1), &cols, (n, 1), 0.0, &mut acc);
        for co in 0..g.cout {
            let dst = &mut out[(co * g.oh + r0) * g.ow..(co * g.oh + r1) * g.ow];
            for (d, &a) in dst.iter_mut().zip(&acc[co * n..(co + 1) * n]) {
                *d = (a + bias[co] as f64) as f32;
            }
        }
    }
    out
}

/// Convolution outside of any tape.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = Geometry::resolve(input.shape(), weight.shape(), bias.shape(), stride, padding)?;
    let w64: Vec<f64> = weight.data().iter().map(|&v| v as f64).collect();
    Tensor::new(&[g.cout, g.oh, g.ow], forward(&g, input.data(), &w64, bias.data()))
}

impl<'t> Var<'t> {
    /// `[C_in, H, W] * [C_out, C_in, k, k] + [C_out] -> [C_out, H', W']`.
    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let g = Geometry::resolve(self.shape(), weight.shape(), bias.shape(), stride, padding)?;
        let (xv, wv) = (self.value_rc(), weight.value_rc());
        let w64: Vec<f64> = wv.data().iter().map(|&v| v as f64).collect();
        let out = forward(&g, xv.data(), &w64, bias.value().data());
        let value = Tensor::new(&[g.cout, g.oh, g.ow], out)?;
        self.tape().record("conv2d", value, &[self, weight, bias], g.flops(), move |gy, mask| {
            let kk = g.patch_len();
            let plane_out = g.oh * g.ow;
            let mut dx = mask[0].then(|| vec![0.0f64; g.cin * g.h * g.w]);
            let mut dw = mask[1].then(|| vec![0.0f64; g.cout * kk]);
            let db = mask[2].then(|| {
                gy.chunks_exact(plane_out)
                    .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() as f32)
                    .collect::<Vec<f32>>()
            });
            if dx.is_some() || dw.is_some() {
                let band = g.band_rows() * g.ow;
                let mut cols = vec![0.0f64; kk * band];
                let mut gy_band = vec![0.0f64; g.cout * band];
                for (r0, r1) in g.bands() {
                    let n = (r1 - r0) * g.ow;
                    for co in 0..g.cout {
                        let src = &gy[co * plane_out + r0 * g.ow..co * plane_out + r1 * g.ow];
                        for (d, &s) in gy_band[co * n..(co + 1) * n].iter_mut().zip(src) {
                            *d = s as f64;
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        g.im2col(xv.data(), r0, r1, &mut cols);
                        // dW += gY[cout x n] * cols^T[n x kk]
                        gemm(g.cout, n, kk, &gy_band, (n, 1), &cols, (1, n), 1.0, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dcols[kk x n] = W^T[kk x cout] * gY[cout x n]
                        gemm(kk, g.cout, n, &w64, (1, kk), &gy_band, (n, 1), 0.0, &mut cols);
                        g.col2im(&cols[..kk * n], r0, r1, dx);
                    }
                }
            }
            let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
            vec![dx.map(to32), dw.map(to32), db]
        })
    }
}
