//! Resampling and windowed averaging over `[C, H, W]` tensors.

use super::tape::Var;
use super::Tensor;
use crate::error::{Error, Result};

/// Per-element cost charged for a bilinear sample (4 multiplies, 3 adds).
pub(crate) const RESIZE_FLOPS: u64 = 7;
/// Per-element cost charged for a two-pass running-sum box filter.
pub(crate) const BOX_FLOPS: u64 = 5;

/// Source taps for one output coordinate of a half-pixel-centre resize.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f32,
}

fn taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: (pos - lo as f64) as f32,
            }
        })
        .collect()
}

fn resize_plane(src: &[f32], w: usize, ty: &[Tap], tx: &[Tap], dst: &mut [f32]) {
    let w2 = tx.len();
    for (y, t) in ty.iter().enumerate() {
        let r0 = &src[t.lo * w..(t.lo + 1) * w];
        let r1 = &src[t.hi * w..(t.hi + 1) * w];
        for (x, s) in tx.iter().enumerate() {
            let top = r0[s.lo] * (1.0 - s.frac) + r0[s.hi] * s.frac;
            let bot = r1[s.lo] * (1.0 - s.frac) + r1[s.hi] * s.frac;
            dst[y * w2 + x] = top * (1.0 - t.frac) + bot * t.frac;
        }
    }
}

fn check_target(op: &'static str, h2: usize, w2: usize) -> Result<()> {
    if h2 == 0 || w2 == 0 {
        return Err(Error::shape(op, format!("target size {h2}x{w2} must be positive")));
    }
    Ok(())
}

/// Bilinear resize with half-pixel-centre alignment, outside of any tape.
pub fn resize_bilinear_forward(x: &Tensor, h2: usize, w2: usize) -> Result<Tensor> {
    check_target("resize_bilinear", h2, w2)?;
    let (c, h, w) = x.chw()?;
    if (h, w) == (h2, w2) {
        return Ok(x.clone());
    }
    let (ty, tx) = (taps(h, h2), taps(w, w2));
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        resize_plane(
            &x.data()[ch * h * w..(ch + 1) * h * w],
            w,
            &ty,
            &tx,
            &mut out[ch * h2 * w2..(ch + 1) * h2 * w2],
        );
    }
    Tensor::new(&[c, h2, w2], out)
}

/// Running-sum window totals over `(2r+1)^2` windows clipped to the plane.
fn box_sum(plane: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut horiz = vec![0.0f64; h * w];
    let mut prefix = vec![0.0f64; w.max(h) + 1];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            prefix[x + 1] = prefix[x] + row[x];
        }
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            horiz[y * w + x] = prefix[hi + 1] - prefix[lo];
        }
    }
    let mut out = vec![0.0f64; h * w];
    for x in 0..w {
        for y in 0..h {
            prefix[y + 1] = prefix[y] + horiz[y * w + x];
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            out[y * w + x] = prefix[hi + 1] - prefix[lo];
        }
    }
    out
}

/// Number of in-bounds pixels in each clipped window.
fn window_counts(h: usize, w: usize, r: usize) -> Vec<f64> {
    let span = |i: usize, n: usize| ((i + r).min(n - 1) - i.saturating_sub(r) + 1) as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(span(y, h) * span(x, w));
        }
    }
    out
}

/// Edge-normalised box mean, outside of any tape.
pub fn box_filter_forward(x: &Tensor, radius: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if radius == 0 {
        return Ok(x.clone());
    }
    let counts = window_counts(h, w, radius);
    let plane = h * w;
    let mut out = Vec::with_capacity(x.numel());
    for ch in 0..c {
        let src: Vec<f64> = x.data()[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let sums = box_sum(&src, h, w, radius);
        out.extend(sums.iter().zip(&counts).map(|(s, n)| (s / n) as f32));
    }
    Tensor::new(&[c, h, w], out)
}

impl<'t> Var<'t> {
    /// Bilinear resize to `h2 x w2` with half-pixel-centre alignment.
    pub fn resize_bilinear(&self, h2: usize, w2: usize) -> Result<Var<'t>> {
        let (c, h, w) = self.value().chw()?;
        let value = resize_bilinear_forward(self.value(), h2, w2)?;
        let flops = RESIZE_FLOPS * value.numel() as u64;
        let (ty, tx) = (taps(h, h2), taps(w, w2));
        self.tape().record("resize_bilinear", value, &[self], flops, move |g, _| {
            if (h, w) == (h2, w2) {
                return vec![Some(g.to_vec())];
            }
            let mut dx = vec![0.0f32; c * h * w];
            for ch in 0..c {
                let gp = &g[ch * h2 * w2..(ch + 1) * h2 * w2];
                let dp = &mut dx[ch * h * w..(ch + 1) * h * w];
                for (y, t) in ty.iter().enumerate() {
                    for (x, s) in tx.iter().enumerate() {
                        let v = gp[y * w2 + x];
                        let (top, bot) = (v * (1.0 - t.frac), v * t.frac);
                        dp[t.lo * w + s.lo] += top * (1.0 - s.frac);
                        dp[t.lo * w + s.hi] += top * s.frac;
                        dp[t.hi * w + s.lo] += bot * (1.0 - s.frac);
                        dp[t.hi * w + s.hi] += bot * s.frac;
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Mean over the `(2r+1)^2` window clipped to the image, via running sums.
    pub fn box_filter(&self, radius: usize) -> Result<Var<'t>> {
        let (c, h, w) = self.value().chw()?;
        let value = box_filter_forward(self.value(), radius)?;
        let flops = BOX_FLOPS * value.numel() as u64;
        self.tape().record("box_filter", value, &[self], flops, move |g, _| {
            if radius == 0 {
                return vec![Some(g.to_vec())];
            }
            // Window membership is symmetric, so the adjoint is a box sum of g / count.
            let counts = window_counts(h, w, radius);
            let plane = h * w;
            let mut dx = Vec::with_capacity(c * plane);
            for ch in 0..c {
                let scaled: Vec<f64> = g[ch * plane..(ch + 1) * plane]
                    .iter()
                    .zip(&counts)
                    .map(|(&gi, n)| gi as f64 / n)
                    .collect();
                dx.extend(box_sum(&scaled, h, w, radius).into_iter().map(|v| v as f32));
            }
            vec![Some(dx)]
        })
    }

    /// Non-overlapping `k x k` mean pooling; trailing rows/columns are dropped.
    pub fn avg_pool(&self, k: usize) -> Result<Var<'t>> {
        let (c, h, w) = self.value().chw()?;
        if k == 0 || k > h || k > w {
            return Err(Error::shape(
                "avg_pool",
                format!("window {k} invalid for {h}x{w} input"),
            ));
        }
        let (h2, w2) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let src = self.value().data();
        let mut out = vec![0.0f32; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    let mut acc = 0.0f64;
                    for dy in 0..k {
                        let row = (ch * h + y * k + dy) * w + x * k;
                        acc += src[row..row + k].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    out[(ch * h2 + y) * w2 + x] = (acc * inv) as f32;
                }
            }
        }
        let value = Tensor::new(&[c, h2, w2], out)?;
        let flops = (c * h2 * w2 * k * k) as u64;
        self.tape().record("avg_pool", value, &[self], flops, move |g, _| {
            let mut dx = vec![0.0f32; c * h * w];
            let inv = inv as f32;
            for ch in 0..c {
                for y in 0..h2 * k {
                    for x in 0..w2 * k {
                        dx[(ch * h + y) * w + x] = g[(ch * h2 + y / k) * w2 + x / k] * inv;
                    }
                }
            }
            vec![Some(dx)]
        })
    }
}
