//! Channel priors of an RGB image: dark channel, bright channel and BT.601 luma.
//!
//! The network consumes the pixel-wise variants stacked as `[dark, bright, Y]`.
//! Patch variants (min/max over a clipped square window) are kept for
//! inspection and comparison with the classical dark-channel formulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// BT.601 full-range luma weights for R, G, B.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// Plane names of a [`PriorStack`], in storage order.
pub const PRIOR_PLANES: [&str; 3] = ["dark", "bright", "y"];

/// Square window of side `2 * radius + 1`, clipped at image borders.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub radius: usize,
}

/// `[3, H, W]` map holding dark, bright and luma planes in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorStack {
    planes: Tensor,
}

impl PriorStack {
    pub fn planes(&self) -> &Tensor {
        &self.planes
    }

    pub fn into_tensor(self) -> Tensor {
        self.planes
    }

    pub fn dark(&self) -> Tensor {
        self.planes.channel(0).expect("prior stack has 3 planes")
    }

    pub fn bright(&self) -> Tensor {
        self.planes.channel(1).expect("prior stack has 3 planes")
    }

    pub fn luma(&self) -> Tensor {
        self.planes.channel(2).expect("prior stack has 3 planes")
    }
}

fn rgb_dims(op: &'static str, img: &Tensor) -> Result<(usize, usize)> {
    let (c, h, w) = img.chw()?;
    if c != 3 {
        return Err(Error::shape(op, format!("expected 3 channels, got {c}")));
    }
    Ok((h, w))
}

fn per_pixel(op: &'static str, img: &Tensor, f: impl Fn(f32, f32, f32) -> f32) -> Result<Tensor> {
    let (h, w) = rgb_dims(op, img)?;
    let n = h * w;
    let d = img.data();
    let out = (0..n).map(|i| f(d[i], d[n + i], d[2 * n + i])).collect();
    Tensor::new(&[1, h, w], out)
}

/// Per-pixel minimum over R, G, B.
pub fn dark_channel(img: &Tensor) -> Result<Tensor> {
    per_pixel("dark_channel", img, |r, g, b| r.min(g).min(b))
}

/// Per-pixel maximum over R, G, B.
pub fn bright_channel(img: &Tensor) -> Result<Tensor> {
    per_pixel("bright_channel", img, |r, g, b| r.max(g).max(b))
}

pub fn luminance_y(img: &Tensor) -> Result<Tensor> {
    let [wr, wg, wb] = LUMA_WEIGHTS;
    per_pixel("luminance_y", img, |r, g, b| wr * r + wg * g + wb * b)
}

/// Separable min/max filter over a clipped window.
fn window_extreme(plane: &Tensor, radius: usize, pick: fn(f32, f32) -> f32) -> Tensor {
    if radius == 0 {
        return plane.clone();
    }
    let (_, h, w) = plane.chw().expect("single plane");
    let src = plane.data();
    let mut horiz = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            horiz[y * w + x] = src[y * w + lo..=y * w + hi]
                .iter()
                .copied()
                .reduce(pick)
                .expect("window is non-empty");
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(radius), (y + radius).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (lo..=hi)
                .map(|yy| horiz[yy * w + x])
                .reduce(pick)
                .expect("window is non-empty");
        }
    }
    Tensor::new(&[1, h, w], out).expect("same shape as input plane")
}

/// Minimum over channels, then over the window around each pixel.
pub fn dark_channel_patch(img: &Tensor, spec: PatchSpec) -> Result<Tensor> {
    Ok(window_extreme(&dark_channel(img)?, spec.radius, f32::min))
}

/// Maximum over channels, then over the window around each pixel.
pub fn bright_channel_patch(img: &Tensor, spec: PatchSpec) -> Result<Tensor> {
    Ok(window_extreme(&bright_channel(img)?, spec.radius, f32::max))
}

pub fn build_prior_stack(img: &Tensor) -> Result<PriorStack> {
    let planes = Tensor::concat_channels(&[&dark_channel(img)?, &bright_channel(img)?, &luminance_y(img)?])?;
    Ok(PriorStack { planes })
}
