//! Reductions. Accumulation runs in `f64`.

use super::tape::Var;
use super::Tensor;
use crate::error::{Error, Result};

impl<'t> Var<'t> {
    pub fn sum(&self) -> Result<Var<'t>> {
        let n = self.value().numel();
        let s: f64 = self.value().data().iter().map(|&v| v as f64).sum();
        self.tape().record(
            "sum",
            Tensor::scalar(s as f32),
            &[self],
            n as u64,
            move |g, _| vec![Some(vec![g[0]; n])],
        )
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value().numel();
        let s: f64 = self.value().data().iter().map(|&v| v as f64).sum();
        self.tape().record(
            "mean",
            Tensor::scalar((s / n as f64) as f32),
            &[self],
            n as u64,
            move |g, _| vec![Some(vec![g[0] / n as f32; n])],
        )
    }

    /// `[C, H, W] -> [C]`, arithmetic mean of each channel plane.
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let (c, h, w) = self.value().chw()?;
        let plane = h * w;
        let means = self
            .value()
            .data()
            .chunks_exact(plane)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        let value = Tensor::new(&[c], means)?;
        self.tape().record(
            "global_avg_pool",
            value,
            &[self],
            (c * plane) as u64,
            move |g, _| {
                let inv = 1.0 / plane as f32;
                let grad = g.iter().flat_map(|&gc| std::iter::repeat(gc * inv).take(plane));
                vec![Some(grad.collect())]
            },
        )
    }

    /// `[C, H, W] -> [C]`, maximum of each channel plane (first index wins ties).
    pub fn global_max_pool(&self) -> Result<Var<'t>> {
        let (c, h, w) = self.value().chw()?;
        let plane = h * w;
        let (maxes, argmax): (Vec<f32>, Vec<usize>) = self
            .value()
            .data()
            .chunks_exact(plane)
            .map(|p| {
                let (idx, &m) = p
                    .iter()
                    .enumerate()
                    .fold((0, &p[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
                (m, idx)
            })
            .unzip();
        let value = Tensor::new(&[c], maxes)?;
        self.tape().note_branches(|| argmax.iter().map(|&i| i as u32));
        self.tape().record(
            "global_max_pool",
            value,
            &[self],
            (c * plane) as u64,
            move |g, _| {
                let mut grad = vec![0.0; c * plane];
                for (ch, &idx) in argmax.iter().enumerate() {
                    grad[ch * plane + idx] = g[ch];
                }
                vec![Some(grad)]
            },
        )
    }

    /// `[C, H, W] -> [1, H, W]`, mean across channels.
    pub fn channel_mean(&self) -> Result<Var<'t>> {
        let (c, h, w) = self.value().chw()?;
        let plane = h * w;
        let data = self.value().data();
        let out = (0..plane)
            .map(|i| ((0..c).map(|ch| data[ch * plane + i] as f64).sum::<f64>() / c as f64) as f32)
            .collect();
        let value = Tensor::new(&[1, h, w], out)?;
        self.tape().record(
            "channel_mean",
            value,
            &[self],
            (c * plane) as u64,
            move |g, _| {
                let inv = 1.0 / c as f32;
                let grad = (0..c).flat_map(|_| g.iter().map(move |&gi| gi * inv));
                vec![Some(grad.collect())]
            },
        )
    }

    /// `[C, H, W] -> [1, H, W]`, maximum across channels.
    pub fn channel_max(&self) -> Result<Var<'t>> {
        let (c, h, w) = self.value().chw()?;
        if c == 0 {
            return Err(Error::shape("channel_max", "no channels"));
        }
        let plane = h * w;
        let data = self.value().data();
        let mut out = data[..plane].to_vec();
        let mut argmax = vec![0usize; plane];
        for ch in 1..c {
            for i in 0..plane {
                let v = data[ch * plane + i];
                if v > out[i] {
                    out[i] = v;
                    argmax[i] = ch;
                }
            }
        }
        let value = Tensor::new(&[1, h, w], out)?;
        self.tape().note_branches(|| argmax.iter().map(|&i| i as u32));
        self.tape().record(
            "channel_max",
            value,
            &[self],
            (c * plane) as u64,
            move |g, _| {
                let mut grad = vec![0.0; c * plane];
                for (i, &ch) in argmax.iter().enumerate() {
                    grad[ch * plane + i] = g[i];
                }
                vec![Some(grad)]
            },
        )
    }
}
