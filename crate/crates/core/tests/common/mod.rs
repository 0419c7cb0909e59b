//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod grad;
pub mod oracles;

use std::path::Path;

use cpga_core::data::{save_image, PairedSample, HIGH_DIR, LOW_DIR};
use cpga_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() / 255.0)
}

/// A well-exposed synthetic scene: a colour gradient, a few flat shapes and a
/// sinusoidal texture.
pub fn scene(h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let base: [[f32; 3]; 2] = [
        [r.gen_range(0.2..0.8), r.gen_range(0.2..0.8), r.gen_range(0.2..0.8)],
        [r.gen_range(0.2..0.8), r.gen_range(0.2..0.8), r.gen_range(0.2..0.8)],
    ];
    let angle: f32 = r.gen_range(0.0..std::f32::consts::PI);
    let shapes: Vec<(f32, f32, f32, f32, [f32; 3])> = (0..4)
        .map(|_| {
            (
                r.gen_range(0.0..h as f32),
                r.gen_range(0.0..w as f32),
                r.gen_range(2.0..h as f32 / 3.0),
                r.gen_range(2.0..w as f32 / 3.0),
                [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)],
            )
        })
        .collect();
    let freq: f32 = r.gen_range(0.3..0.9);
    let amp: f32 = r.gen_range(0.03..0.1);
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f32 / w as f32) * angle.cos() + (y as f32 / h as f32) * angle.sin();
            let u = u.clamp(0.0, 1.0);
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                px[c] = base[0][c] * (1.0 - u) + base[1][c] * u;
            }
            for &(cy, cx, ry, rx, col) in &shapes {
                let d = ((y as f32 - cy) / ry).powi(2) + ((x as f32 - cx) / rx).powi(2);
                if d < 1.0 {
                    px = col;
                }
            }
            let tex = amp * (freq * x as f32 + 0.7 * freq * y as f32).sin();
            for c in 0..3 {
                data[(c * h + y) * w + x] = (px[c] + tex).clamp(0.0, 1.0);
            }
        }
    }
    quantize(&Tensor::new(&[3, h, w], data).unwrap())
}

/// Darkens a scene the way an under-exposed capture would: a global exposure
/// drop, a mild tone curve, a colour cast and sensor noise, then 8-bit
/// quantisation.
pub fn darken(gt: &Tensor, seed: u64) -> Tensor {
    let mut r = rng(seed ^ 0x5eed);
    let exposure: f32 = r.gen_range(0.06..0.14);
    let cast = [r.gen_range(0.9..1.1), r.gen_range(0.9..1.1), r.gen_range(0.9..1.1)];
    let (_, h, w) = gt.chw().unwrap();
    let plane = h * w;
    let noisy = Tensor::from_fn(gt.shape(), |i| {
        let c = i / plane;
        let v = exposure * cast[c] * gt.data()[i].powf(1.3);
        v + r.gen_range(-0.008..0.008)
    });
    quantize(&noisy)
}

pub fn synthetic_pairs(n: usize, h: usize, w: usize, seed: u64) -> Vec<PairedSample> {
    (0..n)
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let gt = scene(h, w, s);
            PairedSample::new(darken(&gt, s), gt, format!("{i}")).unwrap()
        })
        .collect()
}

pub fn write_dataset(root: &Path, samples: &[PairedSample]) {
    std::fs::create_dir_all(root.join(LOW_DIR)).unwrap();
    std::fs::create_dir_all(root.join(HIGH_DIR)).unwrap();
    for s in samples {
        save_image(&s.low, &root.join(LOW_DIR).join(format!("{}.png", s.id))).unwrap();
        save_image(&s.gt, &root.join(HIGH_DIR).join(format!("{}.png", s.id))).unwrap();
    }
}
