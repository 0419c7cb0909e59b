//! Training objectives. Every norm is a mean over elements, so the weights do
//! not depend on resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EnhancedOutput, EnhancedVars};
use crate::priors::LUMA_WEIGHTS;
use crate::tensor::{resize_bilinear_forward, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// L1 term.
    pub l1: f32,
    /// Perceptual proxy term.
    pub perceptual: f32,
    /// Distillation term.
    pub kd: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            perceptual: 0.01,
            kd: 0.1,
        }
    }
}

fn same_shape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    same_shape("l1_loss", a, b)?;
    a.sub(b)?.abs()?.mean()
}

/// Mean squared difference.
pub fn mse_loss<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    same_shape("mse_loss", a, b)?;
    a.sub(b)?.square()?.mean()
}

/// Fixed multi-scale filter bank standing in for a pretrained feature network.
///
/// At each scale the luma plane is mean-pooled by the scale factor, then
/// filtered into a Gaussian-blurred plane and horizontal and vertical
/// central-difference planes.
#[derive(Clone, Debug)]
pub struct ProxyFeatureExtractor {
    scales: Vec<usize>,
    luma: Tensor,
    bank: Tensor,
    zero1: Tensor,
    zero3: Tensor,
}

impl Default for ProxyFeatureExtractor {
    fn default() -> Self {
        Self::new(&[1, 2, 4], 1.0)
    }
}

impl ProxyFeatureExtractor {
    const K: usize = 5;

    pub fn new(scales: &[usize], sigma: f32) -> Self {
        let k = Self::K;
        let r = (k / 2) as i32;
        let gauss: Vec<f32> = (-r..=r).map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f32 = gauss.iter().sum::<f32>().powi(2);
        let mut bank = vec![0.0f32; 3 * k * k];
        for y in 0..k {
            for x in 0..k {
                bank[y * k + x] = gauss[y] * gauss[x] / norm;
            }
        }
        let c = k / 2;
        bank[k * k + c * k + c + 1] = 0.5;
        bank[k * k + c * k + c - 1] = -0.5;
        bank[2 * k * k + (c + 1) * k + c] = 0.5;
        bank[2 * k * k + (c - 1) * k + c] = -0.5;
        Self {
            scales: scales.to_vec(),
            luma: Tensor::new(&[1, 3, 1, 1], LUMA_WEIGHTS.to_vec()).expect("fixed shape"),
            bank: Tensor::new(&[3, 1, k, k], bank).expect("fixed shape"),
            zero1: Tensor::zeros(&[1]),
            zero3: Tensor::zeros(&[3]),
        }
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    /// `[3, h_s, w_s]` feature map (blur, d/dx, d/dy) per usable scale. Scales
    /// coarser than the image are skipped.
    pub fn features<'t>(&self, img: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let (c, h, w) = img.value().chw()?;
        if c != 3 {
            return Err(Error::shape("proxy_features", format!("expected 3 channels, got {c}")));
        }
        let tape = img.tape();
        let y = img.conv2d(&tape.constant(self.luma.clone()), &tape.constant(self.zero1.clone()), 1, 0)?;
        let bank = tape.constant(self.bank.clone());
        let bias = tape.constant(self.zero3.clone());
        let mut out = Vec::with_capacity(self.scales.len());
        for &s in &self.scales {
            if s > h || s > w {
                continue;
            }
            let ys = if s == 1 { y.clone() } else { y.avg_pool(s)? };
            out.push(ys.conv2d(&bank, &bias, 1, Self::K / 2)?);
        }
        Ok(out)
    }
}

/// Feature-space MSE averaged over scales.
pub fn perceptual_proxy_loss<'t>(a: &Var<'t>, b: &Var<'t>, psi: &ProxyFeatureExtractor) -> Result<Var<'t>> {
    same_shape("perceptual_proxy_loss", a, b)?;
    let (fa, fb) = (psi.features(a)?, psi.features(b)?);
    let mut total: Option<Var<'t>> = None;
    for (x, y) in fa.iter().zip(&fb) {
        let term = mse_loss(x, y)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    let n = fa.len();
    total
        .ok_or_else(|| Error::invalid("no usable proxy scale"))?
        .scale(1.0 / n as f32)
}

fn resized(t: &Tensor, like: &Var<'_>) -> Result<Tensor> {
    let (_, h, w) = like.value().chw()?;
    let (_, th, tw) = t.chw()?;
    if (h, w) == (th, tw) {
        Ok(t.clone())
    } else {
        resize_bilinear_forward(t, h, w)
    }
}

/// Sum of MSEs between teacher and student over γ, Ã and the intersection.
/// Teacher maps are resized to the student's resolution.
pub fn kd_loss<'t>(teacher: &EnhancedOutput, student: &EnhancedVars<'t>) -> Result<Var<'t>> {
    let tape = student.a_tilde.tape();
    let missing = |what: &str| Error::invalid(format!("distillation needs {what} on both networks"));
    let (tg, sg) = match (teacher.gamma, &student.gamma) {
        (Some(t), Some(s)) => (t, s),
        _ => return Err(missing("a gamma branch")),
    };
    let (ti, si) = match (&teacher.intersection, &student.intersection) {
        (Some(t), Some(s)) => (t, s),
        _ => return Err(missing("an intersection module")),
    };
    let gamma = mse_loss(sg, &tape.constant(Tensor::scalar(tg)))?;
    let a = mse_loss(&student.a_tilde, &tape.constant(resized(&teacher.a_tilde, &student.a_tilde)?))?;
    let inter = mse_loss(si, &tape.constant(resized(ti, si)?))?;
    gamma.add(&a)?.add(&inter)
}

/// `λ1 · L1 + λ2 · perceptual`. A zero weight skips its term.
pub fn enhance_loss<'t>(
    pred: &Var<'t>,
    gt: &Var<'t>,
    w: &LossWeights,
    psi: &ProxyFeatureExtractor,
) -> Result<Var<'t>> {
    let mut total = l1_loss(pred, gt)?.scale(w.l1)?;
    if w.perceptual != 0.0 {
        total = total.add(&perceptual_proxy_loss(pred, gt, psi)?.scale(w.perceptual)?)?;
    }
    Ok(total)
}

/// [`enhance_loss`] on the student's output plus `λ3 · kd_loss`.
pub fn total_loss_dgf<'t>(
    student: &EnhancedVars<'t>,
    gt: &Var<'t>,
    teacher: &EnhancedOutput,
    w: &LossWeights,
    psi: &ProxyFeatureExtractor,
) -> Result<Var<'t>> {
    let base = enhance_loss(&student.r_hat_raw, gt, w, psi)?;
    if w.kd == 0.0 {
        return Ok(base);
    }
    base.add(&kd_loss(teacher, student)?.scale(w.kd)?)
}
