//! Fast guided filter: fit per-window linear models at low resolution, then
//! apply the upsampled coefficients to the full-resolution guide.
//!
//! Each channel of the source is filtered against the same channel of the
//! guide. Built entirely from differentiable tape ops, so gradients reach the
//! low-resolution source.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidedFilterParams {
    /// Box radius at low resolution.
    pub radius: usize,
    /// Regulariser added to the guide variance.
    pub eps: f32,
}

impl Default for GuidedFilterParams {
    fn default() -> Self {
        Self {
            radius: 1,
            eps: 1e-2,
        }
    }
}

impl GuidedFilterParams {
    pub fn validate(&self) -> Result<()> {
        if self.radius < 1 {
            return Err(Error::invalid("guided filter radius must be >= 1"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid(format!(
                "guided filter eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

pub fn fast_guided_filter<'t>(
    guide_low: &Var<'t>,
    src_low: &Var<'t>,
    guide_full: &Var<'t>,
    params: GuidedFilterParams,
) -> Result<Var<'t>> {
    params.validate()?;
    let (cg, h, w) = guide_low.value().chw()?;
    let (cs, hs, ws) = src_low.value().chw()?;
    let (cf, big_h, big_w) = guide_full.value().chw()?;
    if cg != cs || cg != cf {
        return Err(Error::shape(
            "fast_guided_filter",
            format!("channel counts differ: guide_low {cg}, src_low {cs}, guide_full {cf}"),
        ));
    }
    if (h, w) != (hs, ws) {
        return Err(Error::shape(
            "fast_guided_filter",
            format!("guide_low is {h}x{w} but src_low is {hs}x{ws}"),
        ));
    }
    let r = params.radius;
    let guide = guide_low;
    let mean_i = guide.box_filter(r)?;
    let mean_p = src_low.box_filter(r)?;
    let corr_ip = guide.mul(src_low)?.box_filter(r)?;
    let corr_ii = guide.mul(guide)?.box_filter(r)?;
    let cov_ip = corr_ip.sub(&mean_i.mul(&mean_p)?)?;
    let var_i = corr_ii.sub(&mean_i.mul(&mean_i)?)?;
    let a = cov_ip.div(&var_i.add_scalar(params.eps)?)?;
    let b = mean_p.sub(&a.mul(&mean_i)?)?;
    let mean_a = a.box_filter(r)?.resize_bilinear(big_h, big_w)?;
    let mean_b = b.box_filter(r)?.resize_bilinear(big_h, big_w)?;
    mean_a.mul(guide_full)?.add(&mean_b)
}

/// [`fast_guided_filter`] on plain tensors.
pub fn fast_guided_filter_tensors(
    guide_low: &Tensor,
    src_low: &Tensor,
    guide_full: &Tensor,
    params: GuidedFilterParams,
) -> Result<Tensor> {
    let tape = Tape::new();
    let out = fast_guided_filter(
        &tape.constant(guide_low.clone()),
        &tape.constant(src_low.clone()),
        &tape.constant(guide_full.clone()),
        params,
    )?;
    Ok(out.to_tensor())
}

/// Elementwise op count of one filter application, matching the tape's accounting.
pub(crate) fn flops(c: usize, h: usize, w: usize, big_h: usize, big_w: usize) -> u64 {
    use crate::tensor::{BOX_FLOPS, RESIZE_FLOPS};
    let low = (c * h * w) as u64;
    let full = (c * big_h * big_w) as u64;
    // 6 box filters, 10 pointwise ops at low resolution, 2 resizes, 2 pointwise at full.
    6 * BOX_FLOPS * low + 10 * low + 2 * RESIZE_FLOPS * full + 2 * full
}
