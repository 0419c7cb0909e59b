//! Pointwise ops. Binary ops broadcast the right operand.

use std::rc::Rc;

use super::tape::Var;
use super::{Tensor, EPS_SAFE};
use crate::error::{Error, Result};

/// How the right operand of a binary op is indexed against the left.
#[derive(Clone, Debug)]
enum Broadcast {
    Same,
    Scalar,
    /// Left shape padded to rank 4, with right-operand strides (0 where broadcast).
    Strided { dims: [usize; 4], strides: [usize; 4] },
}

impl Broadcast {
    fn resolve(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Self::Same);
        }
        if b.iter().product::<usize>() == 1 {
            return Ok(Self::Scalar);
        }
        if a.len() != b.len() || a.len() > 4 {
            return Err(Error::shape(
                op,
                format!("cannot broadcast {b:?} onto {a:?}"),
            ));
        }
        let pad = 4 - a.len();
        let mut dims = [1usize; 4];
        let mut bdims = [1usize; 4];
        for (i, (&da, &db)) in a.iter().zip(b).enumerate() {
            if db != da && db != 1 {
                return Err(Error::shape(
                    op,
                    format!("dimension {i}: right operand has {db}, expected {da} or 1"),
                ));
            }
            dims[pad + i] = da;
            bdims[pad + i] = db;
        }
        let mut strides = [0usize; 4];
        let mut acc = 1;
        for i in (0..4).rev() {
            strides[i] = if bdims[i] == 1 { 0 } else { acc };
            acc *= bdims[i];
        }
        Ok(Self::Strided { dims, strides })
    }

    /// Calls `f(out_index, b_index)` for every element of the left operand.
    fn for_each(&self, n: usize, mut f: impl FnMut(usize, usize)) {
        match self {
            Self::Same => (0..n).for_each(|i| f(i, i)),
            Self::Scalar => (0..n).for_each(|i| f(i, 0)),
            Self::Strided { dims, strides } => {
                let mut i = 0;
                for d0 in 0..dims[0] {
                    for d1 in 0..dims[1] {
                        for d2 in 0..dims[2] {
                            let base = d0 * strides[0] + d1 * strides[1] + d2 * strides[2];
                            for d3 in 0..dims[3] {
                                f(i, base + d3 * strides[3]);
                                i += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

type Pointwise2 = fn(f32, f32) -> f32;
/// Partial derivative given `(a, b, out)`.
type Partial2 = fn(f32, f32, f32) -> f32;

fn binary<'t>(
    op: &'static str,
    a: &Var<'t>,
    b: &Var<'t>,
    f: Pointwise2,
    da: Partial2,
    db: Partial2,
) -> Result<Var<'t>> {
    let bc = Broadcast::resolve(op, a.shape(), b.shape())?;
    let (av, bv) = (a.value_rc(), b.value_rc());
    let n = av.numel();
    let mut out = vec![0.0f32; n];
    bc.for_each(n, |i, j| out[i] = f(av.data()[i], bv.data()[j]));
    let value = Tensor::new(av.shape(), out)?;
    let out_rc = Rc::new(value.clone());
    a.tape()
        .record(op, value, &[a, b], n as u64, move |g, mask| {
            let (ad, bd, od) = (av.data(), bv.data(), out_rc.data());
            let ga = mask[0].then(|| {
                let mut ga = vec![0.0; n];
                bc.for_each(n, |i, j| ga[i] = g[i] * da(ad[i], bd[j], od[i]));
                ga
            });
            let gb = mask[1].then(|| {
                let mut gb = vec![0.0; bd.len()];
                bc.for_each(n, |i, j| gb[j] += g[i] * db(ad[i], bd[j], od[i]));
                gb
            });
            vec![ga, gb]
        })
}

fn unary<'t, F, D>(op: &'static str, x: &Var<'t>, f: F, df: D) -> Result<Var<'t>>
where
    F: Fn(f32) -> f32,
    D: Fn(f32, f32) -> f32 + 'static,
{
    let xv = x.value_rc();
    let value = xv.map(&f);
    let n = value.numel();
    let out_rc = Rc::new(value.clone());
    x.tape().record(op, value, &[x], n as u64, move |g, _| {
        let grad = g
            .iter()
            .zip(xv.data())
            .zip(out_rc.data())
            .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
            .collect();
        vec![Some(grad)]
    })
}

pub(crate) fn sigmoid_f(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_f(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        binary("add", self, other, |a, b| a + b, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        binary("sub", self, other, |a, b| a - b, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        binary("mul", self, other, |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    /// `self / max(other, EPS_SAFE)`.
    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        binary(
            "div",
            self,
            other,
            |a, b| a / b.max(EPS_SAFE),
            |_, b, _| 1.0 / b.max(EPS_SAFE),
            |a, b, _| if b > EPS_SAFE { -a / (b * b) } else { 0.0 },
        )
    }

    /// `max(self, EPS_SAFE) ^ exponent`, differentiable in both arguments.
    pub fn pow(&self, exponent: &Var<'t>) -> Result<Var<'t>> {
        binary(
            "pow",
            self,
            exponent,
            |a, p| a.max(EPS_SAFE).powf(p),
            |a, p, _| {
                if a > EPS_SAFE {
                    p * a.powf(p - 1.0)
                } else {
                    0.0
                }
            },
            |a, _, y| y * a.max(EPS_SAFE).ln(),
        )
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        unary("exp", self, f32::exp, |_, y| y)
    }

    /// `ln(max(self, EPS_SAFE))`.
    pub fn log(&self) -> Result<Var<'t>> {
        unary(
            "log",
            self,
            |x| x.max(EPS_SAFE).ln(),
            |x, _| if x > EPS_SAFE { 1.0 / x } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        unary("sigmoid", self, sigmoid_f, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.tape().note_branches(|| self.value().data().iter().map(|&x| (x > 0.0) as u32));
        unary("relu", self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softplus(&self) -> Result<Var<'t>> {
        unary("softplus", self, softplus_f, |x, _| sigmoid_f(x))
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&self) -> Result<Var<'t>> {
        self.tape().note_branches(|| self.value().data().iter().map(|&x| (x > 0.0) as u32 + 2 * (x < 0.0) as u32));
        unary("abs", self, f32::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Result<Var<'t>> {
        unary("square", self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        unary("neg", self, |x| -x, |_, _| -1.0)
    }

    pub fn add_scalar(&self, s: f32) -> Result<Var<'t>> {
        unary("add_scalar", self, move |x| x + s, |_, _| 1.0)
    }

    pub fn scale(&self, s: f32) -> Result<Var<'t>> {
        unary("scale", self, move |x| x * s, move |_, _| s)
    }

    /// Clamps into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&self, lo: f32, hi: f32) -> Result<Var<'t>> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        self.tape()
            .note_branches(|| self.value().data().iter().map(move |&x| (x < lo) as u32 + 2 * (x > hi) as u32));
        unary(
            "clamp",
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }
}
