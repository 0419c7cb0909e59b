//! The enhancement network.
//!
//! Four sub-networks share one [`ParamStore`]:
//!
//! * `t_branch` maps the prior stack (or RGB) to a transmission map in `[t_min, 1]`;
//! * `a_branch` maps RGB to the airlight-complement map `Ã` in `[0, 1]`;
//! * `gamma_branch` pools RGB features into one exponent per image;
//! * `intersection` learns the overlap of `R` and `R^γ` from their concatenation.
//!
//! The local result is `R = (L - Ã) / t + Ã`, the global one `R^γ`, and the
//! fused output `R + R^γ - intersection`, clamped to `[0, 1]`.

mod config;
mod flops;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ANet, AblationRow, CpgaConfig, Fusion, GNet, TInput};
pub use layers::{Bound, Cbam, Conv, ConvSpec, ParamId, ParamStore, ResBlock, ResCbam};

use crate::error::{Error, Result};
use crate::guided_filter::fast_guided_filter;
use crate::priors::build_prior_stack;
use crate::tensor::{Tape, Tensor, Var, EPS_SAFE};
use layers::Builder;

/// Smallest spatial size accepted at full resolution.
pub const MIN_SIDE: usize = 8;

#[derive(Clone, Debug)]
struct TBranch {
    head: Conv,
    body: ResBlock,
    tail: Conv,
}

#[derive(Clone, Debug)]
enum ABody {
    Conv(Conv, Conv),
    Res(ResBlock, ResBlock),
}

#[derive(Clone, Debug)]
struct ABranch {
    head: Conv,
    body: ABody,
    tail: Conv,
}

#[derive(Clone, Debug)]
enum GBody {
    Res(ResBlock),
    ResCbam(ResCbam),
}

#[derive(Clone, Debug)]
struct GammaBranch {
    head: Conv,
    body: GBody,
    down: Conv,
    out: Conv,
}

#[derive(Clone, Debug)]
struct Intersection {
    conv1: Conv,
    conv2: Conv,
}

/// Every component of one forward pass, as plain tensors.
#[derive(Clone, Debug)]
pub struct EnhancedOutput {
    /// Final output in `[0, 1]`.
    pub r_hat: Tensor,
    /// Output before the final clamp.
    pub r_hat_raw: Tensor,
    pub r: Tensor,
    pub r_gamma: Option<Tensor>,
    pub t: Tensor,
    pub a_tilde: Tensor,
    pub gamma: Option<f32>,
    pub intersection: Option<Tensor>,
}

impl EnhancedOutput {
    /// Places every component on `tape` as a constant.
    pub fn to_vars<'t>(&self, tape: &'t Tape) -> EnhancedVars<'t> {
        let c = |t: &Tensor| tape.constant(t.clone());
        EnhancedVars {
            r_hat: c(&self.r_hat),
            r_hat_raw: c(&self.r_hat_raw),
            r: c(&self.r),
            r_gamma: self.r_gamma.as_ref().map(c),
            t: c(&self.t),
            a_tilde: c(&self.a_tilde),
            gamma: self.gamma.map(|g| tape.constant(Tensor::scalar(g))),
            intersection: self.intersection.as_ref().map(c),
        }
    }
}

/// Every component of one forward pass, still on the tape.
#[derive(Clone)]
pub struct EnhancedVars<'t> {
    pub r_hat: Var<'t>,
    pub r_hat_raw: Var<'t>,
    pub r: Var<'t>,
    pub r_gamma: Option<Var<'t>>,
    pub t: Var<'t>,
    pub a_tilde: Var<'t>,
    /// Shape `[1]`.
    pub gamma: Option<Var<'t>>,
    pub intersection: Option<Var<'t>>,
}

impl EnhancedVars<'_> {
    pub fn to_output(&self) -> EnhancedOutput {
        EnhancedOutput {
            r_hat: self.r_hat.to_tensor(),
            r_hat_raw: self.r_hat_raw.to_tensor(),
            r: self.r.to_tensor(),
            r_gamma: self.r_gamma.as_ref().map(Var::to_tensor),
            t: self.t.to_tensor(),
            a_tilde: self.a_tilde.to_tensor(),
            gamma: self.gamma.as_ref().map(|g| g.value().item()),
            intersection: self.intersection.as_ref().map(Var::to_tensor),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CpgaNet {
    config: CpgaConfig,
    params: ParamStore,
    t_branch: Option<TBranch>,
    a_branch: ABranch,
    gamma_branch: Option<GammaBranch>,
    intersection: Option<Intersection>,
}

impl CpgaNet {
    /// Builds the network with weights drawn from a seeded generator.
    pub fn new(config: CpgaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut params,
            rng: &mut rng,
        };
        let c = config.base_channels;
        let g = config.global_channels;

        let t_branch = (config.t_input != TInput::None).then(|| TBranch {
            head: b.conv("t_branch.head", 3, c, 3, 1),
            body: ResBlock::build(&mut b, "t_branch.res", c),
            tail: b.conv("t_branch.tail", c, 1, 3, 1),
        });

        let head = b.conv("a_branch.head", 3, c, 3, 1);
        let body = match config.a_net {
            ANet::Conv => ABody::Conv(
                b.conv("a_branch.conv1", c, c, 3, 1),
                b.conv("a_branch.conv2", c, c, 3, 1),
            ),
            ANet::Resblock => ABody::Res(
                ResBlock::build(&mut b, "a_branch.res1", c),
                ResBlock::build(&mut b, "a_branch.res2", c),
            ),
        };
        let a_branch = ABranch {
            head,
            body,
            tail: b.conv("a_branch.tail", c, 3, 3, 1),
        };

        let gamma_branch = match config.g_net {
            GNet::None => None,
            kind => {
                let head = b.conv("gamma_branch.head", 3, g, 3, 2);
                let body = if kind == GNet::Rescbam {
                    GBody::ResCbam(ResCbam::build(&mut b, "gamma_branch.res", g, config.cbam_reduction))
                } else {
                    GBody::Res(ResBlock::build(&mut b, "gamma_branch.res", g))
                };
                Some(GammaBranch {
                    head,
                    body,
                    down: b.conv("gamma_branch.down", g, g, 3, 2),
                    out: b.conv("gamma_branch.out", g, 1, 1, 1),
                })
            }
        };

        let intersection = (config.fusion == Fusion::Iaaf).then(|| Intersection {
            conv1: b.conv("intersection.conv1", 6, g, 3, 1),
            conv2: b.conv("intersection.conv2", g, 3, 3, 1),
        });

        Ok(Self {
            config,
            params,
            t_branch,
            a_branch,
            gamma_branch,
            intersection,
        })
    }

    /// Builds the network for `config` and installs the given named tensors.
    /// Every parameter must be supplied exactly once with the expected shape.
    pub fn from_named(config: CpgaConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        if tensors.len() != net.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                net.params.len(),
                tensors.len()
            )));
        }
        let mut seen = vec![false; net.params.len()];
        for (name, value) in tensors {
            let idx = net
                .params
                .names()
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if seen[idx] {
                return Err(Error::Checkpoint(format!("parameter {name} given twice")));
            }
            let expected = net.params.tensors()[idx].shape();
            if value.shape() != expected {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {expected:?}",
                    value.shape()
                )));
            }
            seen[idx] = true;
            net.params.tensors_mut()[idx] = value;
        }
        Ok(net)
    }

    pub fn config(&self) -> &CpgaConfig {
        &self.config
    }

    /// Switches DGF runtime options without touching the weights.
    pub fn set_dgf(&mut self, use_dgf: bool) {
        self.config.use_dgf = use_dgf;
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Analytic FLOPs of one enhancement at `h x w`, following `use_dgf`.
    pub fn flops_estimate(&self, h: usize, w: usize) -> u64 {
        flops::estimate(&self.config, h, w)
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        Bound::new(tape, &self.params, trainable)
    }

    fn check_input(img: &Tensor) -> Result<()> {
        let (c, h, w) = img.chw()?;
        if c != 3 {
            return Err(Error::shape("forward", format!("expected 3 channels, got {c}")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::shape(
                "forward",
                format!("image is {h}x{w}, both sides must be >= {MIN_SIDE}"),
            ));
        }
        Ok(())
    }

    /// Transmission map in `[t_min, 1]`; `None` when the config has no t-branch.
    pub fn t_estimate<'t>(&self, p: &Bound<'t>, input: &Var<'t>) -> Result<Option<Var<'t>>> {
        let Some(tb) = &self.t_branch else {
            return Ok(None);
        };
        let h = tb.head.forward(p, input)?.relu()?;
        let h = tb.body.forward(p, &h)?;
        let s = tb.tail.forward(p, &h)?.sigmoid()?;
        let t_min = self.config.t_min;
        Ok(Some(s.scale(1.0 - t_min)?.add_scalar(t_min)?))
    }

    pub fn a_estimate<'t>(&self, p: &Bound<'t>, img: &Var<'t>) -> Result<Var<'t>> {
        let ab = &self.a_branch;
        let mut h = ab.head.forward(p, img)?.relu()?;
        match &ab.body {
            ABody::Conv(c1, c2) => {
                h = c1.forward(p, &h)?.relu()?;
                h = c2.forward(p, &h)?.relu()?;
            }
            ABody::Res(r1, r2) => {
                h = r1.forward(p, &h)?;
                h = r2.forward(p, &h)?;
            }
        }
        ab.tail.forward(p, &h)?.sigmoid()
    }

    /// Globally pooled gamma-branch features, shape `[G]`.
    pub fn gamma_features<'t>(&self, p: &Bound<'t>, img: &Var<'t>) -> Result<Option<Var<'t>>> {
        let Some(gb) = &self.gamma_branch else {
            return Ok(None);
        };
        let h = gb.head.forward(p, img)?.relu()?;
        let h = match &gb.body {
            GBody::Res(r) => r.forward(p, &h)?,
            GBody::ResCbam(r) => r.forward(p, &h)?,
        };
        let h = gb.down.forward(p, &h)?.relu()?;
        Ok(Some(h.global_avg_pool()?))
    }

    /// Maps pooled features to `γ` in `[γ_lo, γ_hi]`, shape `[1]`.
    pub fn gamma_head<'t>(&self, p: &Bound<'t>, pooled: &Var<'t>) -> Result<Var<'t>> {
        let gb = self
            .gamma_branch
            .as_ref()
            .ok_or_else(|| Error::invalid("config has no gamma branch"))?;
        let g = self.config.global_channels;
        let z = gb.out.forward(p, &pooled.reshape(&[g, 1, 1])?)?.reshape(&[1])?;
        let (lo, hi) = (self.config.gamma_lo(), self.config.gamma_hi());
        z.softplus()?.add_scalar(lo)?.clamp(lo, hi)
    }

    pub fn gamma_estimate<'t>(&self, p: &Bound<'t>, img: &Var<'t>) -> Result<Option<Var<'t>>> {
        match self.gamma_features(p, img)? {
            Some(pooled) => Ok(Some(self.gamma_head(p, &pooled)?)),
            None => Ok(None),
        }
    }

    /// Learned overlap of `R` and `R^γ`.
    pub fn intersection<'t>(&self, p: &Bound<'t>, r: &Var<'t>, r_gamma: &Var<'t>) -> Result<Option<Var<'t>>> {
        let Some(m) = &self.intersection else {
            return Ok(None);
        };
        let cat = Var::concat_channels(&[r, r_gamma])?;
        let h = m.conv1.forward(p, &cat)?.relu()?;
        Ok(Some(m.conv2.forward(p, &h)?))
    }

    /// Network at the resolution of `img`, without the input size check.
    fn local_pass<'t>(&self, p: &Bound<'t>, img: &Var<'t>) -> Result<EnhancedVars<'t>> {
        let tape = img.tape();
        let (_, h, w) = img.value().chw()?;
        let t_in = match self.config.t_input {
            TInput::Priors => Some(tape.constant(build_prior_stack(img.value())?.into_tensor())),
            TInput::Rgb => Some(img.clone()),
            TInput::None => None,
        };
        let a_tilde = self.a_estimate(p, img)?;
        let (r, t) = match t_in {
            Some(x) => {
                let t = self.t_estimate(p, &x)?.expect("t-branch exists when t_input is set");
                (reconstruct(img, &t, &a_tilde, self.config.t_min)?, t)
            }
            None => (a_tilde.clone(), tape.constant(Tensor::full(&[1, h, w], 1.0))),
        };
        let gamma = self.gamma_estimate(p, img)?;
        let r_gamma = gamma.as_ref().map(|g| gamma_apply(&r, g)).transpose()?;
        let (r_hat_raw, intersection) = match &r_gamma {
            Some(rg) => match self.intersection(p, &r, rg)? {
                Some(inter) => (iaaf_fuse(&r, rg, &inter)?, Some(inter)),
                None => (rg.clone(), None),
            },
            None => (r.clone(), None),
        };
        Ok(EnhancedVars {
            r_hat: r_hat_raw.clamp(0.0, 1.0)?,
            r_hat_raw,
            r,
            r_gamma,
            t,
            a_tilde,
            gamma,
            intersection,
        })
    }

    /// Full-resolution graph.
    pub fn forward_graph<'t>(&self, p: &Bound<'t>, img: &Var<'t>) -> Result<EnhancedVars<'t>> {
        Self::check_input(img.value())?;
        self.local_pass(p, img)
    }

    /// Reduced-resolution graph lifted back by the fast guided filter. The
    /// component maps stay at the reduced resolution.
    pub fn forward_dgf_graph<'t>(&self, p: &Bound<'t>, img: &Var<'t>) -> Result<EnhancedVars<'t>> {
        Self::check_input(img.value())?;
        let (_, h, w) = img.value().chw()?;
        let (lh, lw) = low_size(h, w, self.config.dgf_downsample);
        let low = img.resize_bilinear(lh, lw)?;
        let mut out = self.local_pass(p, &low)?;
        let lifted = fast_guided_filter(&low, &out.r_hat_raw, img, self.config.guided_filter)?;
        out.r_hat = lifted.clamp(0.0, 1.0)?;
        out.r_hat_raw = lifted;
        Ok(out)
    }

    /// Dispatches on `use_dgf`.
    pub fn enhance_graph<'t>(&self, p: &Bound<'t>, img: &Var<'t>) -> Result<EnhancedVars<'t>> {
        if self.config.use_dgf {
            self.forward_dgf_graph(p, img)
        } else {
            self.forward_graph(p, img)
        }
    }

    pub fn forward(&self, img: &Tensor) -> Result<EnhancedOutput> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        Ok(self.forward_graph(&p, &tape.constant(img.clone()))?.to_output())
    }

    pub fn forward_dgf(&self, img: &Tensor) -> Result<EnhancedOutput> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        Ok(self.forward_dgf_graph(&p, &tape.constant(img.clone()))?.to_output())
    }

    pub fn enhance(&self, img: &Tensor) -> Result<EnhancedOutput> {
        if self.config.use_dgf {
            self.forward_dgf(img)
        } else {
            self.forward(img)
        }
    }
}

/// Spatial size seen by the network in DGF mode.
pub fn low_size(h: usize, w: usize, downsample: usize) -> (usize, usize) {
    ((h / downsample).max(1), (w / downsample).max(1))
}

/// `R = (L - Ã) / t + Ã`, with `t` broadcast over channels.
pub fn reconstruct<'t>(l: &Var<'t>, t: &Var<'t>, a_tilde: &Var<'t>, t_min: f32) -> Result<Var<'t>> {
    let lowest = t.value().min_value();
    if lowest < t_min {
        return Err(Error::invalid(format!(
            "transmission {lowest} below t_min {t_min}"
        )));
    }
    l.sub(a_tilde)?.div(t)?.add(a_tilde)
}

/// `R^γ` on `R` clamped into `[EPS_SAFE, 1]`.
pub fn gamma_apply<'t>(r: &Var<'t>, gamma: &Var<'t>) -> Result<Var<'t>> {
    if gamma.value().data().iter().any(|&g| !(g > 0.0)) {
        return Err(Error::invalid(format!(
            "gamma must be positive, got {:?}",
            gamma.value().data()
        )));
    }
    r.clamp(EPS_SAFE, 1.0)?.pow(gamma)
}

/// `R + R^γ - intersection`, before the output clamp.
pub fn iaaf_fuse<'t>(r: &Var<'t>, r_gamma: &Var<'t>, intersection: &Var<'t>) -> Result<Var<'t>> {
    r.add(r_gamma)?.sub(intersection)
}
