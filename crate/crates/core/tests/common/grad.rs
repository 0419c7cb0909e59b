//! Central finite-difference gradient checks.
//!
//! The scalar probed is `sum(w * out)` for a fixed random `w`, evaluated in
//! `f64` from the `f32` outputs. Agreement is measured as
//! `|auto - fd| / |fd|` over all probed coordinates (Euclidean norms).

use cpga_core::losses::l1_loss;
use cpga_core::model::CpgaNet;
use cpga_core::{Tape, Tensor, Var};
use rand::Rng;

pub const H: f32 = 1e-3;
pub const TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Error over the coordinates whose stencil stays on one smooth piece.
    pub rel_error: f64,
    pub coords: usize,
    /// Coordinates whose `+-h` stencil flips a relu / abs / clamp / max branch.
    pub skipped: usize,
    /// Error over every probed coordinate, kinks included.
    pub raw_rel_error: f64,
}

/// Largest share of probed coordinates that may straddle a kink.
pub const MAX_SKIPPED: f64 = 0.75;

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.coords > 0
            && self.rel_error < TOL
            && (self.skipped as f64) <= MAX_SKIPPED * (self.coords + self.skipped) as f64
    }
}

pub fn rel_error(auto: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 = auto.iter().zip(fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    let auto_norm: f64 = auto.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 && auto_norm < 1e-12 {
        0.0
    } else {
        diff / norm.max(1e-12)
    }
}

/// Builds the op under test from its inputs.
pub type Build = dyn for<'t> Fn(&[Var<'t>]) -> Var<'t>;

fn probe(out: &Tensor, w: &[f64]) -> f64 {
    out.data().iter().zip(w).map(|(&o, &wi)| o as f64 * wi).sum()
}

fn weights_for(n: usize, seed: u64) -> Vec<f64> {
    let mut r = super::rng(seed);
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn forward(inputs: &[Tensor], build: &Build) -> Tensor {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    build(&vars).to_tensor()
}

/// Checks the gradient of `build` with respect to every input flagged in `diff`.
pub fn check_op(inputs: &[Tensor], diff: &[bool], build: &Build, seed: u64) -> GradCheck {
    check_op_step(inputs, diff, build, seed, H)
}

pub fn check_op_step(inputs: &[Tensor], diff: &[bool], build: &Build, seed: u64, h: f32) -> GradCheck {
    let tape = Tape::new();
    let vars: Vec<_> = inputs
        .iter()
        .zip(diff)
        .map(|(t, &d)| tape.leaf(t.clone(), d))
        .collect();
    let out = build(&vars);
    let w = weights_for(out.value().numel(), seed);
    let wt = Tensor::new(out.shape(), w.iter().map(|&v| v as f32).collect()).unwrap();
    let loss = out.mul(&tape.constant(wt)).unwrap().sum().unwrap();
    tape.backward(&loss).unwrap();

    let mut auto = Vec::new();
    let mut fd = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        if !diff[k] {
            continue;
        }
        let g = vars[k].grad().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let d = (probe(&forward(&plus, build), &w) - probe(&forward(&minus, build), &w)) / (2.0 * h as f64);
            auto.push(g.data()[i] as f64);
            fd.push(d);
        }
    }
    let e = rel_error(&auto, &fd);
    GradCheck {
        rel_error: e,
        coords: auto.len(),
        skipped: 0,
        raw_rel_error: e,
    }
}

/// Loss value in `f64` and the branch fingerprint of the forward pass.
fn l1_value(net: &CpgaNet, img: &Tensor, target: &Tensor) -> (f64, u64) {
    let tape = Tape::with_branch_log();
    let p = net.bind(&tape, false);
    let out = net.enhance_graph(&p, &tape.constant(img.clone())).unwrap();
    l1_loss(&out.r_hat_raw, &tape.constant(target.clone())).unwrap();
    let n = target.numel() as f64;
    let v = out
        .r_hat_raw
        .value()
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / n;
    (v, tape.branch_signature().unwrap())
}

/// Gradient of `L1(pre-clamp output, target)` with respect to the network
/// parameters. `per_tensor` limits the probe to that many random entries of
/// each parameter tensor; `None` probes every parameter.
pub fn check_net(net: &CpgaNet, img: &Tensor, target: &Tensor, per_tensor: Option<usize>, seed: u64) -> GradCheck {
    let tape = Tape::new();
    let p = net.bind(&tape, true);
    let out = net.enhance_graph(&p, &tape.constant(img.clone())).unwrap();
    let loss = l1_loss(&out.r_hat_raw, &tape.constant(target.clone())).unwrap();
    tape.backward(&loss).unwrap();
    let grads = p.grads();

    let (_, base) = l1_value(net, img, target);
    let mut r = super::rng(seed);
    let (mut auto, mut fd) = (Vec::new(), Vec::new());
    let (mut all_auto, mut all_fd) = (Vec::new(), Vec::new());
    for (k, t) in net.params().tensors().iter().enumerate() {
        let picks: Vec<usize> = match per_tensor {
            None => (0..t.numel()).collect(),
            Some(m) if m >= t.numel() => (0..t.numel()).collect(),
            Some(m) => (0..m).map(|_| r.gen_range(0..t.numel())).collect(),
        };
        for i in picks {
            let mut plus = net.clone();
            plus.params_mut().tensors_mut()[k].data_mut()[i] += H;
            let mut minus = net.clone();
            minus.params_mut().tensors_mut()[k].data_mut()[i] -= H;
            let (lp, sp) = l1_value(&plus, img, target);
            let (lm, sm) = l1_value(&minus, img, target);
            let d = (lp - lm) / (2.0 * H as f64);
            let a = grads[k].data()[i] as f64;
            all_auto.push(a);
            all_fd.push(d);
            if sp == base && sm == base {
                auto.push(a);
                fd.push(d);
            }
        }
    }
    GradCheck {
        rel_error: rel_error(&auto, &fd),
        coords: auto.len(),
        skipped: all_auto.len() - auto.len(),
        raw_rel_error: rel_error(&all_auto, &all_fd),
    }
}

/// Values with magnitude in `[lo, hi)` and random sign, to stay clear of kinks at 0.
fn signed(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut r = super::rng(seed);
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(lo..hi);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// All entries distinct, spaced at least `1 / numel` apart.
fn distinct(shape: &[usize], seed: u64) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut levels: Vec<usize> = (0..n).collect();
    levels.shuffle(&mut super::rng(seed));
    Tensor::new(shape, levels.into_iter().map(|l| l as f32 / n as f32).collect()).unwrap()
}

/// `a` plus an offset of magnitude in `[lo, hi)` and random sign.
fn near(a: &Tensor, lo: f32, hi: f32, seed: u64) -> Tensor {
    let d = signed(a.shape(), lo.max(1e-6), hi, seed);
    Tensor::from_fn(a.shape(), |i| a.data()[i] + d.data()[i])
}

fn u(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    super::uniform(shape, lo, hi, seed)
}

pub struct OpCase {
    pub name: &'static str,
    pub run: fn(u64) -> GradCheck,
}

macro_rules! case {
    ($name:expr, |$s:ident| [$($input:expr),* $(,)?], [$($d:expr),*], |$v:ident| $body:expr) => {
        case!($name, |$s| { [$($input),*] }, [$($d),*], |$v| $body)
    };
    ($name:expr, |$s:ident| $inputs:block, [$($d:expr),*], |$v:ident| $body:expr) => {
        OpCase {
            name: $name,
            run: |$s: u64| {
                let inputs = $inputs.to_vec();
                check_op(&inputs, &[$($d),*], &|$v: &[Var<'_>]| $body, $s)
            },
        }
    };
}

/// Every differentiable primitive, each checked on seeded random inputs.
pub fn op_suite() -> Vec<OpCase> {
    vec![
        case!("conv2d 3x3", |s| [u(&[2, 5, 5], -1.0, 1.0, s), u(&[3, 2, 3, 3], -1.0, 1.0, s + 1), u(&[3], -1.0, 1.0, s + 2)],
            [true, true, true], |v| v[0].conv2d(&v[1], &v[2], 1, 1).unwrap()),
        case!("conv2d stride 2", |s| [u(&[2, 6, 7], -1.0, 1.0, s), u(&[2, 2, 3, 3], -1.0, 1.0, s + 1), u(&[2], -1.0, 1.0, s + 2)],
            [true, true, true], |v| v[0].conv2d(&v[1], &v[2], 2, 1).unwrap()),
        case!("conv2d 1x1", |s| [u(&[3, 4, 4], -1.0, 1.0, s), u(&[2, 3, 1, 1], -1.0, 1.0, s + 1), u(&[2], -1.0, 1.0, s + 2)],
            [true, true, true], |v| v[0].conv2d(&v[1], &v[2], 1, 0).unwrap()),
        case!("add", |s| [u(&[2, 3, 4], -1.0, 1.0, s), u(&[2, 3, 4], -1.0, 1.0, s + 1)], [true, true], |v| v[0].add(&v[1]).unwrap()),
        case!("add broadcast plane", |s| [u(&[3, 3, 4], -1.0, 1.0, s), u(&[1, 3, 4], -1.0, 1.0, s + 1)], [true, true], |v| v[0].add(&v[1]).unwrap()),
        case!("sub", |s| [u(&[2, 3, 4], -1.0, 1.0, s), u(&[2, 3, 4], -1.0, 1.0, s + 1)], [true, true], |v| v[0].sub(&v[1]).unwrap()),
        case!("mul broadcast channel", |s| [u(&[3, 3, 4], -1.0, 1.0, s), u(&[3, 1, 1], -1.0, 1.0, s + 1)], [true, true], |v| v[0].mul(&v[1]).unwrap()),
        case!("mul scalar", |s| [u(&[2, 3, 4], -1.0, 1.0, s), u(&[1], -1.0, 1.0, s + 1)], [true, true], |v| v[0].mul(&v[1]).unwrap()),
        case!("div", |s| [u(&[2, 3, 4], -1.0, 1.0, s), u(&[1, 3, 4], 0.3, 1.5, s + 1)], [true, true], |v| v[0].div(&v[1]).unwrap()),
        case!("pow", |s| [u(&[3, 3, 3], 0.2, 1.0, s), u(&[1], 0.3, 3.0, s + 1)], [true, true], |v| v[0].pow(&v[1]).unwrap()),
        case!("exp", |s| [u(&[2, 3, 4], -1.0, 1.0, s)], [true], |v| v[0].exp().unwrap()),
        case!("log", |s| [u(&[2, 3, 4], 0.2, 2.0, s)], [true], |v| v[0].log().unwrap()),
        case!("sigmoid", |s| [u(&[2, 3, 4], -3.0, 3.0, s)], [true], |v| v[0].sigmoid().unwrap()),
        case!("relu", |s| [signed(&[2, 3, 4], 0.05, 1.0, s)], [true], |v| v[0].relu().unwrap()),
        case!("softplus", |s| [u(&[2, 3, 4], -3.0, 3.0, s)], [true], |v| v[0].softplus().unwrap()),
        case!("abs", |s| [signed(&[2, 3, 4], 0.05, 1.0, s)], [true], |v| v[0].abs().unwrap()),
        case!("square", |s| [u(&[2, 3, 4], -1.0, 1.0, s)], [true], |v| v[0].square().unwrap()),
        case!("neg", |s| [u(&[2, 3, 4], -1.0, 1.0, s)], [true], |v| v[0].neg().unwrap()),
        case!("add_scalar", |s| [u(&[2, 3, 4], -1.0, 1.0, s)], [true], |v| v[0].add_scalar(0.37).unwrap()),
        case!("scale", |s| [u(&[2, 3, 4], -1.0, 1.0, s)], [true], |v| v[0].scale(-1.7).unwrap()),
        case!("clamp", |s| [signed(&[2, 3, 4], 0.05, 1.0, s).map(|x| if (x.abs() - 0.5).abs() < 0.02 { x * 0.8 } else { x })],
            [true], |v| v[0].clamp(-0.5, 0.5).unwrap()),
        case!("sum", |s| [u(&[2, 3, 4], -1.0, 1.0, s)], [true], |v| v[0].sum().unwrap()),
        case!("mean", |s| [u(&[2, 3, 4], -1.0, 1.0, s)], [true], |v| v[0].mean().unwrap()),
        case!("global_avg_pool", |s| [u(&[3, 4, 6], -1.0, 1.0, s)], [true], |v| v[0].global_avg_pool().unwrap()),
        case!("global_max_pool", |s| [distinct(&[3, 4, 5], s)], [true], |v| v[0].global_max_pool().unwrap()),
        case!("channel_mean", |s| [u(&[3, 4, 5], -1.0, 1.0, s)], [true], |v| v[0].channel_mean().unwrap()),
        case!("channel_max", |s| [distinct(&[3, 4, 5], s)], [true], |v| v[0].channel_max().unwrap()),
        case!("resize_bilinear up", |s| [u(&[2, 3, 4], -1.0, 1.0, s)], [true], |v| v[0].resize_bilinear(7, 9).unwrap()),
        case!("resize_bilinear down", |s| [u(&[2, 8, 9], -1.0, 1.0, s)], [true], |v| v[0].resize_bilinear(3, 4).unwrap()),
        case!("box_filter", |s| [u(&[2, 6, 7], -1.0, 1.0, s)], [true], |v| v[0].box_filter(2).unwrap()),
        case!("avg_pool", |s| [u(&[2, 6, 7], -1.0, 1.0, s)], [true], |v| v[0].avg_pool(2).unwrap()),
        case!("concat_channels", |s| [u(&[1, 3, 4], -1.0, 1.0, s), u(&[2, 3, 4], -1.0, 1.0, s + 1)], [true, true],
            |v| Var::concat_channels(&[&v[0], &v[1]]).unwrap()),
        case!("reshape", |s| [u(&[2, 3, 4], -1.0, 1.0, s)], [true], |v| v[0].reshape(&[4, 6]).unwrap().square().unwrap()),
        case!("channel", |s| [u(&[3, 3, 4], -1.0, 1.0, s)], [true], |v| v[0].channel(1).unwrap()),
        // Scalar losses are rounded to f32 once; inputs are kept close so that
        // rounding stays far below the per-element gradient.
        case!("l1_loss", |s| { let a = u(&[3, 2, 2], 0.0, 1.0, s); let b = near(&a, 0.05, 0.3, s + 1); [a, b] },
            [true, true], |v| l1_loss(&v[0], &v[1]).unwrap()),
        case!("mse_loss", |s| { let a = u(&[3, 2, 2], 0.0, 1.0, s); let b = near(&a, 0.0, 0.3, s + 1); [a, b] },
            [true, true], |v| cpga_core::losses::mse_loss(&v[0], &v[1]).unwrap()),
        case!("perceptual_proxy_loss", |s| { let a = u(&[3, 12, 12], 0.0, 1.0, s); let b = near(&a, 0.0, 0.1, s + 1); [a, b] },
            [true, false], |v| {
                let psi = cpga_core::losses::ProxyFeatureExtractor::default();
                cpga_core::losses::perceptual_proxy_loss(&v[0], &v[1], &psi).unwrap()
            }),
        case!("fast_guided_filter src", |s| [u(&[3, 6, 6], 0.0, 1.0, s), u(&[3, 6, 6], 0.0, 1.0, s + 1), u(&[3, 12, 12], 0.0, 1.0, s + 2)],
            [false, true, false], |v| cpga_core::guided_filter::fast_guided_filter(&v[0], &v[1], &v[2], Default::default()).unwrap()),
    ]
}

pub struct NetCase {
    pub name: String,
    pub config: cpga_core::CpgaConfig,
    pub per_tensor: Option<usize>,
    pub seed: u64,
}

impl NetCase {
    pub fn run(&self) -> GradCheck {
        let net = CpgaNet::new(self.config.clone(), self.seed).unwrap();
        let gt = super::scene(16, 16, self.seed);
        let img = super::darken(&gt, self.seed);
        check_net(&net, &img, &gt, self.per_tensor, self.seed)
    }
}

/// A narrow network probed at every parameter, then twenty sampled probes of
/// full-width networks across the ablation rows, the compact model and the
/// guided-filter model.
pub fn net_suite() -> Vec<NetCase> {
    use cpga_core::model::AblationRow;
    use cpga_core::CpgaConfig;
    let mut cases = vec![NetCase {
        name: "narrow, every parameter".into(),
        config: CpgaConfig {
            base_channels: 4,
            global_channels: 4,
            cbam_reduction: 2,
            ..CpgaConfig::regular()
        },
        per_tensor: None,
        seed: 11,
    }];
    let mut pool: Vec<(String, CpgaConfig)> = AblationRow::ALL
        .iter()
        .map(|r| (format!("row {}", r.label()), r.config()))
        .collect();
    pool.push(("compact".into(), CpgaConfig::compact()));
    pool.push(("dgf".into(), CpgaConfig::dgf()));
    for k in 0..20 {
        let (name, config) = pool[k % pool.len()].clone();
        cases.push(NetCase {
            name: format!("{name}, seed {k}"),
            config,
            per_tensor: Some(3),
            seed: 100 + k as u64,
        });
    }
    cases
}
