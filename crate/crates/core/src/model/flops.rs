//! Analytic cost model. Mirrors the tape's accounting: `2 k² C_in C_out H' W'`
//! per convolution, one op per element for pointwise ops and reductions.

use super::config::{ANet, CpgaConfig, Fusion, GNet, TInput};
use super::layers::ConvSpec;
use crate::guided_filter;
use crate::tensor::RESIZE_FLOPS;

#[derive(Default)]
struct Cost(u64);

impl Cost {
    fn conv(&mut self, cin: usize, cout: usize, k: usize, stride: usize, h: usize, w: usize) -> (usize, usize) {
        let (oh, ow) = ConvSpec { cin, cout, k, stride }.out_size(h, w);
        self.0 += 2 * (k * k * cin * cout * oh * ow) as u64;
        (oh, ow)
    }

    fn pointwise(&mut self, n: usize, times: u64) {
        self.0 += n as u64 * times;
    }

    /// conv, relu, conv, add, relu
    fn resblock(&mut self, c: usize, h: usize, w: usize) {
        self.conv(c, c, 3, 1, h, w);
        self.conv(c, c, 3, 1, h, w);
        self.pointwise(c * h * w, 3);
    }

    fn cbam(&mut self, c: usize, reduction: usize, h: usize, w: usize) {
        let hidden = (c / reduction.max(1)).max(1);
        let full = c * h * w;
        // avg and max descriptors, each through the shared MLP
        self.pointwise(full, 2);
        for _ in 0..2 {
            self.conv(c, hidden, 1, 1, 1, 1);
            self.pointwise(hidden, 1);
            self.conv(hidden, c, 1, 1, 1, 1);
        }
        self.pointwise(c, 2);
        self.pointwise(full, 1);
        // channel mean and max, 7x7 conv, sigmoid, rescale
        self.pointwise(full, 2);
        self.conv(2, 1, 7, 1, h, w);
        self.pointwise(h * w, 1);
        self.pointwise(full, 1);
    }

    fn local(&mut self, cfg: &CpgaConfig, h: usize, w: usize) {
        let c = cfg.base_channels;
        let g = cfg.global_channels;
        let hw = h * w;

        // a-branch
        self.conv(3, c, 3, 1, h, w);
        self.pointwise(c * hw, 1);
        match cfg.a_net {
            ANet::Conv => {
                for _ in 0..2 {
                    self.conv(c, c, 3, 1, h, w);
                    self.pointwise(c * hw, 1);
                }
            }
            ANet::Resblock => {
                self.resblock(c, h, w);
                self.resblock(c, h, w);
            }
        }
        self.conv(c, 3, 3, 1, h, w);
        self.pointwise(3 * hw, 1);

        if cfg.t_input != TInput::None {
            self.conv(3, c, 3, 1, h, w);
            self.pointwise(c * hw, 1);
            self.resblock(c, h, w);
            self.conv(c, 1, 3, 1, h, w);
            // sigmoid, scale, shift
            self.pointwise(hw, 3);
            // sub, div, add of the reconstruction
            self.pointwise(3 * hw, 3);
        }

        if cfg.g_net != GNet::None {
            let (h2, w2) = self.conv(3, g, 3, 2, h, w);
            self.pointwise(g * h2 * w2, 1);
            self.resblock(g, h2, w2);
            if cfg.g_net == GNet::Rescbam {
                self.cbam(g, cfg.cbam_reduction, h2, w2);
            }
            let (h3, w3) = self.conv(g, g, 3, 2, h2, w2);
            self.pointwise(g * h3 * w3, 2);
            self.conv(g, 1, 1, 1, 1, 1);
            // softplus, shift, clamp
            self.pointwise(1, 3);
            // clamp and pow on R
            self.pointwise(3 * hw, 2);
            if cfg.fusion == Fusion::Iaaf {
                self.conv(6, g, 3, 1, h, w);
                self.pointwise(g * hw, 1);
                self.conv(g, 3, 3, 1, h, w);
                self.pointwise(3 * hw, 2);
            }
        }

        // output clamp
        self.pointwise(3 * hw, 1);
    }
}

pub(super) fn estimate(cfg: &CpgaConfig, h: usize, w: usize) -> u64 {
    let mut cost = Cost::default();
    if cfg.use_dgf {
        let (lh, lw) = super::low_size(h, w, cfg.dgf_downsample);
        cost.pointwise(3 * lh * lw, RESIZE_FLOPS);
        cost.local(cfg, lh, lw);
        cost.0 += guided_filter::flops(3, lh, lw, h, w);
        cost.pointwise(3 * h * w, 1);
    } else {
        cost.local(cfg, h, w);
    }
    cost.0
}
