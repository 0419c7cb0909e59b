use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guided_filter::GuidedFilterParams;

/// What the transmission branch sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TInput {
    /// No transmission branch; the airlight network output is the local result.
    None,
    Rgb,
    Priors,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ANet {
    /// Two plain conv + ReLU layers.
    Conv,
    /// Two residual blocks.
    Resblock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GNet {
    None,
    Resblock,
    Rescbam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    None,
    Iaaf,
}

/// Architecture and runtime options of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpgaConfig {
    /// Width of the transmission and airlight branches.
    pub base_channels: usize,
    /// Width of the gamma branch and the intersection module.
    pub global_channels: usize,
    pub cbam_reduction: usize,
    pub use_dgf: bool,
    /// Spatial divisor applied before the network runs in DGF mode.
    pub dgf_downsample: usize,
    pub guided_filter: GuidedFilterParams,
    pub t_min: f32,
    pub gamma_bounds: [f32; 2],
    pub t_input: TInput,
    pub a_net: ANet,
    pub g_net: GNet,
    pub fusion: Fusion,
}

impl Default for CpgaConfig {
    fn default() -> Self {
        Self::regular()
    }
}

impl CpgaConfig {
    /// Full-resolution model with 16-channel branches.
    pub fn regular() -> Self {
        Self {
            base_channels: 16,
            global_channels: 16,
            cbam_reduction: 4,
            use_dgf: false,
            dgf_downsample: 2,
            guided_filter: GuidedFilterParams::default(),
            t_min: 0.05,
            gamma_bounds: [0.1, 5.0],
            t_input: TInput::Priors,
            a_net: ANet::Resblock,
            g_net: GNet::Rescbam,
            fusion: Fusion::Iaaf,
        }
    }

    /// 8-channel local branch, still at full resolution (the distillation student).
    pub fn compact() -> Self {
        Self {
            base_channels: 8,
            ..Self::regular()
        }
    }

    /// 8-channel local branch run at reduced resolution behind the guided filter.
    pub fn dgf() -> Self {
        Self {
            use_dgf: true,
            ..Self::compact()
        }
    }

    pub fn gamma_lo(&self) -> f32 {
        self.gamma_bounds[0]
    }

    pub fn gamma_hi(&self) -> f32 {
        self.gamma_bounds[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 1 || self.global_channels < 1 {
            return Err(Error::invalid("channel widths must be >= 1"));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::invalid(format!("t_min must lie in (0, 1), got {}", self.t_min)));
        }
        let [lo, hi] = self.gamma_bounds;
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::invalid(format!(
                "gamma bounds must satisfy 0 < lo < hi, got [{lo}, {hi}]"
            )));
        }
        if self.dgf_downsample < 1 {
            return Err(Error::invalid("dgf_downsample must be >= 1"));
        }
        if self.fusion == Fusion::Iaaf && self.g_net == GNet::None {
            return Err(Error::invalid("IAAF fusion needs a gamma branch"));
        }
        self.guided_filter.validate()
    }

    /// True when two configs produce the same parameter set and the same
    /// function at a given resolution. DGF runtime options are not compared.
    pub fn same_model(&self, other: &CpgaConfig) -> bool {
        let strip = |c: &CpgaConfig| CpgaConfig {
            use_dgf: false,
            dgf_downsample: 1,
            guided_filter: GuidedFilterParams::default(),
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

/// Row classes of the architecture ablation, all at 16 channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationRow {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
    I,
    J,
}

impl AblationRow {
    pub const ALL: [AblationRow; 10] = [
        Self::A,
        Self::B,
        Self::C,
        Self::D,
        Self::E,
        Self::F,
        Self::G,
        Self::H,
        Self::I,
        Self::J,
    ];

    pub fn config(self) -> CpgaConfig {
        use AblationRow::*;
        let (t_input, a_net, g_net, fusion) = match self {
            A => (TInput::None, ANet::Conv, GNet::None, Fusion::None),
            B => (TInput::None, ANet::Resblock, GNet::None, Fusion::None),
            C => (TInput::Rgb, ANet::Conv, GNet::None, Fusion::None),
            D => (TInput::Priors, ANet::Conv, GNet::None, Fusion::None),
            E => (TInput::Rgb, ANet::Resblock, GNet::None, Fusion::None),
            F => (TInput::Priors, ANet::Resblock, GNet::None, Fusion::None),
            G => (TInput::Priors, ANet::Resblock, GNet::Resblock, Fusion::None),
            H => (TInput::Rgb, ANet::Resblock, GNet::Resblock, Fusion::Iaaf),
            I => (TInput::Priors, ANet::Resblock, GNet::Resblock, Fusion::Iaaf),
            J => (TInput::Priors, ANet::Resblock, GNet::Rescbam, Fusion::Iaaf),
        };
        CpgaConfig {
            t_input,
            a_net,
            g_net,
            fusion,
            ..CpgaConfig::regular()
        }
    }

    pub fn label(self) -> char {
        (b'a' + Self::ALL.iter().position(|&r| r == self).unwrap() as u8) as char
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [CpgaConfig::regular(), CpgaConfig::compact(), CpgaConfig::dgf()] {
            cfg.validate().unwrap();
        }
        for row in AblationRow::ALL {
            row.config().validate().unwrap();
        }
    }

    #[test]
    fn every_ablation_row_is_distinct() {
        let configs: Vec<_> = AblationRow::ALL.iter().map(|r| r.config()).collect();
        for i in 0..configs.len() {
            for j in i + 1..configs.len() {
                assert_ne!(configs[i], configs[j], "rows {i} and {j}");
            }
        }
        assert_eq!(AblationRow::J.config(), CpgaConfig::regular());
        assert_eq!(AblationRow::C.label(), 'c');
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            CpgaConfig { t_min: 0.0, ..CpgaConfig::regular() },
            CpgaConfig { t_min: 1.0, ..CpgaConfig::regular() },
            CpgaConfig { gamma_bounds: [0.0, 1.0], ..CpgaConfig::regular() },
            CpgaConfig { gamma_bounds: [2.0, 1.0], ..CpgaConfig::regular() },
            CpgaConfig { base_channels: 0, ..CpgaConfig::regular() },
            CpgaConfig { g_net: GNet::None, ..CpgaConfig::regular() },
            CpgaConfig { dgf_downsample: 0, ..CpgaConfig::regular() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let cfg = CpgaConfig::dgf();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: CpgaConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        let partial: CpgaConfig = serde_json::from_str(r#"{"base_channels": 8, "t_input": "rgb"}"#).unwrap();
        assert_eq!(partial.base_channels, 8);
        assert_eq!(partial.t_input, TInput::Rgb);
        assert_eq!(partial.g_net, GNet::Rescbam);
    }

    #[test]
    fn same_model_ignores_dgf_runtime() {
        assert!(CpgaConfig::compact().same_model(&CpgaConfig::dgf()));
        assert!(!CpgaConfig::regular().same_model(&CpgaConfig::compact()));
    }
}
