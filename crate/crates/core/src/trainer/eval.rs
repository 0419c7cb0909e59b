//! Dataset evaluation and its JSON / text report.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::SampleSource;
use crate::error::Result;
use crate::metrics::{psnr, ssim};
use crate::model::CpgaNet;

/// Resolution at which the report quotes FLOPs (width x height).
pub const REPORT_SIZE: (usize, usize) = (600, 400);

/// JSON has no infinity; PSNR of identical images is written as `"inf"`.
mod db {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR value {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    #[serde(with = "db")]
    pub psnr: f64,
    pub ssim: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `"model"` or `"raw_input"`.
    pub mode: String,
    pub images: Vec<ImageScore>,
    #[serde(with = "db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_seconds: f64,
    pub param_count: Option<usize>,
    pub flops_600x400: Option<u64>,
    /// Samples that could not be loaded or scored, with the reason.
    pub failed: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| crate::Error::invalid(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| crate::Error::invalid(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let width = self.images.iter().map(|s| s.id.len()).max().unwrap_or(0).max(4);
        let mut out = format!("{:<width$}  {:>8}  {:>6}  {:>8}\n", "id", "PSNR", "SSIM", "seconds");
        let fmt_db = |v: f64| if v.is_infinite() { "inf".to_string() } else { format!("{v:.2}") };
        for s in &self.images {
            out += &format!("{:<width$}  {:>8}  {:>6.4}  {:>8.3}\n", s.id, fmt_db(s.psnr), s.ssim, s.seconds);
        }
        out += &format!(
            "{:<width$}  {:>8}  {:>6.4}  {:>8.3}\n",
            "mean",
            fmt_db(self.mean_psnr),
            self.mean_ssim,
            self.mean_seconds
        );
        if let Some(p) = self.param_count {
            out += &format!("parameters: {p}\n");
        }
        if let Some(f) = self.flops_600x400 {
            out += &format!("GFLOPs at 600x400: {:.3}\n", f as f64 / 1e9);
        }
        for f in &self.failed {
            out += &format!("failed: {f}\n");
        }
        out
    }
}

/// Scores `net` (or the raw low-light input when `net` is `None`) against
/// ground truth. Failing samples are listed and skipped.
pub fn evaluate(net: Option<&CpgaNet>, source: &dyn SampleSource) -> EvalReport {
    let results: Vec<std::result::Result<ImageScore, String>> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let s = source.get(i).map_err(|e| format!("#{i}: {e}"))?;
            let start = Instant::now();
            let pred = match net {
                Some(n) => n.enhance(&s.low).map_err(|e| format!("{}: {e}", s.id))?.r_hat,
                None => s.low.clone(),
            };
            let seconds = start.elapsed().as_secs_f64();
            let p = psnr(&pred, &s.gt, 1.0).map_err(|e| format!("{}: {e}", s.id))?;
            let q = ssim(&pred, &s.gt).map_err(|e| format!("{}: {e}", s.id))?;
            Ok(ImageScore {
                id: s.id,
                psnr: p,
                ssim: q,
                seconds,
            })
        })
        .collect();
    let mut images = Vec::new();
    let mut failed = Vec::new();
    for r in results {
        match r {
            Ok(s) => images.push(s),
            Err(e) => {
                log::warn!("evaluation skipped {e}");
                failed.push(e);
            }
        }
    }
    let n = images.len().max(1) as f64;
    let mean = |f: fn(&ImageScore) -> f64| images.iter().map(f).sum::<f64>() / n;
    EvalReport {
        mode: if net.is_some() { "model" } else { "raw_input" }.to_string(),
        mean_psnr: mean(|s| s.psnr),
        mean_ssim: mean(|s| s.ssim),
        mean_seconds: mean(|s| s.seconds),
        param_count: net.map(CpgaNet::param_count),
        flops_600x400: net.map(|n| n.flops_estimate(REPORT_SIZE.1, REPORT_SIZE.0)),
        images,
        failed,
    }
}
