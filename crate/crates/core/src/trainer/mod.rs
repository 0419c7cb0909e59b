//! Training stages: self-supervised initialisation, supervised training,
//! distillation into the compact model and guided-filter fine-tuning.

mod checkpoint;
mod eval;

use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use eval::{evaluate, EvalReport, ImageScore, REPORT_SIZE};

use crate::data::{derive_seed, prefetch_samples, PairedSample, SampleJob, SampleSource};
use crate::error::{Error, Result};
use crate::losses::{enhance_loss, total_loss_dgf, LossWeights, ProxyFeatureExtractor};
use crate::metrics::{psnr, ssim};
use crate::model::{CpgaConfig, CpgaNet};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Selfsup,
    Supervised,
    #[serde(alias = "kd_finetune")]
    Kd,
    #[serde(alias = "dgf_finetune")]
    Dgf,
}

impl Stage {
    pub fn default_epochs(self) -> usize {
        match self {
            Stage::Selfsup => 20,
            Stage::Supervised => 50,
            Stage::Kd | Stage::Dgf => 30,
        }
    }

    pub fn default_lr(self) -> f32 {
        match self {
            Stage::Selfsup | Stage::Supervised => 1e-4,
            Stage::Kd | Stage::Dgf => 1e-5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Selfsup => "selfsup",
            Stage::Supervised => "supervised",
            Stage::Kd => "kd",
            Stage::Dgf => "dgf",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::invalid(format!("unknown stage {s:?}")))
    }
}

/// Everything a stage needs. Unset epochs and lr fall back to the stage defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: Option<usize>,
    pub lr: Option<f32>,
    pub batch: usize,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    /// Square training crop; `None` trains on whole images.
    pub crop: Option<usize>,
    pub flip: bool,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub seed: u64,
    pub data: Option<PathBuf>,
    /// Held-out pairs for per-epoch PSNR/SSIM and best-checkpoint selection.
    pub val_data: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub model: CpgaConfig,
    pub prefetch_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Supervised,
            epochs: None,
            lr: None,
            batch: 8,
            max_steps: None,
            crop: Some(256),
            flip: true,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            seed: 0,
            data: None,
            val_data: None,
            init: None,
            teacher: None,
            output: None,
            model: CpgaConfig::regular(),
            prefetch_depth: 16,
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self {
            stage,
            model: match stage {
                Stage::Selfsup | Stage::Supervised => CpgaConfig::regular(),
                Stage::Kd => CpgaConfig::compact(),
                Stage::Dgf => CpgaConfig::dgf(),
            },
            ..Self::default()
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(self.stage.default_epochs())
    }

    pub fn lr(&self) -> f32 {
        self.lr.unwrap_or(self.stage.default_lr())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("batch must be >= 1"));
        }
        if !(self.lr() > 0.0) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr())));
        }
        if self.crop == Some(0) {
            return Err(Error::invalid("crop must be >= 1"));
        }
        self.model.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub epochs: usize,
    pub steps: u64,
    pub lr: f32,
    pub final_train_loss: Option<f64>,
    pub best_val_psnr: Option<f64>,
}

/// Training history carried inside checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    /// Set when a stage stopped on a non-finite loss or gradient.
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
}

pub struct StageOutcome {
    /// Best network by held-out PSNR, or the last one without held-out data.
    pub net: CpgaNet,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Data and models for one stage.
pub struct StageInputs {
    pub train: Arc<dyn SampleSource>,
    pub val: Option<Arc<dyn SampleSource>>,
    pub init: Option<(CpgaNet, Provenance)>,
    /// Required by the distillation stage.
    pub teacher: Option<CpgaNet>,
}

struct StepResult {
    loss: f64,
    grads: Vec<Tensor>,
}

struct Runner<'a> {
    cfg: &'a TrainConfig,
    teacher: Option<&'a CpgaNet>,
    psi: ProxyFeatureExtractor,
}

impl Runner<'_> {
    /// Loss and parameter gradients of one sample, scaled by `scale`.
    fn sample_grads(&self, net: &CpgaNet, s: &PairedSample, scale: f32) -> Result<StepResult> {
        let tape = Tape::new();
        let p = net.bind(&tape, true);
        let img = tape.constant(s.low.clone());
        let target = match self.cfg.stage {
            Stage::Selfsup => img.clone(),
            _ => tape.constant(s.gt.clone()),
        };
        let out = match self.cfg.stage {
            Stage::Dgf => net.forward_dgf_graph(&p, &img)?,
            _ => net.forward_graph(&p, &img)?,
        };
        // Losses see the output before the final clamp so that saturated
        // pixels still pass gradient.
        let loss = match (self.cfg.stage, self.teacher) {
            (Stage::Kd, Some(teacher)) => {
                let t_out = teacher.forward(&s.low)?;
                total_loss_dgf(&out, &target, &t_out, &self.cfg.weights, &self.psi)?
            }
            _ => enhance_loss(&out.r_hat_raw, &target, &self.cfg.weights, &self.psi)?,
        };
        let value = loss.value().item() as f64;
        tape.backward(&loss.scale(scale)?)?;
        Ok(StepResult {
            loss: value,
            grads: p.grads(),
        })
    }

    fn batch_grads(&self, net: &CpgaNet, batch: &[PairedSample]) -> Result<StepResult> {
        let scale = 1.0 / batch.len() as f32;
        let per_sample: Vec<Result<StepResult>> = batch
            .par_iter()
            .map(|s| self.sample_grads(net, s, scale))
            .collect();
        let mut total: Option<StepResult> = None;
        // Fixed summation order keeps the result independent of scheduling.
        for r in per_sample {
            let r = r?;
            total = Some(match total {
                None => r,
                Some(mut acc) => {
                    acc.loss += r.loss;
                    for (a, g) in acc.grads.iter_mut().zip(&r.grads) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                    }
                    acc
                }
            });
        }
        let mut total = total.ok_or_else(|| Error::invalid("empty batch"))?;
        total.loss /= batch.len() as f64;
        Ok(total)
    }
}

/// Mean PSNR and SSIM of the network on held-out pairs, in inference mode.
pub fn validate(net: &CpgaNet, source: &dyn SampleSource) -> Result<(f64, f64)> {
    let scores: Vec<Result<(f64, f64)>> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let s = source.get(i)?;
            let out = net.enhance(&s.low)?;
            Ok((psnr(&out.r_hat, &s.gt, 1.0)?, ssim(&out.r_hat, &s.gt)?))
        })
        .collect();
    let mut sum = (0.0, 0.0);
    for s in scores {
        let (p, q) = s?;
        sum.0 += p;
        sum.1 += q;
    }
    let n = source.len().max(1) as f64;
    Ok((sum.0 / n, sum.1 / n))
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

/// Runs one stage to completion.
///
/// On a non-finite loss or gradient training stops with [`Error::Diverged`];
/// when `cfg.output` is set the last finite parameters are written there first.
pub fn run_stage(cfg: &TrainConfig, inputs: StageInputs) -> Result<StageOutcome> {
    cfg.validate()?;
    let StageInputs {
        train,
        val,
        init,
        teacher,
    } = inputs;
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let (mut net, mut provenance) = match init {
        Some((net, prov)) => (net, prov),
        None => (
            CpgaNet::new(cfg.model.clone(), cfg.seed)?,
            Provenance {
                seed: cfg.seed,
                ..Default::default()
            },
        ),
    };
    net.set_dgf(cfg.stage == Stage::Dgf);
    if cfg.stage == Stage::Kd {
        let t = teacher
            .as_ref()
            .ok_or_else(|| Error::invalid("the kd stage needs a teacher"))?;
        if t.param_count() <= net.param_count() {
            log::warn!(
                "teacher ({} parameters) is not larger than student ({})",
                t.param_count(),
                net.param_count()
            );
        }
    }
    let runner = Runner {
        cfg,
        teacher: teacher.as_ref(),
        psi: ProxyFeatureExtractor::default(),
    };
    let mut adam = AdamState::new(net.params().tensors(), cfg.adam);
    let lr = cfg.lr();
    let epochs = cfg.epochs();
    let max_steps = cfg.max_steps.map(|s| s as u64).unwrap_or(u64::MAX);
    let n = train.len();
    let mut history = Vec::new();
    let mut best: Option<(f64, CpgaNet)> = None;
    let mut step = 0u64;
    let mut last_loss = None;

    'epochs: for epoch in 0..epochs {
        if step >= max_steps {
            break;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64])));
        let jobs: Vec<SampleJob> = order
            .iter()
            .enumerate()
            .map(|(pos, &index)| SampleJob {
                index,
                seed: derive_seed(cfg.seed, &[epoch as u64, pos as u64 + 1]),
            })
            .collect();
        let mut samples = prefetch_samples(train.clone(), jobs, cfg.crop, cfg.flip, cfg.prefetch_depth);
        let (mut loss_sum, mut loss_count) = (0.0f64, 0usize);
        loop {
            if step >= max_steps {
                break;
            }
            let batch: Vec<PairedSample> = samples.by_ref().take(cfg.batch).collect::<Result<_>>()?;
            if batch.is_empty() {
                break;
            }
            let result = match runner.batch_grads(&net, &batch) {
                Ok(r) if r.loss.is_finite() => r,
                Ok(r) => {
                    return Err(abort(cfg, &net, provenance, step, format!("loss became {}", r.loss)));
                }
                Err(e) if is_divergence(&e) => return Err(abort(cfg, &net, provenance, step, e.to_string())),
                Err(e) => return Err(e),
            };
            let grads: Vec<&Tensor> = result.grads.iter().collect();
            let last_good = net.params().tensors().to_vec();
            let mut params: Vec<&mut Tensor> = net.params_mut().tensors_mut().iter_mut().collect();
            if let Err(e) = adam.step(&mut params, &grads, lr) {
                return Err(abort(cfg, &net, provenance, step, e.to_string()));
            }
            if !net.params().tensors().iter().all(Tensor::is_finite) {
                net.params_mut().tensors_mut().clone_from_slice(&last_good);
                let reason = "parameter update produced non-finite weights".to_string();
                return Err(abort(cfg, &net, provenance, step, reason));
            }
            step += 1;
            loss_sum += result.loss;
            loss_count += 1;
            if step >= max_steps {
                drop(samples);
                let stats = finish_epoch(&net, val.as_deref(), epoch, step, loss_sum, loss_count, &mut best)?;
                last_loss = Some(stats.mean_loss);
                history.push(stats);
                break 'epochs;
            }
        }
        let stats = finish_epoch(&net, val.as_deref(), epoch, step, loss_sum, loss_count, &mut best)?;
        last_loss = Some(stats.mean_loss);
        history.push(stats);
    }

    let best_val_psnr = best.as_ref().map(|(p, _)| *p);
    if let Some((_, b)) = best {
        net = b;
    }
    provenance.stages.push(StageRecord {
        stage: cfg.stage,
        epochs: history.len(),
        steps: step,
        lr,
        final_train_loss: last_loss,
        best_val_psnr,
    });
    let checkpoint = Checkpoint::from_net(&net, provenance);
    if let Some(path) = &cfg.output {
        checkpoint.save(path)?;
    }
    Ok(StageOutcome {
        net,
        checkpoint,
        history,
    })
}

fn finish_epoch(
    net: &CpgaNet,
    val: Option<&dyn SampleSource>,
    epoch: usize,
    steps: u64,
    loss_sum: f64,
    loss_count: usize,
    best: &mut Option<(f64, CpgaNet)>,
) -> Result<EpochStats> {
    let mean_loss = loss_sum / loss_count.max(1) as f64;
    let (val_psnr, val_ssim) = match val {
        Some(v) if !v.is_empty() => {
            let (p, q) = validate(net, v)?;
            if best.as_ref().is_none_or(|(b, _)| p > *b) {
                *best = Some((p, net.clone()));
            }
            (Some(p), Some(q))
        }
        _ => (None, None),
    };
    match (val_psnr, val_ssim) {
        (Some(p), Some(q)) => log::info!("epoch {epoch}: loss {mean_loss:.5}, val PSNR {p:.2} dB, SSIM {q:.4}"),
        _ => log::info!("epoch {epoch}: loss {mean_loss:.5}"),
    }
    Ok(EpochStats {
        epoch,
        steps,
        mean_loss,
        val_psnr,
        val_ssim,
    })
}

/// Saves the last finite parameters (if an output path is set) and builds the error.
fn abort(cfg: &TrainConfig, net: &CpgaNet, mut provenance: Provenance, step: u64, reason: String) -> Error {
    log::error!("stopping at step {step}: {reason}");
    if let Some(path) = &cfg.output {
        provenance.aborted = Some(format!("step {step}: {reason}"));
        if let Err(e) = Checkpoint::from_net(net, provenance).save(path) {
            log::error!("could not save last good checkpoint: {e}");
        }
    }
    Error::Diverged { step, reason }
}
