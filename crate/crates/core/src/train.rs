//! First-order training of the recurrent refiner.
//!
//! Each step unrolls the refiner over a batch of observations, aggregates
//! the per-stage losses with the configured meta-loss, and updates the
//! parameters with Adam. Self-supervised batches use the unit loss stages;
//! fully-supervised batches score the same trajectory with the 3D loss.
//! Deterministic given (seed, dataset, config) in single-threaded mode.

use crate::body::Skeleton;
use crate::refiner::{meta_loss_var, unroll_on_tape, MetaLossKind, RefinerDims, RefinerError,
                     RefinerParams};
use crate::render::{fs_loss, LossWeights, Observation, RasterConfig};
use crate::tape::{DiffError, Tape};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("regime {0} requires 3D ground truth on every sample")]
    MissingGroundTruth(Regime),
    #[error("training aborted: three consecutive non-finite steps")]
    Diverged,
    #[error(transparent)]
    Refiner(#[from] RefinerError),
    #[error(transparent)]
    Render(#[from] crate::render::RenderError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Supervision regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Self-supervised: 2D observations only.
    Ss,
    /// Fully supervised: 3D ground truth per sample.
    Fs,
    /// Alternating self-/fully-supervised batches.
    FsSs,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Ss => "ss",
            Regime::Fs => "fs",
            Regime::FsSs => "fs+ss",
        })
    }
}

impl FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ss" => Ok(Regime::Ss),
            "fs" => Ok(Regime::Fs),
            "fs+ss" | "fsss" | "fs_ss" => Ok(Regime::FsSs),
            other => Err(format!("unknown regime '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub meta: MetaLossKind,
    /// Unrolled refinement stages M.
    pub stages: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub regime: Regime,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            meta: MetaLossKind::Last,
            stages: 5,
            batch_size: 32,
            learning_rate: 1e-4,
            epochs: 50,
            regime: Regime::Ss,
            seed: 0,
        }
    }
}

/// One optimizer step in the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    pub epoch: usize,
    /// "ss" or "fs" for this batch.
    pub mode: String,
    /// Batch-mean meta-loss before the update (NaN when skipped).
    pub meta_loss: f64,
    /// Samples that contributed (untruncated, finite).
    pub used: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<TrainStep>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,mode,meta_loss,used,skipped\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.step, s.epoch, s.mode, s.meta_loss, s.used, s.skipped
            ));
        }
        out
    }
}

/// Adam with bias correction (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u32,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[Vec<usize>]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                pd[i] -= self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
            }
        }
    }
}

fn fisher_yates<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Train the refiner on a set of observations.
///
/// Returns the trained parameters and the per-step log. A batch whose
/// mean meta-loss is non-finite is skipped; three consecutive skipped
/// steps abort with [`TrainError::Diverged`].
pub fn train(
    samples: &[Observation],
    skel: &Skeleton,
    config: &TrainConfig,
    weights: &LossWeights,
    cfg: &RasterConfig,
) -> Result<(RefinerParams, TrainLog), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if matches!(config.regime, Regime::Fs | Regime::FsSs) {
        let missing = samples
            .iter()
            .any(|o| o.gt_joints.is_none() && o.gt_mesh_vertices.is_none());
        if missing {
            return Err(TrainError::MissingGroundTruth(config.regime));
        }
    }

    let dims = RefinerDims::standard(skel, cfg.h.min(cfg.w));
    let mut params = RefinerParams::init(dims, config.seed);
    let shapes: Vec<Vec<usize>> = dims.param_shapes().into_iter().map(|(_, s)| s).collect();
    let mut adam = Adam::new(config.learning_rate, &shapes);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));

    let mut log = TrainLog::default();
    let mut step_idx = 0usize;
    let mut consecutive_bad = 0usize;

    for epoch in 0..config.epochs {
        let order = fisher_yates(samples.len(), &mut rng);
        for batch in order.chunks(config.batch_size) {
            let fs_batch = match config.regime {
                Regime::Ss => false,
                Regime::Fs => true,
                Regime::FsSs => step_idx % 2 == 1,
            };
            let mode = if fs_batch { "fs" } else { "ss" };

            let mut tape = Tape::new();
            let pv = params.on_tape(&mut tape, true);
            let mut metas = Vec::with_capacity(batch.len());
            for &si in batch {
                let obs = &samples[si];
                let u = unroll_on_tape(&mut tape, obs, &pv, skel, config.stages, weights, cfg)?;
                let stage_vars = if fs_batch {
                    let mut vars = Vec::new();
                    for sv in u.state_vars.iter().skip(1) {
                        vars.push(fs_loss(&mut tape, sv, obs, skel, weights)?);
                    }
                    vars
                } else {
                    u.stage_loss_vars
                };
                if stage_vars.is_empty() {
                    continue; // truncated before the first stage
                }
                let meta = meta_loss_var(&mut tape, &stage_vars, config.meta)?;
                if tape.val(meta).item().is_finite() {
                    metas.push(meta);
                }
            }

            let (loss_val, ok) = if metas.is_empty() {
                (f64::NAN, false)
            } else {
                let sum = tape.add_many(&metas)?;
                let mean = tape.scale(sum, 1.0 / metas.len() as f64)?;
                let v = tape.val(mean).item();
                if v.is_finite() {
                    let grads = tape.gradient(mean, &pv.vars)?;
                    let finite = grads.iter().all(|g| g.all_finite());
                    if finite {
                        adam.step(&mut params.tensors, &grads);
                        (v, true)
                    } else {
                        (v, false)
                    }
                } else {
                    (v, false)
                }
            };

            if ok {
                consecutive_bad = 0;
            } else {
                consecutive_bad += 1;
                if consecutive_bad >= 3 {
                    return Err(TrainError::Diverged);
                }
            }
            log.steps.push(TrainStep {
                step: step_idx,
                epoch,
                mode: mode.to_string(),
                meta_loss: loss_val,
                used: metas.len(),
                skipped: !ok,
            });
            step_idx += 1;
        }
    }
    Ok((params, log))
}
