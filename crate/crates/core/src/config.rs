//! Run configuration shared by the CLI commands: defaults, a simple
//! `key = value` config file, and flag overrides (flags win over the file,
//! the file wins over defaults). Unknown keys are rejected.

use crate::refiner::MetaLossKind;
use crate::train::Regime;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    // dataset generation
    pub n: usize,
    pub seed: u64,
    pub pose_scale: f64,
    pub shape_scale: f64,
    pub kp_noise_px: f64,
    pub part_dropout: f64,
    pub extent: usize,
    // loss weights and rasterizer
    pub lambda_k: f64,
    pub lambda_b: f64,
    pub lambda_m: f64,
    pub lambda_3d: f64,
    pub sigma: f64,
    pub gamma: f64,
    // training
    pub meta: MetaLossKind,
    pub stages: usize,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub regime: Regime,
    // baselines and benchmark
    pub methods: String,
    pub gd_steps: usize,
    pub gd_step_size: f64,
    pub bfgs_max_iters: usize,
    pub bfgs_grad_tol: f64,
    // ablation
    pub kinds: String,
    pub ablate_seeds: u64,
    // execution
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n: 100,
            seed: 0,
            pose_scale: 0.3,
            shape_scale: 0.2,
            kp_noise_px: 0.0,
            part_dropout: 0.0,
            extent: 64,
            lambda_k: 1.0,
            // part-alignment term off by default: the dense soft raster in
            // every optimizer evaluation is far too slow for routine runs
            lambda_b: 0.0,
            lambda_m: 1.0,
            lambda_3d: 1.0,
            sigma: 1.0,
            gamma: 1e-2,
            meta: MetaLossKind::Last,
            stages: 5,
            batch: 32,
            lr: 1e-4,
            epochs: 50,
            regime: Regime::Ss,
            methods: "hund,bfgs,hybrid5".into(),
            gd_steps: 100,
            gd_step_size: 1e-3,
            bfgs_max_iters: 200,
            bfgs_grad_tol: 1e-8,
            kinds: "last,sum,min,max,oi".into(),
            ablate_seeds: 3,
            threads: 1,
        }
    }
}

impl RunConfig {
    /// Set one key from its textual value; rejects unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn p<T: FromStr>(v: &str, what: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("bad {what} '{v}': {e}"))
        }
        match key {
            "n" => self.n = p(value, "n")?,
            "seed" => self.seed = p(value, "seed")?,
            "pose_scale" => self.pose_scale = p(value, "pose_scale")?,
            "shape_scale" => self.shape_scale = p(value, "shape_scale")?,
            "kp_noise_px" => self.kp_noise_px = p(value, "kp_noise_px")?,
            "part_dropout" => self.part_dropout = p(value, "part_dropout")?,
            "extent" => self.extent = p(value, "extent")?,
            "lambda_k" => self.lambda_k = p(value, "lambda_k")?,
            "lambda_b" => self.lambda_b = p(value, "lambda_b")?,
            "lambda_m" => self.lambda_m = p(value, "lambda_m")?,
            "lambda_3d" => self.lambda_3d = p(value, "lambda_3d")?,
            "sigma" => self.sigma = p(value, "sigma")?,
            "gamma" => self.gamma = p(value, "gamma")?,
            "meta" => self.meta = p(value, "meta")?,
            "stages" | "m" => self.stages = p(value, "stages")?,
            "batch" => self.batch = p(value, "batch")?,
            "lr" => self.lr = p(value, "lr")?,
            "epochs" => self.epochs = p(value, "epochs")?,
            "regime" => self.regime = p(value, "regime")?,
            "methods" => self.methods = value.to_string(),
            "gd_steps" => self.gd_steps = p(value, "gd_steps")?,
            "gd_step_size" => self.gd_step_size = p(value, "gd_step_size")?,
            "bfgs_max_iters" => self.bfgs_max_iters = p(value, "bfgs_max_iters")?,
            "bfgs_grad_tol" => self.bfgs_grad_tol = p(value, "bfgs_grad_tol")?,
            "kinds" => self.kinds = value.to_string(),
            "ablate_seeds" => self.ablate_seeds = p(value, "ablate_seeds")?,
            "threads" => self.threads = p(value, "threads")?,
            other => return Err(format!("unknown config key '{other}'")),
        }
        Ok(())
    }

    /// Apply a `key = value` config file (# starts a comment).
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|msg| ConfigError::Parse { line: i + 1, msg })?;
        }
        Ok(())
    }
}
