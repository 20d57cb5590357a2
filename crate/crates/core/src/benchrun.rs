//! Benchmark orchestration: runs the trained refiner and the classical
//! baselines over a dataset, emits per-stage/per-iterate rows with loss
//! breakdowns and pose metrics, and aggregates medians plus the
//! evaluations-to-match crossover table. Also hosts the meta-loss ablation.

use crate::baselines::{fit_bfgs, fit_gd, fit_hybrid, metrics, BfgsConfig, OptimizerTrace};
use crate::body::{pose_joints_values, ModelState, Skeleton, StateVars};
use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::refiner::{unroll, MetaLossKind, RefinerError, Trajectory};
use crate::render::{unit_loss, LossBreakdown, LossWeights, Observation, RasterConfig};
use crate::tape::Tape;
use crate::train::{train, TrainConfig, TrainError};
use crate::util::{median, parallel_map};
use serde_json::json;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("methods {0:?} need a checkpoint, but none was provided")]
    MissingCheckpoint(Vec<String>),
    #[error("checkpoint skeleton does not match the dataset skeleton")]
    SkeletonMismatch,
    #[error("unknown method '{0}'")]
    UnknownMethod(String),
    #[error(transparent)]
    Refiner(#[from] RefinerError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Body(#[from] crate::body::BodyError),
}

/// A fitting method in the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// The trained recurrent refiner.
    Hund,
    /// Fixed-step gradient descent from the A-pose.
    Gd,
    /// BFGS from the A-pose.
    Bfgs,
    /// Refiner for i stages, then BFGS.
    Hybrid(usize),
}

impl Method {
    pub fn needs_checkpoint(&self) -> bool {
        matches!(self, Method::Hund | Method::Hybrid(_))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Hund => f.write_str("hund"),
            Method::Gd => f.write_str("gd"),
            Method::Bfgs => f.write_str("bfgs"),
            Method::Hybrid(i) => write!(f, "hybrid{i}"),
        }
    }
}

impl FromStr for Method {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "hund" => Ok(Method::Hund),
            "gd" => Ok(Method::Gd),
            "bfgs" => Ok(Method::Bfgs),
            _ => {
                if let Some(n) = s.strip_prefix("hybrid") {
                    n.parse::<usize>()
                        .map(Method::Hybrid)
                        .map_err(|_| BenchError::UnknownMethod(s.clone()))
                } else {
                    Err(BenchError::UnknownMethod(s))
                }
            }
        }
    }
}

pub fn parse_methods(list: &str) -> Result<Vec<Method>, BenchError> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Method::from_str)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub weights: LossWeights,
    pub raster: RasterConfig,
    /// Refinement stages when no checkpoint specifies them.
    pub stages: usize,
    pub gd_steps: usize,
    pub gd_step_size: f64,
    pub bfgs: BfgsConfig,
    /// Translation of the A-pose initializer, meters.
    pub apose_trans: [f64; 3],
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            // keypoint + prior benchmark objective
            weights: LossWeights { lambda_b: 0.0, ..Default::default() },
            raster: RasterConfig::default(),
            stages: 5,
            gd_steps: 100,
            gd_step_size: 1e-3,
            bfgs: BfgsConfig::default(),
            apose_trans: [0.0, 0.0, 3.0],
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub sample_id: usize,
    pub index: usize,
    pub loss_total: f64,
    pub loss_k: f64,
    pub loss_b: f64,
    pub prior: f64,
    pub mpjpe_mm: f64,
    pub mpjpe_pa_mm: f64,
    pub mpjpe_trans_mm: f64,
    pub evals: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchRow>,
}

pub const CSV_HEADER: &str =
    "method,sample_id,index,loss_total,loss_k,loss_b,prior,mpjpe_mm,mpjpe_pa_mm,mpjpe_trans_mm,evals";

impl BenchmarkReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.method,
                r.sample_id,
                r.index,
                r.loss_total,
                r.loss_k,
                r.loss_b,
                r.prior,
                r.mpjpe_mm,
                r.mpjpe_pa_mm,
                r.mpjpe_trans_mm,
                r.evals
            ));
        }
        out
    }

    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = self.rows.iter().map(|r| r.method.clone()).collect();
        m.sort();
        m.dedup();
        m
    }

    /// Final row (highest index) per sample for one method.
    pub fn final_rows(&self, method: &str) -> Vec<&BenchRow> {
        let mut best: std::collections::BTreeMap<usize, &BenchRow> = Default::default();
        for r in self.rows.iter().filter(|r| r.method == method) {
            best.entry(r.sample_id)
                .and_modify(|cur| {
                    if r.index > cur.index {
                        *cur = r;
                    }
                })
                .or_insert(r);
        }
        best.into_values().collect()
    }

    /// For each sample: cumulative evaluations at which `method` first
    /// reaches the target loss; None when it never does.
    pub fn evals_to_match(&self, method: &str, targets: &[(usize, f64)]) -> Vec<Option<usize>> {
        targets
            .iter()
            .map(|&(sample_id, target)| {
                self.rows
                    .iter()
                    .filter(|r| {
                        r.method == method && r.sample_id == sample_id && r.loss_total <= target
                    })
                    .map(|r| r.evals)
                    .min()
            })
            .collect()
    }

    /// Median over per-sample values with None treated as +∞; returns None
    /// when the median itself is +∞.
    pub fn median_evals(values: &[Option<usize>]) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        let mut v: Vec<Option<usize>> = values.to_vec();
        v.sort_by_key(|x| x.map_or(usize::MAX, |e| e));
        let mid = v.len() / 2;
        if v.len() % 2 == 1 {
            v[mid].map(|e| e as f64)
        } else {
            match (v[mid - 1], v[mid]) {
                (Some(a), Some(b)) => Some(0.5 * (a + b) as f64),
                _ => None,
            }
        }
    }

    /// Per-method medians of the final rows, plus the crossover table
    /// against the refiner's final loss when present.
    pub fn summary(&self) -> serde_json::Value {
        let mut per_method = serde_json::Map::new();
        for m in self.methods() {
            let finals = self.final_rows(&m);
            let f = |sel: fn(&BenchRow) -> f64| {
                median(&finals.iter().map(|r| sel(r)).collect::<Vec<_>>())
            };
            per_method.insert(
                m.clone(),
                json!({
                    "samples": finals.len(),
                    "final_loss_median": f(|r| r.loss_total),
                    "final_mpjpe_mm_median": f(|r| r.mpjpe_mm),
                    "final_mpjpe_pa_mm_median": f(|r| r.mpjpe_pa_mm),
                    "final_mpjpe_trans_mm_median": f(|r| r.mpjpe_trans_mm),
                    "final_evals_median": f(|r| r.evals as f64),
                }),
            );
        }

        let mut crossover = serde_json::Value::Null;
        if self.methods().iter().any(|m| m == "hund") {
            let targets: Vec<(usize, f64)> = self
                .final_rows("hund")
                .iter()
                .map(|r| (r.sample_id, r.loss_total))
                .collect();
            let hund_evals =
                median(&self.final_rows("hund").iter().map(|r| r.evals as f64).collect::<Vec<_>>());
            let mut table = serde_json::Map::new();
            for m in self.methods() {
                if m == "hund" {
                    continue;
                }
                let etm = self.evals_to_match(&m, &targets);
                let matched = etm.iter().filter(|e| e.is_some()).count();
                table.insert(
                    m.clone(),
                    json!({
                        "median_evals_to_match": Self::median_evals(&etm),
                        "matched": matched,
                        "total": etm.len(),
                    }),
                );
            }
            crossover = json!({
                "hund_final_evals_median": hund_evals,
                "per_method": table,
            });
        }

        json!({ "per_method": per_method, "crossover": crossover })
    }
}

/// Loss breakdown of a state against an observation, for reporting only
/// (not counted as an optimizer evaluation).
pub fn state_breakdown(
    obs: &Observation,
    skel: &Skeleton,
    state: &ModelState,
    weights: &LossWeights,
    raster: &RasterConfig,
) -> LossBreakdown {
    let mut tape = Tape::new();
    let sv = StateVars::constants(&mut tape, state);
    match unit_loss(&mut tape, &sv, obs, skel, weights, raster) {
        Ok((_, bd)) => bd,
        Err(_) => LossBreakdown { total: f64::NAN, keypoint: f64::NAN, part: f64::NAN, prior: f64::NAN },
    }
}

fn row_metrics(skel: &Skeleton, state: &ModelState, gt: &[[f64; 3]]) -> (f64, f64, f64) {
    match pose_joints_values(skel, state) {
        Ok(j) => {
            let m = metrics(&j, gt);
            (m.mpjpe * 1000.0, m.mpjpe_pa * 1000.0, m.mpjpe_trans * 1000.0)
        }
        Err(_) => (f64::NAN, f64::NAN, f64::NAN),
    }
}

fn trajectory_rows(
    method: &Method,
    sample_id: usize,
    skel: &Skeleton,
    gt: &[[f64; 3]],
    traj: &Trajectory,
) -> Vec<BenchRow> {
    let breakdowns = traj.breakdown_per_state();
    breakdowns
        .iter()
        .enumerate()
        .map(|(i, bd)| {
            let (mpjpe, pa, trans) = row_metrics(skel, &traj.states[i], gt);
            BenchRow {
                method: method.to_string(),
                sample_id,
                index: i,
                loss_total: bd.total,
                loss_k: bd.keypoint,
                loss_b: bd.part,
                prior: bd.prior,
                mpjpe_mm: mpjpe,
                mpjpe_pa_mm: pa,
                mpjpe_trans_mm: trans,
                evals: i + 1,
            }
        })
        .collect()
}

fn trace_rows(
    method: &Method,
    sample_id: usize,
    skel: &Skeleton,
    obs: &Observation,
    gt: &[[f64; 3]],
    trace: &OptimizerTrace,
    weights: &LossWeights,
    raster: &RasterConfig,
) -> Vec<BenchRow> {
    trace
        .iterates
        .iter()
        .enumerate()
        .map(|(i, state)| {
            let bd = state_breakdown(obs, skel, state, weights, raster);
            let (mpjpe, pa, trans) = row_metrics(skel, state, gt);
            BenchRow {
                method: method.to_string(),
                sample_id,
                index: i,
                loss_total: trace.losses[i],
                loss_k: bd.keypoint,
                loss_b: bd.part,
                prior: bd.prior,
                mpjpe_mm: mpjpe,
                mpjpe_pa_mm: pa,
                mpjpe_trans_mm: trans,
                evals: trace.loss_evals[i] + trace.grad_evals[i],
            }
        })
        .collect()
}

/// Run every requested method on every sample.
///
/// Baselines start from the A-pose initializer; refiner methods start from
/// the encoder's s_0. Rows are ordered by (method, sample, index).
pub fn run_benchmark(
    ds: &Dataset,
    methods: &[Method],
    ck: Option<&Checkpoint>,
    cfg: &BenchConfig,
) -> Result<BenchmarkReport, BenchError> {
    let needing: Vec<String> = methods
        .iter()
        .filter(|m| m.needs_checkpoint())
        .map(|m| m.to_string())
        .collect();
    if !needing.is_empty() && ck.is_none() {
        return Err(BenchError::MissingCheckpoint(needing));
    }
    if let Some(c) = ck {
        if c.skeleton != ds.skeleton {
            return Err(BenchError::SkeletonMismatch);
        }
    }

    let mut sorted: Vec<Method> = methods.to_vec();
    sorted.sort_by_key(|m| m.to_string());
    sorted.dedup();

    let skel = &ds.skeleton;
    let apose = ModelState { trans: cfg.apose_trans, ..ModelState::rest(skel) };

    let mut report = BenchmarkReport::default();
    for method in &sorted {
        let per_sample: Vec<Result<Vec<BenchRow>, BenchError>> =
            parallel_map(ds.samples.len(), cfg.threads, |i| {
                let s = &ds.samples[i];
                let gt = s.obs.gt_joints.as_ref().expect("dataset carries ground truth");
                match method {
                    Method::Hund => {
                        let c = ck.expect("checked above");
                        let traj = unroll(
                            &s.obs,
                            &c.params,
                            skel,
                            c.stages,
                            &cfg.weights,
                            &cfg.raster,
                        )?;
                        Ok(trajectory_rows(method, s.id, skel, gt, &traj))
                    }
                    Method::Gd => {
                        let trace = fit_gd(
                            &s.obs,
                            skel,
                            &apose,
                            &cfg.weights,
                            &cfg.raster,
                            cfg.gd_steps,
                            cfg.gd_step_size,
                        );
                        Ok(trace_rows(
                            method,
                            s.id,
                            skel,
                            &s.obs,
                            gt,
                            &trace,
                            &cfg.weights,
                            &cfg.raster,
                        ))
                    }
                    Method::Bfgs => {
                        let trace = fit_bfgs(
                            &s.obs,
                            skel,
                            &apose,
                            &cfg.weights,
                            &cfg.raster,
                            &cfg.bfgs,
                        );
                        Ok(trace_rows(
                            method,
                            s.id,
                            skel,
                            &s.obs,
                            gt,
                            &trace,
                            &cfg.weights,
                            &cfg.raster,
                        ))
                    }
                    Method::Hybrid(stages) => {
                        let c = ck.expect("checked above");
                        let (trace, _) = fit_hybrid(
                            &s.obs,
                            skel,
                            &c.params,
                            *stages,
                            &cfg.weights,
                            &cfg.raster,
                            &cfg.bfgs,
                        )?;
                        Ok(trace_rows(
                            method,
                            s.id,
                            skel,
                            &s.obs,
                            gt,
                            &trace,
                            &cfg.weights,
                            &cfg.raster,
                        ))
                    }
                }
            });
        for rows in per_sample {
            report.rows.extend(rows?);
        }
    }
    report
        .rows
        .sort_by(|a, b| (&a.method, a.sample_id, a.index).cmp(&(&b.method, b.sample_id, b.index)));
    Ok(report)
}

// ---------------------------------------------------------------------------
// meta-loss ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub kind: MetaLossKind,
    pub seed: u64,
    pub test_mpjpe_mm_median: f64,
    pub test_mpjpe_pa_mm_median: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,seed,test_mpjpe_mm_median,test_mpjpe_pa_mm_median\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.kind, r.seed, r.test_mpjpe_mm_median, r.test_mpjpe_pa_mm_median
            ));
        }
        out
    }

    /// Median across seeds, per kind.
    pub fn per_kind_median(&self) -> Vec<(MetaLossKind, f64, f64)> {
        let mut kinds: Vec<MetaLossKind> = self.rows.iter().map(|r| r.kind).collect();
        kinds.sort_by_key(|k| k.to_string());
        kinds.dedup();
        kinds
            .into_iter()
            .map(|k| {
                let mp: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.kind == k)
                    .map(|r| r.test_mpjpe_mm_median)
                    .collect();
                let pa: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.kind == k)
                    .map(|r| r.test_mpjpe_pa_mm_median)
                    .collect();
                (k, median(&mp), median(&pa))
            })
            .collect()
    }

    pub fn summary(&self) -> serde_json::Value {
        let mut per_kind = serde_json::Map::new();
        for (k, mp, pa) in self.per_kind_median() {
            per_kind.insert(
                k.to_string(),
                json!({"test_mpjpe_mm_median": mp, "test_mpjpe_pa_mm_median": pa}),
            );
        }
        json!({ "per_kind": per_kind })
    }
}

/// Evaluate a trained refiner on a dataset: final-stage pose metrics
/// per sample.
pub fn evaluate_refiner(
    ds: &Dataset,
    params: &crate::refiner::RefinerParams,
    stages: usize,
    weights: &LossWeights,
    raster: &RasterConfig,
    threads: usize,
) -> Result<Vec<crate::baselines::PoseMetrics>, BenchError> {
    let skel = &ds.skeleton;
    let out: Vec<Result<crate::baselines::PoseMetrics, BenchError>> =
        parallel_map(ds.samples.len(), threads, |i| {
            let s = &ds.samples[i];
            let traj = unroll(&s.obs, params, skel, stages, weights, raster)?;
            let last = traj.states.last().expect("at least s_0");
            let joints = pose_joints_values(skel, last)?;
            Ok(metrics(&joints, s.obs.gt_joints.as_ref().expect("ground truth")))
        });
    out.into_iter().collect()
}

/// Train one refiner per (kind, seed) with identical schedules and compare
/// final-stage test MPJPE.
pub fn ablate_metaloss(
    train_ds: &Dataset,
    test_ds: &Dataset,
    kinds: &[MetaLossKind],
    n_seeds: u64,
    base: &TrainConfig,
    weights: &LossWeights,
    raster: &RasterConfig,
    threads: usize,
) -> Result<AblationReport, BenchError> {
    assert!(!kinds.is_empty(), "ablation needs at least one kind");
    let mut report = AblationReport::default();
    let train_obs = train_ds.observations();
    for &kind in kinds {
        for s in 0..n_seeds.max(1) {
            let cfg = TrainConfig { meta: kind, seed: base.seed + s, ..*base };
            let (params, _) = train(&train_obs, &train_ds.skeleton, &cfg, weights, raster)?;
            let ms = evaluate_refiner(test_ds, &params, cfg.stages, weights, raster, threads)?;
            let mp: Vec<f64> = ms.iter().map(|m| m.mpjpe * 1000.0).collect();
            let pa: Vec<f64> = ms.iter().map(|m| m.mpjpe_pa * 1000.0).collect();
            report.rows.push(AblationRow {
                kind,
                seed: cfg.seed,
                test_mpjpe_mm_median: median(&mp),
                test_mpjpe_pa_mm_median: median(&pa),
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::default_skeleton;
    use crate::dataset::{generate_dataset, GenConfig};
    use crate::refiner::{RefinerDims, RefinerParams};

    fn tiny_dataset(n: usize) -> Dataset {
        let skel = default_skeleton();
        let cfg = GenConfig { n, seed: 3, extent: 8, ..Default::default() };
        generate_dataset(&skel, &cfg, 1).unwrap()
    }

    fn tiny_bench_cfg() -> BenchConfig {
        BenchConfig {
            raster: RasterConfig { h: 8, w: 8, ..Default::default() },
            gd_steps: 5,
            bfgs: BfgsConfig { max_iters: 10, ..Default::default() },
            ..Default::default()
        }
    }

    fn tiny_checkpoint(ds: &Dataset) -> Checkpoint {
        let dims = RefinerDims::standard(&ds.skeleton, 8);
        Checkpoint {
            skeleton: ds.skeleton.clone(),
            stages: 3,
            params: RefinerParams::init(dims, 5),
        }
    }

    #[test]
    fn method_parsing() {
        assert_eq!(Method::from_str("hund").unwrap(), Method::Hund);
        assert_eq!(Method::from_str("hybrid3").unwrap(), Method::Hybrid(3));
        assert!(Method::from_str("nope").is_err());
        let ms = parse_methods("hund,bfgs,hybrid2").unwrap();
        assert_eq!(ms, vec![Method::Hund, Method::Bfgs, Method::Hybrid(2)]);
    }

    #[test]
    fn empty_method_list_gives_header_only() {
        let ds = tiny_dataset(2);
        let report = run_benchmark(&ds, &[], None, &tiny_bench_cfg()).unwrap();
        assert!(report.rows.is_empty());
        assert_eq!(report.to_csv().lines().count(), 1);
    }

    #[test]
    fn missing_checkpoint_rejected_before_work() {
        let ds = tiny_dataset(2);
        assert!(matches!(
            run_benchmark(&ds, &[Method::Hund], None, &tiny_bench_cfg()),
            Err(BenchError::MissingCheckpoint(_))
        ));
    }

    #[test]
    fn row_counts_and_determinism() {
        let ds = tiny_dataset(3);
        let ck = tiny_checkpoint(&ds);
        let cfg = tiny_bench_cfg();
        let methods = [Method::Hund, Method::Gd, Method::Bfgs];
        let r1 = run_benchmark(&ds, &methods, Some(&ck), &cfg).unwrap();
        let r2 = run_benchmark(&ds, &methods, Some(&ck), &cfg).unwrap();
        assert_eq!(r1.to_csv(), r2.to_csv());

        // row count = Σ per-(method,sample) trace lengths; refiner rows are
        // stages+1 per sample
        let hund_rows = r1.rows.iter().filter(|r| r.method == "hund").count();
        assert_eq!(hund_rows, 3 * (ck.stages + 1));
        // gd records steps+1 iterates
        let gd_rows = r1.rows.iter().filter(|r| r.method == "gd").count();
        assert_eq!(gd_rows, 3 * (cfg.gd_steps + 1));

        // rows sorted by (method, sample, index)
        let mut sorted = r1.rows.clone();
        sorted.sort_by(|a, b| {
            (&a.method, a.sample_id, a.index).cmp(&(&b.method, b.sample_id, b.index))
        });
        assert_eq!(r1.rows, sorted);

        // thread count must not change the report
        let r3 = run_benchmark(&ds, &methods, Some(&ck), &BenchConfig { threads: 3, ..cfg })
            .unwrap();
        assert_eq!(r1.to_csv(), r3.to_csv());
    }

    #[test]
    fn summary_medians_recomputable_from_rows() {
        let ds = tiny_dataset(3);
        let ck = tiny_checkpoint(&ds);
        let cfg = tiny_bench_cfg();
        let report =
            run_benchmark(&ds, &[Method::Hund, Method::Bfgs], Some(&ck), &cfg).unwrap();
        let summary = report.summary();
        let finals = report.final_rows("bfgs");
        let expect = median(&finals.iter().map(|r| r.loss_total).collect::<Vec<_>>());
        let got = summary["per_method"]["bfgs"]["final_loss_median"].as_f64().unwrap();
        assert_eq!(expect, got);
        assert!(summary["crossover"]["per_method"]["bfgs"]["total"].as_u64().unwrap() == 3);
    }

    #[test]
    fn median_evals_handles_unmatched() {
        assert_eq!(
            BenchmarkReport::median_evals(&[Some(4), Some(10), Some(6)]),
            Some(6.0)
        );
        assert_eq!(BenchmarkReport::median_evals(&[Some(4), None, None]), None);
        assert_eq!(BenchmarkReport::median_evals(&[]), None);
    }
}
