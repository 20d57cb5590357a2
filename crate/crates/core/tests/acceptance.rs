//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `cargo test --test acceptance -- --nocapture` to see them).
//!
//! The suite covers the gradient checks, the rasterizer's hard limit,
//! camera-warp consistency, meta-loss semantics, metric properties, the
//! self-supervised bootstrap, the refiner-vs-BFGS evaluation-count
//! comparison, hybrid refinement, the meta-loss ablation ordering, and
//! byte-level determinism of the CLI pipeline.

use neural_descent::baselines::{metrics, BfgsConfig};
use neural_descent::benchrun::{ablate_metaloss, run_benchmark, BenchConfig, BenchmarkReport,
                               Method};
use neural_descent::body::{default_skeleton, pose_joints_values, sample_state, ModelState,
                           StateVars, DEFAULT_T_RANGE};
use neural_descent::camera::{crop_intrinsics, project_point, project_var, warp_pixel, CropSpec,
                             Intrinsics};
use neural_descent::checkpoint::Checkpoint;
use neural_descent::cli;
use neural_descent::config::RunConfig;
use neural_descent::dataset::{generate_dataset, Dataset, GenConfig};
use neural_descent::refiner::{encode_context, meta_loss, meta_loss_var, refine_step, unroll,
                              unroll_on_tape, MemoryVars, MetaLossKind, ParamVars, RefinerDims,
                              RefinerParams};
use neural_descent::render::{fs_loss, hard_rasterize, keypoint_loss, min_edge_distance_map,
                             part_loss, soft_rasterize, unit_loss, LossWeights, Observation,
                             PartMap, RasterConfig};
use neural_descent::tape::{check_gradient, DiffError, Tape, Var};
use neural_descent::tensor::Tensor;
use neural_descent::train::{train, Regime, TrainConfig};
use neural_descent::util::median;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::time::Instant;

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

/// Noiseless synthetic observation pair (skeleton fixed) for loss checks.
fn synthetic_pair(seed: u64, extent: usize) -> (Observation, ModelState) {
    let skel = default_skeleton();
    let cfg = GenConfig { n: 1, seed, pose_scale: 0.3, extent, ..Default::default() };
    let ds = generate_dataset(&skel, &cfg, 1).expect("generation");
    let s = ds.samples.into_iter().next().unwrap();
    (s.obs, s.gt_state)
}

// ---------------------------------------------------------------------------
// 1. gradient suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_suite() {
    let started = Instant::now();
    let skel = default_skeleton();
    let raster = RasterConfig { sigma: 1.0, gamma: 1e-2, h: 12, w: 12 };
    let (obs, _) = synthetic_pair(42, raster.h);
    let mut worst: (f64, &'static str) = (0.0, "none");
    let mut track = |name: &'static str, err: f64| {
        if err > worst.0 {
            worst = (err, name);
        }
        assert!(err < 1e-4, "{name} gradient error {err}");
    };

    for trial in 0..10u64 {
        let probe = sample_state(&skel, 7_000 + trial, 0.3, 0.2, &DEFAULT_T_RANGE);
        let flat = probe.to_flat();
        let skel_ref = &skel;
        let obs_ref = &obs;

        // perspective projection
        let cam = obs.crop_intrinsics;
        let point = [
            0.2 * (trial as f64 - 5.0) / 5.0,
            0.1 * (trial as f64 % 3.0),
            2.0 + 0.3 * trial as f64,
        ];
        let err = check_gradient(
            move |t, x| {
                let (u, v) =
                    project_var(t, x, &cam).map_err(|_| DiffError::NonFinite("project"))?;
                let uv = t.concat(&[u, v])?;
                t.sumsq(uv)
            },
            &point,
            1e-6,
        )
        .unwrap();
        track("projection", err);

        // forward kinematics (weighted joint sum)
        let err = check_gradient(
            move |t, x| {
                let sv = StateVars::from_flat_var(t, skel_ref, x)?;
                let joints = neural_descent::body::pose_joints(t, skel_ref, &sv)
                    .map_err(|_| DiffError::NonFinite("fk"))?;
                let n = t.val(joints).len();
                let flat = t.reshape(joints, vec![n])?;
                let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0).collect();
                let wv = t.constant(Tensor::vector(w));
                let p = t.mul(flat, wv)?;
                Ok(t.sum(p))
            },
            &flat,
            1e-6,
        )
        .unwrap();
        track("kinematics", err);

        // L_k
        let err = check_gradient(
            move |t, x| {
                let sv = StateVars::from_flat_var(t, skel_ref, x)?;
                keypoint_loss(t, &sv, obs_ref, skel_ref)
                    .map_err(|_| DiffError::NonFinite("L_k"))
            },
            &flat,
            1e-6,
        )
        .unwrap();
        track("L_k", err);

        // L_b (σ = 1.0 ≥ 0.5)
        let raster_ref = &raster;
        let err = check_gradient(
            move |t, x| {
                let sv = StateVars::from_flat_var(t, skel_ref, x)?;
                part_loss(t, &sv, obs_ref, skel_ref, raster_ref)
                    .map_err(|_| DiffError::NonFinite("L_b"))
            },
            &flat,
            1e-6,
        )
        .unwrap();
        track("L_b", err);

        // L_u with both alignment terms
        let err = check_gradient(
            move |t, x| {
                let sv = StateVars::from_flat_var(t, skel_ref, x)?;
                let w = LossWeights::default();
                let (lu, _) = unit_loss(t, &sv, obs_ref, skel_ref, &w, raster_ref)
                    .map_err(|_| DiffError::NonFinite("L_u"))?;
                Ok(lu)
            },
            &flat,
            1e-6,
        )
        .unwrap();
        track("L_u", err);

        // L_f
        let err = check_gradient(
            move |t, x| {
                let sv = StateVars::from_flat_var(t, skel_ref, x)?;
                fs_loss(t, &sv, obs_ref, skel_ref, &LossWeights::default())
                    .map_err(|_| DiffError::NonFinite("L_f"))
            },
            &flat,
            1e-6,
        )
        .unwrap();
        track("L_f", err);

        // refiner step w.r.t. (state, previous loss) under fixed params
        let dims = RefinerDims::new(&skel, 4, 5, 6, 8);
        let params = RefinerParams::init(dims, 100 + trial).randomized(0.05, trial);
        let mut aug = flat.clone();
        aug.push(0.5 + 0.1 * trial as f64); // previous loss input
        let params_ref = &params;
        let err = check_gradient(
            move |t, x| {
                let n = t.val(x).len();
                let sflat = t.slice(x, 0, n - 1)?;
                let l_prev = t.slice(x, n - 1, n)?;
                let sv = StateVars::from_flat_var(t, skel_ref, sflat)?;
                let pv = params_ref.on_tape(t, false);
                let sc = t.constant(Tensor::zeros(&[dims.context_dim]));
                let mem = MemoryVars::zeros(t, &dims);
                let (s_next, _) = refine_step(t, &sv, &mem, l_prev, sc, &pv, skel_ref)
                    .map_err(|_| DiffError::NonFinite("refine_step"))?;
                let nf = t.concat(&[s_next.theta, s_next.beta, s_next.rot6, s_next.trans])?;
                let w: Vec<f64> =
                    (0..t.val(nf).len()).map(|i| ((i * 5 + 2) % 13) as f64 / 13.0).collect();
                let wv = t.constant(Tensor::vector(w));
                let p = t.mul(nf, wv)?;
                Ok(t.sum(p))
            },
            &aug,
            1e-6,
        )
        .unwrap();
        track("refine_step", err);

        // meta-losses over random stage values
        let mut rng = ChaCha20Rng::seed_from_u64(9_000 + trial);
        let stage_vals: Vec<f64> = (0..5).map(|_| rng.gen_range(0.5..4.0)).collect();
        for kind in MetaLossKind::ALL {
            let err = check_gradient(
                move |t, x| {
                    let vars: Vec<Var> =
                        (0..5).map(|i| t.slice(x, i, i + 1)).collect::<Result<_, _>>()?;
                    meta_loss_var(t, &vars, kind).map_err(|_| DiffError::NonFinite("meta"))
                },
                &stage_vals,
                1e-6,
            )
            .unwrap();
            track("meta_loss", err);
        }
    }

    let elapsed = started.elapsed();
    report(
        "1 gradient suite",
        elapsed.as_secs_f64() < 120.0,
        &format!("worst rel err {:.3e} in {}, {:.1}s", worst.0, worst.1, elapsed.as_secs_f64()),
    );
}

/// Full training gradient: ∂ meta / ∂ δ against finite differences on a
/// tiny configuration (M = 2, hidden 8, 4×4 part map).
#[test]
fn training_gradient_matches_finite_differences_on_tiny_model() {
    let skel = default_skeleton();
    let (obs, _) = synthetic_pair(77, 4);
    let raster = RasterConfig { sigma: 1.0, gamma: 1e-2, h: 4, w: 4 };
    let dims = RefinerDims::new(&skel, 4, 5, 6, 8);
    let params = RefinerParams::init(dims, 3).randomized(0.05, 9);
    let weights = LossWeights { lambda_k: 1.0, lambda_b: 0.0, ..Default::default() };
    let flat = params.flatten();
    let skel_ref = &skel;
    let obs_ref = &obs;
    let raster_ref = &raster;

    let err = check_gradient(
        move |t, x| {
            let pv = ParamVars::from_flat_var(t, dims, x)?;
            let u = unroll_on_tape(t, obs_ref, &pv, skel_ref, 2, &weights, raster_ref)
                .map_err(|_| DiffError::NonFinite("unroll"))?;
            meta_loss_var(t, &u.stage_loss_vars, MetaLossKind::Last)
                .map_err(|_| DiffError::NonFinite("meta"))
        },
        &flat,
        1e-5,
    )
    .unwrap();
    println!("training gradient vs finite differences: rel err {err:.3e}");
    assert!(err < 1e-3, "training gradient error {err}");
}

// ---------------------------------------------------------------------------
// 2. rasterizer limit
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_rasterizer_limit() {
    let skel = default_skeleton();
    let cfg = RasterConfig { sigma: 1e-4, gamma: 1e-2, h: 64, w: 64 };
    let cam = Intrinsics { fx: 80.0, fy: 80.0, cx: 32.0, cy: 32.0 };
    let mut worst = 0.0f64;

    for trial in 0..20u64 {
        let state = sample_state(&skel, 300 + trial, 0.4, 0.3, &DEFAULT_T_RANGE);
        let mut tape = Tape::new();
        let sv = StateVars::constants(&mut tape, &state);
        let mesh = neural_descent::body::pose_mesh(&mut tape, &skel, &sv).unwrap();
        let verts = mesh.vertex_values(&tape);

        // single prism: bone (trial mod 16) + 1
        let bone = (trial as usize % 16) + 1;
        let base = (bone - 1) * 8;
        let verts8: Vec<[f64; 3]> = verts[base..base + 8].to_vec();
        let tris: Vec<[usize; 3]> = mesh.triangles[(bone - 1) * 12..bone * 12]
            .iter()
            .map(|t| [t[0] - base, t[1] - base, t[2] - base])
            .collect();
        let parts = vec![mesh.triangle_parts[(bone - 1) * 12]; 12];

        let hard = hard_rasterize(&verts8, &tris, &parts, &cam, &cfg).unwrap();
        let edge_d = min_edge_distance_map(&verts8, &tris, &cam, &cfg);

        let mut t2 = Tape::new();
        let vflat: Vec<f64> = verts8.iter().flatten().copied().collect();
        let vv = t2.constant(Tensor::matrix(8, 3, vflat));
        let m = neural_descent::body::Mesh {
            vertices: vv,
            triangles: tris.clone(),
            triangle_parts: parts.clone(),
            vertex_parts: vec![parts[0]; 8],
        };
        let img = soft_rasterize(&mut t2, &m, &cam, &cfg).unwrap();
        let soft = t2.val(img).data();

        let c = neural_descent::body::PART_COUNT + 1;
        for px in 0..cfg.h * cfg.w {
            if edge_d[px] <= 1.0 {
                continue;
            }
            for ch in 0..c {
                worst = worst.max((soft[px * c + ch] - hard[px * c + ch]).abs());
            }
        }
    }
    report(
        "2 rasterizer limit",
        worst < 0.05,
        &format!("max |soft(σ=1e-4) − hard| off the edge band = {worst:.4}"),
    );
}

// ---------------------------------------------------------------------------
// 3. camera consistency
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_camera_consistency() {
    let mut rng = ChaCha20Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = Intrinsics {
            fx: rng.gen_range(100.0..900.0),
            fy: rng.gen_range(100.0..900.0),
            cx: rng.gen_range(50.0..500.0),
            cy: rng.gen_range(50.0..500.0),
        };
        let crop = CropSpec {
            x0: rng.gen_range(-100.0..400.0),
            y0: rng.gen_range(-100.0..400.0),
            w: rng.gen_range(20.0..600.0),
            h: rng.gen_range(20.0..600.0),
            out: rng.gen_range(16.0..512.0),
        };
        let p = [
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(0.2..9.0),
        ];
        let direct = project_point(p, &crop_intrinsics(&c, &crop)).unwrap();
        let full = project_point(p, &c).unwrap();
        let warped = warp_pixel(&crop, full[0], full[1]);
        worst = worst.max((direct[0] - warped.0).abs().max((direct[1] - warped.1).abs()));
    }
    report(
        "3 camera consistency",
        worst < 1e-9,
        &format!("max crop-vs-warp deviation {worst:.2e} px over 1000 trials"),
    );
}

// ---------------------------------------------------------------------------
// 4. meta-loss unit tests
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_meta_loss_table_and_oi_properties() {
    let ls = [5.0, 4.0, 6.0, 3.0];
    let table_ok = meta_loss(&ls, MetaLossKind::Sum).unwrap() == 18.0
        && meta_loss(&ls, MetaLossKind::Last).unwrap() == 3.0
        && meta_loss(&ls, MetaLossKind::Min).unwrap() == 3.0
        && meta_loss(&ls, MetaLossKind::Max).unwrap() == 6.0
        && meta_loss(&ls, MetaLossKind::Oi).unwrap() == -2.0;

    let mut rng = ChaCha20Rng::seed_from_u64(44);
    let mut props_ok = true;
    for _ in 0..1000 {
        let m = rng.gen_range(1..9);
        let seq: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..10.0)).collect();
        let oi = meta_loss(&seq, MetaLossKind::Oi).unwrap();
        props_ok &= oi <= 0.0;
        // telescoping identity: on the sorted-decreasing rearrangement,
        // oi = last − first
        let mut dec = seq.clone();
        dec.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let oi_dec = meta_loss(&dec, MetaLossKind::Oi).unwrap();
        props_ok &= (oi_dec - (dec[dec.len() - 1] - dec[0])).abs() < 1e-12;
    }
    report(
        "4 meta-loss unit tests",
        table_ok && props_ok,
        "[5,4,6,3] table exact; oi ≤ 0 and telescoping on 1000 random sequences",
    );
}

// ---------------------------------------------------------------------------
// 5. metric properties
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_metric_properties() {
    let mut rng = ChaCha20Rng::seed_from_u64(55);
    let mut pa_ok = true;
    for _ in 0..1000 {
        let n = rng.gen_range(4..24);
        let a: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let b: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let m = metrics(&a, &b);
        pa_ok &= m.mpjpe_pa <= m.mpjpe + 1e-12;
    }

    let skel = default_skeleton();
    let gt =
        pose_joints_values(&skel, &sample_state(&skel, 9, 0.4, 0.2, &DEFAULT_T_RANGE)).unwrap();
    let shifted: Vec<[f64; 3]> = gt.iter().map(|&p| [p[0] + 0.25, p[1] - 0.1, p[2]]).collect();
    let m = metrics(&shifted, &gt);
    let trans_ok = m.mpjpe_pa < 1e-9;

    report(
        "5 metric properties",
        pa_ok && trans_ok,
        &format!("PA ≤ raw on 1000 pairs; pure-translation PA = {:.2e}", m.mpjpe_pa),
    );
}
