//! Synthetic dataset generation and serialization: the stand-in for
//! image-derived observations.
//!
//! Each sample draws a ground-truth state from the prior, projects its
//! joints through a synthetic source camera, crops a square region around
//! the body with a margin, and stores crop-space keypoints (optionally
//! noised), confidences, and a hard-rasterized part map. Files are JSONL:
//! one self-describing record per line, part maps as base64 little-endian
//! f32, plus a JSON manifest with a content hash.

use crate::body::{pose_joints_values, pose_mesh, sample_state_with, ModelState, Skeleton,
                  StateVars, TransRange, DEFAULT_T_RANGE};
use crate::camera::{approx_intrinsics, crop_intrinsics, project_points, CameraError, CropSpec,
                    Intrinsics};
use crate::render::{hard_rasterize, Observation, PartMap, RasterConfig, RenderError};
use crate::tape::Tape;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("sample {0} kept landing behind the camera after {1} retries")]
    RetriesExhausted(usize, usize),
    #[error("dataset file has no header line")]
    MissingHeader,
    #[error("unsupported dataset version {0}")]
    BadVersion(u32),
    #[error("bad base64 part map: {0}")]
    BadBase64(#[from] base64::DecodeError),
    #[error("part map byte length {0} is not a multiple of 4")]
    BadPartMapBytes(usize),
    #[error(transparent)]
    Body(#[from] crate::body::BodyError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n: usize,
    pub seed: u64,
    pub pose_scale: f64,
    pub shape_scale: f64,
    /// Gaussian keypoint noise in crop pixels.
    pub kp_noise_px: f64,
    /// Dropout rate for keypoint confidences and part channels.
    pub part_dropout: f64,
    /// Crop/raster extent in pixels (square).
    pub extent: usize,
    /// Synthetic source image size.
    pub source_h: usize,
    pub source_w: usize,
    /// Margin around the projected body when cropping.
    pub margin: f64,
    pub t_range: TransRange,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n: 100,
            seed: 0,
            pose_scale: 0.3,
            shape_scale: 0.2,
            kp_noise_px: 0.0,
            part_dropout: 0.0,
            extent: 64,
            source_h: 480,
            source_w: 640,
            margin: 0.1,
            t_range: DEFAULT_T_RANGE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub gt_state: ModelState,
    pub obs: Observation,
    pub crop: CropSpec,
    pub source_intrinsics: Intrinsics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub skeleton: Skeleton,
    pub samples: Vec<Sample>,
}

const MAX_RETRIES: usize = 16;

/// Deterministic per-sample RNG, independent of how samples are batched
/// or threaded.
fn sample_rng(seed: u64, id: usize) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(id as u64),
    )
}

/// Ground-truth joints, mesh vertices, and triangle data for a state.
pub fn ground_truth_geometry(
    skel: &Skeleton,
    state: &ModelState,
) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>, Vec<[usize; 3]>, Vec<usize>), DatasetError> {
    let joints = pose_joints_values(skel, state)?;
    let mut tape = Tape::new();
    let sv = StateVars::constants(&mut tape, state);
    let mesh = pose_mesh(&mut tape, skel, &sv)?;
    Ok((joints, mesh.vertex_values(&tape), mesh.triangles, mesh.triangle_parts))
}

fn generate_sample(
    skel: &Skeleton,
    config: &GenConfig,
    id: usize,
) -> Result<Sample, DatasetError> {
    let mut rng = sample_rng(config.seed, id);
    let source = approx_intrinsics(config.source_h as f64, config.source_w as f64);

    for _attempt in 0..MAX_RETRIES {
        let state = sample_state_with(
            skel,
            &mut rng,
            config.pose_scale,
            config.shape_scale,
            &config.t_range,
        );
        let (joints, verts, tris, tri_parts) = match ground_truth_geometry(skel, &state) {
            Ok(g) => g,
            Err(_) => continue,
        };
        if verts.iter().chain(&joints).any(|p| p[2] <= crate::camera::MIN_DEPTH) {
            continue; // behind the camera: resample
        }

        let kps_src = project_points(&joints, &source)?;
        let (mut lo_u, mut hi_u) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut lo_v, mut hi_v) = (f64::INFINITY, f64::NEG_INFINITY);
        for kp in &kps_src {
            lo_u = lo_u.min(kp[0]);
            hi_u = hi_u.max(kp[0]);
            lo_v = lo_v.min(kp[1]);
            hi_v = hi_v.max(kp[1]);
        }
        let side = (hi_u - lo_u).max(hi_v - lo_v) * (1.0 + 2.0 * config.margin);
        let cx = (lo_u + hi_u) / 2.0;
        let cy = (lo_v + hi_v) / 2.0;
        let crop = CropSpec {
            x0: cx - side / 2.0,
            y0: cy - side / 2.0,
            w: side,
            h: side,
            out: config.extent as f64,
        };
        let cc = crop_intrinsics(&source, &crop);

        let mut keypoints = project_points(&joints, &cc)?;
        for kp in keypoints.iter_mut() {
            kp[0] += config.kp_noise_px * rng.sample::<f64, _>(StandardNormal);
            kp[1] += config.kp_noise_px * rng.sample::<f64, _>(StandardNormal);
        }
        let confidences: Vec<f64> = (0..skel.joint_count())
            .map(|_| if rng.gen_bool(config.part_dropout.clamp(0.0, 1.0)) { 0.0 } else { 1.0 })
            .collect();

        let raster = RasterConfig {
            h: config.extent,
            w: config.extent,
            ..RasterConfig::default()
        };
        let mut map = hard_rasterize(&verts, &tris, &tri_parts, &cc, &raster)?;
        let channels = crate::body::PART_COUNT + 1;
        for ch in 0..crate::body::PART_COUNT {
            if rng.gen_bool(config.part_dropout.clamp(0.0, 1.0)) {
                for px in 0..config.extent * config.extent {
                    map[px * channels + ch] = 0.0;
                }
            }
        }

        let obs = Observation {
            keypoints,
            confidences,
            part_map: PartMap::from_f64(config.extent, config.extent, channels, &map),
            crop_intrinsics: cc,
            gt_joints: Some(joints),
            gt_mesh_vertices: Some(verts),
        };
        return Ok(Sample { id, gt_state: state, obs, crop, source_intrinsics: source });
    }
    Err(DatasetError::RetriesExhausted(id, MAX_RETRIES))
}

/// Generate `config.n` samples; deterministic in the seed, independent of
/// `threads` (per-sample RNG streams). Output order is by sample id.
pub fn generate_dataset(
    skel: &Skeleton,
    config: &GenConfig,
    threads: usize,
) -> Result<Dataset, DatasetError> {
    let results = crate::util::parallel_map(config.n, threads, |i| {
        generate_sample(skel, config, i)
    });
    let samples = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { config: *config, skeleton: skel.clone(), samples })
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    version: u32,
    config: GenConfig,
    skeleton: Skeleton,
}

#[derive(Serialize, Deserialize)]
struct PartMapDto {
    h: usize,
    w: usize,
    channels: usize,
    b64: String,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: usize,
    state: ModelState,
    keypoints: Vec<[f64; 2]>,
    confidences: Vec<f64>,
    crop: CropSpec,
    source_intrinsics: Intrinsics,
    crop_intrinsics: Intrinsics,
    part_map: PartMapDto,
}

fn part_map_to_dto(pm: &PartMap) -> PartMapDto {
    let mut bytes = Vec::with_capacity(pm.data.len() * 4);
    for v in &pm.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    PartMapDto { h: pm.h, w: pm.w, channels: pm.channels, b64: B64.encode(bytes) }
}

fn part_map_from_dto(dto: &PartMapDto) -> Result<PartMap, DatasetError> {
    let bytes = B64.decode(&dto.b64)?;
    if bytes.len() % 4 != 0 {
        return Err(DatasetError::BadPartMapBytes(bytes.len()));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let pm = PartMap { h: dto.h, w: dto.w, channels: dto.channels, data };
    pm.validate()?;
    Ok(pm)
}

impl Dataset {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        let header = Header {
            kind: "neural-descent-dataset".into(),
            version: 1,
            config: self.config,
            skeleton: self.skeleton.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            let rec = Record {
                id: s.id,
                state: s.gt_state.clone(),
                keypoints: s.obs.keypoints.clone(),
                confidences: s.obs.confidences.clone(),
                crop: s.crop,
                source_intrinsics: s.source_intrinsics,
                crop_intrinsics: s.obs.crop_intrinsics,
                part_map: part_map_to_dto(&s.obs.part_map),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(buf)
    }

    /// Parse a JSONL dataset; ground-truth joints and mesh vertices are
    /// recomputed from the stored state (they are pure functions of it).
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Dataset, DatasetError> {
        let mut lines = r.lines();
        let header_line = lines.next().ok_or(DatasetError::MissingHeader)??;
        let header: Header = serde_json::from_str(&header_line)?;
        if header.version != 1 {
            return Err(DatasetError::BadVersion(header.version));
        }
        let skeleton = header.skeleton;
        let mut samples = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)?;
            let part_map = part_map_from_dto(&rec.part_map)?;
            let (joints, verts, _, _) = ground_truth_geometry(&skeleton, &rec.state)?;
            samples.push(Sample {
                id: rec.id,
                gt_state: rec.state,
                obs: Observation {
                    keypoints: rec.keypoints,
                    confidences: rec.confidences,
                    part_map,
                    crop_intrinsics: rec.crop_intrinsics,
                    gt_joints: Some(joints),
                    gt_mesh_vertices: Some(verts),
                },
                crop: rec.crop,
                source_intrinsics: rec.source_intrinsics,
            });
        }
        Ok(Dataset { config: header.config, skeleton, samples })
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        std::fs::create_dir_all(dir)?;
        let bytes = self.to_jsonl_bytes()?;
        std::fs::write(dir.join("dataset.jsonl"), &bytes)?;
        let manifest = serde_json::json!({
            "kind": "neural-descent-manifest",
            "command": "generate",
            "config": self.config,
            "content_hash": content_hash(&bytes),
            "files": ["dataset.jsonl"],
        });
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset, DatasetError> {
        let f = std::fs::File::open(dir.join("dataset.jsonl"))?;
        Dataset::read_jsonl(std::io::BufReader::new(f))
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.samples.iter().map(|s| s.obs.clone()).collect()
    }
}

/// Content hash of raw bytes, reported as `sha256:<hex>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("sha256:{:x}", h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::default_skeleton;
    use crate::render::{unit_loss, LossWeights};

    fn small_config() -> GenConfig {
        GenConfig { n: 4, seed: 7, extent: 16, ..Default::default() }
    }

    #[test]
    fn generation_counts_and_determinism() {
        let skel = default_skeleton();
        let cfg = small_config();
        let a = generate_dataset(&skel, &cfg, 1).unwrap();
        assert_eq!(a.samples.len(), 4);
        let b = generate_dataset(&skel, &cfg, 1).unwrap();
        assert_eq!(a.to_jsonl_bytes().unwrap(), b.to_jsonl_bytes().unwrap());

        // thread count must not change the bytes
        let c = generate_dataset(&skel, &cfg, 3).unwrap();
        assert_eq!(a.to_jsonl_bytes().unwrap(), c.to_jsonl_bytes().unwrap());
    }

    #[test]
    fn noiseless_unit_loss_at_ground_truth_is_the_prior() {
        let skel = default_skeleton();
        let cfg = small_config();
        let ds = generate_dataset(&skel, &cfg, 1).unwrap();
        let raster = RasterConfig { h: cfg.extent, w: cfg.extent, ..Default::default() };
        let w = LossWeights { lambda_k: 1.0, lambda_b: 0.0, ..Default::default() };
        for s in &ds.samples {
            let mut tape = Tape::new();
            let sv = StateVars::constants(&mut tape, &s.gt_state);
            let (lu, bd) = unit_loss(&mut tape, &sv, &s.obs, &skel, &w, &raster).unwrap();
            let prior: f64 = s.gt_state.theta.iter().map(|x| x * x).sum::<f64>()
                + s.gt_state.beta.iter().map(|x| x * x).sum::<f64>();
            assert_eq!(tape.val(lu).item(), prior, "alignment terms must vanish exactly");
            assert_eq!(bd.keypoint, 0.0);
        }
    }

    #[test]
    fn roundtrip_preserves_samples() {
        let skel = default_skeleton();
        let ds = generate_dataset(&skel, &small_config(), 1).unwrap();
        let bytes = ds.to_jsonl_bytes().unwrap();
        let back = Dataset::read_jsonl(std::io::BufReader::new(bytes.as_slice())).unwrap();
        assert_eq!(ds.config, back.config, "config");
        assert_eq!(ds.skeleton, back.skeleton, "skeleton");
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.gt_state, b.gt_state, "gt state");
            assert_eq!(a.crop, b.crop, "crop");
            assert_eq!(a.source_intrinsics, b.source_intrinsics);
            assert_eq!(a.obs.keypoints, b.obs.keypoints, "keypoints");
            assert_eq!(a.obs.confidences, b.obs.confidences);
            assert!(a.obs.part_map == b.obs.part_map, "part map");
            assert_eq!(a.obs.crop_intrinsics, b.obs.crop_intrinsics);
            assert!(a.obs.gt_joints == b.obs.gt_joints, "gt joints");
            assert!(a.obs.gt_mesh_vertices == b.obs.gt_mesh_vertices, "gt vertices");
        }
        assert_eq!(bytes, back.to_jsonl_bytes().unwrap());
    }

    #[test]
    fn noise_and_dropout_apply() {
        let skel = default_skeleton();
        let clean = generate_dataset(&skel, &small_config(), 1).unwrap();
        let noisy_cfg = GenConfig { kp_noise_px: 2.0, part_dropout: 0.5, ..small_config() };
        let noisy = generate_dataset(&skel, &noisy_cfg, 1).unwrap();
        let any_conf_dropped = noisy
            .samples
            .iter()
            .any(|s| s.obs.confidences.iter().any(|&c| c == 0.0));
        assert!(any_conf_dropped, "dropout 0.5 should zero some confidences");
        let moved = clean.samples[0].obs.keypoints[0][0] != noisy.samples[0].obs.keypoints[0][0];
        assert!(moved, "keypoint noise should perturb coordinates");
    }

    #[test]
    fn content_hash_is_stable() {
        assert_eq!(content_hash(b"abc"), content_hash(b"abc"));
        assert_ne!(content_hash(b"abc"), content_hash(b"abd"));
        assert!(content_hash(b"x").starts_with("sha256:"));
    }
}
