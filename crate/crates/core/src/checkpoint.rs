//! Versioned binary checkpoint: a fixed header (dimensions plus the
//! skeleton constants and shape-basis seed) followed by named parameter
//! arrays of little-endian IEEE-754 f64. Loading validates every array
//! shape against the header and rejects mismatches.

use crate::body::{Skeleton, SHAPE_DIM};
use crate::refiner::{RefinerDims, RefinerParams};
use crate::tensor::Tensor;
use std::io;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"NDCP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("array {name} has shape {got:?}, expected {want:?}")]
    DimensionMismatch { name: String, got: Vec<usize>, want: Vec<usize> },
    #[error("unexpected array name {0}")]
    UnknownArray(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Everything needed to run the trained refiner.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub skeleton: Skeleton,
    pub stages: usize,
    pub params: RefinerParams,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(8 * n, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let dims = &ck.params.dims;
    let skel = &ck.skeleton;
    let j = skel.joint_count();
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(dims.pose_dim as u32);
    w.u32(dims.shape_dim as u32);
    w.u32(j as u32);
    w.u32(dims.part_count as u32);
    w.u32(dims.context_dim as u32);
    w.u32(dims.enc_hidden as u32);
    w.u32(dims.hidden as u32);
    w.u32(ck.stages as u32);
    w.u32(dims.pooled_side as u32);
    w.u64(skel.shape_basis_seed);

    for &p in &skel.parents {
        w.u32(p as u32);
    }
    for o in &skel.rest_offsets {
        w.f64s(o);
    }
    for &p in &skel.part_of_joint {
        w.u32(p as u32);
    }
    w.f64s(&skel.shape_basis);

    let shapes = dims.param_shapes();
    w.u32(shapes.len() as u32);
    for ((name, shape), tensor) in shapes.iter().zip(&ck.params.tensors) {
        w.u32(name.len() as u32);
        w.buf.extend_from_slice(name.as_bytes());
        w.u32(shape.len() as u32);
        for &d in shape {
            w.u32(d as u32);
        }
        w.f64s(tensor.data());
    }
    w.buf
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let pose_dim = r.u32("pose_dim")? as usize;
    let shape_dim = r.u32("shape_dim")? as usize;
    let n_joints = r.u32("joint_count")? as usize;
    let part_count = r.u32("part_count")? as usize;
    let context_dim = r.u32("context_dim")? as usize;
    let enc_hidden = r.u32("enc_hidden")? as usize;
    let hidden = r.u32("hidden")? as usize;
    let stages = r.u32("stages")? as usize;
    let pooled_side = r.u32("pooled_side")? as usize;
    let shape_basis_seed = r.u64("shape_basis_seed")?;

    let mut parents = Vec::with_capacity(n_joints);
    for _ in 0..n_joints {
        parents.push(r.u32("parents")? as usize);
    }
    let mut rest_offsets = Vec::with_capacity(n_joints);
    for _ in 0..n_joints {
        let v = r.f64s(3, "rest_offsets")?;
        rest_offsets.push([v[0], v[1], v[2]]);
    }
    let mut part_of_joint = Vec::with_capacity(n_joints);
    for _ in 0..n_joints {
        part_of_joint.push(r.u32("part_of_joint")? as usize);
    }
    let shape_basis = r.f64s(n_joints * shape_dim, "shape_basis")?;
    let skeleton =
        Skeleton { parents, rest_offsets, part_of_joint, shape_basis, shape_basis_seed };

    if shape_dim != SHAPE_DIM || pose_dim != skeleton.pose_dim() {
        return Err(CheckpointError::DimensionMismatch {
            name: "header".into(),
            got: vec![pose_dim, shape_dim],
            want: vec![skeleton.pose_dim(), SHAPE_DIM],
        });
    }

    let feature_len = 3 * n_joints + pooled_side * pooled_side * (part_count + 1) + 4;
    let dims = RefinerDims {
        n_joints,
        part_count,
        pose_dim,
        shape_dim,
        state_dim: pose_dim + shape_dim + 9,
        pooled_side,
        feature_len,
        context_dim,
        enc_hidden,
        hidden,
    };

    let expected = dims.param_shapes();
    let count = r.u32("array count")? as usize;
    if count != expected.len() {
        return Err(CheckpointError::DimensionMismatch {
            name: "array count".into(),
            got: vec![count],
            want: vec![expected.len()],
        });
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let name_len = r.u32("array name length")? as usize;
        let name = String::from_utf8_lossy(r.take(name_len, "array name")?).into_owned();
        if name != *want_name {
            return Err(CheckpointError::UnknownArray(name));
        }
        let ndim = r.u32("array rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("array dim")? as usize);
        }
        if shape != *want_shape {
            return Err(CheckpointError::DimensionMismatch {
                name,
                got: shape,
                want: want_shape.clone(),
            });
        }
        let n: usize = shape.iter().product();
        tensors.push(Tensor::new(shape, r.f64s(n, "array data")?));
    }

    Ok(Checkpoint { skeleton, stages, params: RefinerParams { dims, tensors } })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    Ok(std::fs::write(path, to_bytes(ck))?)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::default_skeleton;

    fn sample_checkpoint() -> Checkpoint {
        let skel = default_skeleton();
        let dims = RefinerDims::standard(&skel, 8);
        let params = RefinerParams::init(dims, 99);
        Checkpoint { skeleton: skel, stages: 5, params }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample_checkpoint();
        let bytes = to_bytes(&ck);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(ck, back);
        assert_eq!(bytes, to_bytes(&back));
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let ck = sample_checkpoint();
        let mut bytes = to_bytes(&ck);
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::BadMagic)));

        let mut bytes = to_bytes(&ck);
        bytes[4] = 99;
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::BadVersion(_))));
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let ck = sample_checkpoint();
        let mut bytes = to_bytes(&ck);
        // corrupt the hidden size in the header
        let off = 4 + 4 + 4 * 6;
        bytes[off..off + 4].copy_from_slice(&123u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_truncation() {
        let ck = sample_checkpoint();
        let bytes = to_bytes(&ck);
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(from_bytes(cut), Err(CheckpointError::Truncated(_))));
    }
}
