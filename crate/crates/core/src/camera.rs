//! Pinhole camera: full-image intrinsics approximation, perspective
//! projection, and crop-intrinsics warping.
//!
//! Fitting happens in crop space while the model state stays in the source
//! camera's 3D frame: warping the intrinsics into the crop makes the two
//! views consistent. Image convention: origin at the top-left pixel corner,
//! +u right, +v down.

use crate::tape::{DiffError, Tape, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum camera-space depth accepted by projection, in meters.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("point {index} is behind or at the camera plane (z = {z})")]
    BehindCamera { index: usize, z: f64 },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    /// Top-left of the crop in source pixels.
    pub x0: f64,
    pub y0: f64,
    /// Crop extent in source pixels.
    pub w: f64,
    pub h: f64,
    /// Output square side in pixels.
    pub out: f64,
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec { x0: 0.0, y0: 0.0, w: 480.0, h: 480.0, out: 480.0 }
    }
}

/// Intrinsics approximation for a full image: fx = fy = max(H, W),
/// principal point at the image center.
pub fn approx_intrinsics(height: f64, width: f64) -> Intrinsics {
    let f = height.max(width);
    Intrinsics { fx: f, fy: f, cx: width / 2.0, cy: height / 2.0 }
}

/// Warp full-image intrinsics into crop intrinsics.
///
/// Equivalent to the 5×5 scale-translation matrix acting on
/// [fx, fy, cx, cy, 1]ᵀ: focal lengths scale by out/w and out/h, the
/// principal point shifts by the crop origin and scales the same way.
pub fn crop_intrinsics(c: &Intrinsics, crop: &CropSpec) -> Intrinsics {
    let sx = crop.out / crop.w;
    let sy = crop.out / crop.h;
    Intrinsics {
        fx: sx * c.fx,
        fy: sy * c.fy,
        cx: sx * (c.cx - crop.x0),
        cy: sy * (c.cy - crop.y0),
    }
}

/// Inverse of [`crop_intrinsics`]: recover the source intrinsics.
pub fn uncrop_intrinsics(cc: &Intrinsics, crop: &CropSpec) -> Intrinsics {
    let sx = crop.out / crop.w;
    let sy = crop.out / crop.h;
    Intrinsics {
        fx: cc.fx / sx,
        fy: cc.fy / sy,
        cx: cc.cx / sx + crop.x0,
        cy: cc.cy / sy + crop.y0,
    }
}

/// Pixel-coordinate warp induced by a crop: source (u, v) → crop space.
pub fn warp_pixel(crop: &CropSpec, u: f64, v: f64) -> (f64, f64) {
    let sx = crop.out / crop.w;
    let sy = crop.out / crop.h;
    (sx * (u - crop.x0), sy * (v - crop.y0))
}

/// Perspective projection of one point, plain arithmetic.
pub fn project_point(p: [f64; 3], c: &Intrinsics) -> Result<[f64; 2], CameraError> {
    if p[2] <= MIN_DEPTH {
        return Err(CameraError::BehindCamera { index: 0, z: p[2] });
    }
    Ok([c.fx * p[0] / p[2] + c.cx, c.fy * p[1] / p[2] + c.cy])
}

/// Perspective projection of N×3 points, plain arithmetic.
pub fn project_points(pts: &[[f64; 3]], c: &Intrinsics) -> Result<Vec<[f64; 2]>, CameraError> {
    pts.iter()
        .enumerate()
        .map(|(index, p)| {
            if p[2] <= MIN_DEPTH {
                Err(CameraError::BehindCamera { index, z: p[2] })
            } else {
                Ok([c.fx * p[0] / p[2] + c.cx, c.fy * p[1] / p[2] + c.cy])
            }
        })
        .collect()
}

/// Project a tape-recorded 3-vector; returns (u, v) scalars.
///
/// Differentiable with respect to the point. Depth is validated against the
/// current forward value.
pub fn project_var(tape: &mut Tape, p: Var, c: &Intrinsics) -> Result<(Var, Var), CameraError> {
    let z_now = tape.val(p).data()[2];
    if z_now <= MIN_DEPTH {
        return Err(CameraError::BehindCamera { index: 0, z: z_now });
    }
    let x = tape.slice(p, 0, 1)?;
    let y = tape.slice(p, 1, 2)?;
    let z = tape.slice(p, 2, 3)?;
    // (f·x)/z + c, in exactly the order of the plain-arithmetic path so the
    // two routes agree bit-for-bit
    let fx_x = tape.scale(x, c.fx)?;
    let fy_y = tape.scale(y, c.fy)?;
    let xz = tape.div(fx_x, z)?;
    let yz = tape.div(fy_y, z)?;
    let u = tape.add_const(xz, c.cx)?;
    let v = tape.add_const(yz, c.cy)?;
    Ok((u, v))
}

/// Project a tape-recorded [N,3] point matrix into an [N,2] pixel matrix.
pub fn project_matrix(tape: &mut Tape, pts: Var, c: &Intrinsics) -> Result<Var, CameraError> {
    let shape = tape.val(pts).shape().to_vec();
    let n = shape[0];
    for i in 0..n {
        let z = tape.val(pts).data()[i * 3 + 2];
        if z <= MIN_DEPTH {
            return Err(CameraError::BehindCamera { index: i, z });
        }
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let row = tape.slice(pts, i * 3, i * 3 + 3)?;
        let (u, v) = project_var(tape, row, c)?;
        rows.push(u);
        rows.push(v);
    }
    let flat = tape.concat(&rows)?;
    Ok(tape.reshape(flat, vec![n, 2])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn approx_intrinsics_formula() {
        let c = approx_intrinsics(480.0, 640.0);
        assert_eq!((c.fx, c.fy, c.cx, c.cy), (640.0, 640.0, 320.0, 240.0));
        let c = approx_intrinsics(480.0, 480.0);
        assert_eq!((c.fx, c.fy, c.cx, c.cy), (480.0, 480.0, 240.0, 240.0));
        let c = approx_intrinsics(1.0, 1.0);
        assert_eq!((c.fx, c.fy, c.cx, c.cy), (1.0, 1.0, 0.5, 0.5));
    }

    #[test]
    fn project_on_axis_and_by_hand() {
        let c = Intrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0 };
        assert_eq!(project_point([0.0, 0.0, 1.0], &c).unwrap(), [0.0, 0.0]);

        let c = Intrinsics { fx: 100.0, fy: 100.0, cx: 50.0, cy: 50.0 };
        assert_eq!(project_point([2.0, 4.0, 2.0], &c).unwrap(), [150.0, 250.0]);
    }

    #[test]
    fn project_behind_camera_rejected() {
        let c = Intrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0 };
        assert!(project_point([0.0, 0.0, -1.0], &c).is_err());
        assert!(project_points(&[[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]], &c).is_err());
    }

    #[test]
    fn crop_identity_and_by_hand() {
        let c = Intrinsics { fx: 480.0, fy: 480.0, cx: 240.0, cy: 240.0 };
        let id = CropSpec { x0: 0.0, y0: 0.0, w: 480.0, h: 480.0, out: 480.0 };
        assert_eq!(crop_intrinsics(&c, &id), c);

        let crop = CropSpec { x0: 120.0, y0: 120.0, w: 240.0, h: 240.0, out: 480.0 };
        let cc = crop_intrinsics(&c, &crop);
        assert_eq!((cc.fx, cc.fy, cc.cx, cc.cy), (960.0, 960.0, 240.0, 240.0));
    }

    #[test]
    fn crop_projection_consistency() {
        // project(p, C_c) == warp(project(p, C)) to 1e-9 px
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..200 {
            let c = Intrinsics {
                fx: rng.gen_range(200.0..800.0),
                fy: rng.gen_range(200.0..800.0),
                cx: rng.gen_range(100.0..400.0),
                cy: rng.gen_range(100.0..400.0),
            };
            let crop = CropSpec {
                x0: rng.gen_range(-50.0..300.0),
                y0: rng.gen_range(-50.0..300.0),
                w: rng.gen_range(50.0..500.0),
                h: rng.gen_range(50.0..500.0),
                out: rng.gen_range(32.0..512.0),
            };
            let p = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.5..8.0),
            ];
            let cc = crop_intrinsics(&c, &crop);
            let direct = project_point(p, &cc).unwrap();
            let full = project_point(p, &c).unwrap();
            let warped = warp_pixel(&crop, full[0], full[1]);
            assert!((direct[0] - warped.0).abs() < 1e-9);
            assert!((direct[1] - warped.1).abs() < 1e-9);
        }
    }

    #[test]
    fn crop_of_crop_composes() {
        let c = Intrinsics { fx: 500.0, fy: 450.0, cx: 320.0, cy: 240.0 };
        let crop1 = CropSpec { x0: 40.0, y0: 20.0, w: 400.0, h: 380.0, out: 256.0 };
        let crop2 = CropSpec { x0: 30.0, y0: 50.0, w: 128.0, h: 128.0, out: 64.0 };
        let two_step = crop_intrinsics(&crop_intrinsics(&c, &crop1), &crop2);

        // composed warp: crop1 then crop2, expressed as one crop of the source
        let s1x = crop1.out / crop1.w;
        let s1y = crop1.out / crop1.h;
        let composed = CropSpec {
            x0: crop1.x0 + crop2.x0 / s1x,
            y0: crop1.y0 + crop2.y0 / s1y,
            w: crop2.w / s1x,
            h: crop2.h / s1y,
            out: crop2.out,
        };
        let one_step = crop_intrinsics(&c, &composed);
        assert!((two_step.fx - one_step.fx).abs() < 1e-9);
        assert!((two_step.fy - one_step.fy).abs() < 1e-9);
        assert!((two_step.cx - one_step.cx).abs() < 1e-9);
        assert!((two_step.cy - one_step.cy).abs() < 1e-9);
    }

    #[test]
    fn uncrop_roundtrip() {
        let c = Intrinsics { fx: 500.0, fy: 450.0, cx: 320.0, cy: 240.0 };
        let crop = CropSpec { x0: 17.0, y0: -3.0, w: 211.0, h: 340.0, out: 480.0 };
        let back = uncrop_intrinsics(&crop_intrinsics(&c, &crop), &crop);
        assert!((back.fx - c.fx).abs() < 1e-12);
        assert!((back.fy - c.fy).abs() < 1e-12);
        assert!((back.cx - c.cx).abs() < 1e-12);
        assert!((back.cy - c.cy).abs() < 1e-12);
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let c = Intrinsics { fx: 300.0, fy: 280.0, cx: 32.0, cy: 32.0 };
        let err = crate::tape::check_gradient(
            |t, x| {
                let (u, v) = project_var(t, x, &c).map_err(|_| DiffError::NonFinite("project"))?;
                let uv = t.concat(&[u, v])?;
                t.sumsq(uv)
            },
            &[0.3, -0.2, 2.5],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn tape_projection_matches_plain() {
        let c = Intrinsics { fx: 321.0, fy: 432.0, cx: 12.0, cy: 34.0 };
        let pts = [[0.4, -0.7, 3.3], [-0.2, 0.1, 1.7]];
        let plain = project_points(&pts, &c).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::matrix(2, 3, pts.concat()));
        let m = project_matrix(&mut tape, v, &c).unwrap();
        let got = tape.val(m).data();
        assert_eq!(got, &[plain[0][0], plain[0][1], plain[1][0], plain[1][1]]);
    }
}
