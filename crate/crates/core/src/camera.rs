//! Pinhole cameras: world-to-camera transform and perspective projection.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{add, mat_vec};
use crate::tensor::{Tape, Tensor, Var};

/// Points at or in front of this depth are treated as behind the camera.
pub const Z_NEAR: f64 = 1e-6;
/// Slack, in pixels, when deciding whether a projection is inside the image.
pub const BOUNDS_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "intrinsics need positive focal lengths and extent, got fx={fx} fy={fy} {width}x{height}"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy, width, height })
    }
}

/// `p_cam = R · p_world + T`, with `R` row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraExtrinsics {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl CameraExtrinsics {
    pub fn new(rotation: [f64; 9], translation: [f64; 3]) -> Result<Self> {
        let r = &rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k * 3 + i] * r[k * 3 + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return Err(Error::invalid("rotation is not orthonormal"));
                }
            }
        }
        let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
            + r[2] * (r[3] * r[7] - r[4] * r[6]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("rotation determinant is {det}, expected 1")));
        }
        Ok(CameraExtrinsics { rotation, translation })
    }

    pub fn identity() -> Self {
        CameraExtrinsics {
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            translation: [0.0; 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    pub valid: bool,
}

pub fn world_to_camera(p: [f64; 3], extrinsics: &CameraExtrinsics) -> [f64; 3] {
    add(mat_vec(&extrinsics.rotation, p), extrinsics.translation)
}

/// Perspective projection of a camera-frame point. Coordinates are not clamped.
pub fn project(p_cam: [f64; 3], intrinsics: &CameraIntrinsics) -> Projection {
    let [x_c, y_c, z] = p_cam;
    let x = x_c / z * intrinsics.fx + intrinsics.cx;
    let y = y_c / z * intrinsics.fy + intrinsics.cy;
    Projection { x, y, valid: z > Z_NEAR && in_bounds(x, y, intrinsics) }
}

fn in_bounds(x: f64, y: f64, k: &CameraIntrinsics) -> bool {
    let t = BOUNDS_TOLERANCE;
    x >= -t && x <= (k.width - 1) as f64 + t && y >= -t && y <= (k.height - 1) as f64 + t
}

/// Projects world points, clamping pixel coordinates into the image.
/// Points behind the camera come back invalid and pinned to a corner.
pub fn project_points(points: &[[f64; 3]], camera: &Camera) -> Vec<Projection> {
    let k = &camera.intrinsics;
    let (w, h) = ((k.width - 1) as f64, (k.height - 1) as f64);
    points
        .iter()
        .map(|&p| {
            let pc = world_to_camera(p, &camera.extrinsics);
            if pc[2] <= Z_NEAR {
                let z = Z_NEAR;
                let x = (pc[0] / z * k.fx + k.cx).clamp(0.0, w);
                let y = (pc[1] / z * k.fy + k.cy).clamp(0.0, h);
                return Projection { x, y, valid: false };
            }
            let pr = project(pc, k);
            Projection { x: pr.x.clamp(0.0, w), y: pr.y.clamp(0.0, h), valid: pr.valid }
        })
        .collect()
}

/// Differentiable projection of `P×3` world points on a tape.
///
/// Returns clamped pixel coordinates (`P×2`, `(x, y)` per row) and the
/// validity of each point. Depth is floored at [`Z_NEAR`] so points behind
/// the camera stay finite; they are flagged invalid.
pub fn project_on_tape(tape: &mut Tape, points: Var, camera: &Camera) -> Result<(Var, Vec<bool>)> {
    let shape = tape.shape(points).to_vec();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::shape("project_on_tape", &[&shape]));
    }
    let r = &camera.extrinsics.rotation;
    let rt = Tensor::new([3, 3], vec![r[0], r[3], r[6], r[1], r[4], r[7], r[2], r[5], r[8]])?;
    let rt = tape.constant(rt);
    let t = tape.constant(Tensor::from_vec(camera.extrinsics.translation.to_vec()));
    let rotated = tape.matmul(points, rt)?;
    let pc = tape.add(rotated, t)?;
    let xc = tape.narrow(pc, 1, 0, 1)?;
    let yc = tape.narrow(pc, 1, 1, 1)?;
    let zc = tape.narrow(pc, 1, 2, 1)?;
    let z = tape.clamp(zc, Z_NEAR, f64::INFINITY);
    let k = &camera.intrinsics;
    let xr = tape.div(xc, z)?;
    let xr = tape.scale(xr, k.fx);
    let xr = tape.add_scalar(xr, k.cx);
    let yr = tape.div(yc, z)?;
    let yr = tape.scale(yr, k.fy);
    let yr = tape.add_scalar(yr, k.cy);

    let valid = {
        let (zs, xs, ys) = (tape.value(zc).data(), tape.value(xr).data(), tape.value(yr).data());
        (0..shape[0]).map(|i| zs[i] > Z_NEAR && in_bounds(xs[i], ys[i], k)).collect()
    };
    let x = tape.clamp(xr, 0.0, (k.width - 1) as f64);
    let y = tape.clamp(yr, 0.0, (k.height - 1) as f64);
    let coords = tape.concat(&[x, y], 1)?;
    Ok((coords, valid))
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    #[serde(rename = "R")]
    rotation: [f64; 9],
    #[serde(rename = "T")]
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    views: Vec<CameraRecord>,
}

pub fn cameras_to_json(cameras: &[Camera]) -> String {
    let file = CameraFile {
        views: cameras
            .iter()
            .map(|c| CameraRecord {
                fx: c.intrinsics.fx,
                fy: c.intrinsics.fy,
                cx: c.intrinsics.cx,
                cy: c.intrinsics.cy,
                width: c.intrinsics.width,
                height: c.intrinsics.height,
                rotation: c.extrinsics.rotation,
                translation: c.extrinsics.translation,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("camera records serialize")
}

pub fn cameras_from_json(text: &str, source: &str) -> Result<Vec<Camera>> {
    let file: CameraFile = serde_json::from_str(text)
        .map_err(|e| Error::Format { path: source.into(), msg: e.to_string() })?;
    file.views
        .into_iter()
        .map(|r| {
            Ok(Camera {
                intrinsics: CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)?,
                extrinsics: CameraExtrinsics::new(r.rotation, r.translation)?,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Format { path: source.into(), msg: e.to_string() })
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    cameras_from_json(&text, &path.display().to_string())
}

pub fn save_cameras(cameras: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cameras_to_json(cameras)).map_err(|e| Error::io(path, e))
}

/// Camera at `eye` looking at `target`, image `y` pointing along `-up`.
pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], intrinsics: CameraIntrinsics) -> Result<Camera> {
    use crate::geom::{cross, normalize, scale, sub};
    let forward = normalize(sub(target, eye));
    let right = cross(forward, up);
    if crate::geom::norm(right) < 1e-9 {
        return Err(Error::invalid("look_at: up vector parallel to viewing direction"));
    }
    let right = normalize(right);
    let down = cross(forward, right);
    let rotation = [
        right[0], right[1], right[2], down[0], down[1], down[2], forward[0], forward[1], forward[2],
    ];
    let translation = scale(mat_vec(&rotation, eye), -1.0);
    Ok(Camera { intrinsics, extrinsics: CameraExtrinsics::new(rotation, translation)? })
}
