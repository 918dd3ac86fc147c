//! Cross-view perceptual feature pooling.
//!
//! Every graph node (mesh vertex or deformation hypothesis) is projected into
//! each view, features are bilinearly sampled from each pyramid level, and
//! the per-view vectors are reduced to order-free statistics: elementwise
//! mean, max and standard deviation over the views that actually see the node.
//! The node's own coordinates are appended at the end.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::camera::{project_on_tape, Camera};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Added under the square root of the variance.
pub const STD_EPS: f64 = 1e-12;

/// One pyramid level: a `C×H×W` map sampled at image coordinates divided by `stride`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLevel {
    pub map: Tensor,
    pub stride: usize,
}

/// A posed view with a precomputed feature pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub pyramid: Vec<FeatureLevel>,
}

impl View {
    pub fn new(camera: Camera, pyramid: Vec<FeatureLevel>) -> Result<Self> {
        check_pyramid(&camera, pyramid.iter().map(|l| (l.map.shape(), l.stride)))?;
        Ok(View { camera, pyramid })
    }

    pub fn channels(&self) -> usize {
        self.pyramid.iter().map(|l| l.map.shape()[0]).sum()
    }
}

fn check_pyramid<'a>(camera: &Camera, levels: impl Iterator<Item = (&'a [usize], usize)>) -> Result<()> {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    for (shape, stride) in levels {
        if shape.len() != 3 || stride == 0 {
            return Err(Error::shape("feature pyramid level", &[shape]));
        }
        if shape[1] != h.div_ceil(stride) || shape[2] != w.div_ceil(stride) {
            return Err(Error::invalid(format!(
                "pyramid level {:?} with stride {stride} does not match a {w}x{h} image",
                shape
            )));
        }
    }
    Ok(())
}

/// Tape-resident counterpart of [`View`]: the camera plus the recorded maps.
#[derive(Clone, Debug)]
pub struct ViewVars {
    pub camera: Camera,
    pub levels: Vec<(Var, usize)>,
}

impl ViewVars {
    pub fn from_view(tape: &mut Tape, view: &View) -> Self {
        ViewVars {
            camera: view.camera,
            levels: view.pyramid.iter().map(|l| (tape.constant(l.map.clone()), l.stride)).collect(),
        }
    }

    /// Keeps only the listed pyramid levels, in the given order.
    pub fn select_levels(&self, which: &[usize]) -> Result<Self> {
        let levels = which
            .iter()
            .map(|&i| {
                self.levels
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("pyramid has no level {i}")))
            })
            .collect::<Result<_>>()?;
        Ok(ViewVars { camera: self.camera, levels })
    }
}

/// Samples a `C×H×W` map at `(x, y)`; coordinates must lie inside the map.
pub fn bilinear_sample(map: &Tensor, x: f64, y: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let m = tape.constant(map.clone());
    let xy = tape.constant(Tensor::new([1, 2], vec![x, y])?);
    let out = tape.bilinear(m, xy)?;
    Ok(tape.value(out).data().to_vec())
}

/// Samples every level at `(x_img / stride, y_img / stride)`, clamped to the
/// level, and concatenates the results in pyramid order.
pub fn pool_pyramid(view: &View, x_img: f64, y_img: f64) -> Result<Vec<f64>> {
    if view.pyramid.is_empty() {
        return Err(Error::invalid("pool_pyramid: empty pyramid"));
    }
    let mut out = Vec::with_capacity(view.channels());
    for level in &view.pyramid {
        let s = level.map.shape();
        let x = (x_img / level.stride as f64).clamp(0.0, (s[2] - 1) as f64);
        let y = (y_img / level.stride as f64).clamp(0.0, (s[1] - 1) as f64);
        out.extend(bilinear_sample(&level.map, x, y)?);
    }
    Ok(out)
}

/// Pools `P×C_total` features for pixel coordinates `coords` (`P×2`) from one view.
pub fn pool_levels_on_tape(tape: &mut Tape, coords: Var, levels: &[(Var, usize)]) -> Result<Var> {
    if levels.is_empty() {
        return Err(Error::invalid("pool_pyramid: empty pyramid"));
    }
    let xs = tape.narrow(coords, 1, 0, 1)?;
    let ys = tape.narrow(coords, 1, 1, 1)?;
    let mut pooled = Vec::with_capacity(levels.len());
    for &(map, stride) in levels {
        let s = tape.shape(map).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("pool_pyramid", &[&s]));
        }
        let inv = 1.0 / stride as f64;
        let lx = tape.scale(xs, inv);
        let lx = tape.clamp(lx, 0.0, (s[2] - 1) as f64);
        let ly = tape.scale(ys, inv);
        let ly = tape.clamp(ly, 0.0, (s[1] - 1) as f64);
        let lc = tape.concat(&[lx, ly], 1)?;
        pooled.push(tape.bilinear(map, lc)?);
    }
    if pooled.len() == 1 {
        return Ok(pooled[0]);
    }
    tape.concat(&pooled, 1)
}

/// Mean ‖ max ‖ std over the valid views, per row.
///
/// `per_view[k]` is `P×C`; `valid[k][p]` says whether view `k` sees row `p`.
/// Rows seen by no view come out all-zero.
pub fn cross_view_stats_on_tape(tape: &mut Tape, per_view: &[Var], valid: &[Vec<bool>]) -> Result<Var> {
    tape.view_stats(per_view, valid, STD_EPS)
}

/// Value-level [`cross_view_stats_on_tape`] for a single node.
pub fn cross_view_stats(per_view: &[Vec<f64>], valid: &[bool]) -> Result<Vec<f64>> {
    let first = per_view.first().ok_or_else(|| Error::invalid("cross_view_stats: no views"))?;
    if valid.len() != per_view.len() {
        return Err(Error::invalid("cross_view_stats: mask length mismatch"));
    }
    let c = first.len();
    if per_view.iter().any(|f| f.len() != c) {
        return Err(Error::invalid("cross_view_stats: feature length mismatch"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = per_view
        .iter()
        .map(|f| Ok(tape.constant(Tensor::new([1, c], f.clone())?)))
        .collect::<Result<_>>()?;
    let masks: Vec<Vec<bool>> = valid.iter().map(|&b| vec![b]).collect();
    let out = cross_view_stats_on_tape(&mut tape, &vars, &masks)?;
    Ok(tape.value(out).data().to_vec())
}

/// Pooled statistics followed by the node's world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeature {
    pub values: Vec<f64>,
}

impl NodeFeature {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn stats(&self) -> &[f64] {
        &self.values[..self.values.len() - 3]
    }

    pub fn coord(&self) -> [f64; 3] {
        let n = self.values.len();
        [self.values[n - 3], self.values[n - 2], self.values[n - 1]]
    }
}

pub fn assemble_node_feature(stats: &[f64], coord: [f64; 3]) -> NodeFeature {
    let mut values = Vec::with_capacity(stats.len() + 3);
    values.extend_from_slice(stats);
    values.extend_from_slice(&coord);
    NodeFeature { values }
}

/// Width of an assembled node feature for the given per-level channel counts.
pub fn node_feature_dim(channels: &[usize]) -> usize {
    3 * channels.iter().sum::<usize>() + 3
}

/// Projects `P×3` world points into every view and returns `P×D` node
/// features (statistics over views, then coordinates).
pub fn pool_node_features(tape: &mut Tape, points: Var, views: &[ViewVars]) -> Result<Var> {
    if views.is_empty() {
        return Err(Error::invalid("feature pooling needs at least one view"));
    }
    let mut per_view = Vec::with_capacity(views.len());
    let mut valid = Vec::with_capacity(views.len());
    for v in views {
        let (coords, ok) = project_on_tape(tape, points, &v.camera)?;
        per_view.push(pool_levels_on_tape(tape, coords, &v.levels)?);
        valid.push(ok);
    }
    let stats = cross_view_stats_on_tape(tape, &per_view, &valid)?;
    tape.concat(&[stats, points], 1)
}

// ---- FMAP files ---------------------------------------------------------

const FMAP_MAGIC: &[u8; 4] = b"FMAP";

/// Writes `FMAP`, a `u32` level count, then per level `u32` C, H, W and the
/// `f32` values in `[C][H][W]` order, all little-endian.
pub fn write_fmap<W: Write>(mut w: W, maps: &[Tensor]) -> Result<()> {
    let io = |e| Error::io("<fmap>", e);
    w.write_all(FMAP_MAGIC).map_err(io)?;
    w.write_all(&(maps.len() as u32).to_le_bytes()).map_err(io)?;
    for m in maps {
        if m.rank() != 3 {
            return Err(Error::shape("write_fmap", &[m.shape()]));
        }
        for &e in m.shape() {
            w.write_all(&(e as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in m.data() {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_fmap<R: Read>(mut r: R) -> Result<Vec<Tensor>> {
    let bad = |msg: &str| Error::Format { path: "<fmap>".into(), msg: msg.into() };
    let mut u32_buf = [0u8; 4];
    let mut next_u32 = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut u32_buf).map_err(|_| bad("truncated"))?;
        Ok(u32::from_le_bytes(u32_buf))
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != FMAP_MAGIC {
        return Err(bad("bad magic"));
    }
    let levels = next_u32(&mut r)?;
    let mut maps = Vec::with_capacity(levels as usize);
    for _ in 0..levels {
        let (c, h, w) = (next_u32(&mut r)? as usize, next_u32(&mut r)? as usize, next_u32(&mut r)? as usize);
        let mut raw = vec![0u8; c * h * w * 4];
        r.read_exact(&mut raw).map_err(|_| bad("truncated"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        maps.push(Tensor::new([c, h, w], data)?);
    }
    Ok(maps)
}

pub fn save_fmap(path: impl AsRef<Path>, maps: &[Tensor]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_fmap(BufWriter::new(f), maps).map_err(|e| relabel(e, path))
}

pub fn load_fmap(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_fmap(BufReader::new(f)).map_err(|e| relabel(e, path))
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { msg, .. } => Error::Format { path: path.display().to_string(), msg },
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

/// Builds a [`View`] from loaded maps, inferring each level's stride from the image height.
pub fn view_from_maps(camera: Camera, maps: Vec<Tensor>) -> Result<View> {
    let h = camera.intrinsics.height;
    let pyramid = maps
        .into_iter()
        .map(|map| {
            let hl = *map.shape().get(1).ok_or_else(|| Error::shape("fmap level", &[map.shape()]))?;
            let stride = if hl == 0 { 0 } else { (h as f64 / hl as f64).round() as usize };
            Ok(FeatureLevel { map, stride: stride.max(1) })
        })
        .collect::<Result<_>>()?;
    View::new(camera, pyramid)
}
