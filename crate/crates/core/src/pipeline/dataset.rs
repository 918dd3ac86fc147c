//! On-disk scenes and split lists.
//!
//! A dataset root holds one directory per scene plus `train.txt` and
//! `test.txt` listing scene ids. A scene directory holds `meta.json`,
//! `gt.obj`, `gt_cloud.xyz` (one `x y z nx ny nz` line per point),
//! `cameras.json`, and one `view_NNN.pgm` image or `view_NNN.fmap`
//! pyramid per camera.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::GtCloud;
use crate::mdn::{image_tensor, ViewInput};
use crate::mesh::{load_obj, Mesh};
use crate::pooling::{load_fmap, view_from_maps};
use crate::camera::load_cameras;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene_id: String,
    pub category: String,
}

pub fn write_meta(dir: &Path, meta: &SceneMeta) -> Result<()> {
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(meta).expect("plain struct serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_cloud(path: &Path, points: &[[f64; 3]], normals: &[[f64; 3]]) -> Result<()> {
    let mut out = String::with_capacity(points.len() * 64);
    for (p, n) in points.iter().zip(normals) {
        writeln!(out, "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9}", p[0], p[1], p[2], n[0], n[1], n[2]).expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_cloud(path: &Path) -> Result<GtCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut points, mut normals) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .ok()
            .filter(|v: &Vec<f64>| v.len() == 6 && v.iter().all(|x| x.is_finite()))
            .ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "expected six finite numbers".into(),
            })?;
        points.push([vals[0], vals[1], vals[2]]);
        normals.push([vals[3], vals[4], vals[5]]);
    }
    if points.is_empty() {
        return Err(Error::Format { path: path.display().to_string(), msg: "empty ground-truth cloud".into() });
    }
    GtCloud::new(points, normals)
}

/// One loaded scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub id: String,
    pub category: String,
    pub dir: PathBuf,
    pub gt: GtCloud,
    pub views: Vec<ViewInput>,
}

fn load_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::Format { path: path.display().to_string(), msg: e.to_string() })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), w as usize, h as usize))
}

/// Views of the scene in `dir`, in camera-file order.
pub fn load_views(dir: &Path) -> Result<Vec<ViewInput>> {
    let cameras = load_cameras(dir.join("cameras.json"))?;
    if cameras.is_empty() {
        return Err(Error::Format { path: dir.display().to_string(), msg: "scene has no views".into() });
    }
    cameras
        .into_iter()
        .enumerate()
        .map(|(k, camera)| {
            let fmap = dir.join(format!("view_{k:03}.fmap"));
            if fmap.exists() {
                return Ok(ViewInput::Pyramid(view_from_maps(camera, load_fmap(&fmap)?)?));
            }
            let pgm = dir.join(format!("view_{k:03}.pgm"));
            let (pixels, w, h) = load_pgm(&pgm)?;
            if (w, h) != (camera.intrinsics.width, camera.intrinsics.height) {
                return Err(Error::Format {
                    path: pgm.display().to_string(),
                    msg: format!(
                        "image is {w}x{h} but the camera expects {}x{}",
                        camera.intrinsics.width, camera.intrinsics.height
                    ),
                });
            }
            Ok(ViewInput::Image { camera, image: image_tensor(&pixels, w, h)? })
        })
        .collect()
}

impl Scene {
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: SceneMeta = match fs::read_to_string(&meta_path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| Error::Format { path: meta_path.display().to_string(), msg: e.to_string() })?,
            Err(_) => SceneMeta {
                scene_id: dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                category: String::new(),
            },
        };
        Ok(Scene {
            id: meta.scene_id,
            category: meta.category,
            dir: dir.to_path_buf(),
            gt: read_cloud(&dir.join("gt_cloud.xyz"))?,
            views: load_views(dir)?,
        })
    }

    pub fn gt_mesh(&self) -> Result<Mesh> {
        load_obj(self.dir.join("gt.obj"))
    }

    /// The first `k` views (all of them when `k` is `None` or too large).
    pub fn first_views(&self, k: Option<usize>) -> &[ViewInput] {
        let n = k.unwrap_or(self.views.len()).min(self.views.len());
        &self.views[..n]
    }
}

fn read_split(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect())
}

/// Scene ids of the two splits, checked to be disjoint.
#[derive(Clone, Debug)]
pub struct Splits {
    pub root: PathBuf,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn open(root: &Path, train_file: &str, test_file: &str) -> Result<Self> {
        let train = read_split(&root.join(train_file))?;
        let test = read_split(&root.join(test_file))?;
        let seen: BTreeSet<&String> = train.iter().collect();
        if let Some(dup) = test.iter().find(|id| seen.contains(id)) {
            return Err(Error::Config(format!("scene `{dup}` is in both the train and test splits")));
        }
        Ok(Splits { root: root.to_path_buf(), train, test })
    }

    pub fn load(&self, ids: &[String]) -> Result<Vec<Scene>> {
        ids.iter().map(|id| Scene::load(&self.root.join(id))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cloud_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.xyz");
        let pts = vec![[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]];
        let nrm = vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        write_cloud(&p, &pts, &nrm).unwrap();
        let gt = read_cloud(&p).unwrap();
        assert_eq!(gt.points, pts);
        assert_eq!(gt.normals, nrm);
        fs::write(&p, "1 2 3\n").unwrap();
        assert!(matches!(read_cloud(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.txt"), "a\nb\n").unwrap();
        fs::write(dir.path().join("test.txt"), "c\n").unwrap();
        let s = Splits::open(dir.path(), "train.txt", "test.txt").unwrap();
        assert_eq!((s.train.len(), s.test.len()), (2, 1));
        fs::write(dir.path().join("test.txt"), "c\nb\n").unwrap();
        assert!(Splits::open(dir.path(), "train.txt", "test.txt").is_err());
    }
}
