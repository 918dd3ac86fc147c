//! Procedural scenes: simple solids rendered as shaded grayscale views.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::KeyValues;
use super::dataset::{write_cloud, write_meta, SceneMeta};
use crate::camera::{look_at, project, project_points, save_cameras, world_to_camera, Camera, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::geom::{cross, dot, mat_vec, normalize, scale, sub};
use crate::loss::SurfaceSamples;
use crate::mesh::{ellipsoid, save_obj, Mesh};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Box,
    Ellipsoid,
    Cylinder,
    Union,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Box => "box",
            Family::Ellipsoid => "ellipsoid",
            Family::Cylinder => "cylinder",
            Family::Union => "union",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" => Ok(Family::Box),
            "ellipsoid" => Ok(Family::Ellipsoid),
            "cylinder" => Ok(Family::Cylinder),
            "union" => Ok(Family::Union),
            other => Err(Error::Config(format!("unknown shape family `{other}`"))),
        }
    }
}

/// What `p2mx synth` generates.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub scenes: usize,
    /// Scene `i` uses `families[i % len]`.
    pub families: Vec<Family>,
    /// Range of half-extents, world units.
    pub size_min: f64,
    pub size_max: f64,
    pub views: usize,
    pub image_size: usize,
    pub ring_radius: f64,
    /// Camera elevation above the equator, radians.
    pub elevation: f64,
    /// Focal length as a multiple of the image width.
    pub focal: f64,
    pub gt_samples: usize,
    /// Share of scenes listed in the test split.
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            scenes: 4,
            families: vec![Family::Box, Family::Ellipsoid, Family::Cylinder, Family::Union],
            size_min: 0.15,
            size_max: 0.3,
            views: 3,
            image_size: 64,
            ring_radius: 1.5,
            elevation: 0.35,
            focal: 0.8,
            gt_samples: 4000,
            test_fraction: 0.25,
        }
    }
}

impl SynthSpec {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text, source)?;
        let d = SynthSpec::default();
        let spec = SynthSpec {
            scenes: kv.take("scenes", d.scenes)?,
            families: kv.take_list("families", d.families)?,
            size_min: kv.take("size_min", d.size_min)?,
            size_max: kv.take("size_max", d.size_max)?,
            views: kv.take("views", d.views)?,
            image_size: kv.take("image_size", d.image_size)?,
            ring_radius: kv.take("ring_radius", d.ring_radius)?,
            elevation: kv.take("elevation", d.elevation)?,
            focal: kv.take("focal", d.focal)?,
            gt_samples: kv.take("gt_samples", d.gt_samples)?,
            test_fraction: kv.take("test_fraction", d.test_fraction)?,
        };
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.families.is_empty() {
            return bad("families must not be empty");
        }
        if !(self.size_min > 0.0 && self.size_max >= self.size_min) {
            return bad("need 0 < size_min <= size_max");
        }
        if self.views == 0 || self.gt_samples == 0 {
            return bad("views and gt_samples must be positive");
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return bad("image_size must be a positive multiple of 4");
        }
        if !(self.ring_radius > 2.0 * self.size_max * 3f64.sqrt()) {
            return bad("ring_radius must keep cameras outside the shapes");
        }
        if !(self.focal > 0.0) || !(0.0..=1.0).contains(&self.test_fraction) {
            return bad("focal must be positive and test_fraction in [0, 1]");
        }
        Ok(())
    }
}

fn orient_outward(vertices: &[[f64; 3]], faces: &mut [[usize; 3]], center: [f64; 3]) {
    for f in faces.iter_mut() {
        let [a, b, c] = *f;
        let n = cross(sub(vertices[b], vertices[a]), sub(vertices[c], vertices[a]));
        let centroid = scale([0, 1, 2].iter().fold([0.0; 3], |acc, &i| crate::geom::add(acc, vertices[f[i]])), 1.0 / 3.0);
        if dot(n, sub(centroid, center)) < 0.0 {
            f.swap(1, 2);
        }
    }
}

fn box_parts(half: [f64; 3], center: [f64; 3], vertices: &mut Vec<[f64; 3]>, faces: &mut Vec<[usize; 3]>) {
    let base = vertices.len();
    for i in 0..8 {
        let s = |bit: usize| if i >> bit & 1 == 1 { 1.0 } else { -1.0 };
        vertices.push([center[0] + s(0) * half[0], center[1] + s(1) * half[1], center[2] + s(2) * half[2]]);
    }
    let quads = [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]];
    let mut fs: Vec<[usize; 3]> = quads
        .iter()
        .flat_map(|q| [[q[0] + base, q[1] + base, q[2] + base], [q[0] + base, q[2] + base, q[3] + base]])
        .collect();
    orient_outward(vertices, &mut fs, center);
    faces.extend(fs);
}

pub fn box_mesh(half: [f64; 3]) -> Result<Mesh> {
    let (mut v, mut f) = (Vec::new(), Vec::new());
    box_parts(half, [0.0; 3], &mut v, &mut f);
    Mesh::new(v, f)
}

/// Closed cylinder along `y`.
pub fn cylinder_mesh(radius: f64, half_height: f64, segments: usize) -> Result<Mesh> {
    let mut v = Vec::with_capacity(2 * segments + 2);
    for &y in &[-half_height, half_height] {
        for i in 0..segments {
            let a = 2.0 * PI * i as f64 / segments as f64;
            v.push([radius * a.cos(), y, radius * a.sin()]);
        }
    }
    let (bottom, top) = (v.len(), v.len() + 1);
    v.push([0.0, -half_height, 0.0]);
    v.push([0.0, half_height, 0.0]);
    let mut f = Vec::new();
    for i in 0..segments {
        let j = (i + 1) % segments;
        f.push([i, j, segments + j]);
        f.push([i, segments + j, segments + i]);
        f.push([bottom, j, i]);
        f.push([top, segments + i, segments + j]);
    }
    orient_outward(&v, &mut f, [0.0; 3]);
    Mesh::new(v, f)
}

/// Two overlapping boxes stored as one mesh with two closed components.
pub fn union_mesh(a: [f64; 3], b: [f64; 3], offset: f64) -> Result<Mesh> {
    let (mut v, mut f) = (Vec::new(), Vec::new());
    box_parts(a, [-offset, 0.0, 0.0], &mut v, &mut f);
    box_parts(b, [offset, 0.0, 0.0], &mut v, &mut f);
    Mesh::new(v, f)
}

fn yaw(mesh: &Mesh, angle: f64) -> Result<Mesh> {
    let (c, s) = (angle.cos(), angle.sin());
    let r = [c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c];
    mesh.with_vertices(mesh.vertices().iter().map(|&p| mat_vec(&r, p)).collect())
}

/// A random solid of the given family, centered at the origin.
pub fn random_shape<R: Rng>(family: Family, spec: &SynthSpec, rng: &mut R) -> Result<Mesh> {
    let mut size = || rng.gen_range(spec.size_min..=spec.size_max);
    let mesh = match family {
        Family::Box => box_mesh([size(), size(), size()])?,
        Family::Ellipsoid => ellipsoid([size(), size(), size()], 3)?,
        Family::Cylinder => {
            let (r, h) = (size(), size());
            cylinder_mesh(r, h, 32)?
        }
        Family::Union => {
            let a = [size() * 0.6, size(), size() * 0.6];
            let b = [size() * 0.6, size() * 0.6, size()];
            union_mesh(a, b, spec.size_min * 0.5)?
        }
    };
    yaw(&mesh, rng.gen_range(0.0..PI))
}

/// Cameras on a ring around the origin, all looking at it.
pub fn ring_cameras<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Result<Vec<Camera>> {
    let w = spec.image_size;
    let f = spec.focal * w as f64;
    let c = (w - 1) as f64 / 2.0;
    let k = CameraIntrinsics::new(f, f, c, c, w, w)?;
    let phase = rng.gen_range(0.0..2.0 * PI);
    (0..spec.views)
        .map(|i| {
            let az = phase + 2.0 * PI * i as f64 / spec.views as f64;
            let el = spec.elevation + rng.gen_range(-0.1..0.1);
            let eye = scale([az.cos() * el.cos(), el.sin(), az.sin() * el.cos()], spec.ring_radius);
            look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], k)
        })
        .collect()
}

/// Direction towards the light, world space.
const LIGHT: [f64; 3] = [0.36, 0.8, 0.48];
const AMBIENT: f64 = 0.2;

/// Z-buffered flat Lambertian render; background is black.
pub fn render(mesh: &Mesh, camera: &Camera) -> Vec<u8> {
    let k = &camera.intrinsics;
    let (w, h) = (k.width, k.height);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut pixels = vec![0u8; w * h];
    let r = &camera.extrinsics.rotation;
    let t = camera.extrinsics.translation;
    // Camera center in world space: -Rᵀ T.
    let eye = [
        -(r[0] * t[0] + r[3] * t[1] + r[6] * t[2]),
        -(r[1] * t[0] + r[4] * t[1] + r[7] * t[2]),
        -(r[2] * t[0] + r[5] * t[1] + r[8] * t[2]),
    ];
    let light = normalize(LIGHT);
    let v = mesh.vertices();
    for face in mesh.faces() {
        let cam: Vec<[f64; 3]> = face.iter().map(|&i| world_to_camera(v[i], &camera.extrinsics)).collect();
        if cam.iter().any(|p| p[2] <= crate::camera::Z_NEAR) {
            continue;
        }
        let px: Vec<(f64, f64)> = cam
            .iter()
            .map(|&p| {
                let q = project(p, k);
                (q.x, q.y)
            })
            .collect();
        let area = (px[1].0 - px[0].0) * (px[2].1 - px[0].1) - (px[2].0 - px[0].0) * (px[1].1 - px[0].1);
        if area.abs() < 1e-12 {
            continue;
        }
        let mut n = normalize(cross(sub(v[face[1]], v[face[0]]), sub(v[face[2]], v[face[0]])));
        if dot(n, sub(eye, v[face[0]])) < 0.0 {
            n = scale(n, -1.0);
        }
        let shade = AMBIENT + (1.0 - AMBIENT) * dot(n, light).max(0.0);
        let value = (255.0 * shade).round().clamp(0.0, 255.0) as u8;
        let lo_x = px.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let hi_x = px.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil().min((w - 1) as f64);
        let lo_y = px.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let hi_y = px.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil().min((h - 1) as f64);
        if hi_x < 0.0 || hi_y < 0.0 {
            continue;
        }
        for y in lo_y..=hi_y as usize {
            for x in lo_x..=hi_x as usize {
                let (fx, fy) = (x as f64, y as f64);
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (fy - a.1) - (fx - a.0) * (b.1 - a.1);
                let b0 = edge(px[1], px[2]) / area;
                let b1 = edge(px[2], px[0]) / area;
                let b2 = edge(px[0], px[1]) / area;
                if b0 < -1e-9 || b1 < -1e-9 || b2 < -1e-9 {
                    continue;
                }
                let z = 1.0 / (b0 / cam[0][2] + b1 / cam[1][2] + b2 / cam[2][2]);
                let i = y * w + x;
                if z < depth[i] {
                    depth[i] = z;
                    pixels[i] = value;
                }
            }
        }
    }
    pixels
}

/// Unit outward normal of every face.
pub fn face_normals(mesh: &Mesh) -> Vec<[f64; 3]> {
    let v = mesh.vertices();
    mesh.faces()
        .iter()
        .map(|&[a, b, c]| normalize(cross(sub(v[b], v[a]), sub(v[c], v[a]))))
        .collect()
}

/// Area-uniform points on `mesh` with the normal of the face each came from.
pub fn sample_cloud<R: Rng>(mesh: &Mesh, n: usize, rng: &mut R) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    let samples = SurfaceSamples::draw(mesh, n, rng)?;
    let normals = face_normals(mesh);
    Ok((samples.points(mesh), samples.faces.iter().map(|&f| normals[f]).collect()))
}

fn write_pgm(path: &Path, pixels: Vec<u8>, size: usize) -> Result<()> {
    let img = image::GrayImage::from_raw(size as u32, size as u32, pixels)
        .ok_or_else(|| Error::invalid("image buffer has the wrong size"))?;
    img.save_with_format(path, image::ImageFormat::Pnm)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Writes `spec.scenes` scene directories plus `train.txt` / `test.txt` under `out`.
pub fn synth_dataset(spec: &SynthSpec, out: &Path, seed: u64) -> Result<usize> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut ids = Vec::with_capacity(spec.scenes);
    for i in 0..spec.scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let family = spec.families[i % spec.families.len()];
        let id = format!("scene_{i:04}");
        let dir = out.join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let mesh = random_shape(family, spec, &mut rng)?;
        let cameras = ring_cameras(spec, &mut rng)?;
        for (k, cam) in cameras.iter().enumerate() {
            if let Some(bad) = project_points(mesh.vertices(), cam).iter().position(|p| !p.valid) {
                return Err(Error::invalid(format!(
                    "{id}: vertex {bad} leaves view {k}; increase ring_radius or lower focal"
                )));
            }
        }
        save_obj(&mesh, dir.join("gt.obj"))?;
        let (points, normals) = sample_cloud(&mesh, spec.gt_samples, &mut rng)?;
        write_cloud(&dir.join("gt_cloud.xyz"), &points, &normals)?;
        save_cameras(&cameras, dir.join("cameras.json"))?;
        for (k, cam) in cameras.iter().enumerate() {
            write_pgm(&dir.join(format!("view_{k:03}.pgm")), render(&mesh, cam), spec.image_size)?;
        }
        write_meta(&dir, &SceneMeta { scene_id: id.clone(), category: family.name().to_string() })?;
        ids.push(id);
    }
    let n_test = (spec.scenes as f64 * spec.test_fraction).floor() as usize;
    let (train, test) = ids.split_at(spec.scenes - n_test);
    for (name, list) in [("train.txt", train), ("test.txt", test)] {
        let text: String = list.iter().map(|s| format!("{s}\n")).collect();
        fs::write(out.join(name), text).map_err(|e| Error::io(out.join(name), e))?;
    }
    Ok(spec.scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::vertex_normals;

    #[test]
    fn primitives_are_closed_and_outward() {
        for mesh in [box_mesh([0.2, 0.1, 0.3]).unwrap(), cylinder_mesh(0.2, 0.3, 16).unwrap()] {
            assert_eq!(mesh.euler_characteristic(), 2);
            let normals = vertex_normals(&mesh).unwrap();
            for (v, n) in mesh.vertices().iter().zip(&normals) {
                assert!(dot(*n, *v) > 0.0);
            }
        }
        assert_eq!(union_mesh([0.1; 3], [0.2; 3], 0.05).unwrap().euler_characteristic(), 4);
    }

    #[test]
    fn render_sees_the_shape() {
        let spec = SynthSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mesh = random_shape(Family::Box, &spec, &mut rng).unwrap();
        let cams = ring_cameras(&spec, &mut rng).unwrap();
        let img = render(&mesh, &cams[0]);
        let lit = img.iter().filter(|&&p| p > 0).count();
        assert!(lit > 100 && lit < 64 * 64, "{lit}");
        assert!(img.iter().all(|&p| p == 0 || p >= 51));
    }

    #[test]
    fn spec_parsing() {
        let s = SynthSpec::parse("scenes = 2\nfamilies = box, cylinder\nimage_size = 32\n", "s").unwrap();
        assert_eq!(s.families, vec![Family::Box, Family::Cylinder]);
        assert_eq!(s.image_size, 32);
        assert!(SynthSpec::parse("families = torus\n", "s").is_err());
        assert!(SynthSpec::parse("image_size = 30\n", "s").is_err());
        assert!(SynthSpec::parse("colour = red\n", "s").is_err());
    }
}
