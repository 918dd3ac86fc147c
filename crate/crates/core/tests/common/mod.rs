#![allow(dead_code)]

use std::sync::Arc;

use p2mx::camera::{look_at, project_on_tape, CameraIntrinsics};
use p2mx::loss::{aux_losses, chamfer_brute_on_tape, chamfer_on_tape, GtCloud, SurfaceSamples};
use p2mx::mdn::{
    backbone_on_tape, coarse_on_tape, fan_positions_on_tape, init_params, mdn_iteration, scoring_logits,
    soft_argmax_on_tape, CoarseTopology, ModelConfig,
};
use p2mx::mesh::{fan_template, icosahedron, vertex_normals, Mesh, FAN_NODES};
use p2mx::pooling::{pool_levels_on_tape, pool_node_features, FeatureLevel, View, ViewVars, STD_EPS};
use p2mx::tensor::{grad_check, Graph, ReduceKind, Tape, Tensor, Var};
use p2mx::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero in magnitude, so ReLU and clamp stay off their kinks.
pub fn off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.gen_range(0.1..1.0) * if r.gen() { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ y ⊙ w` with fixed pseudo-random `w`, so every output element matters.
pub fn probe(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(uniform(&shape, -1.0, 1.0, 0xfeed + shape.iter().sum::<usize>() as u64));
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

pub fn micro_camera(i: usize) -> p2mx::camera::Camera {
    let k = CameraIntrinsics::new(10.0, 10.0, 3.5, 3.5, 8, 8).unwrap();
    let a = i as f64 * 1.3;
    look_at([2.5 * a.cos(), 0.4, 2.5 * a.sin()], [0.0; 3], [0.0, 1.0, 0.0], k).unwrap()
}

/// `k` views of an 8×8 image with random feature pyramids at strides 1, 2, 4.
pub fn micro_views(k: usize, channels: [usize; 3], seed: u64) -> Vec<View> {
    let mut r = rng(seed);
    (0..k)
        .map(|i| {
            let pyramid = channels
                .iter()
                .zip([1, 2, 4])
                .map(|(&c, s)| {
                    let h = 8usize.div_ceil(s);
                    let data = (0..c * h * h).map(|_| r.gen_range(0.0..1.0)).collect();
                    FeatureLevel { map: Tensor::new([c, h, h], data).unwrap(), stride: s }
                })
                .collect();
            View::new(micro_camera(i), pyramid).unwrap()
        })
        .collect()
}

pub fn micro_config() -> ModelConfig {
    ModelConfig { backbone_channels: [2, 3, 4], scoring_width: 8, coarse_width: 8, coarse_level: 0, ..Default::default() }
}

pub fn scaled_icosahedron(level: usize, s: f64) -> Mesh {
    let m = icosahedron(level).unwrap();
    m.with_vertices(m.vertices().iter().map(|v| v.map(|c| c * s)).collect()).unwrap()
}

fn check<F>(name: &str, x: &Tensor, f: F) -> (String, f64)
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let err = grad_check(f, x, EPS).unwrap_or_else(|e| panic!("{name}: {e}"));
    (name.to_string(), err)
}

/// Relative gradient error for every differentiable operation, each input checked on its own.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    out.extend(tensor_ops());
    out.extend(model_ops());
    out.extend(loss_ops());
    out
}

fn tensor_ops() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let a = uniform(&[3, 4], -1.0, 1.0, 1);
    let b = uniform(&[4, 2], -1.0, 1.0, 2);
    out.push(check("matmul/lhs", &a, |t, x| {
        let c = t.constant(b.clone());
        let y = t.matmul(x, c)?;
        probe(t, y)
    }));
    out.push(check("matmul/rhs", &b, |t, x| {
        let c = t.constant(a.clone());
        let y = t.matmul(c, x)?;
        probe(t, y)
    }));

    let full = uniform(&[2, 3, 4], -1.0, 1.0, 3);
    let row = uniform(&[4], 0.5, 1.5, 4);
    let col = uniform(&[2, 3, 1], 0.5, 1.5, 5);
    type Bin = fn(&mut Tape, Var, Var) -> Result<Var>;
    let kinds: [(&str, Bin); 4] = [
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("div", |t, a, b| t.div(a, b)),
    ];
    for (name, op) in kinds {
        for (other_name, other) in [("row", &row), ("col", &col)] {
            out.push(check(&format!("{name}/{other_name}/lhs"), &full, |t, x| {
                let c = t.constant(other.clone());
                let y = op(t, x, c)?;
                probe(t, y)
            }));
            out.push(check(&format!("{name}/{other_name}/rhs"), other, |t, x| {
                let c = t.constant(full.clone());
                let y = op(t, c, x)?;
                probe(t, y)
            }));
        }
    }

    let signed = off_zero(&[3, 5], 6);
    let positive = uniform(&[3, 5], 0.2, 2.0, 7);
    out.push(check("scale", &signed, |t, x| {
        let y = t.scale(x, -1.7);
        probe(t, y)
    }));
    out.push(check("add_scalar", &signed, |t, x| {
        let y = t.add_scalar(x, 0.3);
        let y = t.square(y);
        probe(t, y)
    }));
    out.push(check("relu", &signed, |t, x| {
        let y = t.relu(x);
        probe(t, y)
    }));
    out.push(check("sqrt", &positive, |t, x| {
        let y = t.sqrt(x)?;
        probe(t, y)
    }));
    out.push(check("square", &signed, |t, x| {
        let y = t.square(x);
        probe(t, y)
    }));
    out.push(check("clamp", &signed, |t, x| {
        let y = t.clamp(x, -0.55, 0.55);
        probe(t, y)
    }));
    out.push(check("softmax", &uniform(&[4, 6], -2.0, 2.0, 8), |t, x| {
        let y = t.softmax(x)?;
        probe(t, y)
    }));

    let img = uniform(&[2, 5, 6], -1.0, 1.0, 9);
    let w = uniform(&[3, 2, 3, 3], -0.5, 0.5, 10);
    let bias = uniform(&[3], -0.5, 0.5, 11);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        out.push(check(&format!("conv2d/s{stride}p{pad}/input"), &img, |t, x| {
            let (w, b) = (t.constant(w.clone()), t.constant(bias.clone()));
            let y = t.conv2d(x, w, b, stride, pad)?;
            probe(t, y)
        }));
        out.push(check(&format!("conv2d/s{stride}p{pad}/weight"), &w, |t, x| {
            let (i, b) = (t.constant(img.clone()), t.constant(bias.clone()));
            let y = t.conv2d(i, x, b, stride, pad)?;
            probe(t, y)
        }));
        out.push(check(&format!("conv2d/s{stride}p{pad}/bias"), &bias, |t, x| {
            let (i, w) = (t.constant(img.clone()), t.constant(w.clone()));
            let y = t.conv2d(i, w, x, stride, pad)?;
            probe(t, y)
        }));
    }
    out.push(check("max_pool2", &uniform(&[2, 4, 6], -1.0, 1.0, 12), |t, x| {
        let y = t.max_pool2(x)?;
        probe(t, y)
    }));

    let cube = uniform(&[3, 4, 5], -1.0, 1.0, 13);
    for (name, kind) in [("sum", ReduceKind::Sum), ("mean", ReduceKind::Mean), ("max", ReduceKind::Max), ("min", ReduceKind::Min)] {
        for axis in 0..3 {
            out.push(check(&format!("reduce/{name}/axis{axis}"), &cube, |t, x| {
                let y = t.reduce(x, kind, axis)?;
                probe(t, y)
            }));
        }
    }
    out.push(check("sum_all", &cube, |t, x| {
        let y = t.square(x);
        t.sum_all(y)
    }));
    out.push(check("mean_all", &cube, |t, x| {
        let y = t.square(x);
        t.mean_all(y)
    }));
    out.push(check("reshape", &cube, |t, x| {
        let y = t.reshape(x, [12, 5])?;
        probe(t, y)
    }));
    out.push(check("narrow", &cube, |t, x| {
        let y = t.narrow(x, 1, 1, 2)?;
        probe(t, y)
    }));
    out.push(check("gather_rows", &uniform(&[5, 3], -1.0, 1.0, 14), |t, x| {
        let y = t.gather_rows(x, &[4, 0, 0, 2, 4, 4])?;
        probe(t, y)
    }));

    let p = uniform(&[3, 2], -1.0, 1.0, 15);
    let q = uniform(&[3, 4], -1.0, 1.0, 16);
    out.push(check("concat/first", &p, |t, x| {
        let c = t.constant(q.clone());
        let y = t.concat(&[x, c], 1)?;
        probe(t, y)
    }));
    out.push(check("concat/second", &q, |t, x| {
        let c = t.constant(p.clone());
        let y = t.concat(&[c, x], 1)?;
        probe(t, y)
    }));
    let r = uniform(&[3, 2], -1.0, 1.0, 17);
    out.push(check("stack", &p, |t, x| {
        let c = t.constant(r.clone());
        let y = t.stack(&[c, x, c])?;
        probe(t, y)
    }));

    let ca = uniform(&[4, 3], -1.0, 1.0, 18);
    let cb = uniform(&[5, 3], -1.0, 1.0, 19);
    out.push(check("sq_dist/lhs", &ca, |t, x| {
        let c = t.constant(cb.clone());
        let y = t.sq_dist(x, c)?;
        probe(t, y)
    }));
    out.push(check("sq_dist/rhs", &cb, |t, x| {
        let c = t.constant(ca.clone());
        let y = t.sq_dist(c, x)?;
        probe(t, y)
    }));

    let graph = Arc::new(Graph::from_edges(5, &[(0, 1), (1, 2), (2, 0), (3, 4), (0, 3)]).unwrap());
    out.push(check("graph_mean", &uniform(&[5, 2], -1.0, 1.0, 20), |t, x| {
        let y = t.graph_mean(x, &graph)?;
        probe(t, y)
    }));

    let views: Vec<Tensor> = (0..3).map(|k| uniform(&[6, 4], -1.0, 1.0, 21 + k)).collect();
    let valid = vec![
        vec![true, true, false, true, false, true],
        vec![true, false, false, true, true, true],
        vec![false, true, false, true, true, true],
    ];
    for k in 0..3 {
        out.push(check(&format!("view_stats/view{k}"), &views[k], |t, x| {
            let xs: Vec<Var> = (0..3).map(|j| if j == k { x } else { t.constant(views[j].clone()) }).collect();
            let y = t.view_stats(&xs, &valid, STD_EPS)?;
            probe(t, y)
        }));
    }

    let map = uniform(&[3, 5, 6], -1.0, 1.0, 25);
    // Coordinates stay away from integer grid lines where bilinear weights kink.
    let coords = Tensor::new([4, 2], vec![0.3, 0.6, 4.2, 3.7, 2.55, 1.45, 1.8, 2.2]).unwrap();
    out.push(check("bilinear/map", &map, |t, x| {
        let c = t.constant(coords.clone());
        let y = t.bilinear(x, c)?;
        probe(t, y)
    }));
    out.push(check("bilinear/coords", &coords, |t, x| {
        let m = t.constant(map.clone());
        let y = t.bilinear(m, x)?;
        probe(t, y)
    }));
    out
}

fn model_ops() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let cfg = micro_config();
    let params = init_params(&cfg, 3).unwrap();
    let views = micro_views(3, cfg.backbone_channels, 4);
    let points = uniform(&[5, 3], -0.35, 0.35, 30);
    let camera = views[0].camera;

    out.push(check("projection", &points, |t, x| {
        let (c, _) = project_on_tape(t, x, &camera)?;
        probe(t, c)
    }));
    let level_maps: Vec<Tensor> = views[0].pyramid.iter().map(|l| l.map.clone()).collect();
    out.push(check("pool_pyramid/coords", &Tensor::new([3, 2], vec![1.3, 2.6, 5.4, 4.7, 3.2, 6.1]).unwrap(), |t, x| {
        let levels: Vec<(Var, usize)> = level_maps.iter().zip([1, 2, 4]).map(|(m, s)| (t.constant(m.clone()), s)).collect();
        let y = pool_levels_on_tape(t, x, &levels)?;
        probe(t, y)
    }));
    out.push(check("node_features/points", &points, |t, x| {
        let vv: Vec<ViewVars> = views.iter().map(|v| ViewVars::from_view(t, v)).collect();
        let y = pool_node_features(t, x, &vv)?;
        probe(t, y)
    }));
    out.push(check("node_features/map", &views[1].pyramid[1].map, |t, x| {
        let mut vv: Vec<ViewVars> = views.iter().map(|v| ViewVars::from_view(t, v)).collect();
        vv[1].levels[1].0 = x;
        let p = t.constant(points.clone());
        let y = pool_node_features(t, p, &vv)?;
        probe(t, y)
    }));

    let features = uniform(&[2 * FAN_NODES, cfg.scoring_input()], -1.0, 1.0, 31);
    let graph = Arc::new(fan_template().graph.repeat(2));
    out.push(check("scoring_network/features", &features, |t, x| {
        let bound = params.bind(t, |_| false);
        let y = scoring_logits(t, &bound, x, &graph)?;
        probe(t, y)
    }));

    let logits = uniform(&[2 * FAN_NODES, 1], -2.0, 2.0, 32);
    let centers = uniform(&[2, 3], -0.3, 0.3, 33);
    out.push(check("soft_argmax/logits", &logits, |t, x| {
        let c = t.constant(centers.clone());
        let pos = fan_positions_on_tape(t, c, 0.05)?;
        let y = soft_argmax_on_tape(t, x, pos)?;
        probe(t, y)
    }));
    out.push(check("soft_argmax/centers", &centers, |t, x| {
        let l = t.constant(logits.clone());
        let pos = fan_positions_on_tape(t, x, 0.05)?;
        let y = soft_argmax_on_tape(t, l, pos)?;
        probe(t, y)
    }));

    out.push(check("mdn_iteration/vertices", &uniform(&[3, 3], -0.3, 0.3, 34), |t, x| {
        let bound = params.bind(t, |_| false);
        let vv: Vec<ViewVars> = views.iter().map(|v| ViewVars::from_view(t, v)).collect();
        let y = mdn_iteration(t, &bound, x, &vv, 0.05)?;
        probe(t, y)
    }));
    out.push(check("mdn_iteration/map", &views[0].pyramid[0].map, |t, x| {
        let bound = params.bind(t, |_| false);
        let mut vv: Vec<ViewVars> = views.iter().map(|v| ViewVars::from_view(t, v)).collect();
        vv[0].levels[0].0 = x;
        let p = t.constant(uniform(&[3, 3], -0.3, 0.3, 34));
        let y = mdn_iteration(t, &bound, p, &vv, 0.05)?;
        probe(t, y)
    }));

    let topology = CoarseTopology::new(0, 0.3).unwrap();
    out.push(check("coarse_stage/map", &views[2].pyramid[2].map, |t, x| {
        let bound = params.bind(t, |_| false);
        let mut vv: Vec<ViewVars> = views.iter().map(|v| ViewVars::from_view(t, v)).collect();
        vv[2].levels[2].0 = x;
        let stages = coarse_on_tape(t, &bound, &topology, &vv)?;
        probe(t, stages.last().unwrap().output)
    }));

    let image = uniform(&[3, 8, 8], 0.0, 1.0, 35);
    out.push(check("backbone/image", &image, |t, x| {
        let bound = params.bind(t, |_| false);
        let levels = backbone_on_tape(t, &bound, x)?;
        let mut total = None;
        for (v, _) in levels {
            let p = probe(t, v)?;
            total = Some(match total {
                None => p,
                Some(acc) => t.add(acc, p)?,
            });
        }
        Ok(total.unwrap())
    }));
    out
}

fn loss_ops() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let a = uniform(&[7, 3], -1.0, 1.0, 40);
    let b = uniform(&[9, 3], -1.0, 1.0, 41);
    for squared in [true, false] {
        out.push(check(&format!("chamfer/squared={squared}"), &a, |t, x| {
            let c = t.constant(b.clone());
            chamfer_on_tape(t, x, c, squared)
        }));
    }
    out.push(check("chamfer_brute", &a, |t, x| {
        let c = t.constant(b.clone());
        chamfer_brute_on_tape(t, x, c)
    }));

    let mesh = scaled_icosahedron(1, 0.4);
    let samples = SurfaceSamples::draw(&mesh, 50, &mut rng(42)).unwrap();
    let verts = Tensor::from_points(mesh.vertices());
    out.push(check("surface_samples", &verts, |t, x| {
        let y = samples.on_tape(t, x, mesh.faces())?;
        probe(t, y)
    }));

    let gt_mesh = scaled_icosahedron(2, 0.5);
    let gt = GtCloud::new(gt_mesh.vertices().to_vec(), vertex_normals(&gt_mesh).unwrap()).unwrap();
    let before = verts.clone();
    let jitter = uniform(before.shape(), -0.02, 0.02, 43);
    let after = Tensor::new(
        before.shape().to_vec(),
        before.data().iter().zip(jitter.data()).map(|(v, j)| v * 1.1 + j).collect(),
    )
    .unwrap();
    type Pick = fn(&p2mx::loss::AuxLosses) -> Var;
    let picks: [(&str, Pick); 3] = [("edge", |l| l.edge), ("laplacian", |l| l.laplacian), ("normal", |l| l.normal)];
    for (name, pick) in picks {
        out.push(check(&format!("aux/{name}"), &after, |t, x| {
            let bv = t.constant(before.clone());
            let l = aux_losses(t, bv, x, &mesh, &gt)?;
            Ok(pick(&l))
        }));
    }
    out
}
