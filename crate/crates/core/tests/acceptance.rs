mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use p2mx::camera::{cameras_from_json, cameras_to_json, CameraIntrinsics, look_at};
use p2mx::geom::{dist2, norm, sub};
use p2mx::loss::{chamfer, chamfer_brute, resample_mesh, SurfaceSamples};
use p2mx::mdn::{deformation_reasoning, init_params, mdn_refine, ModelConfig, RefineConfig};
use p2mx::mesh::{hypothesis_fan, icosahedron, parse_obj, write_obj, Mesh, FAN_EDGES, FAN_NODES};
use p2mx::metrics::{f_score, f_score_brute, MetricConfig};
use p2mx::pipeline::{evaluate_mesh, synth_dataset, Family, Model, RunConfig, Scene, SynthSpec, Trainer};
use p2mx::pooling::{node_feature_dim, pool_node_features, read_fmap, write_fmap, ViewVars};
use p2mx::tensor::{read_checkpoint, write_checkpoint, ParamStore, Precision, Tape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok { Ok(detail) } else { Err(detail) }
}

fn structural_constants() -> Outcome {
    let mesh = icosahedron(1).unwrap();
    let (v, e, f) = (mesh.num_vertices(), mesh.edges().len(), mesh.num_faces());
    let mut fans_ok = true;
    for i in 0..v {
        let fan = hypothesis_fan(&mesh, i, 0.02).unwrap();
        fans_ok &= fan.positions.len() == 43 && fan.local_edges.len() == 162;
    }
    ensure(
        (v, e, f) == (42, 120, 80) && fans_ok && (FAN_NODES, FAN_EDGES) == (43, 162),
        format!("V/E/F = {v}/{e}/{f}, every fan 43 nodes / 162 edges: {fans_ok}"),
    )
}

fn feature_width() -> Outcome {
    let channels = [64, 128, 256];
    let views = common::micro_views(2, channels, 1);
    let mut tape = Tape::new();
    let vv: Vec<ViewVars> = views.iter().map(|v| ViewVars::from_view(&mut tape, v)).collect();
    let pts = tape.constant(Tensor::from_points(&[[0.0, 0.0, 0.0], [0.1, -0.2, 0.05]]));
    let feats = pool_node_features(&mut tape, pts, &vv).unwrap();
    let shape = tape.value(feats).shape().to_vec();
    ensure(
        node_feature_dim(&channels) == 1347 && shape == [2, 1347],
        format!("declared {} pooled {shape:?}", node_feature_dim(&channels)),
    )
}

fn convexity_bound() -> Outcome {
    let mesh = icosahedron(1).unwrap();
    let fans: Vec<_> = (0..mesh.num_vertices()).map(|i| hypothesis_fan(&mesh, i, 0.02).unwrap()).collect();
    let mut rng = common::rng(3);
    let mut worst: f64 = 0.0;
    for trial in 0..10_000 {
        let fan = &fans[trial % fans.len()];
        let temp = [0.1, 1.0, 10.0, 100.0][trial % 4];
        let logits: Vec<f64> = (0..43).map(|_| rng.gen_range(-1.0..1.0) * temp).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let s: Vec<f64> = e.iter().map(|v| v / z).collect();
        let v = deformation_reasoning(fan, &s).unwrap();
        worst = worst.max(norm(sub(v, mesh.vertices()[fan.center_index])));
    }
    let mut uniform_worst: f64 = 0.0;
    for fan in &fans {
        let v = deformation_reasoning(fan, &[1.0 / 43.0; 43]).unwrap();
        uniform_worst = uniform_worst.max(norm(sub(v, mesh.vertices()[fan.center_index])));
    }
    // Scores normalised in floating point can overshoot the hull by rounding only.
    ensure(
        worst <= 0.02 * (1.0 + 1e-12) && uniform_worst < 1e-9,
        format!("max displacement {worst:.6e}, uniform {uniform_worst:.1e}"),
    )
}

fn permutation_invariance() -> Outcome {
    let cfg = common::micro_config();
    let params = init_params(&cfg, 6).unwrap();
    let views = common::micro_views(5, cfg.backbone_channels, 2);
    let mesh = common::scaled_icosahedron(1, 0.45);
    let rc = RefineConfig::default();
    let base = mdn_refine(&mesh, &views, &params, &rc).unwrap();
    let mut rng = common::rng(7);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let mut perm = views.clone();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let out = mdn_refine(&mesh, &perm, &params, &rc).unwrap();
        for (a, b) in out.vertices().iter().zip(base.vertices()) {
            worst = worst.max(dist2(*a, *b).sqrt());
        }
    }
    ensure(worst < 1e-9, format!("max vertex difference {worst:.1e} over 10 permutations"))
}

fn gradient_suite() -> Outcome {
    let suite = common::gradient_suite();
    let (name, worst) = suite.iter().cloned().fold((String::new(), 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let failed: Vec<&str> = suite.iter().filter(|(_, e)| !(*e < common::TOL)).map(|(n, _)| n.as_str()).collect();
    ensure(
        failed.is_empty(),
        format!("{} checks, worst {name} at {worst:.1e}, failing {failed:?}", suite.len()),
    )
}

fn sampling_uniformity() -> Outcome {
    let tri = Mesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
    let n = 100_000;
    let pts = SurfaceSamples::draw(&tri, n, &mut common::rng(11)).unwrap().points(&tri);
    let nf = pts.len() as f64;
    let mx = pts.iter().map(|p| p[0]).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p[1]).sum::<f64>() / nf;
    let cxx = pts.iter().map(|p| (p[0] - mx).powi(2)).sum::<f64>() / nf;
    let cyy = pts.iter().map(|p| (p[1] - my).powi(2)).sum::<f64>() / nf;
    let cxy = pts.iter().map(|p| (p[0] - mx) * (p[1] - my)).sum::<f64>() / nf;
    // Uniform density 2 on the unit right triangle: E[x] = 1/3, E[x²] = 1/6, E[xy] = 1/12.
    let (want_m, want_d, want_o) = (1.0 / 3.0, 1.0 / 18.0, -1.0 / 36.0);
    let mean_err = (mx - want_m).abs().max((my - want_m).abs());
    let rel = [(cxx - want_d) / want_d, (cyy - want_d) / want_d, (cxy - want_o) / want_o.abs()]
        .iter()
        .fold(0.0f64, |m, r| m.max(r.abs()));
    ensure(
        pts.len() == n && mean_err < 0.005 && rel < 0.05,
        format!("mean error {mean_err:.1e}, covariance relative error {:.2}%", rel * 100.0),
    )
}

fn brute_force_equivalence() -> Outcome {
    let mut rng = common::rng(13);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let na = rng.gen_range(1..=512);
        let nb = rng.gen_range(1..=512);
        let spread = rng.gen_range(0.05..2.0);
        let mut cloud = |n: usize| -> Vec<[f64; 3]> {
            (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(-spread..spread))).collect()
        };
        let (a, b) = (cloud(na), cloud(nb));
        let tau = rng.gen_range(1e-4..0.1);
        worst = worst.max((chamfer(&a, &b).unwrap() - chamfer_brute(&a, &b).unwrap()).abs());
        let (fast, slow) = (f_score(&a, &b, tau).unwrap(), f_score_brute(&a, &b, tau).unwrap());
        for (x, y) in [
            (fast.f_tau, slow.f_tau),
            (fast.f_2tau, slow.f_2tau),
            (fast.precision, slow.precision),
            (fast.recall, slow.recall),
        ] {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-12, format!("max difference {worst:.1e} over 50 pairs"))
}

struct Overfit {
    model: Model,
    scene: Scene,
}

const OVERFIT_METRIC: MetricConfig = MetricConfig { tau: 1e-4, samples: 10_000 };

fn overfit_setup(dir: &Path) -> (RunConfig, Scene) {
    let spec = SynthSpec {
        scenes: 1,
        families: vec![Family::Box],
        views: 3,
        image_size: 64,
        test_fraction: 0.0,
        ..SynthSpec::default()
    };
    let data = dir.join("data");
    synth_dataset(&spec, &data, 0).unwrap();
    let scene = Scene::load(&data.join("scene_0000")).unwrap();
    let config = RunConfig {
        seed: 3,
        epochs_phase1: 0,
        epochs_phase2: 500,
        lr_phase2: 1e-3,
        precision: Precision::F64,
        model: ModelConfig {
            backbone_channels: [16, 32, 64],
            scoring_width: 32,
            coarse_width: 32,
            coarse_level: 0,
            ..ModelConfig::default()
        },
        dataset: data,
        out_dir: dir.join("run"),
        ..RunConfig::default()
    };
    (config, scene)
}

fn final_cd(model: &Model, scene: &Scene) -> Vec<f64> {
    let pred = model.predict(&scene.views).unwrap();
    std::iter::once(&pred.coarse)
        .chain(&pred.refined)
        .map(|m| evaluate_mesh(&scene.id, m, &scene.gt, &OVERFIT_METRIC).unwrap().cd)
        .collect()
}

fn overfit(slot: &mut Option<Overfit>) -> Outcome {
    let tmp = tempfile::TempDir::new().unwrap();
    let (config, scene) = overfit_setup(tmp.path());
    let mut trainer = Trainer::new(config, vec![scene.clone()]).unwrap();
    let before = final_cd(&Model::from_params(trainer.params.clone()).unwrap(), &scene);
    let mut curve = Vec::new();
    while !trainer.is_done() {
        curve.push(trainer.step_once().unwrap().chamfer);
    }
    let model = Model::from_params(trainer.params.clone()).unwrap();
    let after = final_cd(&model, &scene);
    *slot = Some(Overfit { model, scene });

    let (start, end) = (*before.last().unwrap(), *after.last().unwrap());
    let reduction = 1.0 - end / start;
    let iters_ok = after[3] <= after[1];
    ensure(
        curve.len() == 500 && reduction >= 0.9 && iters_ok,
        format!(
            "{} steps, re-sampled CD {start:.3e} -> {end:.3e} ({:.2}% lower), CD per iteration {:.3e} {:.3e} {:.3e}, \
             training loss {:.3e} -> {:.3e}",
            curve.len(),
            reduction * 100.0,
            after[1],
            after[2],
            after[3],
            curve[0],
            curve.last().unwrap()
        ),
    )
}

fn resample_discrimination() -> Outcome {
    let smooth = common::scaled_icosahedron(2, 0.5);
    let mut spiked = smooth.vertices().to_vec();
    spiked[0] = spiked[0].map(|c| c * 1.6);
    let spike = smooth.with_vertices(spiked).unwrap();
    let gt = resample_mesh(&smooth, 20_000, &mut common::rng(17)).unwrap();

    let vertex_only = |m: &Mesh| chamfer(m.vertices(), &gt).unwrap();
    let resampled = |m: &Mesh| chamfer(&resample_mesh(m, 4000, &mut common::rng(19)).unwrap(), &gt).unwrap();
    let v_ratio = vertex_only(&spike) / vertex_only(&smooth);
    let r_ratio = resampled(&spike) / resampled(&smooth);
    ensure(r_ratio > v_ratio, format!("spike/smooth ratio: re-sampled {r_ratio:.3}, vertex-only {v_ratio:.3}"))
}

fn robustness(slot: &Option<Overfit>) -> Outcome {
    let Some(Overfit { model, scene }) = slot else {
        return Err("no overfit model, the training run did not finish".into());
    };
    let coarse = model.predict(&scene.views).unwrap().coarse;
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..5 {
        let mut rng = common::rng(100 + seed);
        let noisy: Vec<[f64; 3]> = coarse.vertices().iter().map(|v| v.map(|c| c + noise.sample(&mut rng))).collect();
        let noisy = coarse.with_vertices(noisy).unwrap();
        let refined = model.refine(&noisy, &scene.views, 3).unwrap();
        let a = evaluate_mesh(&scene.id, &noisy, &scene.gt, &OVERFIT_METRIC).unwrap().cd;
        let b = evaluate_mesh(&scene.id, refined.last().unwrap(), &scene.gt, &OVERFIT_METRIC).unwrap().cd;
        ok &= b < a;
        lines.push(format!("{a:.2e}->{b:.2e}"));
    }
    ensure(ok, format!("noisy -> refined CD for 5 noise draws: {}", lines.join(", ")))
}

fn round_trips() -> Outcome {
    let mut issues = Vec::new();

    let mesh = common::scaled_icosahedron(2, 0.37);
    let text = write_obj(&mesh);
    let back = parse_obj(&text, "mem").unwrap();
    let obj_err = back
        .vertices()
        .iter()
        .zip(mesh.vertices())
        .fold(0.0f64, |m, (a, b)| (0..3).fold(m, |m, k| m.max((a[k] - b[k]).abs())));
    if back.faces() != mesh.faces() || obj_err >= 1e-6 || write_obj(&back) != text {
        issues.push(format!("OBJ (vertex error {obj_err:.1e})"));
    }

    let maps: Vec<Tensor> = [[2, 3, 4], [5, 1, 2]]
        .iter()
        .enumerate()
        .map(|(i, s)| common::uniform(s, -3.0, 3.0, 50 + i as u64).map(|v| v as f32 as f64))
        .collect();
    let mut buf = Vec::new();
    write_fmap(&mut buf, &maps).unwrap();
    if read_fmap(buf.as_slice()).unwrap() != maps {
        issues.push("FMAP".to_string());
    }

    let k = CameraIntrinsics::new(57.3, 61.1, 31.5, 30.25, 64, 60).unwrap();
    let cams = vec![
        look_at([1.5, 0.3, 0.2], [0.0; 3], [0.0, 1.0, 0.0], k).unwrap(),
        look_at([-0.4, 0.9, -1.3], [0.01, 0.0, 0.02], [0.0, 1.0, 0.0], k).unwrap(),
    ];
    if cameras_from_json(&cameras_to_json(&cams), "mem").unwrap() != cams {
        issues.push("camera JSON".to_string());
    }

    let mut params = ParamStore::new();
    for (i, name) in ["a/w", "a/b", "meta/x"].iter().enumerate() {
        params.insert(*name, common::uniform(&[3, i + 1], -2.0, 2.0, 60 + i as u64).map(|v| v as f32 as f64));
    }
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &params).unwrap();
    let back = read_checkpoint(buf.as_slice()).unwrap();
    let same = back.len() == params.len() && params.iter().all(|(n, t)| back.get(n).ok() == Some(t));
    let mut again = Vec::new();
    write_checkpoint(&mut again, &back).unwrap();
    if !same || again != buf {
        issues.push("checkpoint".to_string());
    }

    ensure(issues.is_empty(), if issues.is_empty() { "OBJ, FMAP, camera JSON, checkpoint".into() } else { format!("mismatch in {}", issues.join(", ")) })
}

fn run(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let took = start.elapsed();
    let in_time = took <= limit;
    let (ok, detail) = match outcome {
        Ok(d) => (in_time, d),
        Err(d) => (false, d),
    };
    let budget = if in_time { String::new() } else { format!(" over the {limit:?} budget") };
    println!(
        "[{}] {id:>2} {name}: {detail} ({:.2}s{budget})",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64()
    );
    ok
}

fn main() -> ExitCode {
    let s = Duration::from_secs;
    let mut overfit_model = None;
    let results = [
        run(1, "structural constants", s(1), structural_constants),
        run(2, "feature width", s(1), feature_width),
        run(3, "convexity bound", s(5), convexity_bound),
        run(4, "permutation invariance", s(30), permutation_invariance),
        run(5, "gradient suite", s(180), gradient_suite),
        run(6, "sampling uniformity", s(10), sampling_uniformity),
        run(7, "brute-force equivalence", s(30), brute_force_equivalence),
        run(8, "overfit", s(600), || overfit(&mut overfit_model)),
        run(9, "re-sampled loss discrimination", s(10), resample_discrimination),
        run(10, "noise robustness", s(60), || robustness(&overfit_model)),
        run(11, "file round-trips", s(10), round_trips),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    println!("{passed}/{} acceptance criteria passed", results.len());
    if passed == results.len() { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
