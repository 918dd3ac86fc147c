//! End to end: render a tiny dataset, train briefly, evaluate and refine a noisy mesh.
//!
//! Same steps as `p2mx synth`, `p2mx train`, `p2mx eval` and `p2mx refine`.

use p2mx::metrics::MetricConfig;
use p2mx::mdn::ModelConfig;
use p2mx::mesh::save_obj;
use p2mx::pipeline::{evaluate, refine_mesh_file, synth_dataset, train_with, Model, RunConfig, Scene, SynthSpec};

fn main() -> p2mx::Result<()> {
    let root = std::env::temp_dir().join("p2mx_example");
    let data = root.join("data");
    let spec = SynthSpec { scenes: 4, image_size: 32, gt_samples: 2000, ..SynthSpec::default() };
    println!("synthesized {} scenes under {}", synth_dataset(&spec, &data, 7)?, data.display());

    let config = RunConfig {
        epochs_phase1: 2,
        epochs_phase2: 3,
        lr_phase1: 1e-3,
        lr_phase2: 1e-3,
        model: ModelConfig { scoring_width: 16, coarse_width: 16, coarse_level: 0, ..ModelConfig::default() },
        loss: p2mx::loss::LossOptions { samples: 500, ..Default::default() },
        dataset: data.clone(),
        out_dir: root.join("run"),
        ..RunConfig::default()
    };
    let ckpt = train_with(&config, |r| println!("step {:>3}  total {:.4e}  chamfer {:.4e}", r.step, r.total, r.chamfer))?;

    let model = Model::load(&ckpt)?;
    let report = evaluate(&model, &data, &MetricConfig { tau: 1e-3, samples: 2000 }, None)?;
    for row in report.rows() {
        println!("{:<12} CD {:.4e}  F {:.2}", row.scene_id, row.cd, row.f_tau);
    }

    let scene_dir = data.join("scene_0000");
    let scene = Scene::load(&scene_dir)?;
    let coarse = model.predict(&scene.views)?.coarse;
    let input = root.join("coarse.obj");
    save_obj(&coarse, &input)?;
    let out = root.join("refined.obj");
    if let Some(cds) = refine_mesh_file(&input, &scene_dir, &ckpt, 3, &out)? {
        for (i, cd) in cds.iter().enumerate() {
            println!("iteration {i}: CD {cd:.4e}");
        }
    }
    println!("refined mesh at {}", out.display());
    Ok(())
}
