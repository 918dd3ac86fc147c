use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use p2mx::metrics::MetricConfig;
use p2mx::pipeline::{evaluate, refine_mesh_file, synth_dataset, train_with, Model, RunConfig, SynthSpec};

#[derive(Parser)]
#[command(name = "p2mx", about = "Multi-view mesh deformation: synthesize, train, refine, evaluate")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Refine an OBJ mesh with the views of one scene.
    Refine {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 3)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a CD / F-score report for the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tau: f64,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        report: PathBuf,
    },
}

fn run(cmd: Cmd) -> p2mx::Result<()> {
    match cmd {
        Cmd::Synth { spec, out, seed } => {
            let spec = match spec {
                Some(p) => SynthSpec::load(&p)?,
                None => SynthSpec::default(),
            };
            let n = synth_dataset(&spec, &out, seed)?;
            println!("wrote {n} scenes to {}", out.display());
        }
        Cmd::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let path = train_with(&cfg, |r| {
                if r.step % 10 == 0 {
                    eprintln!("step {:>6}  total {:.6e}  chamfer {:.6e}", r.step, r.total, r.chamfer);
                }
            })?;
            println!("{}", path.display());
        }
        Cmd::Refine { mesh, scene, ckpt, iters, out } => {
            if let Some(cds) = refine_mesh_file(&mesh, &scene, &ckpt, iters, &out)? {
                for (i, cd) in cds.iter().enumerate() {
                    println!("iter {i}  cd {cd:.6e}");
                }
            }
            println!("{}", out.display());
        }
        Cmd::Eval { ckpt, data, tau, samples, views, report } => {
            let metric = MetricConfig { tau, samples };
            let r = evaluate(&Model::load(&ckpt)?, &data, &metric, views)?;
            r.save(&report)?;
            let m = r.mean();
            println!("{} scenes  cd {:.6e}  f_tau {:.2}  f_2tau {:.2}", r.scenes.len(), m.cd, m.f_tau, m.f_2tau);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
