//! Icosphere levels, hypothesis fans and a convex deformation step.

use p2mx::mdn::deformation_reasoning;
use p2mx::mesh::{hypothesis_fan, icosahedron, save_obj};

fn main() -> p2mx::Result<()> {
    for level in 0..=3 {
        let m = icosahedron(level)?;
        println!(
            "level {level}: {} vertices, {} edges, {} faces, euler {}",
            m.num_vertices(),
            m.edges().len(),
            m.num_faces(),
            m.euler_characteristic()
        );
    }

    let mesh = icosahedron(1)?;
    let fan = hypothesis_fan(&mesh, 7, 0.02)?;
    println!("fan around vertex 7: {} positions, {} edges", fan.positions.len(), fan.local_edges.len());

    // Put most of the mass on one ring hypothesis.
    let mut scores = vec![0.2 / 42.0; 43];
    scores[12] = 0.8;
    let moved = deformation_reasoning(&fan, &scores)?;
    let c = mesh.vertices()[7];
    let d = ((moved[0] - c[0]).powi(2) + (moved[1] - c[1]).powi(2) + (moved[2] - c[2]).powi(2)).sqrt();
    println!("vertex moved by {d:.5} (fan scale 0.02)");

    let out = std::env::temp_dir().join("icosphere_level2.obj");
    save_obj(&icosahedron(2)?, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
