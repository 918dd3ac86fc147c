//! Surface re-sampling, Chamfer distance and F-score between two meshes.

use p2mx::loss::{chamfer, chamfer_brute, resample_mesh};
use p2mx::mesh::ellipsoid;
use p2mx::metrics::f_score;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> p2mx::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sphere = ellipsoid([0.3; 3], 3)?;
    let gt = resample_mesh(&sphere, 10_000, &mut rng)?;

    for radii in [[0.3, 0.3, 0.3], [0.31, 0.3, 0.29], [0.33, 0.27, 0.3], [0.4, 0.24, 0.27]] {
        let pred = resample_mesh(&ellipsoid(radii, 3)?, 10_000, &mut rng)?;
        let cd = chamfer(&pred, &gt)?;
        let f = f_score(&pred, &gt, 1e-4)?;
        println!(
            "radii {radii:?}: CD {cd:.3e}  F(tau) {:.2}  F(2tau) {:.2}  precision {:.2}  recall {:.2}",
            f.f_tau, f.f_2tau, f.precision, f.recall
        );
    }

    let small = &gt[..300];
    let other = resample_mesh(&ellipsoid([0.33, 0.27, 0.3], 1)?, 200, &mut rng)?;
    println!(
        "k-d tree vs brute force: {:.3e} vs {:.3e}",
        chamfer(small, &other)?,
        chamfer_brute(small, &other)?
    );
    Ok(())
}
