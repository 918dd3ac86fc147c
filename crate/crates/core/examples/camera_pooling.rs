//! Projecting points into posed views and pooling cross-view feature statistics.

use p2mx::camera::{look_at, project_points, CameraIntrinsics};
use p2mx::pooling::{node_feature_dim, pool_node_features, FeatureLevel, View, ViewVars};
use p2mx::tensor::{Tape, Tensor};

fn view(angle: f64, channels: [usize; 3]) -> p2mx::Result<View> {
    let k = CameraIntrinsics::new(40.0, 40.0, 15.5, 15.5, 32, 32)?;
    let eye = [2.0 * angle.cos(), 0.5, 2.0 * angle.sin()];
    let camera = look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], k)?;
    let pyramid = channels
        .iter()
        .zip([1, 2, 4])
        .map(|(&c, s)| {
            let h = 32 / s;
            // A smooth ramp so pooled values are easy to eyeball.
            let data = (0..c * h * h).map(|i| ((i % h) as f64 / h as f64) + (i / (h * h)) as f64).collect();
            Ok(FeatureLevel { map: Tensor::new([c, h, h], data)?, stride: s })
        })
        .collect::<p2mx::Result<Vec<_>>>()?;
    View::new(camera, pyramid)
}

fn main() -> p2mx::Result<()> {
    let channels = [4, 8, 16];
    let views = [view(0.0, channels)?, view(2.0, channels)?, view(4.0, channels)?];
    let points = [[0.0, 0.0, 0.0], [0.2, 0.1, -0.1], [-0.15, -0.2, 0.05]];

    for (i, v) in views.iter().enumerate() {
        let proj = project_points(&points, &v.camera);
        let px: Vec<String> = proj.iter().map(|p| format!("({:.1}, {:.1})", p.x, p.y)).collect();
        println!("view {i}: {}", px.join(" "));
    }

    let mut tape = Tape::new();
    let vv: Vec<ViewVars> = views.iter().map(|v| ViewVars::from_view(&mut tape, v)).collect();
    let pts = tape.constant(Tensor::from_points(&points));
    let feats = pool_node_features(&mut tape, pts, &vv)?;
    println!("node features {:?} (expected width {})", tape.value(feats).shape(), node_feature_dim(&channels));
    println!("width for channels 64/128/256: {}", node_feature_dim(&[64, 128, 256]));
    Ok(())
}
