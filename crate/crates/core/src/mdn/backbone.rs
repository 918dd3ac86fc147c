use rand::Rng;

use crate::error::{Error, Result};
use crate::pooling::FeatureLevel;
use crate::tensor::{glorot_uniform, BoundParams, ParamStore, Tape, Tensor, Var};

/// Resolution of each pyramid level relative to the image.
pub const BACKBONE_STRIDES: [usize; 3] = [1, 2, 4];

fn conv_name(level: usize, j: usize) -> String {
    format!("backbone/conv{}_{}", level + 1, j + 1)
}

pub(super) fn init<R: Rng>(params: &mut ParamStore, rng: &mut R, channels: [usize; 3]) {
    let mut cin = 3;
    for (level, &c) in channels.iter().enumerate() {
        for j in 0..2 {
            let name = conv_name(level, j);
            params.insert(format!("{name}/w"), glorot_uniform(rng, &[c, cin, 3, 3], cin * 9, c * 9));
            params.insert(format!("{name}/b"), Tensor::zeros([c]));
            cin = c;
        }
    }
}

/// Grayscale pixels (row-major, `width×height`) as a `3×H×W` tensor in `[0, 1]`.
pub fn image_tensor(pixels: &[u8], width: usize, height: usize) -> Result<Tensor> {
    if pixels.len() != width * height {
        return Err(Error::invalid(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let plane: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::new([3, height, width], data)
}

/// Three levels of two 3×3 conv+ReLU each, with a 2×2 max-pool between levels.
pub fn backbone_on_tape(tape: &mut Tape, params: &BoundParams, image: Var) -> Result<Vec<(Var, usize)>> {
    let s = tape.shape(image).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("backbone", &[&s]));
    }
    if s[1] % 4 != 0 || s[2] % 4 != 0 {
        return Err(Error::invalid(format!(
            "backbone input {}x{} is not divisible by 4",
            s[2], s[1]
        )));
    }
    let mut x = image;
    let mut levels = Vec::with_capacity(3);
    for (level, &stride) in BACKBONE_STRIDES.iter().enumerate() {
        if level > 0 {
            x = tape.max_pool2(x)?;
        }
        for j in 0..2 {
            let name = conv_name(level, j);
            let w = params.get(&format!("{name}/w"))?;
            let b = params.get(&format!("{name}/b"))?;
            x = tape.conv2d(x, w, b, 1, 1)?;
            x = tape.relu(x);
        }
        levels.push((x, stride));
    }
    Ok(levels)
}

/// Value-level pyramid for one `3×H×W` image.
pub fn backbone_pyramid(params: &ParamStore, image: &Tensor) -> Result<Vec<FeatureLevel>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let img = tape.constant(image.clone());
    let levels = backbone_on_tape(&mut tape, &bound, img)?;
    Ok(levels
        .into_iter()
        .map(|(v, stride)| FeatureLevel { map: tape.value(v).clone(), stride })
        .collect())
}
