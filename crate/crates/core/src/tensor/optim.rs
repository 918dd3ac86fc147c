use std::collections::BTreeMap;

use super::{ParamStore, Precision, Tensor};
use crate::error::{Error, Result};

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub precision: Precision,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            precision: Precision::F64,
            state: AdamState::default(),
        }
    }

    /// Applies one update for every `(name, gradient)` pair.
    pub fn step<'a>(
        &mut self,
        params: &mut ParamStore,
        grads: impl IntoIterator<Item = (&'a str, Tensor)>,
    ) -> Result<()> {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let p = self.precision;
        for (name, g) in grads {
            let w = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
            if w.shape() != g.shape() {
                return Err(Error::shape("adam", &[w.shape(), g.shape()]));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            let m = self
                .state
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .state
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for i in 0..g.numel() {
                let wi = w.data()[i];
                let gi = g.data()[i] + self.weight_decay * wi;
                let mi = p.round(self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi);
                let vi = p.round(self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi);
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                w.data_mut()[i] = p.round(wi - update);
            }
        }
        Ok(())
    }
}
