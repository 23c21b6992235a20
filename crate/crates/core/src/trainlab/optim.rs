use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::numcore::ParamStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adamw,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Per-parameter optimizer state, keyed by store index.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    t: i32,
    moments: HashMap<usize, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self { kind, lr, weight_decay, t: 0, moments: HashMap::new() }
    }

    /// Apply one update. Gradients name parameters by store index; an entry
    /// for a frozen parameter is skipped, so frozen values are never written.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(usize, Vec<f64>)]) {
        self.t += 1;
        let (lr, wd) = (self.lr, self.weight_decay);
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        for (idx, g) in grads {
            let p = params.by_index_mut(*idx);
            if !p.trainable {
                continue;
            }
            // Decay matrices and prompt tables only, not biases, gains or gates.
            let decay = if p.value.shape().len() >= 2 { wd } else { 0.0 };
            let w = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in w.iter_mut().zip(g) {
                        *w -= lr * (g + decay * *w);
                    }
                }
                OptimizerKind::Adamw => {
                    let (m, v) = self.moments.entry(*idx).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    for i in 0..w.len() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        w[i] -= lr * (mh / (vh.sqrt() + EPS) + decay * w[i]);
                    }
                }
            }
        }
    }
}
