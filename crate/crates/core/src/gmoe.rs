//! Mixture-of-experts fusion of a general-domain and a medical-domain
//! adapter stream, plain (`A_g + A_m`) or gated (`α·A_g + (1−α)·A_m`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::kernels;
use crate::numcore::{Forward, NodeId, Tensor};

/// How the stored gate parameter maps to the effective α.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateParam {
    /// α is the parameter itself.
    #[default]
    Raw,
    /// α = sigmoid(parameter), always inside (0, 1).
    Sigmoid,
}

impl GateParam {
    pub fn effective(self, raw: f64) -> f64 {
        match self {
            GateParam::Raw => raw,
            GateParam::Sigmoid => kernels::sigmoid(raw),
        }
    }

    /// Inverse of [`GateParam::effective`].
    pub fn raw_from_effective(self, alpha: f64) -> f64 {
        match self {
            GateParam::Raw => alpha,
            GateParam::Sigmoid => (alpha / (1.0 - alpha)).ln(),
        }
    }
}

/// Where the two expert streams are fused.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// One gate on the pooled features of each expert.
    #[default]
    Final,
    /// One gate per block; each expert keeps its own token stream and the
    /// gated per-block class tokens are averaged into the pooled features.
    PerBlock,
}

/// Learnable width-`D` interpolation weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector {
    pub raw: Tensor,
    pub param: GateParam,
}

impl GateVector {
    pub fn constant(dim: usize, alpha: f64, param: GateParam) -> Self {
        Self { raw: Tensor::full(&[dim], param.raw_from_effective(alpha)), param }
    }

    pub fn width(&self) -> usize {
        self.raw.len()
    }

    pub fn effective(&self) -> Vec<f64> {
        self.raw.data().iter().map(|&r| self.param.effective(r)).collect()
    }
}

fn check_pair(op: &'static str, ag: &Tensor, am: &Tensor) -> Result<()> {
    if ag.shape() != am.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", ag.shape(), am.shape())));
    }
    Ok(())
}

/// `A_g + A_m`.
pub fn moe_fuse(ag: &Tensor, am: &Tensor) -> Result<Tensor> {
    check_pair("moe_fuse", ag, am)?;
    let out = ag.data().iter().zip(am.data()).map(|(a, m)| a + m).collect();
    Tensor::new(ag.shape().to_vec(), out)
}

/// `α⊙A_g + (1−α)⊙A_m`, with α broadcast over rows.
pub fn gmoe_fuse(ag: &Tensor, am: &Tensor, gate: &GateVector) -> Result<Tensor> {
    check_pair("gmoe_fuse", ag, am)?;
    let alpha = gate.effective();
    if alpha.len() != ag.last_dim() {
        return Err(Error::shape(
            "gmoe_fuse",
            format!("gate width {} vs feature width {}", alpha.len(), ag.last_dim()),
        ));
    }
    let w = alpha.len();
    let out = ag
        .data()
        .iter()
        .zip(am.data())
        .enumerate()
        .map(|(i, (&a, &m))| kernels::gated_mix(a, m, alpha[i % w]))
        .collect();
    Tensor::new(ag.shape().to_vec(), out)
}

/// Graph form of [`gmoe_fuse`]; the gate is read from parameter `gate_id`.
pub fn gmoe_fuse_node(fwd: &mut Forward, ag: NodeId, am: NodeId, gate_id: &str, param: GateParam) -> Result<NodeId> {
    let raw = fwd.param(gate_id)?;
    let alpha = match param {
        GateParam::Raw => raw,
        GateParam::Sigmoid => fwd.g.sigmoid(raw)?,
    };
    fwd.g.gated_mix(ag, am, alpha)
}

/// Statistics of the effective gate values of one gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub gate: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-gate mean/min/max of effective α.
pub fn gate_summary(gates: &[(String, GateVector)]) -> Vec<GateStats> {
    gates
        .iter()
        .map(|(name, g)| {
            let a = g.effective();
            let n = a.len().max(1) as f64;
            GateStats {
                gate: name.clone(),
                mean: a.iter().sum::<f64>() / n,
                min: a.iter().copied().fold(f64::INFINITY, f64::min),
                max: a.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}
