use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor};

/// Residual bottleneck `h + (gelu(h·W_down + b_down))·W_up + b_up` over the
/// last axis of `h`.
pub fn adapter_forward(
    g: &mut Graph,
    h: NodeId,
    down_w: NodeId,
    down_b: NodeId,
    up_w: NodeId,
    up_b: NodeId,
) -> Result<NodeId> {
    let delta = adapter_delta(g, h, down_w, down_b, up_w, up_b)?;
    g.add(h, delta)
}

pub(crate) fn adapter_delta(
    g: &mut Graph,
    h: NodeId,
    down_w: NodeId,
    down_b: NodeId,
    up_w: NodeId,
    up_b: NodeId,
) -> Result<NodeId> {
    if g.shape(down_w).len() != 2 || g.shape(down_w)[1] == 0 {
        return Err(Error::shape("adapter", "bottleneck width must be at least 1"));
    }
    let z = g.matmul(h, down_w)?;
    let z = g.add_trailing(z, down_b)?;
    let z = g.gelu(z)?;
    let u = g.matmul(z, up_w)?;
    g.add_trailing(u, up_b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Prompts enter once, before the first block, and ride along.
    Shallow,
    /// Every block gets its own fresh prompts in the same slots.
    Deep,
}

/// Place prompts `[P, D]` directly after the class token of `tokens [B, T, D]`.
///
/// Insertion (length `T+P`) happens at layer 0; deep prompts at later layers
/// overwrite the `P` slots after the class token, so the previous layer's
/// prompt outputs are dropped from the sequence.
pub fn vpt_inject(g: &mut Graph, tokens: NodeId, prompts: NodeId, layer: usize, mode: PromptMode) -> Result<NodeId> {
    let ts = g.shape(tokens).to_vec();
    let ps = g.shape(prompts).to_vec();
    if ts.len() != 3 || ps.len() != 2 || ps[1] != ts[2] {
        return Err(Error::shape("vpt_inject", format!("tokens {ts:?}, prompts {ps:?}")));
    }
    let (b, t, d) = (ts[0], ts[1], ts[2]);
    let p = ps[0];
    if p == 0 {
        return Err(Error::config("prompt length must be at least 1"));
    }
    if mode == PromptMode::Shallow && layer > 0 {
        return Err(Error::config(format!("shallow prompts are only injected at layer 0, got layer {layer}")));
    }
    let replace = layer > 0;
    if replace && t < 1 + p {
        return Err(Error::shape("vpt_inject", format!("sequence of {t} tokens has no {p} prompt slots")));
    }
    let joined = g.concat(&[tokens, prompts])?;
    let prompt_base = b * t * d;
    let rest_start = if replace { 1 + p } else { 1 };
    let out_t = if replace { t } else { t + p };
    let mut idx = Vec::with_capacity(b * out_t * d);
    for bi in 0..b {
        let row = bi * t * d;
        idx.extend(row..row + d);
        idx.extend(prompt_base..prompt_base + p * d);
        idx.extend(row + rest_start * d..row + t * d);
    }
    g.gather(joined, idx, vec![b, out_t, d])
}

/// `σ(blend)·frozen + (1−σ(blend))·side` with a single-entry `blend`.
pub fn sidetune_forward(g: &mut Graph, frozen: NodeId, side: NodeId, blend: NodeId) -> Result<NodeId> {
    if g.shape(frozen) != g.shape(side) {
        return Err(Error::shape("sidetune", format!("{:?} vs {:?}", g.shape(frozen), g.shape(side))));
    }
    let s = g.sigmoid(blend)?;
    let neg = g.scale(s, -1.0)?;
    let one = g.constant(Tensor::scalar(1.0));
    let rest = g.add(one, neg)?;
    let a = g.scale_by(frozen, s)?;
    let c = g.scale_by(side, rest)?;
    g.add(a, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::kernels::gelu;

    #[test]
    fn adapter_direct_formula() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::new(vec![1, 2], vec![2.0, 5.0]).unwrap());
        let dw = g.constant(Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap());
        let db = g.constant(Tensor::zeros(&[1]));
        let uw = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let ub = g.constant(Tensor::zeros(&[2]));
        let out = adapter_forward(&mut g, h, dw, db, uw, ub).unwrap();
        assert_eq!(g.value(out).data(), &[2.0 + gelu(2.0), 5.0]);
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let h = g.constant(Tensor::new(vec![2, 3, 4], data.clone()).unwrap());
        let dw = g.constant(Tensor::full(&[4, 2], 0.3));
        let db = g.constant(Tensor::full(&[2], 0.1));
        let uw = g.constant(Tensor::zeros(&[2, 4]));
        let ub = g.constant(Tensor::zeros(&[4]));
        let out = adapter_forward(&mut g, h, dw, db, uw, ub).unwrap();
        assert_eq!(g.value(out).data(), data.as_slice());
    }

    fn seq(g: &mut Graph, b: usize, t: usize, d: usize) -> NodeId {
        g.constant(Tensor::new(vec![b, t, d], (0..b * t * d).map(|v| v as f64).collect()).unwrap())
    }

    #[test]
    fn shallow_insertion_shape_law() {
        let mut g = Graph::new();
        let tokens = seq(&mut g, 2, 5, 3);
        let prompts = g.constant(Tensor::full(&[2, 3], -1.0));
        let out = vpt_inject(&mut g, tokens, prompts, 0, PromptMode::Shallow).unwrap();
        assert_eq!(g.shape(out), &[2, 7, 3]);
        let v = g.value(out).data();
        assert_eq!(&v[..3], &[0.0, 1.0, 2.0]);
        assert_eq!(&v[3..9], &[-1.0; 6]);
        assert_eq!(&v[9..12], &[3.0, 4.0, 5.0]);
        assert!(vpt_inject(&mut g, tokens, prompts, 1, PromptMode::Shallow).is_err());
    }

    #[test]
    fn deep_replacement_keeps_length() {
        let mut g = Graph::new();
        let tokens = seq(&mut g, 1, 7, 2);
        let prompts = g.constant(Tensor::full(&[2, 2], 9.0));
        let out = vpt_inject(&mut g, tokens, prompts, 1, PromptMode::Deep).unwrap();
        assert_eq!(g.shape(out), &[1, 7, 2]);
        assert_eq!(g.value(out).data(), &[0.0, 1.0, 9.0, 9.0, 9.0, 9.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, 13.0]);
    }

    #[test]
    fn deep_slots_cut_gradient_to_previous_prompts() {
        let mut g = Graph::new();
        let tokens = seq(&mut g, 1, 3, 2);
        let p0 = g.leaf(Tensor::full(&[1, 2], 0.5), true);
        let p1 = g.leaf(Tensor::full(&[1, 2], 0.7), true);
        let l0 = vpt_inject(&mut g, tokens, p0, 0, PromptMode::Deep).unwrap();
        let l1 = vpt_inject(&mut g, l0, p1, 1, PromptMode::Deep).unwrap();
        let sq = g.mul(l1, l1).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(p0).is_none_or(|v| v.iter().all(|&x| x == 0.0)));
        assert_eq!(grads.get(p1).unwrap(), &[1.4, 1.4]);
    }

    #[test]
    fn empty_prompts_rejected() {
        let mut g = Graph::new();
        let tokens = seq(&mut g, 1, 3, 2);
        let p = g.constant(Tensor::zeros(&[0, 2]));
        assert!(vpt_inject(&mut g, tokens, p, 0, PromptMode::Shallow).is_err());
    }

    #[test]
    fn sidetune_blend_limits() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let s = g.constant(Tensor::new(vec![1, 2], vec![5.0, -1.0]).unwrap());
        let big = g.constant(Tensor::scalar(100.0));
        let out = sidetune_forward(&mut g, f, s, big).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 3.0]);
        let zero = g.constant(Tensor::scalar(0.0));
        let out = sidetune_forward(&mut g, f, s, zero).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 1.0]);
    }
}
