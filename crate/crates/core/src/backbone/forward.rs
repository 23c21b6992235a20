use super::{BackboneConfig, Pooling};
use crate::error::{Error, Result};
use crate::numcore::{Forward, NodeId, Tensor};

/// Hook points around each encoder block. Tokens are `[B, T, D]` nodes.
///
/// `before_block` at layer 0 may change the sequence length (prompt
/// insertion); every other hook must preserve the shape it receives.
pub trait Injector {
    fn before_block(&mut self, _fwd: &mut Forward, _layer: usize, tokens: NodeId) -> Result<NodeId> {
        Ok(tokens)
    }

    fn after_block(&mut self, _fwd: &mut Forward, _layer: usize, tokens: NodeId) -> Result<NodeId> {
        Ok(tokens)
    }
}

pub struct IdentityInjector;

impl Injector for IdentityInjector {}

/// `[B, C, H, W]` images to `[B, N, C·p²]` patch rows, patches in raster order.
pub fn patchify(batch: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(Error::shape(
            "patchify",
            format!("batch {s:?} does not match [B, {}, {}, {}]", cfg.in_channels, cfg.image_size, cfg.image_size),
        ));
    }
    let (b, c, hw, p, grid) = (s[0], cfg.in_channels, cfg.image_size, cfg.patch_size, cfg.grid());
    let pd = cfg.patch_dim();
    let n = cfg.num_patches();
    let src = batch.data();
    let mut out = vec![0.0; b * n * pd];
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                let row = (bi * n + gy * grid + gx) * pd;
                let mut k = 0;
                for ci in 0..c {
                    for dy in 0..p {
                        let y = gy * p + dy;
                        let base = ((bi * c + ci) * hw + y) * hw + gx * p;
                        out[row + k..row + k + p].copy_from_slice(&src[base..base + p]);
                        k += p;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, n, pd], out)
}

fn linear(fwd: &mut Forward, x: NodeId, prefix: &str) -> Result<NodeId> {
    let w = fwd.param(&format!("{prefix}.weight"))?;
    let b = fwd.param(&format!("{prefix}.bias"))?;
    let y = fwd.g.matmul(x, w)?;
    fwd.g.add_trailing(y, b)
}

fn layer_norm(fwd: &mut Forward, x: NodeId, prefix: &str, eps: f64) -> Result<NodeId> {
    let w = fwd.param(&format!("{prefix}.weight"))?;
    let b = fwd.param(&format!("{prefix}.bias"))?;
    fwd.g.layer_norm(x, w, b, eps)
}

/// Multi-head self-attention over `[B, T, D]`.
fn attention(fwd: &mut Forward, x: NodeId, prefix: &str, cfg: &BackboneConfig) -> Result<NodeId> {
    let s = fwd.g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let qkv = linear(fwd, x, &format!("{prefix}.qkv"))?;
    let split = |part: usize| -> Vec<usize> {
        let mut idx = Vec::with_capacity(b * t * d);
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    let base = (bi * t + ti) * 3 * d + part * d + hi * dh;
                    idx.extend(base..base + dh);
                }
            }
        }
        idx
    };
    let q = fwd.g.gather(qkv, split(0), vec![b * h, t, dh])?;
    let k = fwd.g.gather(qkv, split(1), vec![b * h, t, dh])?;
    let v = fwd.g.gather(qkv, split(2), vec![b * h, t, dh])?;
    let scores = fwd.g.batch_matmul(q, k, true)?;
    let scores = fwd.g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = fwd.g.softmax(scores)?;
    let ctx = fwd.g.batch_matmul(attn, v, false)?;
    let mut merge = Vec::with_capacity(b * t * d);
    for bi in 0..b {
        for ti in 0..t {
            for hi in 0..h {
                let base = ((bi * h + hi) * t + ti) * dh;
                merge.extend(base..base + dh);
            }
        }
    }
    let merged = fwd.g.gather(ctx, merge, vec![b, t, d])?;
    linear(fwd, merged, &format!("{prefix}.proj"))
}

fn block(fwd: &mut Forward, x: NodeId, prefix: &str, cfg: &BackboneConfig) -> Result<NodeId> {
    let h = layer_norm(fwd, x, &format!("{prefix}.ln1"), cfg.ln_eps)?;
    let a = attention(fwd, h, &format!("{prefix}.attn"), cfg)?;
    let x = fwd.g.add(x, a)?;
    let h = layer_norm(fwd, x, &format!("{prefix}.ln2"), cfg.ln_eps)?;
    let up = linear(fwd, h, &format!("{prefix}.mlp.up"))?;
    let act = fwd.g.gelu(up)?;
    let down = linear(fwd, act, &format!("{prefix}.mlp.down"))?;
    fwd.g.add(x, down)
}

fn check_tokens(fwd: &Forward, tokens: NodeId, want: &[usize], allow_len_change: bool, where_: &str) -> Result<()> {
    let s = fwd.g.shape(tokens);
    let ok = s.len() == 3 && s[0] == want[0] && s[2] == want[2] && (allow_len_change || s[1] == want[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::shape("injector", format!("{where_} returned {s:?}, expected {want:?}")))
    }
}

/// Class-token (or mean-pooled) features `[B, D]` after the final layer norm.
///
/// `prefix` selects a parameter namespace (e.g. `"general."`), so several
/// backbones can share one [`Forward`].
pub fn forward_features(
    fwd: &mut Forward,
    prefix: &str,
    cfg: &BackboneConfig,
    batch: &Tensor,
    injector: Option<&mut dyn Injector>,
) -> Result<NodeId> {
    let tokens = embed_tokens(fwd, prefix, cfg, batch)?;
    let x = run_blocks(fwd, prefix, cfg, tokens, injector)?;
    pool(fwd, prefix, cfg, x)
}

/// Patch embedding, class token and positional embedding: `[B, N+1, D]`.
pub(crate) fn embed_tokens(fwd: &mut Forward, prefix: &str, cfg: &BackboneConfig, batch: &Tensor) -> Result<NodeId> {
    let patches = patchify(batch, cfg)?;
    let b = patches.shape()[0];
    let (n, d) = (cfg.num_patches(), cfg.dim);
    let patches = fwd.g.constant(patches);
    let emb = linear(fwd, patches, &format!("{prefix}patch_embed"))?;
    let cls = fwd.param(&format!("{prefix}cls_token"))?;
    let joined = fwd.g.concat(&[cls, emb])?;
    let mut idx = Vec::with_capacity(b * (n + 1) * d);
    for bi in 0..b {
        idx.extend(0..d);
        idx.extend(d + bi * n * d..d + (bi + 1) * n * d);
    }
    let seq = fwd.g.gather(joined, idx, vec![b, n + 1, d])?;
    let pos = fwd.param(&format!("{prefix}pos_embed"))?;
    fwd.g.add_trailing(seq, pos)
}

/// Encoder blocks with hooks; returns the last block's tokens.
pub(crate) fn run_blocks(
    fwd: &mut Forward,
    prefix: &str,
    cfg: &BackboneConfig,
    mut x: NodeId,
    mut injector: Option<&mut dyn Injector>,
) -> Result<NodeId> {
    for layer in 0..cfg.depth {
        if let Some(inj) = injector.as_deref_mut() {
            let want = fwd.g.shape(x).to_vec();
            x = inj.before_block(fwd, layer, x)?;
            check_tokens(fwd, x, &want, layer == 0, "before_block")?;
        }
        x = block(fwd, x, &format!("{prefix}block.{layer}"), cfg)?;
        if let Some(inj) = injector.as_deref_mut() {
            let want = fwd.g.shape(x).to_vec();
            x = inj.after_block(fwd, layer, x)?;
            check_tokens(fwd, x, &want, false, "after_block")?;
        }
    }
    Ok(x)
}

/// Final layer norm then pooling to `[B, D]`.
pub(crate) fn pool(fwd: &mut Forward, prefix: &str, cfg: &BackboneConfig, x: NodeId) -> Result<NodeId> {
    let x = layer_norm(fwd, x, &format!("{prefix}final_ln"), cfg.ln_eps)?;
    pool_normed(fwd, cfg, x)
}

pub(crate) fn pool_normed(fwd: &mut Forward, cfg: &BackboneConfig, x: NodeId) -> Result<NodeId> {
    let s = fwd.g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    match cfg.pool {
        Pooling::Cls => {
            let idx = (0..b).flat_map(|bi| bi * t * d..bi * t * d + d).collect();
            fwd.g.gather(x, idx, vec![b, d])
        }
        Pooling::Mean => {
            let n = cfg.num_patches();
            let idx = (0..b).flat_map(|bi| (bi * t + t - n) * d..(bi + 1) * t * d).collect();
            let patches = fwd.g.gather(x, idx, vec![b, n, d])?;
            fwd.g.mean_middle(patches)
        }
    }
}

/// Affine head `features · W + b` using parameters `{head}.weight` / `{head}.bias`.
pub fn predict(fwd: &mut Forward, features: NodeId, head: &str) -> Result<NodeId> {
    let w = fwd.param(&format!("{head}.weight"))?;
    let fw = fwd.g.shape(features).last().copied().unwrap_or(0);
    if fwd.g.shape(w)[0] != fw {
        return Err(Error::shape("predict", format!("head expects width {}, features have {fw}", fwd.g.shape(w)[0])));
    }
    linear(fwd, features, head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;
    use crate::numcore::rng::seeded;

    #[test]
    fn patchify_orders_raster() {
        let mut cfg = BackboneConfig::tiny(2);
        cfg.image_size = 4;
        cfg.patch_size = 2;
        let img = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn wrong_batch_shape_rejected() {
        let b = Backbone::init(BackboneConfig::tiny(3), "general", &mut seeded(0)).unwrap();
        assert!(b.features(&Tensor::zeros(&[2, 1, 6, 6])).is_err());
    }

    struct Widen;
    impl Injector for Widen {
        fn after_block(&mut self, fwd: &mut Forward, _l: usize, t: NodeId) -> Result<NodeId> {
            let s = fwd.g.shape(t).to_vec();
            let idx = (0..s[0] * s[1] * (s[2] - 1)).collect();
            fwd.g.gather(t, idx, vec![s[0], s[1], s[2] - 1])
        }
    }

    #[test]
    fn injector_width_change_rejected() {
        let b = Backbone::init(BackboneConfig::tiny(3), "general", &mut seeded(0)).unwrap();
        let mut fwd = Forward::new(&b.params, false);
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        let r = forward_features(&mut fwd, "", &b.config, &x, Some(&mut Widen));
        assert!(r.is_err());
    }
}
