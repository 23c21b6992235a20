//! A small pre-norm Vision Transformer: patch embedding, encoder blocks,
//! class-token pooling and a linear classification head.

mod checkpoint;
pub(crate) mod forward;

pub use checkpoint::{content_hash, decode_container, encode_container, read_file_hashed, TensorEntry};
pub use forward::{forward_features, patchify, predict, IdentityInjector, Injector};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::rng::{trunc_normal, LabRng};
use crate::numcore::{ParamStore, Tensor};

/// Where the classifier reads its features from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Cls,
    /// Mean over patch tokens (class token and prompts excluded).
    Mean,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_ln_eps() -> f64 {
    1e-6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub pool: Pooling,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

impl BackboneConfig {
    /// The desk-scale model used throughout the tests: 8×8 grayscale,
    /// 4×4 patches, width 16, two blocks.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            in_channels: 1,
            dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 4,
            num_classes,
            pool: Pooling::Cls,
            ln_eps: 1e-6,
        }
    }

    /// ViT-B/16 at 224 px.
    pub fn vit_b(num_classes: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            num_classes,
            pool: Pooling::Cls,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(format!("backbone: {m}")));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail("image_size must be a positive multiple of patch_size");
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail("dim must be a positive multiple of heads");
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return fail("in_channels, num_classes and mlp_ratio must be positive");
        }
        if !(self.ln_eps >= 0.0) {
            return fail("ln_eps must be non-negative");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened patch width `C·p²`.
    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn image_len(&self) -> usize {
        self.in_channels * self.image_size * self.image_size
    }

    /// Named shapes of the encoder (everything except the head), in init order.
    pub fn encoder_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.dim;
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![self.num_patches() + 1, d]),
        ];
        for i in 0..self.depth {
            let p = |s: &str| format!("block.{i}.{s}");
            out.extend([
                (p("ln1.weight"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.qkv.weight"), vec![d, 3 * d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.proj.weight"), vec![d, d]),
                (p("attn.proj.bias"), vec![d]),
                (p("ln2.weight"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.up.weight"), vec![d, self.hidden()]),
                (p("mlp.up.bias"), vec![self.hidden()]),
                (p("mlp.down.weight"), vec![self.hidden(), d]),
                (p("mlp.down.bias"), vec![d]),
            ]);
        }
        out.push(("final_ln.weight".to_string(), vec![d]));
        out.push(("final_ln.bias".to_string(), vec![d]));
        out
    }

    pub fn head_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("head.weight".to_string(), vec![self.dim, self.num_classes]),
            ("head.bias".to_string(), vec![self.num_classes]),
        ]
    }

    /// Named shapes of the full backbone, head included.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = self.encoder_shapes();
        v.extend(self.head_shapes());
        v
    }

    pub fn encoder_count(&self) -> usize {
        self.encoder_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Exact parameter total of the backbone, head included.
pub fn param_count(config: &BackboneConfig) -> usize {
    config.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// Initial value for a named parameter: unit gains, zero biases and class
/// token, truncated-normal (std 0.02) everything else.
pub(crate) fn init_tensor(id: &str, shape: &[usize], rng: &mut LabRng) -> Tensor {
    let leaf = id.rsplit('.').next().unwrap_or(id);
    let is_norm =
        id.contains("ln1.") || id.contains("ln2.") || id.starts_with("final_ln.") || id.contains(".final_ln.");
    if leaf == "bias" || leaf == "cls_token" {
        Tensor::zeros(shape)
    } else if is_norm && leaf == "weight" {
        Tensor::full(shape, 1.0)
    } else {
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|v| *v = trunc_normal(rng, 0.02));
        t
    }
}

/// A configured ViT with its named parameters and a domain label.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub domain_tag: String,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackboneMeta {
    kind: String,
    config: BackboneConfig,
    domain_tag: String,
}

impl Backbone {
    pub fn init(config: BackboneConfig, domain_tag: impl Into<String>, rng: &mut LabRng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (id, shape) in config.param_shapes() {
            let t = init_tensor(&id, &shape, rng);
            params.insert(id, t, true)?;
        }
        Ok(Self { config, domain_tag: domain_tag.into(), params })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Features `[B, D]` for a `[B, C, H, W]` batch.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut fwd = crate::numcore::Forward::new(&self.params, false);
        let f = forward_features(&mut fwd, "", &self.config, batch, None)?;
        Ok(fwd.g.value(f).clone())
    }

    /// Logits `[B, num_classes]` through the backbone's own head.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut fwd = crate::numcore::Forward::new(&self.params, false);
        let f = forward_features(&mut fwd, "", &self.config, batch, None)?;
        let l = predict(&mut fwd, f, "head")?;
        Ok(fwd.g.value(l).clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta =
            BackboneMeta { kind: "backbone".into(), config: self.config.clone(), domain_tag: self.domain_tag.clone() };
        let tensors: Vec<(&str, &Tensor)> = self.params.iter().map(|p| (p.id.as_str(), &p.value)).collect();
        encode_container(&meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors): (BackboneMeta, _) = decode_container(bytes)?;
        if meta.kind != "backbone" {
            return Err(Error::Checkpoint(format!("expected a backbone checkpoint, found {}", meta.kind)));
        }
        meta.config.validate()?;
        let expected = meta.config.param_shapes();
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "backbone needs {} tensors, file has {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut params = ParamStore::new();
        for ((id, shape), (name, t)) in expected.into_iter().zip(tensors) {
            if id != name || shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "unexpected tensor {name} {:?}; wanted {id} {shape:?}",
                    t.shape()
                )));
            }
            params.insert(name, t, true)?;
        }
        Ok(Self { config: meta.config, domain_tag: meta.domain_tag, params })
    }

    /// Write the checkpoint and return its content hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(content_hash(&bytes))
    }

    /// Load a checkpoint and return it with its content hash.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (bytes, hash) = read_file_hashed(path)?;
        Ok((Self::from_bytes(&bytes)?, hash))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng::seeded;

    #[test]
    fn tiny_count_breakdown() {
        let c = BackboneConfig::tiny(3);
        assert_eq!(param_count(&c), 7011);
        assert_eq!(c.encoder_count(), 7011 - 51);
    }

    #[test]
    fn depth_zero_keeps_embeddings_and_head() {
        let mut c = BackboneConfig::tiny(3);
        c.depth = 0;
        assert_eq!(param_count(&c), 272 + 80 + 16 + 32 + 51);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = BackboneConfig::tiny(3);
        c.patch_size = 3;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::tiny(3);
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_conventions() {
        let b = Backbone::init(BackboneConfig::tiny(3), "general", &mut seeded(1)).unwrap();
        assert!(b.params.value("cls_token").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(b.params.value("block.0.ln1.weight").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(b.params.value("head.bias").unwrap().data().iter().all(|&v| v == 0.0));
        let w = b.params.value("block.1.attn.qkv.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        assert!(w.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn pos_embed_and_cls_extents() {
        let b = Backbone::init(BackboneConfig::tiny(3), "general", &mut seeded(1)).unwrap();
        assert_eq!(b.params.value("pos_embed").unwrap().len(), 5 * 16);
        assert_eq!(b.params.value("cls_token").unwrap().len(), 16);
    }
}
