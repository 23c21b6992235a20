use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::modules::{adapter_delta, sidetune_forward, vpt_inject, PromptMode};
use super::plan::{expert_prefixes, layout, AdaptationPlan, Init, Method, Resolved, Source};
use crate::backbone::forward::{embed_tokens, pool, run_blocks};
use crate::backbone::{
    content_hash, decode_container, encode_container, predict, read_file_hashed, Backbone, BackboneConfig, Injector,
};
use crate::error::{Error, Result};
use crate::gmoe::{gmoe_fuse_node, FusionMode, GateVector};
use crate::numcore::rng::{trunc_normal, LabRng};
use crate::numcore::{Forward, HasParams, NodeId, ParamGrads, ParamStore, Tensor};

/// One frozen backbone inside an adapted model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertInfo {
    /// `"backbone"` for single-backbone plans, else `"general"` / `"medical"`.
    pub role: String,
    pub domain_tag: String,
}

/// Where an expert backbone was loaded from, stored inside adapted checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertRef {
    pub role: String,
    pub domain_tag: String,
    pub path: String,
    pub sha256: String,
}

/// Deliberate defects used to prove the gradient checker can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Adapter outputs pass values through but send negated gradients back.
    AdapterGradSignFlip,
}

/// A plan applied to one or two backbones: frozen and thawed backbone
/// parameters, inserted modules and a fresh task head in one store.
#[derive(Clone, Debug)]
pub struct AdaptedModel {
    pub plan: AdaptationPlan,
    /// Encoder shape; `num_classes` is the task's class count.
    pub config: BackboneConfig,
    pub experts: Vec<ExpertInfo>,
    pub params: ParamStore,
    fault: Option<Fault>,
}

impl HasParams for AdaptedModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

fn same_shape(a: &BackboneConfig, b: &BackboneConfig) -> bool {
    let mut b = b.clone();
    b.num_classes = a.num_classes;
    *a == b
}

/// Order backbones as (general, medical) for two-expert plans.
fn assign_roles<'b>(method: Method, backbones: &[&'b Backbone]) -> Result<Vec<(&'b Backbone, String)>> {
    let want = expert_prefixes(method).len();
    if backbones.len() != want {
        return Err(Error::config(format!("{method} needs {want} backbone(s), got {}", backbones.len())));
    }
    if want == 1 {
        return Ok(vec![(backbones[0], "backbone".to_string())]);
    }
    let (a, b) = (backbones[0], backbones[1]);
    if a.domain_tag == b.domain_tag {
        return Err(Error::config(format!(
            "{method} needs two backbones with distinct domain tags, both are {:?}",
            a.domain_tag
        )));
    }
    if !same_shape(&a.config, &b.config) {
        return Err(Error::config("expert backbones have different configurations"));
    }
    let (g, m) = if a.domain_tag == "medical" || b.domain_tag == "general" { (b, a) } else { (a, b) };
    Ok(vec![(g, "general".to_string()), (m, "medical".to_string())])
}

fn fresh_tensor(init: Init, shape: &[usize], rng: &mut LabRng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Constant(c) => Tensor::full(shape, c),
        Init::TruncNormal => {
            let mut t = Tensor::zeros(shape);
            t.data_mut().iter_mut().for_each(|v| *v = trunc_normal(rng, 0.02));
            t
        }
    }
}

/// Apply `plan` to the given backbone(s) for a task with `num_classes`
/// classes. Two-expert plans take the general and medical backbones in
/// either order; roles follow the domain tags.
pub fn build_plan(
    plan: &AdaptationPlan,
    backbones: &[&Backbone],
    num_classes: usize,
    rng: &mut LabRng,
) -> Result<AdaptedModel> {
    plan.validate()?;
    let roles = assign_roles(plan.method, backbones)?;
    let mut config = roles[0].0.config.clone();
    config.num_classes = num_classes;
    let entries = layout(&config, plan, num_classes)?;
    let mut params = ParamStore::new();
    for e in entries {
        let value = match &e.source {
            Source::Backbone { expert, id } => roles[*expert].0.params.value(id)?.clone(),
            Source::Fresh(init) => fresh_tensor(*init, &e.shape, rng),
        };
        params.insert(e.id, value, e.trainable)?;
    }
    let experts =
        roles.iter().map(|(b, role)| ExpertInfo { role: role.clone(), domain_tag: b.domain_tag.clone() }).collect();
    Ok(AdaptedModel { plan: plan.clone(), config, experts, params, fault: None })
}

/// Adapters after each block, prompt injection before each block, and
/// optional capture of every block's output.
struct PlanHooks<'h> {
    adapter_prefix: Option<&'h str>,
    prompts: Option<PromptMode>,
    capture: Option<Vec<NodeId>>,
    fault: Option<Fault>,
}

impl Injector for PlanHooks<'_> {
    fn before_block(&mut self, fwd: &mut Forward, layer: usize, tokens: NodeId) -> Result<NodeId> {
        match self.prompts {
            Some(PromptMode::Shallow) if layer == 0 => {
                let p = fwd.param("prompt.shallow")?;
                vpt_inject(&mut fwd.g, tokens, p, 0, PromptMode::Shallow)
            }
            Some(PromptMode::Deep) => {
                let p = fwd.param(&format!("prompt.deep.{layer}"))?;
                vpt_inject(&mut fwd.g, tokens, p, layer, PromptMode::Deep)
            }
            _ => Ok(tokens),
        }
    }

    fn after_block(&mut self, fwd: &mut Forward, layer: usize, tokens: NodeId) -> Result<NodeId> {
        let mut out = tokens;
        if let Some(prefix) = self.adapter_prefix {
            let p = format!("{prefix}adapter.{layer}");
            let dw = fwd.param(&format!("{p}.down.weight"))?;
            let db = fwd.param(&format!("{p}.down.bias"))?;
            let uw = fwd.param(&format!("{p}.up.weight"))?;
            let ub = fwd.param(&format!("{p}.up.bias"))?;
            let mut delta = adapter_delta(&mut fwd.g, tokens, dw, db, uw, ub)?;
            if self.fault == Some(Fault::AdapterGradSignFlip) {
                delta = fwd.g.grad_reverse(delta)?;
            }
            out = fwd.g.add(tokens, delta)?;
        }
        if let Some(c) = self.capture.as_mut() {
            c.push(out);
        }
        Ok(out)
    }
}

impl AdaptedModel {
    pub fn method(&self) -> Method {
        self.plan.method
    }

    pub fn resolved(&self) -> Resolved {
        self.plan.resolve(self.config.dim)
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    /// Replace all-zero trainable tensors (adapter up-projections, biases,
    /// heads) with small Gaussian values, so a gradient check exercises
    /// every path instead of the degenerate zero-init point.
    pub fn jitter_zero_trainables(&mut self, rng: &mut LabRng, std: f64) {
        for p in self.params.iter_mut() {
            if p.trainable && p.value.data().iter().all(|&v| v == 0.0) {
                p.value.data_mut().iter_mut().for_each(|v| *v = std * crate::numcore::rng::normal(rng));
            }
        }
    }

    /// Sum of value sizes over trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.trainable_numel()
    }

    pub fn trainable_ids(&self) -> Vec<&str> {
        self.params.trainable_ids()
    }

    /// Hash over every frozen parameter.
    pub fn frozen_digest(&self) -> String {
        self.params.digest(|p| !p.trainable)
    }

    pub fn trainable_digest(&self) -> String {
        self.params.digest(|p| p.trainable)
    }

    /// Current gates of a GMoE model (empty for every other method).
    pub fn gates(&self) -> Vec<(String, GateVector)> {
        let param = self.resolved().gate_param;
        self.params
            .iter()
            .filter(|p| p.id.starts_with("gate."))
            .map(|p| (p.id.clone(), GateVector { raw: p.value.clone(), param }))
            .collect()
    }

    /// One expert stream: encoder with its own adapters, pooled to `[B, D]`.
    fn expert_features(&self, fwd: &mut Forward, prefix: &str, batch: &Tensor, adapters: bool) -> Result<NodeId> {
        let mut hooks =
            PlanHooks { adapter_prefix: adapters.then_some(prefix), prompts: None, capture: None, fault: self.fault };
        let tokens = embed_tokens(fwd, prefix, &self.config, batch)?;
        let x = run_blocks(fwd, prefix, &self.config, tokens, Some(&mut hooks))?;
        pool(fwd, prefix, &self.config, x)
    }

    /// Pooled features of each block's output, final layer norm applied.
    fn per_block_features(&self, fwd: &mut Forward, prefix: &str, batch: &Tensor) -> Result<Vec<NodeId>> {
        let mut hooks = PlanHooks {
            adapter_prefix: Some(prefix),
            prompts: None,
            capture: Some(Vec::with_capacity(self.config.depth)),
            fault: self.fault,
        };
        let tokens = embed_tokens(fwd, prefix, &self.config, batch)?;
        run_blocks(fwd, prefix, &self.config, tokens, Some(&mut hooks))?;
        let captured = hooks.capture.take().unwrap_or_default();
        captured.into_iter().map(|t| pool(fwd, prefix, &self.config, t)).collect()
    }

    fn mlp_layer(fwd: &mut Forward, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = fwd.param(&format!("{prefix}.weight"))?;
        let b = fwd.param(&format!("{prefix}.bias"))?;
        let y = fwd.g.matmul(x, w)?;
        let y = fwd.g.add_trailing(y, b)?;
        fwd.g.gelu(y)
    }

    /// Features that enter the task head.
    pub fn head_input(&self, fwd: &mut Forward, batch: &Tensor) -> Result<NodeId> {
        let r = self.resolved();
        match self.plan.method {
            Method::Full | Method::Linear | Method::Partial1 | Method::Bias => {
                self.expert_features(fwd, "", batch, false)
            }
            Method::Adapter => self.expert_features(fwd, "", batch, true),
            Method::VptShallow | Method::VptDeep => {
                let mode = if self.plan.method == Method::VptShallow { PromptMode::Shallow } else { PromptMode::Deep };
                let mut hooks = PlanHooks { adapter_prefix: None, prompts: Some(mode), capture: None, fault: None };
                let tokens = embed_tokens(fwd, "", &self.config, batch)?;
                let x = run_blocks(fwd, "", &self.config, tokens, Some(&mut hooks))?;
                pool(fwd, "", &self.config, x)
            }
            Method::Mlp3 => {
                let f = self.expert_features(fwd, "", batch, false)?;
                let h = Self::mlp_layer(fwd, f, "mlp3.0")?;
                Self::mlp_layer(fwd, h, "mlp3.1")
            }
            Method::Sidetune => {
                let frozen = self.expert_features(fwd, "", batch, false)?;
                let side = self.side_features(fwd, batch)?;
                let blend = fwd.param("side.blend")?;
                sidetune_forward(&mut fwd.g, frozen, side, blend)
            }
            Method::MoeAdapter => {
                let ag = self.expert_features(fwd, "general.", batch, true)?;
                let am = self.expert_features(fwd, "medical.", batch, true)?;
                fwd.g.add(ag, am)
            }
            Method::GmoeAdapter => match r.fusion_mode {
                FusionMode::Final => {
                    let ag = self.expert_features(fwd, "general.", batch, true)?;
                    let am = self.expert_features(fwd, "medical.", batch, true)?;
                    gmoe_fuse_node(fwd, ag, am, "gate.final", r.gate_param)
                }
                FusionMode::PerBlock => {
                    let gs = self.per_block_features(fwd, "general.", batch)?;
                    let ms = self.per_block_features(fwd, "medical.", batch)?;
                    let mut acc: Option<NodeId> = None;
                    for (i, (ag, am)) in gs.into_iter().zip(ms).enumerate() {
                        let fused = gmoe_fuse_node(fwd, ag, am, &format!("gate.{i}"), r.gate_param)?;
                        acc = Some(match acc {
                            Some(a) => fwd.g.add(a, fused)?,
                            None => fused,
                        });
                    }
                    let acc = acc.ok_or_else(|| Error::config("per_block fusion needs at least one block"))?;
                    fwd.g.scale(acc, 1.0 / self.config.depth as f64)
                }
            },
        }
    }

    /// Side network on mean-pooled (frozen) patch embeddings.
    fn side_features(&self, fwd: &mut Forward, batch: &Tensor) -> Result<NodeId> {
        let patches = crate::backbone::patchify(batch, &self.config)?;
        let patches = fwd.g.constant(patches);
        let w = fwd.param("patch_embed.weight")?;
        let b = fwd.param("patch_embed.bias")?;
        let e = fwd.g.matmul(patches, w)?;
        let e = fwd.g.add_trailing(e, b)?;
        let pooled = fwd.g.mean_middle(e)?;
        let h = Self::mlp_layer(fwd, pooled, "side.fc1")?;
        let w2 = fwd.param("side.fc2.weight")?;
        let b2 = fwd.param("side.fc2.bias")?;
        let y = fwd.g.matmul(h, w2)?;
        fwd.g.add_trailing(y, b2)
    }

    /// Logits `[B, num_classes]` as a graph node.
    pub fn forward(&self, fwd: &mut Forward, batch: &Tensor) -> Result<NodeId> {
        let f = self.head_input(fwd, batch)?;
        predict(fwd, f, "head")
    }

    /// Mean cross-entropy over the batch as a graph node.
    pub fn loss(&self, fwd: &mut Forward, batch: &Tensor, labels: &[usize]) -> Result<NodeId> {
        let logits = self.forward(fwd, batch)?;
        fwd.g.cross_entropy(logits, labels)
    }

    /// Logits without gradient tracking.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut fwd = Forward::new(&self.params, false);
        let l = self.forward(&mut fwd, batch)?;
        Ok(fwd.g.value(l).clone())
    }

    /// Loss value and gradients of every trainable parameter (store order).
    pub fn loss_and_grads(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, ParamGrads)> {
        let mut fwd = Forward::new(&self.params, true);
        let loss = self.loss(&mut fwd, batch, labels)?;
        let mut grads = fwd.g.backward(loss)?;
        let value = fwd.g.value(loss).data()[0];
        Ok((value, fwd.param_grads(&mut grads)))
    }

    /// Parameters written to an adapted checkpoint: everything except frozen
    /// backbone weights, which are referenced by expert checkpoint instead.
    fn owned_ids(&self) -> Result<Vec<String>> {
        Ok(layout(&self.config, &self.plan, self.config.num_classes)?
            .into_iter()
            .filter(|e| e.trainable || matches!(e.source, Source::Fresh(_)))
            .map(|e| e.id)
            .collect())
    }

    pub fn to_bytes(&self, experts: &[ExpertRef]) -> Result<Vec<u8>> {
        if experts.len() != self.experts.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} expert(s), {} reference(s) given",
                self.experts.len(),
                experts.len()
            )));
        }
        let meta = AdaptedMeta {
            kind: "adapted".into(),
            plan: self.plan.clone(),
            config: self.config.clone(),
            experts: experts.to_vec(),
        };
        let ids = self.owned_ids()?;
        let mut tensors = Vec::with_capacity(ids.len());
        for id in &ids {
            tensors.push((id.as_str(), self.params.value(id)?));
        }
        encode_container(&meta, &tensors)
    }

    /// Write the checkpoint and return its content hash.
    pub fn save(&self, path: &Path, experts: &[ExpertRef]) -> Result<String> {
        let bytes = self.to_bytes(experts)?;
        std::fs::write(path, &bytes)?;
        Ok(content_hash(&bytes))
    }

    /// Load an adapted checkpoint, re-reading its expert backbones and
    /// verifying their hashes. Relative expert paths are tried as given and
    /// then next to the checkpoint.
    pub fn load(path: &Path) -> Result<(Self, Vec<ExpertRef>, String)> {
        let (bytes, hash) = read_file_hashed(path)?;
        let (meta, tensors): (AdaptedMeta, Vec<(String, Tensor)>) = decode_container(&bytes)?;
        if meta.kind != "adapted" {
            return Err(Error::Checkpoint(format!("expected an adapted checkpoint, found {}", meta.kind)));
        }
        let mut backbones = Vec::with_capacity(meta.experts.len());
        for r in &meta.experts {
            let p = resolve_ref(path, &r.path);
            let (b, h) = Backbone::load(&p)?;
            if h != r.sha256 {
                return Err(Error::Checkpoint(format!(
                    "expert {} at {} has hash {h}, checkpoint expects {}",
                    r.role,
                    p.display(),
                    r.sha256
                )));
            }
            backbones.push(b);
        }
        let refs: Vec<&Backbone> = backbones.iter().collect();
        let mut model = build_plan(&meta.plan, &refs, meta.config.num_classes, &mut crate::numcore::rng::seeded(0))?;
        if !same_shape(&model.config, &meta.config) {
            return Err(Error::Checkpoint("expert configuration differs from the stored one".into()));
        }
        let owned = model.owned_ids()?;
        if owned.len() != tensors.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", owned.len(), tensors.len())));
        }
        for (want, (name, t)) in owned.iter().zip(tensors) {
            let slot = model
                .params
                .get_mut(&name)
                .filter(|_| *want == name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}; wanted {want}")))?;
            if slot.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}", t.shape())));
            }
            slot.value = t;
        }
        Ok((model, meta.experts, hash))
    }
}

fn resolve_ref(ckpt: &Path, stored: &str) -> PathBuf {
    let p = PathBuf::from(stored);
    if p.is_absolute() || p.exists() {
        return p;
    }
    ckpt.parent().map(|d| d.join(&p)).unwrap_or(p)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdaptedMeta {
    kind: String,
    plan: AdaptationPlan,
    config: BackboneConfig,
    experts: Vec<ExpertRef>,
}
