use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::gmoe::{FusionMode, GateParam};

/// Every adaptation strategy the lab can build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Full,
    Linear,
    Mlp3,
    Partial1,
    Sidetune,
    Bias,
    Adapter,
    VptShallow,
    VptDeep,
    MoeAdapter,
    GmoeAdapter,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Full,
        Method::Linear,
        Method::Mlp3,
        Method::Partial1,
        Method::Sidetune,
        Method::Bias,
        Method::Adapter,
        Method::VptShallow,
        Method::VptDeep,
        Method::MoeAdapter,
        Method::GmoeAdapter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Linear => "linear",
            Method::Mlp3 => "mlp3",
            Method::Partial1 => "partial1",
            Method::Sidetune => "sidetune",
            Method::Bias => "bias",
            Method::Adapter => "adapter",
            Method::VptShallow => "vpt-shallow",
            Method::VptDeep => "vpt-deep",
            Method::MoeAdapter => "moe-adapter",
            Method::GmoeAdapter => "gmoe-adapter",
        }
    }

    /// Methods that combine a general and a medical expert backbone.
    pub fn needs_two_backbones(self) -> bool {
        matches!(self, Method::MoeAdapter | Method::GmoeAdapter)
    }

    pub fn valid_names() -> String {
        Method::ALL.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
    }

    fn legal_keys(self) -> &'static [&'static str] {
        match self {
            Method::VptShallow | Method::VptDeep => &["prompt_len"],
            Method::Adapter | Method::MoeAdapter => &["bottleneck"],
            Method::GmoeAdapter => &["bottleneck", "gate_init", "fusion_mode", "gate_param"],
            Method::Sidetune => &["side_width"],
            Method::Mlp3 => &["head_hidden"],
            Method::Full | Method::Linear | Method::Partial1 | Method::Bias => &[],
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let alias = match norm.as_str() {
            "mlp-3" => "mlp3",
            "partial-1" => "partial1",
            "moe" => "moe-adapter",
            "gmoe" => "gmoe-adapter",
            other => other,
        };
        Method::ALL
            .into_iter()
            .find(|m| m.name() == alias)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}; valid methods: {}", Method::valid_names())))
    }
}

/// Method-specific hyperparameters; absent keys take defaults scaled to `D`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bottleneck: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_init: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_mode: Option<FusionMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_param: Option<GateParam>,
}

impl Hyper {
    fn present_keys(&self) -> Vec<&'static str> {
        let mut keys = Vec::new();
        if self.prompt_len.is_some() {
            keys.push("prompt_len");
        }
        if self.bottleneck.is_some() {
            keys.push("bottleneck");
        }
        if self.side_width.is_some() {
            keys.push("side_width");
        }
        if self.head_hidden.is_some() {
            keys.push("head_hidden");
        }
        if self.gate_init.is_some() {
            keys.push("gate_init");
        }
        if self.fusion_mode.is_some() {
            keys.push("fusion_mode");
        }
        if self.gate_param.is_some() {
            keys.push("gate_param");
        }
        keys
    }
}

/// One method plus its hyperparameters, as stored in experiment configs:
/// `{"method": "...", "hyper": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationPlan {
    pub method: Method,
    #[serde(default)]
    pub hyper: Hyper,
}

/// Hyperparameters after defaults are filled in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Resolved {
    pub prompt_len: usize,
    pub bottleneck: usize,
    pub side_width: usize,
    pub head_hidden: usize,
    pub gate_init: f64,
    pub fusion_mode: FusionMode,
    pub gate_param: GateParam,
}

impl Resolved {
    /// Defaults for width `dim`. At ViT-B width (768) these give 8 prompts,
    /// bottleneck 40 and an MLP-3 hidden width of 912.
    pub fn defaults(dim: usize) -> Self {
        Self {
            prompt_len: 8,
            bottleneck: (dim * 5 / 96).max(1),
            side_width: 4 * dim,
            head_hidden: (dim * 19 / 16).max(1),
            gate_init: 0.5,
            fusion_mode: FusionMode::Final,
            gate_param: GateParam::Raw,
        }
    }
}

impl AdaptationPlan {
    pub fn new(method: Method) -> Self {
        Self { method, hyper: Hyper::default() }
    }

    pub fn with_hyper(method: Method, hyper: Hyper) -> Self {
        Self { method, hyper }
    }

    /// Reject keys that do not belong to the method and out-of-range values.
    pub fn validate(&self) -> Result<()> {
        let legal = self.method.legal_keys();
        let illegal: Vec<_> = self.hyper.present_keys().into_iter().filter(|k| !legal.contains(k)).collect();
        if !illegal.is_empty() {
            return Err(Error::config(format!(
                "hyper keys {illegal:?} are not valid for {}; allowed: {legal:?}",
                self.method
            )));
        }
        let h = &self.hyper;
        if h.prompt_len == Some(0) {
            return Err(Error::config("prompt_len must be at least 1"));
        }
        if h.bottleneck == Some(0) || h.side_width == Some(0) || h.head_hidden == Some(0) {
            return Err(Error::config("bottleneck, side_width and head_hidden must be at least 1"));
        }
        if let Some(a) = h.gate_init {
            let sigmoid = h.gate_param == Some(GateParam::Sigmoid);
            if !a.is_finite() || (sigmoid && !(a > 0.0 && a < 1.0)) {
                return Err(Error::config("gate_init must be finite, and inside (0, 1) under sigmoid gates"));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, dim: usize) -> Resolved {
        let d = Resolved::defaults(dim);
        let h = &self.hyper;
        Resolved {
            prompt_len: h.prompt_len.unwrap_or(d.prompt_len),
            bottleneck: h.bottleneck.unwrap_or(d.bottleneck),
            side_width: h.side_width.unwrap_or(d.side_width),
            head_hidden: h.head_hidden.unwrap_or(d.head_hidden),
            gate_init: h.gate_init.unwrap_or(d.gate_init),
            fusion_mode: h.fusion_mode.unwrap_or(d.fusion_mode),
            gate_param: h.gate_param.unwrap_or(d.gate_param),
        }
    }
}

/// Where a parameter of an adapted model comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    /// Copied from expert `expert` under the backbone id `id`.
    Backbone { expert: usize, id: String },
    /// Freshly initialized module parameter.
    Fresh(Init),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    TruncNormal,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutEntry {
    pub id: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub source: Source,
}

impl LayoutEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parameter-name prefixes of the expert streams, in expert order.
pub fn expert_prefixes(method: Method) -> &'static [&'static str] {
    if method.needs_two_backbones() {
        &["general.", "medical."]
    } else {
        &[""]
    }
}

fn backbone_trainable(method: Method, id: &str, depth: usize) -> bool {
    match method {
        Method::Full => true,
        Method::Bias => id.ends_with(".bias"),
        Method::Partial1 => {
            depth > 0 && (id.starts_with(&format!("block.{}.", depth - 1)) || id.starts_with("final_ln."))
        }
        _ => false,
    }
}

fn adapter_entries(prefix: &str, depth: usize, d: usize, r: usize) -> Vec<LayoutEntry> {
    let mut out = Vec::new();
    for i in 0..depth {
        let p = format!("{prefix}adapter.{i}");
        let mk = |name: &str, shape: Vec<usize>, init| LayoutEntry {
            id: format!("{p}.{name}"),
            shape,
            trainable: true,
            source: Source::Fresh(init),
        };
        out.push(mk("down.weight", vec![d, r], Init::TruncNormal));
        out.push(mk("down.bias", vec![r], Init::Zeros));
        out.push(mk("up.weight", vec![r, d], Init::Zeros));
        out.push(mk("up.bias", vec![d], Init::Zeros));
    }
    out
}

fn fresh(id: impl Into<String>, shape: Vec<usize>, init: Init) -> LayoutEntry {
    LayoutEntry { id: id.into(), shape, trainable: true, source: Source::Fresh(init) }
}

/// Full parameter listing of an adapted model for `config` (the encoder
/// shape) and a task with `num_classes` classes. No tensors are allocated,
/// so this also serves ViT-B-sized accounting.
pub fn layout(config: &BackboneConfig, plan: &AdaptationPlan, num_classes: usize) -> Result<Vec<LayoutEntry>> {
    plan.validate()?;
    config.validate()?;
    if num_classes == 0 {
        return Err(Error::config("num_classes must be positive"));
    }
    let method = plan.method;
    if method == Method::Partial1 && config.depth == 0 {
        return Err(Error::config("partial1 needs at least one block"));
    }
    let r = plan.resolve(config.dim);
    let d = config.dim;
    let mut out = Vec::new();
    for (expert, prefix) in expert_prefixes(method).iter().enumerate() {
        for (id, shape) in config.encoder_shapes() {
            out.push(LayoutEntry {
                id: format!("{prefix}{id}"),
                trainable: backbone_trainable(method, &id, config.depth),
                shape,
                source: Source::Backbone { expert, id },
            });
        }
    }
    let mut head_in = d;
    match method {
        Method::Adapter => out.extend(adapter_entries("", config.depth, d, r.bottleneck)),
        Method::MoeAdapter | Method::GmoeAdapter => {
            for prefix in expert_prefixes(method) {
                out.extend(adapter_entries(prefix, config.depth, d, r.bottleneck));
            }
            if method == Method::GmoeAdapter {
                let init = Init::Constant(r.gate_param.raw_from_effective(r.gate_init));
                match r.fusion_mode {
                    FusionMode::Final => out.push(fresh("gate.final", vec![d], init)),
                    FusionMode::PerBlock => {
                        for i in 0..config.depth {
                            out.push(fresh(format!("gate.{i}"), vec![d], init));
                        }
                    }
                }
            }
        }
        Method::VptShallow => out.push(fresh("prompt.shallow", vec![r.prompt_len, d], Init::TruncNormal)),
        Method::VptDeep => {
            for i in 0..config.depth {
                out.push(fresh(format!("prompt.deep.{i}"), vec![r.prompt_len, d], Init::TruncNormal));
            }
        }
        Method::Mlp3 => {
            let h = r.head_hidden;
            out.push(fresh("mlp3.0.weight", vec![d, h], Init::TruncNormal));
            out.push(fresh("mlp3.0.bias", vec![h], Init::Zeros));
            out.push(fresh("mlp3.1.weight", vec![h, h], Init::TruncNormal));
            out.push(fresh("mlp3.1.bias", vec![h], Init::Zeros));
            head_in = h;
        }
        Method::Sidetune => {
            let w = r.side_width;
            out.push(fresh("side.fc1.weight", vec![d, w], Init::TruncNormal));
            out.push(fresh("side.fc1.bias", vec![w], Init::Zeros));
            out.push(fresh("side.fc2.weight", vec![w, d], Init::TruncNormal));
            out.push(fresh("side.fc2.bias", vec![d], Init::Zeros));
            out.push(fresh("side.blend", vec![1], Init::Zeros));
        }
        Method::Full | Method::Linear | Method::Partial1 | Method::Bias => {}
    }
    out.push(fresh("head.weight", vec![head_in, num_classes], Init::TruncNormal));
    out.push(fresh("head.bias", vec![num_classes], Init::Zeros));
    Ok(out)
}

/// Per-task trainable parameter count of a plan, computed from shapes only.
pub fn trainable_count_for(config: &BackboneConfig, plan: &AdaptationPlan, num_classes: usize) -> Result<usize> {
    Ok(layout(config, plan, num_classes)?.iter().filter(|e| e.trainable).map(LayoutEntry::numel).sum())
}
