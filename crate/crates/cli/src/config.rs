use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vpl_core::adaptation::{AdaptationPlan, Method};
use vpl_core::backbone::BackboneConfig;
use vpl_core::datahub::{
    load_manifest, synth_dataset, Dataset, DatasetManifest, SplitSpec, SyntheticDomainSpec, SyntheticSource,
};
use vpl_core::numcore::Exec;
use vpl_core::trainlab::TrainConfig;

/// JSON schema of [`ExperimentConfig`], also printed by `vpl schema`.
pub const SCHEMA: &str = include_str!("../schema/experiment.schema.json");

/// A usage or configuration problem; maps to exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticDomainSpec),
    /// A manifest CSV; `synth:<i>` refs need a sidecar spec next to it.
    Manifest {
        path: PathBuf,
        num_classes: usize,
    },
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Everything one experiment needs, as a single JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<AdaptationPlan>,
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainConfig,
    /// Training settings for `pretrain`; falls back to `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let DataSource::Manifest { path: p, .. } = &mut cfg.data {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let wrap = |e: vpl_core::Error| usage(format!("invalid config: {e}"));
        self.backbone.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if let Some(p) = &self.pretrain {
            p.validate().map_err(wrap)?;
        }
        if let Some(plan) = &self.plan {
            plan.validate().map_err(wrap)?;
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate().map_err(wrap)?;
            if spec.image_size != self.backbone.image_size || spec.in_channels != self.backbone.in_channels {
                return Err(usage("invalid config: synthetic image shape does not match the backbone input"));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match &self.data {
            DataSource::Synthetic(s) => s.num_classes,
            DataSource::Manifest { num_classes, .. } => *num_classes,
        }
    }

    /// The configured plan when it is for `method`, else the method's defaults.
    pub fn plan_for(&self, method: Method) -> AdaptationPlan {
        match &self.plan {
            Some(p) if p.method == method => p.clone(),
            _ => AdaptationPlan::new(method),
        }
    }

    /// The configured split, or every patient seen with none held out.
    pub fn split_or_default(&self, manifest: &DatasetManifest) -> SplitSpec {
        self.split.unwrap_or_else(|| SplitSpec::new(manifest.patients().len(), 0, self.train.seed))
    }

    pub fn synthetic(&self) -> Option<&SyntheticDomainSpec> {
        match &self.data {
            DataSource::Synthetic(s) => Some(s),
            DataSource::Manifest { .. } => None,
        }
    }

    pub fn load_data(&self, exec: Exec) -> anyhow::Result<Dataset> {
        match &self.data {
            DataSource::Synthetic(spec) => {
                let (manifest, source) = synth_dataset(spec)?;
                Ok(Dataset::from_synthetic(manifest, &source, exec)?)
            }
            DataSource::Manifest { path, num_classes } => {
                load_dataset(path, *num_classes, self.backbone.in_channels, self.backbone.image_size, exec)
            }
        }
    }
}

/// `data.csv` → `data.synth.json`.
pub fn sidecar_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("synth.json")
}

/// Load a manifest and decode its images. File refs resolve next to the
/// manifest; synthetic refs use the sidecar spec when present.
pub fn load_dataset(
    manifest: &Path,
    num_classes: usize,
    channels: usize,
    image_size: usize,
    exec: Exec,
) -> anyhow::Result<Dataset> {
    let m = load_manifest(manifest, num_classes)?;
    let sidecar = sidecar_path(manifest);
    let source = if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar)?;
        let spec: SyntheticDomainSpec = serde_json::from_str(&text)
            .map_err(|e| usage(format!("invalid synthetic sidecar {}: {e}", sidecar.display())))?;
        Some(SyntheticSource::new(spec)?)
    } else {
        None
    };
    let base = manifest.parent().unwrap_or(Path::new("."));
    Ok(Dataset::materialize(m, channels, image_size, base, source.as_ref(), exec)?)
}
