use super::train::{evaluate, train, TrainConfig};
use crate::adaptation::{build_plan, AdaptationPlan, Method};
use crate::backbone::{Backbone, BackboneConfig};
use crate::datahub::{synth_dataset, Dataset, SyntheticDomainSpec};
use crate::error::{Error, Result};
use crate::numcore::exec::Exec;
use crate::numcore::rng::{label_seed, stream};
use crate::numcore::ParamStore;

/// Outcome of [`pretrain_expert`].
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub backbone: Backbone,
    pub val_accuracy: f64,
    pub final_loss: f64,
}

/// Train a fresh backbone end to end on a synthetic domain. Every fifth
/// sample is held out for validation; the domain tag is the spec's.
pub fn pretrain_expert(
    domain: &SyntheticDomainSpec,
    config: &BackboneConfig,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<Pretrained> {
    let mut config = config.clone();
    config.num_classes = domain.num_classes;
    if domain.image_size != config.image_size || domain.in_channels != config.in_channels {
        return Err(Error::config("synthetic domain image shape does not match the backbone"));
    }
    let (manifest, source) = synth_dataset(domain)?;
    let data = Dataset::from_synthetic(manifest, &source, exec)?;
    let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|i| i % 5 != 4);

    let mut rng = stream(cfg.seed ^ label_seed(&domain.domain_tag), 0);
    let init = Backbone::init(config.clone(), domain.domain_tag.clone(), &mut rng)?;
    let mut model = build_plan(&AdaptationPlan::new(Method::Full), &[&init], domain.num_classes, &mut rng)?;
    let history = train(&mut model, &data, &train_idx, cfg, exec)?;
    let val = evaluate(&model, &data, &val_idx, "val", exec)?;

    let mut params = ParamStore::new();
    for (id, _) in config.param_shapes() {
        params.insert(id.clone(), model.params.value(&id)?.clone(), true)?;
    }
    Ok(Pretrained {
        backbone: Backbone { config, domain_tag: domain.domain_tag.clone(), params },
        val_accuracy: val.accuracy,
        final_loss: history.final_loss().unwrap_or(f64::NAN),
    })
}
