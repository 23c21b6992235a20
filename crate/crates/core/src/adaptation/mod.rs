//! The adaptation catalog: which backbone parameters thaw, which modules are
//! inserted, and the resulting trainable model.

mod model;
mod modules;
mod plan;

pub use model::{build_plan, AdaptedModel, ExpertInfo, ExpertRef, Fault};
pub use modules::{adapter_forward, sidetune_forward, vpt_inject, PromptMode};
pub use plan::{
    expert_prefixes, layout, trainable_count_for, AdaptationPlan, Hyper, Init, LayoutEntry, Method, Resolved, Source,
};
