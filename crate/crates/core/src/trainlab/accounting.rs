use serde::{Deserialize, Serialize};

use crate::adaptation::{layout, AdaptationPlan, Hyper, Method, Source};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};

/// `(shared_frozen + Σ per-task owned) / backbone_ref`.
pub fn total_params_multiplier(shared_frozen: usize, per_task_owned: &[usize], backbone_ref: usize) -> Result<f64> {
    if per_task_owned.is_empty() {
        return Err(Error::config("task count must be at least 1"));
    }
    if backbone_ref == 0 {
        return Err(Error::config("reference backbone size must be positive"));
    }
    let owned: usize = per_task_owned.iter().sum();
    Ok((shared_frozen + owned) as f64 / backbone_ref as f64)
}

/// Parameter bookkeeping of one plan repeated over `tasks` tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub method: Method,
    /// Trainable parameters of one task's model.
    pub per_task_trainable: usize,
    /// Frozen backbone parameters stored once for all tasks.
    pub shared_frozen: usize,
    /// Encoder size of one backbone, head excluded.
    pub backbone_ref: usize,
    pub tasks: usize,
    pub multiplier: f64,
}

/// Accounting from shapes alone. Each task owns its trainable parameters;
/// one frozen encoder copy is shared by all tasks unless the plan thaws
/// everything (Full), in which case nothing is shared. Two-expert plans
/// still count a single shared encoder, matching the reference tables.
pub fn plan_accounting(
    config: &BackboneConfig,
    plan: &AdaptationPlan,
    num_classes: usize,
    tasks: usize,
) -> Result<Accounting> {
    if tasks == 0 {
        return Err(Error::config("task count must be at least 1"));
    }
    let entries = layout(config, plan, num_classes)?;
    let per_task_trainable: usize = entries.iter().filter(|e| e.trainable).map(|e| e.numel()).sum();
    let any_frozen = entries.iter().any(|e| !e.trainable && matches!(e.source, Source::Backbone { .. }));
    let backbone_ref = config.encoder_count();
    let shared_frozen = if any_frozen { backbone_ref } else { 0 };
    let multiplier = total_params_multiplier(shared_frozen, &vec![per_task_trainable; tasks], backbone_ref)?;
    Ok(Accounting { method: plan.method, per_task_trainable, shared_frozen, backbone_ref, tasks, multiplier })
}

/// Budget realised by [`search_budget`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetChoice {
    pub requested: f64,
    pub plan: AdaptationPlan,
    pub per_task_trainable: usize,
    pub achieved: f64,
}

/// Nearest achievable multiplier to `budget`: first shallow prompt lengths
/// `1..=4·(N+1)`, then adapter bottlenecks `1..=4·D`. Ties keep the earlier
/// candidate, so the result is deterministic.
pub fn search_budget(config: &BackboneConfig, num_classes: usize, tasks: usize, budget: f64) -> Result<BudgetChoice> {
    if !(budget >= 1.0) || !budget.is_finite() {
        return Err(Error::config(format!("budget {budget} must be a finite multiplier of at least 1")));
    }
    let max_prompts = 4 * (config.num_patches() + 1);
    let candidates =
        (1..=max_prompts)
            .map(|p| AdaptationPlan::with_hyper(Method::VptShallow, Hyper { prompt_len: Some(p), ..Hyper::default() }))
            .chain((1..=4 * config.dim).map(|r| {
                AdaptationPlan::with_hyper(Method::Adapter, Hyper { bottleneck: Some(r), ..Hyper::default() })
            }));
    let mut best: Option<BudgetChoice> = None;
    for plan in candidates {
        let acc = plan_accounting(config, &plan, num_classes, tasks)?;
        let better = best.as_ref().is_none_or(|b| (acc.multiplier - budget).abs() < (b.achieved - budget).abs());
        if better {
            best = Some(BudgetChoice {
                requested: budget,
                plan,
                per_task_trainable: acc.per_task_trainable,
                achieved: acc.multiplier,
            });
        }
    }
    best.ok_or_else(|| Error::config("no candidate plans"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lower_bound_with_head_only() {
        let c = BackboneConfig::tiny(3);
        let a = plan_accounting(&c, &AdaptationPlan::new(Method::Linear), 3, 1).unwrap();
        assert_eq!(a.per_task_trainable, 51);
        assert_eq!(a.multiplier, 1.0 + 51.0 / c.encoder_count() as f64);
    }

    #[test]
    fn full_shares_nothing() {
        let c = BackboneConfig::tiny(3);
        let a = plan_accounting(&c, &AdaptationPlan::new(Method::Full), 3, 2).unwrap();
        assert_eq!(a.shared_frozen, 0);
        assert_eq!(a.per_task_trainable, 7011);
    }

    #[test]
    fn zero_tasks_rejected() {
        let c = BackboneConfig::tiny(3);
        assert!(plan_accounting(&c, &AdaptationPlan::new(Method::Full), 3, 0).is_err());
        assert!(total_params_multiplier(10, &[], 10).is_err());
    }

    #[test]
    fn tiny_budgets_within_tenth_of_excess() {
        let c = BackboneConfig::tiny(2);
        for b in [1.01, 1.02, 1.05, 1.10, 1.17, 1.39] {
            let ch = search_budget(&c, 2, 1, b).unwrap();
            assert!(((ch.achieved - b) / (b - 1.0)).abs() < 0.1, "{b}: {ch:?}");
        }
    }
}
