//! Training loop, metrics, parameter accounting and toy expert pretraining.

mod accounting;
mod metrics;
mod optim;
mod pretrain;
mod train;

pub use accounting::{plan_accounting, search_budget, total_params_multiplier, Accounting, BudgetChoice};
pub use metrics::{accuracy, argmax_rows, auroc, auroc_macro, EvalResult};
pub use optim::{Optimizer, OptimizerKind};
pub use pretrain::{pretrain_expert, Pretrained};
pub use train::{batch_gradients, evaluate, predict_logits, train, History, HistoryRecord, TrainConfig};
