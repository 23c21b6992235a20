use std::path::{Path, PathBuf};

use anyhow::Context;
use vpl_core::adaptation::{build_plan, AdaptationPlan, AdaptedModel, ExpertRef, Fault, Method};
use vpl_core::backbone::{Backbone, BackboneConfig};
use vpl_core::datahub::{
    audit_split, ood_sweep_specs, patient_split, synth_dataset, Dataset, LeakageAudit, Split, SplitFile, SplitName,
    SplitSpec,
};
use vpl_core::gmoe::{gate_summary, GateStats};
use vpl_core::numcore::exec::map_indexed;
use vpl_core::numcore::rng::{seeded, stream};
use vpl_core::numcore::{grad_check_report, Exec, GradCheckOptions, GradCheckReport, Tensor};
use vpl_core::trainlab::{
    evaluate, plan_accounting, pretrain_expert, search_budget, train, Accounting, EvalResult, History, TrainConfig,
};

use crate::config::{load_dataset, sidecar_path, usage, ExperimentConfig};
use crate::report::{self, mean_row, ResultRow};

/// Stream index of the generator that initialises inserted modules.
const INIT_STREAM: u64 = 1;

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..cfg.clone() }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn load_backbone(path: &Path) -> anyhow::Result<(Backbone, String)> {
    Backbone::load(path).with_context(|| format!("loading backbone {}", path.display()))
}

fn check_input_shape(config: &BackboneConfig, data: &Dataset) -> anyhow::Result<()> {
    if config.image_size != data.image_size || config.in_channels != data.channels {
        return Err(usage(format!(
            "backbone expects {}×{}×{} images, data has {}×{}×{}",
            config.in_channels, config.image_size, config.image_size, data.channels, data.image_size, data.image_size
        )));
    }
    Ok(())
}

/// Build, train and evaluate one model. Evaluation covers every non-empty
/// test part of the split.
fn run_cell(
    backbones: &[&Backbone],
    plan: &AdaptationPlan,
    data: &Dataset,
    split: &Split,
    cfg: &TrainConfig,
    exec: Exec,
) -> anyhow::Result<(AdaptedModel, History, Vec<EvalResult>)> {
    let k = data.manifest.num_classes;
    let mut model = build_plan(plan, backbones, k, &mut stream(cfg.seed, INIT_STREAM))?;
    let history = train(&mut model, data, &split.train, cfg, exec)?;
    let mut evals = Vec::new();
    for name in [SplitName::TestSeen, SplitName::TestUnseen] {
        let idx = split.part(name);
        if !idx.is_empty() {
            evals.push(evaluate(&model, data, idx, name.name(), exec)?);
        }
    }
    Ok((model, history, evals))
}

fn pretrained_general(cfg: &ExperimentConfig, seed: u64, exec: Exec) -> anyhow::Result<Backbone> {
    let spec =
        cfg.synthetic().ok_or_else(|| usage("without --backbone the config needs synthetic data to pretrain on"))?;
    let mut spec = spec.clone();
    spec.domain_tag = "general".into();
    let tc = with_seed(cfg.pretrain.as_ref().unwrap_or(&cfg.train), seed);
    Ok(pretrain_expert(&spec, &cfg.backbone, &tc, exec)?.backbone)
}

pub struct PretrainOutcome {
    pub domain_tag: String,
    pub val_accuracy: f64,
    pub final_loss: f64,
    pub sha256: String,
}

pub fn pretrain(
    cfg: &ExperimentConfig,
    domain: &str,
    out: &Path,
    seed: Option<u64>,
    exec: Exec,
) -> anyhow::Result<PretrainOutcome> {
    let mut spec = cfg.synthetic().ok_or_else(|| usage("pretraining needs a synthetic data spec"))?.clone();
    spec.domain_tag = domain.to_string();
    let base = cfg.pretrain.as_ref().unwrap_or(&cfg.train);
    let tc = with_seed(base, seed.unwrap_or(base.seed));
    let done = pretrain_expert(&spec, &cfg.backbone, &tc, exec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let sha256 = done.backbone.save(out)?;
    Ok(PretrainOutcome {
        domain_tag: spec.domain_tag,
        val_accuracy: done.val_accuracy,
        final_loss: done.final_loss,
        sha256,
    })
}

pub struct AdaptArgs<'a> {
    pub method: Method,
    pub backbone: &'a Path,
    pub backbone2: Option<&'a Path>,
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub tasks: usize,
}

pub struct AdaptOutcome {
    pub sha256: String,
    pub history: History,
    pub rows: Vec<ResultRow>,
    pub gates: Vec<GateStats>,
    pub accounting: Accounting,
}

/// Train one plan and write the checkpoint plus `history`, `results` and
/// (for gated plans) `gates` files next to it.
pub fn adapt(cfg: &ExperimentConfig, args: &AdaptArgs, exec: Exec) -> anyhow::Result<AdaptOutcome> {
    let method = args.method;
    match (method.needs_two_backbones(), args.backbone2) {
        (true, None) => return Err(usage(format!("{method} needs --backbone2 (a general and a medical expert)"))),
        (false, Some(_)) => return Err(usage(format!("{method} takes a single backbone; drop --backbone2"))),
        _ => {}
    }
    let mut paths = vec![args.backbone];
    paths.extend(args.backbone2);
    let loaded = paths.iter().map(|p| load_backbone(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let backbones: Vec<&Backbone> = loaded.iter().map(|(b, _)| b).collect();

    let data = cfg.load_data(exec)?;
    check_input_shape(&backbones[0].config, &data)?;
    let spec = cfg.split_or_default(&data.manifest);
    let split = patient_split(&data.manifest, &spec)?;
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let tc = with_seed(&cfg.train, seed);
    let plan = cfg.plan_for(method);

    let (model, history, evals) = run_cell(&backbones, &plan, &data, &split, &tc, exec)?;

    let experts: Vec<ExpertRef> = model
        .experts
        .iter()
        .zip(&loaded)
        .zip(&paths)
        .map(|((info, (_, hash)), path)| ExpertRef {
            role: info.role.clone(),
            domain_tag: info.domain_tag.clone(),
            path: path.to_string_lossy().into_owned(),
            sha256: hash.clone(),
        })
        .collect();
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let sha256 = model.save(args.out, &experts)?;

    let accounting = plan_accounting(&model.config, &plan, model.num_classes(), args.tasks)?;
    let dataset = data.manifest.name.clone();
    let rows: Vec<ResultRow> =
        evals.iter().map(|e| ResultRow::from_eval(method.name(), accounting.multiplier, &dataset, e, seed)).collect();
    let gates = gate_summary(&model.gates());

    report::write(&sibling(args.out, "history.csv"), &history.to_csv())?;
    report::write(&sibling(args.out, "results.csv"), &report::results_csv(&rows)?)?;
    let mut md = report::results_markdown(&rows);
    if !gates.is_empty() {
        report::write(&sibling(args.out, "gates.csv"), &report::gates_csv(&gates)?)?;
        md.push_str("\ngate summary\n\n");
        md.push_str(&report::gates_markdown(&gates));
    }
    report::write(&sibling(args.out, "results.md"), &md)?;
    Ok(AdaptOutcome { sha256, history, rows, gates, accounting })
}

pub struct EvalArgs<'a> {
    pub model: &'a Path,
    pub data: &'a Path,
    pub split: SplitName,
    pub seeds: usize,
    pub seed: Option<u64>,
    pub tasks: usize,
}

pub struct EvalOutcome {
    pub rows: Vec<ResultRow>,
    /// Present when more than one seed was run.
    pub mean: Option<ResultRow>,
}

/// Evaluate a checkpoint on one split part. Each of the `seeds` runs
/// redraws the patient split with seed `base + i`.
pub fn eval(cfg: Option<&ExperimentConfig>, args: &EvalArgs, exec: Exec) -> anyhow::Result<EvalOutcome> {
    if args.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let (model, _, _) = AdaptedModel::load(args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let c = &model.config;
    let data = load_dataset(args.data, model.num_classes(), c.in_channels, c.image_size, exec)?;
    let spec = match cfg.and_then(|c| c.split) {
        Some(s) => s,
        None => SplitSpec::new(data.manifest.patients().len(), 0, 0),
    };
    let base = args.seed.unwrap_or(spec.seed);
    let accounting = plan_accounting(&model.config, &model.plan, model.num_classes(), args.tasks)?;
    let mut rows = Vec::with_capacity(args.seeds);
    for i in 0..args.seeds as u64 {
        let s = SplitSpec { seed: base + i, ..spec };
        let split = patient_split(&data.manifest, &s)?;
        let e = evaluate(&model, &data, split.part(args.split), args.split.name(), exec)?;
        rows.push(ResultRow::from_eval(model.method().name(), accounting.multiplier, &data.manifest.name, &e, s.seed));
    }
    let mean = if rows.len() > 1 { mean_row(&rows) } else { None };
    Ok(EvalOutcome { rows, mean })
}

/// Write the synthetic dataset's manifest and its sidecar spec.
pub fn synth(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<usize> {
    let spec = cfg.synthetic().ok_or_else(|| usage("the config has no synthetic data spec"))?;
    let (manifest, _) = synth_dataset(spec)?;
    report::write(out, &manifest.to_csv()?)?;
    report::write(&sidecar_path(out), &serde_json::to_string_pretty(spec)?)?;
    Ok(manifest.len())
}

pub struct SweepArgs<'a> {
    pub budgets: Vec<f64>,
    pub seeds: usize,
    pub seed: Option<u64>,
    pub tasks: usize,
    pub backbone: Option<&'a Path>,
    pub out: Option<&'a Path>,
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub requested: f64,
    pub achieved: f64,
    pub plan: AdaptationPlan,
    pub per_task_trainable: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendStep {
    pub from: f64,
    pub to: f64,
    pub delta: f64,
    pub ok: bool,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub dataset: String,
    pub rows: Vec<SweepRow>,
    /// Adjacent steps in increasing budget order; `None` for a single budget.
    pub trend: Option<Vec<TrendStep>>,
    pub results: Vec<ResultRow>,
}

/// Allowed drop in mean accuracy between adjacent budgets (one point).
pub const TREND_SLACK: f64 = 0.01;

impl SweepReport {
    pub fn monotone(&self) -> Option<bool> {
        self.trend.as_ref().map(|t| t.iter().all(|s| s.ok))
    }

    pub fn table_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    format!("{:.2}X", r.requested),
                    format!("{:.4}", r.achieved),
                    plan_label(&r.plan),
                    format!("{:.2}", 100.0 * r.mean),
                ]
            })
            .collect()
    }

    pub fn table_header(&self) -> Vec<String> {
        vec!["total_params".into(), "achieved".into(), "plan".into(), self.dataset.clone()]
    }

    pub fn trend_text(&self) -> String {
        match &self.trend {
            None => "single budget: no trend report\n".to_string(),
            Some(steps) => {
                let mut s = String::new();
                for t in steps {
                    let mark = if t.ok { "ok" } else { "DROP" };
                    s.push_str(&format!("{:.2}X -> {:.2}X: {:+.2} points {mark}\n", t.from, t.to, 100.0 * t.delta));
                }
                let verdict = if steps.iter().all(|t| t.ok) { "nondecreasing" } else { "not monotone" };
                s.push_str(&format!("trend: {verdict} (slack {:.0} point)\n", 100.0 * TREND_SLACK));
                s
            }
        }
    }
}

pub fn plan_label(plan: &AdaptationPlan) -> String {
    let h = &plan.hyper;
    match (h.prompt_len, h.bottleneck) {
        (Some(p), _) => format!("{} p={p}", plan.method),
        (_, Some(r)) => format!("{} r={r}", plan.method),
        _ => plan.method.to_string(),
    }
}

fn trend(rows: &[SweepRow]) -> Option<Vec<TrendStep>> {
    if rows.len() < 2 {
        return None;
    }
    let mut order: Vec<&SweepRow> = rows.iter().collect();
    order.sort_by(|a, b| a.requested.total_cmp(&b.requested));
    Some(
        order
            .windows(2)
            .map(|w| {
                let delta = w[1].mean - w[0].mean;
                TrendStep { from: w[0].requested, to: w[1].requested, delta, ok: delta >= -TREND_SLACK }
            })
            .collect(),
    )
}

fn single_backbone(cfg: &ExperimentConfig, path: Option<&Path>, seed: u64, exec: Exec) -> anyhow::Result<Backbone> {
    match path {
        Some(p) => Ok(load_backbone(p)?.0),
        None => pretrained_general(cfg, seed, exec),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Budget rows × seeds; each cell trains its own model on the seen part
/// of the configured split and is scored on `test_seen`.
pub fn sweep_scaling(cfg: &ExperimentConfig, args: &SweepArgs, exec: Exec) -> anyhow::Result<SweepReport> {
    if args.budgets.is_empty() || args.seeds == 0 {
        return Err(usage("need at least one budget and one seed"));
    }
    let base = args.seed.unwrap_or(cfg.train.seed);
    let backbone = single_backbone(cfg, args.backbone, base, exec)?;
    let data = cfg.load_data(exec)?;
    check_input_shape(&backbone.config, &data)?;
    let k = data.manifest.num_classes;
    let split = patient_split(&data.manifest, &cfg.split_or_default(&data.manifest))?;
    if split.test_seen.is_empty() {
        return Err(usage("the split leaves no test_seen samples to score"));
    }
    let choices = args
        .budgets
        .iter()
        .map(|&b| search_budget(&backbone.config, k, args.tasks, b))
        .collect::<vpl_core::Result<Vec<_>>>()?;

    let n = args.seeds;
    let cells = map_indexed(exec, choices.len() * n, |c| {
        let (row, s) = (c / n, (c % n) as u64);
        let tc = with_seed(&cfg.train, base + s);
        run_cell(&[&backbone], &choices[row].plan, &data, &split, &tc, Exec::Sequential).map(|(_, _, e)| e)
    });
    let cells = cells.into_iter().collect::<anyhow::Result<Vec<_>>>()?;

    let dataset = data.manifest.name.clone();
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for (r, choice) in choices.iter().enumerate() {
        let mut accs = Vec::with_capacity(n);
        for s in 0..n {
            let seen = &cells[r * n + s][0];
            accs.push(seen.accuracy);
            let mut row =
                ResultRow::from_eval(choice.plan.method.name(), choice.achieved, &dataset, seen, base + s as u64);
            row.method = plan_label(&choice.plan);
            results.push(row);
        }
        rows.push(SweepRow {
            requested: choice.requested,
            achieved: choice.achieved,
            plan: choice.plan.clone(),
            per_task_trainable: choice.per_task_trainable,
            mean: mean(&accs),
            accuracies: accs,
        });
    }
    let report = SweepReport { trend: trend(&rows), dataset, rows, results };

    if let Some(dir) = args.out {
        let header = report.table_header();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        report::write(&dir.join("sweep_results.csv"), &report::results_csv(&report.results)?)?;
        report::write(&dir.join("sweep_table.csv"), &report::csv_string(&header, &report.table_rows())?)?;
        let md = format!("{}\n{}", report::markdown(&header, &report.table_rows()), report.trend_text());
        report::write(&dir.join("sweep.md"), &md)?;
    }
    Ok(report)
}

pub struct OodArgs<'a> {
    pub mode: u8,
    pub budgets: Option<Vec<f64>>,
    pub seeds: usize,
    pub seed: Option<u64>,
    pub tasks: usize,
    pub backbone: Option<&'a Path>,
    pub splits_only: bool,
    pub out: Option<&'a Path>,
}

#[derive(Clone, Debug)]
pub struct SplitAudit {
    pub spec: SplitSpec,
    pub audit: LeakageAudit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OodCell {
    pub seen: f64,
    pub unseen: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct OodRow {
    pub label: String,
    pub plan: AdaptationPlan,
    pub achieved: f64,
    pub cells: Vec<OodCell>,
}

#[derive(Clone, Debug)]
pub struct OodReport {
    pub mode: u8,
    /// Split settings as `seen/unseen`, in table order.
    pub columns: Vec<String>,
    pub audits: Vec<SplitAudit>,
    /// Empty when only splits were requested.
    pub rows: Vec<OodRow>,
    pub results: Vec<ResultRow>,
}

impl OodReport {
    pub fn all_passed(&self) -> bool {
        self.audits.iter().all(|a| a.audit.passed)
    }

    pub fn table_header(&self) -> Vec<String> {
        let mut h = vec!["total_params".to_string()];
        h.extend(self.columns.iter().cloned());
        h
    }

    /// Cells read `seen / unseen` accuracy in percent.
    pub fn table_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut v = vec![r.label.clone()];
                v.extend(r.cells.iter().map(|c| match c.unseen {
                    Some(u) => format!("{:.2} / {:.2}", 100.0 * c.seen, 100.0 * u),
                    None => format!("{:.2} / -", 100.0 * c.seen),
                }));
                v
            })
            .collect()
    }

    pub fn audit_text(&self) -> String {
        let mut s = String::from("leakage audit\n");
        for a in &self.audits {
            let verdict = if a.audit.passed { "pass".to_string() } else { format!("FAIL {:?}", a.audit.overlap) };
            s.push_str(&format!(
                "  {} seed {}: train patients {}, unseen patients {}, {verdict}\n",
                a.spec.label(),
                a.spec.seed,
                a.audit.train_patients,
                a.audit.unseen_patients
            ));
        }
        s
    }
}

/// Patient-ID sweep: every split setting of `mode` for every seed, audited
/// for leakage; then (unless `splits_only`) one model per row, setting and
/// seed.
pub fn ood(cfg: &ExperimentConfig, args: &OodArgs, exec: Exec) -> anyhow::Result<OodReport> {
    if args.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let base = args.seed.unwrap_or(cfg.train.seed);
    let split_base = cfg.split.map(|s| s.seed).unwrap_or(base);
    let data = cfg.load_data(exec)?;
    let template = cfg.split.unwrap_or_else(|| SplitSpec::new(1, 0, split_base));

    let columns: Vec<String> = ood_sweep_specs(args.mode, 0)?.iter().map(SplitSpec::label).collect();
    let mut audits = Vec::new();
    // splits[setting][seed]
    let mut splits: Vec<Vec<Split>> = vec![Vec::new(); columns.len()];
    for s in 0..args.seeds as u64 {
        for (j, spec) in ood_sweep_specs(args.mode, split_base + s)?.into_iter().enumerate() {
            let spec = SplitSpec { train_fraction_within_seen: template.train_fraction_within_seen, ..spec };
            let split = patient_split(&data.manifest, &spec)?;
            let audit = audit_split(&data.manifest, &split);
            if let Some(dir) = args.out {
                let name =
                    format!("mode{}_{}-{}_seed{}.json", args.mode, spec.seen_patients, spec.unseen_patients, spec.seed);
                let file = SplitFile::new(&data.manifest, &split, &spec);
                report::write(&dir.join("splits").join(name), &serde_json::to_string_pretty(&file)?)?;
            }
            audits.push(SplitAudit { spec, audit });
            splits[j].push(split);
        }
    }

    let mut report = OodReport { mode: args.mode, columns, audits, rows: Vec::new(), results: Vec::new() };
    if !args.splits_only {
        let backbone = single_backbone(cfg, args.backbone, base, exec)?;
        check_input_shape(&backbone.config, &data)?;
        let k = data.manifest.num_classes;
        let plans: Vec<(AdaptationPlan, f64)> = match &args.budgets {
            Some(budgets) => budgets
                .iter()
                .map(|&b| search_budget(&backbone.config, k, args.tasks, b).map(|c| (c.plan, c.achieved)))
                .collect::<vpl_core::Result<_>>()?,
            None => {
                let plan = cfg.plan.clone().unwrap_or_else(|| AdaptationPlan::new(Method::VptShallow));
                let acc = plan_accounting(&backbone.config, &plan, k, args.tasks)?;
                vec![(plan, acc.multiplier)]
            }
        };
        let (cols, n) = (report.columns.len(), args.seeds);
        let per_row = cols * n;
        let cells = map_indexed(exec, plans.len() * per_row, |c| {
            let (r, j, s) = (c / per_row, (c % per_row) / n, c % n);
            let tc = with_seed(&cfg.train, base + s as u64);
            run_cell(&[&backbone], &plans[r].0, &data, &splits[j][s], &tc, Exec::Sequential).map(|(_, _, e)| e)
        });
        let cells = cells.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
        let dataset = data.manifest.name.clone();
        for (r, (plan, achieved)) in plans.iter().enumerate() {
            let mut row_cells = Vec::with_capacity(cols);
            for j in 0..cols {
                let (mut seen, mut unseen) = (Vec::new(), Vec::new());
                for s in 0..n {
                    for e in &cells[r * per_row + j * n + s] {
                        let mut row = ResultRow::from_eval(&plan_label(plan), *achieved, &dataset, e, base + s as u64);
                        row.split = format!("{}:{}", report.columns[j], e.split);
                        report.results.push(row);
                        match e.split.as_str() {
                            "test_seen" => seen.push(e.accuracy),
                            _ => unseen.push(e.accuracy),
                        }
                    }
                }
                row_cells.push(OodCell { seen: mean(&seen), unseen: (!unseen.is_empty()).then(|| mean(&unseen)) });
            }
            report.rows.push(OodRow {
                label: format!("{achieved:.2}X"),
                plan: plan.clone(),
                achieved: *achieved,
                cells: row_cells,
            });
        }
    }

    if let Some(dir) = args.out {
        let header = report.table_header();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let stem = format!("ood_mode{}", args.mode);
        let mut md = report::markdown(&header, &report.table_rows());
        md.push('\n');
        md.push_str(&report.audit_text());
        report::write(&dir.join(format!("{stem}.md")), &md)?;
        report::write(&dir.join(format!("{stem}_table.csv")), &report::csv_string(&header, &report.table_rows())?)?;
        report::write(&dir.join(format!("{stem}_results.csv")), &report::results_csv(&report.results)?)?;
    }
    Ok(report)
}

/// Accounting for each requested method, sorted by multiplier (stable, so
/// equal multipliers keep the input order).
pub fn params(
    config: &BackboneConfig,
    plans: &[AdaptationPlan],
    num_classes: usize,
    tasks: usize,
) -> anyhow::Result<Vec<Accounting>> {
    let mut out =
        plans.iter().map(|p| plan_accounting(config, p, num_classes, tasks)).collect::<vpl_core::Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.multiplier.total_cmp(&b.multiplier));
    Ok(out)
}

pub fn params_rows(acc: &[Accounting]) -> Vec<Vec<String>> {
    acc.iter()
        .map(|a| {
            vec![
                a.method.to_string(),
                a.per_task_trainable.to_string(),
                a.shared_frozen.to_string(),
                a.tasks.to_string(),
                format!("{:.4}", a.multiplier),
            ]
        })
        .collect()
}

pub const PARAMS_HEADER: [&str; 5] = ["method", "per_task_trainable", "shared_frozen", "tasks", "multiplier"];

/// Finite-difference check of `method` on a tiny ViT with random inputs.
/// Zero-initialised trainables are jittered so no gradient path is trivially zero.
pub fn gradcheck(method: Method, tol: f64, fault: bool, seed: u64) -> anyhow::Result<GradCheckReport> {
    let config = BackboneConfig::tiny(3);
    let general = Backbone::init(config.clone(), "general", &mut stream(seed, 10))?;
    let medical = Backbone::init(config.clone(), "medical", &mut stream(seed, 11))?;
    let backbones: Vec<&Backbone> =
        if method.needs_two_backbones() { vec![&general, &medical] } else { vec![&general] };
    let mut rng = stream(seed, 12);
    let mut model = build_plan(&AdaptationPlan::new(method), &backbones, 3, &mut rng)?;
    model.jitter_zero_trainables(&mut rng, 0.1);
    if fault {
        model.inject_fault(Some(Fault::AdapterGradSignFlip));
    }
    let mut data_rng = seeded(seed ^ 0xda7a);
    let x: Vec<f64> =
        (0..2 * config.image_len()).map(|_| 2.0 * vpl_core::numcore::rng::normal(&mut data_rng)).collect();
    let x = Tensor::new(vec![2, 1, config.image_size, config.image_size], x)?;
    let y = [0, 2];
    let opts = GradCheckOptions { tol, ..GradCheckOptions::default() };
    Ok(grad_check_report(&model, |m: &AdaptedModel, fwd| m.loss(fwd, &x, &y), opts)?)
}
