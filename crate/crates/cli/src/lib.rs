//! `vpl`: experiment runner for the adaptation lab. Each subcommand maps to
//! one function in [`commands`] so tests can drive them without a process.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use vpl_core::adaptation::Method;
use vpl_core::backbone::BackboneConfig;
use vpl_core::datahub::SplitName;
use vpl_core::numcore::Exec;

use crate::commands::{AdaptArgs, EvalArgs, OodArgs, SweepArgs};
use crate::config::{usage, ExperimentConfig, Usage};

#[derive(Parser, Debug)]
#[command(name = "vpl", version, about = "Vision transformer adaptation lab")]
pub struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Domain {
    General,
    Medical,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Tiny,
    VitB,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain an expert backbone on a synthetic domain.
    Pretrain {
        #[arg(long, value_enum)]
        domain: Domain,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adapt one or two pretrained backbones to the configured task.
    Adapt {
        #[arg(long)]
        method: String,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        backbone2: Option<PathBuf>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        tasks: usize,
    },
    /// Evaluate an adapted checkpoint on one part of a patient split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Manifest CSV; synthetic refs read `<name>.synth.json` beside it.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test_seen")]
        split: String,
        /// Split definition; without it every patient is seen.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        tasks: usize,
        /// Also write the rows as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tunable-parameter budget sweep.
    SweepScaling {
        #[arg(long, value_delimiter = ',', required = true)]
        budgets: Vec<f64>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        tasks: usize,
        /// Output directory; defaults to the config's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Patient-ID out-of-distribution sweep.
    Ood {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        mode: u8,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<f64>>,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        tasks: usize,
        /// Generate and audit the splits without training.
        #[arg(long)]
        splits_only: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-task trainable count and Total-Params multiplier.
    Params {
        /// A method name or `all`.
        #[arg(long)]
        method: String,
        #[arg(long)]
        tasks: usize,
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "vit-b")]
        preset: Preset,
        /// Class count of each task head; defaults to the backbone's.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Finite-difference gradient check of one method on a tiny ViT.
    Gradcheck {
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Write the configured synthetic dataset as a manifest plus sidecar spec.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the experiment config JSON schema.
    Schema,
}

fn parse_method(s: &str) -> anyhow::Result<Method> {
    s.parse::<Method>().map_err(|e| usage(e.to_string()))
}

/// 2 for usage and configuration errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<vpl_core::Error>() {
            return if e.is_usage() { 2 } else { 1 };
        }
    }
    1
}

/// Execute a parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match cli.command {
        Command::Pretrain { domain, config, out: path, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let name = match domain {
                Domain::General => "general",
                Domain::Medical => "medical",
            };
            let r = commands::pretrain(&cfg, name, &path, seed, exec)?;
            writeln!(
                out,
                "domain_tag={} val_accuracy={:.6} final_loss={:.6}",
                r.domain_tag, r.val_accuracy, r.final_loss
            )?;
            writeln!(out, "checkpoint={} sha256={}", path.display(), r.sha256)?;
        }
        Command::Adapt { method, backbone, backbone2, config, out: path, seed, tasks } => {
            let method = parse_method(&method)?;
            let cfg = ExperimentConfig::load(&config)?;
            let args =
                AdaptArgs { method, backbone: &backbone, backbone2: backbone2.as_deref(), out: &path, seed, tasks };
            let r = commands::adapt(&cfg, &args, exec)?;
            write!(out, "{}", report::results_markdown(&r.rows))?;
            if !r.gates.is_empty() {
                write!(out, "\ngate summary\n\n{}", report::gates_markdown(&r.gates))?;
            }
            writeln!(
                out,
                "trainable={} multiplier={:.4} final_loss={:.6}",
                r.accounting.per_task_trainable,
                r.accounting.multiplier,
                r.history.final_loss().unwrap_or(f64::NAN)
            )?;
            writeln!(out, "checkpoint={} sha256={}", path.display(), r.sha256)?;
        }
        Command::Eval { model, data, split, config, seeds, seed, tasks, out: csv_out } => {
            let split = SplitName::parse(&split)?;
            let cfg = config.as_deref().map(ExperimentConfig::load).transpose()?;
            let args = EvalArgs { model: &model, data: &data, split, seeds, seed, tasks };
            let r = commands::eval(cfg.as_ref(), &args, exec)?;
            let mut rows = r.rows.clone();
            rows.extend(r.mean.clone());
            write!(out, "{}", report::results_csv(&rows)?)?;
            if let Some(p) = csv_out {
                report::write(&p, &report::results_csv(&rows)?)?;
            }
        }
        Command::SweepScaling { budgets, config, backbone, seeds, seed, tasks, out: dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = dir.unwrap_or_else(|| cfg.output_dir.clone());
            let args = SweepArgs { budgets, seeds, seed, tasks, backbone: backbone.as_deref(), out: Some(&dir) };
            let r = commands::sweep_scaling(&cfg, &args, exec)?;
            let header = r.table_header();
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            write!(out, "{}\n{}", report::markdown(&header, &r.table_rows()), r.trend_text())?;
        }
        Command::Ood { mode, config, budgets, backbone, seeds, seed, tasks, splits_only, out: dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = dir.unwrap_or_else(|| cfg.output_dir.clone());
            let args = OodArgs {
                mode,
                budgets,
                seeds,
                seed,
                tasks,
                backbone: backbone.as_deref(),
                splits_only,
                out: Some(&dir),
            };
            let r = commands::ood(&cfg, &args, exec)?;
            let header = r.table_header();
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            write!(out, "{}\n{}", report::markdown(&header, &r.table_rows()), r.audit_text())?;
            if !r.all_passed() {
                anyhow::bail!("leakage audit failed");
            }
        }
        Command::Params { method, tasks, config, preset, classes } => {
            let (backbone, cfg) = match config {
                Some(p) => {
                    let cfg = ExperimentConfig::load(&p)?;
                    (cfg.backbone.clone(), Some(cfg))
                }
                None => match preset {
                    Preset::Tiny => (BackboneConfig::tiny(2), None),
                    Preset::VitB => (BackboneConfig::vit_b(50), None),
                },
            };
            let methods =
                if method.eq_ignore_ascii_case("all") { Method::ALL.to_vec() } else { vec![parse_method(&method)?] };
            let plans: Vec<_> = methods
                .into_iter()
                .map(|m| match &cfg {
                    Some(c) => c.plan_for(m),
                    None => vpl_core::adaptation::AdaptationPlan::new(m),
                })
                .collect();
            let k = classes.unwrap_or(backbone.num_classes);
            let acc = commands::params(&backbone, &plans, k, tasks)?;
            write!(out, "{}", report::markdown(&commands::PARAMS_HEADER, &commands::params_rows(&acc)))?;
            if acc.len() > 1 {
                let order: Vec<String> = acc.iter().map(|a| a.method.to_string()).collect();
                writeln!(out, "sorted: {}", order.join(" <= "))?;
            }
        }
        Command::Gradcheck { method, tol, seed, inject_fault } => {
            let method = parse_method(&method)?;
            let r = commands::gradcheck(method, tol, inject_fault, seed)?;
            for p in &r.params {
                let mark = if p.max_rel_err <= r.tol { "ok" } else { "FAIL" };
                writeln!(out, "{:<32} entries={:<5} max_rel_err={:.3e} {mark}", p.id, p.entries, p.max_rel_err)?;
            }
            writeln!(
                out,
                "method={method} params={} max_rel_err={:.3e} tol={:e}",
                r.params.len(),
                r.max_rel_err(),
                r.tol
            )?;
            r.into_result()?;
        }
        Command::Synth { config, out: path } => {
            let cfg = ExperimentConfig::load(&config)?;
            let n = commands::synth(&cfg, &path)?;
            writeln!(out, "wrote {n} rows to {} and {}", path.display(), config::sidecar_path(&path).display())?;
        }
        Command::Schema => write!(out, "{}", config::SCHEMA)?,
    }
    Ok(())
}
