//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. `cargo test --release -p vpl-cli --test acceptance` keeps the
//! training criteria well inside their time limits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use vpl_cli::commands::{self, OodArgs, SweepArgs};
use vpl_cli::config::{DataSource, ExperimentConfig};
use vpl_core::adaptation::{build_plan, AdaptationPlan, Method};
use vpl_core::backbone::{Backbone, BackboneConfig};
use vpl_core::datahub::{patient_split, synth_dataset, Dataset, SplitSpec, SyntheticDomainSpec};
use vpl_core::gmoe::{gmoe_fuse, moe_fuse, FusionMode, GateParam, GateVector};
use vpl_core::numcore::rng::{seeded, stream};
use vpl_core::numcore::{Exec, Tensor};
use vpl_core::trainlab::{auroc, evaluate, pretrain_expert, train, TrainConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap()
}

fn gate_identities() -> Outcome {
    let t = Instant::now();
    let mut rng = seeded(2024);
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    for case in 0..2000 {
        let d = rng.random_range(1..=64);
        let rows = rng.random_range(1..=4);
        let ag = random_tensor(&mut rng, &[rows, d]);
        let am = random_tensor(&mut rng, &[rows, d]);
        let one = gmoe_fuse(&ag, &am, &GateVector::constant(d, 1.0, GateParam::Raw)).unwrap();
        let zero = gmoe_fuse(&ag, &am, &GateVector::constant(d, 0.0, GateParam::Raw)).unwrap();
        check(bits(&one) == bits(&ag), format!("case {case}: alpha=1 is not A_g"))?;
        check(bits(&zero) == bits(&am), format!("case {case}: alpha=0 is not A_m"))?;

        let alpha: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let gate = GateVector { raw: Tensor::new(vec![d], alpha).unwrap(), param: GateParam::Raw };
        let fixed = gmoe_fuse(&ag, &ag, &gate).unwrap();
        check(bits(&fixed) == bits(&ag), format!("case {case}: equal experts moved under alpha"))?;

        let half = gmoe_fuse(&ag, &am, &GateVector::constant(d, 0.5, GateParam::Raw)).unwrap();
        let sum = moe_fuse(&ag, &am).unwrap();
        let halved: Vec<u64> = sum.data().iter().map(|v| (0.5 * v).to_bits()).collect();
        check(bits(&half) == halved, format!("case {case}: half gate differs from half sum"))?;
    }
    let el = t.elapsed();
    within(el, Duration::from_secs(1))?;
    Ok("2000 instances, D <= 64, bitwise".into())
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    for m in Method::ALL {
        let r = commands::gradcheck(m, 1e-4, false, 0).map_err(|e| format!("{m}: {e:#}"))?;
        check(r.passed(), format!("{m}: max rel err {:.3e}", r.max_rel_err()))?;
        worst = worst.max(r.max_rel_err());
    }
    within(t.elapsed(), Duration::from_secs(120))?;
    Ok(format!("11 methods, worst rel err {worst:.2e}"))
}

fn expert(tag: &str, seed: u64) -> Backbone {
    let spec = SyntheticDomainSpec { noise_std: 1.0, samples: 400, ..SyntheticDomainSpec::separable(tag, seed) };
    let tc = TrainConfig { steps: 150, batch_size: 16, learning_rate: 3e-3, seed: 1, ..TrainConfig::default() };
    pretrain_expert(&spec, &BackboneConfig::tiny(2), &tc, Exec::default()).unwrap().backbone
}

fn dataset(spec: &SyntheticDomainSpec) -> Dataset {
    let (m, s) = synth_dataset(spec).unwrap();
    Dataset::from_synthetic(m, &s, Exec::default()).unwrap()
}

fn freeze_suite() -> Outcome {
    let t = Instant::now();
    let bc = BackboneConfig::tiny(2);
    let g = Backbone::init(bc.clone(), "general", &mut stream(3, 10)).unwrap();
    let md = Backbone::init(bc, "medical", &mut stream(3, 11)).unwrap();
    let data = dataset(&SyntheticDomainSpec { noise_std: 0.5, ..SyntheticDomainSpec::separable("general", 5) });
    let idx: Vec<usize> = (0..data.len()).collect();
    let tc = TrainConfig { steps: 50, batch_size: 16, learning_rate: 3e-3, seed: 0, ..TrainConfig::default() };
    for m in Method::ALL {
        let bbs: Vec<&Backbone> = if m.needs_two_backbones() { vec![&g, &md] } else { vec![&g] };
        let mut model = build_plan(&AdaptationPlan::new(m), &bbs, 2, &mut stream(0, 1)).unwrap();
        let before: Vec<(String, bool, Vec<u64>)> = model
            .params
            .iter()
            .map(|p| (p.id.clone(), p.trainable, p.value.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        train(&mut model, &data, &idx, &tc, Exec::default()).map_err(|e| format!("{m}: {e}"))?;
        let mut changed = 0;
        for (p, (id, trainable, old)) in model.params.iter().zip(&before) {
            let same = p.value.data().iter().map(|v| v.to_bits()).eq(old.iter().copied());
            if *trainable {
                changed += usize::from(!same);
            } else {
                check(same, format!("{m}: frozen {id} changed"))?;
            }
        }
        check(changed > 0, format!("{m}: no trainable tensor moved"))?;
    }
    within(t.elapsed(), Duration::from_secs(120))?;
    Ok("11 methods x 50 steps".into())
}

fn accounting() -> Outcome {
    let bc = BackboneConfig::vit_b(50);
    let plans: Vec<AdaptationPlan> = Method::ALL.iter().map(|&m| AdaptationPlan::new(m)).collect();
    let acc = commands::params(&bc, &plans, 50, 19).map_err(|e| e.to_string())?;
    let by: BTreeMap<String, (f64, usize)> =
        acc.iter().map(|a| (a.method.to_string(), (a.multiplier, a.per_task_trainable))).collect();
    let mult = |m: Method| by[&m.to_string()].0;
    let full = mult(Method::Full);
    let linear = mult(Method::Linear);
    check((full - 19.01).abs() <= 0.01, format!("full {full:.4}"))?;
    check((linear - 1.01).abs() <= 0.005, format!("linear {linear:.4}"))?;

    use Method::*;
    let chain = [
        (Linear, VptShallow, true),
        (VptShallow, VptDeep, false),
        (VptDeep, Bias, true),
        (Bias, Adapter, true),
        (Adapter, MoeAdapter, true),
        (MoeAdapter, GmoeAdapter, true),
        (GmoeAdapter, Mlp3, false),
        (Mlp3, Partial1, true),
        (Partial1, Full, true),
    ];
    for (a, b, strict) in chain {
        let ok = if strict { mult(a) < mult(b) } else { mult(a) <= mult(b) };
        check(ok, format!("{a} {:.4} vs {b} {:.4}", mult(a), mult(b)))?;
    }
    let r = AdaptationPlan::new(GmoeAdapter).resolve(bc.dim);
    let gates = match r.fusion_mode {
        FusionMode::Final => 1,
        FusionMode::PerBlock => bc.depth,
    };
    let delta = by["gmoe-adapter"].1 - by["moe-adapter"].1;
    check(delta == gates * bc.dim, format!("gmoe - moe = {delta}, want {}", gates * bc.dim))?;
    Ok(format!("full {full:.4}X, linear {linear:.4}X, gmoe - moe = {delta}"))
}

fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn metric_oracle() -> Outcome {
    let worked = auroc(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false]).map_err(|e| e.to_string())?;
    check(worked == 0.75, format!("worked case {worked}"))?;
    let mut rng = seeded(77);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 500 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let got = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        let diff = (got - brute_auroc(&scores, &labels)).abs();
        check(diff <= 1e-12, format!("instance {done}: diff {diff:e}"))?;
        worst = worst.max(diff);
        done += 1;
    }
    Ok(format!("500 tied instances, worst diff {worst:.1e}"))
}

fn run_task(bbs: &[&Backbone], m: Method, data: &Dataset, tc: &TrainConfig, seed: u64) -> f64 {
    let split = patient_split(&data.manifest, &SplitSpec::new(data.manifest.patients().len(), 0, 1)).unwrap();
    let tc = TrainConfig { seed, ..tc.clone() };
    let mut model = build_plan(&AdaptationPlan::new(m), bbs, 2, &mut stream(seed, 1)).unwrap();
    train(&mut model, data, &split.train, &tc, Exec::default()).unwrap();
    evaluate(&model, data, &split.test_seen, "test_seen", Exec::default()).unwrap().accuracy
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_scale() -> Outcome {
    let t = Instant::now();
    let g = expert("general", 23);
    let md = expert("medical", 29);
    let tc = TrainConfig { steps: 500, batch_size: 16, learning_rate: 3e-3, seed: 0, ..TrainConfig::default() };
    let separable = dataset(&SyntheticDomainSpec::separable("general", 41));
    let mut lowest = (f64::INFINITY, String::new());
    for m in Method::ALL {
        let bbs: Vec<&Backbone> = if m.needs_two_backbones() { vec![&g, &md] } else { vec![&g] };
        for seed in 0..3 {
            let acc = run_task(&bbs, m, &separable, &tc, seed);
            check(acc >= 0.95, format!("{m} seed {seed}: separable accuracy {acc:.4}"))?;
            if acc < lowest.0 {
                lowest = (acc, format!("{m}"));
            }
        }
    }
    let mixed = dataset(&SyntheticDomainSpec {
        noise_std: 1.0,
        samples: 2000,
        patient_count: 40,
        per_patient_shift_std: 0.3,
        ..SyntheticDomainSpec::separable("mixed", 43)
    });
    let seeds =
        |bbs: &[&Backbone], m: Method| mean(&(0..3).map(|s| run_task(bbs, m, &mixed, &tc, s)).collect::<Vec<_>>());
    let on_g = seeds(&[&g], Method::Adapter);
    let on_m = seeds(&[&md], Method::Adapter);
    let gmoe = seeds(&[&g, &md], Method::GmoeAdapter);
    let bar = on_g.max(on_m) - 0.02;
    check(gmoe >= bar, format!("mixed: gmoe {gmoe:.4} < {bar:.4} (general {on_g:.4}, medical {on_m:.4})"))?;
    within(t.elapsed(), Duration::from_secs(600))?;
    Ok(format!(
        "separable min {:.3} ({}); mixed gmoe {gmoe:.4} vs adapter general {on_g:.4} / medical {on_m:.4}",
        lowest.0, lowest.1
    ))
}

fn scaling_trend() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("general.ckpt");
    let pre = SyntheticDomainSpec { noise_std: 1.0, samples: 400, ..SyntheticDomainSpec::separable("general", 23) };
    let ptc = TrainConfig { steps: 150, batch_size: 16, learning_rate: 3e-3, seed: 1, ..TrainConfig::default() };
    let bc = BackboneConfig::tiny(2);
    pretrain_expert(&pre, &bc, &ptc, Exec::default()).unwrap().backbone.save(&ckpt).map_err(|e| e.to_string())?;
    let task = SyntheticDomainSpec {
        class_mean_scale: 4.0,
        noise_std: 1.5,
        patient_count: 40,
        per_patient_shift_std: 0.5,
        samples: 4000,
        ..SyntheticDomainSpec::separable("general", 23)
    };
    let cfg = ExperimentConfig {
        backbone: bc,
        plan: None,
        data: DataSource::Synthetic(task),
        train: TrainConfig { steps: 600, batch_size: 32, learning_rate: 3e-3, seed: 0, ..TrainConfig::default() },
        pretrain: None,
        split: Some(SplitSpec::new(40, 0, 1)),
        output_dir: dir.path().join("out"),
    };
    let args = SweepArgs {
        budgets: vec![1.01, 1.02, 1.05, 1.10, 1.17, 1.39],
        seeds: 3,
        seed: Some(0),
        tasks: 1,
        backbone: Some(&ckpt),
        out: None,
    };
    let r = commands::sweep_scaling(&cfg, &args, Exec::default()).map_err(|e| format!("{e:#}"))?;
    let means: Vec<String> = r.rows.iter().map(|row| format!("{:.2}X {:.4}", row.requested, row.mean)).collect();
    check(r.monotone() == Some(true), format!("trend broken: {}", r.trend_text().trim()))?;
    within(t.elapsed(), Duration::from_secs(900))?;
    Ok(means.join(", "))
}

fn ood_protocol() -> Outcome {
    let t = Instant::now();
    let cfg = ExperimentConfig::load(&repo_root().join("configs/ood.json")).map_err(|e| format!("{e:#}"))?;
    let want: [&[&str]; 3] = [
        &["160/0", "100/60", "80/80", "60/100"],
        &["80/80", "80/60", "80/40", "80/20"],
        &["140/20", "120/20", "100/20", "80/20", "60/20"],
    ];
    let mut splits = 0;
    for (mode, cols) in (1..=3u8).zip(want) {
        let args = OodArgs {
            mode,
            budgets: None,
            seeds: 5,
            seed: Some(0),
            tasks: 1,
            backbone: None,
            splits_only: true,
            out: None,
        };
        let r = commands::ood(&cfg, &args, Exec::default()).map_err(|e| format!("mode {mode}: {e:#}"))?;
        check(r.columns == cols, format!("mode {mode}: columns {:?}", r.columns))?;
        check(r.all_passed(), format!("mode {mode}: {}", r.audit_text()))?;
        check(r.audits.len() == cols.len() * 5, format!("mode {mode}: {} audits", r.audits.len()))?;
        splits += r.audits.len();
    }
    within(t.elapsed(), Duration::from_secs(300))?;
    Ok(format!("modes 1-3, 5 seeds, {splits} audited splits"))
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

const DET_CONFIG: &str = r#"{
  "backbone": { "image_size": 8, "patch_size": 4, "in_channels": 1, "dim": 16, "depth": 2, "heads": 2, "num_classes": 2 },
  "plan": { "method": "gmoe-adapter", "hyper": { "bottleneck": 4 } },
  "data": { "synthetic": {
    "domain_tag": "mixed", "num_classes": 2, "image_size": 8, "class_mean_scale": 3.0, "noise_std": 0.8,
    "patient_count": 160, "per_patient_shift_std": 0.2, "seed": 9, "samples": 320 } },
  "train": { "steps": 40, "batch_size": 16, "learning_rate": 0.003, "seed": 2 },
  "pretrain": { "steps": 40, "batch_size": 16, "learning_rate": 0.003, "seed": 1 },
  "split": { "seen_patients": 120, "unseen_patients": 40, "seed": 4 },
  "output_dir": "out"
}"#;

/// Every command of one session; stdout of each plus every file written.
fn session(dir: &Path, sequential: bool, threads: &str) -> Result<BTreeMap<String, Vec<u8>>, String> {
    std::fs::write(dir.join("c.json"), DET_CONFIG).map_err(|e| e.to_string())?;
    let steps: &[&[&str]] = &[
        &["pretrain", "--domain", "general", "--config", "c.json", "--out", "g.ckpt", "--seed", "1"],
        &["pretrain", "--domain", "medical", "--config", "c.json", "--out", "m.ckpt", "--seed", "2"],
        &[
            "adapt",
            "--method",
            "gmoe-adapter",
            "--backbone",
            "g.ckpt",
            "--backbone2",
            "m.ckpt",
            "--config",
            "c.json",
            "--out",
            "gmoe.ckpt",
        ],
        &["adapt", "--method", "linear", "--backbone", "g.ckpt", "--config", "c.json", "--out", "linear.ckpt"],
        &["synth", "--config", "c.json", "--out", "data.csv"],
        &[
            "eval",
            "--model",
            "gmoe.ckpt",
            "--data",
            "data.csv",
            "--config",
            "c.json",
            "--seeds",
            "2",
            "--out",
            "eval.csv",
        ],
        &[
            "sweep-scaling",
            "--budgets",
            "1.01,1.05",
            "--config",
            "c.json",
            "--backbone",
            "g.ckpt",
            "--seeds",
            "1",
            "--out",
            "sweep",
        ],
        &["ood", "--mode", "2", "--budgets", "1.02", "--config", "c.json", "--backbone", "g.ckpt", "--out", "ood"],
        &["params", "--method", "all", "--tasks", "19"],
        &["gradcheck", "--method", "gmoe-adapter"],
    ];
    let mut out = BTreeMap::new();
    for (i, args) in steps.iter().enumerate() {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_vpl"));
        cmd.current_dir(dir).env("VPL_THREADS", threads).args(*args);
        if sequential {
            cmd.arg("--sequential");
        }
        let o = cmd.output().map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("`vpl {}` failed: {}", args.join(" "), String::from_utf8_lossy(&o.stderr)));
        }
        out.insert(format!("stdout {i:02} {}", args[0]), o.stdout);
    }
    collect_files(dir, dir, &mut out).map_err(|e| e.to_string())?;
    Ok(out)
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap().display().to_string();
            out.insert(format!("file {rel}"), std::fs::read(&path)?);
        }
    }
    Ok(())
}

fn diff(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>, what: &str) -> Result<(), String> {
    check(a.keys().eq(b.keys()), format!("{what}: different output file sets"))?;
    for (k, v) in a {
        check(&b[k] == v, format!("{what}: {k} differs"))?;
    }
    Ok(())
}

fn determinism() -> Outcome {
    let t = Instant::now();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let first = session(dirs[0].path(), false, "4")?;
    let second = session(dirs[1].path(), false, "4")?;
    let sequential = session(dirs[2].path(), true, "1")?;
    diff(&first, &second, "repeat run")?;
    diff(&first, &sequential, "sequential run")?;
    let files = first.keys().filter(|k| k.starts_with("file ")).count();
    Ok(format!(
        "10 commands, {files} files byte-identical across 2 parallel runs and 1 sequential run ({:.1?})",
        t.elapsed()
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gate identities", gate_identities),
        ("gradient suite", gradient_suite),
        ("freeze suite", freeze_suite),
        ("parameter accounting", accounting),
        ("metric oracle", metric_oracle),
        ("desk-scale learning", desk_scale),
        ("scaling trend", scaling_trend),
        ("ood protocol", ood_protocol),
        ("determinism", determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let t = Instant::now();
        let r = f();
        let el = t.elapsed();
        match r {
            Ok(detail) => println!("PASS {name} ({el:.1?}) {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({el:.1?}) {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
