use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use serde::Serialize;

use orthode::layers::Layer;
use orthode::lipschitz::lipschitz_upper_bound;
use orthode::odeint::{integrate, SolverConfig};
use orthode::selftest::{self, Fault};
use orthode::trainer::{certify as certify_model, evaluate, train_with, AttackResult, Certificates, MetricsReport, NodeModel};
use orthode::{Error, Result};

use crate::config::ExperimentConfig;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } => 2,
        _ => 1,
    }
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    ExperimentConfig::from_path(path)?.resolve(seed, out)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct AccuracyDelta {
    label: String,
    /// This solver's accuracy minus the training solver's.
    delta: f64,
}

#[derive(Serialize)]
struct SolverEval {
    solver: SolverConfig,
    accuracy: Vec<AttackResult>,
    delta: Vec<AccuracyDelta>,
}

#[derive(Serialize)]
struct RunRecord {
    #[serde(flatten)]
    report: MetricsReport,
    checkpoint: PathBuf,
    solver_comparison: Vec<SolverEval>,
}

#[derive(Serialize)]
struct ExperimentMetrics<R> {
    config: serde_json::Value,
    runs: Vec<R>,
}

/// One table row: label plus accuracies in attack order.
type Row = (String, Vec<AttackResult>);

fn write_table(path: &Path, rows: &[Row]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::InvalidConfig(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if let Some((_, first)) = rows.first() {
        let mut header = vec!["arch".to_string()];
        header.extend(first.iter().map(|r| r.label.clone()));
        w.write_record(&header).map_err(csv_err)?;
    }
    for (name, results) in rows {
        let mut record = vec![name.clone()];
        record.extend(results.iter().map(|r| format!("{:.2}", r.accuracy)));
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn solver_label(s: &SolverConfig) -> String {
    if s.method.is_adaptive() {
        format!("{:?}(rtol={})", s.method, s.rtol).to_lowercase()
    } else {
        format!("{:?}({} steps)", s.method, s.fixed_steps).to_lowercase()
    }
}

/// Evaluates `model` under each extra solver and reports the deltas.
fn compare_solvers(
    model: &NodeModel<f32>,
    cfg: &ExperimentConfig,
    test: &orthode::dataio::Dataset,
    baseline: &[AttackResult],
    rows: &mut Vec<Row>,
) -> Result<Vec<SolverEval>> {
    if !model.arch.is_node() {
        return Ok(Vec::new());
    }
    let attacks = cfg.attack_specs()?;
    let mut out = Vec::new();
    for solver in &cfg.eval.extra_solvers {
        let mut m = model.clone();
        m.set_solver(solver)?;
        let report = evaluate(&m, test, &attacks, cfg.seed, cfg.eval.batch_size)?;
        let delta = report
            .accuracy
            .iter()
            .zip(baseline)
            .map(|(a, b)| AccuracyDelta {
                label: a.label.clone(),
                delta: a.accuracy - b.accuracy,
            })
            .collect();
        eprintln!(
            "[{}] {}: clean {:.2}%",
            model.arch.name(),
            solver_label(solver),
            report.accuracy[0].accuracy
        );
        rows.push((format!("{}@{}", model.arch.name(), solver_label(solver)), report.accuracy.clone()));
        out.push(SolverEval {
            solver: solver.clone(),
            accuracy: report.accuracy,
            delta,
        });
    }
    Ok(out)
}

fn write_trajectories(model: &NodeModel<f32>, test: &orthode::dataio::Dataset, count: usize, dir: &Path) -> Result<()> {
    let (Some(field), Some(solver)) = (model.dynamics(), model.solver()) else {
        return Ok(());
    };
    for i in 0..count.min(test.len()) {
        let z0 = model.features(&test.batch::<f32>(&[i]).0)?;
        let traj = integrate(field, &z0, solver)?;
        let path = dir.join(format!("{}_sample{i}.csv", model.arch.name()));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        traj.write_csv(file, false)?;
    }
    Ok(())
}

pub fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExitCode> {
    let cfg = load_config(config, seed, out)?;
    let (train_set, test_set) = cfg.dataset.load(cfg.seed)?;
    let out = &cfg.output_dir;
    let (ckpt_dir, traj_dir) = (out.join("checkpoints"), out.join("trajectories"));
    create_dir(&ckpt_dir)?;
    create_dir(&traj_dir)?;
    let attacks = cfg.attack_specs()?;
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for &arch in &cfg.arch {
        let mut model = NodeModel::<f32>::build(
            arch,
            &cfg.model,
            train_set.image_dims(),
            train_set.class_count,
            &cfg.solver,
            cfg.seed,
        )?;
        eprintln!("[{}] {} parameters, {} training samples", arch.name(), model.param_count(), train_set.len());
        let mut report = train_with(&mut model, &train_set, &cfg.train, |e| {
            let bound = e.dynamics_upper_bound.map(|b| format!(", dynamics bound {b:.6}")).unwrap_or_default();
            eprintln!(
                "[{}] epoch {:>3}: loss {:.4}, train acc {:.2}%{bound}",
                arch.name(),
                e.epoch,
                e.train_loss,
                e.train_accuracy
            );
        })?;
        let checkpoint = ckpt_dir.join(format!("{}.ckpt", arch.name()));
        model.save(&checkpoint)?;

        let eval = evaluate(&model, &test_set, &attacks, cfg.seed, cfg.eval.batch_size)?;
        for r in &eval.accuracy {
            eprintln!("[{}] {}: {:.2}%", arch.name(), r.label, r.accuracy);
        }
        report.accuracy = eval.accuracy;
        report.timings.extend(eval.timings);
        rows.push((arch.name().to_string(), report.accuracy.clone()));
        let solver_comparison = compare_solvers(&model, &cfg, &test_set, &report.accuracy, &mut rows)?;

        let started = Instant::now();
        report.certificates = certify_model(&model, &test_set, &cfg.certify, cfg.seed)?;
        report.timings.insert("certify_seconds".into(), started.elapsed().as_secs_f64());
        write_trajectories(&model, &test_set, cfg.eval.trajectory_samples, &traj_dir)?;
        runs.push(RunRecord {
            report,
            checkpoint,
            solver_comparison,
        });
    }
    write_json(
        &out.join("metrics.json"),
        &ExperimentMetrics {
            config: cfg.to_json()?,
            runs,
        },
    )?;
    write_table(&out.join("table.csv"), &rows)?;
    eprintln!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct CertifyOutput {
    arch: orthode::trainer::ArchKind,
    checkpoint: PathBuf,
    #[serde(flatten)]
    certificates: Certificates,
    /// Product bound of each body layer, in order.
    layer_bounds: Vec<f64>,
}

fn existing(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("checkpoint {} does not exist", path.display())))
    }
}

pub fn certify(config: &Path, seed: Option<u64>, out: Option<PathBuf>, checkpoint: &Path) -> Result<ExitCode> {
    existing(checkpoint)?;
    let cfg = load_config(config, seed, out)?;
    let model = NodeModel::<f64>::load(checkpoint)?;
    let (_, test_set) = cfg.dataset.load(cfg.seed)?;
    let certificates = certify_model(&model, &test_set, &cfg.certify, cfg.seed)?;
    let body: Vec<&Layer<f64>> = match &model.body {
        orthode::trainer::Body::Node { field, .. } => field.layers.iter().collect(),
        orthode::trainer::Body::Residual { blocks } => blocks.iter().flatten().collect(),
    };
    let layer_bounds = body.into_iter().map(orthode::lipschitz::layer_bound).collect::<Result<_>>()?;
    if let Some(field) = model.dynamics() {
        eprintln!("dynamics upper bound {:.6}", lipschitz_upper_bound(field)?);
    }
    if let Some(l) = &certificates.lipschitz {
        eprintln!("lipschitz: empirical {:.6} <= upper {:.6}", l.lower, l.upper);
    }
    if let Some(g) = &certificates.gronwall {
        eprintln!("gronwall: C = {:.6}, max ratio {:.6}, violated {}", g.c_used, g.max_ratio, g.violated);
    }
    if let Some(c) = &certificates.contraction {
        eprintln!("contraction: rho {:.6}, contractive {}", c.rho_estimate, c.contractive);
    }
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("certificates.json");
    write_json(
        &path,
        &CertifyOutput {
            arch: model.arch,
            checkpoint: checkpoint.to_path_buf(),
            certificates,
            layer_bounds,
        },
    )?;
    eprintln!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

pub fn attack_eval(config: &Path, seed: Option<u64>, out: Option<PathBuf>, checkpoints: &[PathBuf]) -> Result<ExitCode> {
    let cfg = load_config(config, seed, out)?;
    let checkpoints: Vec<PathBuf> = if checkpoints.is_empty() {
        cfg.arch
            .iter()
            .map(|a| cfg.output_dir.join("checkpoints").join(format!("{}.ckpt", a.name())))
            .collect()
    } else {
        checkpoints.to_vec()
    };
    for c in &checkpoints {
        existing(c)?;
    }
    let (_, test_set) = cfg.dataset.load(cfg.seed)?;
    let attacks = cfg.attack_specs()?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for checkpoint in checkpoints {
        let model = NodeModel::<f32>::load(&checkpoint)?;
        let report = evaluate(&model, &test_set, &attacks, cfg.seed, cfg.eval.batch_size)?;
        for r in &report.accuracy {
            eprintln!("[{}] {}: {:.2}%", model.arch.name(), r.label, r.accuracy);
        }
        rows.push((model.arch.name().to_string(), report.accuracy.clone()));
        let solver_comparison = compare_solvers(&model, &cfg, &test_set, &report.accuracy, &mut rows)?;
        runs.push(RunRecord {
            report,
            checkpoint,
            solver_comparison,
        });
    }
    create_dir(&cfg.output_dir)?;
    write_table(&cfg.output_dir.join("table.csv"), &rows)?;
    write_json(
        &cfg.output_dir.join("attack_eval.json"),
        &ExperimentMetrics {
            config: cfg.to_json()?,
            runs,
        },
    )?;
    eprintln!("wrote {}", cfg.output_dir.join("table.csv").display());
    Ok(ExitCode::SUCCESS)
}

pub fn selftest(fault: Option<&str>) -> Result<ExitCode> {
    let fault = match fault {
        None => None,
        Some("broken-cayley") => Some(Fault::BrokenCayley),
        Some(other) => return Err(Error::InvalidConfig(format!("unknown fault {other:?}"))),
    };
    let results = selftest::run(fault);
    for r in &results {
        println!(
            "{} {:<22} {} ({:.2}s)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail,
            r.seconds
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} properties passed", results.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failed properties: {}", failed.join(", "));
        Ok(ExitCode::from(3))
    }
}
