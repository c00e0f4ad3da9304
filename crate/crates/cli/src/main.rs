//! Command line front end. Every subcommand reads an optional TOML config,
//! applies flag overrides on top, and writes its artifacts into `--out`.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime abort.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use extrapolate_core::adapt::{adapt_entropy, entropy, AdaptConfig, UpdateScope};
use extrapolate_core::estimator::{holdout_score, predict, write_trace_csv, EstimatorModel};
use extrapolate_core::harness::{
    cell_key, check_assumptions, emit_plot, fit_single, generator_for, run_data, run_matrix, score_run, single_run,
    severity_scope_sweep, AssumptionOptions, ExperimentConfig, Fitted, MatrixReport, SingleRun,
};
use extrapolate_core::metrics::{parse_mode, parse_task, summarize, write_results_csv, Method, SweepGrid};
use extrapolate_core::ndgrad::Tensor;
use extrapolate_core::synthgen::{ShiftMode, Task};
use extrapolate_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "extrapolate", version, about = "Out-of-support extrapolation experiments")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment config; flags win over file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// dense | sparse | scoped<k>
    #[arg(long)]
    mode: Option<String>,
    /// classification | regression
    #[arg(long)]
    task: Option<String>,
    /// ours | source_only
    #[arg(long)]
    method: Option<String>,
    #[arg(long, value_delimiter = ',')]
    distances: Option<Vec<f64>>,
    #[arg(long)]
    n_runs: Option<usize>,
    #[arg(long)]
    n_source: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 = all cores.
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    kl_grid: Option<Vec<f64>>,
    #[arg(long)]
    fresh_generator_per_run: bool,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct RunSel {
    /// Target norm; defaults to the first configured distance.
    #[arg(long)]
    distance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    run: u64,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write source data and target samples for one run of every distance.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        run: u64,
    },
    /// Train one model and write its checkpoint and loss trace.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: RunSel,
    },
    /// Entropy adaptation of a checkpoint on its run's target.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: RunSel,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Learn a soft mask over the code in front of the classifier.
        #[arg(long)]
        mask: bool,
        #[arg(long)]
        l1_weight: Option<f64>,
        /// Update the encoder only.
        #[arg(long)]
        encoder_only: bool,
    },
    /// Score a checkpoint on its run's target and source hold-out.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sel: RunSel,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Severity x scope error grid and its plot.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        scopes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        severities: Option<Vec<f64>>,
        /// Only render an existing grid CSV.
        #[arg(long)]
        from_grid: Option<PathBuf>,
    },
    /// Evaluate the identification conditions on the ground-truth generator.
    CheckAssumptions {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 200)]
        bound_samples: usize,
        #[arg(long, default_value_t = 64)]
        boundary: usize,
    },
    /// Classification accuracy of both methods over the target distances.
    ReproduceTable1 {
        #[command(flatten)]
        common: Common,
    },
    /// Regression MSE of both methods over the target distances.
    ReproduceRegression {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_or<T>(v: Option<T>, what: &str, raw: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("unknown {what} `{raw}`")))
}

impl Common {
    /// File values, then `defaults` for keys the file leaves out, then flags.
    fn load(&self, defaults: impl FnOnce(&mut ExperimentConfig, &[String])) -> Result<ExperimentConfig> {
        let (mut cfg, keys) = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
                (ExperimentConfig::from_toml_str(&text)?, table.keys().cloned().collect())
            }
            None => (ExperimentConfig::default(), Vec::new()),
        };
        if let Some(m) = &self.mode {
            cfg.mode = parse_or(parse_mode(m), "mode", m)?;
        }
        if let Some(t) = &self.task {
            cfg.task = parse_or(parse_task(t), "task", t)?;
        }
        defaults(&mut cfg, &keys);
        if let Some(m) = &self.method {
            cfg.method = parse_or(Method::parse(m), "method", m)?;
        }
        if let Some(d) = &self.distances {
            cfg.distances = d.clone();
        }
        if let Some(v) = self.n_runs {
            cfg.n_runs = v;
        }
        if let Some(v) = self.n_source {
            cfg.n_source = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.parallelism {
            cfg.parallelism = v;
        }
        if let Some(v) = &self.kl_grid {
            cfg.kl_grid = v.clone();
        }
        cfg.fresh_generator_per_run |= self.fresh_generator_per_run;
        cfg.validate()?;
        Ok(cfg)
    }

    fn config(&self) -> Result<ExperimentConfig> {
        self.load(|_, _| {})
    }

    fn out(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_ctx(cfg: &ExperimentConfig, sel: &RunSel) -> Result<SingleRun> {
    single_run(cfg, sel.distance.unwrap_or(cfg.distances[0]), sel.run)
}

fn load_checkpoint(path: &Path) -> Result<EstimatorModel> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    EstimatorModel::from_json(&text).map_err(|e| Error::Config(format!("bad checkpoint {}: {e}", path.display())))
}

fn generate(common: &Common, run: u64) -> Result<()> {
    let cfg = common.config()?;
    let out = common.out()?;
    for &d in &cfg.distances {
        let cell = cell_key(cfg.mode, cfg.task, d);
        let data = run_data(&cfg, &generator_for(&cfg, cell, run)?, d, cell, run)?;
        let path = out.join(format!("source_d{d}.csv"));
        data.source.write_csv(fs::File::create(&path)?)?;
        println!("wrote {}", path.display());
        write_json(&out.join(format!("target_d{d}.json")), &data.target)?;
    }
    Ok(())
}

fn train_cmd(common: &Common, sel: &RunSel) -> Result<()> {
    let cfg = common.config()?;
    let out = common.out()?;
    let ctx = run_ctx(&cfg, sel)?;
    let Fitted { outcome, kl, kl_scores } = fit_single(&cfg, &ctx)?;
    let model_path = out.join("model.json");
    fs::write(&model_path, outcome.model.to_json()? + "\n")?;
    println!("wrote {}", model_path.display());
    let trace_path = out.join("trace.csv");
    write_trace_csv(&outcome.trace, fs::File::create(&trace_path)?)?;
    println!("wrote {}", trace_path.display());
    write_json(
        &out.join("train.json"),
        &json!({
            "distance": ctx.distance,
            "run": ctx.run,
            "method": cfg.method.name(),
            "kl": kl,
            "kl_scores": kl_scores,
            "holdout_score": holdout_score(&outcome.model, &ctx.data.holdout)?,
            "epochs": outcome.trace.len(),
        }),
    )
}

fn adapt_cmd(common: &Common, sel: &RunSel, checkpoint: &Path, acfg: AdaptConfig) -> Result<()> {
    let cfg = common.config()?;
    let out = common.out()?;
    let model = load_checkpoint(checkpoint)?;
    let ctx = run_ctx(&cfg, sel)?;
    let t = &ctx.data.target;
    let x = Tensor::matrix(1, t.x.len(), t.x.clone());
    let before = predict(&model, &x)?;
    let res = adapt_entropy(&model, &t.x, &acfg)?;
    let logits = res.adapted.logits(&x)?;
    let after = res.adapted.predict_classes(&x)?[0];
    let label = match t.label {
        extrapolate_core::synthgen::Label::Class(k) => k,
        extrapolate_core::synthgen::Label::Value(_) => unreachable!("adaptation rejects regression models"),
    };
    let adapted_path = out.join("adapted_model.json");
    fs::write(&adapted_path, serde_json::to_string(&res.adapted)? + "\n")?;
    println!("wrote {}", adapted_path.display());
    write_json(
        &out.join("adapt.json"),
        &json!({
            "distance": ctx.distance,
            "run": ctx.run,
            "config": acfg,
            "label": label,
            "prediction_before": before.classes()[0],
            "prediction_after": after,
            "correct_before": before.classes()[0] == label,
            "correct_after": after == label,
            "entropy_before": entropy(&before.outputs),
            "entropy_after": entropy(&logits),
            "entropies": res.entropies,
        }),
    )
}

fn evaluate_cmd(common: &Common, sel: &RunSel, checkpoint: &Path) -> Result<()> {
    let cfg = ExperimentConfig {
        adapt: None,
        ..common.config()?
    };
    let out = common.out()?;
    let model = load_checkpoint(checkpoint)?;
    if model.task != cfg.task {
        return Err(Error::Config("checkpoint task differs from the configured task".into()));
    }
    let ctx = run_ctx(&cfg, sel)?;
    let row = score_run(&cfg, &ctx.gen, &model, &ctx.data.target, ctx.distance, ctx.cell, ctx.run)?;
    write_json(
        &out.join("evaluate.json"),
        &json!({
            "distance": ctx.distance,
            "run": ctx.run,
            "holdout_score": holdout_score(&model, &ctx.data.holdout)?,
            "correct": row.correct,
            "sq_error": row.sq_error,
            "block_id": row.block_id,
            "degenerate": row.degenerate,
        }),
    )
}

fn write_svg(path: &Path, grid: &SweepGrid) -> Result<()> {
    fs::write(path, emit_plot(grid)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn sweep_cmd(common: &Common, scopes: &Option<Vec<usize>>, severities: &Option<Vec<f64>>, from: &Option<PathBuf>) -> Result<()> {
    if let Some(path) = from {
        let f = fs::File::open(path).map_err(|e| Error::Config(format!("cannot read grid {}: {e}", path.display())))?;
        let grid = SweepGrid::read_csv(std::io::BufReader::new(f))?;
        return write_svg(&common.out()?.join("sweep.svg"), &grid);
    }
    let mut cfg = common.config()?;
    if let Some(s) = scopes {
        cfg.sweep.scopes = s.clone();
    }
    if let Some(s) = severities {
        cfg.sweep.severities = s.clone();
    }
    cfg.validate()?;
    let out = common.out()?;
    let rep = severity_scope_sweep(&cfg)?;
    let grid_path = out.join("grid.csv");
    rep.grid.write_csv(fs::File::create(&grid_path)?)?;
    println!("wrote {}", grid_path.display());
    let rows_path = out.join("sweep_results.csv");
    write_results_csv(&rep.results, fs::File::create(&rows_path)?)?;
    println!("wrote {}", rows_path.display());
    write_json(&out.join("kl_selection.json"), &rep.kl)?;
    write_svg(&out.join("sweep.svg"), &rep.grid)
}

fn assumptions_cmd(common: &Common, points: usize, bound_samples: usize, boundary: usize) -> Result<()> {
    let cfg = common.config()?;
    let out = common.out()?;
    let cell = cell_key(cfg.mode, cfg.task, cfg.distances[0]);
    let gen = generator_for(&cfg, cell, 0)?;
    let opts = AssumptionOptions {
        n_points: points,
        bound_samples,
        n_boundary: boundary,
        seed: cfg.seed,
    };
    let report = check_assumptions(&gen, &cfg.distances, &opts)?;
    for c in &report {
        println!("{:<24} {}", c.name, if c.satisfied { "satisfied" } else { "violated" });
    }
    write_json(&out.join("assumptions.json"), &report)
}

fn both_methods(common: &Common, task: Task) -> Result<()> {
    let base = common.load(|cfg, keys| {
        cfg.task = task;
        if !keys.iter().any(|k| k == "distances") {
            cfg.distances = match (task, cfg.mode) {
                (Task::Regression, _) => vec![18.0, 24.0, 30.0],
                (_, ShiftMode::Dense) => vec![12.0, 18.0, 24.0, 30.0],
                _ => vec![18.0, 24.0, 30.0, 36.0],
            };
        }
    })?;
    if base.task != task {
        return Err(Error::Config(format!("this command needs task {task:?}")));
    }
    let out = common.out()?;
    let mut results = Vec::new();
    let mut kl = Vec::new();
    for method in [Method::Ours, Method::SourceOnly] {
        let rep = run_matrix(&ExperimentConfig { method, ..base.clone() })?;
        results.extend(rep.results);
        kl.extend(rep.kl);
    }
    let rep = MatrixReport {
        summary: summarize(&results),
        results,
        kl,
    };
    rep.write_to(out)?;
    for f in ["results.csv", "summary.md", "kl_selection.json"] {
        println!("wrote {}", out.join(f).display());
    }
    print!("{}", extrapolate_core::metrics::summary_markdown(&rep.summary));
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Generate { common, run } => generate(&common, run),
        Cmd::Train { common, sel } => train_cmd(&common, &sel),
        Cmd::Adapt {
            common,
            sel,
            checkpoint,
            steps,
            lr,
            mask,
            l1_weight,
            encoder_only,
        } => {
            let d = AdaptConfig::default();
            let acfg = AdaptConfig {
                steps: steps.unwrap_or(d.steps),
                lr: lr.unwrap_or(d.lr),
                update_scope: if encoder_only { UpdateScope::EncoderOnly } else { d.update_scope },
                use_mask: mask,
                l1_weight: l1_weight.unwrap_or(d.l1_weight),
            };
            acfg.validate()?;
            adapt_cmd(&common, &sel, &checkpoint, acfg)
        }
        Cmd::Evaluate { common, sel, checkpoint } => evaluate_cmd(&common, &sel, &checkpoint),
        Cmd::Sweep {
            common,
            scopes,
            severities,
            from_grid,
        } => sweep_cmd(&common, &scopes, &severities, &from_grid),
        Cmd::CheckAssumptions {
            common,
            points,
            bound_samples,
            boundary,
        } => assumptions_cmd(&common, points, bound_samples, boundary),
        Cmd::ReproduceTable1 { common } => both_methods(&common, Task::Classification),
        Cmd::ReproduceRegression { common } => both_methods(&common, Task::Regression),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
