//! Experiment configuration, the run matrix, the severity/scope sweep, and
//! report emission.
//!
//! A config file is TOML with these keys (all optional):
//!
//! ```toml
//! mode = "dense"              # dense | sparse | scoped<k>
//! task = "classification"     # classification | regression
//! method = "ours"             # ours | source_only
//! distances = [12.0, 18.0, 24.0, 30.0]
//! n_runs = 50
//! n_source = 10000
//! n_holdout = 1000
//! kl_grid = [0.1, 0.01, 0.001]
//! kl_pilot_runs = 5
//! epochs = 25
//! batch_size = 256
//! lr = 0.002
//! seed = 0
//! parallelism = 0             # worker threads, 0 = all cores
//! fresh_generator_per_run = false
//! block_id_pairs = 2000
//!
//! [weights]                   # defaults depend on method and task
//! [adapt]                     # entropy adaptation after training, off when absent
//! [generator]
//! [sweep]
//! scopes = [2, 6]
//! severities = [3.0, 9.0, 18.0, 36.0]
//! ```
//!
//! For `ours` on classification the KL weight is chosen per cell: every grid
//! value is trained on the first `kl_pilot_runs` runs and the value with the
//! best mean source hold-out accuracy is used for the whole cell, with ties
//! broken by the lower mean hold-out cross-entropy. Pilot models for the
//! chosen value are reused. An empty grid keeps `weights.kl`.

mod assumptions;
mod plot;

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_entropy, AdaptConfig};
use crate::estimator::{
    holdout_eval, predict, select_kl_weight, train, EstimatorModel, KlScore, LossWeights, TrainConfig, TrainOutcome, KL_GRID,
};
use crate::metrics::{
    mode_name, summarize, summary_markdown, target_accuracy, target_mse, task_name, write_results_csv,
    block_identifiability_score, CellSummary, GridCell, Method, RunResult, SweepGrid,
};
use crate::ndgrad::Tensor;
use crate::rng::{stream_rng, Stream};
use crate::synthgen::{
    build_generator, sample_source, sample_target, Dataset, Generator, GeneratorSpec, Label, ShiftMode, TargetSample,
    Task,
};
use crate::{Error, Result};

pub use assumptions::{check_assumptions, AssumptionCheck, AssumptionOptions};
pub use plot::{emit_plot, plot_csv};

mod mode_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(mode: &ShiftMode, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&mode_name(*mode))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<ShiftMode, D::Error> {
        let s = String::deserialize(d)?;
        crate::metrics::parse_mode(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown mode `{s}`")))
    }
}

/// Generator settings shared by every cell; mode, task and seed come from the
/// experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorOptions {
    pub mlp_layers: usize,
    pub condition_limit: f64,
    pub truncation_radius: f64,
    pub bias_scale: f64,
    pub scramble_outputs: bool,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        let d = GeneratorSpec::default();
        GeneratorOptions {
            mlp_layers: d.mlp_layers,
            condition_limit: d.condition_limit,
            truncation_radius: d.truncation_radius,
            bias_scale: d.bias_scale,
            scramble_outputs: d.scramble_outputs,
        }
    }
}

impl GeneratorOptions {
    pub fn spec(&self, mode: ShiftMode, task: Task, seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            mode,
            task,
            mlp_layers: self.mlp_layers,
            condition_limit: self.condition_limit,
            truncation_radius: self.truncation_radius,
            bias_scale: self.bias_scale,
            scramble_outputs: self.scramble_outputs,
            seed,
            ..GeneratorSpec::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    /// Number of observed coordinates receiving the shift.
    pub scopes: Vec<usize>,
    /// Target `||s||` values.
    pub severities: Vec<f64>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            scopes: vec![2, 6],
            severities: vec![3.0, 9.0, 18.0, 36.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(with = "mode_serde")]
    pub mode: ShiftMode,
    pub task: Task,
    pub method: Method,
    pub distances: Vec<f64>,
    pub n_runs: usize,
    pub n_source: usize,
    pub n_holdout: usize,
    pub kl_grid: Vec<f64>,
    pub kl_pilot_runs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub parallelism: usize,
    pub fresh_generator_per_run: bool,
    /// Source pairs for the block-identifiability score; 0 skips it.
    pub block_id_pairs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<LossWeights>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapt: Option<AdaptConfig>,
    pub generator: GeneratorOptions,
    pub sweep: SweepOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: ShiftMode::Dense,
            task: Task::Classification,
            method: Method::Ours,
            distances: vec![12.0, 18.0, 24.0, 30.0],
            n_runs: 50,
            n_source: 10_000,
            n_holdout: 1000,
            kl_grid: KL_GRID.to_vec(),
            kl_pilot_runs: 5,
            epochs: 25,
            batch_size: 256,
            lr: 2e-3,
            seed: 0,
            parallelism: 0,
            fresh_generator_per_run: false,
            block_id_pairs: 2000,
            weights: None,
            adapt: None,
            generator: GeneratorOptions::default(),
            sweep: SweepOptions::default(),
        }
    }
}

fn check_distance(what: &str, d: f64, radius: f64) -> Result<()> {
    if d.is_finite() && (d == 0.0 || d > radius) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} {d} must be 0 or exceed the support radius {radius}"
        )))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Loss weights before KL selection.
    pub fn base_weights(&self) -> LossWeights {
        self.weights.unwrap_or(match self.method {
            Method::Ours => LossWeights::ours(self.task),
            Method::SourceOnly => LossWeights::source_only(self.task),
        })
    }

    /// Whether the KL weight is chosen by a pilot instead of taken from the weights.
    pub fn selects_kl(&self) -> bool {
        self.method == Method::Ours && self.task == Task::Classification && !self.kl_grid.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.distances.is_empty() {
            return bad("distances must be nonempty".into());
        }
        if self.n_runs == 0 || self.n_source == 0 || self.n_holdout == 0 {
            return bad("n_runs, n_source and n_holdout must be >= 1".into());
        }
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed must be <= {}", i64::MAX));
        }
        if self.selects_kl() && self.kl_pilot_runs == 0 {
            return bad("kl_pilot_runs must be >= 1".into());
        }
        if let Some(k) = self.kl_grid.iter().find(|k| !(k.is_finite() && **k >= 0.0)) {
            return bad(format!("KL grid values must be finite and >= 0, got {k}"));
        }
        let spec = self.generator.spec(self.mode, self.task, 0);
        spec.validate()?;
        let radius = spec.truncation_radius;
        for &d in &self.distances {
            check_distance("distance", d, radius)?;
        }
        for &k in &self.sweep.scopes {
            self.generator.spec(ShiftMode::Scoped(k), self.task, 0).validate()?;
        }
        for &d in &self.sweep.severities {
            check_distance("severity", d, radius)?;
        }
        if let Some(a) = &self.adapt {
            if self.task != Task::Classification {
                return bad("adaptation needs a classification task".into());
            }
            a.validate()?;
        }
        self.train_config(self.base_weights(), 0, 0).validate()
    }

    pub fn train_config(&self, weights: LossWeights, cell: u64, run: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weights,
            mode: objective_mode(self.mode, GeneratorSpec::default().d_s),
            seed: self.seed,
            cell,
            run,
            density_components: None,
        }
    }
}

/// Objective variant for a shift mode: a scope no wider than `d_s` is trained
/// with the sparse objective, anything wider with the dense one.
pub fn objective_mode(mode: ShiftMode, d_s: usize) -> ShiftMode {
    match mode {
        ShiftMode::Scoped(k) if k <= d_s => ShiftMode::Sparse,
        ShiftMode::Scoped(_) => ShiftMode::Dense,
        m => m,
    }
}

/// Stable key of a `(mode, task, distance)` cell. The method is left out, so
/// both methods see the same generator, data and targets.
pub fn cell_key(mode: ShiftMode, task: Task, distance: f64) -> u64 {
    let text = format!("{}|{}|{:016x}", mode_name(mode), task_name(task), distance.to_bits());
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// The cell's generator, or a run-specific one when
/// `fresh_generator_per_run` is set.
pub fn generator_for(cfg: &ExperimentConfig, cell: u64, run: u64) -> Result<Generator> {
    let slot = if cfg.fresh_generator_per_run { run + 1 } else { 0 };
    let seed = stream_rng(cfg.seed, cell, slot, Stream::Generator).gen::<u64>() >> 1;
    build_generator(&cfg.generator.spec(cfg.mode, cfg.task, seed))
}

/// Everything drawn from the generator for one run.
#[derive(Clone, Debug)]
pub struct RunData {
    pub source: Dataset,
    pub holdout: Dataset,
    pub target: TargetSample,
}

pub fn run_data(cfg: &ExperimentConfig, gen: &Generator, distance: f64, cell: u64, run: u64) -> Result<RunData> {
    let source = sample_source(gen, cfg.n_source, &mut stream_rng(cfg.seed, cell, run, Stream::Source))?;
    let holdout = sample_source(gen, cfg.n_holdout, &mut stream_rng(cfg.seed, cell, run, Stream::Holdout))?;
    let target = sample_target(gen, distance, &mut stream_rng(cfg.seed, cell, run, Stream::Target))?;
    Ok(RunData {
        source,
        holdout,
        target,
    })
}

/// One run's generator and data, addressed exactly like the same run of a matrix.
#[derive(Clone, Debug)]
pub struct SingleRun {
    pub distance: f64,
    pub run: u64,
    pub cell: u64,
    pub gen: Generator,
    pub data: RunData,
}

pub fn single_run(cfg: &ExperimentConfig, distance: f64, run: u64) -> Result<SingleRun> {
    cfg.validate()?;
    check_distance("distance", distance, cfg.generator.truncation_radius)?;
    let cell = cell_key(cfg.mode, cfg.task, distance);
    let gen = generator_for(cfg, cell, run)?;
    let data = run_data(cfg, &gen, distance, cell, run)?;
    Ok(SingleRun {
        distance,
        run,
        cell,
        gen,
        data,
    })
}

#[derive(Clone, Debug)]
pub struct Fitted {
    pub outcome: TrainOutcome,
    pub kl: f64,
    /// Hold-out scores when the KL weight was selected on this run.
    pub kl_scores: Vec<KlScore>,
}

/// Trains one run; with KL selection every grid value is trained on this run
/// alone and the best hold-out score wins.
pub fn fit_single(cfg: &ExperimentConfig, r: &SingleRun) -> Result<Fitted> {
    let tc = cfg.train_config(cfg.base_weights(), r.cell, r.run);
    if cfg.selects_kl() {
        let s = select_kl_weight(&r.data.source, &r.data.holdout, &r.data.target.x, &tc, &cfg.kl_grid)?;
        Ok(Fitted {
            outcome: s.outcome,
            kl: s.best,
            kl_scores: s.scores,
        })
    } else {
        Ok(Fitted {
            outcome: train(&r.data.source, &r.data.target.x, &tc)?,
            kl: tc.weights.kl,
            kl_scores: Vec::new(),
        })
    }
}

/// Scores a trained model on the run's target, adapting first when configured.
pub fn score_run(
    cfg: &ExperimentConfig,
    gen: &Generator,
    model: &EstimatorModel,
    target: &TargetSample,
    distance: f64,
    cell: u64,
    run: u64,
) -> Result<RunResult> {
    let x = Tensor::matrix(1, target.x.len(), target.x.clone());
    let mut row = RunResult {
        mode: cfg.mode,
        task: cfg.task,
        distance,
        seed: run,
        method: cfg.method,
        correct: None,
        sq_error: None,
        block_id: None,
        degenerate: false,
        failure: None,
    };
    let adapted;
    let model = match &cfg.adapt {
        Some(a) => {
            adapted = adapt_entropy(model, &target.x, a)?.adapted;
            if let Label::Class(k) = target.label {
                row.correct = Some(adapted.predict_classes(&x)?[0] == k);
            }
            &adapted.model
        }
        None => {
            let p = predict(model, &x)?;
            match target.label {
                Label::Class(k) => row.correct = Some(p.classes()[0] == k),
                Label::Value(y) => row.sq_error = Some((p.values()[0] - y).powi(2)),
            }
            model
        }
    };
    if cfg.task == Task::Classification && cfg.block_id_pairs > 0 {
        let mut rng = stream_rng(cfg.seed, cell, run, Stream::Eval);
        let b = block_identifiability_score(model, gen, cfg.block_id_pairs, &mut rng)?;
        row.block_id = Some(b.score);
        row.degenerate = b.degenerate;
    }
    Ok(row)
}

fn failed_row(cfg: &ExperimentConfig, distance: f64, run: u64, e: &Error) -> RunResult {
    RunResult {
        mode: cfg.mode,
        task: cfg.task,
        distance,
        seed: run,
        method: cfg.method,
        correct: None,
        sq_error: None,
        block_id: None,
        degenerate: false,
        failure: Some(e.to_string()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlChoice {
    pub mode: String,
    pub task: String,
    pub distance: f64,
    pub chosen: f64,
    /// Mean pilot hold-out score and loss per grid value; absent when every
    /// pilot run of that value failed.
    pub scores: Vec<PilotScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotScore {
    pub kl: f64,
    pub score: Option<f64>,
    pub loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CellOutput {
    pub results: Vec<RunResult>,
    pub kl: Option<KlChoice>,
}

type Trained = Result<((f64, f64), EstimatorModel)>;

fn train_run<F>(cfg: &ExperimentConfig, make_gen: &F, distance: f64, cell: u64, run: u64, weights: LossWeights) -> Trained
where
    F: Fn(u64) -> Result<Generator> + Sync,
{
    let gen = make_gen(run)?;
    let data = run_data(cfg, &gen, distance, cell, run)?;
    let model = train(&data.source, &data.target.x, &cfg.train_config(weights, cell, run))?.model;
    Ok((holdout_eval(&model, &data.holdout)?, model))
}

fn finish_run<F>(cfg: &ExperimentConfig, make_gen: &F, distance: f64, cell: u64, run: u64, trained: Trained) -> RunResult
where
    F: Fn(u64) -> Result<Generator> + Sync,
{
    let scored = trained.and_then(|(_, model)| {
        let gen = make_gen(run)?;
        let data = run_data(cfg, &gen, distance, cell, run)?;
        score_run(cfg, &gen, &model, &data.target, distance, cell, run)
    });
    scored.unwrap_or_else(|e| failed_row(cfg, distance, run, &e))
}

/// Runs one cell on the current rayon pool. `make_gen(run)` supplies the
/// generator for each run. Aborted runs become failed rows; rows come back in
/// run order.
pub fn run_cell<F>(cfg: &ExperimentConfig, distance: f64, cell: u64, make_gen: F) -> Result<CellOutput>
where
    F: Fn(u64) -> Result<Generator> + Sync,
{
    cfg.validate()?;
    let base = cfg.base_weights();
    let n = cfg.n_runs as u64;
    let mut reuse: Vec<Option<Trained>> = Vec::new();
    let mut weights = base;
    let mut kl = None;
    if cfg.selects_kl() {
        let grid = &cfg.kl_grid;
        let pilot = (cfg.kl_pilot_runs as u64).min(n);
        let jobs: Vec<(usize, u64)> = (0..grid.len()).flat_map(|g| (0..pilot).map(move |r| (g, r))).collect();
        let mut out: Vec<Trained> = jobs
            .par_iter()
            .map(|&(g, r)| train_run(cfg, &make_gen, distance, cell, r, LossWeights { kl: grid[g], ..base }))
            .collect();
        let means: Vec<Option<KlScore>> = out
            .chunks(pilot as usize)
            .zip(grid)
            .map(|(runs, &kl)| {
                let ok: Vec<(f64, f64)> = runs.iter().filter_map(|t| t.as_ref().ok().map(|(s, _)| *s)).collect();
                let n = ok.len() as f64;
                (!ok.is_empty()).then(|| KlScore {
                    kl,
                    score: ok.iter().map(|s| s.0).sum::<f64>() / n,
                    loss: ok.iter().map(|s| s.1).sum::<f64>() / n,
                })
            })
            .collect();
        let mut best: Option<usize> = None;
        for (g, s) in means.iter().enumerate() {
            if let Some(s) = s {
                if best.map_or(true, |b| s.beats(means[b].as_ref().unwrap())) {
                    best = Some(g);
                }
            }
        }
        let best = best.unwrap_or(0);
        weights.kl = grid[best];
        let start = best * pilot as usize;
        reuse = out.drain(start..start + pilot as usize).map(Some).collect();
        kl = Some(KlChoice {
            mode: mode_name(cfg.mode),
            task: task_name(cfg.task).into(),
            distance,
            chosen: grid[best],
            scores: grid
                .iter()
                .zip(&means)
                .map(|(&kl, m)| PilotScore {
                    kl,
                    score: m.map(|m| m.score),
                    loss: m.map(|m| m.loss),
                })
                .collect(),
        });
    }
    let reuse = std::sync::Mutex::new(reuse);
    let results = (0..n)
        .into_par_iter()
        .map(|run| {
            let pre = reuse.lock().unwrap().get_mut(run as usize).and_then(Option::take);
            let trained = pre.unwrap_or_else(|| train_run(cfg, &make_gen, distance, cell, run, weights));
            finish_run(cfg, &make_gen, distance, cell, run, trained)
        })
        .collect();
    Ok(CellOutput { results, kl })
}

/// Runs `f` on a pool with `parallelism` workers (0 = all cores).
pub fn with_pool<T: Send>(parallelism: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Clone, Debug)]
pub struct MatrixReport {
    pub results: Vec<RunResult>,
    pub summary: Vec<CellSummary>,
    pub kl: Vec<KlChoice>,
}

impl MatrixReport {
    /// Writes `results.csv`, `summary.md` and `kl_selection.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_results_csv(&self.results, std::fs::File::create(dir.join("results.csv"))?)?;
        std::fs::write(dir.join("summary.md"), summary_markdown(&self.summary))?;
        let mut f = std::fs::File::create(dir.join("kl_selection.json"))?;
        serde_json::to_writer_pretty(&mut f, &self.kl)?;
        writeln!(f)?;
        Ok(())
    }
}

/// Every distance of the config as one cell of `n_runs` runs.
pub fn run_matrix(cfg: &ExperimentConfig) -> Result<MatrixReport> {
    cfg.validate()?;
    let mut results = Vec::new();
    let mut kl = Vec::new();
    with_pool(cfg.parallelism, || -> Result<()> {
        for &d in &cfg.distances {
            let cell = cell_key(cfg.mode, cfg.task, d);
            let out = run_cell(cfg, d, cell, |run| generator_for(cfg, cell, run))?;
            results.extend(out.results);
            kl.extend(out.kl);
        }
        Ok(())
    })??;
    Ok(MatrixReport {
        summary: summarize(&results),
        results,
        kl,
    })
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub grid: SweepGrid,
    pub results: Vec<RunResult>,
    pub kl: Vec<KlChoice>,
}

/// Mean target error over `scope x severity` cells, with the shift confined to
/// `scope` observed coordinates. Error is `1 - accuracy` for classification
/// and MSE for regression; a cell where every run failed gets NaN.
pub fn severity_scope_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let mut grid = SweepGrid::default();
    let mut results = Vec::new();
    let mut kl = Vec::new();
    with_pool(cfg.parallelism, || -> Result<()> {
        for &scope in &cfg.sweep.scopes {
            let sub = ExperimentConfig {
                mode: ShiftMode::Scoped(scope),
                distances: cfg.sweep.severities.clone(),
                ..cfg.clone()
            };
            for &sev in &cfg.sweep.severities {
                let cell = cell_key(sub.mode, sub.task, sev);
                let out = run_cell(&sub, sev, cell, |run| generator_for(&sub, cell, run))?;
                let done = out.results.iter().filter(|r| !r.failed()).count();
                let mean_error = match sub.task {
                    Task::Classification => target_accuracy(&out.results).map(|a| 1.0 - a),
                    Task::Regression => target_mse(&out.results),
                }
                .unwrap_or(f64::NAN);
                grid.cells.push(GridCell {
                    scope,
                    severity: sev,
                    mean_error,
                    n_runs: done,
                });
                results.extend(out.results);
                kl.extend(out.kl);
            }
        }
        Ok(())
    })??;
    Ok(SweepReport { grid, results, kl })
}
