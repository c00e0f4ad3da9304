//! Per-run outcomes, their aggregation, and the block-identifiability score.
//!
//! Results CSV columns: `mode,task,distance,seed,method,correct,sq_error,block_id,degenerate`.
//! `seed` is the run index within its cell. `correct` is `1`/`0` for
//! classification and empty for regression; `sq_error` is the reverse. A run
//! that aborted keeps its row with every metric cell empty.
//!
//! Grid CSV columns: `scope,severity,mean_error,n_runs`.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EstimatorModel;
use crate::ndgrad::Tensor;
use crate::synthgen::{sample_source, Generator, Labels, ShiftMode, Task};

pub const RESULTS_HEADER: &str = "mode,task,distance,seed,method,correct,sq_error,block_id,degenerate";
pub const GRID_HEADER: &str = "scope,severity,mean_error,n_runs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    SourceOnly,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::SourceOnly => "source_only",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "ours" => Some(Method::Ours),
            "source_only" => Some(Method::SourceOnly),
            _ => None,
        }
    }
}

pub fn mode_name(mode: ShiftMode) -> String {
    match mode {
        ShiftMode::Dense => "dense".into(),
        ShiftMode::Sparse => "sparse".into(),
        ShiftMode::Scoped(k) => format!("scoped{k}"),
    }
}

pub fn parse_mode(s: &str) -> Option<ShiftMode> {
    match s {
        "dense" => Some(ShiftMode::Dense),
        "sparse" => Some(ShiftMode::Sparse),
        _ => s.strip_prefix("scoped")?.parse().ok().map(ShiftMode::Scoped),
    }
}

pub fn task_name(task: Task) -> &'static str {
    match task {
        Task::Classification => "classification",
        Task::Regression => "regression",
    }
}

pub fn parse_task(s: &str) -> Option<Task> {
    match s {
        "classification" => Some(Task::Classification),
        "regression" => Some(Task::Regression),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: ShiftMode,
    pub task: Task,
    pub distance: f64,
    pub seed: u64,
    pub method: Method,
    pub correct: Option<bool>,
    pub sq_error: Option<f64>,
    pub block_id: Option<f64>,
    pub degenerate: bool,
    /// Abort message of a failed run; not part of the CSV.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure: Option<String>,
}

impl RunResult {
    pub fn failed(&self) -> bool {
        self.correct.is_none() && self.sq_error.is_none()
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn write_results_csv<W: Write>(results: &[RunResult], mut w: W) -> Result<()> {
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in results {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            mode_name(r.mode),
            task_name(r.task),
            r.distance,
            r.seed,
            r.method.name(),
            opt(r.correct.map(u8::from)),
            opt(r.sq_error),
            opt(r.block_id),
            r.degenerate
        )?;
    }
    Ok(())
}

pub fn read_results_csv<R: BufRead>(r: R) -> Result<Vec<RunResult>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let bad = |msg: String| Error::Parse { line: lineno, msg };
        if i == 0 {
            if line.trim() != RESULTS_HEADER {
                return Err(bad(format!("expected header `{RESULTS_HEADER}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 9 {
            return Err(bad(format!("expected 9 fields, got {}", cells.len())));
        }
        let num = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(format!("bad {what} `{s}`")))
            }
        };
        let correct = match cells[5] {
            "" => None,
            "1" => Some(true),
            "0" => Some(false),
            s => return Err(bad(format!("bad correct `{s}`"))),
        };
        out.push(RunResult {
            mode: parse_mode(cells[0]).ok_or_else(|| bad(format!("bad mode `{}`", cells[0])))?,
            task: parse_task(cells[1]).ok_or_else(|| bad(format!("bad task `{}`", cells[1])))?,
            distance: num(cells[2], "distance")?.ok_or_else(|| bad("missing distance".into()))?,
            seed: cells[3].parse().map_err(|_| bad(format!("bad seed `{}`", cells[3])))?,
            method: Method::parse(cells[4]).ok_or_else(|| bad(format!("bad method `{}`", cells[4])))?,
            correct,
            sq_error: num(cells[6], "sq_error")?,
            block_id: num(cells[7], "block_id")?,
            degenerate: cells[8].parse().map_err(|_| bad(format!("bad degenerate `{}`", cells[8])))?,
            failure: None,
        });
    }
    Ok(out)
}

/// Fraction of completed runs whose target was classified correctly.
pub fn target_accuracy(results: &[RunResult]) -> Result<f64> {
    let v: Vec<bool> = results.iter().filter_map(|r| r.correct).collect();
    if v.is_empty() {
        return Err(Error::Config("no completed classification runs".into()));
    }
    Ok(v.iter().filter(|&&c| c).count() as f64 / v.len() as f64)
}

/// Mean squared target error over completed regression runs.
pub fn target_mse(results: &[RunResult]) -> Result<f64> {
    let v: Vec<f64> = results.iter().filter_map(|r| r.sq_error).collect();
    if v.is_empty() {
        return Err(Error::Config("no completed regression runs".into()));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub mode: ShiftMode,
    pub task: Task,
    pub method: Method,
    pub distance: f64,
    pub n_runs: usize,
    pub n_failed: usize,
    /// Accuracy for classification, MSE for regression.
    pub mean: f64,
    pub stderr: f64,
}

/// Per-cell mean and standard error, cells in order of first appearance.
pub fn summarize(results: &[RunResult]) -> Vec<CellSummary> {
    let mut keys: Vec<(ShiftMode, Task, Method, u64)> = Vec::new();
    for r in results {
        let k = (r.mode, r.task, r.method, r.distance.to_bits());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(mode, task, method, d)| {
            let cell: Vec<&RunResult> = results
                .iter()
                .filter(|r| r.mode == mode && r.task == task && r.method == method && r.distance.to_bits() == d)
                .collect();
            let values: Vec<f64> = cell
                .iter()
                .filter_map(|r| match task {
                    Task::Classification => r.correct.map(|c| f64::from(u8::from(c))),
                    Task::Regression => r.sq_error,
                })
                .collect();
            let (mean, stderr) = mean_stderr(&values);
            CellSummary {
                mode,
                task,
                method,
                distance: f64::from_bits(d),
                n_runs: cell.len(),
                n_failed: cell.len() - values.len(),
                mean,
                stderr,
            }
        })
        .collect()
}

pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn summary_markdown(summary: &[CellSummary]) -> String {
    let mut s = String::from("| mode | task | method | distance | runs | failed | mean | stderr |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for c in summary {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {:.4} | {:.4} |\n",
            mode_name(c.mode),
            task_name(c.task),
            c.method.name(),
            c.distance,
            c.n_runs,
            c.n_failed,
            c.mean,
            c.stderr
        ));
    }
    s
}

/// Anything mapping observations to invariant codes.
pub trait CodeEncoder {
    fn codes(&self, x: &Tensor) -> Result<Tensor>;
}

impl CodeEncoder for EstimatorModel {
    fn codes(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode(x)?.mu_c)
    }
}

/// Adapts a closure into a [`CodeEncoder`].
pub struct FnEncoder<F>(pub F);

impl<F: Fn(&Tensor) -> Result<Tensor>> CodeEncoder for FnEncoder<F> {
    fn codes(&self, x: &Tensor) -> Result<Tensor> {
        (self.0)(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockIdScore {
    pub score: f64,
    pub epsilon: f64,
    /// Every code lies within `epsilon` of the overall code mean; all pairs are
    /// then declared equal.
    pub degenerate: bool,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Agreement between "same class" and "codes within epsilon" over the pairs
/// `(i, n + i)` of `2n` codes. Epsilon is half the median distance between
/// class centroids.
pub fn block_id_from_codes(codes: &Tensor, classes: &[usize]) -> Result<BlockIdScore> {
    let m = codes.rows();
    if m < 2 || m % 2 != 0 || classes.len() != m {
        return Err(Error::Config(format!("need an even number >= 2 of labelled codes, got {m}")));
    }
    let d = codes.cols();
    let n_classes = classes.iter().max().unwrap() + 1;
    let mut sums = vec![vec![0.0; d]; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (i, &k) in classes.iter().enumerate() {
        counts[k] += 1;
        for (s, v) in sums[k].iter_mut().zip(codes.row_slice(i)) {
            *s += v;
        }
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| s.iter().map(|v| v / c as f64).collect())
        .collect();
    let mut between = Vec::new();
    for a in 0..centroids.len() {
        for b in a + 1..centroids.len() {
            between.push(dist(&centroids[a], &centroids[b]));
        }
    }
    if between.is_empty() {
        return Err(Error::Config("block identifiability needs at least two classes".into()));
    }
    between.sort_by(f64::total_cmp);
    let mid = between.len() / 2;
    let median = if between.len() % 2 == 1 {
        between[mid]
    } else {
        0.5 * (between[mid - 1] + between[mid])
    };
    let epsilon = 0.5 * median;
    let mean: Vec<f64> = (0..d).map(|j| (0..m).map(|i| codes.get(i, j)).sum::<f64>() / m as f64).collect();
    // Rounding slack: constant codes give epsilon = 0, and two balanced
    // centroids sit exactly at epsilon from the mean.
    let spread = (0..m).map(|i| dist(codes.row_slice(i), &mean)).fold(0.0, f64::max);
    let floor = 1e-9 * (1.0 + mean.iter().map(|v| v * v).sum::<f64>().sqrt());
    let degenerate = spread <= floor || spread < epsilon * (1.0 - 1e-9);
    let n = m / 2;
    let agree = (0..n)
        .filter(|&i| {
            let same = classes[i] == classes[n + i];
            let close = degenerate || dist(codes.row_slice(i), codes.row_slice(n + i)) < epsilon;
            same == close
        })
        .count();
    Ok(BlockIdScore {
        score: agree as f64 / n as f64,
        epsilon,
        degenerate,
    })
}

/// Block-identifiability score on `n_pairs` fresh source pairs.
pub fn block_identifiability_score<E: CodeEncoder + ?Sized, R: Rng + ?Sized>(
    encoder: &E,
    gen: &Generator,
    n_pairs: usize,
    rng: &mut R,
) -> Result<BlockIdScore> {
    if gen.spec().task != Task::Classification {
        return Err(Error::Config("block identifiability needs a classification generator".into()));
    }
    if n_pairs == 0 {
        return Err(Error::Config("n_pairs must be >= 1".into()));
    }
    let data = sample_source(gen, 2 * n_pairs, rng)?;
    let Labels::Class(classes) = &data.labels else { unreachable!() };
    let codes = encoder.codes(&data.xs)?;
    block_id_from_codes(&codes, classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub scope: usize,
    pub severity: f64,
    pub mean_error: f64,
    pub n_runs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub cells: Vec<GridCell>,
}

impl SweepGrid {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{GRID_HEADER}")?;
        for c in &self.cells {
            writeln!(w, "{},{},{},{}", c.scope, c.severity, c.mean_error, c.n_runs)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<SweepGrid> {
        let mut cells = Vec::new();
        let mut saw_header = false;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let bad = |msg: String| Error::Parse { line: lineno, msg };
            if i == 0 {
                if line.trim() != GRID_HEADER {
                    return Err(bad(format!("expected header `{GRID_HEADER}`")));
                }
                saw_header = true;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("expected 4 fields, got {}", f.len())));
            }
            let mean_error: f64 = f[2].parse().map_err(|_| bad(format!("bad mean_error `{}`", f[2])))?;
            let severity: f64 = f[1].parse().map_err(|_| bad(format!("bad severity `{}`", f[1])))?;
            if !severity.is_finite() {
                return Err(bad(format!("non-finite severity `{}`", f[1])));
            }
            cells.push(GridCell {
                scope: f[0].parse().map_err(|_| bad(format!("bad scope `{}`", f[0])))?,
                severity,
                mean_error,
                n_runs: f[3].parse().map_err(|_| bad(format!("bad n_runs `{}`", f[3])))?,
            });
        }
        if !saw_header {
            return Err(Error::Parse {
                line: 1,
                msg: "empty grid file".into(),
            });
        }
        Ok(SweepGrid { cells })
    }

    /// Mean errors of one scope ordered by severity.
    pub fn series(&self, scope: usize) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = self
            .cells
            .iter()
            .filter(|c| c.scope == scope)
            .map(|c| (c.severity, c.mean_error))
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }

    pub fn scopes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.cells.iter().map(|c| c.scope).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

pub use crate::harness::severity_scope_sweep;
