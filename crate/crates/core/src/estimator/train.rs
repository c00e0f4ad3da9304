use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{fit_code_density, loss, predict, EstimatorModel, GaussianNoise, LossWeights, Noise, Term};
use crate::error::{Error, Result};
use crate::ndgrad::{adam_step, AdamState, Graph, Tensor};
use crate::rng::{stream_rng, Stream};
use crate::synthgen::{Dataset, Labels, ShiftMode, Task};

pub const KL_GRID: [f64; 3] = [1e-1, 1e-2, 1e-3];
const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    /// Selects the objective variant; the s-distance penalty is dropped in sparse mode.
    pub mode: ShiftMode,
    pub seed: u64,
    pub cell: u64,
    pub run: u64,
    /// Mixture size for the code density; 2 for classification and 4 for
    /// regression when unset.
    pub density_components: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            batch_size: 256,
            lr: 2e-3,
            weights: LossWeights::default(),
            mode: ShiftMode::Dense,
            seed: 0,
            cell: 0,
            run: 0,
            density_components: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.density_components == Some(0) {
            return Err(Error::Config("density_components must be >= 1".into()));
        }
        self.weights.validate()
    }
}

/// Batch-averaged weighted loss values for one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub total: f64,
    pub terms: Vec<(Term, f64)>,
}

impl EpochTrace {
    pub fn term(&self, t: Term) -> f64 {
        self.terms.iter().find(|(k, _)| *k == t).map_or(0.0, |(_, v)| *v)
    }

    fn describe(&self) -> String {
        let mut s = format!("total={:.6e}", self.total);
        for (t, v) in &self.terms {
            s.push_str(&format!(" {}={:.6e}", t.name(), v));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: EstimatorModel,
    pub trace: Vec<EpochTrace>,
}

/// Visiting order of the source rows for one epoch.
pub fn epoch_order<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn gather(data: &Dataset, idx: &[usize]) -> (Tensor, Labels) {
    let d = data.xs.cols();
    let mut x = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        x.extend_from_slice(data.xs.row_slice(i));
    }
    let labels = match &data.labels {
        Labels::Class(v) => Labels::Class(idx.iter().map(|&i| v[i]).collect()),
        Labels::Value(v) => Labels::Value(idx.iter().map(|&i| v[i]).collect()),
    };
    (Tensor::matrix(idx.len(), d, x), labels)
}

fn refit_density<R: Rng + ?Sized>(model: &mut EstimatorModel, data: &Dataset, k: usize, rng: &mut R) -> Result<()> {
    let enc = model.encode(&data.xs)?;
    let mut codes = enc.mu_c;
    let eps = GaussianNoise(&mut *rng).draw(codes.rows(), codes.cols());
    for ((c, lv), e) in codes.data_mut().iter_mut().zip(enc.logvar_c.data()).zip(eps.data()) {
        *c += (0.5 * lv).exp() * e;
    }
    let labels = match &data.labels {
        Labels::Class(v) => Some(v.as_slice()),
        Labels::Value(_) => None,
    };
    model.density = fit_code_density(&codes, k, labels, rng)?;
    Ok(())
}

/// Joint training on the source set and a single target sample.
pub fn train(data: &Dataset, x_tgt: &[f64], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let task = match data.labels {
        Labels::Class(_) => Task::Classification,
        Labels::Value(_) => Task::Regression,
    };
    let mut init = stream_rng(cfg.seed, cfg.cell, cfg.run, Stream::Init);
    let mut model = EstimatorModel::new(data.xs.cols(), data.cs.cols(), data.ss.cols(), task, &mut init);
    let mut noise = GaussianNoise(stream_rng(cfg.seed, cfg.cell, cfg.run, Stream::Noise));
    let mut shuffle = stream_rng(cfg.seed, cfg.cell, cfg.run, Stream::Shuffle);
    let mut density_rng = stream_rng(cfg.seed, cfg.cell, cfg.run, Stream::Density);
    let k = cfg.density_components.unwrap_or(match task {
        Task::Classification => model.n_classes,
        Task::Regression => 4,
    });
    let mut adam = AdamState::new(model.params(), cfg.lr);
    let mut trace: Vec<EpochTrace> = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if cfg.weights.tgt_likelihood > 0.0 {
            refit_density(&mut model, data, k, &mut density_rng)?;
        }
        let order = epoch_order(data.len(), &mut shuffle);
        let mut sums = vec![0.0; Term::ALL.len()];
        let mut present = vec![false; Term::ALL.len()];
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = gather(data, chunk);
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let lg = loss(&mut g, &bound, &model, &x, &labels, x_tgt, &cfg.weights, cfg.mode, &mut noise)
                .map_err(|e| match e {
                    Error::NonFinite { op } => Error::NonFiniteLoss {
                        epoch,
                        terms: format!(
                            "{op} produced a non-finite value; previous epoch {}",
                            trace.last().map_or("none".into(), |t| t.describe())
                        ),
                    },
                    other => other,
                })?;
            let value = g.value(lg.total).item();
            for (t, v) in lg.values(&g) {
                let i = Term::ALL.iter().position(|k| *k == t).unwrap();
                sums[i] += v;
                present[i] = true;
            }
            if value > DIVERGENCE_LIMIT {
                let terms = lg
                    .values(&g)
                    .iter()
                    .map(|(t, v)| format!("{}={v:.6e}", t.name()))
                    .collect::<Vec<_>>()
                    .join(" ");
                return Err(Error::Divergence {
                    epoch,
                    loss: value,
                    terms,
                });
            }
            total += value;
            batches += 1;
            let mut grads = g.backward(lg.total)?;
            let grads: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.take(v)).collect();
            adam_step(&mut model.params_mut(), &grads, &mut adam)?;
        }
        let nb = batches as f64;
        let terms = Term::ALL
            .iter()
            .zip(&sums)
            .zip(&present)
            .filter(|(_, p)| **p)
            .map(|((t, s), _)| (*t, s / nb))
            .collect();
        trace.push(EpochTrace {
            epoch,
            total: total / nb,
            terms,
        });
    }
    if cfg.weights.tgt_likelihood > 0.0 {
        refit_density(&mut model, data, k, &mut density_rng)?;
    }
    Ok(TrainOutcome { model, trace })
}

pub fn write_trace_csv<W: Write>(trace: &[EpochTrace], mut w: W) -> Result<()> {
    write!(w, "epoch,total")?;
    for t in Term::ALL {
        write!(w, ",{}", t.name())?;
    }
    writeln!(w)?;
    for e in trace {
        write!(w, "{},{}", e.epoch, e.total)?;
        for t in Term::ALL {
            match e.terms.iter().find(|(k, _)| *k == t) {
                Some((_, v)) => write!(w, ",{v}")?,
                None => write!(w, ",")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Score of one KL weight on the source hold-out set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlScore {
    pub kl: f64,
    /// Accuracy for classification, negative MSE for regression.
    pub score: f64,
    /// Mean cross-entropy for classification, MSE for regression.
    pub loss: f64,
}

impl KlScore {
    /// Higher score wins; equal scores fall back to the lower loss. Hold-out
    /// accuracy saturates at 1 on easy generators, where it cannot rank the grid.
    pub fn beats(&self, other: &KlScore) -> bool {
        self.score > other.score || (self.score == other.score && self.loss < other.loss)
    }
}

#[derive(Clone, Debug)]
pub struct KlSelection {
    pub best: f64,
    pub scores: Vec<KlScore>,
    pub outcome: TrainOutcome,
}

/// Hold-out score of a trained model: accuracy, or negative MSE.
pub fn holdout_score(model: &EstimatorModel, holdout: &Dataset) -> Result<f64> {
    Ok(holdout_eval(model, holdout)?.0)
}

/// `(score, loss)` on a hold-out set; see [`KlScore`].
pub fn holdout_eval(model: &EstimatorModel, holdout: &Dataset) -> Result<(f64, f64)> {
    let p = predict(model, &holdout.xs)?;
    Ok(match &holdout.labels {
        Labels::Class(y) => {
            let hits = p.classes().iter().zip(y).filter(|(a, b)| a == b).count();
            let mut ce = 0.0;
            for (i, &k) in y.iter().enumerate() {
                let row = p.outputs.row_slice(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                ce += lse - row[k];
            }
            (hits as f64 / y.len() as f64, ce / y.len() as f64)
        }
        Labels::Value(y) => {
            let mse = p.values().iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
            (-mse, mse)
        }
    })
}

/// Trains once per KL weight and keeps the best by [`KlScore::beats`]; full
/// ties go to the earlier grid entry.
pub fn select_kl_weight(
    data: &Dataset,
    holdout: &Dataset,
    x_tgt: &[f64],
    cfg: &TrainConfig,
    grid: &[f64],
) -> Result<KlSelection> {
    if grid.is_empty() {
        return Err(Error::Config("KL grid is empty".into()));
    }
    let mut best: Option<(KlScore, TrainOutcome)> = None;
    let mut scores = Vec::with_capacity(grid.len());
    for &kl in grid {
        let mut c = cfg.clone();
        c.weights.kl = kl;
        let out = train(data, x_tgt, &c)?;
        let (score, loss) = holdout_eval(&out.model, holdout)?;
        let s = KlScore { kl, score, loss };
        scores.push(s);
        if best.as_ref().map_or(true, |(b, _)| s.beats(b)) {
            best = Some((s, out));
        }
    }
    let (best, outcome) = best.unwrap();
    Ok(KlSelection {
        best: best.kl,
        scores,
        outcome,
    })
}
