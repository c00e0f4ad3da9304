//! VAE estimator: encoder to `(c_hat, s_hat)` posteriors, decoder back to `x`,
//! a classifier (or regression) head on `c_hat`, and a mixture density over
//! source codes used to pull the target code towards source modes.

mod density;
mod train;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{BoundMlp, Graph, Mlp, Tensor, Var};
use crate::synthgen::{Labels, ShiftMode, Task};

pub use density::{fit_code_density, CodeDensity, VARIANCE_FLOOR};
pub use train::{
    epoch_order, holdout_eval, holdout_score, select_kl_weight, train, write_trace_csv, EpochTrace, KlScore, KlSelection, TrainConfig, TrainOutcome,
    KL_GRID,
};

pub const HIDDEN: usize = 32;
pub const LEAKY_ALPHA: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub recons: f64,
    pub tgt_likelihood: f64,
    pub s_distance: f64,
    pub kl: f64,
    pub anti_nat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::ours(Task::Classification)
    }
}

impl LossWeights {
    /// Full objective. The s-distance weight only takes effect outside sparse mode.
    pub fn ours(task: Task) -> Self {
        match task {
            Task::Classification => LossWeights {
                cls: 1.0,
                recons: 0.1,
                tgt_likelihood: 0.1,
                s_distance: 0.01,
                kl: 1e-2,
                anti_nat: 0.0,
            },
            Task::Regression => LossWeights {
                cls: 0.1,
                recons: 0.1,
                tgt_likelihood: 0.1,
                s_distance: 0.01,
                kl: 1e-2,
                anti_nat: 0.0,
            },
        }
    }

    /// Classification (or regression) loss only.
    pub fn source_only(task: Task) -> Self {
        LossWeights {
            cls: LossWeights::ours(task).cls,
            recons: 0.0,
            tgt_likelihood: 0.0,
            s_distance: 0.0,
            kl: 0.0,
            anti_nat: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("cls", self.cls),
            ("recons", self.recons),
            ("tgt_likelihood", self.tgt_likelihood),
            ("s_distance", self.s_distance),
            ("kl", self.kl),
            ("anti_nat", self.anti_nat),
        ];
        for (name, w) in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    fn uses_target(&self) -> bool {
        self.recons > 0.0 || self.tgt_likelihood > 0.0 || self.s_distance > 0.0 || self.anti_nat > 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorModel {
    pub d_x: usize,
    pub d_c: usize,
    pub d_s: usize,
    pub task: Task,
    pub n_classes: usize,
    /// `x -> [mu_c | logvar_c | mu_s | logvar_s]`
    pub encoder: Mlp,
    pub decoder: Mlp,
    /// Linear map from `c_hat` to logits (or to a scalar for regression).
    pub head: Mlp,
    pub density: CodeDensity,
}

/// Posterior parameters for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding {
    pub mu_c: Tensor,
    pub logvar_c: Tensor,
    pub mu_s: Tensor,
    pub logvar_s: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Logits `[n, K]` or regression outputs `[n, 1]`.
    pub outputs: Tensor,
    pub c_hat: Tensor,
    pub s_hat: Tensor,
}

impl Prediction {
    pub fn classes(&self) -> Vec<usize> {
        (0..self.outputs.rows())
            .map(|r| {
                let row = self.outputs.row_slice(r);
                let mut best = 0;
                for (k, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.outputs.rows()).map(|r| self.outputs.get(r, 0)).collect()
    }
}

fn split_cols(t: &Tensor, ranges: &[(usize, usize)]) -> Vec<Tensor> {
    ranges
        .iter()
        .map(|&(a, b)| {
            let mut out = Vec::with_capacity(t.rows() * (b - a));
            for r in 0..t.rows() {
                out.extend_from_slice(&t.row_slice(r)[a..b]);
            }
            Tensor::matrix(t.rows(), b - a, out)
        })
        .collect()
}

impl EstimatorModel {
    pub fn new<R: Rng + ?Sized>(d_x: usize, d_c: usize, d_s: usize, task: Task, rng: &mut R) -> Self {
        let d_z = d_c + d_s;
        let n_classes = match task {
            Task::Classification => 2,
            Task::Regression => 0,
        };
        let n_out = n_classes.max(1);
        let encoder = Mlp::new(&[d_x, HIDDEN, HIDDEN, HIDDEN, 2 * d_z], LEAKY_ALPHA, rng);
        let decoder = Mlp::new(&[d_z, HIDDEN, HIDDEN, HIDDEN, d_x], LEAKY_ALPHA, rng);
        let head = Mlp::new(&[d_c, n_out], LEAKY_ALPHA, rng);
        EstimatorModel {
            d_x,
            d_c,
            d_s,
            task,
            n_classes,
            encoder,
            decoder,
            head,
            density: CodeDensity::standard(d_c),
        }
    }

    pub fn d_z(&self) -> usize {
        self.d_c + self.d_s
    }

    fn layout(&self) -> [(usize, usize); 4] {
        let (c, s) = (self.d_c, self.d_s);
        [(0, c), (c, 2 * c), (2 * c, 2 * c + s), (2 * c + s, 2 * c + 2 * s)]
    }

    pub fn encode(&self, x: &Tensor) -> Result<Encoding> {
        if x.cols() != self.d_x {
            return Err(Error::shape("encode", x.shape(), &[x.rows(), self.d_x]));
        }
        let out = self.encoder.forward(x);
        let mut parts = split_cols(&out, &self.layout()).into_iter();
        Ok(Encoding {
            mu_c: parts.next().unwrap(),
            logvar_c: parts.next().unwrap(),
            mu_s: parts.next().unwrap(),
            logvar_s: parts.next().unwrap(),
        })
    }

    /// Decoder evaluated at a latent batch `[n, d_z]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.d_z() {
            return Err(Error::shape("decode", z.shape(), &[z.rows(), self.d_z()]));
        }
        Ok(self.decoder.forward(z))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.extend(self.head.params_mut());
        p
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind(g),
            decoder: self.decoder.bind(g),
            head: self.head.bind(g),
            layout: self.layout(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: EstimatorModel = serde_json::from_str(s)?;
        if m.encoder.in_dim() != m.d_x
            || m.encoder.out_dim() != 2 * m.d_z()
            || m.decoder.in_dim() != m.d_z()
            || m.decoder.out_dim() != m.d_x
            || m.head.in_dim() != m.d_c
            || m.head.out_dim() != m.n_classes.max(1)
        {
            return Err(Error::Config("checkpoint layer shapes disagree with its dimensions".into()));
        }
        Ok(m)
    }
}

/// Model parameters recorded on a graph, in [`EstimatorModel::params`] order.
pub struct BoundModel {
    pub encoder: BoundMlp,
    pub decoder: BoundMlp,
    pub head: BoundMlp,
    layout: [(usize, usize); 4],
}

pub struct BoundEncoding {
    pub mu_c: Var,
    pub logvar_c: Var,
    pub mu_s: Var,
    pub logvar_s: Var,
}

impl BoundModel {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.encoder.vars();
        v.extend(self.decoder.vars());
        v.extend(self.head.vars());
        v
    }

    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<BoundEncoding> {
        let out = self.encoder.forward(g, x)?;
        let [a, b, c, d] = self.layout;
        Ok(BoundEncoding {
            mu_c: g.slice_cols(out, a.0, a.1)?,
            logvar_c: g.slice_cols(out, b.0, b.1)?,
            mu_s: g.slice_cols(out, c.0, c.1)?,
            logvar_s: g.slice_cols(out, d.0, d.1)?,
        })
    }
}

/// Source of reparameterisation noise.
pub trait Noise {
    fn draw(&mut self, rows: usize, cols: usize) -> Tensor;
}

/// Makes every sampled code equal to its posterior mean.
pub struct ZeroNoise;

impl Noise for ZeroNoise {
    fn draw(&mut self, rows: usize, cols: usize) -> Tensor {
        Tensor::zeros(rows, cols)
    }
}

pub struct GaussianNoise<R>(pub R);

impl<R: Rng> Noise for GaussianNoise<R> {
    fn draw(&mut self, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut self.0)).collect();
        Tensor::matrix(rows, cols, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Reconstruction,
    Kl,
    Naturalness,
    Classification,
    AntiNaturalness,
    SDistance,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::Reconstruction,
        Term::Kl,
        Term::Naturalness,
        Term::Classification,
        Term::AntiNaturalness,
        Term::SDistance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Reconstruction => "reconstruction",
            Term::Kl => "kl",
            Term::Naturalness => "naturalness",
            Term::Classification => "classification",
            Term::AntiNaturalness => "anti_naturalness",
            Term::SDistance => "s_distance",
        }
    }
}

/// The recorded objective: the weighted total and each active weighted term.
pub struct LossGraph {
    pub total: Var,
    pub terms: Vec<(Term, Var)>,
}

impl LossGraph {
    pub fn values(&self, g: &Graph) -> Vec<(Term, f64)> {
        self.terms.iter().map(|&(t, v)| (t, g.value(v).item())).collect()
    }
}

/// Records the training objective for one source batch plus the target.
/// Terms whose weight is zero are not recorded at all.
#[allow(clippy::too_many_arguments)]
pub fn loss(
    g: &mut Graph,
    bound: &BoundModel,
    model: &EstimatorModel,
    x_src: &Tensor,
    labels: &Labels,
    x_tgt: &[f64],
    weights: &LossWeights,
    mode: ShiftMode,
    noise: &mut dyn Noise,
) -> Result<LossGraph> {
    if x_src.rows() == 0 || labels.len() != x_src.rows() {
        return Err(Error::Config(format!(
            "source batch has {} rows and {} labels",
            x_src.rows(),
            labels.len()
        )));
    }
    if x_tgt.len() != model.d_x {
        return Err(Error::shape("loss", &[1, x_tgt.len()], &[1, model.d_x]));
    }
    let n = x_src.rows();
    let xs = g.leaf(x_src.clone());
    let enc = bound.encode(g, xs)?;
    let mut terms = Vec::new();

    let needs_recons = weights.recons > 0.0;
    let tgt = if weights.uses_target() {
        let xt = g.leaf(Tensor::row(x_tgt));
        Some((xt, bound.encode(g, xt)?))
    } else {
        None
    };

    if needs_recons {
        let c = g.reparameterize(enc.mu_c, enc.logvar_c, noise.draw(n, model.d_c))?;
        let s = g.reparameterize(enc.mu_s, enc.logvar_s, noise.draw(n, model.d_s))?;
        let z = g.concat_cols(&[c, s])?;
        let xh = bound.decoder.forward(g, z)?;
        let src = g.mse(xh, xs)?;
        let (xt, te) = tgt.as_ref().expect("target encoded");
        let c = g.reparameterize(te.mu_c, te.logvar_c, noise.draw(1, model.d_c))?;
        let s = g.reparameterize(te.mu_s, te.logvar_s, noise.draw(1, model.d_s))?;
        let z = g.concat_cols(&[c, s])?;
        let xh = bound.decoder.forward(g, z)?;
        let tgt_mse = g.mse(xh, *xt)?;
        let both = g.add(src, tgt_mse)?;
        terms.push((Term::Reconstruction, g.scale(both, weights.recons)?));
    }
    if weights.kl > 0.0 {
        let kl = g.kl_standard_normal(enc.mu_c, enc.logvar_c)?;
        terms.push((Term::Kl, g.scale(kl, weights.kl)?));
    }
    if weights.tgt_likelihood > 0.0 {
        let (_, te) = tgt.as_ref().expect("target encoded");
        let c = g.reparameterize(te.mu_c, te.logvar_c, noise.draw(1, model.d_c))?;
        let ld = model.density.log_density_graph(g, c)?;
        let ld = g.sum(ld)?;
        terms.push((Term::Naturalness, g.scale(ld, -weights.tgt_likelihood)?));
    }
    if weights.cls > 0.0 {
        let out = bound.head.forward(g, enc.mu_c)?;
        let l = match labels {
            Labels::Class(y) => g.softmax_cross_entropy(out, y)?,
            Labels::Value(y) => {
                let t = g.leaf(Tensor::matrix(n, 1, y.clone()));
                g.mse(out, t)?
            }
        };
        terms.push((Term::Classification, g.scale(l, weights.cls)?));
    }
    if weights.anti_nat > 0.0 {
        let (_, te) = tgt.as_ref().expect("target encoded");
        let kl_s = g.kl_standard_normal(enc.mu_s, enc.logvar_s)?;
        let s = g.reparameterize(te.mu_s, te.logvar_s, noise.draw(1, model.d_s))?;
        let zero = g.leaf(Tensor::zeros(1, model.d_s));
        let ld = g.gaussian_log_density(zero, zero, s)?;
        let p = g.exp(ld)?;
        let p = g.sum(p)?;
        let both = g.add(kl_s, p)?;
        terms.push((Term::AntiNaturalness, g.scale(both, weights.anti_nat)?));
    }
    if weights.s_distance > 0.0 && mode != ShiftMode::Sparse {
        let (_, te) = tgt.as_ref().expect("target encoded");
        let sq = g.square(te.mu_s)?;
        let sq = g.sum(sq)?;
        terms.push((Term::SDistance, g.scale(sq, weights.s_distance)?));
    }
    let mut total = match terms.first() {
        Some(&(_, v)) => v,
        None => return Err(Error::Config("every loss weight is zero".into())),
    };
    for &(_, v) in &terms[1..] {
        total = g.add(total, v)?;
    }
    Ok(LossGraph { total, terms })
}

/// Deterministic point estimates from posterior means.
pub fn predict(model: &EstimatorModel, x: &Tensor) -> Result<Prediction> {
    let enc = model.encode(x)?;
    Ok(Prediction {
        outputs: model.head.forward(&enc.mu_c),
        c_hat: enc.mu_c,
        s_hat: enc.mu_s,
    })
}

#[cfg(test)]
mod tests;
