use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Graph, Tensor, Var};

pub const VARIANCE_FLOOR: f64 = 1e-6;
const EM_ITERS: usize = 50;
const EM_TOL: f64 = 1e-6;
const MAX_REINITS: usize = 5;

/// Diagonal-covariance Gaussian mixture over codes `c_hat`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeDensity {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

fn log_gauss(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let ln2pi = (2.0 * PI).ln();
    -0.5 * x
        .iter()
        .zip(mean)
        .zip(var)
        .map(|((xi, m), v)| ln2pi + v.ln() + (xi - m).powi(2) / v)
        .sum::<f64>()
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl CodeDensity {
    /// Standard normal over `d` dimensions (single component).
    pub fn standard(d: usize) -> Self {
        CodeDensity {
            weights: vec![1.0],
            means: vec![vec![0.0; d]],
            variances: vec![vec![1.0; d]],
        }
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.len())
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let parts: Vec<f64> = (0..self.n_components())
            .map(|k| self.weights[k].ln() + log_gauss(x, &self.means[k], &self.variances[k]))
            .collect();
        logsumexp(&parts)
    }

    /// Records `log p(x)` for a batch `x: [n, d]`, giving `[n, 1]`. The
    /// mixture parameters enter as constants.
    pub fn log_density_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.n_components());
        for k in 0..self.n_components() {
            let mu = g.leaf(Tensor::row(&self.means[k]));
            let lv: Vec<f64> = self.variances[k].iter().map(|v| v.ln()).collect();
            let lv = g.leaf(Tensor::row(&lv));
            let ld = g.gaussian_log_density(mu, lv, x)?;
            let lw = g.leaf(Tensor::scalar(self.weights[k].ln()));
            parts.push(g.add(ld, lw)?);
        }
        let all = g.concat_cols(&parts)?;
        g.logsumexp_cols(all)
    }
}

fn kmeans_pp<R: Rng + ?Sized>(codes: &Tensor, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = codes.rows();
    let mut centres = vec![codes.row_slice(rng.gen_range(0..n)).to_vec()];
    while centres.len() < k {
        let d2: Vec<f64> = (0..n)
            .map(|i| {
                centres
                    .iter()
                    .map(|c| c.iter().zip(codes.row_slice(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut u = rng.gen_range(0.0..total);
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        };
        centres.push(codes.row_slice(pick).to_vec());
    }
    centres
}

/// EM fit of a `k`-component diagonal mixture. With `labels` and `k` equal to
/// the number of classes, means start at the per-class code averages;
/// otherwise k-means++ seeding is used.
pub fn fit_code_density<R: Rng + ?Sized>(
    codes: &Tensor,
    k: usize,
    labels: Option<&[usize]>,
    rng: &mut R,
) -> Result<CodeDensity> {
    let (n, d) = (codes.rows(), codes.cols());
    if k == 0 || n < k {
        return Err(Error::Config(format!("need at least {k} codes to fit {k} components, got {n}")));
    }
    let mut global_var = vec![0.0; d];
    let mut global_mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in global_mean.iter_mut().zip(codes.row_slice(i)) {
            *m += v / n as f64;
        }
    }
    for i in 0..n {
        for ((gv, m), v) in global_var.iter_mut().zip(&global_mean).zip(codes.row_slice(i)) {
            *gv += (v - m).powi(2) / n as f64;
        }
    }
    let global_var: Vec<f64> = global_var.iter().map(|v| v.max(VARIANCE_FLOOR)).collect();

    let mut means = match labels {
        Some(lab) if lab.len() == n && lab.iter().all(|&l| l < k) => {
            let mut sums = vec![vec![0.0; d]; k];
            let mut counts = vec![0usize; k];
            for (i, &l) in lab.iter().enumerate() {
                counts[l] += 1;
                for (s, v) in sums[l].iter_mut().zip(codes.row_slice(i)) {
                    *s += v;
                }
            }
            (0..k)
                .map(|j| {
                    if counts[j] == 0 {
                        codes.row_slice(rng.gen_range(0..n)).to_vec()
                    } else {
                        sums[j].iter().map(|s| s / counts[j] as f64).collect()
                    }
                })
                .collect()
        }
        _ => kmeans_pp(codes, k, rng),
    };
    let mut variances = vec![global_var.clone(); k];
    let mut weights = vec![1.0 / k as f64; k];
    let mut resp = vec![0.0; n * k];
    let mut prev_ll = f64::NEG_INFINITY;
    let mut reinits = 0;

    for _ in 0..EM_ITERS {
        // E step
        let mut ll = 0.0;
        for i in 0..n {
            let x = codes.row_slice(i);
            let parts: Vec<f64> = (0..k)
                .map(|j| weights[j].ln() + log_gauss(x, &means[j], &variances[j]))
                .collect();
            let lse = logsumexp(&parts);
            ll += lse;
            for j in 0..k {
                resp[i * k + j] = (parts[j] - lse).exp();
            }
        }
        // M step
        let mut restart = false;
        for j in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if nk < 1e-10 {
                reinits += 1;
                if reinits > MAX_REINITS {
                    return Err(Error::Config("mixture component stayed empty after 5 re-initialisations".into()));
                }
                means[j] = codes.row_slice(rng.gen_range(0..n)).to_vec();
                variances[j] = global_var.clone();
                restart = true;
                continue;
            }
            let mut mean = vec![0.0; d];
            for i in 0..n {
                let r = resp[i * k + j];
                for (m, v) in mean.iter_mut().zip(codes.row_slice(i)) {
                    *m += r * v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut var = vec![0.0; d];
            for i in 0..n {
                let r = resp[i * k + j];
                for ((s, m), v) in var.iter_mut().zip(&mean).zip(codes.row_slice(i)) {
                    *s += r * (v - m).powi(2) / nk;
                }
            }
            means[j] = mean;
            variances[j] = var.into_iter().map(|v| v.max(VARIANCE_FLOOR)).collect();
            weights[j] = nk / n as f64;
        }
        if restart {
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            prev_ll = f64::NEG_INFINITY;
            continue;
        }
        if (ll - prev_ll).abs() < EM_TOL * n as f64 {
            break;
        }
        prev_ll = ll;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(CodeDensity {
        weights,
        means,
        variances,
    })
}
