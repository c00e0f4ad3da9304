//! Ground-truth checks on a generator: Jacobians and the index sets they
//! induce, the spectral bound, distances between class manifolds on the
//! support boundary, rank sub-additivity over row partitions, and rank
//! agreement between a generator and an estimated decoder.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EstimatorModel;
use crate::ndgrad::{Graph, Mlp, Tensor};
use crate::synthgen::Generator;

pub const INFLUENCE_TOL: f64 = 1e-6;
pub const RANK_RTOL: f64 = 1e-8;
pub const POWER_ITERS: usize = 50;
pub const POWER_TOL: f64 = 1e-10;
pub const RANK_SWEEP: [f64; 5] = [1e-6, 1e-7, 1e-8, 1e-9, 1e-10];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JacobianMethod {
    Analytic,
    /// Central differences with step `h`.
    FiniteDiff(f64),
}

pub fn jacobian(gen: &Generator, z: &[f64], method: JacobianMethod) -> Result<DMatrix<f64>> {
    let j = match method {
        JacobianMethod::Analytic => gen.jacobian_at(z)?,
        JacobianMethod::FiniteDiff(h) => finite_diff(|v| gen.generate_one(v), z, h)?,
    };
    if j.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "jacobian" });
    }
    Ok(j)
}

/// Central-difference Jacobian of `f` at `z`.
pub fn finite_diff<F>(f: F, z: &[f64], h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let m = f(z)?.len();
    let mut j = DMatrix::zeros(m, z.len());
    let mut p = z.to_vec();
    for k in 0..z.len() {
        p[k] = z[k] + h;
        let up = f(&p)?;
        p[k] = z[k] - h;
        let down = f(&p)?;
        p[k] = z[k];
        for i in 0..m {
            j[(i, k)] = (up[i] - down[i]) / (2.0 * h);
        }
    }
    Ok(j)
}

/// Index sets of output rows touched by `s` (columns `d_c..`) and by `c`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfluenceSets {
    pub i_s: Vec<usize>,
    pub i_c: Vec<usize>,
    pub i_c_minus_s: Vec<usize>,
}

pub fn influenced_indices(j: &DMatrix<f64>, d_c: usize, tol: f64) -> InfluenceSets {
    let touches = |i: usize, cols: std::ops::Range<usize>| cols.into_iter().any(|k| j[(i, k)].abs() > tol);
    let i_s: Vec<usize> = (0..j.nrows()).filter(|&i| touches(i, d_c..j.ncols())).collect();
    let i_c: Vec<usize> = (0..j.nrows()).filter(|&i| touches(i, 0..d_c)).collect();
    let i_c_minus_s = i_c.iter().copied().filter(|i| !i_s.contains(i)).collect();
    InfluenceSets { i_s, i_c, i_c_minus_s }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianReport {
    pub z: Vec<f64>,
    pub j: DMatrix<f64>,
    pub sets: InfluenceSets,
    pub tol: f64,
}

pub fn jacobian_report(gen: &Generator, z: &[f64], tol: f64) -> Result<JacobianReport> {
    let j = jacobian(gen, z, JacobianMethod::Analytic)?;
    let sets = influenced_indices(&j, gen.spec().d_c, tol);
    Ok(JacobianReport {
        z: z.to_vec(),
        j,
        sets,
        tol,
    })
}

/// Largest singular value of `j` by power iteration on `J^T J`. Each step
/// squares the iterated matrix, so step `k` applies `(J^T J)^(2^k)` and
/// nearly equal leading singular values still separate within the budget.
pub fn spectral_norm(j: &DMatrix<f64>) -> Result<f64> {
    let n = j.ncols();
    if n == 0 || j.nrows() == 0 {
        return Ok(0.0);
    }
    let jtj = j.transpose() * j;
    // A fixed, non-degenerate start keeps the estimate deterministic.
    let mut v0 = DVector::from_fn(n, |i, _| 1.0 + 0.1 * i as f64);
    v0 /= v0.norm();
    let mut power = jtj.clone();
    let mut lambda = f64::NAN;
    for _ in 0..POWER_ITERS {
        let scale = power.amax();
        if scale == 0.0 {
            return Ok(0.0);
        }
        power /= scale;
        let mut v = &power * &v0;
        let norm = v.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v /= norm;
        let next = v.dot(&(&jtj * &v));
        if (next - lambda).abs() <= POWER_TOL * next.abs() {
            return Ok(next.max(0.0).sqrt());
        }
        lambda = next;
        power = &power * &power;
    }
    Err(Error::PowerIteration { iters: POWER_ITERS })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralBound {
    pub j_u: f64,
    pub n_points: usize,
}

/// Maximum Jacobian spectral norm over `n_samples` support points plus any
/// `extra` latent points.
pub fn spectral_bound<R: Rng + ?Sized>(
    gen: &Generator,
    n_samples: usize,
    extra: &[Vec<f64>],
    rng: &mut R,
) -> Result<SpectralBound> {
    if n_samples == 0 {
        return Err(Error::Config("spectral_bound needs n_samples >= 1".into()));
    }
    let mut points: Vec<Vec<f64>> = (0..n_samples)
        .map(|_| {
            let (_, mut c) = gen.draw_c(rng);
            c.extend(gen.draw_s(rng));
            c
        })
        .collect();
    points.extend(extra.iter().cloned());
    spectral_bound_at(gen, &points)
}

pub fn spectral_bound_at(gen: &Generator, points: &[Vec<f64>]) -> Result<SpectralBound> {
    let mut j_u: f64 = 0.0;
    for z in points {
        j_u = j_u.max(spectral_norm(&jacobian(gen, z, JacobianMethod::Analytic)?)?);
    }
    Ok(SpectralBound {
        j_u,
        n_points: points.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldDistance {
    pub distance: f64,
    /// Set when the two manifolds meet numerically, or `c1 == c2`.
    pub intersects: bool,
}

fn boundary_points(d_s: usize, radius: f64, n: usize) -> Vec<Vec<f64>> {
    if d_s == 1 {
        return vec![vec![radius], vec![-radius]];
    }
    if d_s == 2 {
        return (0..n)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / n as f64;
                vec![radius * t.cos(), radius * t.sin()]
            })
            .collect();
    }
    let mut rng = crate::rng::stream_rng(0, d_s as u64, n as u64, crate::rng::Stream::Oracle);
    (0..n)
        .map(|_| {
            let u: Vec<f64> = (0..d_s).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            u.iter().map(|v| radius * v / norm).collect()
        })
        .collect()
}

fn project(s: &mut [f64], radius: f64) {
    let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        s.iter_mut().for_each(|v| *v *= radius / norm);
    }
}

fn concat(c: &[f64], s: &[f64]) -> Vec<f64> {
    let mut z = c.to_vec();
    z.extend_from_slice(s);
    z
}

/// Minimal distance between `g(c1, .)` and `g(c2, .)` over the boundary of
/// the source support: an `n_boundary^2` grid search, then projected gradient
/// descent on the sphere from the best pair.
pub fn manifold_distance(gen: &Generator, c1: &[f64], c2: &[f64], n_boundary: usize) -> Result<ManifoldDistance> {
    let spec = gen.spec();
    if c1.len() != spec.d_c || c2.len() != spec.d_c {
        return Err(Error::shape("manifold_distance", &[c1.len()], &[spec.d_c]));
    }
    if c1 == c2 {
        return Ok(ManifoldDistance {
            distance: 0.0,
            intersects: true,
        });
    }
    // Fixed argument order makes the result exactly symmetric.
    let (c1, c2) = if c1.partial_cmp(c2) == Some(std::cmp::Ordering::Greater) {
        (c2, c1)
    } else {
        (c1, c2)
    };
    let radius = spec.truncation_radius;
    let grid = boundary_points(spec.d_s, radius, n_boundary.max(1));
    let img = |c: &[f64]| -> Result<Vec<Vec<f64>>> { grid.iter().map(|s| gen.generate_one(&concat(c, s))).collect() };
    let (a, b) = (img(c1)?, img(c2)?);
    let mut best = (f64::INFINITY, 0, 0);
    for (i, p) in a.iter().enumerate() {
        for (k, q) in b.iter().enumerate() {
            let d: f64 = p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum();
            if d < best.0 {
                best = (d, i, k);
            }
        }
    }
    let mut s1 = grid[best.1].clone();
    let mut s2 = grid[best.2].clone();
    let sq = |s1: &[f64], s2: &[f64]| -> Result<f64> {
        let p = gen.generate_one(&concat(c1, s1))?;
        let q = gen.generate_one(&concat(c2, s2))?;
        Ok(p.iter().zip(&q).map(|(x, y)| (x - y).powi(2)).sum())
    };
    let mut f = best.0;
    let mut step = radius * 0.1;
    for _ in 0..200 {
        let p = gen.generate_one(&concat(c1, &s1))?;
        let q = gen.generate_one(&concat(c2, &s2))?;
        let r: Vec<f64> = p.iter().zip(&q).map(|(x, y)| x - y).collect();
        let j1 = gen.jacobian_at(&concat(c1, &s1))?;
        let j2 = gen.jacobian_at(&concat(c2, &s2))?;
        let d_c = spec.d_c;
        let g1: Vec<f64> = (0..spec.d_s)
            .map(|k| (0..r.len()).map(|i| j1[(i, d_c + k)] * r[i]).sum())
            .collect();
        let g2: Vec<f64> = (0..spec.d_s)
            .map(|k| -(0..r.len()).map(|i| j2[(i, d_c + k)] * r[i]).sum::<f64>())
            .collect();
        let gn = g1.iter().chain(&g2).map(|v| v * v).sum::<f64>().sqrt();
        if gn < 1e-14 {
            break;
        }
        let mut improved = false;
        while step > 1e-12 {
            let mut n1: Vec<f64> = s1.iter().zip(&g1).map(|(s, g)| s - step * g / gn).collect();
            let mut n2: Vec<f64> = s2.iter().zip(&g2).map(|(s, g)| s - step * g / gn).collect();
            project(&mut n1, radius);
            project(&mut n2, radius);
            let fnew = sq(&n1, &n2)?;
            if fnew < f {
                s1 = n1;
                s2 = n2;
                f = fnew;
                improved = true;
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let distance = f.max(0.0).sqrt();
    let scale = a.iter().chain(&b).flatten().map(|v| v.abs()).fold(1.0, f64::max);
    if distance <= 1e-9 * scale {
        return Ok(ManifoldDistance {
            distance: 0.0,
            intersects: true,
        });
    }
    Ok(ManifoldDistance {
        distance,
        intersects: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseBoundReport {
    pub j_u: f64,
    pub d_min: f64,
    pub bound: f64,
    pub distance: f64,
    pub satisfied: bool,
}

impl DenseBoundReport {
    pub fn assemble(j_u: f64, d_min: f64, distance: f64) -> Self {
        let bound = if j_u > 0.0 { d_min / (2.0 * j_u) } else { f64::INFINITY };
        DenseBoundReport {
            j_u,
            d_min,
            bound,
            distance,
            satisfied: distance <= bound,
        }
    }
}

/// Distance of `s` from the ball support of radius `radius`.
pub fn support_distance(s: &[f64], radius: f64) -> f64 {
    (s.iter().map(|v| v * v).sum::<f64>().sqrt() - radius).max(0.0)
}

/// Assembles the out-of-support distance condition for a target latent.
pub fn check_dense_bound<R: Rng + ?Sized>(
    gen: &Generator,
    s_tgt: &[f64],
    c_tgt: &[f64],
    n_samples: usize,
    n_boundary: usize,
    rng: &mut R,
) -> Result<DenseBoundReport> {
    let spec = gen.spec();
    if spec.task != crate::synthgen::Task::Classification {
        return Err(Error::Config("the dense bound needs a discrete invariant variable".into()));
    }
    let radius = spec.truncation_radius;
    let mut edge = s_tgt.to_vec();
    project(&mut edge, radius);
    let extra = vec![concat(c_tgt, s_tgt), concat(c_tgt, &edge)];
    let j_u = spectral_bound(gen, n_samples, &extra, rng)?.j_u;
    let mut d_min = f64::INFINITY;
    for c in gen.class_embeddings() {
        if c.as_slice() != c_tgt {
            d_min = d_min.min(manifold_distance(gen, c_tgt, c, n_boundary)?.distance);
        }
    }
    Ok(DenseBoundReport::assemble(j_u, d_min, support_distance(s_tgt, radius)))
}

/// Numerical rank with singular values above `rtol * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rtol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.singular_values();
    let max = sv.max();
    if max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&v| v > rtol * max).count()
}

fn rows_of(j: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), j.ncols(), |r, c| j[(rows[r], c)])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionCheck {
    pub p1: Vec<usize>,
    pub p2: Vec<usize>,
    pub rank_all: usize,
    pub rank_p1: usize,
    pub rank_p2: usize,
    pub dependent: bool,
}

/// Unordered splits of `rows` into two nonempty parts.
pub fn partitions(rows: &[usize]) -> Vec<(Vec<usize>, Vec<usize>)> {
    let n = rows.len();
    if n < 2 {
        return Vec::new();
    }
    // Pinning the last row to the second part enumerates each split once.
    (1u64..(1 << (n - 1)))
        .map(|mask| {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (i, &r) in rows.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    a.push(r);
                } else {
                    b.push(r);
                }
            }
            (a, b)
        })
        .collect()
}

/// Rank sub-additivity of `J` restricted to `rows` over every nontrivial
/// partition of `rows`.
pub fn mechanistic_dependence_check(j: &DMatrix<f64>, rows: &[usize]) -> Result<Vec<PartitionCheck>> {
    if rows.len() < 2 {
        return Err(Error::Config(format!(
            "mechanistic dependence needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let rank_all = numerical_rank(&rows_of(j, rows), RANK_RTOL);
    Ok(partitions(rows)
        .into_iter()
        .map(|(p1, p2)| {
            let rank_p1 = numerical_rank(&rows_of(j, &p1), RANK_RTOL);
            let rank_p2 = numerical_rank(&rows_of(j, &p2), RANK_RTOL);
            PartitionCheck {
                dependent: rank_all < rank_p1 + rank_p2,
                p1,
                p2,
                rank_all,
                rank_p1,
                rank_p2,
            }
        })
        .collect())
}

/// The check at `z` over the generator's own `c`-exclusive rows.
pub fn mechanistic_dependence_at(gen: &Generator, z: &[f64]) -> Result<Vec<PartitionCheck>> {
    let report = jacobian_report(gen, z, INFLUENCE_TOL)?;
    mechanistic_dependence_check(&report.j, &report.sets.i_c_minus_s)
}

/// A smooth map from latents to observations whose Jacobian can be compared
/// with the true generator's.
pub trait LatentMap {
    /// The estimated latent for an observation `x` generated from `z`.
    fn latent_for(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>>;
    fn jacobian(&self, z_hat: &[f64]) -> Result<DMatrix<f64>>;
}

impl LatentMap for Generator {
    fn latent_for(&self, _x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        Ok(z.to_vec())
    }

    fn jacobian(&self, z_hat: &[f64]) -> Result<DMatrix<f64>> {
        self.jacobian_at(z_hat)
    }
}

/// `g(A z_hat)`: the generator behind an invertible latent reparameterisation.
pub struct Reparameterized<'a> {
    pub gen: &'a Generator,
    pub a: DMatrix<f64>,
}

impl LatentMap for Reparameterized<'_> {
    fn latent_for(&self, _x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let zh = self
            .a
            .clone()
            .lu()
            .solve(&DVector::from_column_slice(z))
            .ok_or_else(|| Error::Config("latent map is singular".into()))?;
        Ok(zh.iter().copied().collect())
    }

    fn jacobian(&self, z_hat: &[f64]) -> Result<DMatrix<f64>> {
        let z = &self.a * DVector::from_column_slice(z_hat);
        Ok(self.gen.jacobian_at(z.as_slice())? * &self.a)
    }
}

/// Jacobian of an MLP at a single input by reverse mode, one row at a time.
pub fn mlp_jacobian(mlp: &Mlp, z: &[f64]) -> Result<DMatrix<f64>> {
    let m = mlp.out_dim();
    let mut j = DMatrix::zeros(m, z.len());
    for i in 0..m {
        let mut g = Graph::new();
        let bound = mlp.bind(&mut g);
        let zv = g.leaf(Tensor::row(z));
        let out = bound.forward(&mut g, zv)?;
        let yi = g.slice_cols(out, i, i + 1)?;
        let yi = g.sum(yi)?;
        let grads = g.backward(yi)?;
        for (k, v) in grads.get(zv).data().iter().enumerate() {
            j[(i, k)] = *v;
        }
    }
    Ok(j)
}

impl LatentMap for EstimatorModel {
    fn latent_for(&self, x: &[f64], _z: &[f64]) -> Result<Vec<f64>> {
        let enc = self.encode(&Tensor::row(x))?;
        let mut zh = enc.mu_c.into_data();
        zh.extend(enc.mu_s.into_data());
        Ok(zh)
    }

    fn jacobian(&self, z_hat: &[f64]) -> Result<DMatrix<f64>> {
        mlp_jacobian(&self.decoder, z_hat)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEqualityReport {
    /// Mismatch count at the default relative tolerance.
    pub mismatches: usize,
    pub comparisons: usize,
    /// `(relative tolerance, mismatch count)` over the sweep.
    pub sweep: Vec<(f64, usize)>,
}

/// Compares `rank([J_g(z)]_S)` with `rank([J_est(z_hat)]_S)` for every point
/// and row set.
pub fn rank_equality_check(
    gen: &Generator,
    est: &dyn LatentMap,
    zs: &[Vec<f64>],
    row_sets: &[Vec<usize>],
) -> Result<RankEqualityReport> {
    let mut pairs = Vec::with_capacity(zs.len());
    for z in zs {
        let x = gen.generate_one(z)?;
        let jg = gen.jacobian_at(z)?;
        let je = est.jacobian(&est.latent_for(&x, z)?)?;
        if je.nrows() != jg.nrows() {
            return Err(Error::shape("rank_equality_check", &[jg.nrows()], &[je.nrows()]));
        }
        pairs.push((jg, je));
    }
    let count = |rtol: f64| {
        let mut n = 0;
        for (jg, je) in &pairs {
            for s in row_sets {
                if numerical_rank(&rows_of(jg, s), rtol) != numerical_rank(&rows_of(je, s), rtol) {
                    n += 1;
                }
            }
        }
        n
    };
    Ok(RankEqualityReport {
        mismatches: count(RANK_RTOL),
        comparisons: pairs.len() * row_sets.len(),
        sweep: RANK_SWEEP.iter().map(|&t| (t, count(t))).collect(),
    })
}
