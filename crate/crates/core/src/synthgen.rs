//! Ground-truth generating processes `x = g(c, s)` and their sampling.
//!
//! Three layouts are supported:
//! * `Dense`: a square leaky-ReLU MLP on `concat(c, s)`, so `s` can reach every
//!   output coordinate.
//! * `Sparse`: `v = MLP(c)`; `x = concat(v, v[dup] + s)`. Only the `d_s`
//!   duplicated coordinates see `s`.
//! * `Scoped(k)`: the dense MLP, with the `s` input zeroed for every output row
//!   outside the last `k` rows. `Scoped(d_x)` equals `Dense`.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Graph, Mlp, Tensor, Var};
use crate::rng::{stream_rng, Stream};

pub const GENERATOR_ALPHA: f64 = 0.2;
const MAX_LAYER_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    Dense,
    Sparse,
    Scoped(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub d_c: usize,
    pub d_s: usize,
    pub d_x: usize,
    pub mode: ShiftMode,
    pub task: Task,
    pub mlp_layers: usize,
    pub condition_limit: f64,
    pub truncation_radius: f64,
    /// Standard deviation of the layer biases.
    pub bias_scale: f64,
    /// Apply a random permutation to the output coordinates.
    pub scramble_outputs: bool,
    /// Force every layer to the identity (test hook).
    pub identity: bool,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            d_c: 4,
            d_s: 2,
            d_x: 6,
            mode: ShiftMode::Dense,
            task: Task::Classification,
            mlp_layers: 4,
            condition_limit: 10.0,
            truncation_radius: 2.0,
            bias_scale: 0.5,
            scramble_outputs: false,
            identity: false,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn d_z(&self) -> usize {
        self.d_c + self.d_s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_c == 0 || self.d_s == 0 {
            return bad("d_c and d_s must be positive");
        }
        if self.mlp_layers == 0 {
            return bad("mlp_layers must be >= 1");
        }
        if self.condition_limit <= 1.0 {
            return bad("condition_limit must exceed 1");
        }
        if self.truncation_radius <= 0.0 {
            return bad("truncation_radius must be positive");
        }
        if self.d_x != self.d_z() {
            return bad("d_x must equal d_c + d_s");
        }
        match self.mode {
            ShiftMode::Sparse if self.d_s > self.d_c => bad("sparse mode needs d_s <= d_c"),
            ShiftMode::Scoped(k) if k < self.d_s || k > self.d_x => bad("scope must lie in d_s..=d_x"),
            _ => Ok(()),
        }
    }
}

/// Ground-truth latent pair `z = [c, s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub c: Vec<f64>,
    pub s: Vec<f64>,
}

impl LatentSample {
    pub fn z(&self) -> Vec<f64> {
        let mut z = self.c.clone();
        z.extend_from_slice(&self.s);
        z
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Value(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Class(Vec<usize>),
    Value(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::Value(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Label {
        match self {
            Labels::Class(v) => Label::Class(v[i]),
            Labels::Value(v) => Label::Value(v[i]),
        }
    }
}

/// Source sample with the ground-truth latents kept for oracle use.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub xs: Tensor,
    pub labels: Labels,
    pub cs: Tensor,
    pub ss: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSample {
    pub x: Vec<f64>,
    pub label: Label,
    pub latent: LatentSample,
}

#[derive(Clone, Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    net: Mlp,
    dup: Vec<usize>,
    perm: Vec<usize>,
    class_embeddings: Vec<Vec<f64>>,
    scale: f64,
}

fn condition_number(w: &Tensor) -> f64 {
    let m = DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Builds a generator; layer matrices are redrawn until their spectral
/// condition number is within `spec.condition_limit`.
pub fn build_generator(spec: &GeneratorSpec) -> Result<Generator> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, 0, 0, Stream::Generator);
    let width = match spec.mode {
        ShiftMode::Sparse => spec.d_c,
        _ => spec.d_z(),
    };
    let mut weights = Vec::with_capacity(spec.mlp_layers);
    let mut biases = Vec::with_capacity(spec.mlp_layers);
    for _ in 0..spec.mlp_layers {
        if spec.identity {
            weights.push(Tensor::identity(width));
            biases.push(Tensor::zeros(1, width));
            continue;
        }
        let std = 1.0 / (width as f64).sqrt();
        let mut accepted = None;
        for _ in 0..MAX_LAYER_ATTEMPTS {
            let w = Tensor::matrix(width, width, normal_vec(&mut rng, width * width).iter().map(|v| v * std).collect());
            if condition_number(&w) <= spec.condition_limit {
                accepted = Some(w);
                break;
            }
        }
        let w = accepted.ok_or(Error::ConditionLimit {
            limit: spec.condition_limit,
            attempts: MAX_LAYER_ATTEMPTS,
        })?;
        weights.push(w);
        let b = normal_vec(&mut rng, width).iter().map(|v| v * spec.bias_scale).collect();
        biases.push(Tensor::matrix(1, width, b));
    }
    let net = Mlp {
        weights,
        biases,
        alpha: GENERATOR_ALPHA,
    };

    let dup = match spec.mode {
        ShiftMode::Sparse if spec.identity => (0..spec.d_s).collect(),
        ShiftMode::Sparse => rand::seq::index::sample(&mut rng, spec.d_c, spec.d_s).into_vec(),
        _ => Vec::new(),
    };
    let mut perm: Vec<usize> = (0..spec.d_x).collect();
    if spec.scramble_outputs {
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
    }
    let class_embeddings = match spec.task {
        Task::Classification => {
            let c1 = normal_vec(&mut rng, spec.d_c);
            let c2 = normal_vec(&mut rng, spec.d_c).iter().map(|v| v + 2.0).collect();
            vec![c1, c2]
        }
        Task::Regression => Vec::new(),
    };
    Ok(Generator {
        spec: spec.clone(),
        net,
        dup,
        perm,
        class_embeddings,
        scale: 1.0,
    })
}

impl Generator {
    /// Linear generator `x = A z` (one layer, no activation).
    pub fn linear(spec: &GeneratorSpec, a: &Tensor) -> Result<Generator> {
        let mut s = spec.clone();
        s.mode = ShiftMode::Dense;
        s.mlp_layers = 1;
        s.identity = true;
        let mut g = build_generator(&s)?;
        if a.rows() != s.d_x || a.cols() != s.d_z() {
            return Err(Error::shape("linear generator", a.shape(), &[s.d_x, s.d_z()]));
        }
        g.net.weights[0] = a.transpose();
        Ok(g)
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn class_embeddings(&self) -> &[Vec<f64>] {
        &self.class_embeddings
    }

    pub fn with_class_embeddings(mut self, embeddings: Vec<Vec<f64>>) -> Self {
        self.class_embeddings = embeddings;
        self
    }

    /// Multiplies every output by `k`.
    pub fn scaled(mut self, k: f64) -> Self {
        self.scale *= k;
        self
    }

    /// Output coordinates (after permutation) that receive `s` by construction.
    pub fn planted_s_rows(&self) -> Vec<usize> {
        let raw: Vec<usize> = match self.spec.mode {
            ShiftMode::Dense => (0..self.spec.d_x).collect(),
            ShiftMode::Sparse => (self.spec.d_c..self.spec.d_x).collect(),
            ShiftMode::Scoped(k) => (self.spec.d_x - k..self.spec.d_x).collect(),
        };
        let mut rows: Vec<usize> = (0..self.spec.d_x).filter(|i| raw.contains(&self.perm[*i])).collect();
        rows.sort_unstable();
        rows
    }

    /// Records `g` on a graph for a batch `z: [n, d_z]`.
    pub fn forward_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let spec = &self.spec;
        let raw = match spec.mode {
            ShiftMode::Dense => self.net.bind(g).forward(g, z)?,
            ShiftMode::Sparse => {
                let c = g.slice_cols(z, 0, spec.d_c)?;
                let s = g.slice_cols(z, spec.d_c, spec.d_z())?;
                let v = self.net.bind(g).forward(g, c)?;
                let cols: Vec<Var> = self
                    .dup
                    .iter()
                    .map(|&i| g.slice_cols(v, i, i + 1))
                    .collect::<Result<_>>()?;
                let d = g.concat_cols(&cols)?;
                let w = g.add(d, s)?;
                g.concat_cols(&[v, w])?
            }
            ShiftMode::Scoped(k) => {
                let bound = self.net.bind(g);
                let full = bound.forward(g, z)?;
                let keep_c: Vec<f64> = (0..spec.d_z()).map(|j| if j < spec.d_c { 1.0 } else { 0.0 }).collect();
                let keep_c = g.leaf(Tensor::row(&keep_c));
                let z_c = g.mul(z, keep_c)?;
                let c_only = bound.forward(g, z_c)?;
                let mask: Vec<f64> = (0..spec.d_x).map(|i| if i >= spec.d_x - k { 1.0 } else { 0.0 }).collect();
                let inv: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
                let mask = g.leaf(Tensor::row(&mask));
                let inv = g.leaf(Tensor::row(&inv));
                let a = g.mul(full, mask)?;
                let b = g.mul(c_only, inv)?;
                g.add(a, b)?
            }
        };
        let permuted = if self.perm.iter().enumerate().all(|(i, &p)| i == p) {
            raw
        } else {
            let cols: Vec<Var> = self
                .perm
                .iter()
                .map(|&p| g.slice_cols(raw, p, p + 1))
                .collect::<Result<_>>()?;
            g.concat_cols(&cols)?
        };
        if self.scale == 1.0 {
            Ok(permuted)
        } else {
            g.scale(permuted, self.scale)
        }
    }

    /// Evaluates `g` on a batch `z: [n, d_z]`.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.spec.d_z() {
            return Err(Error::shape("generate", z.shape(), &[z.rows(), self.spec.d_z()]));
        }
        let mut g = Graph::new();
        let zv = g.leaf(z.clone());
        let x = self.forward_graph(&mut g, zv)?;
        Ok(g.value(x).clone())
    }

    pub fn generate_one(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.generate(&Tensor::row(z))?.into_data())
    }

    /// Jacobian `d_x x d_z` by reverse mode, one backward sweep per output.
    pub fn jacobian_at(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        let mut g = Graph::new();
        let zv = g.leaf(Tensor::row(z));
        let x = self.forward_graph(&mut g, zv)?;
        let d_x = g.value(x).cols();
        let mut j = DMatrix::zeros(d_x, z.len());
        for i in 0..d_x {
            let xi = g.slice_cols(x, i, i + 1)?;
            let grads = g.backward(xi)?;
            let row = grads.get(zv);
            for (k, v) in row.data().iter().enumerate() {
                j[(i, k)] = *v;
            }
        }
        Ok(j)
    }

    pub fn draw_s<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let r2 = self.spec.truncation_radius.powi(2);
        loop {
            let s = normal_vec(rng, self.spec.d_s);
            if s.iter().map(|v| v * v).sum::<f64>() <= r2 {
                return s;
            }
        }
    }

    /// Draws `(label, c)` from `p(y, c)`.
    pub fn draw_c<R: Rng + ?Sized>(&self, rng: &mut R) -> (Label, Vec<f64>) {
        match self.spec.task {
            Task::Classification => {
                let k = usize::from(rng.gen_bool(0.5));
                (Label::Class(k), self.class_embeddings[k].clone())
            }
            Task::Regression => {
                let y: f64 = rng.gen_range(0.0..4.0);
                let c = normal_vec(rng, self.spec.d_c).iter().map(|v| v + y).collect();
                (Label::Value(y), c)
            }
        }
    }
}

pub fn sample_source<R: Rng + ?Sized>(gen: &Generator, n: usize, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("sample_source needs n >= 1".into()));
    }
    let spec = gen.spec();
    let mut zs = Vec::with_capacity(n * spec.d_z());
    let mut cs = Vec::with_capacity(n * spec.d_c);
    let mut ss = Vec::with_capacity(n * spec.d_s);
    let mut class = Vec::new();
    let mut value = Vec::new();
    for _ in 0..n {
        let (label, c) = gen.draw_c(rng);
        let s = gen.draw_s(rng);
        match label {
            Label::Class(k) => class.push(k),
            Label::Value(y) => value.push(y),
        }
        zs.extend_from_slice(&c);
        zs.extend_from_slice(&s);
        cs.extend_from_slice(&c);
        ss.extend_from_slice(&s);
    }
    let xs = gen.generate(&Tensor::matrix(n, spec.d_z(), zs))?;
    let labels = match spec.task {
        Task::Classification => Labels::Class(class),
        Task::Regression => Labels::Value(value),
    };
    Ok(Dataset {
        xs,
        labels,
        cs: Tensor::matrix(n, spec.d_c, cs),
        ss: Tensor::matrix(n, spec.d_s, ss),
    })
}

/// One target at `||s|| = distance` in a uniformly random direction.
pub fn sample_target<R: Rng + ?Sized>(gen: &Generator, distance: f64, rng: &mut R) -> Result<TargetSample> {
    let spec = gen.spec();
    if !(distance == 0.0 || distance > spec.truncation_radius) {
        return Err(Error::Config(format!(
            "target distance {distance} must be 0 or exceed the support radius {}",
            spec.truncation_radius
        )));
    }
    let (label, c) = gen.draw_c(rng);
    let dir = loop {
        let u = normal_vec(rng, spec.d_s);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            break u.into_iter().map(|v| v / norm).collect::<Vec<_>>();
        }
    };
    let s: Vec<f64> = dir.iter().map(|v| v * distance).collect();
    let latent = LatentSample { c, s };
    let x = gen.generate_one(&latent.z())?;
    Ok(TargetSample { x, label, latent })
}

/// Gauss-Newton inversion of `g` starting from `z0`, with step halving.
pub fn invert(gen: &Generator, x: &[f64], z0: &[f64], iters: usize) -> Result<Vec<f64>> {
    let residual = |z: &[f64]| -> Result<(Vec<f64>, f64)> {
        let r: Vec<f64> = gen.generate_one(z)?.iter().zip(x).map(|(a, b)| a - b).collect();
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok((r, n))
    };
    let mut z = z0.to_vec();
    let (mut r, mut norm) = residual(&z)?;
    for _ in 0..iters {
        if norm < 1e-13 {
            break;
        }
        let j = gen.jacobian_at(&z)?;
        let step = j
            .svd(true, true)
            .solve(&nalgebra::DVector::from_vec(r.clone()), 1e-14)
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = z.iter().zip(step.iter()).map(|(zi, d)| zi - t * d).collect();
            let (rc, nc) = residual(&cand)?;
            if nc < norm || t < 1e-6 {
                z = cand;
                r = rc;
                norm = nc;
                break;
            }
            t *= 0.5;
        }
    }
    Ok(z)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.xs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent(&self, i: usize) -> LatentSample {
        LatentSample {
            c: self.cs.row_slice(i).to_vec(),
            s: self.ss.row_slice(i).to_vec(),
        }
    }

    /// CSV with header `x0..,label,c0..,s0..`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let (dx, dc, ds) = (self.xs.cols(), self.cs.cols(), self.ss.cols());
        let mut header: Vec<String> = (0..dx).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        header.extend((0..dc).map(|i| format!("c{i}")));
        header.extend((0..ds).map(|i| format!("s{i}")));
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut fields: Vec<String> = self.xs.row_slice(i).iter().map(|v| v.to_string()).collect();
            fields.push(match self.labels.get(i) {
                Label::Class(k) => k.to_string(),
                Label::Value(y) => y.to_string(),
            });
            fields.extend(self.cs.row_slice(i).iter().map(|v| v.to_string()));
            fields.extend(self.ss.row_slice(i).iter().map(|v| v.to_string()));
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, task: Task) -> Result<Dataset> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        })??;
        let cols: Vec<&str> = header.split(',').collect();
        let count = |p: char| cols.iter().filter(|c| c.starts_with(p) && c[1..].parse::<usize>().is_ok()).count();
        let (dx, dc, ds) = (count('x'), count('c'), count('s'));
        if cols.len() != dx + dc + ds + 1 || cols.get(dx) != Some(&"label") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unexpected header {header}"),
            });
        }
        let (mut xs, mut cs, mut ss) = (Vec::new(), Vec::new(), Vec::new());
        let (mut class, mut value) = (Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            let line = line?;
            let bad = |msg: String| Error::Parse { line: i + 2, msg };
            let f: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|e| bad(e.to_string())))
                .collect::<Result<_>>()?;
            if f.len() != cols.len() {
                return Err(bad(format!("expected {} fields, got {}", cols.len(), f.len())));
            }
            xs.extend_from_slice(&f[..dx]);
            match task {
                Task::Classification => class.push(f[dx] as usize),
                Task::Regression => value.push(f[dx]),
            }
            cs.extend_from_slice(&f[dx + 1..dx + 1 + dc]);
            ss.extend_from_slice(&f[dx + 1 + dc..]);
        }
        let n = xs.len() / dx.max(1);
        if n == 0 {
            return Err(Error::Parse {
                line: 2,
                msg: "no data rows".into(),
            });
        }
        Ok(Dataset {
            xs: Tensor::matrix(n, dx, xs),
            labels: match task {
                Task::Classification => Labels::Class(class),
                Task::Regression => Labels::Value(value),
            },
            cs: Tensor::matrix(n, dc, cs),
            ss: Tensor::matrix(n, ds, ss),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(mode: ShiftMode) -> GeneratorSpec {
        GeneratorSpec {
            mode,
            seed: 5,
            ..Default::default()
        }
    }

    fn fd_jacobian(gen: &Generator, z: &[f64], h: f64) -> DMatrix<f64> {
        let d_x = gen.spec().d_x;
        let mut j = DMatrix::zeros(d_x, z.len());
        for k in 0..z.len() {
            let mut p = z.to_vec();
            p[k] += h;
            let mut m = z.to_vec();
            m[k] -= h;
            let (fp, fm) = (gen.generate_one(&p).unwrap(), gen.generate_one(&m).unwrap());
            for i in 0..d_x {
                j[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        j
    }

    #[test]
    fn identity_hook_gives_identity_map() {
        let g = build_generator(&GeneratorSpec {
            mlp_layers: 1,
            identity: true,
            ..spec(ShiftMode::Dense)
        })
        .unwrap();
        let z = [0.3, -1.0, 2.0, 0.5, 1.5, -0.2];
        assert_eq!(g.generate_one(&z).unwrap(), z.to_vec());
        assert!((condition_number(&g.net().weights[0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_layers_respect_condition_limit() {
        for mode in [ShiftMode::Dense, ShiftMode::Sparse] {
            let g = build_generator(&spec(mode)).unwrap();
            assert_eq!(g.net().n_layers(), 4);
            for w in &g.net().weights {
                assert!(condition_number(w) <= 10.0);
            }
        }
    }

    #[test]
    fn impossible_condition_limit_errors() {
        let r = build_generator(&GeneratorSpec {
            condition_limit: 1.0 + 1e-9,
            ..spec(ShiftMode::Dense)
        });
        assert!(matches!(r, Err(Error::Config(_)) | Err(Error::ConditionLimit { .. })));
        let r = build_generator(&GeneratorSpec {
            condition_limit: 1.001,
            ..spec(ShiftMode::Dense)
        });
        assert!(matches!(r, Err(Error::ConditionLimit { .. })));
    }

    #[test]
    fn sparse_s_columns_touch_only_duplicated_rows() {
        let g = build_generator(&spec(ShiftMode::Sparse)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let (_, c) = g.draw_c(&mut rng);
            let s = g.draw_s(&mut rng);
            let z = LatentSample { c, s }.z();
            let j = fd_jacobian(&g, &z, 1e-5);
            for i in 0..6 {
                let touched = (4..6).any(|k| j[(i, k)].abs() > 1e-6);
                assert_eq!(touched, i >= 4, "row {i}");
            }
        }
    }

    #[test]
    fn dense_s_reaches_every_row_mostly() {
        let g = build_generator(&spec(ShiftMode::Dense)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut dense = 0;
        for _ in 0..100 {
            let (_, c) = g.draw_c(&mut rng);
            let z = LatentSample { c, s: g.draw_s(&mut rng) }.z();
            let j = g.jacobian_at(&z).unwrap();
            if (0..6).all(|i| (4..6).any(|k| j[(i, k)].abs() > 1e-6)) {
                dense += 1;
            }
        }
        assert!(dense >= 90, "{dense}/100");
    }

    #[test]
    fn scoped_generator_limits_s_rows() {
        for k in 2..=6 {
            let g = build_generator(&spec(ShiftMode::Scoped(k))).unwrap();
            let z = [0.1, 0.2, -0.3, 1.0, 0.5, -0.7];
            let j = g.jacobian_at(&z).unwrap();
            for i in 0..6 {
                let touched = (4..6).any(|c| j[(i, c)].abs() > 1e-12);
                assert_eq!(touched, i >= 6 - k, "scope {k} row {i}");
            }
            assert_eq!(g.planted_s_rows(), (6 - k..6).collect::<Vec<_>>());
        }
        let dense = build_generator(&spec(ShiftMode::Dense)).unwrap();
        let full = build_generator(&spec(ShiftMode::Scoped(6))).unwrap();
        let z = [0.4, -0.2, 0.3, 1.0, 1.5, -0.7];
        assert_eq!(dense.generate_one(&z).unwrap(), full.generate_one(&z).unwrap());
    }

    #[test]
    fn source_samples_stay_in_support_and_balance() {
        let g = build_generator(&spec(ShiftMode::Dense)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = sample_source(&g, 10_000, &mut rng).unwrap();
        let mut mean = [0.0; 2];
        for i in 0..ds.len() {
            let s = ds.ss.row_slice(i);
            assert!(s.iter().map(|v| v * v).sum::<f64>().sqrt() <= 2.0);
            mean[0] += s[0] / 10_000.0;
            mean[1] += s[1] / 10_000.0;
        }
        assert!((mean[0].powi(2) + mean[1].powi(2)).sqrt() < 0.05);
        let Labels::Class(labels) = &ds.labels else { panic!() };
        let ones = labels.iter().filter(|&&k| k == 1).count() as f64;
        assert!((ones - 5000.0).abs() <= 3.0 * 50.0);
        // labels agree with the generating c
        for (i, &k) in labels.iter().enumerate() {
            assert_eq!(ds.cs.row_slice(i), g.class_embeddings()[k].as_slice());
        }
    }

    #[test]
    fn regression_labels_follow_uniform_and_c_centres() {
        let g = build_generator(&GeneratorSpec {
            task: Task::Regression,
            ..spec(ShiftMode::Sparse)
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = sample_source(&g, 4000, &mut rng).unwrap();
        let Labels::Value(ys) = &ds.labels else { panic!() };
        assert!(ys.iter().all(|&y| (0.0..4.0).contains(&y)));
        let resid: f64 = (0..ds.len())
            .map(|i| ds.cs.row_slice(i).iter().map(|c| c - ys[i]).sum::<f64>())
            .sum::<f64>()
            / (4.0 * 4000.0);
        assert!(resid.abs() < 0.05);
    }

    #[test]
    fn target_distance_is_exact() {
        let g = build_generator(&spec(ShiftMode::Dense)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t0 = sample_target(&g, 0.0, &mut rng).unwrap();
        assert!(t0.latent.s.iter().all(|&v| v == 0.0));
        let t = sample_target(&g, 30.0, &mut rng).unwrap();
        let norm = t.latent.s.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 30.0).abs() < 1e-9);
        assert!(sample_target(&g, 1.0, &mut rng).is_err());
    }

    #[test]
    fn dense_far_target_leaves_source_bounding_box() {
        let g = build_generator(&spec(ShiftMode::Dense)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ds = sample_source(&g, 10_000, &mut rng).unwrap();
        for _ in 0..5 {
            let t = sample_target(&g, 30.0, &mut rng).unwrap();
            let outside = (0..6).any(|j| {
                let col = (0..ds.len()).map(|i| ds.xs.get(i, j));
                let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
                t.x[j] < lo || t.x[j] > hi
            });
            assert!(outside);
        }
    }

    #[test]
    fn gauss_newton_recovers_latents() {
        for mode in [ShiftMode::Dense, ShiftMode::Sparse] {
            let g = build_generator(&spec(mode)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            for _ in 0..100 {
                let (_, c) = g.draw_c(&mut rng);
                let z = LatentSample { c, s: g.draw_s(&mut rng) }.z();
                let x = g.generate_one(&z).unwrap();
                let z0: Vec<f64> = z.iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
                let zh = invert(&g, &x, &z0, 50).unwrap();
                let err = zh.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(err < 1e-6, "{mode:?}: {err}");
            }
        }
    }

    #[test]
    fn seed_determinism_gives_identical_bytes() {
        let bytes = || {
            let g = build_generator(&spec(ShiftMode::Sparse)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let ds = sample_source(&g, 200, &mut rng).unwrap();
            let mut out = Vec::new();
            ds.write_csv(&mut out).unwrap();
            out
        };
        assert_eq!(bytes(), bytes());
    }

    #[test]
    fn csv_round_trips() {
        let g = build_generator(&spec(ShiftMode::Dense)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ds = sample_source(&g, 50, &mut rng).unwrap();
        let mut out = Vec::new();
        ds.write_csv(&mut out).unwrap();
        let header = String::from_utf8(out.clone()).unwrap();
        assert!(header.starts_with("x0,x1,x2,x3,x4,x5,label,c0,c1,c2,c3,s0,s1\n"));
        let back = Dataset::read_csv(&out[..], Task::Classification).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn malformed_csv_reports_line() {
        let text = "x0,x1,label,c0,s0\n1,2,0,3,4\n1,2,zero,3,4\n";
        match Dataset::read_csv(text.as_bytes(), Task::Classification) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
