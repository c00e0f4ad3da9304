use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Fully connected network with leaky-ReLU between layers and a linear output.
/// Weights are stored `[fan_in, fan_out]` so a batch `x: [n, fan_in]` maps to
/// `x W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub alpha: f64,
}

pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    alpha: f64,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], alpha: f64, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let wd = (0..w[0] * w[1]).map(|_| rng.gen_range(-bound..bound)).collect();
            let bd = (0..w[1]).map(|_| rng.gen_range(-bound..bound)).collect();
            weights.push(Tensor::matrix(w[0], w[1], wd));
            biases.push(Tensor::matrix(1, w[1], bd));
        }
        Mlp { weights, biases, alpha }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.weights[0].rows()];
        d.extend(self.weights.iter().map(|w| w.cols()));
        d
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.last().map_or(0, |w| w.cols())
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Graph-free evaluation.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.matmul(w).expect("mlp layer dims");
            let c = z.cols();
            let bd = b.data();
            for (k, v) in z.data_mut().iter_mut().enumerate() {
                *v += bd[k % c];
                if i < last && *v <= 0.0 {
                    *v *= self.alpha;
                }
            }
            h = z;
        }
        h
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMlp {
        let layers = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| (g.leaf(w.clone()), g.leaf(b.clone())))
            .collect();
        BoundMlp {
            layers,
            alpha: self.alpha,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = g.matmul(h, w)?;
            h = g.add(z, b)?;
            if i < last {
                h = g.leaky_relu(h, self.alpha)?;
            }
        }
        Ok(h)
    }

    /// Parameter handles in the same order as [`Mlp::params`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}
