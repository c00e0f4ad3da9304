//! Source-free adaptation on a single target input: entropy minimisation of the
//! classifier output, optionally through a soft mask over the full code
//! `[c_hat, s_hat]` with an l1 penalty on the mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EstimatorModel, LEAKY_ALPHA};
use crate::ndgrad::{adam_step, sigmoid, AdamState, Graph, Mlp, Tensor, Var};
use crate::synthgen::Task;

const LOG_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)
const COLLAPSE_STEPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    EncoderOnly,
    EncoderAndClassifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub steps: usize,
    pub lr: f64,
    pub update_scope: UpdateScope,
    pub use_mask: bool,
    pub l1_weight: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            steps: 1,
            lr: 2e-3,
            update_scope: UpdateScope::EncoderAndClassifier,
            use_mask: false,
            l1_weight: 0.0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("adaptation lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.l1_weight.is_finite() && self.l1_weight >= 0.0) {
            return Err(Error::Config(format!("l1 weight must be finite and >= 0, got {}", self.l1_weight)));
        }
        Ok(())
    }
}

/// Multiplicative gate `sigmoid(params)` over the `d_z` code entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftMask {
    pub params: Tensor,
    pub l1_weight: f64,
}

impl SoftMask {
    /// All parameters zero, so every gate starts at 0.5.
    pub fn new(d_z: usize, l1_weight: f64) -> Self {
        SoftMask {
            params: Tensor::zeros(1, d_z),
            l1_weight,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.params.data().iter().map(|&p| sigmoid(p)).collect()
    }
}

/// `l1_weight * sum(m)`; the gates are positive so this is their l1 norm.
pub fn mask_sparsity_loss(mask: &SoftMask) -> f64 {
    mask.l1_weight * mask.values().iter().sum::<f64>()
}

fn mask_sparsity_graph(g: &mut Graph, gates: Var, l1_weight: f64) -> Result<Var> {
    let s = g.sum(gates)?;
    g.scale(s, l1_weight)
}

/// Mean row entropy of `softmax(logits)`, with `log p` floored at `ln(1e-12)`.
pub fn entropy(logits: &Tensor) -> f64 {
    let mut total = 0.0;
    for r in 0..logits.rows() {
        let row = logits.row_slice(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total -= row
            .iter()
            .map(|v| {
                let lp = (v - lse).max(LOG_FLOOR);
                lp.exp() * lp
            })
            .sum::<f64>();
    }
    total / logits.rows() as f64
}

/// Classifier reading the gated full code. Built from the trained head: its
/// `c_hat` rows are scaled by the inverse of the initial gate so the masked
/// predictor starts out identical to the unmasked one; `s_hat` rows start at 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedHead {
    pub mask: SoftMask,
    pub head: Mlp,
}

impl MaskedHead {
    pub fn from_model(model: &EstimatorModel, l1_weight: f64) -> Self {
        let mask = SoftMask::new(model.d_z(), l1_weight);
        let gate0 = mask.values();
        let w = &model.head.weights[0];
        let n_out = w.cols();
        let mut data = vec![0.0; model.d_z() * n_out];
        for i in 0..model.d_c {
            for j in 0..n_out {
                data[i * n_out + j] = w.get(i, j) / gate0[i];
            }
        }
        let head = Mlp {
            weights: vec![Tensor::matrix(model.d_z(), n_out, data)],
            biases: vec![model.head.biases[0].clone()],
            alpha: LEAKY_ALPHA,
        };
        MaskedHead { mask, head }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptedModel {
    pub model: EstimatorModel,
    pub masked_head: Option<MaskedHead>,
}

impl AdaptedModel {
    pub fn unmasked(model: EstimatorModel) -> Self {
        AdaptedModel {
            model,
            masked_head: None,
        }
    }

    /// Classifier logits from posterior means.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let enc = self.model.encode(x)?;
        match &self.masked_head {
            None => Ok(self.model.head.forward(&enc.mu_c)),
            Some(mh) => {
                let gates = mh.mask.values();
                let d_c = self.model.d_c;
                let mut z = Vec::with_capacity(x.rows() * self.model.d_z());
                for r in 0..x.rows() {
                    z.extend(enc.mu_c.row_slice(r).iter().zip(&gates[..d_c]).map(|(v, m)| v * m));
                    z.extend(enc.mu_s.row_slice(r).iter().zip(&gates[d_c..]).map(|(v, m)| v * m));
                }
                Ok(mh.head.forward(&Tensor::matrix(x.rows(), self.model.d_z(), z)))
            }
        }
    }

    pub fn predict_classes(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row_slice(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub adapted: AdaptedModel,
    /// Entropy before each step, followed by the entropy after the last one.
    pub entropies: Vec<f64>,
}

/// Entropy minimisation on `x_tgt` alone. The input model is left untouched;
/// the decoder is never updated. Aborts once the minimised objective (entropy
/// plus the mask penalty) has risen for ten consecutive steps.
pub fn adapt_entropy(model: &EstimatorModel, x_tgt: &[f64], cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if model.task != Task::Classification {
        return Err(Error::Config("entropy adaptation needs a classification model".into()));
    }
    if x_tgt.len() != model.d_x {
        return Err(Error::shape("adapt_entropy", &[1, x_tgt.len()], &[1, model.d_x]));
    }
    let mut adapted = AdaptedModel {
        model: model.clone(),
        masked_head: cfg.use_mask.then(|| MaskedHead::from_model(model, cfg.l1_weight)),
    };
    let x = Tensor::row(x_tgt);
    let mut entropies = vec![entropy(&adapted.logits(&x)?)];
    if cfg.steps == 0 {
        return Ok(AdaptOutcome { adapted, entropies });
    }
    let mut adam = AdamState::new(trainable(&mut adapted, cfg.update_scope).into_iter().map(|p| &*p), cfg.lr);
    let objective = |a: &AdaptedModel, h: f64| h + a.masked_head.as_ref().map_or(0.0, |mh| mask_sparsity_loss(&mh.mask));
    let mut guard = RiseGuard::new(objective(&adapted, entropies[0]));
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let enc = adapted.model.encoder.bind(&mut g);
        let xv = g.leaf(x.clone());
        let out = enc.forward(&mut g, xv)?;
        let d_c = adapted.model.d_c;
        let d_z = adapted.model.d_z();
        let mu_c = g.slice_cols(out, 0, d_c)?;
        let (root, extra) = match &adapted.masked_head {
            None => {
                let head = adapted.model.head.bind(&mut g);
                let logits = head.forward(&mut g, mu_c)?;
                (g.softmax_entropy(logits)?, head.vars())
            }
            Some(mh) => {
                let mu_s = g.slice_cols(out, 2 * d_c, 2 * d_c + (d_z - d_c))?;
                let z = g.concat_cols(&[mu_c, mu_s])?;
                let p = g.leaf(mh.mask.params.clone());
                let gates = g.sigmoid(p)?;
                let zm = g.mul(z, gates)?;
                let head = mh.head.bind(&mut g);
                let logits = head.forward(&mut g, zm)?;
                let h = g.softmax_entropy(logits)?;
                let l1 = mask_sparsity_graph(&mut g, gates, mh.mask.l1_weight)?;
                let mut vars = head.vars();
                vars.push(p);
                (g.add(h, l1)?, vars)
            }
        };
        let mut grads = g.backward(root)?;
        let mut gv: Vec<Tensor> = enc.vars().into_iter().map(|v| grads.take(v)).collect();
        match cfg.update_scope {
            UpdateScope::EncoderAndClassifier => gv.extend(extra.into_iter().map(|v| grads.take(v))),
            // Only the mask parameters, which sit last.
            UpdateScope::EncoderOnly => {
                if adapted.masked_head.is_some() {
                    gv.push(grads.take(*extra.last().unwrap()));
                }
            }
        }
        adam_step(&mut trainable(&mut adapted, cfg.update_scope), &gv, &mut adam)?;
        let h = entropy(&adapted.logits(&x)?);
        entropies.push(h);
        if guard.observe(objective(&adapted, h)) {
            return Err(Error::AdaptationCollapse { step, entropy: h });
        }
    }
    Ok(AdaptOutcome { adapted, entropies })
}

/// Counts consecutive increases of a monitored value.
struct RiseGuard {
    last: f64,
    rising: usize,
}

impl RiseGuard {
    fn new(first: f64) -> Self {
        RiseGuard { last: first, rising: 0 }
    }

    /// True once the value has risen `COLLAPSE_STEPS` times in a row.
    fn observe(&mut self, v: f64) -> bool {
        self.rising = if v > self.last { self.rising + 1 } else { 0 };
        self.last = v;
        self.rising >= COLLAPSE_STEPS
    }
}

fn trainable(a: &mut AdaptedModel, scope: UpdateScope) -> Vec<&mut Tensor> {
    let mut p = a.model.encoder.params_mut();
    match (&mut a.masked_head, scope) {
        (None, UpdateScope::EncoderAndClassifier) => p.extend(a.model.head.params_mut()),
        (None, UpdateScope::EncoderOnly) => {}
        (Some(mh), UpdateScope::EncoderAndClassifier) => {
            p.extend(mh.head.params_mut());
            p.push(&mut mh.mask.params);
        }
        (Some(mh), UpdateScope::EncoderOnly) => p.push(&mut mh.mask.params),
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{CodeDensity, LossWeights, TrainConfig};
    use crate::rng::{stream_rng, Stream};
    use crate::synthgen::{build_generator, sample_source, sample_target, GeneratorSpec, ShiftMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64) -> EstimatorModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EstimatorModel::new(6, 4, 2, Task::Classification, &mut rng)
    }

    fn random_x(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect()
    }

    #[test]
    fn entropy_reference_values() {
        assert!((entropy(&Tensor::row(&[0.0, 0.0])) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(entropy(&Tensor::row(&[100.0, -100.0])) < 1e-9);
    }

    #[test]
    fn entropy_matches_graph_op_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let l: Vec<f64> = (0..3).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let mut g = Graph::new();
            let v = g.leaf(Tensor::row(&l));
            let h = g.softmax_entropy(v).unwrap();
            assert!((g.value(h).item() - entropy(&Tensor::row(&l))).abs() < 1e-12);
            let grad = g.backward(h).unwrap().get(v);
            for j in 0..3 {
                let eps = 1e-5;
                let mut p = l.clone();
                p[j] += eps;
                let mut m = l.clone();
                m[j] -= eps;
                let num = (entropy(&Tensor::row(&p)) - entropy(&Tensor::row(&m))) / (2.0 * eps);
                let a = grad.data()[j];
                assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-6) < 1e-4, "{a} vs {num}");
            }
        }
    }

    #[test]
    fn mask_sparsity_reference_values() {
        assert_eq!(mask_sparsity_loss(&SoftMask::new(6, 1.0)), 3.0);
        assert_eq!(mask_sparsity_loss(&SoftMask::new(6, 0.0)), 0.0);
        let m = SoftMask {
            params: Tensor::row(&[-50.0, 50.0]),
            l1_weight: 1.0,
        };
        assert!(m.values().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn zero_steps_is_bit_identical() {
        let model = random_model(2);
        let out = adapt_entropy(&model, &random_x(2), &AdaptConfig { steps: 0, ..AdaptConfig::default() }).unwrap();
        assert_eq!(out.adapted.model, model);
        assert_eq!(out.entropies.len(), 1);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let model = random_model(3);
        for use_mask in [false, true] {
            let cfg = AdaptConfig {
                steps: 5,
                lr: 0.0,
                use_mask,
                l1_weight: 0.1,
                ..AdaptConfig::default()
            };
            let out = adapt_entropy(&model, &random_x(3), &cfg).unwrap();
            assert_eq!(out.adapted.model, model);
        }
    }

    #[test]
    fn fresh_mask_leaves_predictions_unchanged() {
        let model = random_model(4);
        let masked = AdaptedModel {
            model: model.clone(),
            masked_head: Some(MaskedHead::from_model(&model, 1.0)),
        };
        let plain = AdaptedModel::unmasked(model);
        let x = Tensor::from_rows(&[random_x(5), random_x(6)]);
        assert!(masked.logits(&x).unwrap().max_abs_diff(&plain.logits(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn adaptation_lowers_entropy_and_keeps_original() {
        for (seed, use_mask, scope) in [
            (7, false, UpdateScope::EncoderAndClassifier),
            (8, true, UpdateScope::EncoderAndClassifier),
            (9, false, UpdateScope::EncoderOnly),
            (10, true, UpdateScope::EncoderOnly),
        ] {
            let model = random_model(seed);
            let before = model.clone();
            let cfg = AdaptConfig {
                steps: 3,
                use_mask,
                update_scope: scope,
                ..AdaptConfig::default()
            };
            let out = adapt_entropy(&model, &random_x(seed), &cfg).unwrap();
            assert_eq!(model, before);
            assert_eq!(out.entropies.len(), 4);
            assert!(out.entropies[3] <= out.entropies[0], "{:?}", out.entropies);
            assert_eq!(out.adapted.model.decoder, model.decoder);
            if scope == UpdateScope::EncoderOnly && !use_mask {
                assert_eq!(out.adapted.model.head, model.head);
            }
        }
    }

    #[test]
    fn guard_fires_after_ten_consecutive_rises() {
        let mut g = RiseGuard::new(0.0);
        for i in 1..10 {
            assert!(!g.observe(i as f64));
        }
        assert!(!g.observe(5.0));
        for i in 1..10 {
            assert!(!g.observe(5.0 + i as f64));
        }
        assert!(g.observe(100.0));
        let mut flat = RiseGuard::new(1.0);
        assert!((0..50).all(|_| !flat.observe(1.0)));
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = random_model(12);
        assert!(adapt_entropy(&model, &[0.0; 5], &AdaptConfig::default()).is_err());
        let cfg = AdaptConfig {
            lr: f64::NAN,
            ..AdaptConfig::default()
        };
        assert!(adapt_entropy(&model, &[0.0; 6], &cfg).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reg = EstimatorModel::new(6, 4, 2, Task::Regression, &mut rng);
        assert!(adapt_entropy(&reg, &[0.0; 6], &AdaptConfig::default()).is_err());
    }

    /// Symmetric two-component density on a line with posterior logits
    /// `[w c, -w c]`: along the segment from the boundary to a mode the
    /// entropy minimiser and the density maximiser coincide.
    #[test]
    fn entropy_minimiser_matches_density_mode_on_a_line() {
        let mu = 3.0;
        let var = 1.0;
        let density = CodeDensity {
            weights: vec![0.5, 0.5],
            means: vec![vec![mu], vec![-mu]],
            variances: vec![vec![var], vec![var]],
        };
        let w = mu / var;
        let grid: Vec<f64> = (0..=1000).map(|i| mu * i as f64 / 1000.0).collect();
        let argmin_h = grid
            .iter()
            .copied()
            .min_by(|a, b| entropy(&Tensor::row(&[w * a, -w * a])).total_cmp(&entropy(&Tensor::row(&[w * b, -w * b]))))
            .unwrap();
        let argmax_p = grid
            .iter()
            .copied()
            .max_by(|a, b| density.log_density(&[*a]).total_cmp(&density.log_density(&[*b])))
            .unwrap();
        assert!((argmin_h - argmax_p).abs() <= mu / 1000.0 + 1e-12, "{argmin_h} vs {argmax_p}");
        assert!((argmax_p - mu).abs() <= mu / 1000.0 + 1e-12);
    }

    #[test]
    fn l1_mask_prefers_invariant_code() {
        let mut wins = 0;
        for run in 0..6 {
            let spec = GeneratorSpec {
                mode: ShiftMode::Sparse,
                seed: 40 + run,
                ..GeneratorSpec::default()
            };
            let gen = build_generator(&spec).unwrap();
            let mut rng = stream_rng(40, 0, run, Stream::Source);
            let data = sample_source(&gen, 2000, &mut rng).unwrap();
            let tgt = sample_target(&gen, 18.0, &mut rng).unwrap();
            let cfg = TrainConfig {
                epochs: 10,
                mode: ShiftMode::Sparse,
                weights: LossWeights::default(),
                run,
                ..TrainConfig::default()
            };
            let model = crate::estimator::train(&data, &tgt.x, &cfg).unwrap().model;
            let acfg = AdaptConfig {
                steps: 100,
                lr: 2e-2,
                use_mask: true,
                l1_weight: 1e-2,
                ..AdaptConfig::default()
            };
            let m = adapt_entropy(&model, &tgt.x, &acfg).unwrap().adapted.masked_head.unwrap().mask.values();
            let c = m[..4].iter().sum::<f64>() / 4.0;
            let s = m[4..].iter().sum::<f64>() / 2.0;
            if c > s {
                wins += 1;
            }
        }
        assert_eq!(wins, 6);
    }
}
