use super::*;
use crate::ndgrad::{adam_step, AdamState};
use crate::rng::{stream_rng, Stream};
use crate::synthgen::{build_generator, sample_source, sample_target, Dataset, Generator, GeneratorSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_batch(rng: &mut ChaCha8Rng, n: usize, task: Task) -> (Tensor, Labels, Vec<f64>) {
    let x = Tensor::matrix(n, 6, (0..n * 6).map(|_| rng.gen_range(-2.0..2.0)).collect());
    let labels = match task {
        Task::Classification => Labels::Class((0..n).map(|_| rng.gen_range(0..2)).collect()),
        Task::Regression => Labels::Value((0..n).map(|_| rng.gen_range(0.0..4.0)).collect()),
    };
    let tgt = (0..6).map(|_| rng.gen_range(-6.0..6.0)).collect();
    (x, labels, tgt)
}

fn random_density(rng: &mut ChaCha8Rng) -> CodeDensity {
    CodeDensity {
        weights: vec![0.4, 0.6],
        means: (0..2).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        variances: (0..2).map(|_| (0..4).map(|_| rng.gen_range(0.3..2.0)).collect()).collect(),
    }
}

fn eval_loss(
    model: &EstimatorModel,
    x: &Tensor,
    labels: &Labels,
    tgt: &[f64],
    w: &LossWeights,
    mode: ShiftMode,
    noise_seed: u64,
) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let mut noise = GaussianNoise(ChaCha8Rng::seed_from_u64(noise_seed));
    let lg = loss(&mut g, &bound, model, x, labels, tgt, w, mode, &mut noise).unwrap();
    let value = g.value(lg.total).item();
    let grads = g.backward(lg.total).unwrap();
    (value, bound.vars().into_iter().map(|v| grads.get(v)).collect())
}

fn only(term: Term, task: Task) -> LossWeights {
    let mut w = LossWeights {
        cls: 0.0,
        recons: 0.0,
        tgt_likelihood: 0.0,
        s_distance: 0.0,
        kl: 0.0,
        anti_nat: 0.0,
    };
    let full = LossWeights { anti_nat: 0.3, ..LossWeights::ours(task) };
    match term {
        Term::Reconstruction => w.recons = full.recons,
        Term::Kl => w.kl = full.kl,
        Term::Naturalness => w.tgt_likelihood = full.tgt_likelihood,
        Term::Classification => w.cls = full.cls,
        Term::AntiNaturalness => w.anti_nat = full.anti_nat,
        Term::SDistance => w.s_distance = full.s_distance,
    }
    w
}

/// Central differences on a random subset of parameter entries.
fn fd_check(task: Task, weights: &LossWeights, instances: u64) {
    let h = 1e-5;
    for inst in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst);
        let mut model = EstimatorModel::new(6, 4, 2, task, &mut rng);
        model.density = random_density(&mut rng);
        let (x, labels, tgt) = small_batch(&mut rng, 5, task);
        let (_, analytic) = eval_loss(&model, &x, &labels, &tgt, weights, ShiftMode::Dense, inst);
        let n_params = model.params().len();
        for _ in 0..25 {
            let p = rng.gen_range(0..n_params);
            let j = rng.gen_range(0..model.params()[p].len());
            let mut plus = model.clone();
            plus.params_mut()[p].data_mut()[j] += h;
            let mut minus = model.clone();
            minus.params_mut()[p].data_mut()[j] -= h;
            let fp = eval_loss(&plus, &x, &labels, &tgt, weights, ShiftMode::Dense, inst).0;
            let fm = eval_loss(&minus, &x, &labels, &tgt, weights, ShiftMode::Dense, inst).0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[p].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "instance {inst} param {p}[{j}]: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn each_term_matches_finite_differences() {
    for term in Term::ALL {
        fd_check(Task::Classification, &only(term, Task::Classification), 20);
    }
}

#[test]
fn full_loss_matches_finite_differences() {
    let w = LossWeights {
        anti_nat: 0.3,
        ..LossWeights::ours(Task::Classification)
    };
    fd_check(Task::Classification, &w, 20);
    fd_check(Task::Regression, &LossWeights::ours(Task::Regression), 20);
}

#[test]
fn kl_is_zero_at_standard_posterior() {
    let mut g = Graph::new();
    let z = g.leaf(Tensor::zeros(3, 4));
    let kl = g.kl_standard_normal(z, z).unwrap();
    assert_eq!(g.value(kl).item(), 0.0);
}

proptest! {
    #[test]
    fn kl_is_nonnegative(mu in prop::collection::vec(-3.0..3.0f64, 4), lv in prop::collection::vec(-3.0..3.0f64, 4)) {
        let mut g = Graph::new();
        let m = g.leaf(Tensor::row(&mu));
        let l = g.leaf(Tensor::row(&lv));
        let kl = g.kl_standard_normal(m, l).unwrap();
        prop_assert!(g.value(kl).item() >= 0.0);
    }
}

#[test]
fn zero_noise_sample_equals_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = EstimatorModel::new(6, 4, 2, Task::Classification, &mut rng);
    let (x, _, _) = small_batch(&mut rng, 4, Task::Classification);
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let xv = g.leaf(x.clone());
    let enc = bound.encode(&mut g, xv).unwrap();
    let c = g.reparameterize(enc.mu_c, enc.logvar_c, ZeroNoise.draw(4, 4)).unwrap();
    assert_eq!(g.value(c), &model.encode(&x).unwrap().mu_c);
}

/// Encoder whose every output is zero.
fn zero_encoder_model() -> EstimatorModel {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut m = EstimatorModel::new(6, 4, 2, Task::Classification, &mut rng);
    let last = m.encoder.n_layers() - 1;
    m.encoder.weights[last].data_mut().iter_mut().for_each(|v| *v = 0.0);
    m.encoder.biases[last].data_mut().iter_mut().for_each(|v| *v = 0.0);
    m
}

#[test]
fn naturalness_at_unit_gaussian_mode() {
    let model = zero_encoder_model();
    let w = only(Term::Naturalness, Task::Classification);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, labels, tgt) = small_batch(&mut rng, 3, Task::Classification);
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let lg = loss(&mut g, &bound, &model, &x, &labels, &tgt, &w, ShiftMode::Dense, &mut ZeroNoise).unwrap();
    let expected = 0.1 * 4.0 * 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((g.value(lg.total).item() - expected).abs() < 1e-12);
    assert!((expected - 0.36757541).abs() < 1e-7);
}

#[test]
fn s_distance_is_skipped_in_sparse_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = EstimatorModel::new(6, 4, 2, Task::Classification, &mut rng);
    let (x, labels, tgt) = small_batch(&mut rng, 3, Task::Classification);
    let w = LossWeights::ours(Task::Classification);
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let dense = loss(&mut g, &bound, &model, &x, &labels, &tgt, &w, ShiftMode::Dense, &mut ZeroNoise).unwrap();
    let sparse = loss(&mut g, &bound, &model, &x, &labels, &tgt, &w, ShiftMode::Sparse, &mut ZeroNoise).unwrap();
    assert!(dense.terms.iter().any(|(t, _)| *t == Term::SDistance));
    assert!(sparse.terms.iter().all(|(t, _)| *t != Term::SDistance));
    let mu_s = model.encode(&Tensor::row(&tgt)).unwrap().mu_s;
    let diff = g.value(dense.total).item() - g.value(sparse.total).item();
    assert!((diff - 0.01 * mu_s.sq_norm()).abs() < 1e-12);
}

#[test]
fn loss_rejects_bad_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = EstimatorModel::new(6, 4, 2, Task::Classification, &mut rng);
    let (x, labels, tgt) = small_batch(&mut rng, 3, Task::Classification);
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let zero = LossWeights::source_only(Task::Classification);
    let zero = LossWeights { cls: 0.0, ..zero };
    assert!(loss(&mut g, &bound, &model, &x, &labels, &tgt, &zero, ShiftMode::Dense, &mut ZeroNoise).is_err());
    let w = LossWeights::default();
    assert!(loss(&mut g, &bound, &model, &x, &labels, &tgt[..5], &w, ShiftMode::Dense, &mut ZeroNoise).is_err());
    let short = Labels::Class(vec![0, 1]);
    assert!(loss(&mut g, &bound, &model, &x, &short, &tgt, &w, ShiftMode::Dense, &mut ZeroNoise).is_err());
    assert!(LossWeights { kl: -1.0, ..w }.validate().is_err());
    assert!(LossWeights { recons: f64::NAN, ..w }.validate().is_err());
}

#[test]
fn head_sees_only_invariant_code() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = EstimatorModel::new(6, 4, 2, Task::Classification, &mut rng);
    assert_eq!(model.head.in_dim(), model.d_c);
    let (x, _, _) = small_batch(&mut rng, 10, Task::Classification);
    let a = predict(&model, &x).unwrap();
    let b = predict(&model, &x).unwrap();
    assert_eq!(a.outputs, b.outputs);
    assert_eq!(a.c_hat.cols(), 4);
    assert_eq!(a.s_hat.cols(), 2);
}

fn dataset(mode: ShiftMode, task: Task, n: usize, seed: u64) -> (Generator, Dataset) {
    let spec = GeneratorSpec {
        mode,
        task,
        seed,
        ..GeneratorSpec::default()
    };
    let gen = build_generator(&spec).unwrap();
    let mut rng = stream_rng(seed, 0, 0, Stream::Source);
    let data = sample_source(&gen, n, &mut rng).unwrap();
    (gen, data)
}

fn small_cfg(weights: LossWeights, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 64,
        weights,
        ..TrainConfig::default()
    }
}

#[test]
fn classification_only_matches_plain_supervised_mlp() {
    let (_, data) = dataset(ShiftMode::Dense, Task::Classification, 300, 11);
    let tgt = vec![0.0; 6];
    let cfg = small_cfg(LossWeights::source_only(Task::Classification), 3);
    let out = train(&data, &tgt, &cfg).unwrap();

    // Hand-written loop: encoder mean block followed by a linear head.
    let mut init = stream_rng(cfg.seed, cfg.cell, cfg.run, Stream::Init);
    let mut model = EstimatorModel::new(6, 4, 2, Task::Classification, &mut init);
    let mut shuffle = stream_rng(cfg.seed, cfg.cell, cfg.run, Stream::Shuffle);
    let mut adam = AdamState::new(model.params(), cfg.lr);
    let Labels::Class(y) = &data.labels else { unreachable!() };
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), &mut shuffle);
        let mut total = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| data.xs.row_slice(i).to_vec()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let x = g.leaf(Tensor::from_rows(&rows));
            let h = bound.encoder.forward(&mut g, x).unwrap();
            let c = g.slice_cols(h, 0, 4).unwrap();
            let logits = bound.head.forward(&mut g, c).unwrap();
            let ce = g.softmax_cross_entropy(logits, &labels).unwrap();
            total += g.value(ce).item();
            batches += 1.0;
            let mut grads = g.backward(ce).unwrap();
            let grads: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.take(v)).collect();
            adam_step(&mut model.params_mut(), &grads, &mut adam).unwrap();
        }
        let mean = total / batches;
        assert!((mean - out.trace[epoch].total).abs() < 1e-9, "epoch {epoch}: {mean} vs {}", out.trace[epoch].total);
    }
    assert_eq!(model.params(), out.model.params());
}

#[test]
fn same_seed_gives_identical_parameters() {
    let (gen, data) = dataset(ShiftMode::Dense, Task::Classification, 400, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tgt = sample_target(&gen, 12.0, &mut rng).unwrap();
    let cfg = small_cfg(LossWeights::default(), 2);
    let a = train(&data, &tgt.x, &cfg).unwrap();
    let b = train(&data, &tgt.x, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.trace, b.trace);
    let c = train(&data, &tgt.x, &TrainConfig { run: 1, ..cfg }).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn checkpoint_round_trip() {
    let (gen, data) = dataset(ShiftMode::Sparse, Task::Classification, 200, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tgt = sample_target(&gen, 18.0, &mut rng).unwrap();
    let out = train(&data, &tgt.x, &small_cfg(LossWeights::default(), 1)).unwrap();
    let json = out.model.to_json().unwrap();
    let back = EstimatorModel::from_json(&json).unwrap();
    assert_eq!(back, out.model);
    assert_eq!(back.to_json().unwrap(), json);

    let mut broken = out.model.clone();
    broken.d_c = 3;
    assert!(EstimatorModel::from_json(&broken.to_json().unwrap()).is_err());
}

#[test]
fn trace_csv_leaves_inactive_terms_empty() {
    let (_, data) = dataset(ShiftMode::Dense, Task::Classification, 100, 14);
    let out = train(&data, &[0.0; 6], &small_cfg(LossWeights::source_only(Task::Classification), 2)).unwrap();
    let mut buf = Vec::new();
    write_trace_csv(&out.trace, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,total,reconstruction,kl,naturalness,classification,anti_naturalness,s_distance");
    assert_eq!(lines.len(), 3);
    let cells: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cells[0], "0");
    assert_eq!(cells[1], cells[5]);
    assert!(cells[2].is_empty() && cells[3].is_empty() && cells[4].is_empty());
}

#[test]
fn huge_loss_aborts_with_divergence() {
    let (_, data) = dataset(ShiftMode::Dense, Task::Classification, 100, 15);
    let w = LossWeights {
        cls: 1e9,
        ..LossWeights::source_only(Task::Classification)
    };
    match train(&data, &[0.0; 6], &small_cfg(w, 2)) {
        Err(Error::Divergence { epoch, loss, terms }) => {
            assert_eq!(epoch, 0);
            assert!(loss > 1e6);
            assert!(terms.contains("classification="));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn overflowing_target_reports_non_finite_loss() {
    let (_, data) = dataset(ShiftMode::Dense, Task::Classification, 100, 16);
    let tgt = vec![1e300; 6];
    match train(&data, &tgt, &small_cfg(LossWeights::default(), 1)) {
        Err(Error::NonFiniteLoss { epoch, terms }) => {
            assert_eq!(epoch, 0);
            assert!(terms.contains("previous epoch none"));
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

#[test]
fn invalid_config_is_rejected() {
    let (_, data) = dataset(ShiftMode::Dense, Task::Classification, 50, 17);
    let cfg = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&data, &[0.0; 6], &cfg), Err(Error::Config(_))));
    let cfg = TrainConfig {
        lr: -1.0,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&data, &[0.0; 6], &cfg), Err(Error::Config(_))));
}

fn smoothed_non_increasing_fraction(trace: &[EpochTrace]) -> f64 {
    let totals: Vec<f64> = trace.iter().map(|e| e.total).collect();
    let smooth: Vec<f64> = totals.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let steps = smooth.windows(2).filter(|w| w[1] <= w[0]).count();
    steps as f64 / (smooth.len() - 1) as f64
}

#[test]
fn dense_full_objective_fits_source() {
    let (gen, data) = dataset(ShiftMode::Dense, Task::Classification, 3000, 21);
    let mut rng = stream_rng(21, 0, 0, Stream::Holdout);
    let holdout = sample_source(&gen, 1000, &mut rng).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tgt = sample_target(&gen, 12.0, &mut rng).unwrap();
    let out = train(&data, &tgt.x, &TrainConfig::default()).unwrap();
    assert!(out.trace.iter().all(|e| e.total.is_finite()));
    assert!(out.model.is_finite());
    let acc = holdout_score(&out.model, &holdout).unwrap();
    assert!(acc > 0.95, "hold-out accuracy {acc}");
    let frac = smoothed_non_increasing_fraction(&out.trace);
    assert!(frac >= 0.8, "smoothed trace non-increasing on {frac}");
}

#[test]
fn regression_head_fits_source() {
    let (gen, data) = dataset(ShiftMode::Dense, Task::Regression, 3000, 22);
    let mut rng = stream_rng(22, 0, 0, Stream::Holdout);
    let holdout = sample_source(&gen, 1000, &mut rng).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tgt = sample_target(&gen, 18.0, &mut rng).unwrap();
    let out = train(&data, &tgt.x, &TrainConfig::default()).unwrap();
    let mse = -holdout_score(&out.model, &holdout).unwrap();
    assert!(mse < 0.5, "hold-out mse {mse}");
}

#[test]
fn kl_score_breaks_accuracy_ties_by_loss() {
    let a = KlScore { kl: 0.1, score: 1.0, loss: 0.2 };
    let b = KlScore { kl: 0.01, score: 1.0, loss: 0.1 };
    let c = KlScore { kl: 0.001, score: 0.99, loss: 0.01 };
    assert!(b.beats(&a) && !a.beats(&b));
    assert!(a.beats(&c) && b.beats(&c));
    assert!(!a.beats(&a));
}

#[test]
fn holdout_loss_is_cross_entropy() {
    let (_, data) = dataset(ShiftMode::Dense, Task::Classification, 50, 4);
    let mut rng = stream_rng(4, 0, 0, Stream::Init);
    let model = EstimatorModel::new(6, 4, 2, Task::Classification, &mut rng);
    let (acc, ce) = holdout_eval(&model, &data).unwrap();
    let p = predict(&model, &data.xs).unwrap();
    let Labels::Class(y) = &data.labels else { unreachable!() };
    let mut want = 0.0;
    for (i, &k) in y.iter().enumerate() {
        let r = p.outputs.row_slice(i);
        let z: f64 = r.iter().map(|v| v.exp()).sum();
        want -= (r[k].exp() / z).ln();
    }
    assert!((ce - want / y.len() as f64).abs() < 1e-12);
    assert_eq!(acc, holdout_score(&model, &data).unwrap());
}

#[test]
fn kl_selection_keeps_best_score() {
    let (gen, data) = dataset(ShiftMode::Sparse, Task::Classification, 300, 23);
    let mut rng = stream_rng(23, 0, 0, Stream::Holdout);
    let holdout = sample_source(&gen, 200, &mut rng).unwrap();
    let tgt = sample_target(&gen, 18.0, &mut rng).unwrap();
    let sel = select_kl_weight(&data, &holdout, &tgt.x, &small_cfg(LossWeights::default(), 2), &KL_GRID).unwrap();
    assert_eq!(sel.scores.len(), 3);
    let chosen = sel.scores.iter().find(|s| s.kl == sel.best).unwrap();
    assert!(sel.scores.iter().all(|s| !s.beats(chosen)));
    assert!(sel.scores.iter().all(|s| s.loss.is_finite() && s.loss >= 0.0));
    assert!(select_kl_weight(&data, &holdout, &tgt.x, &TrainConfig::default(), &[]).is_err());
}
