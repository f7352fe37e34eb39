use ndarray::{array, s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::retrieval::{build_index, precompute, retrieve, MetricKind, Weighting};
use crate::series::TimeSeries;

fn random_params(model: &mut ForecastModel, rng: &mut ChaCha8Rng) {
    for t in model.params.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

fn random_batch(model: &ForecastModel, rows: usize, rng: &mut ChaCha8Rng) -> Batch {
    let (l, f) = (model.lookback(), model.horizon());
    let mut r = |shape: (usize, usize)| Array2::from_shape_fn(shape, |_| rng.random_range(-2.0..2.0));
    Batch {
        inputs: r((rows, l)),
        retrieved: model.spec.periods.iter().map(|&p| r((rows, f / p))).collect(),
        targets: r((rows, f)),
    }
}

fn noisy(len: usize, channels: usize, seed: u64) -> TimeSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Array2::from_shape_fn((channels, len), |(c, t)| {
        (t as f64 * 0.21 + c as f64).sin() + 0.5 * (t as f64 * 0.05).cos() + rng.random_range(-0.2..0.2)
    });
    TimeSeries::new(values, (0..channels).map(|c| format!("c{c}")).collect()).unwrap()
}

#[test]
fn init_is_deterministic_with_declared_shapes() {
    let spec = ModelSpec::new(720, 96, &[1, 2, 4]).unwrap();
    let a = init_model(spec.clone(), 7);
    let b = init_model(spec, 7);
    assert_eq!(a, b);
    assert_eq!(a.params.g.len(), 3);
    assert_eq!(a.params.f.weight.dim(), (96, 720));
    assert_eq!(a.params.g[2].weight.dim(), (96, 24));
    assert_eq!(a.params.h.weight.dim(), (96, 192));
    let k = 1.0 / 720f64.sqrt();
    assert!(a.params.f.weight.iter().all(|w| w.abs() <= k));
    assert!(a.params.f.bias.iter().all(|&b| b == 0.0));
    assert_ne!(a, init_model(ModelSpec::new(720, 96, &[1, 2, 4]).unwrap(), 8));
}

#[test]
fn zero_model_restores_offset() {
    let spec = ModelSpec::new(4, 3, &[1]).unwrap();
    let mut model = init_model(spec, 0);
    for t in model.params.tensors_mut() {
        t.fill(0.0);
    }
    let x = Patch::new(array![[1.0, 2.0, 3.0, 5.0], [0.0, 0.0, 0.0, -1.0]], 0, 1);
    let r = RetrievalResult {
        periods: vec![crate::retrieval::PeriodRetrieval {
            period: 1,
            candidates: vec![],
            starts: vec![],
            scores: vec![],
            weights: vec![],
            aggregate: Array2::from_elem((2, 3), 9.0),
        }],
    };
    let y = model.forward(&x, Some(&r)).unwrap();
    assert_eq!(y, array![[5.0, 5.0, 5.0], [-1.0, -1.0, -1.0]]);
}

#[test]
fn hand_computed_forward() {
    // L=4, F=2, one period, single channel
    let spec = ModelSpec::new(4, 2, &[1]).unwrap();
    let mut model = init_model(spec, 0);
    model.params.f = Linear { weight: array![[1.0, 0.0, 0.5, 0.0], [0.0, -1.0, 0.0, 2.0]], bias: array![0.1, -0.2] };
    model.params.g[0] = Linear { weight: array![[2.0, 0.0], [1.0, 1.0]], bias: array![0.0, 0.5] };
    model.params.h = Linear {
        weight: array![[1.0, 0.0, 1.0, 0.0], [0.0, 2.0, 0.0, -1.0]],
        bias: array![0.0, 1.0],
    };
    let x = array![[3.0, 1.0, 4.0, 2.0]];
    let v = array![[0.5, -1.5]];
    // x̂ = [1, -1, 2, 0]
    // a = [1 + 1 + 0.1, 1 + 0 - 0.2] = [2.1, 0.8]
    // r = [1.0, -1.0 + 0.5] = [1.0, -0.5]
    // ŷ = [2.1 + 1.0, 1.6 + 0.5 + 1] = [3.1, 3.1]
    // y = ŷ + 2
    let y = model.forward_rows(x.view(), &[v]).unwrap();
    assert!((y[[0, 0]] - 5.1).abs() < 1e-12);
    assert!((y[[0, 1]] - 5.1).abs() < 1e-12);
}

#[test]
fn loss_examples() {
    let a = array![[1.0, 2.0], [3.0, 4.0]];
    assert_eq!(loss(&a.view(), &a.view()).unwrap(), 0.0);
    let b = &a + 2.0;
    assert_eq!(loss(&a.view(), &b.view()).unwrap(), 4.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y: Array2<f64> = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
    let t: Array2<f64> = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
    let mut sum = 0.0f64;
    for i in 0..3 {
        for j in 0..5 {
            sum += (y[[i, j]] - t[[i, j]]).powi(2);
        }
    }
    assert!((loss(&y.view(), &t.view()).unwrap() - sum / 15.0).abs() < 1e-15);
    assert!(loss(&y.view(), &a.view()).is_err());
}

fn assert_grad_matches(
    mut model: ForecastModel,
    grads: &Parameters,
    objective: impl Fn(&ForecastModel) -> f64,
) {
    let names = model.params.tensor_names(&model.spec.periods.clone());
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let h = 1e-5;
    for (k, name) in names.iter().enumerate() {
        let n = analytic[k].len();
        for i in 0..n {
            let orig = model.params.tensors()[k][i];
            model.params.tensors_mut()[k][i] = orig + h;
            let up = objective(&model);
            model.params.tensors_mut()[k][i] = orig - h;
            let down = objective(&model);
            model.params.tensors_mut()[k][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{i}]: analytic {a} vs numeric {numeric}");
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..3 {
        let mut model = init_model(ModelSpec::new(8, 4, &[1, 2]).unwrap(), 0);
        random_params(&mut model, &mut rng);
        let batch = random_batch(&model, 6, &mut rng);
        let (_, grads, _) = model.gradients(&batch).unwrap();
        assert_grad_matches(model, &grads, |m| m.batch_loss(&batch).unwrap());
    }
}

#[test]
fn retrieval_free_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = init_model(ModelSpec::new(8, 4, &[1]).unwrap().without_retrieval(), 0);
    random_params(&mut model, &mut rng);
    let mut batch = random_batch(&model, 5, &mut rng);
    batch.retrieved.clear();
    let (_, grads, _) = model.gradients(&batch).unwrap();
    assert_grad_matches(model, &grads, |m| m.batch_loss(&batch).unwrap());
}

#[test]
fn projection_gradients_match_finite_differences() {
    let ts = noisy(80, 2, 3);
    let index = build_index(&ts, 8, 4, 1, &[1, 2]).unwrap();
    let spec = ModelSpec::new(8, 4, &[1, 2]).unwrap().with_projection(2, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..3 {
        let mut model = init_model(spec.clone(), 0);
        random_params(&mut model, &mut rng);
        let starts = [40usize, 55, 63];
        let cands: Vec<Vec<Vec<usize>>> = starts
            .iter()
            .map(|_| (0..2).map(|_| (0..4).map(|_| rng.random_range(0..20)).collect()).collect())
            .collect();
        let tau = 0.3;
        let objective = |m: &ForecastModel| -> (f64, Parameters) {
            let mut aggs = Vec::new();
            let mut states = Vec::new();
            for (i, &s) in starts.iter().enumerate() {
                let (a, st) = projected::forward(
                    &index,
                    &m.params.projections,
                    ts.values().slice_move(s![.., s..s + 8]),
                    &cands[i],
                    tau,
                    Weighting::Softmax,
                )
                .unwrap();
                aggs.push(a);
                states.push(st);
            }
            let set = WindowSet::new(ts.values(), starts.to_vec(), RetrievalSource::None);
            let batch = set.assemble(m, &[0, 1, 2], Some(&aggs)).unwrap();
            let (loss, mut grads, dv) = m.gradients(&batch).unwrap();
            for (j, st) in states.iter().enumerate() {
                let d: Vec<Vec<f64>> =
                    dv.iter().map(|x| x.slice(s![j * 2..(j + 1) * 2, ..]).iter().copied().collect()).collect();
                projected::backward(st, &d, tau, Weighting::Softmax, &mut grads.projections);
            }
            (loss, grads)
        };
        let (_, grads) = objective(&model);
        assert!(grads.projections[0].query.iter().any(|&g| g != 0.0));
        assert_grad_matches(model, &grads, |m| objective(m).0);
    }
}

#[test]
fn zero_residual_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = init_model(ModelSpec::new(8, 4, &[1, 2]).unwrap(), 1);
    let mut batch = random_batch(&model, 4, &mut rng);
    batch.targets = model.forward_rows(batch.inputs.view(), &batch.retrieved).unwrap();
    let (loss, grads, _) = model.gradients(&batch).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.tensors().iter().all(|t| t.iter().all(|&g| g == 0.0)));
}

#[test]
fn duplicated_batch_gives_identical_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = init_model(ModelSpec::new(8, 4, &[1, 2]).unwrap(), 1);
    let batch = random_batch(&model, 3, &mut rng);
    let dup = |a: &Array2<f64>| ndarray::concatenate(ndarray::Axis(0), &[a.view(), a.view()]).unwrap();
    let doubled = Batch {
        inputs: dup(&batch.inputs),
        retrieved: batch.retrieved.iter().map(dup).collect(),
        targets: dup(&batch.targets),
    };
    let (_, g1, _) = model.gradients(&batch).unwrap();
    let (_, g2, _) = model.gradients(&doubled).unwrap();
    for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-14 * x.abs().max(1.0));
        }
    }
}

#[test]
fn retrieval_free_path_matches_zeroed_retrieval_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut full = init_model(ModelSpec::new(8, 4, &[1, 2]).unwrap(), 0);
    random_params(&mut full, &mut rng);
    for g in &mut full.params.g {
        g.weight.fill(0.0);
        g.bias.fill(0.0);
    }
    let mut bare = init_model(ModelSpec::new(8, 4, &[1, 2]).unwrap().without_retrieval(), 0);
    bare.params.f = full.params.f.clone();
    bare.params.h = full.params.h.clone();
    let batch = random_batch(&full, 5, &mut rng);
    let a = full.forward_rows(batch.inputs.view(), &batch.retrieved).unwrap();
    let b = bare.forward_rows(batch.inputs.view(), &[]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn offset_equivariance() {
    let ts = noisy(120, 2, 1);
    let shift = array![3.5, -7.25];
    let shifted = TimeSeries::new(ts.values().to_owned() + &shift.view().insert_axis(ndarray::Axis(1)), ts.channel_names().to_vec()).unwrap();
    let params = RetrievalParams { m: 4, ..Default::default() };
    let mut model = init_model(ModelSpec::new(12, 6, &[1, 2]).unwrap(), 3);
    random_params(&mut model, &mut ChaCha8Rng::seed_from_u64(2));
    let ia = build_index(&ts, 12, 6, 1, &[1, 2]).unwrap();
    let ib = build_index(&shifted, 12, 6, 1, &[1, 2]).unwrap();
    let ya = model.predict(Some(&ia), &ts.patch(100, 12).unwrap(), &params).unwrap();
    let yb = model.predict(Some(&ib), &shifted.patch(100, 12).unwrap(), &params).unwrap();
    for c in 0..2 {
        for j in 0..6 {
            assert!((yb[[c, j]] - ya[[c, j]] - shift[c]).abs() < 1e-9);
        }
    }
}

#[test]
fn channel_permutation_commutes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = init_model(ModelSpec::new(8, 4, &[1, 2]).unwrap(), 0);
    random_params(&mut model, &mut rng);
    let batch = random_batch(&model, 3, &mut rng);
    let perm = [2usize, 0, 1];
    let permute = |a: &Array2<f64>| a.select(ndarray::Axis(0), &perm);
    let y = model.forward_rows(batch.inputs.view(), &batch.retrieved).unwrap();
    let yp = model
        .forward_rows(permute(&batch.inputs).view(), &batch.retrieved.iter().map(permute).collect::<Vec<_>>())
        .unwrap();
    assert_eq!(permute(&y), yp);
}

#[test]
fn exact_repeat_can_be_fit_through_retrieval() {
    // a series that repeats with period 20: the query's best match is its own repeat
    let base: Vec<f64> = (0..20).map(|t| ((t * 7) % 11) as f64 - 5.0).collect();
    let values: Vec<f64> = base.iter().cycle().take(120).copied().collect();
    let ts = TimeSeries::univariate("x", values).unwrap();
    let (l, f) = (8, 4);
    let index = build_index(&ts, l, f, 1, &[1]).unwrap();
    let params = RetrievalParams { m: 1, ..Default::default() };
    let q = 60;
    let r = retrieve(&index, &ts.patch(q, l).unwrap(), &params, ExclusionRule::training(q)).unwrap();
    let mut model = init_model(ModelSpec::new(l, f, &[1]).unwrap(), 0);
    for t in model.params.tensors_mut() {
        t.fill(0.0);
    }
    model.params.g[0].weight = Array2::eye(f);
    for i in 0..f {
        model.params.h.weight[[i, f + i]] = 1.0;
    }
    let y = model.forward(&ts.patch(q, l).unwrap(), Some(&r)).unwrap();
    let truth = ts.patch(q + l, f).unwrap().values;
    assert!(loss(&y.view(), &truth.view()).unwrap() < 1e-24);
}

fn toy_sets(ts: &TimeSeries, l: usize, f: usize) -> (Vec<usize>, Vec<usize>) {
    let train: Vec<usize> = (0..=200 - l - f).collect();
    let val: Vec<usize> = (200 - l..=ts.len() - l - f).collect();
    (train, val)
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let ts = noisy(260, 1, 2);
    let (l, f) = (12, 4);
    let index = build_index(&ts.slice(0, 200).unwrap(), l, f, 1, &[1, 2]).unwrap();
    let params = RetrievalParams { m: 3, ..Default::default() };
    let (tr, va) = toy_sets(&ts, l, f);
    let train_set = WindowSet::new(ts.values(), tr, RetrievalSource::Live { index: &index, params, training: true });
    let val_set = WindowSet::new(ts.values(), va, RetrievalSource::Live { index: &index, params, training: false });
    let model = init_model(ModelSpec::new(l, f, &[1, 2]).unwrap(), 0);
    let cfg = TrainConfig { learning_rate: 0.0, max_epochs: 3, patience: 5, ..Default::default() };
    let (trained, hist) = train(model.clone(), &train_set, &val_set, &cfg).unwrap();
    assert_eq!(trained, model);
    assert_eq!(hist.epochs.len(), 3);
    assert!(hist.epochs.iter().all(|e| e.val_loss == hist.epochs[0].val_loss));
}

#[test]
fn training_is_reproducible_and_improves() {
    let ts = noisy(260, 2, 4);
    let (l, f) = (12, 4);
    let train_ts = ts.slice(0, 200).unwrap();
    let index = build_index(&train_ts, l, f, 1, &[1, 2]).unwrap();
    let params = RetrievalParams { m: 3, ..Default::default() };
    let (tr, va) = toy_sets(&ts, l, f);
    let cache = precompute(&index, ts.values(), &tr, &params, true).unwrap();
    let vcache = precompute(&index, ts.values(), &va, &params, false).unwrap();
    let train_set = WindowSet::new(ts.values(), tr.clone(), RetrievalSource::Cache(&cache));
    let live_set = WindowSet::new(ts.values(), tr, RetrievalSource::Live { index: &index, params, training: true });
    let val_set = WindowSet::new(ts.values(), va, RetrievalSource::Cache(&vcache));
    let cfg = TrainConfig { learning_rate: 1e-2, max_epochs: 5, patience: 5, seed: 3, ..Default::default() };
    let model = init_model(ModelSpec::new(l, f, &[1, 2]).unwrap(), 0);
    let initial = mean_loss(&model, &val_set, 32).unwrap();
    let (a, ha) = train(model.clone(), &train_set, &val_set, &cfg).unwrap();
    let (b, hb) = train(model.clone(), &live_set, &val_set, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        ha.epochs.iter().map(|e| e.val_loss).collect::<Vec<_>>(),
        hb.epochs.iter().map(|e| e.val_loss).collect::<Vec<_>>()
    );
    let best = ha.best_so_far();
    assert!(best.windows(2).all(|w| w[1] <= w[0]));
    assert!(ha.best_val_loss() < initial);
    assert_eq!(mean_loss(&a, &val_set, 32).unwrap(), ha.best_val_loss());
}

#[test]
fn projected_training_runs_and_updates_heads() {
    let ts = noisy(260, 1, 6);
    let (l, f) = (12, 4);
    let index = build_index(&ts.slice(0, 200).unwrap(), l, f, 1, &[1, 2]).unwrap();
    let params = RetrievalParams { m: 3, metric: MetricKind::CosineProjected, ..Default::default() };
    let (tr, va) = toy_sets(&ts, l, f);
    let train_set = WindowSet::new(ts.values(), tr, RetrievalSource::Live { index: &index, params, training: true });
    let val_set = WindowSet::new(ts.values(), va, RetrievalSource::Live { index: &index, params, training: false });
    let model = init_model(ModelSpec::new(l, f, &[1, 2]).unwrap().with_projection(1, 8).unwrap(), 0);
    let cfg = TrainConfig { learning_rate: 1e-2, max_epochs: 2, ..Default::default() };
    let (trained, hist) = train(model.clone(), &train_set, &val_set, &cfg).unwrap();
    assert!(hist.epochs.iter().all(|e| e.val_loss.is_finite()));
    assert_ne!(trained.params.projections, model.params.projections);
}

#[test]
fn divergence_is_reported() {
    let ts = noisy(260, 1, 6);
    let (l, f) = (12, 4);
    let (tr, va) = toy_sets(&ts, l, f);
    let scaled = ts.values().to_owned() * 1e150;
    let train_set = WindowSet::new(scaled.view(), tr, RetrievalSource::None);
    let val_set = WindowSet::new(scaled.view(), va, RetrievalSource::None);
    let model = init_model(ModelSpec::new(l, f, &[1]).unwrap().without_retrieval(), 0);
    let cfg = TrainConfig { learning_rate: 1.0, optimizer: OptimizerKind::Sgd, ..Default::default() };
    assert!(matches!(train(model, &train_set, &val_set, &cfg), Err(RaftError::Divergence { .. })));
}

#[test]
fn empty_data_is_rejected() {
    let ts = noisy(100, 1, 6);
    let empty = WindowSet::new(ts.values(), vec![], RetrievalSource::None);
    let val = WindowSet::new(ts.values(), vec![0], RetrievalSource::None);
    let model = init_model(ModelSpec::new(8, 4, &[1]).unwrap().without_retrieval(), 0);
    assert!(train(model, &empty, &val, &TrainConfig::default()).is_err());
}

#[test]
fn predict_matches_retrieve_then_forward() {
    let ts = noisy(150, 2, 7);
    let index = build_index(&ts, 10, 5, 1, &[1, 2]).unwrap();
    let params = RetrievalParams { m: 4, ..Default::default() };
    let model = init_model(ModelSpec::new(10, 5, &[1, 2]).unwrap(), 2);
    let x = ts.patch(90, 10).unwrap();
    let a = model.predict(Some(&index), &x, &params).unwrap();
    let r = retrieve(&index, &x, &params, ExclusionRule::inference()).unwrap();
    assert_eq!(a, model.forward(&x, Some(&r)).unwrap());
    assert_eq!(a, model.predict(Some(&index), &x, &params).unwrap());
    let wrong = build_index(&ts, 10, 5, 1, &[1]).unwrap();
    assert!(model.predict(Some(&wrong), &x, &params).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for spec in [
        ModelSpec::new(8, 4, &[1, 2]).unwrap(),
        ModelSpec::new(8, 4, &[1]).unwrap().without_retrieval(),
        ModelSpec::new(8, 4, &[1, 2]).unwrap().with_projection(3, 5).unwrap(),
    ] {
        let mut model = init_model(spec, 0);
        random_params(&mut model, &mut rng);
        let ck = Checkpoint::new(model, serde_json::json!({"lr": 0.001}));
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        assert_eq!(bytes[0], CHECKPOINT_VERSION);
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert!(Checkpoint::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 99;
        assert!(Checkpoint::read_from(&mut bad.as_slice()).is_err());
    }
}
