use super::*;
use crate::series::split;
use crate::synthetic::{assemble, SyntheticSpec};

fn wave(len: usize, noise_seed: u64) -> TimeSeries {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(noise_seed);
    let a: Vec<f64> = (0..len)
        .map(|t| (t as f64 * 0.21).sin() * 2.0 + 0.3 * (t as f64 * 0.05).cos() + rng.random_range(-0.1..0.1))
        .collect();
    let b: Vec<f64> = a.iter().enumerate().map(|(t, v)| 0.5 * v + (t as f64 * 0.11).sin()).collect();
    TimeSeries::new(
        ndarray::Array2::from_shape_vec((2, len), [a, b].concat()).unwrap(),
        vec!["a".into(), "b".into()],
    )
    .unwrap()
}

fn small_cfg() -> RunConfig {
    let mut cfg = RunConfig { lookback: 24, horizon: 12, periods: vec![1, 2], ..RunConfig::default() };
    cfg.retrieval.m = 5;
    cfg.train.max_epochs = 3;
    cfg.train.learning_rate = 1e-2;
    cfg
}

fn small_dataset() -> Dataset {
    Dataset::new("wave", &wave(600, 1), SplitSpec::new(400, 500)).unwrap()
}

#[test]
fn window_starts_agree_with_split_views() {
    let raw = wave(600, 1);
    let ds = Dataset::new("wave", &raw, SplitSpec::new(400, 500)).unwrap();
    let parts = split(&raw, &ds.split).unwrap();
    assert_eq!(ds.val_starts(24, 12), parts.val.query_starts(24, 12).collect::<Vec<_>>());
    assert_eq!(ds.test_starts(24, 12), parts.test.query_starts(24, 12).collect::<Vec<_>>());
    // every target lies inside its split
    for &q in &ds.test_starts(24, 12) {
        assert!(q + 24 >= 500 && q + 36 <= 600);
    }
}

#[test]
fn standardization_uses_training_region_only() {
    let raw = wave(600, 2);
    let ds = Dataset::new("wave", &raw, SplitSpec::new(400, 500)).unwrap();
    let train = ds.train_series().unwrap();
    for c in 0..2 {
        assert!(train.channel(c).mean().unwrap().abs() < 1e-12);
    }
    let cut = Dataset::truncate_train(&raw, "wave", ds.split, 0.25).unwrap();
    assert_eq!(cut.train_start, 300);
    let tail = cut.train_series().unwrap();
    assert_eq!(tail.len(), 100);
    assert!(tail.channel(0).mean().unwrap().abs() < 1e-12);
    assert!(Dataset::truncate_train(&raw, "wave", ds.split, 0.0).is_err());
    assert!(Dataset::truncate_train(&raw, "wave", ds.split, 1.5).is_err());
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
    }
    assert!("bogus".parse::<Variant>().is_err());
}

#[test]
fn variants_shape_the_retrieval_stage() {
    let cfg = small_cfg();
    let one = RunConfig { variant: Variant::OnePeriod, ..cfg.clone() };
    assert_eq!(one.effective_periods(), vec![1]);
    let na = RunConfig { variant: Variant::NoAttention, ..cfg.clone() };
    assert_eq!(na.effective_retrieval().weighting, Weighting::Uniform);
    assert_eq!(cfg.effective_retrieval().weighting, Weighting::Softmax);
    let nr = RunConfig { variant: Variant::NoRetrieval, ..cfg.clone() };
    assert!(!nr.model_spec(2).unwrap().retrieval);
    let mut bad = cfg.clone();
    bad.stride = 0;
    assert!(bad.validate().is_err());
    let mut bad = RunConfig { variant: Variant::RandomRetrieval, ..cfg };
    bad.retrieval.metric = MetricKind::CosineProjected;
    assert!(bad.validate().is_err());
}

#[test]
fn run_single_is_deterministic() {
    let ds = small_dataset();
    let cfg = small_cfg();
    let a = run_single(&ds, &cfg, 7, &TestWindows::All).unwrap();
    let b = run_single(&ds, &cfg, 7, &TestWindows::All).unwrap();
    assert_eq!(a.test_mse, b.test_mse);
    assert_eq!(a.test_windows, b.test_windows);
    assert_eq!(a.test_windows.len(), ds.test_starts(24, 12).len());
    let mean_window = mean(&a.test_windows.iter().map(|w| w.1).collect::<Vec<_>>());
    assert!((mean_window - a.test_mse.unwrap()).abs() < 1e-9);
    let skipped = run_single(&ds, &cfg, 7, &TestWindows::Skip).unwrap();
    assert!(skipped.test_mse.is_none());
    assert_eq!(skipped.val_mse, a.val_mse);
}

#[test]
fn every_variant_runs() {
    let ds = small_dataset();
    for v in Variant::ALL {
        let cfg = RunConfig { variant: v, ..small_cfg() };
        let out = run_single(&ds, &cfg, 1, &TestWindows::All).unwrap();
        assert!(out.test_mse.unwrap().is_finite(), "{v}");
        assert_eq!(out.index.is_some(), v != Variant::NoRetrieval);
    }
}

#[test]
fn too_short_training_region_is_an_error() {
    let ds = Dataset::new("wave", &wave(600, 1), SplitSpec::new(30, 500)).unwrap();
    assert!(matches!(
        run_single(&ds, &small_cfg(), 0, &TestWindows::Skip),
        Err(RaftError::SeriesTooShort { .. })
    ));
}

#[test]
fn grid_selection_ignores_test_data() {
    let raw = wave(600, 3);
    let mut altered = raw.clone().into_values();
    altered.slice_mut(ndarray::s![.., 500..]).mapv_inplace(|v| -3.0 * v + 5.0);
    let altered = TimeSeries::new(altered, raw.channel_names().to_vec()).unwrap();
    let spl = SplitSpec::new(400, 500);
    let space = GridSpace { lookbacks: vec![12, 24], learning_rates: vec![1e-3, 1e-2], ms: vec![2, 5] };
    let cfg = small_cfg();
    let a = grid_search(&space, &Dataset::new("a", &raw, spl).unwrap(), &cfg, 12, &[0]).unwrap();
    let b = grid_search(&space, &Dataset::new("b", &altered, spl).unwrap(), &cfg, 12, &[0]).unwrap();
    assert_eq!(a.best, b.best);
    assert_eq!(a.table, b.table);
    assert_ne!(a.test.rows[0].mse, b.test.rows[0].mse);
    assert_eq!(a.table.len(), 8);
    let min = a.table.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
    assert_eq!(a.table.iter().find(|t| t.1 == min).unwrap().0, a.best);
}

#[test]
fn grid_ties_go_to_the_first_point() {
    // m has no effect without retrieval, so every m ties
    let cfg = RunConfig { variant: Variant::NoRetrieval, ..small_cfg() };
    let space = GridSpace { lookbacks: vec![24], learning_rates: vec![1e-2], ms: vec![9, 3, 5] };
    let r = grid_search(&space, &small_dataset(), &cfg, 12, &[0]).unwrap();
    assert!(r.table.windows(2).all(|w| w[0].1 == w[1].1));
    assert_eq!(r.best.m, 9);
    assert!(r.table_csv().lines().nth(1).unwrap().ends_with("true"));
    assert!(GridSpace { ms: vec![], ..space }.points().is_err());
}

#[test]
fn evaluate_and_ablation_reports() {
    let ds = small_dataset();
    let cfg = small_cfg();
    let r = evaluate(&ds, &cfg, &[6, 12], &[0, 1]).unwrap();
    assert_eq!(r.rows.len(), 4);
    assert_eq!(r.timings.len(), 4);
    let means = r.means();
    assert!(means.iter().any(|m| m.horizon.is_none()));
    let ab = run_ablation(&ds, &cfg, Variant::NoAttention, &[12], &[0]).unwrap();
    assert_eq!(ab.rows[0].variant, "no_attention");
}

#[test]
fn stride_and_similarity_studies() {
    let ds = small_dataset();
    let cfg = small_cfg();
    let (rows, report) = stride_study(&ds, &cfg, &[1, 4], &[0]).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].candidates < rows[0].candidates);
    assert_eq!(report.rows[1].setting, "stride=4");
    let sim = similarity_study(&ds, &cfg, &[MetricKind::Pearson, MetricKind::NegL2], &[0]).unwrap();
    assert_eq!(sim.rows.len(), 2);
    assert_ne!(sim.rows[0].setting, sim.rows[1].setting);
}

#[test]
fn training_length_rows() {
    let raw = wave(600, 4);
    let r = training_length_study(&raw, "wave", SplitSpec::new(400, 500), &small_cfg(), &[0.5, 1.0], &[0]).unwrap();
    assert_eq!(r.rows.len(), 4);
    assert!(r.rows.iter().any(|m| m.variant == "no_retrieval" && m.setting == "fraction=0.5"));
    assert!(training_length_study(&raw, "wave", SplitSpec::new(400, 500), &small_cfg(), &[0.05], &[0]).is_err());
}

#[test]
fn diagnostics_records_cover_test_windows() {
    let ds = small_dataset();
    let cfg = small_cfg();
    let with = run_single(&ds, &cfg, 0, &TestWindows::All).unwrap();
    let without = run_single(&ds, &RunConfig { variant: Variant::NoRetrieval, ..cfg.clone() }, 0, &TestWindows::All).unwrap();
    let (records, summary) = diagnostics(&ds, &cfg, &with, &without).unwrap();
    assert_eq!(records.len(), with.test_windows.len());
    assert_eq!(summary.records, records.len());
    for r in &records {
        assert!((-1.0..=1.0).contains(&r.key_similarity));
        assert!((-1.0..=1.0).contains(&r.value_similarity));
        let expect = 100.0 * (r.mse_with - r.mse_without) / r.mse_without;
        assert!((r.mse_change_percent - expect).abs() < 1e-9);
    }
    assert!(summary.spearman_key_value.abs() <= 1.0);
    // the retrieval-free run has nothing to diagnose
    assert!(diagnostics(&ds, &cfg, &without, &with).is_err());
}

#[test]
fn diagnostics_value_similarity_matches_direct_pearson() {
    let ds = small_dataset();
    let cfg = RunConfig { periods: vec![1], ..small_cfg() };
    let with = run_single(&ds, &cfg, 0, &TestWindows::All).unwrap();
    let without = run_single(&ds, &RunConfig { variant: Variant::NoRetrieval, ..cfg.clone() }, 0, &TestWindows::All).unwrap();
    let (records, _) = diagnostics(&ds, &cfg, &with, &without).unwrap();
    let r = &records[0];
    let q = r.query_start;
    let res = with.test_cache.as_ref().unwrap().get(q).unwrap();
    let train = ds.train_series().unwrap();
    let v = ds.series.values();
    let per_channel: Vec<f64> = res.periods[0]
        .starts
        .iter()
        .map(|&s| {
            mean(
                &(0..2)
                    .map(|c| {
                        let a: Vec<f64> = v.slice(ndarray::s![c, q + 24..q + 36]).to_vec();
                        let b: Vec<f64> = train.values().slice(ndarray::s![c, s + 24..s + 36]).to_vec();
                        pearson(&a, &b).unwrap()
                    })
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let direct = mean(&per_channel);
    assert!((r.value_similarity - direct).abs() < 1e-9, "{} vs {direct}", r.value_similarity);
}

#[test]
fn synthetic_study_summaries() {
    let base = SyntheticSpec { total_length: 4000, n_distinct_patterns: 2, pattern_length: 48, ..SyntheticSpec::default() };
    let cfg = RunConfig { lookback: 24, horizon: 24, periods: vec![1], ..small_cfg() };
    let (rows, sums) = synthetic_study(&base, crate::synthetic::PatternKind::Ar, &[1, 2], 2, &cfg).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(sums.len(), 2);
    for s in &sums {
        assert_eq!(s.series, 2);
        let expect = 100.0 * (s.mse_with - s.mse_without) / s.mse_without;
        assert!((s.change_percent - expect).abs() < 1e-9);
    }
    assert!(assemble(&base).is_ok());
}

#[test]
fn rescoring_a_trained_model_matches_the_run() {
    let ds = small_dataset();
    for v in [Variant::Full, Variant::RandomRetrieval, Variant::NoRetrieval] {
        let cfg = RunConfig { variant: v, ..small_cfg() };
        let out = run_single(&ds, &cfg, 3, &TestWindows::All).unwrap();
        let s = score_model(&ds, &cfg, &out.model, 3).unwrap();
        assert_eq!(Some(s.mse), out.test_mse, "{v}");
        assert_eq!(s.windows, out.test_windows);
    }
    let cfg = small_cfg();
    let out = run_single(&ds, &cfg, 0, &TestWindows::Skip).unwrap();
    let other = RunConfig { lookback: 12, ..cfg };
    assert!(matches!(score_model(&ds, &other, &out.model, 0), Err(RaftError::FingerprintMismatch { .. })));
}
