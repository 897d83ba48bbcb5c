use super::*;
use crate::data::{synth_generate, SynthConfig, TimeSeriesPanel};
use crate::model::tests::toy_config;
use crate::numerics::grad_check;
use proptest::prelude::{prop_assert, proptest};

fn toy_panel() -> TimeSeriesPanel {
    synth_generate(&SynthConfig::new(2, 20, 3, 0.6)).unwrap()
}

fn toy_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        max_epochs: 2,
        patience: 5,
        seed: 11,
        windows_per_epoch: 8,
        missing_rate: 0.0,
    }
}

#[test]
fn mse_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let c = t.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
    let zero = mse_loss(&mut t, a, b).unwrap();
    let four = mse_loss(&mut t, c, a).unwrap();
    assert_eq!(t.value(zero).data()[0], 0.0);
    assert_eq!(t.value(four).data()[0], 4.0);
    let d = t.constant(Tensor::zeros(vec![1, 3]));
    assert!(mse_loss(&mut t, a, d).is_err());
}

#[test]
fn mse_gradient_matches_formula_and_differences() {
    let mut store = ParamStore::new();
    let pred = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25]).unwrap();
    let target = Tensor::matrix(2, 3, vec![1.0, 1.0, 1.0, -1.0, 2.0, 0.0]).unwrap();
    let id = store.add("pred", pred.clone(), false).unwrap();
    let mut t = Tape::new();
    let p = t.param(&store, id);
    let y = t.constant(target.clone());
    let loss = mse_loss(&mut t, p, y).unwrap();
    let g = t.backward(loss).unwrap();
    for i in 0..6 {
        let want = 2.0 * (pred.data()[i] - target.data()[i]) / 6.0;
        assert!((g.param(id).unwrap().data()[i] - want).abs() < 1e-15);
    }
    let report = grad_check(&store, 1e-6, |t, s| {
        let p = t.param(s, id);
        let y = t.constant(target.clone());
        mse_loss(t, p, y)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-7);
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::row_vector(vec![1.0, -2.0]), false).unwrap();
    let mut adam = Adam::new(0.1);
    adam.step(&mut store, &[(id, Tensor::row_vector(vec![0.0, 0.0]))]).unwrap();
    assert_eq!(store.value(id).data(), &[1.0, -2.0]);
}

#[test]
fn adam_first_step_is_signed_learning_rate() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::row_vector(vec![1.0, 1.0, 1.0]), false).unwrap();
    let mut adam = Adam::new(0.01);
    adam.step(&mut store, &[(id, Tensor::row_vector(vec![3.0, -1e-3, 250.0]))]).unwrap();
    let moved: Vec<f64> = store.value(id).data().iter().map(|v| v - 1.0).collect();
    for (m, sign) in moved.iter().zip([-1.0, 1.0, -1.0]) {
        assert!((m - sign * 0.01).abs() < 1e-7, "{moved:?}");
    }
    assert_eq!(adam.steps(), 1);
}

#[test]
fn adam_minimizes_convex_quadratic() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::row_vector(vec![0.3, -0.4, 0.2]), false).unwrap();
    let target = Tensor::row_vector(vec![0.0, 0.1, -0.1]);
    let loss = |w: &Tensor| w.data().iter().zip(target.data()).enumerate().map(|(i, (a, b))| (i as f64 + 1.0) * (a - b).powi(2)).sum::<f64>();
    let initial = loss(store.value(id));
    let mut adam = Adam::new(0.01);
    for _ in 0..200 {
        let w = store.value(id);
        let g: Vec<f64> = w.data().iter().zip(target.data()).enumerate().map(|(i, (a, b))| 2.0 * (i as f64 + 1.0) * (a - b)).collect();
        adam.step(&mut store, &[(id, Tensor::row_vector(g))]).unwrap();
    }
    assert!(loss(store.value(id)) < 1e-4 * initial, "{} vs {initial}", loss(store.value(id)));
}

#[test]
fn adam_rejects_bad_gradients_without_side_effects() {
    let mut store = ParamStore::new();
    let a = store.add("adapter.a", Tensor::row_vector(vec![1.0]), false).unwrap();
    let b = store.add("adapter.b", Tensor::row_vector(vec![1.0]), false).unwrap();
    let frozen = store.add("table", Tensor::row_vector(vec![1.0]), true).unwrap();
    let mut adam = Adam::new(0.1);
    let err = adam
        .step(&mut store, &[(a, Tensor::row_vector(vec![1.0])), (b, Tensor::row_vector(vec![f64::NAN]))])
        .unwrap_err();
    assert!(err.to_string().contains("adapter.b"), "{err}");
    assert_eq!(store.value(a).data(), &[1.0]);
    assert_eq!(adam.steps(), 0);
    assert!(adam.step(&mut store, &[(frozen, Tensor::row_vector(vec![1.0]))]).is_err());
    assert!(adam.step(&mut store, &[(a, Tensor::row_vector(vec![1.0, 2.0]))]).is_err());
}

#[test]
fn train_config_validation() {
    TrainConfig::default().validate().unwrap();
    for bad in [
        TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { max_epochs: 0, ..TrainConfig::default() },
        TrainConfig { missing_rate: 1.0, ..TrainConfig::default() },
        TrainConfig { missing_rate: -0.1, ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn config_hash_ignores_missing_rate_only() {
    let m = ModelConfig::default();
    let t = TrainConfig::default();
    let h = config_hash(&m, &t);
    assert_eq!(h.len(), 64);
    assert_eq!(h, config_hash(&m, &TrainConfig { missing_rate: 0.2, ..t.clone() }));
    assert_ne!(h, config_hash(&m, &TrainConfig { learning_rate: 2e-3, ..t.clone() }));
    assert_ne!(h, config_hash(&ModelConfig { no_gcn: true, ..m }, &t));
}

#[test]
fn one_epoch_with_zero_patience() {
    let config = TrainConfig { patience: 0, max_epochs: 1, ..toy_train() };
    let (_, history) = train(&toy_panel(), &toy_config(), &config).unwrap();
    assert_eq!(history.epochs.len(), 1);
    assert_eq!(history.best_epoch, 1);
    assert_eq!(history.stop_reason, StopReason::MaxEpochs);
}

#[test]
fn training_is_deterministic_and_keeps_backbone_frozen() {
    let panel = toy_panel();
    let run = || {
        let (model, history) = train(&panel, &toy_config(), &toy_train()).unwrap();
        let mut ckpt = Vec::new();
        model.save(&mut ckpt, 11, "h").unwrap();
        let mut csv = Vec::new();
        history.write_csv(&mut csv).unwrap();
        (model, history, ckpt, csv)
    };
    let (model, history, ckpt_a, csv_a) = run();
    let (_, _, ckpt_b, csv_b) = run();
    assert_eq!(csv_a, csv_b);
    assert_eq!(ckpt_a, ckpt_b);
    let fresh = EvLlm::new(toy_config(), 11, &split_panels(&panel, 48).unwrap().train).unwrap();
    assert_eq!(model.store.frozen_checksum(), fresh.store.frozen_checksum());
    let best = history.epochs[history.best_epoch - 1].validation_loss;
    assert_eq!(best, history.best_validation_loss());
}

#[test]
fn training_never_reads_the_test_split() {
    let panel = toy_panel();
    let (_, history) = train(&panel, &toy_config(), &toy_train()).unwrap();
    let bounds = split_panels(&panel, 48).unwrap().bounds;
    assert!(history.audit.train_rows.end <= bounds.validation.start);
    assert!(history.audit.validation_rows.end <= bounds.test.start);
    assert!(history.audit.validation_rows.start >= bounds.validation.start);
}

#[test]
fn huge_learning_rate_diverges_with_history() {
    let config = TrainConfig {
        learning_rate: 1e300,
        ..toy_train()
    };
    match train(&toy_panel(), &toy_config(), &config) {
        Err(Error::Diverged { epoch, history, .. }) => {
            assert!(epoch >= 1);
            assert!(history.starts_with("epoch,train_loss,validation_loss\n0,,"));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn restores_best_parameters() {
    let panel = toy_panel();
    let config = TrainConfig { max_epochs: 4, learning_rate: 0.05, ..toy_train() };
    let (model, history) = train(&panel, &toy_config(), &config).unwrap();
    let splits = split_panels(&panel, 48).unwrap();
    let windows: Vec<PreparedWindow> = window_starts(&(0..splits.validation.len()), 48, 16)
        .into_iter()
        .map(|s| model.prepare(&extract_window(&splits.validation, s, 32, 16).unwrap()).unwrap())
        .collect();
    let loss = validation_loss(&model, &windows, config.batch_size).unwrap();
    assert!((loss - history.best_validation_loss()).abs() < 1e-12);
}

#[test]
fn history_csv_layout() {
    let history = TrainHistory {
        untrained_validation_loss: 2.0,
        epochs: vec![
            EpochRecord { epoch: 1, train_loss: 1.5, validation_loss: 1.25, seconds: 3.0 },
            EpochRecord { epoch: 2, train_loss: 1.0, validation_loss: 1.5, seconds: 3.0 },
        ],
        best_epoch: 1,
        stop_reason: StopReason::EarlyStopping,
        audit: DataAudit { train_rows: 0..1, validation_rows: 1..2 },
    };
    let mut buf = Vec::new();
    history.write_csv(&mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "# best_epoch=1 stop_reason=early_stopping\nepoch,train_loss,validation_loss\n0,,2\n1,1.5,1.25\n2,1,1.5\n"
    );
}

fn prediction(start: usize, p: &[f64], a: &[f64]) -> WindowPrediction {
    WindowPrediction {
        start,
        forecast_start: chrono::NaiveDate::from_ymd_opt(2021, 3, 1).unwrap().and_hms_opt(start as u32 % 24, 0, 0).unwrap(),
        predicted: Tensor::matrix(1, p.len(), p.to_vec()).unwrap(),
        actual: Tensor::matrix(1, a.len(), a.to_vec()).unwrap(),
    }
}

#[test]
fn metric_hand_cases() {
    let r = EvalReport::from_predictions(vec!["s".into()], vec![prediction(0, &[1.0], &[1.0]), prediction(1, &[2.0], &[3.0])]).unwrap();
    assert_eq!(r.avg_mae, 0.5);
    assert_eq!(r.avg_rmse, 0.5f64.sqrt());
    let perfect = EvalReport::from_predictions(vec!["s".into()], vec![prediction(0, &[4.0, 5.0], &[4.0, 5.0])]).unwrap();
    assert_eq!((perfect.avg_mae, perfect.avg_rmse), (0.0, 0.0));
    assert!(EvalReport::from_predictions(vec!["s".into()], vec![]).is_err());
}

#[test]
fn metrics_csv_has_cell_rows_and_average() {
    let r = EvalReport::from_predictions(vec!["a".into()], vec![prediction(0, &[1.0, 2.0], &[1.0, 4.0])]).unwrap();
    let mut buf = Vec::new();
    r.write_metrics_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "station,horizon,mae,rmse\na,1,0,0\na,2,2,2\nall,all,1,1\n");
}

#[test]
fn prediction_dump_round_trips() {
    let r = EvalReport::from_predictions(
        vec!["s1".into()],
        vec![prediction(40, &[0.1, 1.0 / 3.0], &[0.2, 0.7]), prediction(56, &[2.5, -1e-17], &[2.0, 0.0])],
    )
    .unwrap();
    let mut buf = Vec::new();
    r.write_predictions_csv(&mut buf).unwrap();
    let (ids, windows) = read_predictions_csv(buf.as_slice()).unwrap();
    assert_eq!(ids, r.stations);
    assert_eq!(windows, r.predictions);
    let bad = "window_start,forecast_start,station,horizon,predicted,actual\n0,2021-03-01T00:00:00,s,1,x,1\n";
    assert!(matches!(read_predictions_csv(bad.as_bytes()), Err(Error::Parse { line: 2, .. })));
}

#[test]
fn mask_fraction_is_exact() {
    let h = Tensor::from_fn(192, 10, |t, s| (t as f64 * 0.1 + s as f64).sin());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (filled, masked) = mask_history(&h, 0.10, &mut rng).unwrap();
    assert_eq!(masked, 192);
    let changed = filled.data().iter().zip(h.data()).filter(|(a, b)| a != b).count();
    assert!(changed <= masked);
    let frac = masked as f64 / h.len() as f64;
    assert!((frac - 0.10).abs() <= 0.005);
}

#[test]
fn zero_missing_rate_matches_unmasked_evaluation() {
    let panel = toy_panel();
    let b = Baseline::fit(BaselineKind::LinearRidge, &split_panels(&panel, 48).unwrap().train).unwrap();
    let a = evaluate_baseline(&b, &panel, 32, 16, 0.0, 1).unwrap();
    let again = evaluate_baseline(&b, &panel, 32, 16, 0.0, 99).unwrap();
    assert_eq!(a, again);
    let masked = evaluate_baseline(&b, &panel, 32, 16, 0.2, 1).unwrap();
    assert_ne!(a.avg_mae, masked.avg_mae);
}

#[test]
fn perfect_forecaster_scores_zero() {
    let panel = toy_panel();
    let r = evaluate_with(&panel, 32, 16, 0.0, 0, |ws| Ok(ws.iter().map(|w| w.target.transpose()).collect())).unwrap();
    assert_eq!(r.avg_mae, 0.0);
    assert_eq!(r.rmse.sum(), 0.0);
    let bounds = split_panels(&panel, 48).unwrap().bounds;
    assert!(r.predictions.iter().all(|p| p.start >= bounds.test.start));
}

#[test]
fn evaluate_rejects_foreign_stations() {
    let panel = toy_panel();
    let model = EvLlm::new(toy_config(), 1, &split_panels(&panel, 48).unwrap().train).unwrap();
    let other = synth_generate(&SynthConfig::new(3, 20, 3, 0.6)).unwrap();
    assert!(evaluate(&model, &other, 0.0, 0).unwrap_err().is_data_error());
}

#[test]
fn baselines_on_constant_history() {
    let panel = toy_panel();
    let train = split_panels(&panel, 48).unwrap().train;
    let h = Tensor::full(vec![48, 2], 3.5);
    for kind in BaselineKind::ALL {
        let f = Baseline::fit(kind, &train).unwrap().forecast(&h, 30).unwrap();
        assert!(f.data().iter().all(|&v| (v - 3.5).abs() < 1e-12), "{kind:?}");
    }
    assert!(Baseline::fit(BaselineKind::Persistence, &train).unwrap().forecast(&Tensor::zeros(vec![20, 2]), 4).is_err());
}

#[test]
fn seasonal_naive_is_exact_on_daily_period() {
    let f = |t: usize| ((t % 24) as f64 * 0.7).cos() + (t % 24) as f64;
    let hist = Tensor::from_fn(72, 1, |t, _| f(t));
    let out = Baseline::fit(BaselineKind::SeasonalNaive, &toy_panel()).unwrap().forecast(&hist, 48).unwrap();
    for h in 0..48 {
        assert_eq!(out.get(0, h), f(72 + h));
    }
}

#[test]
fn ridge_tracks_a_daily_cycle() {
    let panel = synth_generate(&SynthConfig::new(1, 30, 1, 0.0)).unwrap();
    let col = panel.station_column(0);
    let persistence = Baseline::fit(BaselineKind::Persistence, &panel).unwrap();
    let ridge = Baseline::fit(BaselineKind::LinearRidge, &panel).unwrap();
    let hist = Tensor::from_fn(96, 1, |t, _| col[500 + t]);
    let truth = &col[596..620];
    let err = |b: &Baseline| {
        let f = b.forecast(&hist, 24).unwrap();
        (0..24).map(|h| (f.get(0, h) - truth[h]).abs()).sum::<f64>()
    };
    assert!(err(&ridge) < err(&persistence));
}

#[test]
fn seasonal_naive_beats_persistence_on_synthetic() {
    let panel = synth_generate(&SynthConfig::new(4, 120, 7, 0.6)).unwrap();
    let train = split_panels(&panel, 240).unwrap().train;
    let score = |k| evaluate_baseline(&Baseline::fit(k, &train).unwrap(), &panel, 192, 48, 0.0, 0).unwrap().avg_rmse;
    assert!(score(BaselineKind::SeasonalNaive) < score(BaselineKind::Persistence));
}

#[test]
fn ablation_rows_and_full_consistency() {
    let panel = toy_panel();
    let config = TrainConfig { max_epochs: 1, ..toy_train() };
    let result = ablate(&panel, &toy_config(), &config, &Vocabulary::builtin(), |_| {}).unwrap();
    let names: Vec<&str> = result.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["full", "no_prompt", "no_gcn", "missing_rate_0.10", "missing_rate_0.20"]);
    let (model, _) = train(&panel, &toy_config(), &config).unwrap();
    let standalone = evaluate(&model, &panel, 0.0, config.seed).unwrap();
    assert_eq!(result.rows[0].avg_mae, standalone.avg_mae);
    assert_eq!(result.rows[0].avg_rmse, standalone.avg_rmse);
    let mut buf = Vec::new();
    write_ablation_csv(&result.rows, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 6);
}

proptest! {
    #[test]
    fn averages_are_means_of_cells(values in proptest::collection::vec(-5.0f64..5.0, 24)) {
        let windows: Vec<WindowPrediction> = (0..3)
            .map(|w| {
                let p: Vec<f64> = values[w * 8..w * 8 + 4].to_vec();
                let a: Vec<f64> = values[w * 8 + 4..w * 8 + 8].to_vec();
                WindowPrediction {
                    start: w,
                    forecast_start: chrono::NaiveDate::from_ymd_opt(2021, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap(),
                    predicted: Tensor::matrix(2, 2, p).unwrap(),
                    actual: Tensor::matrix(2, 2, a).unwrap(),
                }
            })
            .collect();
        let r = EvalReport::from_predictions(vec!["a".into(), "b".into()], windows).unwrap();
        prop_assert!((r.avg_mae - r.mae.sum() / 4.0).abs() < 1e-12);
        prop_assert!(r.avg_rmse + 1e-12 >= r.avg_mae && r.avg_mae >= 0.0);
        for (m, s) in r.mae.data().iter().zip(r.rmse.data()) {
            prop_assert!(s + 1e-12 >= *m);
        }
    }
}
