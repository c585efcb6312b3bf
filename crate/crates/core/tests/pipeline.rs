use grp_core::backbones::BackboneKind;
use grp_core::data::{k_core_filter, split_80_20, synth_generate, BoundDataset, SynthSpec};
use grp_core::distributions::DistKind;
use grp_core::experiment::{execute, prepare_dataset, run, sweep, RunConfig, SweepAxis};
use grp_core::grp::{GrpModel, ParamMode, Variant};
use grp_core::params::ParamStore;
use grp_core::report::ExperimentReport;
use grp_core::training::train;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SMALL: &str = "table2:musical,n=2000,users=200,items=80";

fn small(kind: BackboneKind, variant: Variant) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply("synth", SMALL).unwrap();
    cfg.backbone.kind = kind;
    cfg.backbone.dim = 8;
    cfg.fusion.filters_per_scale = 2;
    cfg.variant = variant;
    cfg.train.max_epochs = 2;
    cfg
}

#[test]
fn every_variant_trains_on_both_backbones() {
    for kind in [BackboneKind::Pmf, BackboneKind::NeuMf] {
        let cfg = small(kind, Variant::Full);
        let (ds, name) = prepare_dataset(&cfg).unwrap();
        for variant in Variant::ALL {
            let out = execute(
                &RunConfig {
                    variant,
                    ..cfg.clone()
                },
                &ds,
                &name,
            )
            .unwrap();
            let mae = out.report.overall_mae.unwrap();
            assert!(mae.is_finite() && mae < 4.0, "{kind} {variant}: {mae}");
            assert_eq!(out.report.test_size(), ds.test.len());
            assert_eq!(out.history.len(), 4);
            assert_eq!(
                out.min_guarded_param.is_some(),
                !matches!(variant, Variant::BackboneOnly | Variant::MinusG)
            );
        }
    }
}

#[test]
fn same_seed_same_history_different_seed_different_history() {
    let cfg = small(BackboneKind::Pmf, Variant::Full);
    let (ds, name) = prepare_dataset(&cfg).unwrap();
    let a = execute(&cfg, &ds, &name).unwrap();
    let b = execute(&cfg, &ds, &name).unwrap();
    assert_eq!(a.history, b.history);
    let mut other = cfg.clone();
    other.train.seed = 43;
    let c = execute(&other, &ds, &name).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn best_epoch_is_the_lowest_test_mae() {
    let mut cfg = small(BackboneKind::Pmf, Variant::Full);
    cfg.train.max_epochs = 4;
    let (ds, name) = prepare_dataset(&cfg).unwrap();
    let out = execute(&cfg, &ds, &name).unwrap();
    let tests: Vec<_> = out.history.iter().filter(|h| h.split == "test").collect();
    let best = tests.iter().min_by(|a, b| a.mae.total_cmp(&b.mae)).unwrap();
    assert_eq!(best.epoch, out.best_epoch);
    // Restored parameters reproduce the best epoch's test MAE.
    assert!((out.report.overall_mae.unwrap() - best.mae).abs() < 1e-12);
}

#[test]
fn frozen_backbone_does_not_move() {
    let cfg = small(BackboneKind::NeuMf, Variant::Full);
    let (ds, _) = prepare_dataset(&cfg).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = GrpModel::for_dataset(&mut store, cfg.model_config(), &ds, &mut rng).unwrap();
    for id in model.backbone_param_ids() {
        store.set_frozen(id, true);
    }
    let before = store.clone();
    train(&model, &mut store, &ds, &cfg.train).unwrap();
    for id in model.backbone_param_ids() {
        assert_eq!(store.value(id), before.value(id));
    }
    assert!(model
        .gumbel_param_ids()
        .iter()
        .any(|&id| store.value(id) != before.value(id)));
}

#[test]
fn mle_mode_runs_and_rejects_other_densities() {
    let mut cfg = small(BackboneKind::Pmf, Variant::Full);
    cfg.param_mode = ParamMode::Mle;
    let (ds, name) = prepare_dataset(&cfg).unwrap();
    let out = execute(&cfg, &ds, &name).unwrap();
    assert!(out.report.overall_mae.unwrap().is_finite());
    cfg.dist = DistKind::Normal;
    assert!(execute(&cfg, &ds, &name).is_err());
}

#[test]
fn run_outputs_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(BackboneKind::Pmf, Variant::MinusF);
    cfg.out = dir.path().join("o");
    let out = run(&cfg, "test").unwrap();
    let text = std::fs::read_to_string(cfg.out.join("report.csv")).unwrap();
    assert_eq!(ExperimentReport::parse_csv(&text).unwrap(), out.report);
    let again = RunConfig::from_file(&cfg.out.join("manifest.txt")).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn variant_sweep_rows_follow_the_ablation_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(BackboneKind::Pmf, Variant::Full);
    cfg.train.max_epochs = 1;
    cfg.out = dir.path().to_path_buf();
    let table = sweep(&cfg, SweepAxis::Variant, "test").unwrap();
    let methods: Vec<&str> = table.cells.iter().map(|c| c.method.as_str()).collect();
    assert_eq!(methods, ["PMF", "PMF(G)", "-G", "-F", "-D"]);
    assert!(table.cells.iter().all(|c| c.outcome.is_ok()));
    assert!(dir.path().join("sweep-variant.csv").exists());
}

#[test]
fn synthetic_data_survives_the_pipeline_intact() {
    let spec = SynthSpec::parse(SMALL, 7).unwrap();
    let records = synth_generate(&spec).unwrap();
    assert_eq!(records.len(), 2000);
    assert_eq!(k_core_filter(&records, 5).unwrap().len(), records.len());
    let split = split_80_20(&records, 7).unwrap();
    assert_eq!(split.train.len() + split.test.len(), records.len());
    let ds = BoundDataset::bind(&split, 5).unwrap();
    for q in ds.user_ratios.iter().chain(&ds.item_ratios) {
        let s: f64 = q.q.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    // The split is a function of the seed alone.
    assert_eq!(split_80_20(&records, 7).unwrap().test, split.test);
}
