use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;
use subasm::asp_graph::RewardMode;
use subasm::feasibility::FeasibilityConfig;
use subasm::gnn::QNetParams;
use subasm::harness::*;
use subasm::rl::{greedy_success_rate, Environment, TrainerConfig};
use subasm::search::Method;
use tempfile::TempDir;

fn tiny_trainer() -> TrainerConfig {
    TrainerConfig {
        epochs: 4,
        episodes_per_epoch: 5,
        warmup: 32,
        batch: 8,
        eval_every_epochs: 2,
        ..TrainerConfig::default()
    }
}

fn spec_for(out: &Path, datasets: Vec<std::path::PathBuf>) -> ExperimentSpec {
    ExperimentSpec {
        datasets,
        seeds: vec![0],
        beam_widths: vec![1, 3],
        trainer: tiny_trainer(),
        out_dir: out.join("out"),
        ..ExperimentSpec::default()
    }
}

fn files_in(dir: &Path) -> BTreeSet<String> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("instance_"))
        .collect()
}

#[test]
fn generate_writes_default_dataset_sizes() {
    let tmp = TempDir::new().unwrap();
    for (m, k) in [(4, 272), (5, 301)] {
        let dir = tmp.path().join(format!("m{m}"));
        let manifest = generate_dataset(&dir, m, k, 0).unwrap();
        assert_eq!(manifest.count, k);
        assert_eq!(files_in(&dir).len(), k);
        let dataset = load_dataset(&dir).unwrap();
        assert_eq!(dataset.len(), k);
        assert!(dataset.instances.iter().all(|i| i.m() == m));
    }
}

#[test]
fn generate_is_byte_identical_on_rerun() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate_dataset(&a, 6, 12, 9).unwrap();
    generate_dataset(&b, 6, 12, 9).unwrap();
    for name in files_in(&a).into_iter().chain(["manifest.json".to_string()]) {
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name}");
    }
    let c = tmp.path().join("c");
    generate_dataset(&c, 6, 12, 10).unwrap();
    assert_ne!(std::fs::read(a.join("instance_0000.json")).unwrap(), std::fs::read(c.join("instance_0000.json")).unwrap());
}

#[test]
fn labeling_persists_every_edge_and_is_idempotent() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("m4");
    generate_dataset(&dir, 4, 3, 1).unwrap();
    let dataset = load_dataset(&dir).unwrap();
    let oracle = FeasibilityConfig::default();
    let first = label_dataset(&dataset, &oracle).unwrap();
    assert_eq!(first.labels, 3 * 32);
    assert!(first.per_instance.iter().all(|s| s.labels == 32));
    assert_eq!(first.oracle_calls, 3 * 32);
    let second = label_dataset(&dataset, &oracle).unwrap();
    assert_eq!(second.oracle_calls, 0);
    assert_eq!(second.per_instance, first.per_instance);

    // Cached labels round-trip into fresh graphs.
    let graphs = load_graphs(&dataset, &oracle).unwrap();
    for g in &graphs {
        assert_eq!(g.labeled_count(), 32);
        assert_eq!(g.oracle_calls(), 0);
    }
    let text = std::fs::read_to_string(dir.join("labels/instance_0000.labels")).unwrap();
    assert_eq!(text, graphs[0].labels_to_text());

    // A cache built with other oracle settings is refused, not silently reused.
    let err = load_graphs(&dataset, &FeasibilityConfig::lenient()).unwrap_err();
    assert!(matches!(err, HarnessError::StaleLabels { .. }));
}

proptest! {
    #[test]
    fn splits_are_disjoint_complete_and_seed_stable(n in 0usize..800, seed in any::<u64>(), frac in 0.05f64..0.95) {
        let s = split_ids(n, frac, seed);
        prop_assert_eq!(&s, &split_ids(n, frac, seed));
        let train: BTreeSet<_> = s.train.iter().copied().collect();
        let test: BTreeSet<_> = s.test.iter().copied().collect();
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), n);
        prop_assert!(train.iter().chain(&test).all(|&id| id < n));
        prop_assert_eq!(s.train.len(), ((n as f64) * frac).round() as usize);
    }
}

#[test]
fn split_depends_on_seed() {
    assert_ne!(split_ids(100, 0.8, 0), split_ids(100, 0.8, 1));
}

#[test]
fn experiment_spec_reads_toml_with_nested_tables() {
    let text = r#"
datasets = ["data/m4"]
methods = ["greedy", "random_walk"]
beam_widths = [1, 3, 5]
seeds = [3, 4]
reward_mode = "immediate"
out_dir = "runs"
full_dataset = true

[trainer]
epochs = 10
lr = 0.0003

[oracle]
budget = 1000
"#;
    let spec: ExperimentSpec = toml::from_str(text).unwrap();
    assert_eq!(spec.methods, vec![Method::Greedy, Method::RandomWalk]);
    assert_eq!(spec.seeds, vec![3, 4]);
    assert_eq!(spec.trainer.epochs, 10);
    assert_eq!(spec.oracle.budget, 1000);
    assert!(spec.full_dataset);
    let trainer = spec.trainer_for(4);
    assert_eq!((trainer.seed, trainer.reward_mode, trainer.lr), (4, RewardMode::Immediate, 3e-4));
    let back: ExperimentSpec = toml::from_str(&toml::to_string(&spec).unwrap()).unwrap();
    assert_eq!(back, spec);
    assert!(toml::from_str::<ExperimentSpec>("beam_width = [1]\n").is_err());
    assert!(toml::from_str::<ExperimentSpec>("[trainer]\nlearning_rate = 1.0\n").is_err());
}

#[test]
fn experiment_spec_validation() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("m4");
    generate_dataset(&dir, 4, 2, 0).unwrap();
    let good = spec_for(tmp.path(), vec![dir.clone()]);
    assert!(good.validate().is_ok());
    let cases = [
        ExperimentSpec { datasets: vec![], ..good.clone() },
        ExperimentSpec { datasets: vec![tmp.path().join("missing")], ..good.clone() },
        ExperimentSpec { seeds: vec![1, 1], ..good.clone() },
        ExperimentSpec { seeds: vec![], ..good.clone() },
        ExperimentSpec { beam_widths: vec![0], ..good.clone() },
        ExperimentSpec { train_fraction: 1.0, ..good.clone() },
        ExperimentSpec { trainer: TrainerConfig { gamma: 2.0, ..tiny_trainer() }, ..good.clone() },
    ];
    for (i, bad) in cases.iter().enumerate() {
        assert!(bad.validate().is_err(), "case {i}");
    }
}

#[test]
fn training_writes_reproducible_checkpoints_and_labeled_curves() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("m4");
    generate_dataset(&dir, 4, 15, 2).unwrap();
    let mut spec = spec_for(tmp.path(), vec![dir.clone()]);
    let delayed = cmd_train(&spec, |_, _, _| {}).unwrap();
    let first = std::fs::read(&delayed[0].checkpoint).unwrap();
    let rerun = cmd_train(&spec, |_, _, _| {}).unwrap();
    assert_eq!(std::fs::read(&rerun[0].checkpoint).unwrap(), first);
    assert_eq!(delayed, rerun.iter().map(|r| TrainRecord { wall_time_s: delayed[0].wall_time_s, ..r.clone() }).collect::<Vec<_>>());

    spec.reward_mode = RewardMode::Immediate;
    let immediate = cmd_train(&spec, |_, _, _| {}).unwrap();
    assert_ne!(delayed[0].curve, immediate[0].curve);
    assert!(delayed[0].curve.to_string_lossy().contains("delayed"));
    assert!(immediate[0].curve.to_string_lossy().contains("immediate"));
    let curve = read_curve(&immediate[0].curve).unwrap();
    assert_eq!(curve.len(), 4);

    // The checkpoint reproduces the recorded held-out score.
    let data = Prepared::load(&dir, &spec).unwrap();
    let params = QNetParams::<f64>::load(&delayed[0].checkpoint).unwrap();
    let envs: Vec<Environment<f64>> = data
        .split
        .test
        .iter()
        .map(|&id| Environment::new(data.graphs[id].instance().clone(), spec.oracle.clone()))
        .collect();
    assert_eq!(Some(greedy_success_rate(&params, &envs)), delayed[0].final_eval);
}

#[test]
fn eval_reports_one_row_per_method_and_width() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("m4");
    generate_dataset(&dir, 4, 20, 3).unwrap();
    let spec = ExperimentSpec { seeds: vec![0, 1], ..spec_for(tmp.path(), vec![dir]) };
    let report = cmd_eval(&spec).unwrap();
    let keys: Vec<(Method, Option<usize>)> = report.summary.iter().map(|r| (r.method, r.b)).collect();
    assert_eq!(
        keys,
        vec![
            (Method::RandomWalk, None),
            (Method::Heuristic, None),
            (Method::Greedy, None),
            (Method::Beam, Some(1)),
            (Method::Beam, Some(3)),
        ]
    );
    assert_eq!(report.rows.len(), 2 * 5);
    for r in &report.rows {
        assert_eq!(r.trials, 4);
        assert_eq!(r.success_rate, r.successes as f64 / r.trials as f64);
        assert_eq!(r.m_train.is_some(), matches!(r.method, Method::Greedy | Method::Beam));
    }
    for row in &report.summary {
        assert_eq!(row.cells.len(), 1);
        assert_eq!(row.cells[0].seeds, 2);
    }

    // Rows are a pure function of the persisted plans.
    let eval = spec.out_dir.join("eval");
    let plans = read_plans(&eval.join("plans.jsonl")).unwrap();
    assert_eq!(rows_from_plans(&plans), report.rows);
    let mut csv_rows = csv::Reader::from_path(eval.join("results.csv")).unwrap();
    let from_csv: Vec<ResultRow> = csv_rows.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(from_csv, report.rows);
    assert!(std::fs::read_to_string(eval.join("summary.txt")).unwrap().contains("random_walk"));
}

#[test]
fn baselines_evaluate_without_a_model() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("m5");
    generate_dataset(&dir, 5, 10, 4).unwrap();
    let spec = ExperimentSpec {
        methods: vec![Method::RandomWalk, Method::Heuristic],
        full_dataset: true,
        ..spec_for(tmp.path(), vec![dir])
    };
    let report = cmd_eval(&spec).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| r.trials == 10));
    assert!(!spec.out_dir.join("models").exists());
}

#[test]
fn generalization_matrix_has_empty_diagonal_at_width_three() {
    let tmp = TempDir::new().unwrap();
    let dirs: Vec<_> = [4, 5, 6, 7]
        .iter()
        .map(|&m| {
            let dir = tmp.path().join(format!("m{m}"));
            generate_dataset(&dir, m, 5, 0).unwrap();
            dir
        })
        .collect();
    let mut spec = spec_for(tmp.path(), dirs);
    spec.trainer.epochs = 2;
    let report = cmd_generalize(&spec).unwrap();
    assert_eq!(report.sizes, vec![4, 5, 6, 7]);
    assert_eq!(report.beam_width, 3);
    for (i, row) in report.matrix.iter().enumerate() {
        assert_eq!(row.len(), 4);
        for (j, cell) in row.iter().enumerate() {
            if i == j {
                assert!(cell.is_none());
            } else {
                assert!((0.0..=1.0).contains(&cell.unwrap()));
            }
        }
    }
    assert!(report.rows.iter().filter(|r| r.method == Method::Beam).all(|r| r.b == Some(3)));
    assert_eq!(report.rows.iter().filter(|r| r.method == Method::Beam).count(), 12);
    assert!(spec.out_dir.join("generalize/matrix.txt").is_file());
}

#[test]
fn plan_command_reports_steps_and_rejects_bad_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("m4");
    generate_dataset(&dir, 4, 10, 5).unwrap();
    let spec = spec_for(tmp.path(), vec![dir.clone()]);
    let records = cmd_train(&spec, |_, _, _| {}).unwrap();
    let oracle = FeasibilityConfig::default();
    for id in 0..10 {
        let report = cmd_plan(&instance_file(&dir, id), &records[0].checkpoint, 24, &oracle).unwrap();
        let r = &report.record;
        assert_eq!(r.sequence.len(), r.feasible.len());
        assert_eq!(r.scores.as_ref().unwrap().len(), r.sequence.len());
        if r.success {
            assert!(report.validation.as_ref().unwrap().valid);
        } else {
            // Width 24 covers every order of four parts, so failure means unsolvable.
            assert_eq!(report.validated, 24);
        }
    }
    let missing = cmd_plan(&instance_file(&dir, 0), &tmp.path().join("none.json"), 3, &oracle);
    assert!(matches!(missing, Err(HarnessError::Gnn(_))));
    std::fs::write(tmp.path().join("garbage.json"), "{\"format\": 1}").unwrap();
    assert!(cmd_plan(&instance_file(&dir, 0), &tmp.path().join("garbage.json"), 3, &oracle).is_err());
    assert!(cmd_plan(&instance_file(&dir, 0), &records[0].checkpoint, 0, &oracle).is_err());
}
