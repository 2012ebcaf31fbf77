use std::fs;

use proptest::prelude::*;

use resat::datagen::{generate_spurious, load_csv, split, Split};
use resat::diffmodel::Activation;
use resat::harness::{
    compare, emit_plot, render_svg, sweep_k, train, Method, RunRecord, TrainConfig,
};
use resat::{BiasSpec, Error, Execution, GroupedDataset, ModelSpec};

fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn hand_written_csv_parses_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        &dir,
        "three.csv",
        "f0,f1,label,group\n0.5,-1.25,1,0\n 2 , 3e-2 ,0,3\n-0.0,7,1,1\n",
    );
    let data = load_csv(&path).unwrap();
    assert!(data.groups_available);
    assert_eq!(data.len(), 3);
    assert_eq!(data.examples[0].features, vec![0.5, -1.25]);
    assert_eq!(data.examples[1].features, vec![2.0, 0.03]);
    assert_eq!(data.examples[2].features, vec![-0.0, 7.0]);
    assert_eq!(
        data.examples.iter().map(|e| e.label).collect::<Vec<_>>(),
        vec![1, 0, 1]
    );
    assert_eq!(data.group_ids, vec![0, 3, 1]);
    assert_eq!(data.input_dim(), 2);
    assert_eq!(data.num_groups(), 4);
}

#[test]
fn missing_group_column_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(&dir, "nogroup.csv", "f0,f1,label\n1,2,0\n3,4,1\n");
    let data = load_csv(&path).unwrap();
    assert!(!data.groups_available);
    assert_eq!(data.group_ids, vec![0, 0]);
    // saving keeps the column absent
    assert_eq!(data.to_csv_string(), "f0,f1,label\n1.0,2.0,0\n3.0,4.0,1\n");
}

#[test]
fn header_only_file_is_an_empty_dataset_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(&dir, "empty.csv", "f0,f1,label,group\n");
    assert!(matches!(load_csv(&path), Err(Error::EmptyDataset(_))));
}

#[test]
fn malformed_rows_report_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("f0,f1,label,group\n1,2,0,0\n1,x,0,0\n", 3),
        ("f0,f1,label,group\n1,2,0,0\n1,2,0,0\n1,2,-1,0\n", 4),
        ("f0,f1,label,group\n1,2,0\n", 2),
        ("f0,f1,label,group\n1,2,0,0\n1,2,0,g\n", 3),
        ("f0,f1,label,group\n1,NaN,0,0\n", 2),
    ];
    for (i, (text, line)) in cases.iter().enumerate() {
        let path = write(&dir, &format!("bad{i}.csv"), text);
        match load_csv(&path) {
            Err(Error::MalformedRow { row, .. }) => assert_eq!(row, *line, "{text:?}"),
            other => panic!("{text:?}: expected a malformed row, got {other:?}"),
        }
    }
    assert!(matches!(
        load_csv(&dir.path().join("absent.csv")),
        Err(Error::Data(_) | Error::Io { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn csv_round_trip_is_exact(
        rows in proptest::collection::vec(
            (proptest::collection::vec(-1e6f64..1e6, 3), 0usize..4, 0usize..5),
            1..40,
        )
    ) {
        let dir = tempfile::tempdir().unwrap();
        let examples = rows.iter().map(|(f, l, _)| resat::Example::new(f.clone(), *l)).collect();
        let groups = rows.iter().map(|r| r.2).collect();
        let data = GroupedDataset::new(examples, groups, Split::Train).unwrap();
        let path = dir.path().join("d.csv");
        data.save_csv(&path).unwrap();
        let back = load_csv(&path).unwrap();
        prop_assert_eq!(&back.examples, &data.examples);
        prop_assert_eq!(&back.group_ids, &data.group_ids);
        prop_assert_eq!(back.to_csv_string(), fs::read_to_string(&path).unwrap());
    }
}

fn quick_runs() -> (GroupedDataset, GroupedDataset, TrainConfig) {
    let spec = BiasSpec {
        size: 300,
        ..BiasSpec::default()
    };
    let data = generate_spurious(&spec, 2).unwrap();
    let (tr, te) = split(&data, 0.7, 2).unwrap();
    let mut config = TrainConfig::new(
        Method::ReSat,
        ModelSpec::mlp(2, vec![6], 2, Activation::Tanh),
    );
    config.epochs = 2;
    (tr, te, config)
}

#[test]
fn compare_builds_one_row_per_record() {
    let (tr, te, config) = quick_runs();
    let a = train(&config, &tr, &te, 0).unwrap();
    let report = compare(std::slice::from_ref(&a)).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.groups, vec![0, 1, 2, 3, 4]);
    assert!(report.best_flags()[0].iter().all(|&f| f));

    let report = compare(&[a.clone(), a.clone()]).unwrap();
    assert_eq!(report.rows[0], report.rows[1]);
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "method,group_0,group_1,group_2,group_3,group_4,worst_group,overall,best"
    );
    assert_eq!(lines[1], lines[2]);
    assert!(report.to_text().contains(&a.label()));
}

#[test]
fn compare_rejects_runs_on_different_eval_sets() {
    let (tr, te, config) = quick_runs();
    let a = train(&config, &tr, &te, 0).unwrap();
    let b = train(&config, &tr, &tr, 0).unwrap();
    assert!(matches!(
        compare(&[a, b]),
        Err(Error::MismatchedDatasets(..))
    ));
}

#[test]
fn sweep_dedups_and_covers_every_cell() {
    let (tr, te, config) = quick_runs();
    let result = sweep_k(
        &config,
        &tr,
        &te,
        &[8, 2, 4, 2, 8],
        &[0, 1],
        Execution::Parallel,
    )
    .unwrap();
    let ks: Vec<usize> = result.resat_runs.iter().map(|(k, _)| *k).collect();
    assert_eq!(ks, vec![2, 4, 8]);
    assert!(result.resat_runs.iter().all(|(_, runs)| runs.len() == 2));
    assert_eq!(result.erm_runs.len(), 2);
    let labels: Vec<&str> = result
        .report
        .rows
        .iter()
        .map(|r| r.label.as_str())
        .collect();
    assert_eq!(
        labels,
        vec!["erm", "re-sat(K=2)", "re-sat(K=4)", "re-sat(K=8)"]
    );
    for row in &result.report.rows {
        assert!(row.group_accuracy.iter().all(Option::is_some));
        assert!(row.worst_group_accuracy.is_some() && row.overall_accuracy.is_some());
    }
    for (k, runs) in &result.resat_runs {
        for (seed, run) in runs.iter().enumerate() {
            assert_eq!(run.config.affinity.k_conflicting, *k);
            assert_eq!(run.seed, seed as u64);
        }
    }
}

#[test]
fn sweep_at_full_batch_and_invalid_k() {
    let (tr, te, config) = quick_runs();
    let result = sweep_k(&config, &tr, &te, &[32], &[0], Execution::Sequential).unwrap();
    assert_eq!(result.report.rows.len(), 2);
    assert!(matches!(
        sweep_k(&config, &tr, &te, &[4, 33], &[0], Execution::Sequential),
        Err(Error::InvalidK { k: 33, n: 32 })
    ));
    assert!(sweep_k(&config, &tr, &te, &[0], &[0], Execution::Sequential).is_err());
}

#[test]
fn sweep_cells_match_individual_runs() {
    let (tr, te, config) = quick_runs();
    let result = sweep_k(&config, &tr, &te, &[4], &[1], Execution::Parallel).unwrap();
    let mut single = config.clone();
    single.shuffle_seed = config.shuffle_seed + 1;
    let direct = train(&single, &tr, &te, 1).unwrap();
    assert_eq!(
        result.resat_runs[0].1[0].without_timing(),
        direct.without_timing()
    );
}

#[test]
fn plot_has_one_series_per_group_and_run() {
    let (tr, te, config) = quick_runs();
    let resat = train(&config, &tr, &te, 0).unwrap();
    let mut erm_config = config.clone();
    erm_config.method = Method::Erm;
    let erm = train(&erm_config, &tr, &te, 0).unwrap();
    for metric in ["accuracy", "loss", "rank"] {
        let svg = render_svg(&[resat.clone(), erm.clone()], metric).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 10, "{metric}");
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    emit_plot(std::slice::from_ref(&resat), "rank", &p1).unwrap();
    emit_plot(std::slice::from_ref(&resat), "rank", &p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
}

#[test]
fn plot_rejects_unknown_metrics_and_empty_runs() {
    let (tr, te, mut config) = quick_runs();
    let run = train(&config, &tr, &te, 0).unwrap();
    assert!(matches!(
        render_svg(&[run], "wer"),
        Err(Error::UnknownMetric(_))
    ));
    config.epochs = 0;
    let empty = train(&config, &tr, &te, 0).unwrap();
    assert!(render_svg(&[empty], "rank").is_err());
}

#[test]
fn saved_runs_reload_bit_exactly() {
    let (tr, te, mut config) = quick_runs();
    config.method = Method::Jtt;
    config.epochs = 4;
    let run = train(&config, &tr, &te, 3).unwrap();
    assert!(run.jtt_error_set.is_some());
    let dir = tempfile::tempdir().unwrap();
    run.save(&dir.path().join("a")).unwrap();
    let back = RunRecord::load(&dir.path().join("a")).unwrap();
    assert_eq!(back, run);
    back.save(&dir.path().join("b")).unwrap();
    for f in ["run.json", "metrics.jsonl", "summary.csv", "params.bin"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let summary = fs::read_to_string(dir.path().join("a/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    assert!(summary.starts_with("epoch,overall_accuracy,worst_group_accuracy,group_0_accuracy"));
}

#[test]
fn loading_rejects_params_for_another_model() {
    let (tr, te, config) = quick_runs();
    let run = train(&config, &tr, &te, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run.save(dir.path()).unwrap();
    let other = resat::harness::record::encode_params("logreg:2-2:ce", &run.final_params);
    fs::write(dir.path().join("params.bin"), other).unwrap();
    assert!(RunRecord::load(dir.path()).is_err());
}
