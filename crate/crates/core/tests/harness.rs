use std::collections::BTreeMap;

use ssml::harness::{read_rows_csv, run_loso, write_rows_csv, ExperimentConfig, ExperimentReport, Method, Row};

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for o in [
        "synth.n_subjects=4",
        "synth.channels=4",
        "synth.time_len=16",
        "synth.samples_per_subject=30",
        "model.stnn_spatial=4",
        "model.stnn_temporal=8",
        "meta.max_epochs=2",
        "adapt.outer_epochs=3",
        "experiment.shots=0,1,3",
        "experiment.seeds=0,1",
        "experiment.eval_fraction=0.3",
    ] {
        cfg.set_override(o).unwrap();
    }
    cfg
}

#[test]
fn grid_has_one_row_per_method_shot_target_seed() {
    let cfg = tiny();
    let report = run_loso(&cfg).unwrap();
    let cells = 4 * 2;
    assert_eq!(report.rows.len(), cells * (1 + 2 * cfg.shots.len()));
    assert!(report.rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
    let mut keys: Vec<(Method, usize, String, u64)> =
        report.rows.iter().map(|r| (r.method, r.shot, r.target.clone(), r.seed)).collect();
    let sorted = {
        let mut k = keys.clone();
        k.sort_by_key(|(m, s, t, seed)| (*m, *s, t[1..].parse::<u32>().unwrap(), *seed));
        k
    };
    assert_eq!(keys, sorted);
    keys.dedup();
    assert_eq!(keys.len(), report.rows.len());

    // MAML at zero shots is the pre-trained model, scored on the same split.
    let wometa = report.cell_map(Method::WoMeta, 0);
    assert_eq!(report.cell_map(Method::Maml, 0), wometa);
}

#[test]
fn methods_share_the_start_model_and_split() {
    let report = run_loso(&tiny()).unwrap();
    let mut by_cell: BTreeMap<(String, u64), Vec<_>> = BTreeMap::new();
    for t in &report.traces {
        by_cell.entry((t.target.clone(), t.seed)).or_default().push(t);
    }
    assert_eq!(by_cell.len(), 8);
    for traces in by_cell.values() {
        assert!(traces.iter().all(|t| t.start_checksum == traces[0].start_checksum));
        assert!(traces.iter().all(|t| t.eval_checksum == traces[0].eval_checksum));
        for a in traces.iter() {
            for b in traces.iter() {
                if a.shot == b.shot {
                    assert_eq!(a.split_checksum, b.split_checksum);
                }
            }
        }
    }
    // Different seeds start from different models.
    let starts: std::collections::BTreeSet<u64> = report.traces.iter().map(|t| t.start_checksum).collect();
    assert_eq!(starts.len(), 8);
}

#[test]
fn thread_count_does_not_change_results() {
    let mut one = tiny();
    one.threads = Some(1);
    let mut three = tiny();
    three.threads = Some(3);
    let (a, b) = (run_loso(&one).unwrap(), run_loso(&three).unwrap());
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.traces.len(), b.traces.len());
}

#[test]
fn rows_csv_round_trip_and_tables() {
    let rows = vec![
        Row { method: Method::WoMeta, shot: 0, target: "s01".into(), seed: 0, accuracy: 0.5 },
        Row { method: Method::Maml, shot: 5, target: "s01".into(), seed: 0, accuracy: 0.625 },
        Row { method: Method::Ssml, shot: 5, target: "s01".into(), seed: 0, accuracy: 0.75 },
    ];
    let report = ExperimentReport::from_rows(rows.clone());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.csv");
    write_rows_csv(&path, &report).unwrap();
    assert_eq!(read_rows_csv(&path).unwrap(), rows);

    let table = report.improvement_table().unwrap();
    let ssml = table.iter().find(|i| i.method == Method::Ssml && i.shot == 5).unwrap();
    assert!((ssml.points - 25.0).abs() < 1e-9);
    let no_baseline = ExperimentReport::from_rows(rows[1..].to_vec());
    assert!(no_baseline.improvement_table().is_err());
    // One target is too few pairs for the signed-rank test.
    assert!(report.paired_tests().iter().all(|t| t.result.is_err()));
}

#[test]
fn bad_target_is_reported() {
    let mut cfg = tiny();
    cfg.targets = Some(vec![9]);
    assert!(run_loso(&cfg).is_err());
}
