use std::io::Write;

use nalgebra::DMatrix;
use whitenet::dataset::*;
use whitenet::Error;

fn spec(num_classes: usize, n_max: usize, gamma: f64) -> ImbalanceSpec {
    ImbalanceSpec {
        num_classes,
        n_max,
        gamma,
        feature_dim: 8,
        class_distance: 3.0,
        test_per_class: 20,
        seed: 42,
    }
}

fn write_file(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.path().join(name);
    std::fs::File::create(&path)
        .unwrap()
        .write_all(text.as_bytes())
        .unwrap();
    path
}

#[test]
fn balanced_limit_gives_n_max_everywhere() {
    let data = generate(&spec(6, 37, 1.0)).unwrap();
    assert_eq!(data.train.class_counts(), vec![37; 6]);
    assert_eq!(data.test.class_counts(), vec![20; 6]);
}

#[test]
fn decay_profile_matches_formula() {
    let s = spec(10, 500, 100.0);
    let counts = s.class_counts();
    assert_eq!(counts[9], 5);
    assert_eq!(counts[0], 500);
    // Same profile written as a product of per-step decay factors.
    let step = 100f64.powf(-1.0 / 9.0);
    let mut value = 500.0f64;
    for &c in &counts {
        assert_eq!(c, value.round() as usize);
        value *= step;
    }
    assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(generate(&s).unwrap().train.class_counts(), counts);
}

#[test]
fn counts_never_drop_below_one() {
    let counts = spec(5, 3, 1000.0).class_counts();
    assert!(counts.iter().all(|&c| c >= 1));
    assert_eq!(*counts.last().unwrap(), 1);
}

#[test]
fn imbalance_ratio_within_rounding() {
    let counts = spec(10, 5000, 100.0).class_counts();
    let ratio = counts[0] as f64 / counts[9] as f64;
    assert!((ratio - 100.0).abs() < 1e-9);
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = generate(&spec(4, 50, 10.0)).unwrap();
    let b = generate(&spec(4, 50, 10.0)).unwrap();
    assert_eq!(a, b);
    let mut other = spec(4, 50, 10.0);
    other.seed = 43;
    assert_ne!(a.train.features, generate(&other).unwrap().train.features);
}

#[test]
fn class_means_are_separated_by_the_configured_distance() {
    let mut s = spec(3, 4000, 1.0);
    s.class_distance = 4.0;
    let data = generate(&s).unwrap();
    let mean_of = |k: usize| {
        let idx: Vec<usize> = (0..data.train.len()).filter(|&i| data.train.labels[i] == k).collect();
        data.train.gather(&idx).0.column_mean()
    };
    let (m0, m1) = (mean_of(0), mean_of(1));
    // Sample-mean error per coordinate ~ 1/√4000.
    assert!(((m0 - m1).norm() - 4.0).abs() < 0.15);
}

#[test]
fn invalid_specs_rejected() {
    for bad in [
        spec(1, 10, 2.0),
        spec(3, 0, 2.0),
        spec(3, 10, 0.5),
        spec(3, 10, f64::NAN),
    ] {
        assert!(matches!(generate(&bad), Err(Error::Config(_))));
    }
}

#[test]
fn tabular_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let features = DMatrix::from_column_slice(2, 3, &[0.1, -2.5, 1e-17, 3.0, 1.0 / 3.0, 7.25]);
    let ds = Dataset::new(features, vec![1, 0, 2], 3).unwrap();
    let path = dir.path().join("rt.csv");
    write_tabular(&ds, &path).unwrap();
    assert_eq!(load_tabular(&path, None).unwrap(), ds);
}

#[test]
fn tabular_infers_dimensions_and_flags_missing_classes() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "a.csv", "# comment\n0, 1.0, 2.0\n3, 0.5, 0.25\n0, -1, 4\n");
    let ds = load_tabular(&path, None).unwrap();
    assert_eq!(ds.num_classes, 4);
    assert_eq!(ds.feature_dim(), 2);
    assert_eq!(ds.class_counts(), vec![2, 0, 0, 1]);
    assert_eq!(ds.missing_classes(), vec![1, 2]);
    assert_eq!(ds.features[(1, 1)], 0.25);
}

fn parse_line(result: whitenet::Result<Dataset>) -> usize {
    match result {
        Err(Error::Parse { line, .. }) => line,
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn tabular_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let ragged = write_file(&dir, "r.csv", "0,1,2\n1,3\n");
    assert_eq!(parse_line(load_tabular(&ragged, None)), 2);
    let text = write_file(&dir, "t.csv", "0,1,2\n1,3,4\n1,x,4\n");
    assert_eq!(parse_line(load_tabular(&text, None)), 3);
    let label = write_file(&dir, "l.csv", "0,1\n5,2\n");
    assert_eq!(parse_line(load_tabular(&label, Some(3))), 2);
    let neg = write_file(&dir, "n.csv", "-1,1\n");
    assert_eq!(parse_line(load_tabular(&neg, None)), 1);
}

#[test]
fn empty_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write_file(&dir, "e.csv", "");
    assert!(matches!(load_tabular(&empty, None), Err(Error::Parse { .. })));
    assert!(matches!(
        load_tabular(dir.path().join("absent.csv"), None),
        Err(Error::Io { .. })
    ));
}

#[test]
fn test_split_is_balanced_and_inventory_sorted() {
    let data = generate(&spec(5, 200, 50.0)).unwrap();
    assert_eq!(data.test.class_counts(), vec![20; 5]);
    let inv = data.train.inventory().unwrap();
    assert_eq!(inv.class_ids, vec![0, 1, 2, 3, 4]);
    assert_eq!(inv.counts, data.train.class_counts());
}
