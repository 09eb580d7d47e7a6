mod common;

use collapse_lab::data::{load, save, Dataset};
use collapse_lab::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;
use std::fs;

fn sample() -> Dataset {
    common::shifted_dataset(3, 2, 7, 5)
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let ds = sample();
    save(&ds, &path).unwrap();
    assert_eq!(load(&path).unwrap(), ds);
}

#[test]
fn binary_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    let ds = sample();
    save(&ds, &path).unwrap();
    assert_eq!(load(&path).unwrap(), ds);
}

#[test]
fn missing_file_reports_path() {
    let err = load("/nonexistent/nowhere.csv").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/nowhere.csv"));
}

#[test]
fn bad_number_reports_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "x0,x1,y0\n1,2,3\n4,oops,6\n").unwrap();
    match load(&path).unwrap_err() {
        Error::Parse { row, column, .. } => assert_eq!((row, column), (3, 2)),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn ragged_row_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "x0,y0\n1,2\n3\n").unwrap();
    assert!(matches!(load(&path).unwrap_err(), Error::Parse { row: 3, .. }));
}

#[test]
fn empty_and_header_only_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "").unwrap();
    assert!(matches!(load(&path).unwrap_err(), Error::Parse { .. }));
    fs::write(&path, "x0,y0\n").unwrap();
    assert!(matches!(load(&path).unwrap_err(), Error::Parse { .. }));
}

#[test]
fn truncated_binary_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    save(&sample(), &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load(&path).unwrap_err(), Error::Parse { .. }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn csv_round_trip_any_values(
        n in 1usize..6,
        d0 in 1usize..4,
        d2 in 1usize..4,
        values in prop::collection::vec(-1e300f64..1e300, 36),
    ) {
        let take = |r: usize, c: usize, off: usize| DMatrix::from_fn(r, c, |i, j| values[(off + i * c + j) % values.len()]);
        let ds = Dataset::new(take(n, d0, 0), take(n, d2, 17)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        save(&ds, &path).unwrap();
        prop_assert_eq!(load(&path).unwrap(), ds);
    }
}
