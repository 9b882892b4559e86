use loda_core::stream::{export_csv, generate, ingest_csv, StreamConfig};
use loda_core::LodaError;

fn small() -> StreamConfig {
    StreamConfig {
        tasks: 3,
        classes_per_task: 2,
        train_per_class: 5,
        test_per_class: 3,
        seed: 4,
        ..StreamConfig::default()
    }
}

fn write(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stream.csv");
    std::fs::write(&path, text).unwrap();
    (dir, path)
}

fn parse_error(text: &str) -> (usize, String) {
    let (_dir, path) = write(text);
    match ingest_csv(&path) {
        Err(LodaError::Parse { row, message, .. }) => (row, message),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn export_then_ingest_round_trips() {
    let tasks = generate(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    export_csv(&tasks, &path).unwrap();
    let back = ingest_csv(&path).unwrap();
    assert_eq!(back, tasks);
}

#[test]
fn empty_file_is_an_empty_stream() {
    let (_dir, path) = write("");
    assert!(ingest_csv(&path).unwrap().is_empty());
}

#[test]
fn task_ids_are_renumbered_in_order() {
    let (_dir, path) = write("task_id,class_id,split,f0\n7,1,train,0.5\n3,0,train,1.5\n3,0,test,2\n");
    let tasks = ingest_csv(&path).unwrap();
    assert_eq!(tasks.len(), 2);
    assert_eq!((tasks[0].task, tasks[0].classes.clone()), (0, vec![0]));
    assert_eq!((tasks[1].task, tasks[1].classes.clone()), (1, vec![1]));
    assert_eq!(tasks[0].test.nrows(), 1);
}

#[test]
fn overlapping_class_is_rejected() {
    let (row, message) = parse_error("task_id,class_id,split,f0\n0,5,train,1\n1,5,train,2\n");
    assert_eq!(row, 3);
    assert!(message.contains("class 5"), "{message}");
}

#[test]
fn ragged_row_is_rejected_with_its_row() {
    let (row, message) = parse_error("task_id,class_id,split,f0,f1\n0,0,train,1,2\n0,0,train,1\n");
    assert_eq!(row, 3);
    assert!(message.contains("expected 5 fields"), "{message}");
}

#[test]
fn unknown_split_is_rejected() {
    let (row, message) = parse_error("task_id,class_id,split,f0\n0,0,validation,1\n");
    assert_eq!(row, 2);
    assert!(message.contains("validation"), "{message}");
}

#[test]
fn bad_numbers_are_rejected() {
    assert_eq!(parse_error("task_id,class_id,split,f0\nx,0,train,1\n").0, 2);
    assert_eq!(parse_error("task_id,class_id,split,f0\n0,0,train,abc\n").0, 2);
    assert_eq!(parse_error("task_id,class_id,split,f0\n0,0,train,NaN\n").0, 2);
    assert_eq!(parse_error("task_id,class_id,split\n").0, 1);
}

#[test]
fn missing_file_is_an_io_error() {
    let err = ingest_csv(std::path::Path::new("/nonexistent/stream.csv")).unwrap_err();
    assert!(matches!(err, LodaError::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/stream.csv"));
}

#[test]
fn invalid_stream_configs_are_rejected() {
    for cfg in [
        StreamConfig { kappa: 1.5, ..small() },
        StreamConfig { tasks: 0, ..small() },
        StreamConfig { shared_dim: 30, private_dim: 4, ..small() },
    ] {
        assert!(generate(&cfg).is_err());
    }
}
