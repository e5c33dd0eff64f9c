use atrium_core::dataset::{generate_dataset, load_dataset, write_dataset, DatasetConfig, Split};
use atrium_core::phantom::PhantomConfig;

fn small() -> DatasetConfig {
    DatasetConfig {
        phantom: PhantomConfig {
            dims: [32, 32, 32],
            ..PhantomConfig::default()
        },
        train_cases: 3,
        test_cases: 2,
        seed: 7,
    }
}

#[test]
fn splits_ids_and_seeds() {
    let ds = generate_dataset(&small()).unwrap();
    assert_eq!(ds.split(Split::Train).len(), 3);
    assert_eq!(ds.split(Split::Test).len(), 2);
    let ids: Vec<&str> = ds.manifest.cases.iter().map(|c| c.id.as_str()).collect();
    assert_eq!(ids, ["case000", "case001", "case002", "case003", "case004"]);
    let mut seeds: Vec<u64> = ds.manifest.cases.iter().map(|c| c.seed).collect();
    seeds.dedup();
    assert_eq!(seeds.len(), 5);
}

#[test]
fn same_seed_same_dataset_on_disk() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(a.path(), &generate_dataset(&small()).unwrap()).unwrap();
    write_dataset(b.path(), &generate_dataset(&small()).unwrap()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 1 + 5 * 4);
    for n in names {
        assert_eq!(
            std::fs::read(a.path().join(&n)).unwrap(),
            std::fs::read(b.path().join(&n)).unwrap(),
            "{n:?}"
        );
    }
}

#[test]
fn written_dataset_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small()).unwrap();
    let manifest = write_dataset(dir.path(), &ds).unwrap();
    assert_eq!(load_dataset(&manifest).unwrap(), ds);
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn empty_dataset_is_rejected() {
    let cfg = DatasetConfig {
        train_cases: 0,
        test_cases: 0,
        ..small()
    };
    assert!(generate_dataset(&cfg).is_err());
}
