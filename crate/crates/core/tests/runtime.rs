use std::io::{Seek, SeekFrom, Write};

use mrri::runtime::{execute, plan, read_dataset, read_header, write_dataset, ExecOptions, HEADER_LEN};
use mrri::simulator::{simulate_dataset, SimConfig};
use mrri::{
    build_partition, recursive_integrate, sequential_integrate, DataSource, Dataset, Error, Location, Method,
    NodePath, PartitionStrategy, SpatialDomain,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn small_sim1() -> (SimConfig, Dataset) {
    let mut c = SimConfig::preset("sim1-desk").unwrap();
    c.n = 300;
    let d = simulate_dataset(&c, 2).unwrap();
    (c, d)
}

#[test]
fn recursive_plan_evaluates_more_than_sequential() {
    let domain = SpatialDomain::grid(20, 20).unwrap();
    let tree = build_partition(&domain, &[2, 2, 4], PartitionStrategy::CoordinateSplit, 25).unwrap();
    let r = plan(&tree, Method::Recursive, 4).unwrap();
    let s = plan(&tree, Method::Sequential, 4).unwrap();
    assert_eq!(r.stages[0].kind, mrri::Stage::LeafFit);
    assert_eq!(s.stages[0].kind, mrri::Stage::LeafFit);
    // one evaluation per leaf and resolution against one per leaf
    assert_eq!(r.score_evaluations(), 16 * 3);
    assert_eq!(s.score_evaluations(), 16);
    assert!(r.score_evaluations() > s.score_evaluations());
}

#[test]
fn single_level_plan() {
    let domain = SpatialDomain::grid(10, 10).unwrap();
    let tree = build_partition(&domain, &[4], PartitionStrategy::CoordinateSplit, 25).unwrap();
    let p = plan(&tree, Method::Recursive, 4).unwrap();
    assert_eq!(p.stages.len(), 2);
    assert_eq!(p.stages[0].tasks.len(), 4);
    assert_eq!(p.reductions(), 1);
}

#[test]
fn provenance_matches_plan() {
    let (c, d) = small_sim1();
    let tree = c.build_partition(&d.domain).unwrap();
    let opts = c.integrate_options();
    for (method, est) in [
        (Method::Recursive, recursive_integrate(&tree, &d, &c.spec, &opts).unwrap()),
        (Method::Sequential, sequential_integrate(&tree, &d, &c.spec, &opts).unwrap()),
    ] {
        let p = plan(&tree, method, 1).unwrap();
        assert_eq!(est.method, method);
        assert_eq!(est.provenance.leaf_fits, p.leaf_fits());
        assert_eq!(est.provenance.score_evaluations, p.score_evaluations());
        assert_eq!(est.provenance.projections, p.projections());
    }
}

#[test]
fn worker_count_does_not_change_output() {
    let (c, d) = small_sim1();
    let tree = c.build_partition(&d.domain).unwrap();
    for method in [Method::Recursive, Method::Sequential] {
        let one = execute(&plan(&tree, method, 1).unwrap(), &tree, &d, &c.spec, &ExecOptions::default()).unwrap();
        let many = execute(&plan(&tree, method, 8).unwrap(), &tree, &d, &c.spec, &ExecOptions::default()).unwrap();
        assert_eq!(one.theta.to_vec(), many.theta.to_vec());
        assert_eq!(one.j, many.j);
    }
}

#[test]
fn injected_failure_names_the_node() {
    let (c, d) = small_sim1();
    let tree = c.build_partition(&d.domain).unwrap();
    let bad = NodePath::from_indices(&[2, 1]);
    let opts = ExecOptions {
        inject_failure: Some(bad.clone()),
        ..ExecOptions::default()
    };
    let err = execute(&plan(&tree, Method::Sequential, 2).unwrap(), &tree, &d, &c.spec, &opts).unwrap_err();
    match &err {
        Error::AtNode { path, .. } => assert_eq!(path, &bad),
        other => panic!("unexpected error {other}"),
    }
    assert!(err.to_string().contains(&bad.to_string()));
}

#[test]
fn spilled_blocks_are_readable() {
    let (c, d) = small_sim1();
    let tree = c.build_partition(&d.domain).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = ExecOptions {
        spill_dir: Some(dir.path().to_path_buf()),
        ..ExecOptions::default()
    };
    execute(&plan(&tree, Method::Sequential, 1).unwrap(), &tree, &d, &c.spec, &opts).unwrap();
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert!(!files.is_empty());
    for f in files {
        let h = read_header(&f).unwrap();
        assert_eq!(h.n as usize, c.n);
    }
}

fn dataset(n: usize, locs: Vec<Location>, q: usize, vals: &[f64]) -> Dataset {
    let s = locs.len();
    let y = DMatrix::from_fn(n, s, |i, j| vals[(i * s + j) % vals.len()] + i as f64);
    let x = DMatrix::from_fn(n, q, |i, k| if k == 0 { 1.0 } else { vals[(i + k) % vals.len()] });
    Dataset::new(y, x, SpatialDomain::new(locs).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn container_round_trip_is_bit_exact(
        n in 1usize..20,
        s in 1usize..12,
        q in 1usize..4,
        roi in any::<bool>(),
        vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..50),
        pick in prop::collection::vec(any::<prop::sample::Index>(), 1..6),
    ) {
        let locs: Vec<Location> = (0..s)
            .map(|j| {
                let c = vec![j as f64 * 0.5, (j % 3) as f64];
                if roi { Location::with_roi(c, 1 + (j >= s / 2) as u32) } else { Location::new(c) }
            })
            .collect();
        let d = dataset(n, locs, q, &vals);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(&path, &d).unwrap();
        let f = read_dataset(&path).unwrap();
        let back = f.load().unwrap();
        prop_assert_eq!(back.y.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        d.y.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(&back.x, &d.x);
        prop_assert_eq!(back.domain.locations(), d.domain.locations());
        let cols: Vec<usize> = pick.iter().map(|i| i.index(s)).collect();
        let block_file = f.block(&NodePath::root(), &cols).unwrap();
        let block_mem = d.block(&NodePath::root(), &cols).unwrap();
        prop_assert_eq!(block_file.y(), block_mem.y());
        prop_assert_eq!(f.read_columns(&cols).unwrap(), d.y.select_columns(cols.iter()));
    }
}

fn written() -> (tempfile::TempDir, std::path::PathBuf) {
    let (_, d) = small_sim1();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    write_dataset(&path, &d).unwrap();
    (dir, path)
}

#[test]
fn corrupted_version_rejected() {
    let (_dir, path) = written();
    let mut f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
    f.seek(SeekFrom::Start(8)).unwrap();
    f.write_all(&7u32.to_le_bytes()).unwrap();
    drop(f);
    let err = read_dataset(&path).unwrap_err();
    assert!(matches!(err, Error::Format(ref m) if m.contains("version")), "{err}");
}

#[test]
fn corrupted_magic_rejected() {
    let (_dir, path) = written();
    let mut f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
    f.write_all(b"XXXX").unwrap();
    drop(f);
    assert!(matches!(read_dataset(&path), Err(Error::Format(_))));
}

#[test]
fn truncated_payload_rejected() {
    let (_dir, path) = written();
    let len = std::fs::metadata(&path).unwrap().len();
    let f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
    f.set_len(len - 8).unwrap();
    drop(f);
    let err = read_dataset(&path).unwrap_err();
    assert!(err.to_string().contains("truncated"), "{err}");
    assert!(std::fs::metadata(&path).unwrap().len() > HEADER_LEN);
}
