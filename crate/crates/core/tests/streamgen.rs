use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use clhpo_core::streamgen::{
    build_hetero_stream, build_split_stream, ceil_count, ingest_csv, split_train_val,
    synth_gaussian, TaskStream,
};
use clhpo_core::Error;
use proptest::prelude::*;

fn csv_file(text: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

#[test]
fn four_row_string_labels() {
    let f = csv_file("x,y,label\n0.5,1,a\n2,3,b\n-1,0.25,a\n4,4,b\n");
    let ds = ingest_csv(f.path(), "label").unwrap();
    assert_eq!((ds.dim, ds.n_classes), (2, 2));
    assert_eq!(ds.class_names, ["a", "b"]);
    let labels: Vec<usize> = ds.examples.iter().map(|e| e.label).collect();
    assert_eq!(labels, [0, 1, 0, 1]);
    assert_eq!(ds.examples[2].features, [-1.0, 0.25]);
}

#[test]
fn ragged_row_names_its_index() {
    let f = csv_file("x,y,label\n1,2,a\n3,4,b\n5,6,7,a\n");
    match ingest_csv(f.path(), "label") {
        Err(Error::Parse(msg)) => assert!(msg.contains("row 3: expected 2 features"), "{msg}"),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn non_numeric_cell_is_named() {
    let f = csv_file("x,y,label\n1,2,a\n3,oops,b\n");
    match ingest_csv(f.path(), "label") {
        Err(Error::Parse(msg)) => {
            assert!(msg.contains("row 2") && msg.contains("'y'"), "{msg}")
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn missing_label_column_and_file() {
    let f = csv_file("x,y\n1,2\n");
    assert!(matches!(ingest_csv(f.path(), "label"), Err(Error::Parse(_))));
    assert!(matches!(
        ingest_csv("/nonexistent/data.csv", "label"),
        Err(Error::Io { .. })
    ));
}

#[test]
fn iris_style_file_counts_by_brute_force() {
    let species = ["setosa", "versicolor", "virginica"];
    let mut text = String::from("sl,sw,pl,pw,species\n");
    for i in 0..150 {
        let s = species[(i * 7) % 3];
        text.push_str(&format!("{},{},{},{},{s}\n", i as f64 * 0.1, 3.0, 1.5, 0.2));
    }
    let ds = ingest_csv(csv_file(&text).path(), "species").unwrap();
    let distinct: BTreeSet<&str> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(ds.examples.len(), 150);
    assert_eq!(ds.dim, 4);
    assert_eq!(ds.n_classes, distinct.len());
}

#[test]
fn integer_labels_keep_numeric_order() {
    let f = csv_file("label,f\n10,0\n2,1\n10,2\n");
    let ds = ingest_csv(f.path(), "label").unwrap();
    assert_eq!(ds.class_names, ["2", "10"]);
    let labels: Vec<usize> = ds.examples.iter().map(|e| e.label).collect();
    assert_eq!(labels, [1, 0, 1]);
}

#[test]
fn well_separated_blobs_are_nearest_centroid_separable() {
    let ds = synth_gaussian(2, 2, 50, 10.0, 1).unwrap();
    assert_eq!(ds.examples.len(), 100);
    let mut sums: BTreeMap<usize, (Vec<f64>, f64)> = BTreeMap::new();
    for e in &ds.examples {
        let s = sums.entry(e.label).or_insert((vec![0.0; 2], 0.0));
        s.0.iter_mut().zip(&e.features).for_each(|(a, b)| *a += b);
        s.1 += 1.0;
    }
    let centroids: Vec<Vec<f64>> = sums
        .values()
        .map(|(s, n)| s.iter().map(|v| v / n).collect())
        .collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    for e in &ds.examples {
        let pred = (0..2)
            .min_by(|&i, &j| dist(&e.features, &centroids[i]).total_cmp(&dist(&e.features, &centroids[j])))
            .unwrap();
        assert_eq!(pred, e.label);
    }
}

#[test]
fn synth_is_deterministic_and_validates() {
    let a = synth_gaussian(10, 8, 20, 6.0, 7).unwrap();
    let b = synth_gaussian(10, 8, 20, 6.0, 7).unwrap();
    assert_eq!(a, b);
    assert!(matches!(synth_gaussian(1, 2, 5, 1.0, 0), Err(Error::Argument(_))));
    assert!(matches!(synth_gaussian(2, 0, 5, 1.0, 0), Err(Error::Argument(_))));
    assert!(matches!(synth_gaussian(2, 2, 5, 0.0, 0), Err(Error::Argument(_))));
}

#[test]
fn synth_centres_respect_separation() {
    let ds = synth_gaussian(6, 3, 400, 5.0, 3).unwrap();
    let mut means = vec![vec![0.0; 3]; 6];
    for e in &ds.examples {
        means[e.label].iter_mut().zip(&e.features).for_each(|(m, x)| *m += x / 400.0);
    }
    // Sample means are within ~0.15 of the centres at n = 400.
    for i in 0..6 {
        for j in i + 1..6 {
            let d: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(d > 5.0 - 0.5, "classes {i},{j} at distance {d}");
        }
    }
}

#[test]
fn split_stream_task_shapes() {
    let ds = synth_gaussian(10, 2, 10, 3.0, 0).unwrap();
    let s = build_split_stream(&ds, 5, 0).unwrap();
    assert_eq!(s.len(), 5);
    assert!(s.tasks.iter().all(|t| t.classes.len() == 2));

    let ds = synth_gaussian(100, 2, 5, 1.0, 0).unwrap();
    let s = build_split_stream(&ds, 10, 0).unwrap();
    assert!(s.tasks.iter().all(|t| t.classes.len() == 10));

    match build_split_stream(&synth_gaussian(10, 2, 10, 3.0, 0).unwrap(), 3, 0) {
        Err(Error::Argument(msg)) => assert!(msg.contains("build_hetero_stream"), "{msg}"),
        other => panic!("expected argument error, got {other:?}"),
    }
}

#[test]
fn hetero_stream_with_twenty_tasks() {
    let counts = [9, 2, 7, 3, 4, 9, 8, 3, 3, 7, 4, 4, 5, 9, 4, 5, 2, 8, 2, 2];
    let ds = synth_gaussian(100, 2, 5, 1.0, 0).unwrap();
    let s = build_hetero_stream(&ds, &counts, 4).unwrap();
    assert_eq!(s.len(), 20);
    let sizes: Vec<usize> = s.tasks.iter().map(|t| t.classes.len()).collect();
    assert_eq!(sizes, counts);
    assert_eq!(s.class_universe, (0..100).collect::<Vec<_>>());
}

#[test]
fn hetero_edge_cases() {
    let two = synth_gaussian(2, 2, 10, 3.0, 0).unwrap();
    let s = build_hetero_stream(&two, &[2], 0).unwrap();
    let t = &s.tasks[0];
    assert_eq!(t.classes, [0, 1]);
    assert_eq!(t.train.len() + t.test.len(), two.examples.len());

    let ten = synth_gaussian(10, 2, 10, 3.0, 0).unwrap();
    assert!(matches!(build_hetero_stream(&ten, &[5, 6], 0), Err(Error::Argument(_))));
    assert!(matches!(build_hetero_stream(&ten, &[3, 0], 0), Err(Error::Argument(_))));
    let partial = build_hetero_stream(&ten, &[3, 2], 0).unwrap();
    assert_eq!(partial.class_universe.len(), 5);
}

#[test]
fn val_split_counts() {
    let ds = synth_gaussian(2, 2, 125, 3.0, 0).unwrap();
    // 125 per class, 20% test leaves 100 per class for train+val.
    let s = build_split_stream(&ds, 1, 0).unwrap();
    let t = split_train_val(&s.tasks[0], 0.1, 0).unwrap();
    for c in 0..2 {
        assert_eq!(t.val.iter().filter(|e| e.label == c).count(), 10);
        assert_eq!(t.train.iter().filter(|e| e.label == c).count(), 90);
    }
    assert_eq!(t.val.len(), 20);
    assert_eq!(t, split_train_val(&s.tasks[0], 0.1, 0).unwrap());
}

#[test]
fn val_split_of_two_examples() {
    let ds = synth_gaussian(2, 2, 3, 3.0, 0).unwrap();
    // 3 per class, ceil(0.6) = 1 test, 2 left.
    let s = build_split_stream(&ds, 1, 0).unwrap();
    let t = split_train_val(&s.tasks[0], 0.5, 0).unwrap();
    for c in 0..2 {
        assert_eq!(t.val.iter().filter(|e| e.label == c).count(), 1);
        assert_eq!(t.train.iter().filter(|e| e.label == c).count(), 1);
    }
}

#[test]
fn val_split_rejects_singleton_class() {
    let ds = synth_gaussian(2, 2, 2, 3.0, 0).unwrap();
    let s = build_split_stream(&ds, 1, 0).unwrap();
    match split_train_val(&s.tasks[0], 0.1, 0) {
        Err(Error::Argument(msg)) => assert!(msg.contains("class"), "{msg}"),
        other => panic!("expected argument error, got {other:?}"),
    }
    assert!(split_train_val(&s.tasks[0], 1.0, 0).is_err());
}

#[test]
fn ceil_count_ignores_representation_error() {
    assert_eq!(ceil_count(0.1, 30), 3);
    assert_eq!(ceil_count(0.1, 31), 4);
    assert_eq!(ceil_count(0.2, 50), 10);
    assert_eq!(ceil_count(0.5, 1), 1);
}

fn ids(stream: &TaskStream) -> Vec<usize> {
    let mut v: Vec<usize> = stream
        .tasks
        .iter()
        .flat_map(|t| t.train.iter().chain(&t.val).chain(&t.test).map(|e| e.id))
        .collect();
    v.sort_unstable();
    v
}

#[test]
fn disjoint_over_one_hundred_seeds() {
    let ds = synth_gaussian(12, 2, 6, 2.0, 0).unwrap();
    for seed in 0..100 {
        for stream in [
            build_split_stream(&ds, 4, seed).unwrap(),
            build_hetero_stream(&ds, &[5, 1, 6], seed).unwrap(),
        ] {
            for (i, a) in stream.tasks.iter().enumerate() {
                for b in &stream.tasks[i + 1..] {
                    let sa: BTreeSet<_> = a.classes.iter().collect();
                    assert!(b.classes.iter().all(|c| !sa.contains(c)), "seed {seed}");
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conservation_and_balance(
        n_tasks in 1usize..5,
        per_task in 1usize..4,
        n_per_class in 3usize..25,
        val_fraction in 0.05f64..0.6,
        seed in any::<u64>(),
    ) {
        let n_classes = (n_tasks * per_task).max(2);
        let n_tasks = if n_classes % n_tasks == 0 { n_tasks } else { 1 };
        let ds = synth_gaussian(n_classes, 3, n_per_class, 2.0, seed).unwrap();
        let raw = build_split_stream(&ds, n_tasks, seed).unwrap();
        let stream = raw.with_val_split(val_fraction, seed).unwrap();
        stream.validate().unwrap();

        let expected: Vec<usize> = (0..ds.examples.len()).collect();
        prop_assert_eq!(ids(&stream), expected);

        for (before, after) in raw.tasks.iter().zip(&stream.tasks) {
            for &c in &after.classes {
                let n_c = before.train.iter().filter(|e| e.label == c).count();
                let v = after.val.iter().filter(|e| e.label == c).count();
                prop_assert_eq!(v, ceil_count(val_fraction, n_c));
            }
            prop_assert_eq!(&before.test, &after.test);
        }

        let again = build_split_stream(&ds, n_tasks, seed).unwrap().with_val_split(val_fraction, seed).unwrap();
        prop_assert_eq!(again, stream);
    }
}
