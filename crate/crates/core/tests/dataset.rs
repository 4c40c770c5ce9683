use std::collections::HashSet;
use std::io::Write;

use proptest::prelude::*;
use selfcal::dataset::{
    expand, load_fixture, load_mmlu_csv, load_path, parse_mmlu_csv, read_jsonl, split, write_jsonl, write_mmlu_csv,
    DatasetError,
};
use selfcal::engine::Query;

#[test]
fn fixture_spans_several_subjects() {
    let q = load_fixture();
    assert_eq!(q.len(), 50);
    assert!(q.iter().all(|q| q.options.len() == 4 && q.gold < 4));
    // Ten questions per subject, in blocks.
    assert!(q[0].stem.contains("multiplied"));
    assert!(q[10].stem.contains("South America"));
    assert!(q[40].stem.contains("chemical symbol"));
}

#[test]
fn loading_from_disk_names_ids_after_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("astronomy_test.csv");
    std::fs::write(
        &path,
        "\"Which planet, of these, is largest?\",Mars,Jupiter,Venus,Mercury,b\n",
    )
    .unwrap();
    let q = load_mmlu_csv(&path).unwrap();
    assert_eq!(q[0].id, "astronomy_test.csv:1");
    assert_eq!(q[0].stem, "Which planet, of these, is largest?");
    assert_eq!(q[0].gold, 1);
    assert!(matches!(
        load_mmlu_csv(&dir.path().join("missing.csv")),
        Err(DatasetError::Io { .. })
    ));
}

#[test]
fn csv_round_trip_preserves_queries() {
    let q = load_fixture();
    let mut buf = Vec::new();
    write_mmlu_csv(&mut buf, &q).unwrap();
    let back = parse_mmlu_csv(buf.as_slice(), selfcal::dataset::FIXTURE_NAME).unwrap();
    assert_eq!(back, q);
    assert_eq!(String::from_utf8(buf).unwrap(), selfcal::dataset::FIXTURE_CSV);
}

#[test]
fn jsonl_round_trip_preserves_queries() {
    let q = expand(&load_fixture(), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("norm.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    write_jsonl(&mut f, &q).unwrap();
    f.flush().unwrap();
    assert_eq!(load_path(&path).unwrap(), q);
}

#[test]
fn jsonl_rejects_bad_lines_with_their_number() {
    let text = "{\"id\":\"a\",\"stem\":\"s\",\"options\":[\"x\",\"y\"],\"gold\":0}\n{\"id\":\"b\",\"stem\":\"s\",\"options\":[\"x\"],\"gold\":0}\n";
    match read_jsonl(text.as_bytes(), "t.jsonl") {
        Err(DatasetError::Parse { row, .. }) => assert_eq!(row, 2),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        read_jsonl("\n".as_bytes(), "t.jsonl"),
        Err(DatasetError::Empty(_))
    ));
}

fn synthetic_queries(n: usize) -> Vec<Query> {
    (0..n)
        .map(|i| Query {
            id: format!("q{i}"),
            stem: format!("stem {i}"),
            options: vec!["a".into(), "b".into()],
            gold: i % 2,
        })
        .collect()
}

proptest! {
    #[test]
    fn split_is_a_deterministic_partition(n in 2usize..300, f in 0.01f64..0.99, seed in any::<u64>()) {
        let a = split("p", synthetic_queries(n), f, seed).unwrap();
        let b = split("p", synthetic_queries(n), f, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let v: HashSet<usize> = a.validation.iter().copied().collect();
        let t: HashSet<usize> = a.test.iter().copied().collect();
        prop_assert!(v.is_disjoint(&t));
        prop_assert_eq!(v.len() + t.len(), n);
        prop_assert_eq!(a.validation.len() + a.test.len(), n);
        prop_assert!(!a.validation.is_empty() && !a.test.is_empty());
        let small = f.min(1.0 - f);
        let expected_small = ((small * n as f64).round() as usize).clamp(1, n - 1);
        let got_small = if f <= 0.5 { a.validation.len() } else { a.test.len() };
        prop_assert_eq!(got_small, expected_small);
    }

    #[test]
    fn complementary_fractions_swap(n in 2usize..200, f in 0.01f64..0.49, seed in any::<u64>()) {
        let a = split("p", synthetic_queries(n), f, seed).unwrap();
        let b = split("p", synthetic_queries(n), 1.0 - f, seed).unwrap();
        prop_assert_eq!(a.validation, b.test);
        prop_assert_eq!(a.test, b.validation);
    }

    #[test]
    fn csv_round_trip_arbitrary_text(
        rows in prop::collection::vec(("[^\u{0}\u{feff}]{1,40}", prop::collection::vec("[^\u{0}\u{feff}]{0,20}", 4), 0usize..4), 1..20)
    ) {
        let queries: Vec<Query> = rows
            .iter()
            .enumerate()
            .map(|(i, (stem, opts, gold))| Query {
                id: format!("r.csv:{}", i + 1),
                stem: stem.trim().to_string(),
                options: opts.iter().map(|o| o.trim().to_string()).collect(),
                gold: *gold,
            })
            .filter(|q| !q.stem.is_empty())
            .collect();
        prop_assume!(!queries.is_empty());
        let renumbered: Vec<Query> = queries
            .iter()
            .enumerate()
            .map(|(i, q)| Query { id: format!("r.csv:{}", i + 1), ..q.clone() })
            .collect();
        let mut buf = Vec::new();
        write_mmlu_csv(&mut buf, &renumbered).unwrap();
        let back = parse_mmlu_csv(buf.as_slice(), "r.csv").unwrap();
        prop_assert_eq!(back, renumbered);
    }
}
