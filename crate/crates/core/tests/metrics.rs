mod common;

use step_core::pipeline::{distinct_n, recall_at_k, words};

#[test]
fn metrics_match_loop_oracles() {
    common::metric_oracles(200).assert();
}

#[test]
fn distinct_two_of_abab() {
    assert_eq!(distinct_n(&[words("a b a b")], 2).unwrap(), 2.0 / 3.0);
    assert_eq!(distinct_n(&[words("a")], 2).unwrap(), 0.0);
    assert!(distinct_n(&[words("a b")], 0).is_err());
}

#[test]
fn recall_edge_cases() {
    let ranked = vec![vec![4, 2, 9], vec![1, 0, 3]];
    assert_eq!(recall_at_k(&ranked, &[vec![2, 1], vec![]], 2).unwrap(), 0.5);
    assert_eq!(recall_at_k(&ranked, &[vec![], vec![]], 1).unwrap(), 0.0);
    assert!(recall_at_k(&ranked, &[vec![1]], 1).is_err());
    assert!(recall_at_k(&ranked, &[vec![1], vec![1]], 0).is_err());
}
