use std::path::Path;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use step_core::kg::{load_kg_with_items, save_kg, KnowledgeGraph, RgcnLayer};
use step_core::rng::{derive_rng, normal_vec, StepRng};
use step_core::{Activation, Tape, Tensor};

fn random_graph(rng: &mut StepRng, n: usize, r: usize) -> KnowledgeGraph {
    let mut g = KnowledgeGraph::new();
    for i in 0..n {
        g.add_entity(&format!("e{i}"));
    }
    for j in 0..r {
        g.add_relation(&format!("r{j}"));
    }
    for _ in 0..rng.random_range(0..=3 * n) {
        let (h, rel, t) = (rng.random_range(0..n), rng.random_range(0..r), rng.random_range(0..n));
        g.add_triple(h, rel, t).unwrap();
    }
    let items: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.3)).collect();
    g.set_items(&items).unwrap();
    g
}

fn rand_tensor(rng: &mut StepRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n, 1.0)).unwrap()
}

fn forward(g: &KnowledgeGraph, h: &Tensor, w0: &Tensor, wr: &[Tensor], act: Activation) -> Tensor {
    let mut tape = Tape::new();
    let layer = RgcnLayer {
        self_weight: tape.constant(w0.clone()),
        relation_weights: wr.iter().map(|w| tape.constant(w.clone())).collect(),
        activation: act,
    };
    let h = tape.constant(h.clone());
    let out = layer.forward(&mut tape, g, h).unwrap();
    tape.value(out).clone()
}

/// Dense per-relation adjacency, row-normalized by in-degree.
fn dense_oracle(g: &KnowledgeGraph, h: &Tensor, w0: &Tensor, wr: &[Tensor]) -> Vec<f64> {
    let (n, d) = (h.rows(), h.cols());
    let mm = |x: &[f64], w: &Tensor| -> Vec<f64> {
        (0..w.cols()).map(|c| (0..d).map(|k| x[k] * w.get2(k, c)).sum()).collect()
    };
    let mut out = Vec::with_capacity(n * w0.cols());
    for node in 0..n {
        let mut acc = mm(h.row(node), w0);
        for (r, w) in wr.iter().enumerate() {
            let mut adj = vec![0.0; n];
            for t in g.triples().iter().filter(|t| t.relation == r && t.tail == node) {
                adj[t.head] = 1.0;
            }
            let deg: f64 = adj.iter().sum();
            if deg == 0.0 {
                continue;
            }
            let agg: Vec<f64> = (0..d).map(|k| (0..n).map(|j| adj[j] * h.get2(j, k)).sum::<f64>() / deg).collect();
            for (a, m) in acc.iter_mut().zip(mm(&agg, w)) {
                *a += m;
            }
        }
        out.extend(acc.into_iter().map(|v| v.max(0.0)));
    }
    out
}

#[test]
fn rgcn_matches_dense_oracle() {
    let mut rng = derive_rng(1, "kg-oracle");
    for _ in 0..30 {
        let n = rng.random_range(1..=12);
        let r = rng.random_range(1..=3);
        let d = rng.random_range(1..=5);
        let g = random_graph(&mut rng, n, r);
        let h = rand_tensor(&mut rng, &[n, d]);
        let w0 = rand_tensor(&mut rng, &[d, d]);
        let wr: Vec<Tensor> = (0..r).map(|_| rand_tensor(&mut rng, &[d, d])).collect();
        let got = forward(&g, &h, &w0, &wr, Activation::Relu);
        for (a, b) in got.data().iter().zip(dense_oracle(&g, &h, &w0, &wr)) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn rgcn_permutation_equivariance_is_exact() {
    let mut rng = derive_rng(2, "kg-perm");
    for _ in 0..100 {
        let n = rng.random_range(1..=20);
        let r = rng.random_range(1..=4);
        let d = rng.random_range(1..=6);
        let g = random_graph(&mut rng, n, r).with_inverse_relations();
        let h = rand_tensor(&mut rng, &[n, d]);
        let w0 = rand_tensor(&mut rng, &[d, d]);
        let wr: Vec<Tensor> = (0..g.num_relations()).map(|_| rand_tensor(&mut rng, &[d, d])).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);

        let pg = g.permute_entities(&perm).unwrap();
        let mut ph = vec![0.0; n * d];
        for old in 0..n {
            ph[perm[old] * d..(perm[old] + 1) * d].copy_from_slice(h.row(old));
        }
        let ph = Tensor::new(vec![n, d], ph).unwrap();

        let base = forward(&g, &h, &w0, &wr, Activation::Relu);
        let permuted = forward(&pg, &ph, &w0, &wr, Activation::Relu);
        for old in 0..n {
            assert_eq!(base.row(old), permuted.row(perm[old]));
        }
    }
}

#[test]
fn tsv_round_trip_preserves_graph() {
    let mut rng = derive_rng(3, "kg-io");
    let g = random_graph(&mut rng, 15, 3);
    let dir = tempfile::tempdir().unwrap();
    let (kg, items) = (dir.path().join("kg.tsv"), dir.path().join("items.txt"));
    save_kg(&g, &kg, &items).unwrap();
    let (back, _) = load_kg_with_items(&kg, &items).unwrap();
    // Isolated entities are not in the TSV, so compare the edge set by name.
    let named = |g: &KnowledgeGraph| {
        let mut t: Vec<(String, String, String)> = g
            .triples()
            .iter()
            .map(|t| {
                (
                    g.entity_name(t.head).to_string(),
                    g.relation_name(t.relation).to_string(),
                    g.entity_name(t.tail).to_string(),
                )
            })
            .collect();
        t.sort();
        t
    };
    assert_eq!(named(&g), named(&back));
    assert_eq!(back.to_tsv(), KnowledgeGraph::parse_tsv(&back.to_tsv(), Path::new("x")).unwrap().0.to_tsv());
}

#[test]
fn malformed_line_is_rejected() {
    let err = KnowledgeGraph::parse_tsv("a\tb\tc\nonly two\tfields\n", Path::new("bad.tsv")).unwrap_err();
    assert!(err.to_string().contains('2'), "{err}");
}

proptest! {
    #[test]
    fn inverse_relations_double_edges(seed in 0u64..500) {
        let mut rng = derive_rng(seed, "kg-inv");
        let g = random_graph(&mut rng, 8, 2);
        let inv = g.with_inverse_relations();
        prop_assert_eq!(inv.num_relations(), 2 * g.num_relations());
        prop_assert_eq!(inv.triples().len(), 2 * g.triples().len());
        for t in g.triples() {
            prop_assert!(inv.neighbors(t.head, t.relation + 2).unwrap().contains(&t.tail));
        }
    }

    #[test]
    fn neighbors_are_sorted_and_unique(seed in 0u64..500) {
        let mut rng = derive_rng(seed, "kg-nb");
        let g = random_graph(&mut rng, 10, 3);
        for r in 0..3 {
            for n in 0..10 {
                let nb = g.neighbors(n, r).unwrap();
                prop_assert!(nb.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
