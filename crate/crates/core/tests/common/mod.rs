//! Criterion checks shared by the acceptance target and the per-module
//! integration tests. Every check recomputes its expected values with plain
//! loops instead of calling back into the code under test.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use step_core::dialogue::SynthConfig;
use step_core::kg::{KnowledgeGraph, RgcnLayer};
use step_core::numerics::NORM_EPS;
use step_core::objectives::{
    curriculum_loss, mine_batch_hard, pairwise_similarity, triplet_loss, AblationFlags, CurriculumSchedule, TaskLosses,
};
use step_core::pipeline::{
    distinct_n, recall_at_k, run_ablation_suite, run_grad_check_suite, train_and_evaluate, AblationRow, Dataset, Model,
    RunResult, TrainConfig,
};
use step_core::prompt::assemble_rec_prompt;
use step_core::rng::{derive_rng, normal_vec, StepRng};
use step_core::{Activation, Tape, Tensor};

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }

    pub fn assert(&self) {
        assert!(self.passed, "{}", self.detail);
    }
}

pub fn rand_tensor(rng: &mut StepRng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n, std)).unwrap()
}

fn unit_rows(rng: &mut StepRng, rows: usize, d: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v = normal_vec(rng, d, 1.0);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Hardest admissible negative per row with explicit loops.
fn brute_hardest(s: &[Vec<f64>], labels: &[usize], mask: bool) -> Vec<Option<usize>> {
    let b = s.len();
    (0..b)
        .map(|i| {
            let mut best: Option<usize> = None;
            for j in 0..b {
                if j == i || (mask && labels[i] == labels[j]) {
                    continue;
                }
                match best {
                    Some(bj) if s[i][j] <= s[i][bj] => {}
                    _ => best = Some(j),
                }
            }
            best
        })
        .collect()
}

/// Gradient integrity of every differentiable component.
pub fn grad_check(seeds: &[u64]) -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut failed = Vec::new();
    let mut count = 0;
    for &seed in seeds {
        for entry in run_grad_check_suite(seed).unwrap() {
            count += 1;
            if entry.report.max_rel_err > worst.0 {
                worst = (entry.report.max_rel_err, entry.name);
            }
            if !entry.report.passed() {
                failed.push(format!("{}@{seed}", entry.name));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        failed.is_empty() && secs < 60.0,
        format!(
            "{count} checks, max rel err {:.2e} ({}), {secs:.1}s, failures {failed:?}",
            worst.0, worst.1
        ),
    )
}

/// Batch-hard and triplet mining against O(B^2 K) loops.
pub fn mining_oracle(batches: usize) -> Outcome {
    let start = Instant::now();
    let mut rng = derive_rng(20, "mining-oracle");
    for n in 0..batches {
        let b = rng.random_range(2..=8);
        let k = rng.random_range(1..=6);
        let d = rng.random_range(2..=6);
        let tau = [0.07, 0.2, 1.0][n % 3];
        let mask = n % 4 != 0;
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..b.max(3) / 2 + 1)).collect();
        let q = unit_rows(&mut rng, b * k, d);
        let t = unit_rows(&mut rng, b, d);

        let mut tape = Tape::new();
        let queries: Vec<_> = (0..b)
            .map(|i| tape.constant(Tensor::from_rows(&q[i * k..(i + 1) * k]).unwrap()))
            .collect();
        let text = tape.constant(Tensor::from_rows(&t).unwrap());
        let tables = pairwise_similarity(&mut tape, &queries, text, tau).unwrap();
        let mined = mine_batch_hard(&tape, &tables, &labels, mask).unwrap();

        let inv = 1.0 / tau;
        let mut q2t = vec![vec![f64::NEG_INFINITY; b]; b];
        let mut t2q = vec![vec![f64::NEG_INFINITY; b]; b];
        for i in 0..b {
            for j in 0..b {
                for s in 0..k {
                    q2t[i][j] = q2t[i][j].max(dot(&q[i * k + s], &t[j]) * inv);
                    t2q[i][j] = t2q[i][j].max(dot(&t[i], &q[j * k + s]) * inv);
                }
            }
        }
        for (dir, oracle, got) in [("q2t", &q2t, &mined.q2t), ("t2q", &t2q, &mined.t2q)] {
            let hardest = brute_hardest(oracle, &labels, mask);
            let pos: Vec<f64> = (0..b).map(|i| oracle[i][i]).collect();
            let vals: Vec<f64> = hardest
                .iter()
                .enumerate()
                .map(|(i, h)| h.map_or(f64::NEG_INFINITY, |j| oracle[i][j]))
                .collect();
            if got.hardest != hardest || got.positives != pos || got.hardest_values != vals {
                return Outcome::new(false, format!("batch {n} ({dir}, B={b}, K={k}) differs from the loop oracle"));
            }
        }
        let pooled_t = tape.value(tables.s_t2q).clone();
        if pooled_t != tape.value(tables.s_q2t).transpose2().unwrap() {
            return Outcome::new(false, format!("batch {n}: S_t2q is not the transpose of S_q2t"));
        }

        // Triplet mining on pooled-vs-label similarities.
        let e = unit_rows(&mut rng, b, d);
        let r = unit_rows(&mut rng, b, d);
        let ev = tape.constant(Tensor::from_rows(&e).unwrap());
        let rv = tape.constant(Tensor::from_rows(&r).unwrap());
        let (_, got) = triplet_loss(&mut tape, ev, rv, &labels, 0.2, mask).unwrap();
        let s: Vec<Vec<f64>> = (0..b)
            .map(|i| {
                (0..b)
                    .map(|j| {
                        let ni = dot(&e[i], &e[i]).sqrt().max(NORM_EPS);
                        let nj = dot(&r[j], &r[j]).sqrt().max(NORM_EPS);
                        let a: Vec<f64> = e[i].iter().map(|x| x / ni).collect();
                        let c: Vec<f64> = r[j].iter().map(|x| x / nj).collect();
                        dot(&a, &c)
                    })
                    .collect()
            })
            .collect();
        if got.hardest != brute_hardest(&s, &labels, mask) {
            return Outcome::new(false, format!("batch {n}: triplet negatives differ from the loop oracle"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(secs < 30.0, format!("{batches} batches match, {secs:.2}s"))
}

fn expected_weight(e: usize, start: usize, en: usize) -> f64 {
    if e < start {
        0.0
    } else if en == start || e >= en {
        1.0
    } else {
        (e - start) as f64 / (en - start) as f64
    }
}

/// Stage weights against the piecewise formulas and bitwise stage I loss.
pub fn curriculum_exact(triples: usize) -> Outcome {
    let mut rng = derive_rng(30, "curriculum");
    let mut checked = 0;
    for n in 0..triples {
        let mut v = [rng.random_range(0..8usize), rng.random_range(0..8), rng.random_range(1..10)];
        v.sort_unstable();
        let sched = CurriculumSchedule::new(v[0], v[1], v[2]).unwrap();
        for e in 0..=2 * sched.en {
            let (wt, wa) = sched.stage_weights(e as i64).unwrap();
            let want = (expected_weight(e, sched.e1, sched.en), expected_weight(e, sched.e2, sched.en));
            if (wt, wa) != want {
                return Outcome::new(false, format!("{sched:?} at e={e}: got {:?}, want {want:?}", (wt, wa)));
            }
            checked += 1;
        }
        // Stage I: the curriculum loss is exactly ce + margin.
        let mut tape = Tape::new();
        let vals: Vec<f64> = normal_vec(&mut rng, 4, 1.0).into_iter().map(f64::abs).collect();
        let mk = |tape: &mut Tape, x: f64| tape.constant(Tensor::scalar(x));
        let losses = TaskLosses {
            ce: mk(&mut tape, vals[0]),
            margin: mk(&mut tape, vals[1]),
            triplet: mk(&mut tape, vals[2]),
            aux: mk(&mut tape, vals[3]),
        };
        for e in 0..sched.e1 {
            let l = curriculum_loss(&mut tape, &losses, &sched, e as i64, AblationFlags::default()).unwrap();
            if tape.value(l).item().to_bits() != (vals[0] + vals[1]).to_bits() {
                return Outcome::new(false, format!("triple {n}: stage I loss is not ce + margin at e={e}"));
            }
        }
    }
    Outcome::new(true, format!("{triples} schedules, {checked} epochs exact; stage I bitwise"))
}

pub fn synthetic_dataset() -> Dataset {
    Dataset::synthetic(&SynthConfig::default()).unwrap()
}

/// Expected recall@k of a uniformly random ranking, by simulation.
pub fn random_baseline(data: &Dataset, split: &str, k: usize, trials: usize) -> f64 {
    let gold: Vec<Vec<usize>> = data
        .corpus
        .split(split)
        .unwrap()
        .iter()
        .map(|s| s.gold_items().iter().map(|&e| data.graph.item_slot(e).unwrap()).collect())
        .collect();
    let m = data.graph.num_items();
    let mut rng = derive_rng(40, "random-baseline");
    let mut total = 0.0;
    for _ in 0..trials {
        let ranked: Vec<Vec<usize>> = gold
            .iter()
            .map(|_| {
                let mut p: Vec<usize> = (0..m).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        total += recall_at_k(&ranked, &gold, k).unwrap();
    }
    total / trials as f64
}

/// Frozen encoder/decoder and moving trainable groups across one run.
pub fn frozen_contract(data: &Dataset, run: &RunResult) -> Outcome {
    let fresh = Model::new(run.model.config.clone(), data.graph.clone(), data.vocab.clone()).unwrap();
    let same_frozen = fresh.encoder_hash() == run.model.encoder_hash() && fresh.decoder_hash() == run.model.decoder_hash();
    let groups: [(&str, &[&str]); 3] = [
        ("prefix", &["prefix_conv.", "prefix_rec."]),
        ("fformer", &["fformer."]),
        ("rgcn", &["entity_table", "rgcn."]),
    ];
    let moved: Vec<(&str, bool)> = groups
        .iter()
        .map(|(name, p)| (*name, fresh.params.hash_group(p) != run.model.params.hash_group(p)))
        .collect();
    let passed = same_frozen && moved.iter().all(|m| m.1);
    Outcome::new(
        passed,
        format!(
            "encoder/decoder unchanged: {same_frozen}; trained groups changed: {moved:?}; encoder {}..",
            &run.model.encoder_hash()[..12]
        ),
    )
}

/// Two identically seeded runs give byte-identical checkpoints and reports.
pub fn determinism(a: &RunResult, b: &RunResult) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for (tag, run) in [("a", a), ("b", b)] {
        let (m, p) = step_core::pipeline::save_checkpoint(&dir.path().join(tag), &run.model, &run.state).unwrap();
        bytes.push((std::fs::read(m).unwrap(), std::fs::read(p).unwrap()));
    }
    let reports = (serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
    let passed = bytes[0] == bytes[1] && reports.0 == reports.1;
    Outcome::new(
        passed,
        format!(
            "checkpoint blob {} bytes identical: {}; reports identical: {}",
            bytes[0].1.len(),
            bytes[0] == bytes[1],
            reports.0 == reports.1
        ),
    )
}

pub fn learnability(data: &Dataset, run: &RunResult) -> Outcome {
    let m = &run.report.metrics;
    let base1 = random_baseline(data, "test", 1, 2000);
    let base10 = random_baseline(data, "test", 10, 2000);
    let (t1, t10) = (5.0 / 64.0, 0.5);
    let baseline_ok = t1 >= 4.0 * base1 && t10 >= 2.0 * base10;
    let passed = baseline_ok && m.recall_at_1 >= t1 && m.recall_at_10 >= t10 && run.seconds < 600.0;
    Outcome::new(
        passed,
        format!(
            "recall@1 {:.3} (>= {t1:.3}), recall@10 {:.3} (>= {t10}); random baseline {base1:.4} / {base10:.4}; {:.1}s",
            m.recall_at_1, m.recall_at_10, run.seconds
        ),
    )
}

pub fn ablation_table(data: &Dataset, seeds: &[u64]) -> (Vec<(String, f64)>, Vec<Vec<AblationRow>>) {
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        per_seed.push(run_ablation_suite(&cfg, data).unwrap());
    }
    let names: Vec<String> = per_seed[0].iter().map(|r| r.model.clone()).collect();
    let means = names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let mean = per_seed.iter().map(|rows| rows[i].recall_at_1).sum::<f64>() / seeds.len() as f64;
            (n.clone(), mean)
        })
        .collect();
    (means, per_seed)
}

pub fn ablation_ordering(means: &[(String, f64)]) -> Outcome {
    let full = means.last().expect("full model row last");
    let inverted: Vec<&str> = means[..means.len() - 1]
        .iter()
        .filter(|(_, m)| *m > full.1)
        .map(|(n, _)| n.as_str())
        .collect();
    let table = means
        .iter()
        .map(|(n, m)| format!("{n} {m:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(inverted.is_empty(), format!("mean recall@1: {table}; inverted: {inverted:?}"))
}

fn oracle_recall(ranked: &[Vec<usize>], gold: &[Vec<usize>], k: usize) -> f64 {
    let mut sum = 0.0;
    let mut turns = 0;
    for t in 0..ranked.len() {
        if gold[t].is_empty() {
            continue;
        }
        let mut hits = 0;
        for g in &gold[t] {
            for p in 0..k.min(ranked[t].len()) {
                if ranked[t][p] == *g {
                    hits += 1;
                    break;
                }
            }
        }
        sum += hits as f64 / gold[t].len() as f64;
        turns += 1;
    }
    if turns == 0 {
        0.0
    } else {
        sum / turns as f64
    }
}

fn oracle_distinct(responses: &[Vec<String>], n: usize) -> f64 {
    let mut grams = Vec::new();
    for r in responses {
        let mut i = 0;
        while i + n <= r.len() {
            grams.push(r[i..i + n].join("\u{1}"));
            i += 1;
        }
    }
    let total = grams.len();
    let unique: BTreeSet<String> = grams.into_iter().collect();
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

pub fn metric_oracles(cases: usize) -> Outcome {
    let mut rng = derive_rng(50, "metric-oracles");
    for c in 0..cases {
        let items = rng.random_range(1..=30);
        let turns = rng.random_range(1..=12);
        let ranked: Vec<Vec<usize>> = (0..turns)
            .map(|_| {
                let mut p: Vec<usize> = (0..items).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        let gold: Vec<Vec<usize>> = (0..turns)
            .map(|_| {
                let mut g: Vec<usize> = (0..rng.random_range(0..=3)).map(|_| rng.random_range(0..items)).collect();
                g.sort_unstable();
                g.dedup();
                g
            })
            .collect();
        let mut prev = 0.0;
        for k in 1..=items + 2 {
            let got = recall_at_k(&ranked, &gold, k).unwrap();
            let want = oracle_recall(&ranked, &gold, k);
            if (got - want).abs() > 1e-12 {
                return Outcome::new(false, format!("recall case {c}, k={k}: {got} vs {want}"));
            }
            if got + 1e-15 < prev {
                return Outcome::new(false, format!("recall case {c} decreases at k={k}"));
            }
            prev = got;
        }
    }
    let vocab = ["a", "b", "c", "d", "e"];
    for c in 0..cases {
        let responses: Vec<Vec<String>> = (0..rng.random_range(0..6))
            .map(|_| {
                (0..rng.random_range(0..9))
                    .map(|_| vocab[rng.random_range(0..vocab.len())].to_string())
                    .collect()
            })
            .collect();
        for n in 1..=4 {
            let got = distinct_n(&responses, n).unwrap();
            let want = oracle_distinct(&responses, n);
            if (got - want).abs() > 1e-12 {
                return Outcome::new(false, format!("distinct case {c}, n={n}: {got} vs {want}"));
            }
        }
    }
    let abab = distinct_n(&[vec!["a".into(), "b".into(), "a".into(), "b".into()]], 2).unwrap();
    Outcome::new(
        abab == 2.0 / 3.0,
        format!("{cases} recall and {cases} distinct cases match; distinct_2(a b a b) = {abab}"),
    )
}

/// With lambda = 0 the recommendation prompt equals one assembled from the
/// fused vector alone.
pub fn lambda_zero_degeneracy(data: &Dataset, samples: usize) -> Outcome {
    let mut cfg = TrainConfig::default();
    cfg.model.lambda = 0.0;
    let model = Model::new(cfg, data.graph.clone(), data.vocab.clone()).unwrap();
    let cache = model.inference_cache().unwrap();
    let prepared = model.prepare_all(&data.corpus.train[..samples]).unwrap();
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape);
    let h = model.graph_embeddings(&mut tape, &bound).unwrap();
    let ff = model.fformer(&bound);
    let bind = model.decoder.bind(&mut tape).unwrap();
    let refined = tape.constant(cache.refined_rec.clone());
    let mut compared = 0;
    for s in &prepared {
        let fusion = model.fuse_sample(&mut tape, &bound, &ff, h, s).unwrap();
        let plain = assemble_rec_prompt(&mut tape, &model.decoder, &bind, refined, fusion.pooled, &s.response_ids).unwrap();
        for training in [true, false] {
            let with = model
                .rec_prompt(&mut tape, &bound, &bind, refined, h, fusion.pooled, s, &s.response_ids, training)
                .unwrap();
            let (a, b) = (tape.value(with), tape.value(plain));
            let same = a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return Outcome::new(false, format!("sample {} differs (training={training})", s.id));
            }
            compared += 1;
        }
    }
    Outcome::new(true, format!("{compared} prompts bitwise equal"))
}

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
    g
}

fn rgcn(g: &KnowledgeGraph, h: &Tensor, w: &[Tensor]) -> Tensor {
    let mut tape = Tape::new();
    let layer = RgcnLayer {
        self_weight: tape.constant(w[0].clone()),
        relation_weights: w[1..].iter().map(|x| tape.constant(x.clone())).collect(),
        activation: Activation::Relu,
    };
    let h = tape.constant(h.clone());
    let out = layer.forward(&mut tape, g, h).unwrap();
    tape.value(out).clone()
}

pub fn permutation_equivariance(graphs: usize) -> Outcome {
    let mut rng = derive_rng(60, "rgcn-permutation");
    for n_graph in 0..graphs {
        let n = rng.random_range(1..=20);
        let r = rng.random_range(1..=4);
        let d = rng.random_range(1..=8);
        let g = random_graph(&mut rng, n, r);
        let h = rand_tensor(&mut rng, &[n, d], 1.0);
        let w: Vec<Tensor> = (0..=r).map(|_| rand_tensor(&mut rng, &[d, d], 1.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pg = g.permute_entities(&perm).unwrap();
        let mut ph = vec![0.0; n * d];
        for old in 0..n {
            ph[perm[old] * d..(perm[old] + 1) * d].copy_from_slice(h.row(old));
        }
        let base = rgcn(&g, &h, &w);
        let moved = rgcn(&pg, &Tensor::new(vec![n, d], ph).unwrap(), &w);
        for old in 0..n {
            if base.row(old) != moved.row(perm[old]) {
                return Outcome::new(false, format!("graph {n_graph}: row {old} differs after relabeling"));
            }
        }
    }
    Outcome::new(true, format!("{graphs} graphs exact under relabeling"))
}

pub fn train_default(data: &Dataset, seed: u64) -> RunResult {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    train_and_evaluate(cfg, data).unwrap()
}
