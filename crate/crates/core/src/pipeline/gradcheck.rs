//! Finite-difference checks of every differentiable component on small
//! random shapes.

use rand::Rng;

use crate::error::Result;
use crate::fformer::{AttentionWeights, FFormer};
use crate::kg::{KnowledgeGraph, RgcnLayer};
use crate::numerics::{check_gradients, Activation, GradCheckReport, Tape, Tensor, Var, NORM_EPS};
use crate::objectives::{
    aux_cosine_loss, contrastive_ce_loss, curriculum_loss, margin_loss, mine_batch_hard, pairwise_similarity,
    triplet_loss, AblationFlags, CurriculumSchedule, TaskLosses,
};
use crate::prompt::{assemble_conv_prompt, assemble_rec_prompt, conv_nll, rank_items, rec_loss, FrozenDecoder, PrefixHead};
use crate::rng::{derive_rng, normal_vec, StepRng};

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn rand_tensor(rng: &mut StepRng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n, std)).expect("shape matches")
}

/// Reduces a tensor to a scalar through a fixed random projection so every
/// coordinate gets a distinct upstream gradient.
fn project(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone().reshape(tape.value(x).shape().to_vec())?);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum_all(prod))
}

struct Shapes {
    b: usize,
    k: usize,
    d: usize,
}

fn shapes(rng: &mut StepRng) -> Shapes {
    Shapes {
        b: rng.random_range(2..=4),
        k: rng.random_range(1..=4),
        d: rng.random_range(3..=8),
    }
}

fn similarity_inputs(tape: &mut Tape, v: &[Var], s: &Shapes) -> Result<(Vec<Var>, Var)> {
    let q = tape.l2_normalize(v[0], NORM_EPS);
    let queries = (0..s.b)
        .map(|i| {
            let rows: Vec<usize> = (i * s.k..(i + 1) * s.k).collect();
            tape.gather_rows(q, &rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let t = tape.l2_normalize(v[1], NORM_EPS);
    Ok((queries, t))
}

fn check(name: &'static str, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Result<GradCheckEntry> {
    let report = check_gradients(f, inputs, GRAD_CHECK_STEP, GRAD_CHECK_TOLERANCE)?;
    Ok(GradCheckEntry { name, report })
}

fn random_graph(rng: &mut StepRng, n: usize, r: usize) -> KnowledgeGraph {
    let mut g = KnowledgeGraph::new();
    for i in 0..n {
        g.add_entity(&format!("e{i}"));
    }
    for j in 0..r {
        g.add_relation(&format!("r{j}"));
    }
    for _ in 0..2 * n {
        let (h, rel, t) = (rng.random_range(0..n), rng.random_range(0..r), rng.random_range(0..n));
        g.add_triple(h, rel, t).expect("ids in range");
    }
    g
}

fn tiny_decoder(seed: u64, d: usize) -> Result<FrozenDecoder> {
    FrozenDecoder::new(10, d, 32, 2, seed)
}

/// Runs every check. Shapes are drawn from `seed`.
pub fn run_grad_check_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut rng = derive_rng(seed, "grad-check");
    let mut out = Vec::new();

    // Contrastive cross entropy and batch-hard margin.
    let s = shapes(&mut rng);
    let inputs = [rand_tensor(&mut rng, &[s.b * s.k, s.d], 1.0), rand_tensor(&mut rng, &[s.b, s.d], 1.0)];
    out.push(check(
        "contrastive_ce",
        |tape, v| {
            let (q, t) = similarity_inputs(tape, v, &s)?;
            let tables = pairwise_similarity(tape, &q, t, 0.5)?;
            contrastive_ce_loss(tape, tables.s_q2t, tables.s_t2q, 0.1)
        },
        &inputs,
    )?);
    let labels: Vec<usize> = (0..s.b).collect();
    out.push(check(
        "margin",
        |tape, v| {
            let (q, t) = similarity_inputs(tape, v, &s)?;
            let tables = pairwise_similarity(tape, &q, t, 0.5)?;
            let mined = mine_batch_hard(tape, &tables, &labels, true)?;
            // A large margin keeps every hinge active, away from its kink.
            margin_loss(tape, &tables, &mined, 10.0)
        },
        &inputs,
    )?);

    // Triplet and auxiliary cosine alignment.
    let s = shapes(&mut rng);
    let inputs = [rand_tensor(&mut rng, &[s.b, s.d], 1.0), rand_tensor(&mut rng, &[s.b, s.d], 1.0)];
    let labels: Vec<usize> = (0..s.b).collect();
    out.push(check(
        "triplet",
        |tape, v| Ok(triplet_loss(tape, v[0], v[1], &labels, 5.0, true)?.0),
        &inputs,
    )?);
    out.push(check("aux_cosine", |tape, v| aux_cosine_loss(tape, v[0], v[1]), &inputs)?);

    // Curriculum combination past both boundaries.
    out.push(check(
        "curriculum",
        |tape, v| {
            let ce = tape.sum_all(v[0]);
            let margin = tape.mean_all(v[1]);
            let (triplet, _) = triplet_loss(tape, v[0], v[1], &labels, 5.0, true)?;
            let aux = aux_cosine_loss(tape, v[0], v[1])?;
            let losses = TaskLosses { ce, margin, triplet, aux };
            curriculum_loss(tape, &losses, &CurriculumSchedule::new(1, 2, 5)?, 3, AblationFlags::default())
        },
        &inputs,
    )?);

    // Relational graph convolution.
    let n = rng.random_range(4..=8);
    let r = rng.random_range(1..=3);
    let d = rng.random_range(3..=6);
    let g = random_graph(&mut rng, n, r);
    let mut inputs = vec![rand_tensor(&mut rng, &[n, d], 1.0), rand_tensor(&mut rng, &[d, d], 0.5)];
    for _ in 0..r {
        inputs.push(rand_tensor(&mut rng, &[d, d], 0.5));
    }
    let proj = rand_tensor(&mut rng, &[n, d], 1.0);
    out.push(check(
        "rgcn",
        |tape, v| {
            let layer = RgcnLayer {
                self_weight: v[1],
                relation_weights: v[2..].to_vec(),
                activation: Activation::Tanh,
            };
            let h = layer.forward(tape, &g, v[0])?;
            project(tape, h, &proj)
        },
        &inputs,
    )?);

    // F-Former: both stages, fusion and pooling.
    let s = shapes(&mut rng);
    let m = rng.random_range(1..=4);
    let layers = 2;
    let mut inputs = vec![
        rand_tensor(&mut rng, &[s.k, s.d], 0.5),
        rand_tensor(&mut rng, &[m, s.d], 0.5),
        rand_tensor(&mut rng, &[1, s.d], 0.5),
    ];
    for _ in 0..2 * layers * 3 {
        inputs.push(rand_tensor(&mut rng, &[s.d, s.d], 0.5));
    }
    let proj = rand_tensor(&mut rng, &[1, s.d], 1.0);
    out.push(check(
        "fformer",
        |tape, v| {
            let att = |i: usize| AttentionWeights {
                w_q: v[3 + 3 * i],
                w_k: v[4 + 3 * i],
                w_v: v[5 + 3 * i],
            };
            let ff = FFormer {
                queries: v[0],
                entity_layers: (0..layers).map(att).collect(),
                text_layers: (layers..2 * layers).map(att).collect(),
            };
            let fused = ff.forward(tape, v[1], None, v[2])?;
            project(tape, fused.pooled, &proj)
        },
        &inputs,
    )?);

    // Prefix refinement MLPs.
    for name in ["prefix_conv", "prefix_rec"] {
        let p = rng.random_range(1..=4);
        let d = rng.random_range(3..=8);
        let inputs = [
            rand_tensor(&mut rng, &[p, d], 1.0),
            rand_tensor(&mut rng, &[d, d], 0.5),
            rand_tensor(&mut rng, &[d], 0.5),
            rand_tensor(&mut rng, &[d, d], 0.5),
            rand_tensor(&mut rng, &[d], 0.5),
        ];
        let proj = rand_tensor(&mut rng, &[p, d], 1.0);
        out.push(check(
            name,
            |tape, v| {
                let head = PrefixHead {
                    prefix: v[0],
                    w1: v[1],
                    b1: v[2],
                    w2: v[3],
                    b2: v[4],
                };
                let refined = head.refine(tape)?;
                project(tape, refined, &proj)
            },
            &inputs,
        )?);
    }

    // Conversation loss through the frozen decoder.
    let d = rng.random_range(4..=8);
    let decoder = tiny_decoder(seed, d)?;
    let p = rng.random_range(1..=3);
    let inputs = [rand_tensor(&mut rng, &[p, d], 0.5), rand_tensor(&mut rng, &[1, d], 0.5)];
    out.push(check(
        "conv_loss",
        |tape, v| {
            let bind = decoder.bind(tape)?;
            let prompt = assemble_conv_prompt(tape, v[0], v[1])?;
            let (nll, count) = conv_nll(tape, &decoder, &bind, prompt, &[6, 7, 8], &[9, 4, 6])?;
            Ok(tape.scale(nll, 1.0 / count as f64))
        },
        &inputs,
    )?);

    // Recommendation loss: ranking softmax plus clamped BCE.
    let items = rng.random_range(3..=6);
    let inputs = [
        rand_tensor(&mut rng, &[p, d], 0.5),
        rand_tensor(&mut rng, &[1, d], 0.5),
        rand_tensor(&mut rng, &[items, d], 0.5),
    ];
    out.push(check(
        "rec_loss",
        |tape, v| {
            let bind = decoder.bind(tape)?;
            let prompt = assemble_rec_prompt(tape, &decoder, &bind, v[0], v[1], &[7, 4])?;
            let probs = rank_items(tape, &decoder, &bind, prompt, v[2])?;
            rec_loss(tape, probs, &[vec![1]])
        },
        &inputs,
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for entry in run_grad_check_suite(11).unwrap() {
            assert!(
                entry.report.passed(),
                "{}: max rel err {}",
                entry.name,
                entry.report.max_rel_err
            );
        }
    }
}
