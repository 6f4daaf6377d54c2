//! Fusion alignment objectives and the three-stage curriculum.
//!
//! * Task 1: bidirectional query/text contrastive loss (smoothed cross
//!   entropy) plus a batch-hard margin loss.
//! * Task 2: triplet-margin alignment of pooled queries to label embeddings.
//! * Task 3: cosine matching of pooled queries to label embeddings.
//!
//! The curriculum phases Task 2 and Task 3 in with linear ramps after epoch
//! boundaries `E1` and `E2`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StepError};
use crate::numerics::{Tape, Tensor, Var, NORM_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub margin: f64,
    pub smoothing: f64,
    /// Exclude off-diagonal pairs sharing a gold item from hardest-negative
    /// mining. `false` mines over every `j != i`.
    pub mask_label_collisions: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.07,
            margin: 0.2,
            smoothing: 0.1,
            mask_label_collisions: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(StepError::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.margin >= 0.0) {
            return Err(StepError::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(StepError::Config(format!("smoothing must lie in [0, 1), got {}", self.smoothing)));
        }
        Ok(())
    }
}

/// Query/text similarity tables for one batch.
#[derive(Clone, Debug)]
pub struct SimilarityTables {
    /// `[B, B, K]`: `Q[i,k] . T[j] / tau`.
    pub q2t_slots: Tensor,
    /// `[B, B, K]`: `T[i] . Q[j,k] / tau`.
    pub t2q_slots: Tensor,
    /// Slot-max pooled `[B, B]` tables on the tape.
    pub s_q2t: Var,
    pub s_t2q: Var,
}

/// Similarities between per-sample query banks `queries[i]: [K, D]` and text
/// rows `text: [B, D]`. Both are expected to be L2-normalized already.
///
/// The two directions are computed independently (not by transposition) so
/// the duality `S_t2q = S_q2t^T` can be checked.
pub fn pairwise_similarity(tape: &mut Tape, queries: &[Var], text: Var, temperature: f64) -> Result<SimilarityTables> {
    if !(temperature > 0.0) {
        return Err(StepError::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    let b = queries.len();
    if b == 0 || tape.value(text).rows() != b {
        return Err(StepError::shape("pairwise_similarity", &[b], tape.value(text).shape()));
    }
    let k = tape.value(queries[0]).rows();
    let inv_tau = 1.0 / temperature;
    let text_t = tape.transpose(text)?;

    let mut q2t_rows = Vec::with_capacity(b);
    let mut q2t_slots = Vec::with_capacity(b * b * k);
    for &q in queries {
        let sims = tape.matmul(q, text_t)?; // [K, B]
        let sims = tape.scale(sims, inv_tau);
        let by_text = tape.transpose(sims)?; // [B, K]
        q2t_slots.extend_from_slice(tape.value(by_text).data());
        let (row, _) = tape.max_last(by_text)?;
        q2t_rows.push(row);
    }

    let mut t2q_cols = Vec::with_capacity(b);
    let mut per_query: Vec<Tensor> = Vec::with_capacity(b);
    for &q in queries {
        let qt = tape.transpose(q)?; // [D, K]
        let sims = tape.matmul(text, qt)?; // [B(i), K]
        let sims = tape.scale(sims, inv_tau);
        per_query.push(tape.value(sims).clone());
        let (col, _) = tape.max_last(sims)?;
        t2q_cols.push(col);
    }
    let mut t2q_slots = vec![0.0; b * b * k];
    for (j, t) in per_query.iter().enumerate() {
        for i in 0..b {
            for s in 0..k {
                t2q_slots[(i * b + j) * k + s] = t.get2(i, s);
            }
        }
    }

    let s_q2t = tape.concat_rows(&q2t_rows)?;
    let cols = tape.concat_rows(&t2q_cols)?; // [j, i]
    let s_t2q = tape.transpose(cols)?;
    Ok(SimilarityTables {
        q2t_slots: Tensor::new(vec![b, b, k], q2t_slots)?,
        t2q_slots: Tensor::new(vec![b, b, k], t2q_slots)?,
        s_q2t,
        s_t2q,
    })
}

/// Positive (diagonal) score and hardest admissible negative per anchor row.
/// `hardest[i]` is `None` when every off-diagonal entry of row `i` is masked;
/// its value is then `-inf` and any hinge on it is inactive.
#[derive(Clone, Debug, PartialEq)]
pub struct Mined {
    pub positives: Vec<f64>,
    pub hardest: Vec<Option<usize>>,
    pub hardest_values: Vec<f64>,
}

/// Row-wise batch-hard mining over a square score matrix.
pub fn mine_rows(scores: &Tensor, labels: &[usize], mask_collisions: bool) -> Result<Mined> {
    let b = labels.len();
    if scores.shape() != [b, b] {
        return Err(StepError::shape("mine_rows", scores.shape(), &[b, b]));
    }
    let mut positives = Vec::with_capacity(b);
    let mut hardest = Vec::with_capacity(b);
    let mut hardest_values = Vec::with_capacity(b);
    for i in 0..b {
        positives.push(scores.get2(i, i));
        let mut best: Option<usize> = None;
        for j in 0..b {
            if j == i || (mask_collisions && labels[j] == labels[i]) {
                continue;
            }
            if best.is_none_or(|bj| scores.get2(i, j) > scores.get2(i, bj)) {
                best = Some(j);
            }
        }
        hardest_values.push(best.map_or(f64::NEG_INFINITY, |j| scores.get2(i, j)));
        hardest.push(best);
    }
    Ok(Mined {
        positives,
        hardest,
        hardest_values,
    })
}

/// Mining for both directions of a similarity table.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchHard {
    pub q2t: Mined,
    pub t2q: Mined,
}

pub fn mine_batch_hard(tape: &Tape, tables: &SimilarityTables, labels: &[usize], mask_collisions: bool) -> Result<BatchHard> {
    Ok(BatchHard {
        q2t: mine_rows(tape.value(tables.s_q2t), labels, mask_collisions)?,
        t2q: mine_rows(tape.value(tables.s_t2q), labels, mask_collisions)?,
    })
}

/// Row-wise smoothed cross entropy against diagonal targets, averaged over
/// rows. Target mass is `1 - eps` on the diagonal and `eps / (B - 1)` on
/// every other column.
pub fn smoothed_diagonal_ce(tape: &mut Tape, logits: Var, smoothing: f64) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(StepError::shape("smoothed_diagonal_ce", &shape, &[]));
    }
    let b = shape[0];
    let off = if b > 1 { smoothing / (b - 1) as f64 } else { 0.0 };
    let on = if b > 1 { 1.0 - smoothing } else { 1.0 };
    let targets: Vec<f64> = (0..b * b).map(|k| if k / b == k % b { on } else { off }).collect();
    let targets = tape.constant(Tensor::new(vec![b, b], targets)?);
    let logp = tape.log_softmax_rows(logits)?;
    let weighted = tape.mul(logp, targets)?;
    let total = tape.sum_all(weighted);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// `(CE(S_q2t, y) + CE(S_t2q, y)) / 2`.
pub fn contrastive_ce_loss(tape: &mut Tape, s_q2t: Var, s_t2q: Var, smoothing: f64) -> Result<Var> {
    let a = smoothed_diagonal_ce(tape, s_q2t, smoothing)?;
    let b = smoothed_diagonal_ce(tape, s_t2q, smoothing)?;
    let sum = tape.add(a, b)?;
    Ok(tape.scale(sum, 0.5))
}

/// Sum over anchors of `max(0, m + h_i - p_i)` for one direction, skipping
/// anchors without an admissible negative. Returns `None` if none remain.
fn hinge_sum(tape: &mut Tape, scores: Var, mined: &Mined, margin: f64) -> Result<Option<Var>> {
    let b = mined.positives.len();
    let (mut pos_idx, mut neg_idx) = (Vec::new(), Vec::new());
    for (i, h) in mined.hardest.iter().enumerate() {
        if let Some(j) = h {
            pos_idx.push(i * b + i);
            neg_idx.push(i * b + j);
        }
    }
    if pos_idx.is_empty() {
        return Ok(None);
    }
    let p = tape.select(scores, &pos_idx)?;
    let h = tape.select(scores, &neg_idx)?;
    let diff = tape.sub(h, p)?;
    let shifted = tape.add_scalar(diff, margin);
    let hinge = tape.relu(shifted);
    Ok(Some(tape.sum_all(hinge)))
}

/// Batch-hard margin loss over both directions, normalized by `2B`.
pub fn margin_loss(tape: &mut Tape, tables: &SimilarityTables, mined: &BatchHard, margin: f64) -> Result<Var> {
    let b = mined.q2t.positives.len();
    let parts: Vec<Var> = [
        hinge_sum(tape, tables.s_q2t, &mined.q2t, margin)?,
        hinge_sum(tape, tables.s_t2q, &mined.t2q, margin)?,
    ]
    .into_iter()
    .flatten()
    .collect();
    let total = match parts.as_slice() {
        [] => return Ok(tape.constant(Tensor::scalar(0.0))),
        [one] => *one,
        [a, c] => tape.add(*a, *c)?,
        _ => unreachable!(),
    };
    Ok(tape.scale(total, 1.0 / (2 * b) as f64))
}

/// Scalar form of the margin loss on plain vectors.
pub fn margin_loss_values(p_q2t: &[f64], h_q2t: &[f64], p_t2q: &[f64], h_t2q: &[f64], margin: f64) -> f64 {
    let b = p_q2t.len();
    let hinge = |h: f64, p: f64| (margin + h - p).max(0.0);
    let total: f64 = (0..b).map(|i| hinge(h_q2t[i], p_q2t[i]) + hinge(h_t2q[i], p_t2q[i])).sum();
    total / (2 * b) as f64
}

/// Triplet-margin alignment of pooled queries `[B, D]` to label embeddings
/// `[B, D]`; both are normalized here. Returns the loss and the similarity
/// matrix mining ran on.
pub fn triplet_loss(
    tape: &mut Tape,
    pooled: Var,
    labels_emb: Var,
    gold: &[usize],
    margin: f64,
    mask_collisions: bool,
) -> Result<(Var, Mined)> {
    let e = tape.l2_normalize(pooled, NORM_EPS);
    let r = tape.l2_normalize(labels_emb, NORM_EPS);
    let rt = tape.transpose(r)?;
    let s = tape.matmul(e, rt)?;
    let mined = mine_rows(tape.value(s), gold, mask_collisions)?;
    let b = gold.len();
    let loss = match hinge_sum(tape, s, &mined, margin)? {
        Some(sum) => tape.scale(sum, 1.0 / b as f64),
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok((loss, mined))
}

/// `mean_i (1 - cos(e_i, r_i))`.
pub fn aux_cosine_loss(tape: &mut Tape, pooled: Var, labels_emb: Var) -> Result<Var> {
    let e = tape.l2_normalize(pooled, NORM_EPS);
    let r = tape.l2_normalize(labels_emb, NORM_EPS);
    let prod = tape.mul(e, r)?;
    let cos = tape.sum_last(prod);
    let mean = tape.mean_all(cos);
    Ok(tape.one_minus(mean))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub e1: usize,
    pub e2: usize,
    pub en: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule { e1: 2, e2: 3, en: 5 }
    }
}

fn ramp(e: usize, start: usize, end: usize) -> f64 {
    if e < start {
        0.0
    } else if e >= end {
        1.0
    } else {
        (e - start) as f64 / (end - start) as f64
    }
}

impl CurriculumSchedule {
    pub fn new(e1: usize, e2: usize, en: usize) -> Result<Self> {
        let s = CurriculumSchedule { e1, e2, en };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e1 <= self.e2 && self.e2 <= self.en) {
            return Err(StepError::Config(format!(
                "curriculum boundaries must satisfy E1 <= E2 <= En, got {}, {}, {}",
                self.e1, self.e2, self.en
            )));
        }
        Ok(())
    }

    /// `(w_triplet, w_aux)` at 0-based epoch `e`: zero before the stage
    /// boundary, a linear ramp up to `En`, then held at 1.
    pub fn stage_weights(&self, epoch: i64) -> Result<(f64, f64)> {
        if epoch < 0 {
            return Err(StepError::invalid(format!("epoch must be >= 0, got {epoch}")));
        }
        let e = epoch as usize;
        Ok((ramp(e, self.e1, self.en), ramp(e, self.e2, self.en)))
    }
}

/// Ablation switches mirroring the ablation table rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub no_curriculum: bool,
    pub no_task1: bool,
    pub no_task2: bool,
    pub no_task3: bool,
}

impl AblationFlags {
    pub const VARIANTS: [(&'static str, AblationFlags); 5] = [
        (
            "w/o CL",
            AblationFlags {
                no_curriculum: true,
                no_task1: false,
                no_task2: false,
                no_task3: false,
            },
        ),
        (
            "w/o Task1",
            AblationFlags {
                no_curriculum: false,
                no_task1: true,
                no_task2: false,
                no_task3: false,
            },
        ),
        (
            "w/o Task2",
            AblationFlags {
                no_curriculum: false,
                no_task1: false,
                no_task2: true,
                no_task3: false,
            },
        ),
        (
            "w/o Task3",
            AblationFlags {
                no_curriculum: false,
                no_task1: false,
                no_task2: false,
                no_task3: true,
            },
        ),
        (
            "full",
            AblationFlags {
                no_curriculum: false,
                no_task1: false,
                no_task2: false,
                no_task3: false,
            },
        ),
    ];
}

/// Effective multipliers `(task1, triplet, aux)` for epoch `e`.
pub fn curriculum_weights(sched: &CurriculumSchedule, epoch: i64, flags: AblationFlags) -> Result<(f64, f64, f64)> {
    let (mut wt, mut wa) = sched.stage_weights(epoch)?;
    if flags.no_curriculum {
        wt = 1.0;
        wa = 1.0;
    }
    let w1 = if flags.no_task1 { 0.0 } else { 1.0 };
    if flags.no_task2 {
        wt = 0.0;
    }
    if flags.no_task3 {
        wa = 0.0;
    }
    Ok((w1, wt, wa))
}

/// Component losses of the alignment objective.
#[derive(Clone, Copy, Debug)]
pub struct TaskLosses {
    pub ce: Var,
    pub margin: Var,
    pub triplet: Var,
    pub aux: Var,
}

/// `L_cl = (ce + margin) + w_triplet * triplet + w_aux * aux`. Terms whose
/// weight is zero are left out of the graph entirely, so before `E1` the
/// result is exactly `ce + margin`.
pub fn curriculum_loss(
    tape: &mut Tape,
    losses: &TaskLosses,
    sched: &CurriculumSchedule,
    epoch: i64,
    flags: AblationFlags,
) -> Result<Var> {
    let (w1, wt, wa) = curriculum_weights(sched, epoch, flags)?;
    let mut total: Option<Var> = None;
    let mut push = |tape: &mut Tape, term: Var, w: f64| -> Result<()> {
        if w == 0.0 {
            return Ok(());
        }
        let term = if w == 1.0 { term } else { tape.scale(term, w) };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
        Ok(())
    };
    if w1 != 0.0 {
        let s1 = tape.add(losses.ce, losses.margin)?;
        push(tape, s1, 1.0)?;
    }
    push(tape, losses.triplet, wt)?;
    push(tape, losses.aux, wa)?;
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mining_hand_case() {
        let s = Tensor::from_rows(&[vec![5.0, 1.0], vec![2.0, 7.0]]).unwrap();
        let m = mine_rows(&s, &[0, 1], true).unwrap();
        assert_eq!(m.positives, vec![5.0, 7.0]);
        assert_eq!(m.hardest_values, vec![1.0, 2.0]);
    }

    #[test]
    fn collision_masking_skips_same_label() {
        let s = Tensor::from_rows(&[vec![1.0, 9.0, 2.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let m = mine_rows(&s, &[4, 4, 8], true).unwrap();
        assert_eq!(m.hardest[0], Some(2));
        let literal = mine_rows(&s, &[4, 4, 8], false).unwrap();
        assert_eq!(literal.hardest[0], Some(1));
    }

    #[test]
    fn all_equal_labels_give_sentinels_and_zero_margin() {
        let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let m = mine_rows(&s, &[1, 1], true).unwrap();
        assert_eq!(m.hardest, vec![None, None]);
        let loss = margin_loss_values(&m.positives, &m.hardest_values, &m.positives, &m.hardest_values, 0.2);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn margin_values_cases() {
        assert_eq!(margin_loss_values(&[1.0, 1.0], &[0.5, 0.0], &[1.0, 2.0], &[0.7, 1.0], 0.2), 0.0);
        let p = [0.3, -0.1, 0.9];
        assert!((margin_loss_values(&p, &p, &p, &p, 0.2) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn ce_uniform_logits_is_ln_b() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::zeros(&[4, 4]));
        let l = contrastive_ce_loss(&mut tape, s, s, 0.0).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aux_cases() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let perp = tape.constant(Tensor::from_rows(&[vec![0.0, 3.0], vec![1.0, 0.0]]).unwrap());
        let neg = tape.scale(e, -1.0);
        let same = aux_cosine_loss(&mut tape, e, e).unwrap();
        let orth = aux_cosine_loss(&mut tape, e, perp).unwrap();
        let opp = aux_cosine_loss(&mut tape, e, neg).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        assert_eq!(tape.value(orth).item(), 1.0);
        assert_eq!(tape.value(opp).item(), 2.0);
    }

    #[test]
    fn stage_weight_examples() {
        let s = CurriculumSchedule::default();
        assert_eq!(s.stage_weights(1).unwrap().0, 0.0);
        assert_eq!(s.stage_weights(3).unwrap().0, 1.0 / 3.0);
        assert_eq!(s.stage_weights(4).unwrap().1, 0.5);
        assert!(s.stage_weights(-1).is_err());
        let degenerate = CurriculumSchedule::new(3, 3, 3).unwrap();
        assert_eq!(degenerate.stage_weights(2).unwrap(), (0.0, 0.0));
        assert_eq!(degenerate.stage_weights(3).unwrap(), (1.0, 1.0));
        assert!(CurriculumSchedule::new(3, 2, 5).is_err());
    }

    #[test]
    fn curriculum_composition() {
        let mut tape = Tape::new();
        let losses = TaskLosses {
            ce: tape.constant(Tensor::scalar(0.7)),
            margin: tape.constant(Tensor::scalar(0.25)),
            triplet: tape.constant(Tensor::scalar(0.3)),
            aux: tape.constant(Tensor::scalar(0.8)),
        };
        let s = CurriculumSchedule::default();
        let flags = AblationFlags::default();
        let early = curriculum_loss(&mut tape, &losses, &s, 1, flags).unwrap();
        assert_eq!(tape.value(early).item(), 0.7 + 0.25);
        let e4 = curriculum_loss(&mut tape, &losses, &s, 4, flags).unwrap();
        let expected = (0.7 + 0.25) + (2.0 / 3.0) * 0.3 + 0.5 * 0.8;
        assert!((tape.value(e4).item() - expected).abs() < 1e-15);
        let no_cl = AblationFlags {
            no_curriculum: true,
            ..flags
        };
        let all = curriculum_loss(&mut tape, &losses, &s, 0, no_cl).unwrap();
        assert!((tape.value(all).item() - (0.7 + 0.25 + 0.3 + 0.8)).abs() < 1e-15);
    }
}
