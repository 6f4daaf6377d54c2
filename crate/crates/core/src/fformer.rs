//! Query-bank fusion transformer.
//!
//! A bank of `K` learnable query vectors residual-cross-attends to the
//! sample's entity embeddings (entity stage), then to the dialogue text
//! representation (text stage); the two results are averaged element-wise.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StepError};
use crate::numerics::{Tape, Tensor, Var};

/// Which text representation the text stage attends to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextKeys {
    /// The single CLS vector.
    #[default]
    Cls,
    /// Every encoder output position.
    Tokens,
}

/// Projection handles for one attention layer. All are `[D, D]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    /// `[K, M]` row-stochastic attention matrix.
    pub weights: Var,
}

/// `softmax(Q W_q (H W_k)^T / sqrt(D)) H W_v` for `Q: [K, D]`, `H: [M, D]`.
/// `mask[j] == false` removes key `j`.
pub fn cross_attention(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    w: &AttentionWeights,
    mask: Option<&[bool]>,
) -> Result<Attended> {
    let d = tape.value(queries).cols();
    let m = tape.value(keys).rows();
    if tape.value(keys).cols() != d {
        return Err(StepError::shape("cross_attention", tape.value(queries).shape(), tape.value(keys).shape()));
    }
    let q = tape.matmul(queries, w.w_q)?;
    let k = tape.matmul(keys, w.w_k)?;
    let v = tape.matmul(keys, w.w_v)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let mut logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    if let Some(mask) = mask {
        if mask.len() != m {
            return Err(StepError::invalid(format!("mask has {} entries for {m} keys", mask.len())));
        }
        if !mask.iter().any(|&keep| keep) {
            return Err(StepError::invalid("every attention key is masked"));
        }
        let rows = tape.value(logits).rows();
        let bias: Vec<f64> = (0..rows * m)
            .map(|i| if mask[i % m] { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        let bias = tape.constant(Tensor::new(vec![rows, m], bias)?);
        logits = tape.add(logits, bias)?;
    }
    let weights = tape.softmax_rows(logits)?;
    let output = tape.matmul(weights, v)?;
    Ok(Attended { output, weights })
}

/// F-Former parameters bound to a tape.
#[derive(Clone, Debug)]
pub struct FFormer {
    /// `[K, D]` query bank.
    pub queries: Var,
    pub entity_layers: Vec<AttentionWeights>,
    pub text_layers: Vec<AttentionWeights>,
}

/// Per-sample fusion result.
#[derive(Clone, Copy, Debug)]
pub struct SampleFusion {
    pub q_e: Var,
    pub q_t: Var,
    /// `(q_e + q_t) / 2`, `[K, D]`.
    pub q: Var,
    /// Mean over the K slots, `[1, D]`.
    pub pooled: Var,
}

fn residual_stack(
    tape: &mut Tape,
    start: Var,
    keys: Var,
    layers: &[AttentionWeights],
    mask: Option<&[bool]>,
    trace: &mut Vec<Var>,
) -> Result<Var> {
    let mut q = start;
    for w in layers {
        let att = cross_attention(tape, q, keys, w, mask)?;
        trace.push(att.weights);
        q = tape.add(q, att.output)?;
    }
    Ok(q)
}

impl FFormer {
    /// `Q_e^{l+1} = Q_e^l + Attention(Q_e^l, H)` from the query bank.
    pub fn entity_stage(&self, tape: &mut Tape, entity_rows: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.entity_stage_traced(tape, entity_rows, mask, &mut Vec::new())
    }

    pub fn entity_stage_traced(
        &self,
        tape: &mut Tape,
        entity_rows: Var,
        mask: Option<&[bool]>,
        trace: &mut Vec<Var>,
    ) -> Result<Var> {
        residual_stack(tape, self.queries, entity_rows, &self.entity_layers, mask, trace)
    }

    /// `Q_t^{l+1} = Q_t^l + Attention(Q_t^l, T)` starting from `Q_e`. `text`
    /// is `[1, D]` (CLS) or `[L, D]` (token keys).
    pub fn text_stage(&self, tape: &mut Tape, q_e: Var, text: Var) -> Result<Var> {
        self.text_stage_traced(tape, q_e, text, &mut Vec::new())
    }

    pub fn text_stage_traced(&self, tape: &mut Tape, q_e: Var, text: Var, trace: &mut Vec<Var>) -> Result<Var> {
        let rows = tape.value(text).rows();
        let d = tape.value(text).cols();
        let text = tape.reshape(text, &[rows, d])?;
        residual_stack(tape, q_e, text, &self.text_layers, None, trace)
    }

    pub fn forward(&self, tape: &mut Tape, entity_rows: Var, mask: Option<&[bool]>, text: Var) -> Result<SampleFusion> {
        let q_e = self.entity_stage(tape, entity_rows, mask)?;
        let q_t = self.text_stage(tape, q_e, text)?;
        fuse(tape, q_e, q_t)
    }
}

/// Element-wise mean of the two stages plus the slot-mean pooled vector.
pub fn fuse(tape: &mut Tape, q_e: Var, q_t: Var) -> Result<SampleFusion> {
    let sum = tape.add(q_e, q_t)?;
    let q = tape.scale(sum, 0.5);
    let pooled = tape.mean_rows(q);
    Ok(SampleFusion { q_e, q_t, q, pooled })
}

/// Stacks per-sample pooled vectors into `[B, D]`.
pub fn pooled_matrix(tape: &mut Tape, fusions: &[SampleFusion]) -> Result<Var> {
    let rows: Vec<Var> = fusions.iter().map(|f| f.pooled).collect();
    tape.concat_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(tape: &mut Tape, q: Tensor, k: Tensor, v: Tensor) -> AttentionWeights {
        AttentionWeights {
            w_q: tape.constant(q),
            w_k: tape.constant(k),
            w_v: tape.constant(v),
        }
    }

    #[test]
    fn single_key_gets_all_weight() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap());
        let h = tape.constant(Tensor::from_rows(&[vec![0.3, -0.7]]).unwrap());
        let w = weights(&mut tape, Tensor::identity(2), Tensor::identity(2), Tensor::identity(2));
        let att = cross_attention(&mut tape, q, h, &w, None).unwrap();
        assert_eq!(tape.value(att.weights).data(), &[1.0, 1.0]);
        assert_eq!(tape.value(att.output).data(), &[0.3, -0.7, 0.3, -0.7]);
    }

    #[test]
    fn zero_logits_average_values() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 4.0]]).unwrap());
        let w = weights(&mut tape, Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2]), Tensor::identity(2));
        let att = cross_attention(&mut tape, q, h, &w, None).unwrap();
        assert_eq!(tape.value(att.output).data(), &[2.0, 2.0]);
    }

    #[test]
    fn masking() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 4.0]]).unwrap());
        let w = weights(&mut tape, Tensor::identity(2), Tensor::identity(2), Tensor::identity(2));
        let att = cross_attention(&mut tape, q, h, &w, Some(&[false, true])).unwrap();
        assert_eq!(tape.value(att.output).data(), &[3.0, 4.0]);
        assert!(cross_attention(&mut tape, q, h, &w, Some(&[false, false])).is_err());
    }

    #[test]
    fn fuse_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let neg = tape.scale(a, -1.0);
        let same = fuse(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(same.q), tape.value(a));
        let opp = fuse(&mut tape, a, neg).unwrap();
        assert!(tape.value(opp.q).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(same.pooled).data(), &[2.0, 3.0]);
    }
}
