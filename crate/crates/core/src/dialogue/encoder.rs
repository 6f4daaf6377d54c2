use sha2::{Digest, Sha256};

use super::text::CLS;
use crate::error::{Result, StepError};
use crate::numerics::{Tape, Tensor};
use crate::rng::{derive_rng, normal_vec};

pub fn sinusoidal_position(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Scale of encoder token embeddings and positions, matching the learnable
/// entity and query tables.
const ENCODER_EMBED_STD: f64 = 0.02;

/// Token embeddings for a context plus the vector at the prepended CLS slot.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedContext {
    pub tokens: Tensor,
    pub cls: Tensor,
}

/// Stand-in for the pretrained context encoder: token embeddings, sinusoidal
/// positions and one residual self-attention block. Weights are drawn once
/// from the seed and never updated.
#[derive(Clone, Debug)]
pub struct FrozenTextEncoder {
    d_model: usize,
    max_len: usize,
    token_embeddings: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
}

impl FrozenTextEncoder {
    pub fn new(vocab_size: usize, d_model: usize, max_len: usize, seed: u64) -> Result<Self> {
        if max_len < 2 {
            return Err(StepError::invalid("encoder max_len must allow CLS plus one token"));
        }
        let mut rng = derive_rng(seed, "text-encoder");
        let proj_std = 1.0 / (d_model as f64).sqrt();
        let mut mat = |rows, cols, std| Tensor::new(vec![rows, cols], normal_vec(&mut rng, rows * cols, std));
        Ok(FrozenTextEncoder {
            d_model,
            max_len,
            token_embeddings: mat(vocab_size, d_model, ENCODER_EMBED_STD)?,
            w_q: mat(d_model, d_model, proj_std)?,
            w_k: mat(d_model, d_model, proj_std)?,
            w_v: mat(d_model, d_model, proj_std)?,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    fn params(&self) -> [&Tensor; 4] {
        [&self.token_embeddings, &self.w_q, &self.w_k, &self.w_v]
    }

    /// SHA-256 over the little-endian f32 image of every weight.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            h.update(p.to_le_f32_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Encodes `[CLS] + ids`, keeping only the most recent tokens when the
    /// context exceeds `max_len - 1`.
    pub fn encode(&self, ids: &[usize]) -> Result<EncodedContext> {
        if ids.is_empty() {
            return Err(StepError::invalid("cannot encode an empty context"));
        }
        let keep = ids.len().min(self.max_len - 1);
        let ids = &ids[ids.len() - keep..];
        let d = self.d_model;
        let vocab = self.token_embeddings.rows();

        let mut x = Vec::with_capacity((keep + 1) * d);
        for (pos, &id) in std::iter::once(&CLS).chain(ids).enumerate() {
            if id >= vocab {
                return Err(StepError::invalid(format!("token id {id} outside vocabulary of {vocab}")));
            }
            let pe = sinusoidal_position(pos, d);
            x.extend(self.token_embeddings.row(id).iter().zip(pe).map(|(e, p)| e + p * ENCODER_EMBED_STD));
        }

        // No leaf requires a gradient, so nothing here can train the encoder.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![keep + 1, d], x)?);
        let wq = tape.constant(self.w_q.clone());
        let wk = tape.constant(self.w_k.clone());
        let wv = tape.constant(self.w_v.clone());
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
        let attn = tape.softmax_rows(logits)?;
        let mixed = tape.matmul(attn, v)?;
        let out = tape.add(x, mixed)?;

        let tokens = tape.value(out).clone();
        let cls = Tensor::vector(tokens.row(0).to_vec());
        Ok(EncodedContext { tokens, cls })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let enc = FrozenTextEncoder::new(20, 8, 16, 3).unwrap();
        let a = enc.encode(&[7]).unwrap();
        assert_eq!(a.tokens.shape(), &[2, 8]);
        assert_eq!(a.cls.shape(), &[8]);
        let b = enc.encode(&[7]).unwrap();
        assert_eq!(a, b);
        assert!(enc.encode(&[]).is_err());
    }

    #[test]
    fn positions_matter() {
        let enc = FrozenTextEncoder::new(20, 8, 16, 3).unwrap();
        let a = enc.encode(&[7, 9, 11]).unwrap();
        let b = enc.encode(&[9, 7, 11]).unwrap();
        assert_ne!(a.cls, b.cls);
    }

    #[test]
    fn left_truncation_keeps_recent_tokens() {
        let enc = FrozenTextEncoder::new(20, 8, 3, 3).unwrap();
        let long = enc.encode(&[6, 7, 8, 9]).unwrap();
        let short = enc.encode(&[8, 9]).unwrap();
        assert_eq!(long, short);
    }

    #[test]
    fn hash_depends_on_seed_only() {
        let a = FrozenTextEncoder::new(20, 8, 16, 3).unwrap();
        let b = FrozenTextEncoder::new(20, 8, 16, 3).unwrap();
        let c = FrozenTextEncoder::new(20, 8, 16, 4).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        assert_ne!(a.param_hash(), c.param_hash());
    }
}
