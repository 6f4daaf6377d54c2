//! Prefix heads over a frozen decoder.
//!
//! The conversation head prepends a refined prefix and the pooled fusion row
//! to the dialogue context and trains on next-token loss over the response.
//! The recommendation head prepends its own prefix and an adjusted fusion row
//! to the response template and ranks items by the last hidden state.

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dialogue::{sinusoidal_position, BOS, CLS, EOS, ITEM_TOKEN, PAD};
use crate::error::{Result, StepError};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{derive_rng, normal_vec};

/// Learnable prefix rows plus their residual refinement MLP, bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct PrefixHead {
    /// `[P, D]`.
    pub prefix: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl PrefixHead {
    /// `tanh(E W1 + b1) W2 + b2 + E`, applied row-wise.
    pub fn refine(&self, tape: &mut Tape) -> Result<Var> {
        let h = tape.matmul(self.prefix, self.w1)?;
        let h = tape.add_row(h, self.b1)?;
        let h = tape.tanh(h);
        let h = tape.matmul(h, self.w2)?;
        let h = tape.add_row(h, self.b2)?;
        tape.add(h, self.prefix)
    }
}

/// Which rows feed the secondary fusion term of the recommendation prompt.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SecondaryFusion {
    /// Mean graph embedding of entities mentioned in the context.
    #[default]
    MentionedMean,
    /// Mean graph embedding of the gold items while training; falls back to
    /// the mentioned-entity mean when labels are unavailable.
    GoldItem,
}

/// Frozen stand-in language model: tied token embeddings, sinusoidal
/// positions, causal residual self-attention blocks and a tied output
/// projection. Weights are drawn from the seed and never updated.
#[derive(Clone, Debug)]
pub struct FrozenDecoder {
    d_model: usize,
    max_len: usize,
    token_embeddings: Tensor,
    blocks: Vec<[Tensor; 3]>,
}

/// Frozen weights placed on a tape as constants.
#[derive(Clone, Debug)]
pub struct DecoderBinding {
    pub token_embeddings: Var,
    /// `[D, V]` output projection (transposed embeddings).
    pub output: Var,
    pub blocks: Vec<[Var; 3]>,
}

/// Embedding scale of decoder tokens and positions. Kept small so prompt
/// rows dominate the residual stream.
const DECODER_EMBED_STD: f64 = 0.005;
const POSITION_SCALE: f64 = 0.005;
/// Noise around the identity in each value map, relative to `1/sqrt(D)`.
const VALUE_NOISE: f64 = 0.1;

impl FrozenDecoder {
    pub fn new(vocab_size: usize, d_model: usize, max_len: usize, layers: usize, seed: u64) -> Result<Self> {
        if vocab_size <= EOS || d_model == 0 || max_len < 4 {
            return Err(StepError::invalid(format!(
                "decoder needs vocab > {EOS}, d > 0 and max_len >= 4 (got {vocab_size}, {d_model}, {max_len})"
            )));
        }
        let mut rng = derive_rng(seed, "decoder");
        let proj_std = 1.0 / (d_model as f64).sqrt();
        let token_embeddings = Tensor::new(
            vec![vocab_size, d_model],
            normal_vec(&mut rng, vocab_size * d_model, DECODER_EMBED_STD),
        )?;
        let mut blocks = Vec::with_capacity(layers);
        for _ in 0..layers {
            let mut mat = |std: f64| Tensor::new(vec![d_model, d_model], normal_vec(&mut rng, d_model * d_model, std));
            // Values stay close to the identity so each block mostly mixes
            // positions instead of rotating the prompt features.
            let mut v = mat(proj_std * VALUE_NOISE)?;
            for i in 0..d_model {
                v.data_mut()[i * d_model + i] += 1.0;
            }
            blocks.push([mat(proj_std)?, mat(proj_std)?, v]);
        }
        Ok(FrozenDecoder {
            d_model,
            max_len,
            token_embeddings,
            blocks,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embeddings.rows()
    }

    /// SHA-256 over the little-endian f32 image of every weight.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.token_embeddings.to_le_f32_bytes());
        for block in &self.blocks {
            for w in block {
                h.update(w.to_le_f32_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<DecoderBinding> {
        let token_embeddings = tape.constant(self.token_embeddings.clone());
        let output = tape.constant(self.token_embeddings.transpose2()?);
        let blocks = self
            .blocks
            .iter()
            .map(|[q, k, v]| [tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone())])
            .collect();
        Ok(DecoderBinding {
            token_embeddings,
            output,
            blocks,
        })
    }

    /// Hidden states `[T, D]` for an input embedding sequence `[T, D]`.
    pub fn forward(&self, tape: &mut Tape, bind: &DecoderBinding, inputs: Var) -> Result<Var> {
        let t = tape.value(inputs).rows();
        let d = self.d_model;
        if tape.value(inputs).cols() != d {
            return Err(StepError::shape("decoder input", tape.value(inputs).shape(), &[t, d]));
        }
        if t == 0 || t > self.max_len {
            return Err(StepError::invalid(format!("decoder sequence of {t} rows exceeds max_len {}", self.max_len)));
        }
        let mut pos = Vec::with_capacity(t * d);
        for p in 0..t {
            pos.extend(sinusoidal_position(p, d).into_iter().map(|x| x * POSITION_SCALE));
        }
        let pos = tape.constant(Tensor::new(vec![t, d], pos)?);
        let mask: Vec<f64> = (0..t * t)
            .map(|i| if i % t > i / t { f64::NEG_INFINITY } else { 0.0 })
            .collect();
        let mask = tape.constant(Tensor::new(vec![t, t], mask)?);
        let inv_sqrt = 1.0 / (d as f64).sqrt();

        let mut x = tape.add(inputs, pos)?;
        for [wq, wk, wv] in &bind.blocks {
            let q = tape.matmul(x, *wq)?;
            let k = tape.matmul(x, *wk)?;
            let v = tape.matmul(x, *wv)?;
            let kt = tape.transpose(k)?;
            let logits = tape.matmul(q, kt)?;
            let logits = tape.scale(logits, inv_sqrt);
            let logits = tape.add(logits, mask)?;
            let attn = tape.softmax_rows(logits)?;
            let mixed = tape.matmul(attn, v)?;
            x = tape.add(x, mixed)?;
        }
        layer_norm(tape, x)
    }

    /// Next-token logits `[R, V]` for hidden rows `[R, D]`.
    pub fn logits(&self, tape: &mut Tape, bind: &DecoderBinding, hidden: Var) -> Result<Var> {
        tape.matmul(hidden, bind.output)
    }

    pub fn embed(&self, tape: &mut Tape, bind: &DecoderBinding, ids: &[usize]) -> Result<Var> {
        tape.gather_rows(bind.token_embeddings, ids)
    }
}

/// Row-wise layer normalization without gain or bias.
pub fn layer_norm(tape: &mut Tape, x: Var) -> Result<Var> {
    let d = tape.value(x).cols();
    let centering: Vec<f64> = (0..d * d)
        .map(|i| if i / d == i % d { 1.0 } else { 0.0 } - 1.0 / d as f64)
        .collect();
    let c = tape.constant(Tensor::new(vec![d, d], centering)?);
    let centered = tape.matmul(x, c)?;
    let unit = tape.l2_normalize(centered, 1e-12);
    Ok(tape.scale(unit, (d as f64).sqrt()))
}

fn check_prompt(tape: &Tape, prefix: Var, fused: Var) -> Result<usize> {
    let d = tape.value(prefix).cols();
    let f = tape.value(fused);
    if f.numel() != d || f.rows() != 1 {
        return Err(StepError::shape("prompt fused row", f.shape(), &[1, d]));
    }
    Ok(d)
}

/// `[P ; fused]`, the conversation prompt before context tokens.
pub fn assemble_conv_prompt(tape: &mut Tape, refined_prefix: Var, fused: Var) -> Result<Var> {
    check_prompt(tape, refined_prefix, fused)?;
    let fused = tape.reshape(fused, &[1, tape.value(refined_prefix).cols()])?;
    tape.concat_rows(&[refined_prefix, fused])
}

/// Fits `prompt + context + [BOS] + response + [EOS]` into `max_len`
/// positions: the context loses its oldest tokens first, then the response
/// is cut with a warning.
pub fn fit_conv_lengths<'a>(
    prompt_len: usize,
    context: &'a [usize],
    response: &'a [usize],
    max_len: usize,
) -> Result<(&'a [usize], &'a [usize])> {
    // The EOS target is predicted from the last response row, so it costs no
    // input position.
    let budget = max_len
        .checked_sub(prompt_len + 1)
        .filter(|&b| b >= 1)
        .ok_or_else(|| StepError::invalid(format!("prompt of {prompt_len} rows leaves no room in {max_len}")))?;
    let resp = if response.len() > budget {
        warn!("response of {} tokens truncated to {budget}", response.len());
        &response[..budget]
    } else {
        response
    };
    let ctx_room = budget - resp.len();
    let ctx = &context[context.len() - context.len().min(ctx_room)..];
    Ok((ctx, resp))
}

/// Summed next-token negative log-likelihood over `response + [EOS]` and the
/// number of predicted tokens. Prompt and context positions carry no loss.
pub fn conv_nll(
    tape: &mut Tape,
    decoder: &FrozenDecoder,
    bind: &DecoderBinding,
    prompt: Var,
    context: &[usize],
    response: &[usize],
) -> Result<(Var, usize)> {
    if response.is_empty() {
        return Err(StepError::invalid("gold response is empty"));
    }
    let p = tape.value(prompt).rows();
    let (ctx, resp) = fit_conv_lengths(p, context, response, decoder.max_len())?;
    let mut ids: Vec<usize> = ctx.to_vec();
    ids.push(BOS);
    ids.extend_from_slice(resp);
    let tokens = decoder.embed(tape, bind, &ids)?;
    let seq = tape.concat_rows(&[prompt, tokens])?;
    let hidden = decoder.forward(tape, bind, seq)?;

    let first = p + ctx.len();
    let rows: Vec<usize> = (first..first + resp.len() + 1).collect();
    let targets: Vec<usize> = resp.iter().copied().chain(std::iter::once(EOS)).collect();
    let picked = tape.gather_rows(hidden, &rows)?;
    let logits = decoder.logits(tape, bind, picked)?;
    let logp = tape.log_softmax_rows(logits)?;
    let v = decoder.vocab_size();
    let flat: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * v + t).collect();
    let chosen = tape.select(logp, &flat)?;
    let total = tape.sum_all(chosen);
    Ok((tape.scale(total, -1.0), targets.len()))
}

/// Per-token mean of several [`conv_nll`] results.
pub fn mean_token_loss(tape: &mut Tape, parts: &[(Var, usize)]) -> Result<Var> {
    let count: usize = parts.iter().map(|p| p.1).sum();
    if count == 0 {
        return Err(StepError::invalid("no response tokens in batch"));
    }
    let mut total = parts[0].0;
    for &(v, _) in &parts[1..] {
        total = tape.add(total, v)?;
    }
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// Greedy decoding from `prompt + context + [BOS]`. Returns generated token
/// ids without the terminating EOS.
pub fn greedy_decode(
    decoder: &FrozenDecoder,
    prompt: &Tensor,
    context: &[usize],
    max_new: usize,
) -> Result<Vec<usize>> {
    let p = prompt.rows();
    let room = decoder
        .max_len()
        .checked_sub(p + 1)
        .ok_or_else(|| StepError::invalid("prompt longer than decoder max_len"))?;
    let max_new = max_new.min(room);
    let ctx = &context[context.len() - context.len().min(room - max_new)..];
    let mut ids: Vec<usize> = ctx.to_vec();
    ids.push(BOS);
    let mut out = Vec::new();
    while out.len() < max_new {
        let mut tape = Tape::new();
        let bind = decoder.bind(&mut tape)?;
        let prompt_v = tape.constant(prompt.clone());
        let tokens = decoder.embed(&mut tape, &bind, &ids)?;
        let seq = tape.concat_rows(&[prompt_v, tokens])?;
        let hidden = decoder.forward(&mut tape, &bind, seq)?;
        let last = tape.gather_rows(hidden, &[p + ids.len() - 1])?;
        let logits = decoder.logits(&mut tape, &bind, last)?;
        let scores = tape.value(logits).data();
        let mut best = EOS;
        for (id, &s) in scores.iter().enumerate() {
            if matches!(id, PAD | BOS | CLS) {
                continue;
            }
            if s > scores[best] {
                best = id;
            }
        }
        if best == EOS {
            break;
        }
        out.push(best);
        ids.push(best);
    }
    Ok(out)
}

/// Joins tokens into text, replacing the k-th `[ITEM]` with `names[k]`.
/// Placeholders beyond the ranked list are kept literally.
pub fn substitute_items(tokens: &[String], names: &[&str]) -> String {
    let mut k = 0;
    let filled: Vec<String> = tokens
        .iter()
        .map(|t| {
            if t == ITEM_TOKEN {
                let out = match names.get(k) {
                    Some(n) => n.to_string(),
                    None => {
                        warn!("more [ITEM] placeholders than ranked items");
                        t.clone()
                    }
                };
                k += 1;
                out
            } else {
                t.clone()
            }
        })
        .collect();
    crate::dialogue::detokenize(&filled)
}

/// `H' = fused + lambda * extra`. With `lambda == 0` the fused row is
/// returned untouched.
pub fn secondary_fusion(tape: &mut Tape, fused: Var, extra: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(fused);
    }
    let d = tape.value(fused).numel();
    let extra = tape.reshape(extra, &[1, d])?;
    let fused = tape.reshape(fused, &[1, d])?;
    let scaled = tape.scale(extra, lambda);
    tape.add(fused, scaled)
}

/// `[P ; H' ; S]` where `S` is the embedded template followed by EOS.
pub fn assemble_rec_prompt(
    tape: &mut Tape,
    decoder: &FrozenDecoder,
    bind: &DecoderBinding,
    refined_prefix: Var,
    adjusted: Var,
    template: &[usize],
) -> Result<Var> {
    let d = check_prompt(tape, refined_prefix, adjusted)?;
    let p = tape.value(refined_prefix).rows();
    let room = decoder
        .max_len()
        .checked_sub(p + 2)
        .ok_or_else(|| StepError::invalid("recommendation prefix longer than decoder max_len"))?;
    let keep = template.len().min(room);
    if keep < template.len() {
        warn!("response template of {} tokens truncated to {keep}", template.len());
    }
    let mut ids = template[..keep].to_vec();
    ids.push(EOS);
    let adjusted = tape.reshape(adjusted, &[1, d])?;
    let tokens = decoder.embed(tape, bind, &ids)?;
    tape.concat_rows(&[refined_prefix, adjusted, tokens])
}

/// Softmax over items of `last hidden . item_rows^T`, shape `[1, M]`.
pub fn rank_items(
    tape: &mut Tape,
    decoder: &FrozenDecoder,
    bind: &DecoderBinding,
    prompt: Var,
    item_rows: Var,
) -> Result<Var> {
    if tape.value(item_rows).rows() == 0 || tape.value(item_rows).numel() == 0 {
        return Err(StepError::invalid("empty item table"));
    }
    let t = tape.value(prompt).rows();
    let hidden = decoder.forward(tape, bind, prompt)?;
    let last = tape.gather_rows(hidden, &[t - 1])?;
    let items_t = tape.transpose(item_rows)?;
    let logits = tape.matmul(last, items_t)?;
    tape.softmax_rows(logits)
}

pub const PROB_CLAMP: f64 = 1e-7;

/// `-(1/N) sum_n sum_m [y log p + (1 - y) log(1 - p)]` on `probs: [N, M]`,
/// with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn rec_loss(tape: &mut Tape, probs: Var, gold: &[Vec<usize>]) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    let (n, m) = (tape.value(probs).rows(), tape.value(probs).cols());
    if n != gold.len() {
        return Err(StepError::shape("rec_loss", &shape, &[gold.len(), m]));
    }
    let mut y = vec![0.0; n * m];
    for (i, g) in gold.iter().enumerate() {
        for &item in g {
            if item >= m {
                return Err(StepError::invalid(format!("gold item slot {item} outside {m} items")));
            }
            y[i * m + item] = 1.0;
        }
    }
    let y = Tensor::new(vec![n, m], y)?;
    let not_y = Tensor::new(vec![n, m], y.data().iter().map(|v| 1.0 - v).collect())?;
    let y = tape.constant(y);
    let not_y = tape.constant(not_y);
    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let log_p = tape.ln(p)?;
    let q = tape.one_minus(p);
    let log_q = tape.ln(q)?;
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(not_y, log_q)?;
    let s = tape.add(a, b)?;
    let total = tape.sum_all(s);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Indices of the `k` highest scores, ties broken by lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}
