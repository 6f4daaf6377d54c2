//! Recall@k for ranking and corpus-level distinct-n for generation.

use std::collections::HashSet;

use log::warn;

use crate::error::{Result, StepError};

/// Mean over turns of `|gold ∩ top-k| / |gold|`, skipping turns with empty
/// gold. `k` larger than a list is clamped to its length.
pub fn recall_at_k(ranked: &[Vec<usize>], gold: &[Vec<usize>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(StepError::invalid("recall@k needs k >= 1"));
    }
    if ranked.len() != gold.len() {
        return Err(StepError::invalid(format!(
            "{} ranked lists for {} gold sets",
            ranked.len(),
            gold.len()
        )));
    }
    let mut total = 0.0;
    let mut turns = 0usize;
    let mut clamped = false;
    for (list, g) in ranked.iter().zip(gold) {
        if g.is_empty() {
            continue;
        }
        if k > list.len() {
            clamped = true;
        }
        let top = &list[..k.min(list.len())];
        let hits = g.iter().filter(|x| top.contains(x)).count();
        total += hits as f64 / g.len() as f64;
        turns += 1;
    }
    if clamped {
        warn!("recall@{k} clamped to the ranked list length");
    }
    Ok(if turns == 0 { 0.0 } else { total / turns as f64 })
}

/// Unique word n-grams over all responses divided by the total n-gram count.
pub fn distinct_n(responses: &[Vec<String>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(StepError::invalid("distinct-n needs n >= 1"));
    }
    if responses.is_empty() {
        warn!("distinct-{n} over an empty corpus");
        return Ok(0.0);
    }
    let mut unique: HashSet<&[String]> = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        if r.len() < n {
            continue;
        }
        for gram in r.windows(n) {
            unique.insert(gram);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { unique.len() as f64 / total as f64 })
}

/// Whitespace word split used for distinct-n.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}
