//! Tokenizer, vocabulary, item masking and string-match entity linking.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Result, StepError};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const CLS: usize = 3;
pub const ITEM: usize = 4;
pub const UNK: usize = 5;

pub const ITEM_TOKEN: &str = "[ITEM]";
const SPECIALS: [&str; 6] = ["[PAD]", "[BOS]", "[EOS]", "[CLS]", ITEM_TOKEN, "[UNK]"];

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '\''
}

/// Lowercased word/punctuation split. `[ITEM]` survives as one token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with(ITEM_TOKEN) {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(ITEM_TOKEN.to_string());
            rest = &rest[ITEM_TOKEN.len()..];
            continue;
        }
        if is_word_char(c) {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        rest = &rest[c.len_utf8()..];
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Token table. Ids 0-4 are PAD, BOS, EOS, CLS and `[ITEM]`; id 5 is UNK;
/// ordinary tokens follow in sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            for tok in tokenize(t) {
                if !SPECIALS.contains(&tok.as_str()) {
                    words.insert(tok);
                }
            }
        }
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens with spaces, dropping PAD/BOS/EOS/CLS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS | CLS))
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A byte span `[start, end)` of a text naming `entity`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub entity: usize,
}

fn boundary_ok(text: &str, start: usize, end: usize) -> bool {
    let before = text[..start].chars().next_back();
    let after = text[end..].chars().next();
    !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char)
}

/// Case-insensitive whole-word string matching of entity names, longest
/// names first, without overlaps. Results are ordered by position.
#[derive(Clone, Debug)]
pub struct EntityLinker {
    // (lowercased name, entity), longest first
    names: Vec<(String, usize)>,
}

impl EntityLinker {
    pub fn new<'a>(names: impl IntoIterator<Item = (usize, &'a str)>) -> Self {
        let mut names: Vec<(String, usize)> = names
            .into_iter()
            .filter(|(_, n)| !n.trim().is_empty())
            .map(|(e, n)| (n.to_ascii_lowercase(), e))
            .collect();
        names.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        EntityLinker { names }
    }

    pub fn find(&self, text: &str) -> Vec<Mention> {
        let lower = text.to_ascii_lowercase();
        let mut taken: Vec<Mention> = Vec::new();
        for (name, entity) in &self.names {
            let mut from = 0;
            while let Some(pos) = lower[from..].find(name.as_str()) {
                let start = from + pos;
                let end = start + name.len();
                let free = taken.iter().all(|m| end <= m.start || start >= m.end);
                if free && boundary_ok(&lower, start, end) {
                    taken.push(Mention {
                        start,
                        end,
                        entity: *entity,
                    });
                }
                from = start + lower[start..].chars().next().map_or(1, char::len_utf8);
            }
        }
        taken.sort_by_key(|m| m.start);
        taken
    }

    /// Distinct linked entities in order of first appearance.
    pub fn link(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for m in self.find(text) {
            if !out.contains(&m.entity) {
                out.push(m.entity);
            }
        }
        out
    }
}

/// Replaces every mention span with `[ITEM]`, inserting a space where the
/// marker would otherwise touch a neighbouring non-space character.
pub fn mask_items(text: &str, mentions: &[Mention]) -> Result<String> {
    let mut spans: Vec<Mention> = mentions.to_vec();
    spans.sort_by_key(|m| m.start);
    for w in spans.windows(2) {
        if w[1].start < w[0].end {
            return Err(StepError::invalid(format!(
                "overlapping item mentions at bytes {}..{} and {}..{}",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
    }
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for m in &spans {
        if m.start > m.end || m.end > text.len() || !text.is_char_boundary(m.start) || !text.is_char_boundary(m.end) {
            return Err(StepError::invalid(format!("invalid mention span {}..{}", m.start, m.end)));
        }
        out.push_str(&text[cursor..m.start]);
        if out.chars().next_back().is_some_and(|c| !c.is_whitespace()) {
            out.push(' ');
        }
        out.push_str(ITEM_TOKEN);
        if text[m.end..].chars().next().is_some_and(|c| !c.is_whitespace()) {
            out.push(' ');
        }
        cursor = m.end;
    }
    out.push_str(&text[cursor..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_basic() {
        assert_eq!(tokenize("Hello there."), vec!["hello", "there", "."]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("seen [ITEM]?"), vec!["seen", "[ITEM]", "?"]);
        assert_eq!(tokenize("I've"), vec!["i've"]);
    }

    #[test]
    fn vocabulary_reserves_specials() {
        let v = Vocabulary::build(["hello there .", "[ITEM] there"]);
        assert_eq!(v.id("[PAD]"), PAD);
        assert_eq!(v.id(ITEM_TOKEN), ITEM);
        assert_eq!(v.id("nope"), UNK);
        assert_eq!(v.len(), 6 + 3);
        assert_eq!(v.decode(&v.encode("Hello there.")), "hello there .");
    }

    #[test]
    fn mask_table_case() {
        let text = "Have you seen Vertigo?";
        let linker = EntityLinker::new([(7, "Vertigo")]);
        let m = linker.find(text);
        assert_eq!(m, vec![Mention { start: 14, end: 21, entity: 7 }]);
        assert_eq!(mask_items(text, &m).unwrap(), "Have you seen [ITEM] ?");
    }

    #[test]
    fn mask_without_mentions_is_identity() {
        assert_eq!(mask_items("hi there", &[]).unwrap(), "hi there");
    }

    #[test]
    fn overlapping_spans_rejected() {
        let a = Mention { start: 0, end: 4, entity: 0 };
        let b = Mention { start: 2, end: 6, entity: 1 };
        assert!(mask_items("abcdefgh", &[a, b]).is_err());
    }

    #[test]
    fn linker_prefers_longest_and_respects_word_boundaries() {
        let linker = EntityLinker::new([(0, "rear window"), (1, "window"), (2, "rear")]);
        assert_eq!(linker.link("I loved Rear Window and windows"), vec![0]);
        assert_eq!(linker.link("a window, then the rear"), vec![1, 2]);
    }
}
