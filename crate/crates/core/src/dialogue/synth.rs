//! Seeded synthetic knowledge graph and dialogue corpus.
//!
//! Items are linked to attribute entities (genres, people, places) by a few
//! relation types. A dialogue mentions one to three seed entities drawn
//! around an anchor item, and the gold recommendation is drawn from the
//! two-hop item neighborhood of those seeds with probability `p_signal`,
//! uniformly otherwise. Recommendation is therefore learnable from graph
//! structure alone.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, DialogueSample, Speaker, Turn};
use crate::error::{Result, StepError};
use crate::kg::KnowledgeGraph;
use crate::rng::{derive_rng, StepRng};

const TITLE_ADJ: [&str; 24] = [
    "silent", "golden", "broken", "hidden", "crimson", "frozen", "midnight", "wild", "lost", "iron", "velvet",
    "burning", "distant", "hollow", "savage", "gentle", "restless", "scarlet", "electric", "lonely", "northern",
    "secret", "shattered", "wandering",
];
const TITLE_NOUN: [&str; 24] = [
    "harbor", "empire", "river", "garden", "witness", "horizon", "kingdom", "letter", "mirror", "voyage", "summer",
    "frontier", "carnival", "lantern", "orchard", "station", "tempest", "citadel", "compass", "serenade", "meadow",
    "labyrinth", "monsoon", "paradox",
];
const GENRES: [&str; 16] = [
    "drama", "comedy", "thriller", "horror", "romance", "western", "musical", "documentary", "animation", "mystery",
    "fantasy", "noir", "adventure", "war", "biography", "satire",
];
const GENRE_MOD: [&str; 8] = ["dark", "classic", "indie", "teen", "epic", "slow", "cozy", "gritty"];
const FIRST: [&str; 20] = [
    "ada", "bruno", "clara", "dev", "elena", "farid", "greta", "hugo", "ines", "jonas", "kira", "leon", "mira",
    "nico", "olga", "pablo", "quinn", "rosa", "sven", "tala",
];
const LAST: [&str; 20] = [
    "abbot", "brandt", "castro", "dalton", "eriksen", "fontaine", "garner", "holm", "ivers", "jansen", "kowalski",
    "lindqvist", "moreau", "novak", "oyelaran", "petrov", "quill", "rivera", "sato", "thorne",
];
const PLACES: [&str; 16] = [
    "paris", "tokyo", "cairo", "lisbon", "oslo", "lagos", "lima", "vienna", "seoul", "dublin", "havana", "prague",
    "nairobi", "quito", "reykjavik", "zagreb",
];
const PLACE_MOD: [&str; 6] = ["old", "new", "little", "upper", "lower", "port"];
const RELATIONS: [&str; 6] = ["has_genre", "starring", "directed_by", "set_in", "written_by", "composed_by"];

const GREETINGS: [&str; 4] = [
    "Hello there. Can I help you find a good movie?",
    "Hi! What kind of movies do you like?",
    "Hey, looking for something to watch tonight?",
    "Good evening. What are you in the mood for?",
];
const FOLLOW_UPS: [&str; 3] = [
    "Nice. Anything else you enjoy?",
    "Great choice. Tell me more.",
    "Interesting, what else?",
];
const SINGLE_RESPONSES: [&str; 4] = [
    "Have you seen {0}? I am a big fan of it.",
    "How about {0}?",
    "You might enjoy {0}.",
    "I would watch {0}, it is great.",
];
const DOUBLE_RESPONSES: [&str; 2] = [
    "Have you seen {0} or {1}?",
    "Try {0}, and maybe {1} after that.",
];

/// Graph generator knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthKgConfig {
    pub entities: usize,
    pub relations: usize,
    pub items: usize,
    pub seed: u64,
}

/// Everything `gen-data` needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub kg: SynthKgConfig,
    pub dialogues: usize,
    pub p_signal: f64,
    /// Probability that a target turn carries a second gold item.
    pub p_second_gold: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kg: SynthKgConfig {
                entities: 200,
                relations: 4,
                items: 64,
                seed: 7,
            },
            dialogues: 500,
            p_signal: 0.9,
            p_second_gold: 0.1,
        }
    }
}

fn relation_name(r: usize) -> String {
    RELATIONS.get(r).map_or_else(|| format!("related_{r}"), |s| s.to_string())
}

fn pair_names(a: &[&str], b: &[&str], rng: &mut StepRng) -> Vec<String> {
    let mut all: Vec<String> = a.iter().flat_map(|x| b.iter().map(move |y| format!("{x} {y}"))).collect();
    all.shuffle(rng);
    all
}

/// Name pool for attributes of relation `r`, in draw order.
fn attribute_pool(r: usize, rng: &mut StepRng) -> Vec<String> {
    match RELATIONS.get(r).copied() {
        Some("has_genre") => {
            let mut base: Vec<String> = GENRES.iter().map(|s| s.to_string()).collect();
            base.shuffle(rng);
            base.extend(pair_names(&GENRE_MOD, &GENRES, rng));
            base
        }
        Some("set_in") => {
            let mut base: Vec<String> = PLACES.iter().map(|s| s.to_string()).collect();
            base.shuffle(rng);
            base.extend(pair_names(&PLACE_MOD, &PLACES, rng));
            base
        }
        _ => pair_names(&FIRST, &LAST, rng),
    }
}

/// Builds the item/attribute graph, then round-trips it through the TSV
/// form so ids follow first-appearance order.
pub fn generate_kg(cfg: &SynthKgConfig) -> Result<KnowledgeGraph> {
    if cfg.relations == 0 {
        return Err(StepError::invalid("need at least one relation"));
    }
    if cfg.items < 20 {
        return Err(StepError::invalid(format!("need at least 20 items, got {}", cfg.items)));
    }
    if cfg.entities < cfg.items + cfg.relations {
        return Err(StepError::invalid(format!(
            "{} entities cannot hold {} items plus one attribute per relation",
            cfg.entities, cfg.items
        )));
    }
    let mut rng = derive_rng(cfg.seed, "synth-kg");

    let mut used: HashSet<String> = HashSet::new();
    let fresh = |candidate: String, used: &mut HashSet<String>| {
        let mut name = candidate.clone();
        let mut k = 2;
        while used.contains(&name) {
            name = format!("{candidate} {k}");
            k += 1;
        }
        used.insert(name.clone());
        name
    };

    let titles = pair_names(&TITLE_ADJ, &TITLE_NOUN, &mut rng);
    let items: Vec<String> = (0..cfg.items)
        .map(|i| {
            let t = titles[i % titles.len()].clone();
            fresh(format!("the {t}"), &mut used)
        })
        .collect();

    let n_attr = cfg.entities - cfg.items;
    let mut attrs: Vec<Vec<String>> = Vec::new();
    for r in 0..cfg.relations {
        let count = n_attr / cfg.relations + usize::from(r < n_attr % cfg.relations);
        let pool = attribute_pool(r, &mut rng);
        let names = (0..count).map(|k| fresh(pool[k % pool.len()].clone(), &mut used)).collect();
        attrs.push(names);
    }

    // item -> relation -> attribute indices
    let mut links: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); cfg.relations]; cfg.items];
    for (r, pool) in attrs.iter().enumerate() {
        let mut order: Vec<usize> = (0..cfg.items).collect();
        order.shuffle(&mut rng);
        for k in 0..pool.len() {
            links[order[k % cfg.items]][r].push(k);
        }
        for item_links in links.iter_mut() {
            if item_links[r].is_empty() {
                item_links[r].push(rng.random_range(0..pool.len()));
            }
        }
    }

    let mut g = KnowledgeGraph::new();
    for (i, name) in items.iter().enumerate() {
        for (r, ks) in links[i].iter().enumerate() {
            for &k in ks {
                g.add_named_triple(name, &relation_name(r), &attrs[r][k]);
            }
        }
    }
    let item_ids: Vec<usize> = items.iter().map(|n| g.entity_id(n).expect("item has triples")).collect();
    g.set_items(&item_ids)?;

    let (mut canon, _) = KnowledgeGraph::parse_tsv(&g.to_tsv(), Path::new("<generated>"))?;
    canon.parse_items(&g.items_text(), Path::new("<generated>"))?;
    Ok(canon)
}

fn fill(template: &str, names: &[&str]) -> String {
    let mut out = template.to_string();
    for (k, n) in names.iter().enumerate() {
        out = out.replace(&format!("{{{k}}}"), n);
    }
    out
}

fn preference_phrase(g: &KnowledgeGraph, e: usize, rel: Option<&str>, rng: &mut StepRng) -> String {
    let name = g.entity_name(e);
    if g.is_item(e) {
        let t = ["I have seen {0}", "I loved {0}", "{0} was great"];
        return fill(t.choose(rng).expect("non-empty"), &[name]);
    }
    let t: &[&str] = match rel {
        Some("has_genre") => &["I like {0} movies", "I am into {0}", "{0} is my favorite genre"],
        Some("starring") => &["I enjoy films with {0}", "{0} is a great actor"],
        Some("directed_by") => &["anything directed by {0} is good", "I admire {0} as a director"],
        Some("set_in") => &["I like stories set in {0}", "movies in {0} are nice"],
        _ => &["I am a fan of {0}", "I like {0}"],
    };
    fill(t.choose(rng).expect("non-empty"), &[name])
}

/// Dialogues grounded in `g`. Each record has one target recommender turn.
pub fn generate_synthetic_corpus(
    g: &KnowledgeGraph,
    n_dialogues: usize,
    p_signal: f64,
    p_second_gold: f64,
    seed: u64,
) -> Result<Vec<DialogueSample>> {
    if g.num_items() < 20 {
        return Err(StepError::invalid(format!(
            "synthetic corpus needs at least 20 items, graph has {}",
            g.num_items()
        )));
    }
    if !(0.0..=1.0).contains(&p_signal) || !(0.0..=1.0).contains(&p_second_gold) {
        return Err(StepError::invalid("probabilities must lie in [0, 1]"));
    }
    let mut rng = derive_rng(seed, "synth-corpus");
    let adj = g.undirected_adjacency();
    // relation of the edge between an item and a neighboring attribute
    let mut edge_rel: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for t in g.triples() {
        edge_rel.entry((t.head, t.tail)).or_insert(t.relation);
        edge_rel.entry((t.tail, t.head)).or_insert(t.relation);
    }
    let items = g.items();

    let mut out = Vec::with_capacity(n_dialogues);
    for d in 0..n_dialogues {
        let anchor = *items.choose(&mut rng).expect("items non-empty");
        let mut attrs: Vec<usize> = adj[anchor].iter().copied().filter(|&e| !g.is_item(e)).collect();
        attrs.shuffle(&mut rng);
        let n_seeds = rng.random_range(1..=3usize).min(attrs.len().max(1));
        let mut seeds: Vec<usize> = attrs.into_iter().take(n_seeds).collect();
        // Sometimes the user names a related item instead of one attribute.
        if rng.random_bool(0.3) {
            let two_hop: Vec<usize> = adj[anchor]
                .iter()
                .flat_map(|&a| adj[a].iter().copied())
                .filter(|&e| g.is_item(e) && e != anchor)
                .collect();
            if let Some(&seen) = two_hop.choose(&mut rng) {
                if seeds.len() == 3 || seeds.is_empty() {
                    seeds.pop();
                }
                seeds.push(seen);
            }
        }
        if seeds.is_empty() {
            seeds.push(anchor);
        }

        let mentioned: HashSet<usize> = seeds.iter().copied().collect();
        let gold_count = if rng.random_bool(p_second_gold) { 2 } else { 1 };
        let mut gold = Vec::new();
        for _ in 0..gold_count {
            let g_item = if rng.random_bool(p_signal) {
                // weight = number of seeds within two hops
                let mut weights: BTreeMap<usize, usize> = BTreeMap::new();
                for &s in &seeds {
                    let mut reach: HashSet<usize> = HashSet::new();
                    for &a in &adj[s] {
                        reach.insert(a);
                        reach.extend(adj[a].iter().copied());
                    }
                    for e in reach {
                        if g.is_item(e) && !mentioned.contains(&e) && !gold.contains(&e) {
                            *weights.entry(e).or_insert(0) += 1;
                        }
                    }
                }
                let cands: Vec<(usize, usize)> = weights.into_iter().collect();
                cands
                    .choose_weighted(&mut rng, |c| (c.1 * c.1) as f64)
                    .ok()
                    .map(|c| c.0)
            } else {
                None
            };
            let g_item = match g_item {
                Some(i) => i,
                None => {
                    let pool: Vec<usize> = items
                        .iter()
                        .copied()
                        .filter(|e| !mentioned.contains(e) && !gold.contains(e))
                        .collect();
                    *pool.choose(&mut rng).expect("at least 20 items")
                }
            };
            gold.push(g_item);
        }

        let rel_of = |e: usize| -> Option<String> {
            edge_rel
                .get(&(anchor, e))
                .map(|&r| g.relation_name(r).to_string())
        };
        let mut turns = vec![Turn {
            speaker: Speaker::Recommender,
            text: GREETINGS.choose(&mut rng).expect("non-empty").to_string(),
            items: vec![],
            entities: vec![],
        }];
        let split_at = if seeds.len() > 1 && rng.random_bool(0.5) {
            1
        } else {
            seeds.len()
        };
        for (chunk_idx, chunk) in [&seeds[..split_at], &seeds[split_at..]].iter().enumerate() {
            if chunk.is_empty() {
                continue;
            }
            if chunk_idx == 1 {
                turns.push(Turn {
                    speaker: Speaker::Recommender,
                    text: FOLLOW_UPS.choose(&mut rng).expect("non-empty").to_string(),
                    items: vec![],
                    entities: vec![],
                });
            }
            let phrases: Vec<String> = chunk
                .iter()
                .map(|&e| preference_phrase(g, e, rel_of(e).as_deref(), &mut rng))
                .collect();
            turns.push(Turn {
                speaker: Speaker::User,
                text: format!("{}.", phrases.join(", and ")),
                items: chunk.iter().copied().filter(|&e| g.is_item(e)).collect(),
                entities: chunk.iter().copied().filter(|&e| !g.is_item(e)).collect(),
            });
        }
        let names: Vec<&str> = gold.iter().map(|&e| g.entity_name(e)).collect();
        let template = if gold.len() == 2 {
            DOUBLE_RESPONSES.choose(&mut rng)
        } else {
            SINGLE_RESPONSES.choose(&mut rng)
        }
        .expect("non-empty");
        let target_turn = turns.len();
        turns.push(Turn {
            speaker: Speaker::Recommender,
            text: fill(template, &names),
            items: gold,
            entities: vec![],
        });
        out.push(DialogueSample {
            id: format!("d{d:05}"),
            turns,
            target_turn,
        });
    }
    Ok(out)
}

/// Seeded 80/10/10 train/valid/test split.
pub fn split_corpus(samples: Vec<DialogueSample>, seed: u64) -> Corpus {
    let mut rng = derive_rng(seed, "synth-split");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n = samples.len();
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let mut slots: Vec<Option<DialogueSample>> = samples.into_iter().map(Some).collect();
    let mut take = |range: &[usize]| -> Vec<DialogueSample> {
        let mut idx = range.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| slots[i].take().expect("each index once")).collect()
    };
    Corpus {
        train: take(&order[..n_train]),
        valid: take(&order[n_train..n_train + n_valid]),
        test: take(&order[n_train + n_valid..]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> KnowledgeGraph {
        generate_kg(&SynthKgConfig {
            entities: 60,
            relations: 3,
            items: 20,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn kg_shape() {
        let g = small();
        assert_eq!(g.num_entities(), 60);
        assert_eq!(g.num_relations(), 3);
        assert_eq!(g.num_items(), 20);
    }

    #[test]
    fn rejects_tiny_graphs() {
        let cfg = SynthKgConfig {
            entities: 30,
            relations: 2,
            items: 10,
            seed: 1,
        };
        assert!(generate_kg(&cfg).is_err());
    }

    #[test]
    fn corpus_is_valid_and_sized() {
        let g = small();
        let c = generate_synthetic_corpus(&g, 100, 0.9, 0.1, 3).unwrap();
        assert_eq!(c.len(), 100);
        for s in &c {
            s.validate(&g).unwrap();
            assert!(!s.gold_items().is_empty());
        }
        let split = split_corpus(c, 3);
        assert_eq!((split.train.len(), split.valid.len(), split.test.len()), (80, 10, 10));
    }
}
