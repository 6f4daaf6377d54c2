//! Knowledge graph store and the relational graph convolution layer.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Result, StepError};
use crate::numerics::{Activation, Tape, Var};

/// Suffix given to generated inverse relations.
pub const INVERSE_SUFFIX: &str = "~inv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct KgStats {
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub duplicates_dropped: usize,
}

/// Entities, relations and triples with ids assigned by first appearance.
/// Items are the flagged subset of entities that can be recommended; their
/// order defines the item vocabulary used by ranking.
#[derive(Clone, Debug, Default)]
pub struct KnowledgeGraph {
    entities: Vec<String>,
    entity_ids: HashMap<String, usize>,
    relations: Vec<String>,
    relation_ids: HashMap<String, usize>,
    triples: Vec<Triple>,
    triple_set: HashSet<Triple>,
    items: Vec<usize>,
    item_slot: HashMap<usize, usize>,
    // in_neighbors[r][n]: sorted heads j with (j, r, n) in T
    in_neighbors: Vec<Vec<Vec<usize>>>,
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities
            && self.relations == other.relations
            && self.triples == other.triples
            && self.items == other.items
    }
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_entity(&mut self, name: &str) -> usize {
        if let Some(&id) = self.entity_ids.get(name) {
            return id;
        }
        let id = self.entities.len();
        self.entities.push(name.to_string());
        self.entity_ids.insert(name.to_string(), id);
        for per_rel in &mut self.in_neighbors {
            per_rel.push(Vec::new());
        }
        id
    }

    pub fn add_relation(&mut self, name: &str) -> usize {
        if let Some(&id) = self.relation_ids.get(name) {
            return id;
        }
        let id = self.relations.len();
        self.relations.push(name.to_string());
        self.relation_ids.insert(name.to_string(), id);
        self.in_neighbors.push(vec![Vec::new(); self.entities.len()]);
        id
    }

    /// Inserts a triple; returns `false` if it was already present.
    pub fn add_triple(&mut self, head: usize, relation: usize, tail: usize) -> Result<bool> {
        self.check_entity(head)?;
        self.check_entity(tail)?;
        self.check_relation(relation)?;
        let t = Triple { head, relation, tail };
        if !self.triple_set.insert(t) {
            return Ok(false);
        }
        self.triples.push(t);
        let list = &mut self.in_neighbors[relation][tail];
        if let Err(pos) = list.binary_search(&head) {
            list.insert(pos, head);
        }
        Ok(true)
    }

    pub fn add_named_triple(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        let h = self.add_entity(head);
        let r = self.add_relation(relation);
        let t = self.add_entity(tail);
        self.add_triple(h, r, t).expect("ids were just created")
    }

    /// Flags the given entities as items, in the given order.
    pub fn set_items(&mut self, item_entities: &[usize]) -> Result<()> {
        let mut slot = HashMap::new();
        for (i, &e) in item_entities.iter().enumerate() {
            self.check_entity(e)?;
            if slot.insert(e, i).is_some() {
                return Err(StepError::Validation(format!(
                    "item {} listed twice",
                    self.entities[e]
                )));
            }
        }
        self.items = item_entities.to_vec();
        self.item_slot = slot;
        Ok(())
    }

    fn check_entity(&self, id: usize) -> Result<()> {
        if id >= self.entities.len() {
            return Err(StepError::invalid(format!("unknown entity id {id}")));
        }
        Ok(())
    }

    fn check_relation(&self, id: usize) -> Result<()> {
        if id >= self.relations.len() {
            return Err(StepError::invalid(format!("unknown relation id {id}")));
        }
        Ok(())
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_name(&self, id: usize) -> &str {
        &self.entities[id]
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entities
    }

    pub fn relation_name(&self, id: usize) -> &str {
        &self.relations[id]
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_ids.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_ids.get(name).copied()
    }

    /// Item entity ids in item-vocabulary order.
    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Position of an entity in the item vocabulary, if it is an item.
    pub fn item_slot(&self, entity: usize) -> Option<usize> {
        self.item_slot.get(&entity).copied()
    }

    pub fn is_item(&self, entity: usize) -> bool {
        self.item_slot.contains_key(&entity)
    }

    pub fn stats(&self) -> KgStats {
        KgStats {
            entities: self.entities.len(),
            relations: self.relations.len(),
            triples: self.triples.len(),
            duplicates_dropped: 0,
        }
    }

    /// Sorted in-neighbors of `n` under relation `r`: every `j` with
    /// `(j, r, n)` in the triple set.
    pub fn neighbors(&self, n: usize, r: usize) -> Result<&[usize]> {
        self.check_entity(n)?;
        self.check_relation(r)?;
        Ok(&self.in_neighbors[r][n])
    }

    /// Per-entity in-neighbor lists for relation `r`.
    pub fn relation_groups(&self, r: usize) -> &[Vec<usize>] {
        &self.in_neighbors[r]
    }

    /// Undirected adjacency over all relations, sorted and deduplicated.
    pub fn undirected_adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.entities.len()];
        for t in &self.triples {
            adj[t.head].push(t.tail);
            adj[t.tail].push(t.head);
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// A copy with one extra relation `r~inv` per relation carrying every
    /// triple reversed (tail to head).
    pub fn with_inverse_relations(&self) -> KnowledgeGraph {
        let mut g = self.clone();
        let base = self.relations.len();
        for name in &self.relations {
            g.add_relation(&format!("{name}{INVERSE_SUFFIX}"));
        }
        for t in &self.triples {
            g.add_triple(t.tail, base + t.relation, t.head)
                .expect("ids valid in the source graph");
        }
        g
    }

    /// The same graph with entities renumbered: old id `i` becomes `perm[i]`.
    pub fn permute_entities(&self, perm: &[usize]) -> Result<KnowledgeGraph> {
        if perm.len() != self.entities.len() {
            return Err(StepError::invalid("permutation length differs from |E|"));
        }
        let mut names = vec![String::new(); perm.len()];
        for (old, &new) in perm.iter().enumerate() {
            names[new] = self.entities[old].clone();
        }
        let mut g = KnowledgeGraph::new();
        for n in &names {
            g.add_entity(n);
        }
        for r in &self.relations {
            g.add_relation(r);
        }
        for t in &self.triples {
            g.add_triple(perm[t.head], t.relation, perm[t.tail])?;
        }
        let items: Vec<usize> = self.items.iter().map(|&e| perm[e]).collect();
        g.set_items(&items)?;
        Ok(g)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                self.entities[t.head], self.relations[t.relation], self.entities[t.tail]
            );
        }
        out
    }

    pub fn items_text(&self) -> String {
        self.items
            .iter()
            .map(|&e| format!("{}\n", self.entities[e]))
            .collect()
    }

    /// Parses the `head<TAB>relation<TAB>tail` format. `#` lines and blank
    /// lines are skipped; duplicate triples are dropped and counted.
    pub fn parse_tsv(text: &str, origin: &Path) -> Result<(KnowledgeGraph, KgStats)> {
        let mut g = KnowledgeGraph::new();
        let mut dups = 0;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.trim().is_empty()) {
                return Err(StepError::Parse {
                    path: origin.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("expected head<TAB>relation<TAB>tail, got {line:?}"),
                });
            }
            if !g.add_named_triple(fields[0].trim(), fields[1].trim(), fields[2].trim()) {
                dups += 1;
            }
        }
        if g.triples.is_empty() {
            return Err(StepError::Parse {
                path: origin.to_path_buf(),
                line: 0,
                msg: "knowledge graph file contains no triples".into(),
            });
        }
        if dups > 0 {
            log::warn!("{}: dropped {dups} duplicate triples", origin.display());
        }
        let stats = KgStats {
            duplicates_dropped: dups,
            ..g.stats()
        };
        Ok((g, stats))
    }

    /// Flags items from a newline-separated list of entity names.
    pub fn parse_items(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut ids = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let name = line.trim();
            if name.is_empty() || name.starts_with('#') {
                continue;
            }
            let id = self.entity_id(name).ok_or_else(|| StepError::Parse {
                path: origin.to_path_buf(),
                line: lineno + 1,
                msg: format!("item {name:?} is not an entity of the graph"),
            })?;
            ids.push(id);
        }
        self.set_items(&ids)
    }
}

pub fn load_kg(path: &Path) -> Result<(KnowledgeGraph, KgStats)> {
    let text = std::fs::read_to_string(path).map_err(|e| StepError::io(path, e))?;
    KnowledgeGraph::parse_tsv(&text, path)
}

/// Loads `kg.tsv` plus its companion item list.
pub fn load_kg_with_items(kg_path: &Path, items_path: &Path) -> Result<(KnowledgeGraph, KgStats)> {
    let (mut g, stats) = load_kg(kg_path)?;
    let text = std::fs::read_to_string(items_path).map_err(|e| StepError::io(items_path, e))?;
    g.parse_items(&text, items_path)?;
    Ok((g, stats))
}

pub fn save_kg(g: &KnowledgeGraph, kg_path: &Path, items_path: &Path) -> Result<()> {
    std::fs::write(kg_path, g.to_tsv()).map_err(|e| StepError::io(kg_path, e))?;
    std::fs::write(items_path, g.items_text()).map_err(|e| StepError::io(items_path, e))
}

/// Tape handles for one relational convolution layer. `relation_weights`
/// holds one `[D_in, D_out]` matrix per relation of the graph it runs on.
#[derive(Clone, Debug)]
pub struct RgcnLayer {
    pub self_weight: Var,
    pub relation_weights: Vec<Var>,
    pub activation: Activation,
}

impl RgcnLayer {
    /// `h_out[n] = act(h[n] W_0 + sum_r mean_{j in N_r(n)} h[j] W_r)`.
    ///
    /// The per-relation mean is the `1 / c_{n,r}` normalization with
    /// `c_{n,r} = |N_r(n)|`; relations with no in-neighbors contribute nothing.
    pub fn forward(&self, tape: &mut Tape, g: &KnowledgeGraph, h: Var) -> Result<Var> {
        if self.relation_weights.len() != g.num_relations() {
            return Err(StepError::invalid(format!(
                "layer has {} relation weights, graph has {} relations",
                self.relation_weights.len(),
                g.num_relations()
            )));
        }
        let rows = tape.value(h).shape()[0];
        if rows != g.num_entities() {
            return Err(StepError::shape(
                "rgcn_forward",
                tape.value(h).shape(),
                &[g.num_entities()],
            ));
        }
        let mut total = tape.matmul(h, self.self_weight)?;
        for (r, &w) in self.relation_weights.iter().enumerate() {
            let groups = g.relation_groups(r);
            if groups.iter().all(Vec::is_empty) {
                continue;
            }
            let agg = tape.group_mean(h, groups)?;
            let msg = tape.matmul(agg, w)?;
            total = tape.add(total, msg)?;
        }
        Ok(self.activation.apply(tape, total))
    }
}

/// Differentiable row gather of entity embeddings.
pub fn item_embedding(tape: &mut Tape, h: Var, ids: &[usize]) -> Result<Var> {
    tape.gather_rows(h, ids)
}
