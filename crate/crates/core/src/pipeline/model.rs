//! The assembled model: trainable parameters, frozen text models, and the
//! batch forward pass producing every loss component.

use crate::dialogue::{
    mask_items, DialogueSample, EntityLinker, FrozenTextEncoder, Speaker, Turn, Vocabulary, UNK,
};
use crate::error::{Result, StepError};
use crate::fformer::{AttentionWeights, FFormer, SampleFusion, TextKeys};
use crate::kg::{KnowledgeGraph, RgcnLayer};
use crate::numerics::{Tape, Tensor, Var, NORM_EPS};
use crate::objectives::{
    aux_cosine_loss, contrastive_ce_loss, curriculum_loss, margin_loss, mine_batch_hard, pairwise_similarity,
    triplet_loss, TaskLosses,
};
use crate::prompt::{
    assemble_conv_prompt, assemble_rec_prompt, conv_nll, greedy_decode, mean_token_loss, rank_items, rec_loss,
    secondary_fusion, substitute_items, top_k, DecoderBinding, FrozenDecoder, PrefixHead, SecondaryFusion,
};
use crate::rng::{derive_rng, normal_vec};

use super::config::{RecTemplate, TrainConfig};
use super::params::{Bound, ParamStore};

/// Parameter name prefixes by component.
pub const GROUP_GRAPH: [&str; 2] = ["entity_table", "rgcn."];
pub const GROUP_FFORMER: [&str; 1] = ["fformer."];
pub const GROUP_PREFIX: [&str; 3] = ["prefix_conv.", "prefix_rec.", "rec."];
pub const QUERY_BANK: &str = "fformer.queries";
/// RGCN weight init std in units of `1/sqrt(D)`. The entity table starts
/// at std 0.02, so the convolution has to amplify it for mentioned entities
/// to register next to the text features.
const RGCN_INIT_GAIN: f64 = 16.0;

/// A dialogue sample turned into ids and frozen encodings.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub context_ids: Vec<usize>,
    /// Keys for the text stage: `[1, D]` CLS or `[L, D]` token outputs.
    pub text: Tensor,
    /// `[1, D]` CLS vector used by the contrastive task.
    pub cls: Tensor,
    pub entities: Vec<usize>,
    /// Gold item entity ids.
    pub gold_items: Vec<usize>,
    /// Gold item positions in the item list.
    pub gold_slots: Vec<usize>,
    /// Target response with item names replaced by `[ITEM]`.
    pub response_ids: Vec<usize>,
}

/// Renders context turns as `speaker : text ...`.
pub fn render_context(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| format!("{} : {}", t.speaker.tag(), t.text))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Per-batch values of every loss component.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ComponentValues {
    pub ce: f64,
    pub margin: f64,
    pub triplet: f64,
    pub aux: f64,
    pub cl: f64,
    pub rec: Option<f64>,
    pub conv: Option<f64>,
    pub total: f64,
}

/// Which head losses a batch forward includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    Rec,
    Conv,
    Both,
}

pub struct BatchForward {
    pub total: Var,
    pub values: ComponentValues,
}

/// Output of inference on one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// Item slots, best first, length `min(k, M)`.
    pub ranking: Vec<usize>,
    pub probs: Vec<f64>,
    pub generated_ids: Vec<usize>,
    /// Generated response with ranked item names substituted.
    pub response: String,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    /// Graph as loaded; item list and names live here.
    pub graph: KnowledgeGraph,
    /// Graph the convolution runs on (with inverse relations if enabled).
    pub conv_graph: KnowledgeGraph,
    pub vocab: Vocabulary,
    pub encoder: FrozenTextEncoder,
    pub decoder: FrozenDecoder,
    pub params: ParamStore,
    item_linker: EntityLinker,
    entity_linker: EntityLinker,
}

impl Model {
    pub fn new(config: TrainConfig, graph: KnowledgeGraph, vocab: Vocabulary) -> Result<Model> {
        config.validate()?;
        if graph.num_items() == 0 {
            return Err(StepError::Validation("knowledge graph has no items".into()));
        }
        let m = &config.model;
        let d = m.dim;
        let conv_graph = if m.inverse_relations {
            graph.with_inverse_relations()
        } else {
            graph.clone()
        };
        let encoder = FrozenTextEncoder::new(vocab.len(), d, m.encoder_max_len, config.seed)?;
        let decoder = FrozenDecoder::new(vocab.len(), d, m.decoder_max_len, m.decoder_layers, config.seed)?;

        let mut rng = derive_rng(config.seed, "init");
        let mut params = ParamStore::new();
        let proj = 1.0 / (d as f64).sqrt();
        let mut add = |name: &str, shape: &[usize], std: f64, params: &mut ParamStore| -> Result<()> {
            let n: usize = shape.iter().product();
            params.insert(name, Tensor::new(shape.to_vec(), normal_vec(&mut rng, n, std))?)
        };
        add("entity_table", &[graph.num_entities(), d], m.entity_init_std, &mut params)?;
        add("rgcn.self", &[d, d], proj * RGCN_INIT_GAIN, &mut params)?;
        for r in 0..conv_graph.num_relations() {
            add(&format!("rgcn.rel.{r}"), &[d, d], proj * RGCN_INIT_GAIN, &mut params)?;
        }
        add(QUERY_BANK, &[m.queries, d], 0.02, &mut params)?;
        add("fformer.sentinel", &[1, d], 0.02, &mut params)?;
        for stage in ["entity", "text"] {
            for l in 0..m.fformer_layers {
                for w in ["q", "k", "v"] {
                    add(&format!("fformer.{stage}.{l}.{w}"), &[d, d], proj, &mut params)?;
                }
            }
        }
        for (head, p) in [("prefix_conv", m.prefix_conv), ("prefix_rec", m.prefix_rec)] {
            add(&format!("{head}.prefix"), &[p, d], 0.1, &mut params)?;
            add(&format!("{head}.w1"), &[d, d], proj, &mut params)?;
            params.insert(&format!("{head}.b1"), Tensor::zeros(&[d]))?;
            add(&format!("{head}.w2"), &[d, d], 0.02, &mut params)?;
            params.insert(&format!("{head}.b2"), Tensor::zeros(&[d]))?;
        }
        add("rec.sentinel", &[1, d], 0.02, &mut params)?;

        let item_linker = EntityLinker::new(graph.items().iter().map(|&e| (e, graph.entity_name(e))));
        let entity_linker = EntityLinker::new(graph.entity_names().iter().enumerate().map(|(i, n)| (i, n.as_str())));
        Ok(Model {
            config,
            graph,
            conv_graph,
            vocab,
            encoder,
            decoder,
            params,
            item_linker,
            entity_linker,
        })
    }

    pub fn encoder_hash(&self) -> String {
        self.encoder.param_hash()
    }

    pub fn decoder_hash(&self) -> String {
        self.decoder.param_hash()
    }

    pub fn entity_linker(&self) -> &EntityLinker {
        &self.entity_linker
    }

    fn encode_text(&self, context_ids: &[usize]) -> Result<(Tensor, Tensor)> {
        let enc = self.encoder.encode(context_ids)?;
        let d = self.config.model.dim;
        let cls = enc.cls.reshape(vec![1, d])?;
        let text = match self.config.model.text_keys {
            TextKeys::Cls => cls.clone(),
            TextKeys::Tokens => enc.tokens,
        };
        Ok((text, cls))
    }

    pub fn prepare(&self, sample: &DialogueSample) -> Result<PreparedSample> {
        let mut context_ids = self.vocab.encode(&render_context(sample.context()));
        if context_ids.is_empty() {
            context_ids.push(UNK);
        }
        let (text, cls) = self.encode_text(&context_ids)?;
        let target = sample.target();
        let masked = mask_items(&target.text, &self.item_linker.find(&target.text))?;
        let gold_items = sample.gold_items().to_vec();
        let gold_slots = gold_items
            .iter()
            .map(|&e| {
                self.graph
                    .item_slot(e)
                    .ok_or_else(|| StepError::Validation(format!("sample {}: gold {e} is not an item", sample.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedSample {
            id: sample.id.clone(),
            context_ids,
            text,
            cls,
            entities: sample.linked_entities(),
            gold_items,
            gold_slots,
            response_ids: self.vocab.encode(&masked),
        })
    }

    pub fn prepare_all(&self, samples: &[DialogueSample]) -> Result<Vec<PreparedSample>> {
        samples.iter().map(|s| self.prepare(s)).collect()
    }

    /// Prepares a live context (no gold), linking entities by name.
    pub fn prepare_live(&self, turns: &[Turn]) -> Result<PreparedSample> {
        let mut context_ids = self.vocab.encode(&render_context(turns));
        if context_ids.is_empty() {
            context_ids.push(UNK);
        }
        let (text, cls) = self.encode_text(&context_ids)?;
        let mut entities = Vec::new();
        for t in turns {
            for e in self.entity_linker.link(&t.text) {
                if !entities.contains(&e) {
                    entities.push(e);
                }
            }
        }
        Ok(PreparedSample {
            id: "live".into(),
            context_ids,
            text,
            cls,
            entities,
            gold_items: vec![],
            gold_slots: vec![],
            response_ids: vec![],
        })
    }

    pub fn fformer(&self, bound: &Bound) -> FFormer {
        let layers = |stage: &str| {
            (0..self.config.model.fformer_layers)
                .map(|l| AttentionWeights {
                    w_q: bound.get(&format!("fformer.{stage}.{l}.q")),
                    w_k: bound.get(&format!("fformer.{stage}.{l}.k")),
                    w_v: bound.get(&format!("fformer.{stage}.{l}.v")),
                })
                .collect()
        };
        FFormer {
            queries: bound.get(QUERY_BANK),
            entity_layers: layers("entity"),
            text_layers: layers("text"),
        }
    }

    fn prefix_head(bound: &Bound, head: &str) -> PrefixHead {
        PrefixHead {
            prefix: bound.get(&format!("{head}.prefix")),
            w1: bound.get(&format!("{head}.w1")),
            b1: bound.get(&format!("{head}.b1")),
            w2: bound.get(&format!("{head}.w2")),
            b2: bound.get(&format!("{head}.b2")),
        }
    }

    /// Graph convolution over the whole entity table, `[N, D]`.
    pub fn graph_embeddings(&self, tape: &mut Tape, bound: &Bound) -> Result<Var> {
        let layer = RgcnLayer {
            self_weight: bound.get("rgcn.self"),
            relation_weights: (0..self.conv_graph.num_relations())
                .map(|r| bound.get(&format!("rgcn.rel.{r}")))
                .collect(),
            activation: self.config.model.rgcn_activation,
        };
        layer.forward(tape, &self.conv_graph, bound.get("entity_table"))
    }

    /// Rows of `h` for `ids`, or the given sentinel row when `ids` is empty.
    fn rows_or(tape: &mut Tape, h: Var, ids: &[usize], sentinel: Var) -> Result<Var> {
        if ids.is_empty() {
            Ok(sentinel)
        } else {
            tape.gather_rows(h, ids)
        }
    }

    pub fn fuse_sample(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ff: &FFormer,
        h: Var,
        sample: &PreparedSample,
    ) -> Result<SampleFusion> {
        let rows = Self::rows_or(tape, h, &sample.entities, bound.get("fformer.sentinel"))?;
        let text = tape.constant(sample.text.clone());
        ff.forward(tape, rows, None, text)
    }

    /// Row added to the fused vector in the recommendation prompt.
    fn secondary_row(&self, tape: &mut Tape, bound: &Bound, h: Var, sample: &PreparedSample, training: bool) -> Result<Var> {
        let ids: &[usize] = match self.config.model.secondary_fusion {
            SecondaryFusion::GoldItem if training && !sample.gold_items.is_empty() => &sample.gold_items,
            _ => &sample.entities,
        };
        let rows = Self::rows_or(tape, h, ids, bound.get("rec.sentinel"))?;
        Ok(tape.mean_rows(rows))
    }

    /// Recommendation prompt `[P_rec ; H' ; S + EOS]` for one sample.
    #[allow(clippy::too_many_arguments)]
    pub fn rec_prompt(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        bind: &DecoderBinding,
        refined: Var,
        h: Var,
        pooled: Var,
        sample: &PreparedSample,
        template: &[usize],
        training: bool,
    ) -> Result<Var> {
        let extra = self.secondary_row(tape, bound, h, sample, training)?;
        let adjusted = secondary_fusion(tape, pooled, extra, self.config.model.lambda)?;
        assemble_rec_prompt(tape, &self.decoder, bind, refined, adjusted, template)
    }

    /// Every loss for a batch. `epoch` drives the curriculum weights.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[&PreparedSample],
        epoch: i64,
        heads: Heads,
    ) -> Result<BatchForward> {
        if batch.is_empty() {
            return Err(StepError::invalid("empty batch"));
        }
        let cfg = &self.config;
        let contrastive = cfg.objective.contrastive();
        let h = self.graph_embeddings(tape, bound)?;
        let ff = self.fformer(bound);
        let fusions = batch
            .iter()
            .map(|s| self.fuse_sample(tape, bound, &ff, h, s))
            .collect::<Result<Vec<_>>>()?;

        // Labels for mining and alignment: first gold item (or none).
        let labels: Vec<usize> = batch
            .iter()
            .enumerate()
            .map(|(i, s)| s.gold_items.first().copied().unwrap_or(usize::MAX - i))
            .collect();

        let queries: Vec<Var> = fusions.iter().map(|f| tape.l2_normalize(f.q, NORM_EPS)).collect();
        let cls_rows: Vec<Var> = batch.iter().map(|s| tape.constant(s.cls.clone())).collect();
        let text = tape.concat_rows(&cls_rows)?;
        let text = tape.l2_normalize(text, NORM_EPS);
        let tables = pairwise_similarity(tape, &queries, text, contrastive.temperature)?;
        let mined = mine_batch_hard(tape, &tables, &labels, contrastive.mask_label_collisions)?;
        let ce = contrastive_ce_loss(tape, tables.s_q2t, tables.s_t2q, contrastive.smoothing)?;
        let margin = margin_loss(tape, &tables, &mined, contrastive.margin)?;

        let pooled_rows: Vec<Var> = fusions.iter().map(|f| f.pooled).collect();
        let pooled = tape.concat_rows(&pooled_rows)?;
        // One (sample, gold item) row per gold item.
        let (rows, gold_ids): (Vec<usize>, Vec<usize>) = batch
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.gold_items.iter().map(move |&g| (i, g)))
            .unzip();
        let (triplet, aux) = if rows.is_empty() {
            let z = tape.constant(Tensor::scalar(0.0));
            (z, z)
        } else {
            let e = tape.gather_rows(pooled, &rows)?;
            let r = tape.gather_rows(h, &gold_ids)?;
            let (t, _) = triplet_loss(tape, e, r, &gold_ids, contrastive.margin, contrastive.mask_label_collisions)?;
            let a = aux_cosine_loss(tape, e, r)?;
            (t, a)
        };
        let task = TaskLosses { ce, margin, triplet, aux };
        let cl = curriculum_loss(tape, &task, &cfg.curriculum, epoch, cfg.ablation)?;

        let bind = self.decoder.bind(tape)?;
        let mut head_total: Option<Var> = None;
        let mut values = ComponentValues::default();

        if matches!(heads, Heads::Rec | Heads::Both) {
            let refined = Self::prefix_head(bound, "prefix_rec").refine(tape)?;
            let items = tape.gather_rows(h, self.graph.items())?;
            let mut probs = Vec::new();
            let mut gold = Vec::new();
            for (s, f) in batch.iter().zip(&fusions) {
                if s.gold_slots.is_empty() {
                    continue;
                }
                let prompt = self.rec_prompt(tape, bound, &bind, refined, h, f.pooled, s, &s.response_ids, true)?;
                probs.push(rank_items(tape, &self.decoder, &bind, prompt, items)?);
                gold.push(s.gold_slots.clone());
            }
            if !probs.is_empty() {
                let probs = tape.concat_rows(&probs)?;
                let l = rec_loss(tape, probs, &gold)?;
                values.rec = Some(tape.value(l).item());
                head_total = Some(l);
            }
        }
        if matches!(heads, Heads::Conv | Heads::Both) {
            let refined = Self::prefix_head(bound, "prefix_conv").refine(tape)?;
            let mut parts = Vec::new();
            for (s, f) in batch.iter().zip(&fusions) {
                if s.response_ids.is_empty() {
                    continue;
                }
                let prompt = assemble_conv_prompt(tape, refined, f.pooled)?;
                parts.push(conv_nll(tape, &self.decoder, &bind, prompt, &s.context_ids, &s.response_ids)?);
            }
            if !parts.is_empty() {
                let l = mean_token_loss(tape, &parts)?;
                values.conv = Some(tape.value(l).item());
                head_total = Some(match head_total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
        }

        let weighted_cl = tape.scale(cl, cfg.objective.alpha);
        let total = match head_total {
            Some(t) if cfg.objective.alpha == 0.0 => t,
            Some(t) => tape.add(t, weighted_cl)?,
            None => weighted_cl,
        };
        values.ce = tape.value(ce).item();
        values.margin = tape.value(margin).item();
        values.triplet = tape.value(triplet).item();
        values.aux = tape.value(aux).item();
        values.cl = tape.value(cl).item();
        values.total = tape.value(total).item();
        Ok(BatchForward { total, values })
    }

    /// Parameters bound as constants, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let names: Vec<&str> = self.params.names().iter().map(String::as_str).collect();
        self.params.bind(tape, &names)
    }

    /// Graph embeddings and refined prefixes, shared by every inference call.
    pub fn inference_cache(&self) -> Result<InferenceCache> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let h = self.graph_embeddings(&mut tape, &bound)?;
        let conv = Self::prefix_head(&bound, "prefix_conv").refine(&mut tape)?;
        let rec = Self::prefix_head(&bound, "prefix_rec").refine(&mut tape)?;
        Ok(InferenceCache {
            h: tape.value(h).clone(),
            refined_conv: tape.value(conv).clone(),
            refined_rec: tape.value(rec).clone(),
        })
    }

    /// Ranks items and generates a response for one sample.
    pub fn infer(&self, cache: &InferenceCache, sample: &PreparedSample, k: usize) -> Result<Inference> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let h = tape.constant(cache.h.clone());
        let ff = self.fformer(&bound);
        let fusion = self.fuse_sample(&mut tape, &bound, &ff, h, sample)?;
        let bind = self.decoder.bind(&mut tape)?;

        let eval = &self.config.eval;
        let generated_ids = if eval.skip_generation {
            Vec::new()
        } else {
            let refined = tape.constant(cache.refined_conv.clone());
            let prompt = assemble_conv_prompt(&mut tape, refined, fusion.pooled)?;
            greedy_decode(&self.decoder, tape.value(prompt), &sample.context_ids, eval.max_new_tokens)?
        };
        let template: &[usize] = match eval.rec_template {
            RecTemplate::Generated if !eval.skip_generation => &generated_ids,
            _ => &sample.response_ids,
        };
        let refined = tape.constant(cache.refined_rec.clone());
        let prompt = self.rec_prompt(&mut tape, &bound, &bind, refined, h, fusion.pooled, sample, template, false)?;
        let items = tape.gather_rows(h, self.graph.items())?;
        let probs_var = rank_items(&mut tape, &self.decoder, &bind, prompt, items)?;
        let probs = tape.value(probs_var).data().to_vec();
        let ranking = top_k(&probs, k.min(probs.len()));

        let tokens: Vec<String> = generated_ids.iter().map(|&i| self.vocab.token(i).to_string()).collect();
        let names: Vec<&str> = ranking
            .iter()
            .map(|&slot| self.graph.entity_name(self.graph.items()[slot]))
            .collect();
        Ok(Inference {
            ranking,
            probs,
            generated_ids,
            response: substitute_items(&tokens, &names),
        })
    }

    /// A context turn typed by a user, for live inference.
    pub fn user_turn(text: &str) -> Turn {
        Turn {
            speaker: Speaker::User,
            text: text.to_string(),
            items: vec![],
            entities: vec![],
        }
    }
}

#[derive(Clone, Debug)]
pub struct InferenceCache {
    pub h: Tensor,
    pub refined_conv: Tensor,
    pub refined_rec: Tensor,
}

