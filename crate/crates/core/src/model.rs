//! The full relation-extraction model: encoder, document graph, R-GCN stack,
//! pair-specific mention attention, context attention and classifier.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{enumerate_pairs, CandidatePair, Document, PairMode};
use crate::docgraph::{node_features_on_tape, type_param_specs, HeteroGraph};
use crate::encoder::{project_on_tape, EncoderBackend, EncoderKind, PROJECT_BIAS, PROJECT_WEIGHT};
use crate::error::{Error, Result};
use crate::layers::{
    attention_head, dropout_on_tape, ffnn_on_tape, ffnn_param_specs, layer_norm, layer_norm_param_specs,
    mhead_param_specs, multi_head_attention, rgcn_forward, rgcn_on_tape, rgcn_param_specs, typed_adjacency,
    MultiHeadParams, MultiHeadVars, RgcnLayerParams, RgcnVars, LAYER_NORM_EPS, PROB_CLAMP,
};
use crate::params::{Init, InitMode, ParamSpec, ParamStore};
use crate::tape::{Matrix, Tape, Var};

pub const DISTANCE_EMBEDDING: &str = "distance.embedding";
pub const CONTEXT_WEIGHT: &str = "context.weight";
pub const CLASSIFIER: &str = "classifier";
pub const CLASSIFIER_LAYERS: usize = 2;

pub fn local_prefix(side: usize) -> String {
    format!("local.{side}")
}

pub fn local_norm_prefix(side: usize) -> String {
    format!("local.{side}.ln")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoBert,
    NoGlobal,
    NoLocal,
    NoContext,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::NoBert, Ablation::NoGlobal, Ablation::NoLocal, Ablation::NoContext];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoBert => "no-bert",
            Ablation::NoGlobal => "no-global",
            Ablation::NoLocal => "no-local",
            Ablation::NoContext => "no-context",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the encoder's word states.
    pub word_dim: usize,
    pub projected_dim: usize,
    pub node_dim: usize,
    pub type_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub distance_dim: usize,
    /// Bins per sign; the table has `2 * distance_bins + 1` rows.
    pub distance_bins: usize,
    pub num_relations: usize,
    pub encoder_dropout: f64,
    pub classifier_dropout: f64,
    pub use_global: bool,
    pub use_local: bool,
    pub use_context: bool,
    pub encoder_kind: EncoderKind,
    pub freeze_encoder: bool,
    pub max_segment_len: usize,
    pub pair_mode: PairMode,
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::docred()
    }
}

impl ModelConfig {
    pub fn docred() -> Self {
        ModelConfig {
            word_dim: 64,
            projected_dim: 236,
            node_dim: 256,
            type_dim: 20,
            layers: 2,
            heads: 2,
            distance_dim: 20,
            distance_bins: 9,
            num_relations: 96,
            encoder_dropout: 0.2,
            classifier_dropout: 0.5,
            use_global: true,
            use_local: true,
            use_context: true,
            encoder_kind: EncoderKind::TrainableToy,
            freeze_encoder: false,
            max_segment_len: 512,
            pair_mode: PairMode::AllOrdered,
            threshold: 0.5,
        }
    }

    pub fn cdr() -> Self {
        ModelConfig {
            layers: 3,
            heads: 4,
            num_relations: 1,
            pair_mode: PairMode::ChemicalDisease,
            ..ModelConfig::docred()
        }
    }

    /// Narrow dimensions for tests and demos.
    pub fn small(num_relations: usize) -> Self {
        ModelConfig {
            word_dim: 8,
            projected_dim: 6,
            node_dim: 8,
            type_dim: 2,
            heads: 2,
            distance_dim: 4,
            distance_bins: 4,
            num_relations,
            encoder_dropout: 0.0,
            classifier_dropout: 0.0,
            ..ModelConfig::docred()
        }
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        match a {
            Ablation::NoBert => self.encoder_kind = EncoderKind::TrainableToy,
            Ablation::NoGlobal => self.use_global = false,
            Ablation::NoLocal => self.use_local = false,
            Ablation::NoContext => self.use_context = false,
        }
        self
    }

    /// Active ablations, used as the report fingerprint.
    pub fn ablations(&self) -> Vec<Ablation> {
        let mut out = Vec::new();
        if self.encoder_kind == EncoderKind::TrainableToy {
            out.push(Ablation::NoBert);
        }
        if !self.use_global {
            out.push(Ablation::NoGlobal);
        }
        if !self.use_local {
            out.push(Ablation::NoLocal);
        }
        if !self.use_context {
            out.push(Ablation::NoContext);
        }
        out
    }

    pub fn head_dim(&self) -> usize {
        self.node_dim / self.heads
    }

    pub fn num_distance_bins(&self) -> usize {
        2 * self.distance_bins + 1
    }

    /// Width of one side `[global ; local ; distance]` of a pair.
    pub fn entity_dim(&self) -> usize {
        let mut d = self.distance_dim;
        if self.use_global {
            d += self.node_dim;
        }
        if self.use_local {
            d += self.node_dim;
        }
        d
    }

    pub fn relation_dim(&self) -> usize {
        2 * self.entity_dim()
    }

    pub fn classifier_input_dim(&self) -> usize {
        if self.use_context {
            2 * self.relation_dim()
        } else {
            self.relation_dim()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("word_dim", self.word_dim),
            ("projected_dim", self.projected_dim),
            ("node_dim", self.node_dim),
            ("type_dim", self.type_dim),
            ("heads", self.heads),
            ("distance_dim", self.distance_dim),
            ("distance_bins", self.distance_bins),
            ("num_relations", self.num_relations),
            ("max_segment_len", self.max_segment_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.node_dim != self.projected_dim + self.type_dim {
            return bad(format!(
                "node_dim {} must equal projected_dim {} + type_dim {}",
                self.node_dim, self.projected_dim, self.type_dim
            ));
        }
        if !self.node_dim.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide node_dim {}", self.heads, self.node_dim));
        }
        if self.use_global && self.layers == 0 {
            return bad("the global encoder needs at least one layer".into());
        }
        for (name, r) in [("encoder_dropout", self.encoder_dropout), ("classifier_dropout", self.classifier_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1)"));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} must lie in (0, 1)", self.threshold));
        }
        Ok(())
    }
}

/// Signed logarithmic bucket of a word distance.
pub fn distance_bin(delta: i64, bins: usize) -> usize {
    match delta {
        0 => 0,
        d if d > 0 => bins.min(63 - d.leading_zeros() as usize + 1),
        d => bins + distance_bin(d.unsigned_abs().min(i64::MAX as u64) as i64, bins),
    }
}

/// Word position of an entity's first mention.
pub fn first_mention_position(doc: &Document, entity_id: usize) -> Result<usize> {
    Ok(doc
        .entity_mentions(entity_id)?
        .map(|m| doc.mention_word_range(m).start)
        .min()
        .expect("entities have at least one mention"))
}

/// Signed word offset from `a`'s first mention to `b`'s.
pub fn pair_offset(doc: &Document, a: usize, b: usize) -> Result<i64> {
    Ok(first_mention_position(doc, b)? as i64 - first_mention_position(doc, a)? as i64)
}

/// Entity rows after a stack of R-GCN layers over the given node features.
pub fn entity_global(
    graph: &HeteroGraph,
    features: &Matrix,
    stack: &[RgcnLayerParams],
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut h = features.clone();
    for layer in stack {
        h = rgcn_forward(&h, &graph.edges, layer)?;
    }
    Ok(graph
        .entity_nodes()
        .iter()
        .enumerate()
        .map(|(e, &n)| (e, h.row(n).to_vec()))
        .collect())
}

/// Layer-normalized mention attention for one entity and one query.
pub fn entity_local(
    query: &Matrix,
    sentence_keys: &Matrix,
    mention_values: &Matrix,
    heads: &MultiHeadParams,
    gain: &[f64],
    bias: &[f64],
) -> Result<Vec<f64>> {
    let att = multi_head_attention(query, sentence_keys, mention_values, heads)?;
    layer_norm(att.output.as_slice().expect("contiguous"), gain, bias)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextOutput {
    pub context: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Attention of one target pair over every pair representation of its document.
pub fn context_rep(target: usize, reps: &Matrix, weight: &Matrix) -> Result<ContextOutput> {
    if target >= reps.nrows() {
        return Err(Error::Config("context target outside the pair list".into()));
    }
    if weight.dim() != (reps.ncols(), reps.ncols()) {
        return Err(Error::Config(format!(
            "context weight {:?} does not match representation width {}",
            weight.dim(),
            reps.ncols()
        )));
    }
    let mut t = Tape::new();
    let o = t.constant(reps.clone());
    let w = t.constant(weight.clone());
    let (ctx, theta) = context_on_tape(&mut t, o, w);
    Ok(ContextOutput {
        context: t.value(ctx).row(target).to_vec(),
        weights: t.value(theta).row(target).to_vec(),
    })
}

/// `Θ = softmax_i(o_i W o_rᵀ)` for every target `r`, and `Θ·O`.
pub fn context_on_tape(t: &mut Tape, reps: Var, weight: Var) -> (Var, Var) {
    let ow = t.matmul(reps, weight);
    let logits = t.matmul_t(ow, reps);
    let by_target = t.transpose(logits);
    let theta = t.softmax_rows(by_target);
    (t.matmul(theta, reps), theta)
}

/// Per-document tape state shared by every pair.
pub struct GraphState {
    pub graph: HeteroGraph,
    /// Initial node features, `num_nodes × node_dim`.
    pub initial: Var,
    /// Entity rows used as global representations and attention queries.
    pub entities: Var,
    /// Initial feature of the sentence hosting each mention, by mention id.
    pub mention_keys: Var,
    /// Initial mention features, by mention id.
    pub mention_values: Var,
}

pub struct Classified {
    /// `pairs × num_relations`.
    pub probs: Var,
    pub context_weights: Option<Var>,
}

pub struct DocumentForward {
    pub pairs: Vec<CandidatePair>,
    pub relation_reps: Var,
    pub classified: Classified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationPrediction {
    pub doc_id: String,
    pub head: usize,
    pub tail: usize,
    pub probabilities: Vec<f64>,
    /// Relations with probability strictly above the threshold; empty means N/A.
    pub decided: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_weights: Option<Vec<f64>>,
}

pub struct Glre {
    pub config: ModelConfig,
    pub backend: EncoderBackend,
}

impl fmt::Debug for Glre {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Glre").field("config", &self.config).field("backend", &self.backend).finish()
    }
}

impl Glre {
    pub fn new(config: ModelConfig, backend: EncoderBackend) -> Result<Self> {
        config.validate()?;
        if backend.kind() != config.encoder_kind {
            return Err(Error::Config(format!(
                "config asks for encoder {:?} but the backend is {:?}",
                config.encoder_kind,
                backend.kind()
            )));
        }
        if backend.width() != config.word_dim {
            return Err(Error::Config(format!(
                "encoder width {} differs from word_dim {}",
                backend.width(),
                config.word_dim
            )));
        }
        Ok(Glre { config, backend })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = &self.config;
        let mut specs = self.backend.param_specs();
        specs.push(ParamSpec::weight(PROJECT_WEIGHT, c.word_dim, c.projected_dim));
        specs.push(ParamSpec::zeros(PROJECT_BIAS, 1, c.projected_dim));
        specs.extend(type_param_specs(c.type_dim));
        if c.use_global {
            for l in 0..c.layers {
                specs.extend(rgcn_param_specs(l, c.node_dim));
            }
        }
        if c.use_local {
            for side in 0..2 {
                specs.extend(mhead_param_specs(&local_prefix(side), c.node_dim, c.heads));
                specs.extend(layer_norm_param_specs(&local_norm_prefix(side), c.node_dim));
            }
        }
        let mut dist = ParamSpec::weight(DISTANCE_EMBEDDING, c.num_distance_bins(), c.distance_dim);
        dist.init = Init::Normal { fan_in: 1 };
        specs.push(dist);
        if c.use_context {
            specs.push(ParamSpec::weight(CONTEXT_WEIGHT, c.relation_dim(), c.relation_dim()));
        }
        specs.extend(ffnn_param_specs(
            CLASSIFIER,
            &[c.classifier_input_dim(), c.relation_dim(), c.num_relations],
        ));
        specs
    }

    pub fn init_params(&self, mode: InitMode, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::initialize(&self.param_specs(), mode, &mut rng);
        if self.config.freeze_encoder && store.contains(crate::encoder::EMBEDDING) {
            store.freeze(crate::encoder::EMBEDDING);
        }
        store
    }

    /// Rejects stores whose names or shapes disagree with this configuration.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        store.check_against(&self.param_specs()).map_err(Error::Checkpoint)
    }

    pub fn candidate_pairs(&self, doc: &Document) -> Vec<CandidatePair> {
        enumerate_pairs(doc, self.config.num_relations, self.config.pair_mode)
    }

    pub fn encode_graph(
        &self,
        t: &mut Tape,
        params: &ParamStore,
        doc: &Document,
        rng: Option<&mut (dyn RngCore + 'static)>,
    ) -> Result<GraphState> {
        let c = &self.config;
        let graph = HeteroGraph::build(doc);
        let states = self.backend.encode_on_tape(t, params, doc, c.max_segment_len)?;
        let w = t.param(params, PROJECT_WEIGHT)?;
        let b = t.param(params, PROJECT_BIAS)?;
        let mut projected = project_on_tape(t, states, w, b);
        if let Some(rng) = rng {
            projected = dropout_on_tape(t, projected, c.encoder_dropout, rng);
        }
        let initial = node_features_on_tape(t, params, doc, &graph, projected)?;
        let mut h = initial;
        if c.use_global {
            let adjacency = typed_adjacency(graph.num_nodes(), &graph.edges);
            for l in 0..c.layers {
                let vars = RgcnVars::bind(t, params, l)?;
                h = rgcn_on_tape(t, h, &adjacency, &vars);
            }
        }
        let entities = t.gather(h, graph.entity_nodes());
        let mention_rows: Vec<usize> = (0..doc.mentions.len()).map(|m| graph.mention_node(m)).collect();
        let key_rows: Vec<usize> = doc.mentions.iter().map(|m| graph.sentence_node(m.sent_index)).collect();
        Ok(GraphState {
            mention_keys: t.gather(initial, &key_rows),
            mention_values: t.gather(initial, &mention_rows),
            graph,
            initial,
            entities,
        })
    }

    /// Local representations for one attention side. Row `block[a] * n_e + q`
    /// holds entity `a` attended with entity `q`'s query.
    fn local_side(
        &self,
        t: &mut Tape,
        params: &ParamStore,
        doc: &Document,
        state: &GraphState,
        side: usize,
        targets: &[usize],
    ) -> Result<Var> {
        let vars = MultiHeadVars::bind(t, params, &local_prefix(side), self.config.heads)?;
        let gain = t.param(params, &format!("{}.gain", local_norm_prefix(side)))?;
        let bias = t.param(params, &format!("{}.bias", local_norm_prefix(side)))?;
        let mut projected = Vec::new();
        for h in 0..self.config.heads {
            let q = t.matmul(state.entities, vars.query[h]);
            let k = t.matmul(state.mention_keys, vars.key[h]);
            let v = t.matmul(state.mention_values, vars.value[h]);
            projected.push((q, k, v));
        }
        let mut blocks = Vec::with_capacity(targets.len());
        for &a in targets {
            let mentions = &doc.entity(a)?.mention_ids;
            let mut heads = Vec::with_capacity(projected.len());
            for &(q, k, v) in &projected {
                let ka = t.gather(k, mentions);
                let va = t.gather(v, mentions);
                heads.push(attention_head(t, q, ka, va, vars.head_dim).0);
            }
            blocks.push(t.concat_cols(&heads));
        }
        let stacked = t.concat_rows(&blocks);
        let out = t.matmul(stacked, vars.out);
        Ok(t.layer_norm(out, gain, bias, LAYER_NORM_EPS))
    }

    /// Pair representations `[ê_head ; ê_tail]`, one row per pair.
    pub fn relation_reps(
        &self,
        t: &mut Tape,
        params: &ParamStore,
        doc: &Document,
        state: &GraphState,
        pairs: &[CandidatePair],
    ) -> Result<Var> {
        let c = &self.config;
        if pairs.is_empty() {
            return Err(Error::Config(format!("{} has no candidate pairs", doc.doc_id)));
        }
        let n_e = doc.entities.len();
        let heads: Vec<usize> = pairs.iter().map(|p| p.head).collect();
        let tails: Vec<usize> = pairs.iter().map(|p| p.tail).collect();
        let mut head_parts = Vec::new();
        let mut tail_parts = Vec::new();
        if c.use_global {
            head_parts.push(t.gather(state.entities, &heads));
            tail_parts.push(t.gather(state.entities, &tails));
        }
        if c.use_local {
            for (side, members, partners, parts) in [
                (0, &heads, &tails, &mut head_parts),
                (1, &tails, &heads, &mut tail_parts),
            ] {
                let mut targets = members.clone();
                targets.sort_unstable();
                targets.dedup();
                let block: BTreeMap<usize, usize> = targets.iter().enumerate().map(|(i, &e)| (e, i)).collect();
                let local = self.local_side(t, params, doc, state, side, &targets)?;
                let rows: Vec<usize> = members
                    .iter()
                    .zip(partners.iter())
                    .map(|(a, q)| block[a] * n_e + q)
                    .collect();
                parts.push(t.gather(local, &rows));
            }
        }
        let table = t.param(params, DISTANCE_EMBEDDING)?;
        let mut bins_ab = Vec::with_capacity(pairs.len());
        let mut bins_ba = Vec::with_capacity(pairs.len());
        for p in pairs {
            let delta = pair_offset(doc, p.head, p.tail)?;
            bins_ab.push(distance_bin(delta, c.distance_bins));
            bins_ba.push(distance_bin(-delta, c.distance_bins));
        }
        head_parts.push(t.gather(table, &bins_ab));
        tail_parts.push(t.gather(table, &bins_ba));
        head_parts.extend(tail_parts);
        Ok(t.concat_cols(&head_parts))
    }

    pub fn classify(
        &self,
        t: &mut Tape,
        params: &ParamStore,
        reps: Var,
        rng: Option<&mut (dyn RngCore + 'static)>,
    ) -> Result<Classified> {
        let c = &self.config;
        let (input, context_weights) = if c.use_context {
            let w = t.param(params, CONTEXT_WEIGHT)?;
            let (ctx, theta) = context_on_tape(t, reps, w);
            (t.concat_cols(&[reps, ctx]), Some(theta))
        } else {
            (reps, None)
        };
        let dropout = rng.map(|r| (r, c.classifier_dropout));
        let logits = ffnn_on_tape(t, params, CLASSIFIER, CLASSIFIER_LAYERS, input, dropout)?;
        Ok(Classified {
            probs: t.sigmoid(logits),
            context_weights,
        })
    }

    /// Full forward pass. `rng` enables dropout.
    pub fn forward(
        &self,
        t: &mut Tape,
        params: &ParamStore,
        doc: &Document,
        pairs: Vec<CandidatePair>,
        mut rng: Option<&mut (dyn RngCore + 'static)>,
    ) -> Result<DocumentForward> {
        let state = self.encode_graph(t, params, doc, rng.as_deref_mut())?;
        let relation_reps = self.relation_reps(t, params, doc, &state, &pairs)?;
        let classified = self.classify(t, params, relation_reps, rng)?;
        Ok(DocumentForward {
            pairs,
            relation_reps,
            classified,
        })
    }

    /// Summed multi-label loss over `pairs`; a document without pairs costs zero.
    pub fn document_loss_on_tape(
        &self,
        t: &mut Tape,
        params: &ParamStore,
        doc: &Document,
        pairs: Vec<CandidatePair>,
        rng: Option<&mut (dyn RngCore + 'static)>,
    ) -> Result<Var> {
        if pairs.is_empty() {
            return Ok(t.constant(Matrix::zeros((1, 1))));
        }
        let labels = label_matrix(&pairs, self.config.num_relations);
        let fwd = self.forward(t, params, doc, pairs, rng)?;
        Ok(t.bce(fwd.classified.probs, labels, PROB_CLAMP))
    }

    pub fn document_loss(&self, params: &ParamStore, doc: &Document) -> Result<f64> {
        let mut t = Tape::new();
        let loss = self.document_loss_on_tape(&mut t, params, doc, self.candidate_pairs(doc), None)?;
        Ok(t.scalar(loss))
    }

    pub fn predict_pairs(
        &self,
        params: &ParamStore,
        doc: &Document,
        pairs: Vec<CandidatePair>,
    ) -> Result<Vec<RelationPrediction>> {
        if pairs.is_empty() {
            return Ok(vec![]);
        }
        let mut t = Tape::new();
        let fwd = self.forward(&mut t, params, doc, pairs, None)?;
        let probs = t.value(fwd.classified.probs);
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!("non-finite probability in {}", doc.doc_id)));
        }
        let weights = fwd.classified.context_weights.map(|w| t.value(w).clone());
        Ok(fwd
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let row: Vec<f64> = probs.row(i).to_vec();
                RelationPrediction {
                    doc_id: doc.doc_id.clone(),
                    head: p.head,
                    tail: p.tail,
                    decided: (0..row.len()).filter(|&r| row[r] > self.config.threshold).collect(),
                    probabilities: row,
                    context_weights: weights.as_ref().map(|w| w.row(i).to_vec()),
                }
            })
            .collect())
    }

    pub fn predict_document(&self, params: &ParamStore, doc: &Document) -> Result<Vec<RelationPrediction>> {
        self.predict_pairs(params, doc, self.candidate_pairs(doc))
    }
}

pub fn label_matrix(pairs: &[CandidatePair], num_relations: usize) -> Matrix {
    Matrix::from_shape_fn((pairs.len(), num_relations), |(i, r)| {
        if pairs[i].labels[r] {
            1.0
        } else {
            0.0
        }
    })
}
