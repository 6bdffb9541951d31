//! The document-level heterogeneous graph.
//!
//! Nodes are mentions (in document order), then entities (by id), then
//! sentences (by index). Five undirected edge types connect them; there are
//! never entity-entity edges and never explicit self-loops.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Mention};
use crate::error::{Error, Result};
use crate::params::{ParamSpec, ParamStore};
use crate::tape::{Matrix, RowMix, Tape, Var};

pub const TYPE_MENTION: &str = "node_type.mention";
pub const TYPE_ENTITY: &str = "node_type.entity";
pub const TYPE_SENTENCE: &str = "node_type.sentence";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    #[serde(rename = "M")]
    Mention,
    #[serde(rename = "E")]
    Entity,
    #[serde(rename = "S")]
    Sentence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeType {
    MM,
    ME,
    MS,
    ES,
    SS,
}

impl EdgeType {
    pub const ALL: [EdgeType; 5] = [EdgeType::MM, EdgeType::ME, EdgeType::MS, EdgeType::ES, EdgeType::SS];

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeType::MM => "mm",
            EdgeType::ME => "me",
            EdgeType::MS => "ms",
            EdgeType::ES => "es",
            EdgeType::SS => "ss",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub node_id: usize,
    pub kind: NodeKind,
    /// Mention id, entity id or sentence index, depending on `kind`.
    pub anchor: usize,
}

/// Undirected edges stored as `(smaller id, larger id)`.
pub type EdgeSet = BTreeSet<(usize, usize)>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeteroGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: BTreeMap<EdgeType, EdgeSet>,
    #[serde(skip)]
    mention_node: Vec<usize>,
    #[serde(skip)]
    entity_node: Vec<usize>,
    #[serde(skip)]
    sentence_node: Vec<usize>,
}

fn edge(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

impl HeteroGraph {
    pub fn build(doc: &Document) -> Self {
        let order = doc.mentions_in_document_order();
        let mut nodes = Vec::new();
        let mut mention_node = vec![0; doc.mentions.len()];
        for &m in &order {
            mention_node[m] = nodes.len();
            nodes.push(GraphNode {
                node_id: nodes.len(),
                kind: NodeKind::Mention,
                anchor: m,
            });
        }
        let entity_node: Vec<usize> = doc
            .entities
            .iter()
            .map(|e| {
                nodes.push(GraphNode {
                    node_id: nodes.len(),
                    kind: NodeKind::Entity,
                    anchor: e.entity_id,
                });
                nodes.len() - 1
            })
            .collect();
        let sentence_node: Vec<usize> = (0..doc.sentences.len())
            .map(|s| {
                nodes.push(GraphNode {
                    node_id: nodes.len(),
                    kind: NodeKind::Sentence,
                    anchor: s,
                });
                nodes.len() - 1
            })
            .collect();

        let mut edges: BTreeMap<EdgeType, EdgeSet> =
            EdgeType::ALL.iter().map(|&t| (t, EdgeSet::new())).collect();
        let mut by_sentence: BTreeMap<usize, Vec<&Mention>> = BTreeMap::new();
        for m in &doc.mentions {
            by_sentence.entry(m.sent_index).or_default().push(m);
        }
        for ms in by_sentence.values() {
            for (i, a) in ms.iter().enumerate() {
                for b in &ms[i + 1..] {
                    edges
                        .get_mut(&EdgeType::MM)
                        .unwrap()
                        .insert(edge(mention_node[a.mention_id], mention_node[b.mention_id]));
                }
            }
        }
        for m in &doc.mentions {
            let mn = mention_node[m.mention_id];
            let en = entity_node[m.entity_id];
            let sn = sentence_node[m.sent_index];
            edges.get_mut(&EdgeType::ME).unwrap().insert(edge(mn, en));
            edges.get_mut(&EdgeType::MS).unwrap().insert(edge(mn, sn));
            edges.get_mut(&EdgeType::ES).unwrap().insert(edge(en, sn));
        }
        for (i, &a) in sentence_node.iter().enumerate() {
            for &b in &sentence_node[i + 1..] {
                edges.get_mut(&EdgeType::SS).unwrap().insert(edge(a, b));
            }
        }

        HeteroGraph {
            nodes,
            edges,
            mention_node,
            entity_node,
            sentence_node,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.values().map(BTreeSet::len).sum()
    }

    pub fn edges_of(&self, t: EdgeType) -> &EdgeSet {
        &self.edges[&t]
    }

    pub fn mention_node(&self, mention_id: usize) -> usize {
        self.mention_node[mention_id]
    }

    pub fn entity_node(&self, entity_id: usize) -> usize {
        self.entity_node[entity_id]
    }

    pub fn sentence_node(&self, sent_index: usize) -> usize {
        self.sentence_node[sent_index]
    }

    pub fn entity_nodes(&self) -> &[usize] {
        &self.entity_node
    }

    /// For one edge type, each node's mean over its neighbours. Nodes
    /// without neighbours of that type get an empty (zero) row.
    pub fn neighbor_mean(&self, t: EdgeType) -> RowMix {
        neighbor_mean(self.num_nodes(), &self.edges[&t])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graphs serialize")
    }
}

pub fn neighbor_mean(num_nodes: usize, edges: &EdgeSet) -> RowMix {
    let mut neighbors = vec![Vec::new(); num_nodes];
    for &(a, b) in edges {
        neighbors[a].push(b);
        neighbors[b].push(a);
    }
    RowMix::mean_groups(&neighbors, num_nodes)
}

/// Edge map of a document.
pub fn build_edges(doc: &Document) -> BTreeMap<EdgeType, EdgeSet> {
    HeteroGraph::build(doc).edges
}

/// Trainable type vectors `t_m`, `t_e`, `t_s`.
pub fn type_param_specs(type_dim: usize) -> Vec<ParamSpec> {
    [TYPE_MENTION, TYPE_ENTITY, TYPE_SENTENCE]
        .into_iter()
        .map(|n| {
            let mut s = ParamSpec::weight(n, 1, type_dim);
            s.init = crate::params::Init::Normal { fan_in: 1 };
            s
        })
        .collect()
}

fn check_span(doc: &Document, m: &Mention, num_words: usize) -> Result<std::ops::Range<usize>> {
    if m.span.is_empty() {
        return Err(Error::validation(&doc.doc_id, format!("mention {} has an empty span", m.mention_id)));
    }
    let r = doc.mention_word_range(m);
    if r.end > num_words {
        return Err(Error::validation(&doc.doc_id, format!("mention {} exceeds the text", m.mention_id)));
    }
    Ok(r)
}

/// Word-average parts of mention, entity and sentence nodes, in node order.
pub struct NodeWordParts {
    pub mentions: RowMix,
    /// Averages over the mention rows (not the word rows).
    pub entities: RowMix,
    pub sentences: RowMix,
}

impl NodeWordParts {
    pub fn new(doc: &Document, graph: &HeteroGraph) -> Result<Self> {
        let k = doc.num_words();
        let n_m = doc.mentions.len();
        let mut mention_groups = vec![Vec::new(); n_m];
        for m in &doc.mentions {
            mention_groups[graph.mention_node(m.mention_id)] = check_span(doc, m, k)?.collect();
        }
        let entity_groups: Vec<Vec<usize>> = doc
            .entities
            .iter()
            .map(|e| e.mention_ids.iter().map(|&m| graph.mention_node(m)).collect())
            .collect();
        let offsets = doc.sentence_offsets();
        let mut sentence_groups = Vec::with_capacity(doc.sentences.len());
        for (i, s) in doc.sentences.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::validation(&doc.doc_id, format!("sentence {i} is empty")));
            }
            sentence_groups.push((offsets[i]..offsets[i] + s.len()).collect::<Vec<_>>());
        }
        Ok(NodeWordParts {
            mentions: RowMix::mean_groups(&mention_groups, k),
            entities: RowMix::mean_groups(&entity_groups, n_m),
            sentences: RowMix::mean_groups(&sentence_groups, k),
        })
    }
}

/// Initial node features `[word average ; type vector]` on the tape.
///
/// Entity nodes average only the word parts of their mentions, so all three
/// node kinds share one width `d_p + d_t`.
pub fn node_features_on_tape(
    t: &mut Tape,
    params: &ParamStore,
    doc: &Document,
    graph: &HeteroGraph,
    projected: Var,
) -> Result<Var> {
    let parts = NodeWordParts::new(doc, graph)?;
    let n_m = parts.mentions.out_rows();
    let n_e = parts.entities.out_rows();
    let n_s = parts.sentences.out_rows();
    let mention_words = t.mix(projected, parts.mentions);
    let entity_words = t.mix(mention_words, parts.entities);
    let sentence_words = t.mix(projected, parts.sentences);

    let mut blocks = Vec::new();
    for (words, rows, name) in [
        (mention_words, n_m, TYPE_MENTION),
        (entity_words, n_e, TYPE_ENTITY),
        (sentence_words, n_s, TYPE_SENTENCE),
    ] {
        if rows == 0 {
            continue;
        }
        let ty = t.param(params, name)?;
        let tiled = t.gather(ty, &vec![0; rows]);
        blocks.push(t.concat_cols(&[words, tiled]));
    }
    if blocks.is_empty() {
        return Err(Error::validation(&doc.doc_id, "document has no graph nodes"));
    }
    Ok(t.concat_rows(&blocks))
}

/// Mention node feature `[mean of projected rows over the span ; t_m]`.
pub fn init_mention_node(doc: &Document, m: &Mention, projected: &Matrix, t_m: &Matrix) -> Result<Matrix> {
    let r = check_span(doc, m, projected.nrows())?;
    let rows: Vec<usize> = r.collect();
    let avg = RowMix::mean_groups(&[rows], projected.nrows()).apply(projected);
    Ok(ndarray::concatenate![ndarray::Axis(1), avg, *t_m])
}

/// Entity node feature from its mentions' features, dropping their type parts.
pub fn init_entity_node(mention_features: &[Matrix], type_dim: usize, t_e: &Matrix) -> Result<Matrix> {
    let Some(first) = mention_features.first() else {
        return Err(Error::Config("entity node needs at least one mention".into()));
    };
    let width = first.ncols() - type_dim;
    let mut acc = Matrix::zeros((1, width));
    for f in mention_features {
        acc += &f.slice(ndarray::s![.., ..width]);
    }
    acc /= mention_features.len() as f64;
    Ok(ndarray::concatenate![ndarray::Axis(1), acc, *t_e])
}

/// Sentence node feature `[mean of the sentence's projected rows ; t_s]`.
pub fn init_sentence_node(doc: &Document, sent_index: usize, projected: &Matrix, t_s: &Matrix) -> Result<Matrix> {
    let len = doc.sentences.get(sent_index).map_or(0, Vec::len);
    if len == 0 {
        return Err(Error::validation(&doc.doc_id, format!("sentence {sent_index} is empty")));
    }
    let start = doc.sentence_offsets()[sent_index];
    let rows: Vec<usize> = (start..start + len).collect();
    let avg = RowMix::mean_groups(&[rows], projected.nrows()).apply(projected);
    Ok(ndarray::concatenate![ndarray::Axis(1), avg, *t_s])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub doc_id: String,
    pub nodes: BTreeMap<NodeKind, usize>,
    pub edges: BTreeMap<EdgeType, usize>,
}

pub fn graph_stats(doc: &Document, graph: &HeteroGraph) -> GraphStats {
    let mut nodes = BTreeMap::new();
    for n in &graph.nodes {
        *nodes.entry(n.kind).or_default() += 1;
    }
    GraphStats {
        doc_id: doc.doc_id.clone(),
        nodes,
        edges: graph.edges.iter().map(|(t, e)| (*t, e.len())).collect(),
    }
}
