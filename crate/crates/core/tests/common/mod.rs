#![allow(dead_code)]

use glre::corpus::{Document, Entity, Mention, RelationFact, Span, Split};
use glre::encoder::{EncoderBackend, ToyVocabulary};
use glre::model::{Glre, ModelConfig};

/// Builds a document from `(entity, sentence, start, end)` mentions. Words are
/// `s{i}w{j}` and every mention of entity `e` has surface `E{e}`.
pub fn doc(
    sentence_lengths: &[usize],
    mentions: &[(usize, usize, usize, usize)],
    num_entities: usize,
    facts: &[(usize, usize, usize)],
) -> Document {
    let sentences = sentence_lengths
        .iter()
        .enumerate()
        .map(|(i, &n)| (0..n).map(|j| format!("s{i}w{j}")).collect())
        .collect();
    let mut entities: Vec<Entity> = (0..num_entities)
        .map(|e| Entity {
            entity_id: e,
            mention_ids: vec![],
            entity_type: None,
            kb_id: None,
        })
        .collect();
    let mentions = mentions
        .iter()
        .enumerate()
        .map(|(i, &(e, s, a, b))| {
            entities[e].mention_ids.push(i);
            Mention {
                mention_id: i,
                entity_id: e,
                sent_index: s,
                span: Span::new(a, b),
                surface: format!("E{e}"),
            }
        })
        .collect();
    Document {
        doc_id: "fixture".into(),
        sentences,
        mentions,
        entities,
        gold_facts: facts
            .iter()
            .map(|&(h, t, r)| RelationFact {
                head_entity_id: h,
                tail_entity_id: t,
                relation_id: r,
            })
            .collect(),
        split: Split::Unknown,
    }
}

pub fn toy_model(config: ModelConfig, docs: &[Document]) -> Glre {
    let backend = EncoderBackend::Toy {
        vocab: ToyVocabulary::build(docs, 1),
        width: config.word_dim,
    };
    Glre::new(config, backend).expect("valid model")
}
