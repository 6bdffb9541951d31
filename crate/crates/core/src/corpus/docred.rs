use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{DeserializeSeed, SeqAccess, Visitor};
use serde::Deserialize;
use serde_json::Value;

use super::{Document, Entity, LabelVocabulary, Mention, RelationFact, Span, Split};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Record {
    title: String,
    sents: Vec<Vec<String>>,
    #[serde(rename = "vertexSet")]
    vertex_set: Vec<Vec<RawMention>>,
    #[serde(default)]
    labels: Vec<RawLabel>,
}

#[derive(Deserialize)]
struct RawMention {
    name: String,
    sent_id: usize,
    pos: Vec<usize>,
    #[serde(rename = "type", default)]
    kind: Option<String>,
}

#[derive(Deserialize)]
struct RawLabel {
    h: usize,
    t: usize,
    r: String,
}

/// Collects array elements one by one so a failure can name its record.
struct RecordCollector<'a>(&'a RefCell<Vec<Value>>);

impl<'de> DeserializeSeed<'de> for RecordCollector<'_> {
    type Value = ();

    fn deserialize<D: serde::Deserializer<'de>>(self, d: D) -> std::result::Result<(), D::Error> {
        d.deserialize_seq(self)
    }
}

impl<'de> Visitor<'de> for RecordCollector<'_> {
    type Value = ();

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a JSON array of DocRED records")
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<(), A::Error> {
        while let Some(v) = seq.next_element::<Value>()? {
            self.0.borrow_mut().push(v);
        }
        Ok(())
    }
}

/// Parses a DocRED JSON array. Unseen relation names are appended to `vocab`.
pub fn parse_docred_str(json: &str, vocab: &mut LabelVocabulary) -> Result<Vec<Document>> {
    let records = RefCell::new(Vec::new());
    let mut de = serde_json::Deserializer::from_str(json);
    let outcome = RecordCollector(&records)
        .deserialize(&mut de)
        .and_then(|()| de.end());
    let records = records.into_inner();
    if let Err(e) = outcome {
        return Err(Error::Parse {
            index: records.len(),
            message: e.to_string(),
        });
    }

    let mut docs = Vec::with_capacity(records.len());
    for (index, value) in records.into_iter().enumerate() {
        let title = value.get("title").and_then(Value::as_str).map(str::to_string);
        let record: Record = serde_json::from_value(value).map_err(|e| match title {
            Some(doc_id) => Error::Data {
                doc_id,
                message: format!("record {index}: {e}"),
            },
            None => Error::Parse {
                index,
                message: e.to_string(),
            },
        })?;
        docs.push(convert(record, vocab)?);
    }
    Ok(docs)
}

pub fn parse_docred(path: &Path, vocab: &mut LabelVocabulary) -> Result<Vec<Document>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_docred_str(&text, vocab)
}

fn convert(record: Record, vocab: &mut LabelVocabulary) -> Result<Document> {
    let doc_id = record.title;
    let mut mentions = Vec::new();
    let mut entities = Vec::with_capacity(record.vertex_set.len());
    for (entity_id, cluster) in record.vertex_set.into_iter().enumerate() {
        let entity_type = cluster.first().and_then(|m| m.kind.clone());
        let mut mention_ids = Vec::with_capacity(cluster.len());
        for raw in cluster {
            let [start, end] = raw.pos[..] else {
                return Err(Error::validation(
                    &doc_id,
                    format!("mention {:?} has pos of length {}", raw.name, raw.pos.len()),
                ));
            };
            mention_ids.push(mentions.len());
            mentions.push(Mention {
                mention_id: mentions.len(),
                entity_id,
                sent_index: raw.sent_id,
                span: Span::new(start, end),
                surface: raw.name,
            });
        }
        entities.push(Entity {
            entity_id,
            mention_ids,
            entity_type,
            kb_id: None,
        });
    }

    // duplicate (h, t, r) rows collapse; distinct r for one pair become a label set
    let facts: BTreeSet<RelationFact> = record
        .labels
        .iter()
        .map(|l| RelationFact {
            head_entity_id: l.h,
            tail_entity_id: l.t,
            relation_id: vocab.intern(&l.r),
        })
        .collect();

    let doc = Document {
        doc_id,
        sentences: record.sents,
        mentions,
        entities,
        gold_facts: facts.into_iter().collect(),
        split: Split::Unknown,
    };
    doc.validate(vocab.len())?;
    Ok(doc)
}
