//! Annotated documents, label vocabularies and candidate pairs.
//!
//! Both input formats (DocRED JSON and PubTator) are parsed into the same
//! [`Document`] model. Entity and mention ids are positional: `entities[i]`
//! has `entity_id == i`, and likewise for mentions.

mod docred;
mod pubtator;
pub mod text;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use docred::{parse_docred, parse_docred_str};
pub use pubtator::{parse_pubtator, parse_pubtator_str, HypernymFilter, CDR_RELATION};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub mention_id: usize,
    pub entity_id: usize,
    pub sent_index: usize,
    /// Half-open word interval within the sentence.
    pub span: Span,
    pub surface: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_id: usize,
    pub mention_ids: Vec<usize>,
    #[serde(default)]
    pub entity_type: Option<String>,
    /// Knowledge-base identifier (e.g. a MeSH concept), when the source has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kb_id: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationFact {
    pub head_entity_id: usize,
    pub tail_entity_id: usize,
    pub relation_id: usize,
}

/// Which split a document came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Unknown,
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Vec<String>>,
    pub mentions: Vec<Mention>,
    pub entities: Vec<Entity>,
    pub gold_facts: Vec<RelationFact>,
    #[serde(default)]
    pub split: Split,
}

impl Document {
    pub fn num_words(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    /// Global index of the first word of each sentence.
    pub fn sentence_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.sentences.len());
        let mut acc = 0;
        for s in &self.sentences {
            offsets.push(acc);
            acc += s.len();
        }
        offsets
    }

    pub fn words(&self) -> impl Iterator<Item = &String> {
        self.sentences.iter().flatten()
    }

    /// Global word indices covered by a mention.
    pub fn mention_word_range(&self, mention: &Mention) -> std::ops::Range<usize> {
        let offset: usize = self.sentences[..mention.sent_index].iter().map(Vec::len).sum();
        offset + mention.span.start..offset + mention.span.end
    }

    pub fn entity(&self, entity_id: usize) -> Result<&Entity> {
        self.entities.get(entity_id).ok_or_else(|| Error::UnknownEntity {
            doc_id: self.doc_id.clone(),
            entity_id,
        })
    }

    pub fn entity_mentions(&self, entity_id: usize) -> Result<impl Iterator<Item = &Mention>> {
        let e = self.entity(entity_id)?;
        Ok(e.mention_ids.iter().map(|&m| &self.mentions[m]))
    }

    /// Surface of the entity's first listed mention.
    pub fn entity_name(&self, entity_id: usize) -> Result<&str> {
        let e = self.entity(entity_id)?;
        Ok(&self.mentions[e.mention_ids[0]].surface)
    }

    /// Mention ids sorted by position in the text.
    pub fn mentions_in_document_order(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.mentions.len()).collect();
        ids.sort_by_key(|&i| {
            let m = &self.mentions[i];
            (m.sent_index, m.span.start, m.span.end, m.mention_id)
        });
        ids
    }

    /// Checks every structural invariant of the annotation.
    pub fn validate(&self, num_relations: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::validation(&self.doc_id, msg));
        for (i, m) in self.mentions.iter().enumerate() {
            if m.mention_id != i {
                return bad(format!("mention at position {i} has id {}", m.mention_id));
            }
            let Some(sentence) = self.sentences.get(m.sent_index) else {
                return bad(format!(
                    "mention {i} refers to sentence {} of {}",
                    m.sent_index,
                    self.sentences.len()
                ));
            };
            if m.span.is_empty() || m.span.end > sentence.len() {
                return bad(format!(
                    "mention {i} span [{}, {}) out of range for sentence {} of length {}",
                    m.span.start,
                    m.span.end,
                    m.sent_index,
                    sentence.len()
                ));
            }
            match self.entities.get(m.entity_id) {
                Some(e) if e.mention_ids.contains(&i) => {}
                _ => return bad(format!("mention {i} is not listed by entity {}", m.entity_id)),
            }
        }
        let mut owner = vec![None; self.mentions.len()];
        for (i, e) in self.entities.iter().enumerate() {
            if e.entity_id != i {
                return bad(format!("entity at position {i} has id {}", e.entity_id));
            }
            if e.mention_ids.is_empty() {
                return bad(format!("entity {i} has no mentions"));
            }
            let mut seen = HashSet::new();
            for &m in &e.mention_ids {
                if m >= self.mentions.len() || !seen.insert(m) {
                    return bad(format!("entity {i} lists invalid or repeated mention {m}"));
                }
                if owner[m].replace(i).is_some() {
                    return bad(format!("mention {m} belongs to more than one entity"));
                }
            }
        }
        for f in &self.gold_facts {
            if f.head_entity_id >= self.entities.len() || f.tail_entity_id >= self.entities.len() {
                return bad(format!("fact {f:?} references a missing entity"));
            }
            if f.head_entity_id == f.tail_entity_id {
                return bad(format!("fact {f:?} relates an entity to itself"));
            }
            if f.relation_id >= num_relations {
                return bad(format!(
                    "fact {f:?} relation outside vocabulary of {num_relations}"
                ));
            }
        }
        Ok(())
    }
}

/// Ordered relation names. N/A is not a member.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    names: Vec<String>,
}

impl LabelVocabulary {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = LabelVocabulary::default();
        for name in names {
            let name = name.into();
            if vocab.id(&name).is_some() {
                return Err(Error::Config(format!("duplicate relation name {name}")));
            }
            vocab.names.push(name);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Returns the id of `name`, appending it when unseen.
    pub fn intern(&mut self, name: &str) -> usize {
        match self.id(name) {
            Some(i) => i,
            None => {
                self.names.push(name.to_string());
                self.names.len() - 1
            }
        }
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Which ordered entity pairs are candidates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairMode {
    /// Every ordered pair of distinct entities.
    #[default]
    AllOrdered,
    /// Chemical heads with disease tails.
    ChemicalDisease,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub head: usize,
    pub tail: usize,
    /// One flag per relation; all false marks an N/A instance.
    pub labels: Vec<bool>,
}

impl CandidatePair {
    pub fn is_negative(&self) -> bool {
        !self.labels.iter().any(|&l| l)
    }
}

fn type_matches(entity: &Entity, wanted: &str) -> bool {
    entity
        .entity_type
        .as_deref()
        .is_some_and(|t| t.eq_ignore_ascii_case(wanted))
}

/// Enumerates candidate pairs with their label vectors.
pub fn enumerate_pairs(doc: &Document, num_relations: usize, mode: PairMode) -> Vec<CandidatePair> {
    let mut labels: BTreeMap<(usize, usize), Vec<bool>> = BTreeMap::new();
    for f in &doc.gold_facts {
        labels
            .entry((f.head_entity_id, f.tail_entity_id))
            .or_insert_with(|| vec![false; num_relations])[f.relation_id] = true;
    }
    let mut pairs = Vec::new();
    for a in &doc.entities {
        for b in &doc.entities {
            if a.entity_id == b.entity_id {
                continue;
            }
            if mode == PairMode::ChemicalDisease
                && !(type_matches(a, "chemical") && type_matches(b, "disease"))
            {
                continue;
            }
            let key = (a.entity_id, b.entity_id);
            pairs.push(CandidatePair {
                head: a.entity_id,
                tail: b.entity_id,
                labels: labels
                    .get(&key)
                    .cloned()
                    .unwrap_or_else(|| vec![false; num_relations]),
            });
        }
    }
    pairs
}

/// Minimum sentence-index gap between any mention of `a` and any mention of `b`.
pub fn entity_distance(doc: &Document, a: usize, b: usize) -> Result<usize> {
    let sa: BTreeSet<usize> = doc.entity_mentions(a)?.map(|m| m.sent_index).collect();
    let sb: BTreeSet<usize> = doc.entity_mentions(b)?.map(|m| m.sent_index).collect();
    Ok(sa
        .iter()
        .flat_map(|x| sb.iter().map(move |y| x.abs_diff(*y)))
        .min()
        .expect("entities have at least one mention"))
}

pub fn avg_mention_count(doc: &Document, a: usize, b: usize) -> Result<f64> {
    let na = doc.entity(a)?.mention_ids.len();
    let nb = doc.entity(b)?.mention_ids.len();
    Ok((na + nb) as f64 / 2.0)
}

/// Concatenates train and dev, tagging each document with its split.
pub fn merge_train_dev(train: Vec<Document>, dev: Vec<Document>) -> Result<Vec<Document>> {
    let mut seen = HashSet::new();
    let mut merged = Vec::with_capacity(train.len() + dev.len());
    for (split, docs) in [(Split::Train, train), (Split::Dev, dev)] {
        for mut doc in docs {
            if !seen.insert(doc.doc_id.clone()) {
                return Err(Error::validation(&doc.doc_id, "doc_id appears in both splits"));
            }
            doc.split = split;
            merged.push(doc);
        }
    }
    Ok(merged)
}

#[derive(Serialize)]
struct CanonicalRef<'a> {
    format_version: u32,
    #[serde(flatten)]
    doc: &'a Document,
}

#[derive(Deserialize)]
struct CanonicalOwned {
    format_version: u32,
    #[serde(flatten)]
    doc: Document,
}

/// One document as a single canonical JSON line.
pub fn to_canonical_json(doc: &Document) -> String {
    serde_json::to_string(&CanonicalRef {
        format_version: FORMAT_VERSION,
        doc,
    })
    .expect("documents always serialize")
}

pub fn from_canonical_json(line: &str, index: usize) -> Result<Document> {
    let c: CanonicalOwned = serde_json::from_str(line).map_err(|e| Error::Parse {
        index,
        message: e.to_string(),
    })?;
    if c.format_version != FORMAT_VERSION {
        return Err(Error::validation(
            &c.doc.doc_id,
            format!("unsupported format_version {}", c.format_version),
        ));
    }
    Ok(c.doc)
}

pub fn write_canonical(path: &Path, docs: &[Document]) -> Result<()> {
    let mut out = Vec::new();
    for doc in docs {
        out.extend_from_slice(to_canonical_json(doc).as_bytes());
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_canonical(path: &Path) -> Result<Vec<Document>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(from_canonical_json(&line, i)?);
    }
    Ok(docs)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    fn words(n: usize, tag: &str) -> Vec<String> {
        (0..n).map(|i| format!("{tag}{i}")).collect()
    }

    /// Builds a document from `(entity, sentence, start, end)` mention tuples.
    pub fn doc_with_mentions(
        sentence_lengths: &[usize],
        mentions: &[(usize, usize, usize, usize)],
        num_entities: usize,
        facts: &[(usize, usize, usize)],
    ) -> Document {
        let sentences = sentence_lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| words(n, &format!("s{i}w")))
            .collect();
        let mut entities: Vec<Entity> = (0..num_entities)
            .map(|i| Entity {
                entity_id: i,
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
}

#[cfg(test)]
mod tests {
    use super::fixtures::doc_with_mentions;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_entities_give_six_ordered_pairs() {
        let doc = doc_with_mentions(&[5], &[(0, 0, 0, 1), (1, 0, 1, 2), (2, 0, 2, 3)], 3, &[]);
        assert_eq!(enumerate_pairs(&doc, 2, PairMode::AllOrdered).len(), 6);
    }

    #[test]
    fn single_entity_has_no_pairs() {
        let doc = doc_with_mentions(&[3], &[(0, 0, 0, 1)], 1, &[]);
        assert!(enumerate_pairs(&doc, 1, PairMode::AllOrdered).is_empty());
    }

    #[test]
    fn chemical_disease_mode_restricts_types() {
        let mut doc = doc_with_mentions(&[6], &[(0, 0, 0, 1), (1, 0, 1, 2), (2, 0, 2, 3)], 3, &[]);
        doc.entities[0].entity_type = Some("Chemical".into());
        doc.entities[1].entity_type = Some("Chemical".into());
        doc.entities[2].entity_type = Some("Disease".into());
        let pairs = enumerate_pairs(&doc, 1, PairMode::ChemicalDisease);
        let ids: Vec<_> = pairs.iter().map(|p| (p.head, p.tail)).collect();
        assert_eq!(ids, vec![(0, 2), (1, 2)]);
    }

    #[test]
    fn multi_label_facts_share_one_pair() {
        let doc = doc_with_mentions(&[4], &[(0, 0, 0, 1), (1, 0, 2, 3)], 2, &[(0, 1, 0), (0, 1, 2)]);
        let pairs = enumerate_pairs(&doc, 3, PairMode::AllOrdered);
        assert_eq!(pairs[0].labels, vec![true, false, true]);
        assert!(pairs[1].is_negative());
    }

    #[test]
    fn distance_takes_minimum_over_mention_pairs() {
        // A in sentences {1, 4}, B in {2, 6}
        let doc = doc_with_mentions(
            &[2; 7],
            &[(0, 1, 0, 1), (0, 4, 0, 1), (1, 2, 0, 1), (1, 6, 0, 1)],
            2,
            &[],
        );
        assert_eq!(entity_distance(&doc, 0, 1).unwrap(), 1);
    }

    #[test]
    fn distance_edge_cases() {
        let same = doc_with_mentions(&[3], &[(0, 0, 0, 1), (1, 0, 1, 2)], 2, &[]);
        assert_eq!(entity_distance(&same, 0, 1).unwrap(), 0);
        let far = doc_with_mentions(&[1; 6], &[(0, 0, 0, 1), (1, 5, 0, 1)], 2, &[]);
        assert_eq!(entity_distance(&far, 0, 1).unwrap(), 5);
        assert!(matches!(
            entity_distance(&far, 0, 9),
            Err(Error::UnknownEntity { entity_id: 9, .. })
        ));
    }

    #[test]
    fn avg_mention_count_is_mean() {
        let mentions: Vec<_> = (0..3)
            .map(|i| (0, 0, i, i + 1))
            .chain((0..5).map(|i| (1, 1, i, i + 1)))
            .collect();
        let doc = doc_with_mentions(&[3, 5], &mentions, 2, &[]);
        assert_eq!(avg_mention_count(&doc, 0, 1).unwrap(), 4.0);
        let doc = doc_with_mentions(&[3], &[(0, 0, 0, 1), (1, 0, 1, 2)], 2, &[]);
        assert_eq!(avg_mention_count(&doc, 0, 1).unwrap(), 1.0);
        let doc = doc_with_mentions(
            &[5],
            &[(0, 0, 0, 1), (0, 0, 1, 2), (1, 0, 2, 3), (1, 0, 3, 4), (1, 0, 4, 5)],
            2,
            &[],
        );
        assert_eq!(avg_mention_count(&doc, 0, 1).unwrap(), 2.5);
    }

    #[test]
    fn merge_rejects_overlapping_ids() {
        let a = doc_with_mentions(&[1], &[(0, 0, 0, 1)], 1, &[]);
        let err = merge_train_dev(vec![a.clone()], vec![a]).unwrap_err();
        assert_eq!(err.doc_id(), Some("fixture"));
    }

    #[test]
    fn merge_with_empty_dev_keeps_train() {
        let a = doc_with_mentions(&[1], &[(0, 0, 0, 1)], 1, &[]);
        let merged = merge_train_dev(vec![a.clone()], vec![]).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].split, Split::Train);
        assert_eq!(merged[0].sentences, a.sentences);
    }

    #[test]
    fn validate_rejects_out_of_range_span() {
        let doc = doc_with_mentions(&[2], &[(0, 0, 1, 3)], 1, &[]);
        assert!(matches!(doc.validate(1), Err(Error::Validation { .. })));
    }

    #[test]
    fn validate_rejects_self_relation() {
        let doc = doc_with_mentions(&[2], &[(0, 0, 0, 1)], 1, &[(0, 0, 0)]);
        assert!(doc.validate(1).is_err());
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        assert!(LabelVocabulary::new(["P17", "P17"]).is_err());
        let mut v = LabelVocabulary::new(["CID"]).unwrap();
        assert_eq!(v.intern("CID"), 0);
        assert_eq!(v.intern("X"), 1);
    }

    fn arb_doc() -> impl Strategy<Value = Document> {
        (1usize..5, 1usize..6).prop_flat_map(|(n_sent, n_ent)| {
            let mention = (0..n_ent, 0..n_sent, 0usize..3);
            (
                proptest::collection::vec(mention, n_ent..n_ent + 6),
                proptest::collection::vec((0..n_ent, 0..n_ent, 0usize..3), 0..4),
            )
                .prop_map(move |(ms, facts)| {
                    // every entity gets at least its own first mention
                    let mut tuples: Vec<_> = (0..n_ent).map(|e| (e, e % n_sent, 0, 1)).collect();
                    tuples.extend(ms.into_iter().map(|(e, s, w)| (e, s, w, w + 1)));
                    let facts: Vec<_> = facts.into_iter().filter(|(h, t, _)| h != t).collect();
                    doc_with_mentions(&vec![4; n_sent], &tuples, n_ent, &facts)
                })
        })
    }

    proptest! {
        #[test]
        fn canonical_round_trip(doc in arb_doc()) {
            doc.validate(3).unwrap();
            let line = to_canonical_json(&doc);
            prop_assert_eq!(from_canonical_json(&line, 0).unwrap(), doc);
        }

        #[test]
        fn positive_plus_negative_pairs_cover_all(doc in arb_doc()) {
            let pairs = enumerate_pairs(&doc, 3, PairMode::AllOrdered);
            let n = doc.entities.len();
            let pos = pairs.iter().filter(|p| !p.is_negative()).count();
            let neg = pairs.iter().filter(|p| p.is_negative()).count();
            prop_assert_eq!(pos + neg, n * (n - 1));
        }

        #[test]
        fn distance_is_symmetric_and_zero_iff_shared_sentence(doc in arb_doc()) {
            for a in 0..doc.entities.len() {
                for b in 0..doc.entities.len() {
                    let d = entity_distance(&doc, a, b).unwrap();
                    prop_assert_eq!(d, entity_distance(&doc, b, a).unwrap());
                    let sa: BTreeSet<_> = doc.entity_mentions(a).unwrap().map(|m| m.sent_index).collect();
                    let shares = doc.entity_mentions(b).unwrap().any(|m| sa.contains(&m.sent_index));
                    prop_assert_eq!(d == 0, shares);
                }
            }
        }
    }
}
