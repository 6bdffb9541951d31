//! Seeded synthetic documents for tests, demos and overfitting checks.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Document, Entity, LabelVocabulary, Mention, RelationFact, Span, Split};

const FILLERS: &[&str] = &[
    "the", "of", "was", "in", "and", "after", "with", "reported", "a", "to", "by", "near", "during", "from",
];
const SYLLABLES: &[&str] = &["ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "ze", "pa", "qu", "di"];

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub sentences: Range<usize>,
    pub fillers_per_sentence: Range<usize>,
    pub entities: Range<usize>,
    pub mentions_per_entity: Range<usize>,
    pub mention_len: Range<usize>,
    pub num_relations: usize,
    pub facts: Range<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            sentences: 1..6,
            fillers_per_sentence: 1..8,
            entities: 2..7,
            mentions_per_entity: 1..4,
            mention_len: 1..3,
            num_relations: 3,
            facts: 0..5,
        }
    }
}

fn name<R: Rng + ?Sized>(rng: &mut R) -> String {
    (0..3).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect()
}

/// A valid document drawn from `spec`. Mentions never overlap.
pub fn random_document<R: Rng + ?Sized>(doc_id: &str, spec: &SyntheticSpec, rng: &mut R) -> Document {
    let n_sent = rng.random_range(spec.sentences.clone());
    let n_ent = rng.random_range(spec.entities.clone());
    let names: Vec<String> = (0..n_ent).map(|_| name(rng)).collect();
    // per sentence: (entity, length) of each mention, in order of appearance
    let mut placed: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_sent];
    for e in 0..n_ent {
        for _ in 0..rng.random_range(spec.mentions_per_entity.clone()) {
            let s = rng.random_range(0..n_sent);
            let len = rng.random_range(spec.mention_len.clone());
            placed[s].push((e, len));
        }
    }
    let mut sentences = Vec::with_capacity(n_sent);
    let mut raw_mentions = Vec::new();
    for (s, slots) in placed.iter_mut().enumerate() {
        slots.shuffle(rng);
        let fillers = rng.random_range(spec.fillers_per_sentence.clone());
        let mut items: Vec<Option<(usize, usize)>> = vec![None; fillers];
        for &slot in slots.iter() {
            let at = rng.random_range(0..=items.len());
            items.insert(at, Some(slot));
        }
        let mut words = Vec::new();
        for item in items {
            match item {
                None => words.push(FILLERS.choose(rng).expect("non-empty").to_string()),
                Some((e, len)) => {
                    let start = words.len();
                    for k in 0..len {
                        words.push(if k == 0 { names[e].clone() } else { format!("{}{k}", names[e]) });
                    }
                    raw_mentions.push((e, s, start, start + len));
                }
            }
        }
        if words.is_empty() {
            words.push(FILLERS[0].to_string());
        }
        sentences.push(words);
    }
    let mut entities: Vec<Entity> = (0..n_ent)
        .map(|e| Entity {
            entity_id: e,
            mention_ids: vec![],
            entity_type: None,
            kb_id: None,
        })
        .collect();
    let mentions: Vec<Mention> = raw_mentions
        .into_iter()
        .enumerate()
        .map(|(i, (e, s, a, b))| {
            entities[e].mention_ids.push(i);
            Mention {
                mention_id: i,
                entity_id: e,
                sent_index: s,
                span: Span::new(a, b),
                surface: sentences[s][a..b].join(" "),
            }
        })
        .collect();
    let mut facts = BTreeSet::new();
    if n_ent >= 2 {
        for _ in 0..rng.random_range(spec.facts.clone()) {
            let h = rng.random_range(0..n_ent);
            let t = (h + rng.random_range(1..n_ent)) % n_ent;
            facts.insert(RelationFact {
                head_entity_id: h,
                tail_entity_id: t,
                relation_id: rng.random_range(0..spec.num_relations),
            });
        }
    }
    Document {
        doc_id: doc_id.to_string(),
        sentences,
        mentions,
        entities,
        gold_facts: facts.into_iter().collect(),
        split: Split::Unknown,
    }
}

/// Ten small training documents with three relation types and at most six entities each.
pub fn overfit_corpus(seed: u64) -> (Vec<Document>, LabelVocabulary) {
    let spec = SyntheticSpec {
        sentences: 2..5,
        fillers_per_sentence: 2..7,
        entities: 3..7,
        mentions_per_entity: 1..3,
        mention_len: 1..3,
        num_relations: 3,
        facts: 2..6,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs: Vec<Document> = (0..10).map(|i| random_document(&format!("doc{i:02}"), &spec, &mut rng)).collect();
    for d in &mut docs {
        d.split = Split::Train;
    }
    let vocab = LabelVocabulary::new(["founded_by", "located_in", "part_of"]).expect("distinct labels");
    (docs, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    proptest::proptest! {
        #[test]
        fn random_documents_validate(seed in 0u64..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = SyntheticSpec::default();
            let d = random_document("r", &spec, &mut rng);
            proptest::prop_assert!(d.validate(spec.num_relations).is_ok());
            for m in &d.mentions {
                proptest::prop_assert_eq!(&m.surface, &d.sentences[m.sent_index][m.span.start..m.span.end].join(" "));
            }
        }
    }

    #[test]
    fn overfit_corpus_shape() {
        let (docs, vocab) = overfit_corpus(7);
        assert_eq!(docs.len(), 10);
        assert_eq!(vocab.len(), 3);
        assert!(docs.iter().all(|d| d.entities.len() <= 6 && !d.gold_facts.is_empty()));
        assert_eq!(overfit_corpus(7).0, docs);
    }
}
