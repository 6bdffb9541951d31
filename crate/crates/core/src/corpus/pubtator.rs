use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use super::text::{split_sentences, tokenize};
use super::{CandidatePair, Document, Entity, Mention, RelationFact, Span, Split};
use crate::error::{Error, Result};

/// The single CDR relation, chemical-induced disease.
pub const CDR_RELATION: &str = "CID";

struct Annotation {
    start: usize,
    end: usize,
    text: String,
    kind: String,
    concepts: Vec<String>,
}

#[derive(Default)]
struct Block {
    pmid: String,
    title: Option<String>,
    abstract_text: Option<String>,
    annotations: Vec<Annotation>,
    relations: Vec<(String, String)>,
}

fn parse_blocks(input: &str) -> Result<Vec<Block>> {
    let mut blocks = Vec::new();
    let mut current: Option<Block> = None;
    for (lineno, line) in input.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            blocks.extend(current.take());
            continue;
        }
        let block = current.get_or_insert_with(Block::default);
        let bad = |msg: &str| Error::Parse {
            index: blocks.len(),
            message: format!("line {}: {msg}", lineno + 1),
        };
        if let Some((pmid, rest)) = line.split_once("|t|") {
            block.pmid = pmid.to_string();
            block.title = Some(rest.to_string());
            continue;
        }
        if let Some((pmid, rest)) = line.split_once("|a|") {
            block.pmid = pmid.to_string();
            block.abstract_text = Some(rest.to_string());
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            [_, "CID", chem, dis, ..] => block.relations.push((chem.to_string(), dis.to_string())),
            [_, start, end, text, kind, concept, ..] => {
                let start = start.parse().map_err(|_| bad("bad start offset"))?;
                let end = end.parse().map_err(|_| bad("bad end offset"))?;
                let concepts: Vec<String> = concept
                    .split('|')
                    .map(str::trim)
                    .filter(|c| !c.is_empty() && *c != "-1")
                    .map(String::from)
                    .collect();
                block.annotations.push(Annotation {
                    start,
                    end,
                    text: text.to_string(),
                    kind: kind.to_string(),
                    concepts,
                });
            }
            _ => return Err(bad("unrecognized line")),
        }
    }
    blocks.extend(current);
    Ok(blocks)
}

fn convert(block: Block) -> Result<Document> {
    let doc_id = block.pmid.clone();
    let invalid = |msg: String| Error::validation(&doc_id, msg);
    let title = block.title.ok_or_else(|| invalid("missing title line".into()))?;
    let abstract_text = block.abstract_text.unwrap_or_default();
    let text = format!("{title} {abstract_text}");
    let chars: Vec<char> = text.chars().collect();
    let title_len = title.chars().count();

    let mut annotations = block.annotations;
    annotations.retain(|a| !a.concepts.is_empty());
    annotations.sort_by_key(|a| (a.start, a.end));
    for a in &annotations {
        if a.start >= a.end || a.end > chars.len() {
            return Err(invalid(format!(
                "annotation [{}, {}) outside text of length {}",
                a.start,
                a.end,
                chars.len()
            )));
        }
        let covered: String = chars[a.start..a.end].iter().collect();
        if covered != a.text {
            return Err(invalid(format!(
                "annotation [{}, {}) covers {covered:?}, expected {:?}",
                a.start, a.end, a.text
            )));
        }
    }

    let protected: Vec<_> = annotations.iter().map(|a| a.start..a.end).collect();
    let sentence_ranges = split_sentences(&chars, &protected, &[title_len]);
    let forced: BTreeSet<usize> = annotations.iter().flat_map(|a| [a.start, a.end]).collect();
    let sentence_tokens: Vec<_> = sentence_ranges
        .iter()
        .map(|r| tokenize(&chars, r.clone(), &forced))
        .collect();

    let locate = |a: &Annotation| -> Result<(usize, Span)> {
        for (s, tokens) in sentence_tokens.iter().enumerate() {
            let first = tokens.iter().position(|t| t.start == a.start);
            let last = tokens.iter().position(|t| t.end == a.end);
            if let (Some(i), Some(j)) = (first, last) {
                if i <= j {
                    return Ok((s, Span::new(i, j + 1)));
                }
            }
        }
        Err(Error::validation(
            &doc_id,
            format!("annotation [{}, {}) is not aligned to tokens", a.start, a.end),
        ))
    };

    let mut entity_of: BTreeMap<String, usize> = BTreeMap::new();
    let mut entities: Vec<Entity> = Vec::new();
    let mut mentions = Vec::new();
    for a in &annotations {
        let (sent_index, span) = locate(a)?;
        // a composite concept yields one mention per concept
        for concept in &a.concepts {
            let entity_id = *entity_of.entry(concept.clone()).or_insert_with(|| {
                entities.push(Entity {
                    entity_id: entities.len(),
                    mention_ids: vec![],
                    entity_type: Some(a.kind.clone()),
                    kb_id: Some(concept.clone()),
                });
                entities.len() - 1
            });
            entities[entity_id].mention_ids.push(mentions.len());
            mentions.push(Mention {
                mention_id: mentions.len(),
                entity_id,
                sent_index,
                span,
                surface: a.text.clone(),
            });
        }
    }

    let mut facts = BTreeSet::new();
    for (chem, dis) in &block.relations {
        let lookup = |c: &String| {
            entity_of
                .get(c)
                .copied()
                .ok_or_else(|| invalid(format!("CID line names unknown concept {c}")))
        };
        facts.insert(RelationFact {
            head_entity_id: lookup(chem)?,
            tail_entity_id: lookup(dis)?,
            relation_id: 0,
        });
    }

    let doc = Document {
        doc_id: doc_id.clone(),
        sentences: sentence_tokens
            .into_iter()
            .map(|ts| ts.into_iter().map(|t| t.text).collect())
            .collect(),
        mentions,
        entities,
        gold_facts: facts.into_iter().collect(),
        split: Split::Unknown,
    };
    doc.validate(1)?;
    Ok(doc)
}

pub fn parse_pubtator_str(input: &str) -> Result<Vec<Document>> {
    parse_blocks(input)?.into_iter().map(convert).collect()
}

pub fn parse_pubtator(path: &Path) -> Result<Vec<Document>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pubtator_str(&text)
}

/// Optional removal of negative chemical-disease pairs whose disease is a
/// hypernym of a disease the same chemical is positively related to.
///
/// Off by default; it needs an external concept hierarchy.
#[derive(Clone, Debug, Default)]
pub struct HypernymFilter {
    /// child concept → direct parents
    parents: Option<BTreeMap<String, BTreeSet<String>>>,
}

impl HypernymFilter {
    pub fn disabled() -> Self {
        Self::default()
    }

    /// Reads `child<TAB>parent` lines.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut parents: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (child, parent) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("bad hierarchy line {line:?}")))?;
            parents
                .entry(child.trim().to_string())
                .or_default()
                .insert(parent.trim().to_string());
        }
        Ok(HypernymFilter {
            parents: Some(parents),
        })
    }

    pub fn is_enabled(&self) -> bool {
        self.parents.is_some()
    }

    fn ancestors(&self, concept: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let Some(parents) = &self.parents else {
            return out;
        };
        let mut stack = vec![concept.to_string()];
        while let Some(c) = stack.pop() {
            for p in parents.get(&c).into_iter().flatten() {
                if out.insert(p.clone()) {
                    stack.push(p.clone());
                }
            }
        }
        out
    }

    pub fn filter_pairs(&self, doc: &Document, pairs: Vec<CandidatePair>) -> Vec<CandidatePair> {
        if !self.is_enabled() {
            return pairs;
        }
        let kb = |e: usize| doc.entities[e].kb_id.clone().unwrap_or_default();
        let mut covered: BTreeSet<(usize, String)> = BTreeSet::new();
        for p in pairs.iter().filter(|p| !p.is_negative()) {
            for anc in self.ancestors(&kb(p.tail)) {
                covered.insert((p.head, anc));
            }
        }
        pairs
            .into_iter()
            .filter(|p| !p.is_negative() || !covered.contains(&(p.head, kb(p.tail))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{enumerate_pairs, PairMode};

    fn block(title: &str, abs: &str, anns: &[(usize, usize, &str, &str, &str)], cids: &[(&str, &str)]) -> String {
        let mut s = format!("100|t|{title}\n100|a|{abs}\n");
        for (a, b, t, k, c) in anns {
            s.push_str(&format!("100\t{a}\t{b}\t{t}\t{k}\t{c}\n"));
        }
        for (c, d) in cids {
            s.push_str(&format!("100\tCID\t{c}\t{d}\n"));
        }
        s.push('\n');
        s
    }

    const TITLE: &str = "Lidocaine induced seizures.";
    const ABSTRACT: &str = "We report seizures after lidocaine. Lidocaine was stopped.";

    fn fixture() -> String {
        // text = TITLE + " " + ABSTRACT
        block(
            TITLE,
            ABSTRACT,
            &[
                (0, 9, "Lidocaine", "Chemical", "D008012"),
                (18, 26, "seizures", "Disease", "D012640"),
                (38, 46, "seizures", "Disease", "D012640"),
                (53, 62, "lidocaine", "Chemical", "D008012"),
                (64, 73, "Lidocaine", "Chemical", "D008012"),
            ],
            &[("D008012", "D012640")],
        )
    }

    #[test]
    fn one_chemical_one_disease_one_fact() {
        let docs = parse_pubtator_str(&fixture()).unwrap();
        assert_eq!(docs.len(), 1);
        let doc = &docs[0];
        assert_eq!(doc.entities.len(), 2);
        assert_eq!(doc.gold_facts.len(), 1);
        assert_eq!(doc.sentences.len(), 3);
        assert_eq!(doc.sentences[0], ["Lidocaine", "induced", "seizures", "."]);
        let m = &doc.mentions[3];
        assert_eq!((m.sent_index, m.span), (1, Span::new(4, 5)));
        assert_eq!(doc.sentences[1][4], "lidocaine");
        let pairs = enumerate_pairs(doc, 1, PairMode::ChemicalDisease);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].labels, vec![true]);
    }

    #[test]
    fn block_without_cid_has_no_facts() {
        let input = block(TITLE, ABSTRACT, &[(0, 9, "Lidocaine", "Chemical", "D008012")], &[]);
        let docs = parse_pubtator_str(&input).unwrap();
        assert!(docs[0].gold_facts.is_empty());
    }

    #[test]
    fn unknown_concept_in_cid_is_rejected() {
        let input = block(TITLE, ABSTRACT, &[(0, 9, "Lidocaine", "Chemical", "D008012")], &[("D008012", "D999")]);
        let err = parse_pubtator_str(&input).unwrap_err();
        assert_eq!(err.doc_id(), Some("100"));
    }

    #[test]
    fn offset_in_whitespace_is_rejected() {
        let input = block(TITLE, ABSTRACT, &[(9, 17, " induced", "Chemical", "D1")], &[]);
        assert!(matches!(parse_pubtator_str(&input), Err(Error::Validation { .. })));
    }

    #[test]
    fn mismatched_annotation_text_is_rejected() {
        let input = block(TITLE, ABSTRACT, &[(0, 9, "Lidocain", "Chemical", "D1")], &[]);
        assert!(parse_pubtator_str(&input).is_err());
    }

    #[test]
    fn composite_concepts_become_separate_entities() {
        let input = block(
            "Cisplatin and carboplatin toxicity.",
            "None.",
            &[(0, 9, "Cisplatin", "Chemical", "D1|D2"), (26, 34, "toxicity", "Disease", "D3")],
            &[("D2", "D3")],
        );
        let doc = &parse_pubtator_str(&input).unwrap()[0];
        assert_eq!(doc.entities.len(), 3);
        assert_eq!(doc.mentions[0].span, doc.mentions[1].span);
        assert_eq!(doc.gold_facts[0].head_entity_id, 1);
    }

    #[test]
    fn hypernym_filter_drops_covered_negatives() {
        let input = block(
            "Drug causes hepatitis and liver disease.",
            "",
            &[
                (0, 4, "Drug", "Chemical", "C1"),
                (12, 21, "hepatitis", "Disease", "D1"),
                (26, 39, "liver disease", "Disease", "D0"),
            ],
            &[("C1", "D1")],
        );
        let doc = &parse_pubtator_str(&input).unwrap()[0];
        let pairs = enumerate_pairs(doc, 1, PairMode::ChemicalDisease);
        assert_eq!(pairs.len(), 2);
        assert_eq!(HypernymFilter::disabled().filter_pairs(doc, pairs.clone()).len(), 2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.tsv");
        fs::write(&path, "D1\tD0\n").unwrap();
        let filter = HypernymFilter::from_file(&path).unwrap();
        let kept = filter.filter_pairs(doc, pairs);
        assert_eq!(kept.len(), 1);
        assert!(!kept[0].is_negative());
    }
}
