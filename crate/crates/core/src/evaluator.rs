//! Micro P/R/F1, Ign F1, bucketed analyses, reports and case dumps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{avg_mention_count, entity_distance, Document, LabelVocabulary};
use crate::error::{Error, Result};
use crate::model::{Ablation, RelationPrediction};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub doc_id: String,
    pub head: usize,
    pub tail: usize,
    pub relation: usize,
}

/// A fact keyed by entity names, used to match against the training split.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NamedFact {
    pub head: String,
    pub tail: String,
    pub relation: usize,
}

pub fn gold_facts<'a>(docs: impl IntoIterator<Item = &'a Document>) -> BTreeSet<Fact> {
    docs.into_iter()
        .flat_map(|d| {
            d.gold_facts.iter().map(move |f| Fact {
                doc_id: d.doc_id.clone(),
                head: f.head_entity_id,
                tail: f.tail_entity_id,
                relation: f.relation_id,
            })
        })
        .collect()
}

pub fn predicted_facts<'a>(preds: impl IntoIterator<Item = &'a RelationPrediction>) -> BTreeSet<Fact> {
    preds
        .into_iter()
        .flat_map(|p| {
            p.decided.iter().map(move |&r| Fact {
                doc_id: p.doc_id.clone(),
                head: p.head,
                tail: p.tail,
                relation: r,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn between(pred: &BTreeSet<Fact>, gold: &BTreeSet<Fact>) -> Self {
        let tp = pred.intersection(gold).count();
        Counts {
            tp,
            fp: pred.len() - tp,
            fn_: gold.len() - tp,
        }
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn scores(&self) -> Prf1 {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf1 { precision, recall, f1 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn prf1(pred: &BTreeSet<Fact>, gold: &BTreeSet<Fact>) -> Prf1 {
    Counts::between(pred, gold).scores()
}

fn doc_index(docs: &[Document]) -> BTreeMap<&str, &Document> {
    docs.iter().map(|d| (d.doc_id.as_str(), d)).collect()
}

fn resolve<'a>(index: &BTreeMap<&str, &'a Document>, fact: &Fact) -> Result<&'a Document> {
    index.get(fact.doc_id.as_str()).copied().ok_or_else(|| {
        Error::validation(&fact.doc_id, "fact refers to a document that was not supplied")
    })
}

fn named(doc: &Document, f: &Fact) -> Result<NamedFact> {
    Ok(NamedFact {
        head: doc.entity_name(f.head)?.to_string(),
        tail: doc.entity_name(f.tail)?.to_string(),
        relation: f.relation,
    })
}

pub fn train_fact_set(train: &[Document]) -> Result<BTreeSet<NamedFact>> {
    let index = doc_index(train);
    gold_facts(train)
        .iter()
        .map(|f| named(resolve(&index, f)?, f))
        .collect()
}

/// F1 after dropping, from both sides, facts whose name-level triple occurs in training.
pub fn ign_f1(
    pred: &BTreeSet<Fact>,
    gold: &BTreeSet<Fact>,
    docs: &[Document],
    train_facts: &BTreeSet<NamedFact>,
) -> Result<f64> {
    let index = doc_index(docs);
    let keep = |set: &BTreeSet<Fact>| -> Result<BTreeSet<Fact>> {
        let mut out = BTreeSet::new();
        for f in set {
            if !train_facts.contains(&named(resolve(&index, f)?, f)?) {
                out.insert(f.clone());
            }
        }
        Ok(out)
    };
    Ok(prf1(&keep(pred)?, &keep(gold)?).f1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BucketAxis {
    Distance,
    Mentions,
}

impl BucketAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            BucketAxis::Distance => "distance",
            BucketAxis::Mentions => "mentions",
        }
    }
}

/// Half-open interval `[lower, upper)`; no upper bound when `upper` is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub lower: f64,
    pub upper: Option<f64>,
}

impl Bucket {
    pub fn new(label: &str, lower: f64, upper: Option<f64>) -> Self {
        Bucket {
            label: label.into(),
            lower,
            upper,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && self.upper.is_none_or(|u| x < u)
    }
}

pub fn default_buckets(axis: BucketAxis) -> Vec<Bucket> {
    match axis {
        BucketAxis::Distance => vec![
            Bucket::new("0", 0.0, Some(1.0)),
            Bucket::new("1-2", 1.0, Some(3.0)),
            Bucket::new(">=3", 3.0, None),
        ],
        BucketAxis::Mentions => vec![
            Bucket::new("[1,2)", 1.0, Some(2.0)),
            Bucket::new("[2,4)", 2.0, Some(4.0)),
            Bucket::new(">=4", 4.0, None),
        ],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub label: String,
    pub counts: Counts,
    pub f1: f64,
}

pub fn pair_measure(doc: &Document, head: usize, tail: usize, axis: BucketAxis) -> Result<f64> {
    match axis {
        BucketAxis::Distance => entity_distance(doc, head, tail).map(|d| d as f64),
        BucketAxis::Mentions => avg_mention_count(doc, head, tail),
    }
}

/// Micro-F1 per bucket; every fact falls in exactly one bucket.
pub fn bucket_report(
    pred: &BTreeSet<Fact>,
    gold: &BTreeSet<Fact>,
    docs: &[Document],
    axis: BucketAxis,
    buckets: &[Bucket],
) -> Result<Vec<BucketRow>> {
    let index = doc_index(docs);
    let mut split: Vec<(BTreeSet<Fact>, BTreeSet<Fact>)> = vec![Default::default(); buckets.len()];
    for (set, is_pred) in [(pred, true), (gold, false)] {
        for f in set {
            let x = pair_measure(resolve(&index, f)?, f.head, f.tail, axis)?;
            let i = buckets.iter().position(|b| b.contains(x)).ok_or_else(|| {
                Error::Config(format!("{} value {x} lies outside every bucket", axis.as_str()))
            })?;
            if is_pred {
                split[i].0.insert(f.clone());
            } else {
                split[i].1.insert(f.clone());
            }
        }
    }
    Ok(buckets
        .iter()
        .zip(split)
        .map(|(b, (p, g))| {
            let counts = Counts::between(&p, &g);
            BucketRow {
                label: b.label.clone(),
                counts,
                f1: counts.scores().f1,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ign_f1: Option<f64>,
    pub counts: Counts,
    #[serde(default)]
    pub buckets: BTreeMap<BucketAxis, Vec<BucketRow>>,
    pub ablations: Vec<Ablation>,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn new(pred: &BTreeSet<Fact>, gold: &BTreeSet<Fact>, ablations: Vec<Ablation>, threshold: f64) -> Self {
        let counts = Counts::between(pred, gold);
        let s = counts.scores();
        MetricsReport {
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            ign_f1: None,
            counts,
            buckets: BTreeMap::new(),
            ablations,
            threshold,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize") + "\n"
    }

    pub fn to_table(&self) -> String {
        let fingerprint = if self.ablations.is_empty() {
            "none".to_string()
        } else {
            self.ablations.iter().map(|a| a.as_str()).collect::<Vec<_>>().join(",")
        };
        let mut s = String::new();
        writeln!(s, "ablations  {fingerprint}").unwrap();
        writeln!(s, "threshold  {}", self.threshold).unwrap();
        writeln!(s, "{:<10} {:>8} {:>8} {:>8} {:>6} {:>6} {:>6}", "scope", "P", "R", "F1", "TP", "FP", "FN").unwrap();
        let row = |s: &mut String, name: &str, c: &Counts| {
            let p = c.scores();
            writeln!(
                s,
                "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>6} {:>6}",
                name, p.precision, p.recall, p.f1, c.tp, c.fp, c.fn_
            )
            .unwrap();
        };
        row(&mut s, "all", &self.counts);
        if let Some(ign) = self.ign_f1 {
            writeln!(s, "{:<10} {:>8} {:>8} {:>8.4}", "ign", "", "", ign).unwrap();
        }
        for (axis, rows) in &self.buckets {
            for r in rows {
                row(&mut s, &format!("{}:{}", axis.as_str(), r.label), &r.counts);
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub doc_id: String,
    pub head: usize,
    pub tail: usize,
    pub relation: String,
    pub probability: f64,
}

/// One JSON line per decided relation.
pub fn prediction_dump(preds: &[RelationPrediction], relations: &LabelVocabulary) -> Result<String> {
    let mut out = String::new();
    for p in preds {
        for &r in &p.decided {
            let relation = relations
                .name(r)
                .ok_or_else(|| Error::Config(format!("relation {r} missing from the vocabulary")))?;
            let rec = DumpRecord {
                doc_id: p.doc_id.clone(),
                head: p.head,
                tail: p.tail,
                relation: relation.to_string(),
                probability: p.probabilities[r],
            };
            out.push_str(&serde_json::to_string(&rec).expect("records serialize"));
            out.push('\n');
        }
    }
    Ok(out)
}

/// Plain-text record of one document: text with entity markers, then every
/// pair that is gold or predicted with its disagreement flags.
pub fn case_dump(doc: &Document, preds: &[RelationPrediction], relations: &LabelVocabulary) -> Result<String> {
    let label = |r: usize| relations.name(r).map(str::to_string).unwrap_or_else(|| format!("#{r}"));
    let labels = |rs: &BTreeSet<usize>| {
        if rs.is_empty() {
            "N/A".to_string()
        } else {
            rs.iter().map(|&r| label(r)).collect::<Vec<_>>().join(",")
        }
    };
    let mut s = String::new();
    writeln!(s, "doc {}", doc.doc_id).unwrap();
    for (i, sent) in doc.sentences.iter().enumerate() {
        let mut opens: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut closes: BTreeMap<usize, usize> = BTreeMap::new();
        for m in doc.mentions.iter().filter(|m| m.sent_index == i) {
            opens.entry(m.span.start).or_default().push(m.entity_id);
            *closes.entry(m.span.end - 1).or_default() += 1;
        }
        let mut line = String::new();
        for (j, w) in sent.iter().enumerate() {
            if j > 0 {
                line.push(' ');
            }
            for e in opens.get(&j).into_iter().flatten() {
                write!(line, "[E{e} ").unwrap();
            }
            line.push_str(w);
            for _ in 0..closes.get(&j).copied().unwrap_or(0) {
                line.push(']');
            }
        }
        writeln!(s, "  s{i}: {line}").unwrap();
    }
    let mut gold: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    for f in &doc.gold_facts {
        gold.entry((f.head_entity_id, f.tail_entity_id)).or_default().insert(f.relation_id);
    }
    let mut pred: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    for p in preds.iter().filter(|p| p.doc_id == doc.doc_id) {
        pred.entry((p.head, p.tail)).or_default().extend(p.decided.iter().copied());
    }
    let keys: BTreeSet<(usize, usize)> = gold
        .iter()
        .chain(pred.iter())
        .filter(|(_, v)| !v.is_empty())
        .map(|(k, _)| *k)
        .collect();
    let empty = BTreeSet::new();
    let mut any_flag = BTreeSet::new();
    for (h, t) in keys {
        let g = gold.get(&(h, t)).unwrap_or(&empty);
        let p = pred.get(&(h, t)).unwrap_or(&empty);
        let missed: BTreeSet<usize> = g.difference(p).copied().collect();
        let extra: BTreeSet<usize> = p.difference(g).copied().collect();
        let mut flags = Vec::new();
        if !missed.is_empty() {
            flags.push(format!("FN:{}", labels(&missed)));
            any_flag.insert("FN");
        }
        if !extra.is_empty() {
            flags.push(format!("FP:{}", labels(&extra)));
            any_flag.insert("FP");
        }
        writeln!(
            s,
            "  E{h} {:?} -> E{t} {:?}  gold={}  pred={}  {}",
            doc.entity_name(h)?,
            doc.entity_name(t)?,
            labels(g),
            labels(p),
            if flags.is_empty() { "ok".to_string() } else { flags.join(" ") }
        )
        .unwrap();
    }
    let summary = if any_flag.is_empty() {
        "none".to_string()
    } else {
        any_flag.into_iter().collect::<Vec<_>>().join(" ")
    };
    writeln!(s, "  flags: {summary}").unwrap();
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::doc_with_mentions;

    fn fact(doc: &str, h: usize, t: usize, r: usize) -> Fact {
        Fact {
            doc_id: doc.into(),
            head: h,
            tail: t,
            relation: r,
        }
    }

    #[test]
    fn hand_computed_scores() {
        let gold: BTreeSet<Fact> = (0..4).map(|i| fact("d", i, i + 1, 0)).collect();
        let pred: BTreeSet<Fact> = [fact("d", 0, 1, 0), fact("d", 1, 2, 0), fact("d", 3, 2, 0)].into();
        let s = prf1(&pred, &gold);
        assert_eq!(s.precision, 2.0 / 3.0);
        assert_eq!(s.recall, 0.5);
        assert!((s.f1 - 4.0 / 7.0).abs() < 1e-15);
        assert_eq!(prf1(&gold, &gold), Prf1 { precision: 1.0, recall: 1.0, f1: 1.0 });
        assert_eq!(prf1(&BTreeSet::new(), &gold), Prf1::default());
    }

    fn named_doc(id: &str, names: &[&str], facts: &[(usize, usize, usize)]) -> Document {
        let mut d = doc_with_mentions(
            &[names.len()],
            &names.iter().enumerate().map(|(i, _)| (i, 0, i, i + 1)).collect::<Vec<_>>(),
            names.len(),
            facts,
        );
        d.doc_id = id.into();
        for (m, n) in d.mentions.iter_mut().zip(names) {
            m.surface = n.to_string();
        }
        d.sentences[0] = names.iter().map(|n| n.to_string()).collect();
        d
    }

    #[test]
    fn ign_f1_filters_training_duplicates() {
        let train = vec![named_doc("t", &["Paris", "France"], &[(0, 1, 0)])];
        let test = vec![named_doc("x", &["Paris", "France", "Rome"], &[(0, 1, 0), (2, 1, 0), (0, 2, 1)])];
        let tf = train_fact_set(&train).unwrap();
        let gold = gold_facts(&test);
        assert_eq!(ign_f1(&gold, &gold, &test, &tf).unwrap(), 1.0);
        let partial: BTreeSet<Fact> = [fact("x", 0, 1, 0), fact("x", 2, 1, 0)].into();
        // the duplicate is ignored, leaving 1 of 2 remaining gold facts found
        assert!((ign_f1(&partial, &gold, &test, &tf).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(ign_f1(&partial, &gold, &test, &BTreeSet::new()).unwrap(), prf1(&partial, &gold).f1);
        let all_dup = train_fact_set(&test).unwrap();
        assert_eq!(ign_f1(&gold, &gold, &test, &all_dup).unwrap(), 0.0);
    }

    fn bucket_fixture() -> Document {
        // entities 0..3; entity 3 sits two sentences away from entity 0
        let mut d = doc_with_mentions(
            &[3, 2, 2],
            &[(0, 0, 0, 1), (1, 0, 1, 2), (2, 1, 0, 1), (3, 2, 0, 1), (0, 0, 2, 3)],
            4,
            &[(0, 1, 0), (0, 2, 0), (0, 3, 0), (1, 3, 0)],
        );
        d.doc_id = "b".into();
        d
    }

    #[test]
    fn distance_buckets_by_hand() {
        let doc = bucket_fixture();
        let docs = vec![doc.clone()];
        let gold = gold_facts(&docs);
        // distances: (0,1)=0, (0,2)=1, (0,3)=2, (1,3)=2
        let pred: BTreeSet<Fact> = [fact("b", 0, 1, 0), fact("b", 0, 3, 0), fact("b", 2, 3, 0)].into();
        let rows = bucket_report(&pred, &gold, &docs, BucketAxis::Distance, &default_buckets(BucketAxis::Distance))
            .unwrap();
        assert_eq!(rows[0].counts, Counts { tp: 1, fp: 0, fn_: 0 });
        assert_eq!(rows[1].counts, Counts { tp: 1, fp: 1, fn_: 2 });
        assert_eq!(rows[2].counts, Counts::default());
        assert!((rows[1].f1 - 0.4).abs() < 1e-15);
        let mut total = Counts::default();
        rows.iter().for_each(|r| total.add(r.counts));
        assert_eq!(total, Counts::between(&pred, &gold));
    }

    #[test]
    fn mention_buckets_and_far_pairs() {
        let doc = bucket_fixture();
        let docs = vec![doc];
        let gold = gold_facts(&docs);
        let rows =
            bucket_report(&gold, &gold, &docs, BucketAxis::Mentions, &default_buckets(BucketAxis::Mentions)).unwrap();
        // entity 0 has two mentions, so its pairs average 1.5; (1,3) averages 1
        assert_eq!(rows[0].counts.tp, 4);
        assert!(default_buckets(BucketAxis::Distance)[2].contains(5.0));
        let missing = [fact("nowhere", 0, 1, 0)].into();
        assert!(bucket_report(&missing, &gold, &docs, BucketAxis::Distance, &default_buckets(BucketAxis::Distance))
            .is_err());
    }

    fn pred(doc: &str, h: usize, t: usize, decided: &[usize]) -> RelationPrediction {
        RelationPrediction {
            doc_id: doc.into(),
            head: h,
            tail: t,
            probabilities: vec![0.9; 2],
            decided: decided.to_vec(),
            context_weights: None,
        }
    }

    #[test]
    fn case_dump_flags() {
        let doc = named_doc("c", &["Lidocaine", "seizures"], &[(0, 1, 0)]);
        let vocab = LabelVocabulary::new(["CID", "OTHER"]).unwrap();
        let miss = case_dump(&doc, &[pred("c", 0, 1, &[])], &vocab).unwrap();
        assert!(miss.contains("FN:CID"));
        assert!(miss.ends_with("flags: FN\n"));
        let ok = case_dump(&doc, &[pred("c", 0, 1, &[0])], &vocab).unwrap();
        assert!(ok.ends_with("flags: none\n"));
        assert!(ok.contains("[E0 Lidocaine] [E1 seizures]"));
    }

    #[test]
    fn dump_lists_decided_relations_only() {
        let vocab = LabelVocabulary::new(["a", "b"]).unwrap();
        let out = prediction_dump(&[pred("d", 0, 1, &[1]), pred("d", 1, 0, &[])], &vocab).unwrap();
        assert_eq!(out, "{\"doc_id\":\"d\",\"head\":0,\"tail\":1,\"relation\":\"b\",\"probability\":0.9}\n");
    }

    proptest::proptest! {
        #[test]
        fn metrics_ignore_prediction_order(seed in 0u64..1000) {
            let gold: BTreeSet<Fact> = (0..5).map(|i| fact("d", i, (i + 1) % 5, (seed as usize + i) % 2)).collect();
            let mut preds: Vec<RelationPrediction> = (0..5)
                .map(|i| pred("d", i, (i + 1) % 5, if (seed >> i) & 1 == 1 { &[0] } else { &[1] }))
                .collect();
            let a = prf1(&predicted_facts(&preds), &gold);
            preds.reverse();
            proptest::prop_assert_eq!(a, prf1(&predicted_facts(&preds), &gold));
        }
    }
}
