//! Browser bindings. Each export has a plain-Rust twin returning `Result<String, String>`
//! so the logic runs and is tested natively.

use std::collections::BTreeMap;

use glre::corpus::{from_canonical_json, to_canonical_json, Document};
use glre::docgraph::{graph_stats, HeteroGraph};
use glre::encoder::{EncoderBackend, ToyVocabulary};
use glre::model::{distance_bin, pair_offset, Glre, ModelConfig};
use glre::synthetic::{overfit_corpus, random_document, SyntheticSpec};
use glre::trainer::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

pub const MAX_DEMO_EPOCHS: usize = 60;

fn pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("demo output serializes")
}

/// A random valid document in canonical JSON, for the editor.
pub fn sample_document_json(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let doc = random_document(&format!("sample-{seed}"), &SyntheticSpec::default(), &mut rng);
    let value: Value = serde_json::from_str(&to_canonical_json(&doc)).expect("canonical JSON parses");
    pretty(&value)
}

fn parse_document(doc_json: &str) -> Result<Document, String> {
    let doc = from_canonical_json(doc_json, 0).map_err(|e| e.to_string())?;
    let num_relations = doc.gold_facts.iter().map(|f| f.relation_id + 1).max().unwrap_or(0);
    doc.validate(num_relations).map_err(|e| e.to_string())?;
    Ok(doc)
}

/// Node labels, typed edge lists and counts of a document's graph.
pub fn graph_report(doc_json: &str) -> Result<String, String> {
    let doc = parse_document(doc_json)?;
    let graph = HeteroGraph::build(&doc);
    let graph_value: Value = serde_json::from_str(&graph.to_json()).expect("graph JSON parses");
    Ok(pretty(&json!({
        "stats": graph_stats(&doc, &graph),
        "graph": graph_value,
    })))
}

/// Signed word offset and distance bin for every ordered entity pair.
pub fn distance_table(doc_json: &str, bins: usize) -> Result<String, String> {
    if bins == 0 {
        return Err("bins must be positive".into());
    }
    let doc = parse_document(doc_json)?;
    let mut rows = Vec::new();
    for a in 0..doc.entities.len() {
        for b in 0..doc.entities.len() {
            if a == b {
                continue;
            }
            let delta = pair_offset(&doc, a, b).map_err(|e| e.to_string())?;
            rows.push(json!({
                "head": a,
                "tail": b,
                "offset": delta,
                "bin": distance_bin(delta, bins),
            }));
        }
    }
    Ok(pretty(&rows))
}

#[derive(Serialize)]
struct PairView {
    head: String,
    tail: String,
    gold: Vec<String>,
    predicted: Vec<String>,
    probabilities: BTreeMap<String, f64>,
    /// Context attention over all candidate pairs, in candidate order.
    context_weights: Option<Vec<f64>>,
}

/// Trains a small model on the synthetic overfit corpus and reports pair
/// probabilities and context attention on one of its documents.
pub fn train_and_predict(seed: u64, epochs: usize, doc_index: usize) -> Result<String, String> {
    if epochs == 0 || epochs > MAX_DEMO_EPOCHS {
        return Err(format!("epochs must be in 1..={MAX_DEMO_EPOCHS}"));
    }
    let (docs, relations) = overfit_corpus(seed);
    let doc = docs
        .get(doc_index)
        .ok_or_else(|| format!("document index must be below {}", docs.len()))?;
    let config = ModelConfig {
        word_dim: 16,
        projected_dim: 28,
        type_dim: 4,
        node_dim: 32,
        distance_dim: 8,
        ..ModelConfig::small(relations.len())
    };
    let backend = EncoderBackend::Toy {
        vocab: ToyVocabulary::build(&docs, 1),
        width: config.word_dim,
    };
    let model = Glre::new(config, backend).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        max_epochs: epochs,
        patience: epochs,
        seed,
        ..Default::default()
    };
    let mut curve = Vec::new();
    let outcome = train(&model, &docs, &[], &cfg, &mut |e| curve.push((e.train_loss, e.dev_f1))).map_err(|e| e.to_string())?;
    let preds = model.predict_document(&outcome.params, doc).map_err(|e| e.to_string())?;

    let name = |e: usize| doc.entity_name(e).map(str::to_string).unwrap_or_default();
    let label = |r: usize| relations.name(r).unwrap_or("?").to_string();
    let pairs: Vec<PairView> = preds
        .iter()
        .map(|p| PairView {
            head: name(p.head),
            tail: name(p.tail),
            gold: doc
                .gold_facts
                .iter()
                .filter(|f| f.head_entity_id == p.head && f.tail_entity_id == p.tail)
                .map(|f| label(f.relation_id))
                .collect(),
            predicted: p.decided.iter().map(|&r| label(r)).collect(),
            probabilities: p.probabilities.iter().enumerate().map(|(r, &v)| (label(r), v)).collect(),
            context_weights: p.context_weights.clone(),
        })
        .collect();
    Ok(pretty(&json!({
        "doc_id": doc.doc_id,
        "text": doc.sentences.iter().map(|s| s.join(" ")).collect::<Vec<_>>(),
        "best_epoch": outcome.best_epoch,
        "train_f1": outcome.best_f1,
        "curve": curve.iter().map(|(loss, f1)| json!({"loss": loss, "f1": f1})).collect::<Vec<_>>(),
        "pairs": pairs,
    })))
}

fn to_js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = sampleDocument)]
pub fn sample_document(seed: u32) -> String {
    sample_document_json(seed as u64)
}

#[wasm_bindgen(js_name = buildGraph)]
pub fn build_graph(doc_json: &str) -> Result<String, JsValue> {
    to_js(graph_report(doc_json))
}

#[wasm_bindgen(js_name = distanceBins)]
pub fn distance_bins(doc_json: &str, bins: u32) -> Result<String, JsValue> {
    to_js(distance_table(doc_json, bins as usize))
}

#[wasm_bindgen(js_name = trainAndPredict)]
pub fn train_and_predict_js(seed: u32, epochs: u32, doc_index: u32) -> Result<String, JsValue> {
    to_js(train_and_predict(seed as u64, epochs as usize, doc_index as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_document_builds_a_graph() {
        let doc = sample_document_json(4);
        let report: Value = serde_json::from_str(&graph_report(&doc).unwrap()).unwrap();
        let parsed = parse_document(&doc).unwrap();
        assert_eq!(report["stats"]["nodes"]["E"], json!(parsed.entities.len()));
    }

    #[test]
    fn distance_table_covers_ordered_pairs() {
        let doc = sample_document_json(2);
        let n = parse_document(&doc).unwrap().entities.len();
        let rows: Vec<Value> = serde_json::from_str(&distance_table(&doc, 9).unwrap()).unwrap();
        assert_eq!(rows.len(), n * (n - 1));
        for r in &rows {
            let delta = r["offset"].as_i64().unwrap();
            assert_eq!(r["bin"], json!(distance_bin(delta, 9)));
        }
    }

    #[test]
    fn bad_input_is_reported_not_panicked() {
        assert!(graph_report("{").is_err());
        assert!(distance_table(&sample_document_json(1), 0).is_err());
        assert!(train_and_predict(0, 0, 0).is_err());
        assert!(train_and_predict(0, 1, 99).is_err());
    }

    #[test]
    fn short_training_reports_every_pair() {
        let out: Value = serde_json::from_str(&train_and_predict(7, 2, 0).unwrap()).unwrap();
        let (docs, _) = overfit_corpus(7);
        let n = docs[0].entities.len();
        assert_eq!(out["pairs"].as_array().unwrap().len(), n * (n - 1));
        assert_eq!(out["curve"].as_array().unwrap().len(), 2);
    }
}
