//! Subcommand bodies. Every command reads and writes only under the run's output directory,
//! apart from `prepare`, which also reads the raw dataset files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use glre::checkpoint::Checkpoint;
use glre::corpus::{
    parse_docred, parse_pubtator, read_canonical, write_canonical, Document, LabelVocabulary, Split, CDR_RELATION,
};
use glre::docgraph::{graph_stats, HeteroGraph};
use glre::encoder::{EncoderBackend, EncoderKind, HashedSubwordEncoder, PrecomputedEmbeddings, ToyVocabulary};
use glre::evaluator::{
    bucket_report, case_dump, default_buckets, gold_facts, ign_f1, predicted_facts, prediction_dump, train_fact_set,
    BucketAxis, MetricsReport, NamedFact,
};
use glre::model::{Ablation, Glre, RelationPrediction};
use glre::params::ParamStore;
use glre::trainer::{self, EpochLog};
use glre::{Error, Result};
use serde::Serialize;

use crate::config::{Dataset, Protocol, RunConfig};

const HASHED_PIECE_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

impl SplitArg {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Dev => "dev",
            SplitArg::Test => "test",
        }
    }

    fn split(self) -> Split {
        match self {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

/// File names inside the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }

    pub fn corpus(&self, split: SplitArg) -> PathBuf {
        self.root.join("corpus").join(format!("{}.jsonl", split.as_str()))
    }

    pub fn relations(&self) -> PathBuf {
        self.root.join("corpus/relations.json")
    }

    pub fn train_facts(&self) -> PathBuf {
        self.root.join("corpus/train_facts.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.ckpt.json")
    }

    pub fn snapshot(&self) -> PathBuf {
        self.root.join("config.resolved.json")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }

    pub fn train_dev_log(&self) -> PathBuf {
        self.root.join("train_dev_log.jsonl")
    }

    pub fn metrics(&self, split: SplitArg, ext: &str) -> PathBuf {
        self.root.join(format!("metrics.{}.{ext}", split.as_str()))
    }

    pub fn analysis(&self, split: SplitArg) -> PathBuf {
        self.root.join(format!("analysis.{}", split.as_str()))
    }

    pub fn sweep_checkpoint(&self, variant: Ablation) -> PathBuf {
        self.root.join("sweep").join(format!("{}.ckpt.json", variant.as_str()))
    }

    pub fn predictions(&self, split: SplitArg) -> PathBuf {
        self.root.join(format!("predictions.{}.jsonl", split.as_str()))
    }

    pub fn graphs(&self, split: SplitArg) -> PathBuf {
        self.root.join(format!("graphs.{}", split.as_str()))
    }

    pub fn graph_stats(&self, split: SplitArg) -> PathBuf {
        self.root.join(format!("graph_stats.{}.jsonl", split.as_str()))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    ck.save(path)
}

fn to_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("outputs serialize") + "\n"
}

fn read_relation_inventory(path: &Path) -> Result<LabelVocabulary> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let names: Vec<String> = match value {
        serde_json::Value::Array(items) => items
            .into_iter()
            .map(|v| v.as_str().map(str::to_string))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Config(format!("{}: expected an array of strings", path.display())))?,
        // keys of an object come back sorted
        serde_json::Value::Object(map) => map.keys().cloned().collect(),
        _ => return Err(Error::Config(format!("{}: expected an array or object", path.display()))),
    };
    LabelVocabulary::new(names)
}

/// Parses the raw splits and writes canonical documents, the relation
/// inventory and the training fact set.
pub fn prepare(cfg: &RunConfig) -> Result<BTreeMap<&'static str, usize>> {
    cfg.check_inputs_exist()?;
    let layout = Layout::new(&cfg.output_dir);
    let mut vocab = match (cfg.dataset, &cfg.paths.relations) {
        (Dataset::Cdr, _) => LabelVocabulary::new([CDR_RELATION])?,
        (Dataset::Docred, Some(p)) => read_relation_inventory(p)?,
        (Dataset::Docred, None) => LabelVocabulary::default(),
    };
    let splits = [
        (SplitArg::Train, Some(&cfg.paths.train)),
        (SplitArg::Dev, cfg.paths.dev.as_ref()),
        (SplitArg::Test, cfg.paths.test.as_ref()),
    ];
    let mut parsed = Vec::new();
    for (split, path) in splits {
        let Some(path) = path else { continue };
        let mut docs = match cfg.dataset {
            Dataset::Docred => parse_docred(path, &mut vocab)?,
            Dataset::Cdr => parse_pubtator(path)?,
        };
        for d in &mut docs {
            d.split = split.split();
        }
        parsed.push((split, docs));
    }
    let mut counts = BTreeMap::new();
    for (split, docs) in &parsed {
        for d in docs {
            d.validate(vocab.len())?;
        }
        let path = layout.corpus(*split);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        write_canonical(&path, docs)?;
        counts.insert(split.as_str(), docs.len());
    }
    write_file(&layout.relations(), &to_pretty(&vocab.names()))?;
    let train_facts: Vec<NamedFact> = train_fact_set(&parsed[0].1)?.into_iter().collect();
    write_file(&layout.train_facts(), &to_pretty(&train_facts))?;
    Ok(counts)
}

fn require_prepared(path: &Path) -> Result<()> {
    if path.exists() {
        return Ok(());
    }
    Err(Error::Config(format!(
        "{} is missing; run `glre prepare` with this config first",
        path.display()
    )))
}

pub fn load_relations(layout: &Layout) -> Result<LabelVocabulary> {
    let path = layout.relations();
    require_prepared(&path)?;
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let names: Vec<String> =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    LabelVocabulary::new(names)
}

pub fn load_split(layout: &Layout, split: SplitArg) -> Result<Vec<Document>> {
    let path = layout.corpus(split);
    require_prepared(&path)?;
    read_canonical(&path)
}

fn backend(cfg: &RunConfig, vocab: Option<ToyVocabulary>) -> Result<EncoderBackend> {
    let width = cfg.model.word_dim;
    Ok(match cfg.model.encoder_kind {
        EncoderKind::TrainableToy => EncoderBackend::Toy {
            vocab: vocab.ok_or_else(|| Error::Checkpoint("toy-encoder checkpoint has no vocabulary".into()))?,
            width,
        },
        EncoderKind::PrecomputedFile => {
            let dir = cfg.paths.embeddings.as_ref().expect("validated");
            let store = PrecomputedEmbeddings::open(dir)?;
            let width = store.width().unwrap_or(width);
            EncoderBackend::Precomputed { store, width }
        }
        EncoderKind::PretrainedContextual => EncoderBackend::Contextual {
            encoder: Box::new(HashedSubwordEncoder {
                width,
                piece_len: HASHED_PIECE_LEN,
            }),
            max_len: cfg.model.max_segment_len,
        },
    })
}

fn check_relation_count(cfg: &RunConfig, relations: &LabelVocabulary) -> Result<()> {
    if cfg.model.num_relations != relations.len() {
        return Err(Error::Config(format!(
            "model.num_relations is {} but the prepared corpus has {} relations",
            cfg.model.num_relations,
            relations.len()
        )));
    }
    Ok(())
}

struct LogSink {
    path: PathBuf,
    file: fs::File,
    failed: Option<std::io::Error>,
}

impl LogSink {
    fn create(path: PathBuf) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        Ok(LogSink {
            path,
            file,
            failed: None,
        })
    }

    /// Wall-clock time goes to stderr only, so reruns give identical log files.
    fn record(&mut self, phase: &str, e: &EpochLog) {
        eprintln!(
            "{phase} epoch {:>3}  loss {:.6}  F1 {:.4}  ({:.1}s)",
            e.epoch, e.train_loss, e.dev_f1, e.seconds
        );
        let line = serde_json::json!({
            "epoch": e.epoch,
            "train_loss": e.train_loss,
            "dev_p": e.dev_p,
            "dev_r": e.dev_r,
            "dev_f1": e.dev_f1,
        });
        if self.failed.is_none() {
            if let Err(err) = writeln!(self.file, "{line}") {
                self.failed = Some(err);
            }
        }
    }

    fn finish(self) -> Result<()> {
        match self.failed {
            Some(source) => Err(Error::Io { path: self.path, source }),
            None => Ok(()),
        }
    }
}

/// Trains under the configured protocol and returns the checkpoint to keep.
fn fit(cfg: &RunConfig, layout: &Layout, logs: Option<(PathBuf, PathBuf)>) -> Result<Checkpoint> {
    let relations = load_relations(layout)?;
    check_relation_count(cfg, &relations)?;
    let train_docs = load_split(layout, SplitArg::Train)?;
    let dev_docs = match cfg.paths.dev {
        Some(_) => load_split(layout, SplitArg::Dev)?,
        None => Vec::new(),
    };
    let vocab = match cfg.protocol {
        Protocol::Train => ToyVocabulary::build(&train_docs, 1),
        Protocol::TrainDev => ToyVocabulary::build(train_docs.iter().chain(&dev_docs), 1),
    };
    let keep_vocab = (cfg.model.encoder_kind == EncoderKind::TrainableToy).then(|| vocab.clone());
    let model = Glre::new(cfg.model.clone(), backend(cfg, Some(vocab))?)?;

    let (train_log, train_dev_log) = match logs {
        Some((a, b)) => (Some(LogSink::create(a)?), Some(b)),
        None => (None, None),
    };
    let mut sink = train_log;
    let outcome = trainer::train(&model, &train_docs, &dev_docs, &cfg.train, &mut |e| {
        if let Some(s) = sink.as_mut() {
            s.record("train", e);
        }
    })?;
    if let Some(s) = sink {
        s.finish()?;
    }
    eprintln!("best epoch {} with F1 {:.4}", outcome.best_epoch, outcome.best_f1);

    let params = match cfg.protocol {
        Protocol::Train => outcome.params,
        Protocol::TrainDev => {
            let mut sink = train_dev_log.map(LogSink::create).transpose()?;
            let params = trainer::train_plus_dev(
                &model,
                train_docs,
                dev_docs,
                &cfg.train,
                Some(outcome.best_epoch),
                &mut |e| {
                    if let Some(s) = sink.as_mut() {
                        s.record("train+dev", e);
                    }
                },
            )?;
            if let Some(s) = sink {
                s.finish()?;
            }
            params
        }
    };
    Ok(Checkpoint::new(
        cfg.model.clone(),
        relations.names().to_vec(),
        keep_vocab,
        Some(outcome.best_epoch),
        params,
    ))
}

pub fn train(cfg: &RunConfig) -> Result<Checkpoint> {
    let layout = Layout::new(&cfg.output_dir);
    let logs = (layout.train_log(), layout.train_dev_log());
    let ck = fit(cfg, &layout, Some(logs))?;
    save_checkpoint(&ck, &layout.checkpoint())?;
    write_file(&layout.snapshot(), &cfg.to_json())?;
    Ok(ck)
}

/// Fields that decide parameter shapes and the forward computation.
fn architecture(c: &glre::model::ModelConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(c).expect("configs serialize");
    let obj = v.as_object_mut().expect("struct");
    for runtime in ["threshold", "encoder_dropout", "classifier_dropout"] {
        obj.remove(runtime);
    }
    v
}

/// Loads a checkpoint and checks it against the run config and prepared corpus.
pub fn load_model(cfg: &RunConfig, layout: &Layout, path: &Path) -> Result<(Glre, ParamStore, LabelVocabulary)> {
    let ck = Checkpoint::load(path)?;
    let relations = load_relations(layout)?;
    if ck.relations != relations.names() {
        return Err(Error::Checkpoint(format!(
            "{} was trained on a different relation inventory",
            path.display()
        )));
    }
    let (want, have) = (architecture(&cfg.model), architecture(&ck.config));
    if want != have {
        let differing: Vec<&str> = want
            .as_object()
            .expect("struct")
            .iter()
            .filter(|(k, v)| have.get(k.as_str()) != Some(*v))
            .map(|(k, _)| k.as_str())
            .collect();
        return Err(Error::Checkpoint(format!(
            "{} differs from the run config in {}",
            path.display(),
            differing.join(", ")
        )));
    }
    let model = Glre::new(cfg.model.clone(), backend(cfg, ck.vocab)?)?;
    model.check_params(&ck.params)?;
    Ok((model, ck.params, relations))
}

fn predict_all(model: &Glre, params: &ParamStore, docs: &[Document]) -> Result<Vec<RelationPrediction>> {
    let mut out = Vec::new();
    for d in docs {
        out.extend(model.predict_document(params, d)?);
    }
    Ok(out)
}

fn report(cfg: &RunConfig, layout: &Layout, docs: &[Document], preds: &[RelationPrediction]) -> Result<MetricsReport> {
    let pred = predicted_facts(preds);
    let gold = gold_facts(docs);
    let mut report = MetricsReport::new(&pred, &gold, cfg.model.ablations(), cfg.model.threshold);
    if cfg.dataset == Dataset::Docred {
        let path = layout.train_facts();
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let facts: Vec<NamedFact> =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        report.ign_f1 = Some(ign_f1(&pred, &gold, docs, &facts.into_iter().collect())?);
    }
    Ok(report)
}

pub fn evaluate(cfg: &RunConfig, split: SplitArg, checkpoint: &Path) -> Result<MetricsReport> {
    let layout = Layout::new(&cfg.output_dir);
    let (model, params, _) = load_model(cfg, &layout, checkpoint)?;
    let docs = load_split(&layout, split)?;
    let preds = predict_all(&model, &params, &docs)?;
    let report = report(cfg, &layout, &docs, &preds)?;
    write_file(&layout.metrics(split, "json"), &report.to_json())?;
    write_file(&layout.metrics(split, "txt"), &report.to_table())?;
    Ok(report)
}

pub fn predict(cfg: &RunConfig, split: SplitArg, checkpoint: &Path) -> Result<usize> {
    let layout = Layout::new(&cfg.output_dir);
    let (model, params, relations) = load_model(cfg, &layout, checkpoint)?;
    let docs = load_split(&layout, split)?;
    let preds = predict_all(&model, &params, &docs)?;
    let dump = prediction_dump(&preds, &relations)?;
    write_file(&layout.predictions(split), &dump)?;
    Ok(dump.lines().count())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub variant: String,
    pub ablations: Vec<Ablation>,
    /// The variant resolves to the baseline model, so the baseline result is reused.
    pub same_as_baseline: bool,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ign_f1: Option<f64>,
}

impl SweepRow {
    fn new(variant: &str, same_as_baseline: bool, r: &MetricsReport) -> Self {
        SweepRow {
            variant: variant.to_string(),
            ablations: r.ablations.clone(),
            same_as_baseline,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            ign_f1: r.ign_f1,
        }
    }
}

fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!("{:<12} {:>8} {:>8} {:>8} {:>8}\n", "variant", "P", "R", "F1", "IgnF1");
    for r in rows {
        let ign = r.ign_f1.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8}\n",
            r.variant, r.precision, r.recall, r.f1, ign
        ));
    }
    s
}

pub struct Analysis {
    pub report: MetricsReport,
    pub sweep: Option<Vec<SweepRow>>,
}

/// Bucketed metrics and case dumps for one split, plus an optional sweep that
/// trains (or reuses) one model per single ablation flag.
pub fn analyze(cfg: &RunConfig, split: SplitArg, checkpoint: &Path, sweep: bool) -> Result<Analysis> {
    let layout = Layout::new(&cfg.output_dir);
    let dir = layout.analysis(split);
    let (model, params, relations) = load_model(cfg, &layout, checkpoint)?;
    let docs = load_split(&layout, split)?;
    let preds = predict_all(&model, &params, &docs)?;
    let mut base = report(cfg, &layout, &docs, &preds)?;
    let (pred, gold) = (predicted_facts(&preds), gold_facts(&docs));
    for axis in [BucketAxis::Distance, BucketAxis::Mentions] {
        let rows = bucket_report(&pred, &gold, &docs, axis, &default_buckets(axis))?;
        base.buckets.insert(axis, rows);
    }
    write_file(&dir.join("buckets.json"), &base.to_json())?;
    write_file(&dir.join("buckets.txt"), &base.to_table())?;

    let mut by_doc: BTreeMap<&str, Vec<RelationPrediction>> = BTreeMap::new();
    for p in &preds {
        by_doc.entry(p.doc_id.as_str()).or_default().push(p.clone());
    }
    let mut cases = String::new();
    for d in &docs {
        let own = by_doc.get(d.doc_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        cases.push_str(&case_dump(d, own, &relations)?);
    }
    write_file(&dir.join("cases.txt"), &cases)?;

    let sweep = if sweep {
        let mut rows = vec![SweepRow::new("baseline", false, &base)];
        for a in Ablation::ALL {
            let mut variant = cfg.clone();
            variant.ablations.push(a);
            let variant = variant.resolve(&Default::default())?;
            if architecture(&variant.model) == architecture(&cfg.model) {
                rows.push(SweepRow::new(a.as_str(), true, &base));
                continue;
            }
            let path = layout.sweep_checkpoint(a);
            if !path.exists() {
                eprintln!("sweep: training {}", a.as_str());
                save_checkpoint(&fit(&variant, &layout, None)?, &path)?;
            }
            let (m, p, _) = load_model(&variant, &layout, &path)?;
            let r = report(&variant, &layout, &docs, &predict_all(&m, &p, &docs)?)?;
            rows.push(SweepRow::new(a.as_str(), false, &r));
        }
        write_file(&dir.join("sweep.json"), &to_pretty(&rows))?;
        write_file(&dir.join("sweep.txt"), &sweep_table(&rows))?;
        Some(rows)
    } else {
        None
    };
    Ok(Analysis { report: base, sweep })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GraphTotals {
    pub documents: usize,
    pub nodes: BTreeMap<String, usize>,
    pub edges: BTreeMap<String, usize>,
}

/// Writes one graph dump per document and one stats line per document.
pub fn graph_stats_cmd(cfg: &RunConfig, split: SplitArg) -> Result<GraphTotals> {
    let layout = Layout::new(&cfg.output_dir);
    let docs = load_split(&layout, split)?;
    let dir = layout.graphs(split);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut lines = String::new();
    let mut totals = GraphTotals::default();
    for (i, d) in docs.iter().enumerate() {
        let graph = HeteroGraph::build(d);
        write_file(&dir.join(format!("{i:05}.json")), &(graph.to_json() + "\n"))?;
        let stats = graph_stats(d, &graph);
        lines.push_str(&serde_json::to_string(&stats).expect("stats serialize"));
        lines.push('\n');
        totals.documents += 1;
        for (k, n) in &stats.nodes {
            let key = serde_json::to_value(k).expect("kinds serialize");
            *totals.nodes.entry(key.as_str().unwrap_or_default().to_string()).or_default() += n;
        }
        for (t, n) in &stats.edges {
            *totals.edges.entry(t.as_str().to_string()).or_default() += n;
        }
    }
    write_file(&layout.graph_stats(split), &lines)?;
    Ok(totals)
}
