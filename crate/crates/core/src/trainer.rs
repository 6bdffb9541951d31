//! Optimization: Adam with decoupled weight decay, global-norm clipping,
//! early stopping on dev micro-F1, and the train+dev re-run protocol.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{merge_train_dev, CandidatePair, Document};
use crate::error::{Error, Result};
use crate::evaluator::{gold_facts, predicted_facts, prf1, Prf1};
use crate::model::Glre;
use crate::params::{InitMode, ParamStore};
use crate::tape::{Matrix, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub patience: usize,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub init_mode: InitMode,
    /// N/A pairs kept per positive pair in each training document; `None` keeps all.
    pub negative_ratio: Option<f64>,
    /// Stop as soon as the selection F1 reaches this value.
    pub stop_at_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 5e-4,
            clip_norm: Some(10.0),
            patience: 15,
            weight_decay: 1e-4,
            max_epochs: 200,
            seed: 0,
            init_mode: InitMode::Scaled,
            negative_ratio: None,
            stop_at_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        // written so NaN fails every check
        let positive = |x: f64| x > 0.0;
        let nonnegative = |x: f64| x >= 0.0;
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive");
        }
        if self.patience > self.max_epochs {
            return bad("patience cannot exceed max_epochs");
        }
        if !positive(self.learning_rate) || !nonnegative(self.weight_decay) {
            return bad("learning_rate must be positive and weight_decay nonnegative");
        }
        if self.clip_norm.is_some_and(|c| !positive(c)) {
            return bad("clip_norm must be positive");
        }
        if self.negative_ratio.is_some_and(|r| !nonnegative(r)) {
            return bad("negative_ratio must be nonnegative");
        }
        Ok(())
    }
}

pub type GradMap = BTreeMap<String, Matrix>;

pub fn global_norm(grads: &GradMap) -> f64 {
    grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().for_each(|g| g.mapv_inplace(|v| v * s));
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: i32,
    first: GradMap,
    second: GradMap,
}

impl Adam {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            first: GradMap::new(),
            second: GradMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One update of every tensor that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.dim()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.dim()));
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *p -= self.learning_rate * (update + self.weight_decay * *p);
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_p: f64,
    pub dev_r: f64,
    pub dev_f1: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("logs serialize") + "\n"
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    /// 1-based epoch of the returned parameters.
    pub best_epoch: usize,
    pub best_f1: f64,
    pub log: Vec<EpochLog>,
}

/// Seconds since the call; always 0 where the platform has no clock.
#[cfg(not(target_arch = "wasm32"))]
fn stopwatch() -> impl Fn() -> f64 {
    let start = std::time::Instant::now();
    move || start.elapsed().as_secs_f64()
}

#[cfg(target_arch = "wasm32")]
fn stopwatch() -> impl Fn() -> f64 {
    || 0.0
}

pub fn evaluate(model: &Glre, params: &ParamStore, docs: &[Document]) -> Result<Prf1> {
    let mut preds = Vec::new();
    for d in docs {
        preds.extend(model.predict_document(params, d)?);
    }
    Ok(prf1(&predicted_facts(&preds), &gold_facts(docs)))
}

fn sample_pairs(pairs: Vec<CandidatePair>, ratio: Option<f64>, rng: &mut ChaCha8Rng) -> Vec<CandidatePair> {
    let Some(ratio) = ratio else { return pairs };
    let (neg, mut pos): (Vec<_>, Vec<_>) = pairs.into_iter().partition(CandidatePair::is_negative);
    let keep = ((pos.len().max(1) as f64) * ratio).ceil() as usize;
    if keep >= neg.len() {
        pos.extend(neg);
        return pos;
    }
    let mut idx = sample(rng, neg.len(), keep).into_vec();
    idx.sort_unstable();
    pos.extend(idx.into_iter().map(|i| neg[i].clone()));
    pos
}

struct Streams {
    shuffle: ChaCha8Rng,
    dropout: ChaCha8Rng,
    negatives: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Streams {
            shuffle: stream(1),
            dropout: stream(2),
            negatives: stream(3),
        }
    }
}

fn abort_message(params: &ParamStore, what: &str) -> String {
    let mut norms: Vec<(String, f64)> = params.norms().into_iter().collect();
    norms.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let top: Vec<String> = norms.iter().take(5).map(|(n, v)| format!("{n}={v:.4e}")).collect();
    format!("{what}; largest parameter norms: {}", top.join(", "))
}

/// One pass over `docs` in shuffled order. Returns the mean document loss.
fn run_epoch(
    model: &Glre,
    params: &mut ParamStore,
    adam: &mut Adam,
    docs: &[Document],
    cfg: &TrainConfig,
    streams: &mut Streams,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut streams.shuffle);
    let mut total = 0.0;
    for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let mut grads = GradMap::new();
        let scale = 1.0 / chunk.len() as f64;
        for &i in chunk {
            let doc = &docs[i];
            let pairs = sample_pairs(model.candidate_pairs(doc), cfg.negative_ratio, &mut streams.negatives);
            let mut t = Tape::new();
            let loss = model.document_loss_on_tape(&mut t, params, doc, pairs, Some(&mut streams.dropout))?;
            let value = t.scalar(loss);
            if !value.is_finite() {
                return Err(Error::TrainingAborted {
                    epoch,
                    batch,
                    message: abort_message(params, &format!("loss {value} on {}", doc.doc_id)),
                });
            }
            total += value;
            let g = t.backward(loss);
            for (name, &var) in t.bound_params() {
                if params.is_frozen(name) {
                    continue;
                }
                if let Some(gv) = g.get(var) {
                    let acc = grads.entry(name.clone()).or_insert_with(|| Matrix::zeros(gv.dim()));
                    acc.scaled_add(scale, gv);
                }
            }
        }
        let norm = match cfg.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        if !norm.is_finite() {
            return Err(Error::TrainingAborted {
                epoch,
                batch,
                message: abort_message(params, &format!("gradient norm {norm}")),
            });
        }
        adam.step(params, &grads);
        if !params.all_finite() {
            return Err(Error::TrainingAborted {
                epoch,
                batch,
                message: abort_message(params, "non-finite parameter after update"),
            });
        }
    }
    Ok(total / docs.len() as f64)
}

/// Trains with early stopping on `dev`. An empty `dev` selects on the
/// training set itself, which is only meant for overfitting checks.
pub fn train(
    model: &Glre,
    train_docs: &[Document],
    dev_docs: &[Document],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_docs.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let select_on = if dev_docs.is_empty() { train_docs } else { dev_docs };
    let mut params = model.init_params(cfg.init_mode, cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut streams = Streams::new(cfg.seed);
    let mut best = TrainOutcome {
        params: params.clone(),
        best_epoch: 0,
        best_f1: f64::NEG_INFINITY,
        log: Vec::new(),
    };
    for epoch in 1..=cfg.max_epochs {
        let elapsed = stopwatch();
        let train_loss = run_epoch(model, &mut params, &mut adam, train_docs, cfg, &mut streams, epoch)?;
        let s = evaluate(model, &params, select_on)?;
        let entry = EpochLog {
            epoch,
            train_loss,
            dev_p: s.precision,
            dev_r: s.recall,
            dev_f1: s.f1,
            seconds: elapsed(),
        };
        on_epoch(&entry);
        best.log.push(entry);
        if s.f1 > best.best_f1 {
            best.best_f1 = s.f1;
            best.best_epoch = epoch;
            best.params = params.clone();
        }
        if cfg.stop_at_f1.is_some_and(|target| s.f1 >= target) || epoch - best.best_epoch >= cfg.patience {
            break;
        }
    }
    Ok(best)
}

/// Re-initializes with the same seed and trains on train + dev for exactly `epochs` epochs.
pub fn train_plus_dev(
    model: &Glre,
    train_docs: Vec<Document>,
    dev_docs: Vec<Document>,
    cfg: &TrainConfig,
    epochs: Option<usize>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<ParamStore> {
    cfg.validate()?;
    let epochs = epochs.ok_or_else(|| {
        Error::Protocol("train+dev needs the best epoch from a prior train run".into())
    })?;
    let merged = merge_train_dev(train_docs, dev_docs)?;
    let mut params = model.init_params(cfg.init_mode, cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut streams = Streams::new(cfg.seed);
    for epoch in 1..=epochs {
        let elapsed = stopwatch();
        let train_loss = run_epoch(model, &mut params, &mut adam, &merged, cfg, &mut streams, epoch)?;
        on_epoch(&EpochLog {
            epoch,
            train_loss,
            dev_p: f64::NAN,
            dev_r: f64::NAN,
            dev_f1: f64::NAN,
            seconds: elapsed(),
        });
    }
    Ok(params)
}
