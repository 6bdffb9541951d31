//! Differentiable building blocks.
//!
//! Each block has a tape form used by the model and a plain-matrix form with
//! the same arithmetic, used by callers that only need values. Row-vector
//! convention throughout: a node feature is a `1 × d` row and a weight
//! multiplies from the right.

use std::collections::BTreeMap;

use rand::Rng;

use crate::docgraph::{neighbor_mean, EdgeSet, EdgeType};
use crate::error::{Error, Result};
use crate::params::{ParamSpec, ParamStore};
use crate::tape::{Matrix, RowMix, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-12;

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite entry in {what}")))
    }
}

// ---------------------------------------------------------------------------
// R-GCN

pub fn rgcn_param_name(layer: usize, t: Option<EdgeType>) -> String {
    match t {
        Some(t) => format!("rgcn.{layer}.{}", t.as_str()),
        None => format!("rgcn.{layer}.self"),
    }
}

pub fn rgcn_param_specs(layer: usize, dim: usize) -> Vec<ParamSpec> {
    EdgeType::ALL
        .iter()
        .map(|&t| Some(t))
        .chain([None])
        .map(|t| ParamSpec::weight(rgcn_param_name(layer, t), dim, dim))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgcnLayerParams {
    pub relation: BTreeMap<EdgeType, Matrix>,
    pub self_weight: Matrix,
}

impl RgcnLayerParams {
    pub fn from_store(store: &ParamStore, layer: usize) -> Result<Self> {
        let get = |name: String| {
            store
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };
        let mut relation = BTreeMap::new();
        for t in EdgeType::ALL {
            relation.insert(t, get(rgcn_param_name(layer, Some(t)))?);
        }
        Ok(RgcnLayerParams {
            relation,
            self_weight: get(rgcn_param_name(layer, None))?,
        })
    }
}

/// Bound weights of one R-GCN layer.
pub struct RgcnVars {
    pub relation: Vec<(EdgeType, Var)>,
    pub self_weight: Var,
}

impl RgcnVars {
    pub fn bind(t: &mut Tape, store: &ParamStore, layer: usize) -> Result<Self> {
        let mut relation = Vec::with_capacity(5);
        for ty in EdgeType::ALL {
            relation.push((ty, t.param(store, &rgcn_param_name(layer, Some(ty)))?));
        }
        Ok(RgcnVars {
            relation,
            self_weight: t.param(store, &rgcn_param_name(layer, None))?,
        })
    }
}

/// `relu(h·W₀ + Σₓ mean_{j ∈ Nₓ(i)} hⱼ·Wₓ)` for every node.
pub fn rgcn_on_tape(t: &mut Tape, h: Var, adjacency: &[(EdgeType, RowMix)], vars: &RgcnVars) -> Var {
    let mut acc = t.matmul(h, vars.self_weight);
    for (ty, mix) in adjacency {
        if mix.rows().iter().all(Vec::is_empty) {
            continue;
        }
        let w = vars
            .relation
            .iter()
            .find(|(x, _)| x == ty)
            .map(|(_, w)| *w)
            .expect("one weight per edge type");
        let agg = t.mix(h, mix.clone());
        let msg = t.matmul(agg, w);
        acc = t.add(acc, msg);
    }
    t.relu(acc)
}

pub fn typed_adjacency(num_nodes: usize, edges: &BTreeMap<EdgeType, EdgeSet>) -> Vec<(EdgeType, RowMix)> {
    EdgeType::ALL
        .iter()
        .map(|&ty| {
            let empty = EdgeSet::new();
            (ty, neighbor_mean(num_nodes, edges.get(&ty).unwrap_or(&empty)))
        })
        .collect()
}

pub fn rgcn_forward(
    features: &Matrix,
    edges: &BTreeMap<EdgeType, EdgeSet>,
    params: &RgcnLayerParams,
) -> Result<Matrix> {
    check_finite(features, "R-GCN input")?;
    let n = features.nrows();
    if edges.values().flatten().any(|&(a, b)| a >= n || b >= n) {
        return Err(Error::Config("edge references a node outside the feature matrix".into()));
    }
    let mut t = Tape::new();
    let h = t.constant(features.clone());
    let vars = RgcnVars {
        relation: params
            .relation
            .iter()
            .map(|(ty, w)| (*ty, t.constant(w.clone())))
            .collect(),
        self_weight: t.constant(params.self_weight.clone()),
    };
    let out = rgcn_on_tape(&mut t, h, &typed_adjacency(n, edges), &vars);
    Ok(t.value(out).clone())
}

// ---------------------------------------------------------------------------
// Multi-head attention

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadParams {
    pub query: Vec<Matrix>,
    pub key: Vec<Matrix>,
    pub value: Vec<Matrix>,
    pub out: Matrix,
}

pub fn mhead_param_specs(prefix: &str, dim: usize, heads: usize) -> Vec<ParamSpec> {
    let head_dim = dim / heads;
    let mut specs = Vec::new();
    for h in 0..heads {
        for role in ["query", "key", "value"] {
            specs.push(ParamSpec::weight(format!("{prefix}.head{h}.{role}"), dim, head_dim));
        }
    }
    specs.push(ParamSpec::weight(format!("{prefix}.out"), dim, dim));
    specs
}

impl MultiHeadParams {
    pub fn from_store(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        let get = |name: String| {
            store
                .get(&name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };
        let mut p = MultiHeadParams {
            query: vec![],
            key: vec![],
            value: vec![],
            out: get(format!("{prefix}.out"))?,
        };
        for h in 0..heads {
            p.query.push(get(format!("{prefix}.head{h}.query"))?);
            p.key.push(get(format!("{prefix}.head{h}.key"))?);
            p.value.push(get(format!("{prefix}.head{h}.value"))?);
        }
        Ok(p)
    }

    pub fn heads(&self) -> usize {
        self.query.len()
    }
}

pub struct MultiHeadVars {
    pub query: Vec<Var>,
    pub key: Vec<Var>,
    pub value: Vec<Var>,
    pub out: Var,
    pub head_dim: usize,
}

impl MultiHeadVars {
    pub fn bind(t: &mut Tape, store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        let mut v = MultiHeadVars {
            query: vec![],
            key: vec![],
            value: vec![],
            out: t.param(store, &format!("{prefix}.out"))?,
            head_dim: 0,
        };
        for h in 0..heads {
            v.query.push(t.param(store, &format!("{prefix}.head{h}.query"))?);
            v.key.push(t.param(store, &format!("{prefix}.head{h}.key"))?);
            v.value.push(t.param(store, &format!("{prefix}.head{h}.value"))?);
        }
        v.head_dim = t.shape(v.query[0]).1;
        Ok(v)
    }

    fn constants(t: &mut Tape, p: &MultiHeadParams) -> Self {
        let mut c = |ms: &[Matrix]| ms.iter().map(|m| t.constant(m.clone())).collect::<Vec<_>>();
        let query = c(&p.query);
        let key = c(&p.key);
        let value = c(&p.value);
        MultiHeadVars {
            query,
            key,
            value,
            out: t.constant(p.out.clone()),
            head_dim: p.query[0].ncols(),
        }
    }
}

/// One scaled dot-product head over already-projected inputs.
/// Returns the `1 × d_v` output and the `1 × m` weights.
pub fn attention_head(t: &mut Tape, q: Var, k: Var, v: Var, head_dim: usize) -> (Var, Var) {
    let scores = t.matmul_t(q, k);
    let scores = t.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let weights = t.softmax_rows(scores);
    (t.matmul(weights, v), weights)
}

/// `[head₁; …; head_z]·W_out` for a single `1 × d_n` query.
pub fn mhead_on_tape(t: &mut Tape, q: Var, keys: Var, values: Var, vars: &MultiHeadVars) -> (Var, Vec<Var>) {
    let mut outs = Vec::new();
    let mut weights = Vec::new();
    for h in 0..vars.query.len() {
        let qh = t.matmul(q, vars.query[h]);
        let kh = t.matmul(keys, vars.key[h]);
        let vh = t.matmul(values, vars.value[h]);
        let (o, w) = attention_head(t, qh, kh, vh, vars.head_dim);
        outs.push(o);
        weights.push(w);
    }
    let cat = t.concat_cols(&outs);
    (t.matmul(cat, vars.out), weights)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub output: Matrix,
    /// Per head, the weight of each key.
    pub weights: Vec<Vec<f64>>,
}

pub fn multi_head_attention(
    q: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    params: &MultiHeadParams,
) -> Result<AttentionOutput> {
    if keys.nrows() == 0 {
        return Err(Error::Config("attention needs at least one key".into()));
    }
    if keys.nrows() != values.nrows() || q.nrows() != 1 {
        return Err(Error::Config(format!(
            "attention shapes: query {:?}, keys {:?}, values {:?}",
            q.dim(),
            keys.dim(),
            values.dim()
        )));
    }
    let d = params.out.nrows();
    if params.heads() == 0 || params.heads() * params.query[0].ncols() != d {
        return Err(Error::Config(format!(
            "heads × head width must equal {d}"
        )));
    }
    let mut t = Tape::new();
    let vars = MultiHeadVars::constants(&mut t, params);
    let (qv, kv, vv) = (t.constant(q.clone()), t.constant(keys.clone()), t.constant(values.clone()));
    let (out, weights) = mhead_on_tape(&mut t, qv, kv, vv, &vars);
    Ok(AttentionOutput {
        output: t.value(out).clone(),
        weights: weights.iter().map(|&w| t.value(w).iter().copied().collect()).collect(),
    })
}

// ---------------------------------------------------------------------------
// Layer normalization

pub fn layer_norm_param_specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::ones(format!("{prefix}.gain"), 1, dim),
        ParamSpec::zeros(format!("{prefix}.bias"), 1, dim),
    ]
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 || gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::Config("layer norm needs matching dimensions of at least 2".into()));
    }
    let mut t = Tape::new();
    let row = |v: &[f64]| Matrix::from_shape_vec((1, v.len()), v.to_vec()).expect("row");
    let (xv, g, b) = (t.constant(row(x)), t.constant(row(gain)), t.constant(row(bias)));
    let y = t.layer_norm(xv, g, b, LAYER_NORM_EPS);
    Ok(t.value(y).iter().copied().collect())
}

// ---------------------------------------------------------------------------
// Feed-forward stack

/// Weights `{prefix}.{i}.weight` (`sizes[i] × sizes[i+1]`) and matching biases.
pub fn ffnn_param_specs(prefix: &str, sizes: &[usize]) -> Vec<ParamSpec> {
    sizes
        .windows(2)
        .enumerate()
        .flat_map(|(i, w)| {
            [
                ParamSpec::weight(format!("{prefix}.{i}.weight"), w[0], w[1]),
                ParamSpec::zeros(format!("{prefix}.{i}.bias"), 1, w[1]),
            ]
        })
        .collect()
}

/// ReLU on hidden layers, identity on the output, dropout after each hidden activation.
pub fn ffnn_on_tape<R: Rng + ?Sized>(
    t: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    layers: usize,
    x: Var,
    mut dropout: Option<(&mut R, f64)>,
) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        let w = t.param(store, &format!("{prefix}.{i}.weight"))?;
        let b = t.param(store, &format!("{prefix}.{i}.bias"))?;
        if t.shape(h).1 != t.shape(w).0 {
            return Err(Error::Config(format!(
                "{prefix}.{i} expects width {}, got {}",
                t.shape(w).0,
                t.shape(h).1
            )));
        }
        let z = t.matmul(h, w);
        h = t.add_row(z, b);
        if i + 1 < layers {
            h = t.relu(h);
            if let Some((rng, rate)) = dropout.as_mut() {
                h = dropout_on_tape(t, h, *rate, &mut **rng);
            }
        }
    }
    Ok(h)
}

// ---------------------------------------------------------------------------
// Dropout and loss

/// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
pub fn dropout_on_tape<R: Rng + ?Sized>(t: &mut Tape, x: Var, rate: f64, rng: &mut R) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let mask = Matrix::from_shape_simple_fn(t.shape(x), || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    t.mask(x, mask)
}

/// `−Σ_r [y*_r log y_r + (1 − y*_r) log(1 − y_r)]` with clamped probabilities.
pub fn bce_multilabel_loss(probs: &[f64], labels: &[bool]) -> f64 {
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
    }

    fn rgcn_params(rng: &mut ChaCha8Rng, d: usize) -> RgcnLayerParams {
        RgcnLayerParams {
            relation: EdgeType::ALL.iter().map(|&t| (t, random(rng, d, d))).collect(),
            self_weight: random(rng, d, d),
        }
    }

    #[test]
    fn isolated_node_with_zero_self_weight_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = rgcn_params(&mut rng, 3);
        p.self_weight.fill(0.0);
        let out = rgcn_forward(&array![[1.0, -2.0, 3.0]], &BTreeMap::new(), &p).unwrap();
        assert_eq!(out, Matrix::zeros((1, 3)));
    }

    #[test]
    fn isolated_node_with_identity_keeps_nonnegative_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = rgcn_params(&mut rng, 3);
        p.self_weight = Matrix::eye(3);
        let x = array![[1.0, 0.0, 2.5]];
        assert_eq!(rgcn_forward(&x, &BTreeMap::new(), &p).unwrap(), x);
    }

    #[test]
    fn three_node_path_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 4;
        let p = rgcn_params(&mut rng, d);
        let x = random(&mut rng, 3, d);
        let edges = BTreeMap::from([(EdgeType::MM, EdgeSet::from([(0, 1), (1, 2)]))]);
        let got = rgcn_forward(&x, &edges, &p).unwrap();
        let neigh: [&[usize]; 3] = [&[1], &[0, 2], &[1]];
        let w = &p.relation[&EdgeType::MM];
        for i in 0..3 {
            for c in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += x[[i, k]] * p.self_weight[[k, c]];
                }
                for &j in neigh[i] {
                    for k in 0..d {
                        acc += x[[j, k]] * w[[k, c]] / neigh[i].len() as f64;
                    }
                }
                assert!((got[[i, c]] - acc.max(0.0)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rgcn_rejects_non_finite_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = rgcn_params(&mut rng, 2);
        let err = rgcn_forward(&array![[f64::NAN, 0.0]], &BTreeMap::new(), &p).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    fn mh_params(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> MultiHeadParams {
        let dv = d / heads;
        MultiHeadParams {
            query: (0..heads).map(|_| random(rng, d, dv)).collect(),
            key: (0..heads).map(|_| random(rng, d, dv)).collect(),
            value: (0..heads).map(|_| random(rng, d, dv)).collect(),
            out: random(rng, d, d),
        }
    }

    /// Independent evaluation of the attention formula with explicit loops.
    fn attention_oracle(q: &Matrix, k: &Matrix, v: &Matrix, p: &MultiHeadParams) -> Vec<f64> {
        let d = p.out.nrows();
        let dv = d / p.heads();
        let mut concat = Vec::new();
        for h in 0..p.heads() {
            let proj = |x: &Matrix, row: usize, w: &Matrix| -> Vec<f64> {
                (0..dv).map(|c| (0..d).map(|r| x[[row, r]] * w[[r, c]]).sum()).collect()
            };
            let qh = proj(q, 0, &p.query[h]);
            let scores: Vec<f64> = (0..k.nrows())
                .map(|i| {
                    let kh = proj(k, i, &p.key[h]);
                    qh.iter().zip(&kh).map(|(a, b)| a * b).sum::<f64>() / (dv as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            let mut head = vec![0.0; dv];
            for i in 0..k.nrows() {
                let w = (scores[i] - mx).exp() / z;
                for (c, x) in proj(v, i, &p.value[h]).iter().enumerate() {
                    head[c] += w * x;
                }
            }
            concat.extend(head);
        }
        (0..d).map(|c| (0..d).map(|r| concat[r] * p.out[[r, c]]).sum()).collect()
    }

    #[test]
    fn single_key_gets_full_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = mh_params(&mut rng, 4, 2);
        let (q, k, v) = (random(&mut rng, 1, 4), random(&mut rng, 1, 4), random(&mut rng, 1, 4));
        let out = multi_head_attention(&q, &k, &v, &p).unwrap();
        assert!(out.weights.iter().all(|w| w == &vec![1.0]));
        let q2 = random(&mut rng, 1, 4);
        let out2 = multi_head_attention(&q2, &k, &v, &p).unwrap();
        for (a, b) in out.output.iter().zip(out2.output.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = mh_params(&mut rng, 4, 2);
        let krow = random(&mut rng, 1, 4);
        let k = ndarray::concatenate![ndarray::Axis(0), krow, krow, krow];
        let v = random(&mut rng, 3, 4);
        let out = multi_head_attention(&random(&mut rng, 1, 4), &k, &v, &p).unwrap();
        for w in &out.weights {
            for x in w {
                assert!((x - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn three_keys_match_attention_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = mh_params(&mut rng, 6, 3);
        let (q, k, v) = (random(&mut rng, 1, 6), random(&mut rng, 3, 6), random(&mut rng, 3, 6));
        let out = multi_head_attention(&q, &k, &v, &p).unwrap();
        for (a, b) in out.output.iter().zip(attention_oracle(&q, &k, &v, &p)) {
            assert!((a - b).abs() < 1e-10);
        }
        for w in &out.weights {
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rejects_empty_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = mh_params(&mut rng, 4, 2);
        let e = Matrix::zeros((0, 4));
        assert!(multi_head_attention(&random(&mut rng, 1, 4), &e, &e, &p).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let y = layer_norm(&[3.0; 5], &[1.0; 5], &[0.0; 5]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        let y = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2]).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-4 && (y[1] + 1.0).abs() < 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = random(&mut rng, 1, 8).iter().copied().collect();
        let y = layer_norm(&x, &[1.0; 8], &[0.0; 8]).unwrap();
        let mean = y.iter().sum::<f64>() / 8.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-3);
        assert!(layer_norm(&[1.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        assert!(bce_multilabel_loss(&[1.0, 0.0], &[true, false]) < 1e-11);
        assert!((bce_multilabel_loss(&[0.5], &[true]) - std::f64::consts::LN_2).abs() < 1e-15);
        let probs = [0.2, 0.7, 0.9];
        let labels = [true, false, true];
        let mut oracle = 0.0;
        for r in 0..3 {
            let y = if labels[r] { 1.0 } else { 0.0 };
            oracle -= y * f64::ln(probs[r]) + (1.0 - y) * f64::ln(1.0 - probs[r]);
        }
        assert!((bce_multilabel_loss(&probs, &labels) - oracle).abs() < 1e-10);
    }

    #[test]
    fn tape_bce_matches_plain_bce() {
        let mut t = Tape::new();
        let p = t.leaf(array![[0.2, 0.7, 0.9]]);
        let l = t.bce(p, array![[1.0, 0.0, 1.0]], PROB_CLAMP);
        let plain = bce_multilabel_loss(&[0.2, 0.7, 0.9], &[true, false, true]);
        assert!((t.scalar(l) - plain).abs() < 1e-15);
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_mask_is_seeded() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::ones((4, 4)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(dropout_on_tape(&mut t, x, 0.0, &mut rng), x);
        let a = dropout_on_tape(&mut t, x, 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        let b = dropout_on_tape(&mut t, x, 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(t.value(a), t.value(b));
        assert!(t.value(a).iter().all(|&v| v == 0.0 || v == 2.0));
    }

    proptest::proptest! {
        #[test]
        fn rgcn_is_permutation_equivariant(seed in 0u64..500, n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 3;
            let p = rgcn_params(&mut rng, d);
            let x = random(&mut rng, n, d);
            let mut edges: BTreeMap<EdgeType, EdgeSet> = BTreeMap::new();
            for (k, ty) in EdgeType::ALL.iter().enumerate() {
                for a in 0..n {
                    for b in a + 1..n {
                        if (a * 7 + b * 3 + k + seed as usize).is_multiple_of(3) {
                            edges.entry(*ty).or_default().insert((a, b));
                        }
                    }
                }
            }
            let perm: Vec<usize> = (0..n).map(|i| (i * 5 + seed as usize) % n).collect();
            let mut seen = vec![false; n];
            let perm: Vec<usize> = if perm.iter().all(|&i| !std::mem::replace(&mut seen[i], true)) {
                perm
            } else {
                (0..n).rev().collect()
            };
            let px = Matrix::from_shape_fn((n, d), |(i, j)| x[[perm[i], j]]);
            let mut inv = vec![0; n];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let pedges: BTreeMap<EdgeType, EdgeSet> = edges
                .iter()
                .map(|(t, es)| (*t, es.iter().map(|&(a, b)| (inv[a].min(inv[b]), inv[a].max(inv[b]))).collect()))
                .collect();
            let out = rgcn_forward(&x, &edges, &p).unwrap();
            let pout = rgcn_forward(&px, &pedges, &p).unwrap();
            for i in 0..n {
                for j in 0..d {
                    proptest::prop_assert!((pout[[i, j]] - out[[perm[i], j]]).abs() < 1e-12);
                }
            }
        }
    }
}
