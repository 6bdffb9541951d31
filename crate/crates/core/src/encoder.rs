//! Word-level contextual states and their projection to node features.
//!
//! A backend turns a document into one `d_w`-wide row per word. Long
//! documents are cut into segments at sentence boundaries, each segment is
//! encoded on its own, and the rows are concatenated back in order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::params::{ParamSpec, ParamStore};
use crate::tape::{Matrix, RowMix, Tape, Var};

pub const EMBEDDING: &str = "encoder.embedding";
pub const PROJECT_WEIGHT: &str = "project.weight";
pub const PROJECT_BIAS: &str = "project.bias";
pub const UNKNOWN_WORD: &str = "<unk>";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    PretrainedContextual,
    PrecomputedFile,
    #[default]
    TrainableToy,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub sentences: Range<usize>,
    pub words: Range<usize>,
}

/// Greedily packs whole sentences into segments of at most `max_len` words.
pub fn chunk_document(sentences: &[Vec<String>], max_len: usize) -> Result<Vec<Segment>> {
    if max_len == 0 {
        return Err(Error::Config("segment length must be positive".into()));
    }
    let mut segments = Vec::new();
    let mut start_sent = 0;
    let mut start_word = 0;
    let mut len = 0;
    for (i, s) in sentences.iter().enumerate() {
        if s.len() > max_len {
            return Err(Error::Config(format!(
                "sentence {i} has {} words, longer than the segment limit {max_len}",
                s.len()
            )));
        }
        if len + s.len() > max_len && len > 0 {
            segments.push(Segment {
                sentences: start_sent..i,
                words: start_word..start_word + len,
            });
            start_sent = i;
            start_word += len;
            len = 0;
        }
        len += s.len();
    }
    if start_sent < sentences.len() {
        segments.push(Segment {
            sentences: start_sent..sentences.len(),
            words: start_word..start_word + len,
        });
    }
    Ok(segments)
}

/// Sub-token rows for one segment and the rows each word owns.
#[derive(Clone, Debug)]
pub struct SubtokenEncoding {
    pub rows: Matrix,
    pub word_pieces: Vec<Range<usize>>,
}

/// Averages each word's sub-token rows into one row per word.
pub fn pool_subtokens(enc: &SubtokenEncoding) -> Result<Matrix> {
    if enc.word_pieces.iter().any(|r| r.is_empty() || r.end > enc.rows.nrows()) {
        return Err(Error::Config("word without sub-tokens in encoder output".into()));
    }
    let groups: Vec<Vec<usize>> = enc.word_pieces.iter().map(|r| r.clone().collect()).collect();
    Ok(RowMix::mean_groups(&groups, enc.rows.nrows()).apply(&enc.rows))
}

/// A pretrained sub-word encoder plugged in from outside.
pub trait ContextualEncoder: Send + Sync {
    fn width(&self) -> usize;

    /// Encodes the words of one segment.
    fn encode_segment(&self, words: &[String]) -> Result<SubtokenEncoding>;
}

/// Deterministic stand-in for a sub-word encoder: words are cut into pieces
/// of at most `piece_len` characters, each piece gets a hashed pseudo-random
/// vector, and every row is shifted by a fraction of the segment mean so the
/// output depends on segment context.
#[derive(Clone, Debug)]
pub struct HashedSubwordEncoder {
    pub width: usize,
    pub piece_len: usize,
}

impl HashedSubwordEncoder {
    fn piece_vector(&self, piece: &str) -> Vec<f64> {
        // FNV-1a seed, then an xorshift stream
        let mut h: u64 = 0xcbf29ce484222325;
        for b in piece.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        (0..self.width)
            .map(|_| {
                h ^= h << 13;
                h ^= h >> 7;
                h ^= h << 17;
                (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    }
}

impl ContextualEncoder for HashedSubwordEncoder {
    fn width(&self) -> usize {
        self.width
    }

    fn encode_segment(&self, words: &[String]) -> Result<SubtokenEncoding> {
        let mut pieces = Vec::new();
        let mut word_pieces = Vec::with_capacity(words.len());
        for w in words {
            let chars: Vec<char> = w.to_lowercase().chars().collect();
            let start = pieces.len();
            for chunk in chars.chunks(self.piece_len.max(1)) {
                pieces.push(self.piece_vector(&chunk.iter().collect::<String>()));
            }
            if chars.is_empty() {
                pieces.push(self.piece_vector(""));
            }
            word_pieces.push(start..pieces.len());
        }
        let mut rows = Matrix::zeros((pieces.len(), self.width));
        for (i, p) in pieces.iter().enumerate() {
            for (j, v) in p.iter().enumerate() {
                rows[[i, j]] = *v;
            }
        }
        if !pieces.is_empty() {
            let mean = rows.mean_axis(ndarray::Axis(0)).expect("non-empty");
            rows += &(mean * 0.1);
        }
        Ok(SubtokenEncoding { rows, word_pieces })
    }
}

/// Word vocabulary of the toy embedding encoder. Index 0 is the unknown bucket.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct ToyVocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for ToyVocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        ToyVocabulary { words, index }
    }
}

impl From<ToyVocabulary> for Vec<String> {
    fn from(v: ToyVocabulary) -> Self {
        v.words
    }
}

impl ToyVocabulary {
    fn normalize(word: &str) -> String {
        word.to_lowercase()
    }

    /// Words seen at least `min_count` times, most frequent first, ties alphabetical.
    pub fn build<'a>(docs: impl IntoIterator<Item = &'a Document>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for doc in docs {
            for w in doc.words() {
                *counts.entry(Self::normalize(w)).or_default() += 1;
            }
        }
        let mut ranked: Vec<_> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let words = std::iter::once(UNKNOWN_WORD.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .collect::<Vec<_>>();
        words.into()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.index.get(&Self::normalize(word)).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub rows: usize,
    pub cols: usize,
    pub filename: String,
}

/// A directory of per-document little-endian `f32` matrices with an `index.json`.
#[derive(Clone, Debug)]
pub struct PrecomputedEmbeddings {
    dir: PathBuf,
    index: BTreeMap<String, IndexEntry>,
}

impl PrecomputedEmbeddings {
    pub const INDEX_FILE: &'static str = "index.json";

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index = serde_json::from_str(&text).map_err(|e| Error::Parse {
            index: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Ok(PrecomputedEmbeddings {
            dir: dir.to_path_buf(),
            index,
        })
    }

    /// Writes matrices and the sidecar index into `dir`.
    pub fn write(dir: &Path, matrices: &BTreeMap<String, Matrix>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = BTreeMap::new();
        for (i, (doc_id, m)) in matrices.iter().enumerate() {
            let filename = format!("{i:06}.f32");
            let bytes: Vec<u8> = m.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            let path = dir.join(&filename);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            index.insert(
                doc_id.clone(),
                IndexEntry {
                    rows: m.nrows(),
                    cols: m.ncols(),
                    filename,
                },
            );
        }
        let path = dir.join(Self::INDEX_FILE);
        let json = serde_json::to_string_pretty(&index).expect("index serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn width(&self) -> Option<usize> {
        self.index.values().next().map(|e| e.cols)
    }

    pub fn load(&self, doc_id: &str) -> Result<Matrix> {
        let entry = self.index.get(doc_id).ok_or_else(|| Error::Data {
            doc_id: doc_id.to_string(),
            message: "no precomputed embedding entry".into(),
        })?;
        let path = self.dir.join(&entry.filename);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != entry.rows * entry.cols * 4 {
            return Err(Error::Data {
                doc_id: doc_id.to_string(),
                message: format!(
                    "{} holds {} bytes, index promises {}x{} f32",
                    path.display(),
                    bytes.len(),
                    entry.rows,
                    entry.cols
                ),
            });
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Matrix::from_shape_vec((entry.rows, entry.cols), values).expect("size checked"))
    }
}

pub enum EncoderBackend {
    Toy {
        vocab: ToyVocabulary,
        width: usize,
    },
    Precomputed {
        store: PrecomputedEmbeddings,
        width: usize,
    },
    Contextual {
        encoder: Box<dyn ContextualEncoder>,
        max_len: usize,
    },
}

impl std::fmt::Debug for EncoderBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EncoderBackend::{:?}(width {})", self.kind(), self.width())
    }
}

impl EncoderBackend {
    pub fn kind(&self) -> EncoderKind {
        match self {
            EncoderBackend::Toy { .. } => EncoderKind::TrainableToy,
            EncoderBackend::Precomputed { .. } => EncoderKind::PrecomputedFile,
            EncoderBackend::Contextual { .. } => EncoderKind::PretrainedContextual,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            EncoderBackend::Toy { width, .. } | EncoderBackend::Precomputed { width, .. } => *width,
            EncoderBackend::Contextual { encoder, .. } => encoder.width(),
        }
    }

    /// Parameters the backend owns.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        match self {
            EncoderBackend::Toy { vocab, width } => {
                // fan_in 1 keeps embedding rows at unit scale
                let mut spec = ParamSpec::weight(EMBEDDING, vocab.len(), *width);
                spec.init = crate::params::Init::Normal { fan_in: 1 };
                vec![spec]
            }
            _ => vec![],
        }
    }

    fn check_width(&self, doc_id: &str, m: &Matrix) -> Result<()> {
        if m.ncols() != self.width() {
            return Err(Error::Config(format!(
                "encoder produced width {} for {doc_id}, expected {}",
                m.ncols(),
                self.width()
            )));
        }
        Ok(())
    }

    /// Encodes one segment's words, given as global word indices.
    fn encode_segment_on_tape(
        &self,
        t: &mut Tape,
        params: &ParamStore,
        doc: &Document,
        words: &[&String],
    ) -> Result<Var> {
        match self {
            EncoderBackend::Toy { vocab, .. } => {
                let table = t.param(params, EMBEDDING)?;
                let ids: Vec<usize> = words.iter().map(|w| vocab.lookup(w)).collect();
                Ok(t.gather(table, &ids))
            }
            EncoderBackend::Contextual { encoder, .. } => {
                let owned: Vec<String> = words.iter().map(|w| w.to_string()).collect();
                let enc = encoder.encode_segment(&owned)?;
                if enc.word_pieces.len() != owned.len() {
                    return Err(Error::Data {
                        doc_id: doc.doc_id.clone(),
                        message: "encoder dropped words".into(),
                    });
                }
                let pooled = pool_subtokens(&enc)?;
                self.check_width(&doc.doc_id, &pooled)?;
                Ok(t.constant(pooled))
            }
            EncoderBackend::Precomputed { .. } => unreachable!("precomputed rows are not segmented"),
        }
    }

    /// Word states `H` for the whole document, one row per word.
    pub fn encode_on_tape(
        &self,
        t: &mut Tape,
        params: &ParamStore,
        doc: &Document,
        max_len: usize,
    ) -> Result<Var> {
        if let EncoderBackend::Precomputed { store, .. } = self {
            let m = store.load(&doc.doc_id)?;
            if m.nrows() != doc.num_words() {
                return Err(Error::Data {
                    doc_id: doc.doc_id.clone(),
                    message: format!("{} precomputed rows for {} words", m.nrows(), doc.num_words()),
                });
            }
            self.check_width(&doc.doc_id, &m)?;
            return Ok(t.constant(m));
        }
        let max_len = match self {
            EncoderBackend::Contextual { max_len, .. } => *max_len,
            _ => max_len,
        };
        let words: Vec<&String> = doc.words().collect();
        let mut parts = Vec::new();
        for seg in chunk_document(&doc.sentences, max_len)? {
            parts.push(self.encode_segment_on_tape(t, params, doc, &words[seg.words])?);
        }
        if parts.is_empty() {
            return Ok(t.constant(Matrix::zeros((0, self.width()))));
        }
        Ok(t.concat_rows(&parts))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDocument {
    pub states: Matrix,
    pub projected: Matrix,
}

/// Row-wise affine map `states · W + b`.
pub fn project(states: &Matrix, weight: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if states.ncols() != weight.nrows() || bias.dim() != (1, weight.ncols()) {
        return Err(Error::Config(format!(
            "projection shapes do not compose: states {:?}, weight {:?}, bias {:?}",
            states.dim(),
            weight.dim(),
            bias.dim()
        )));
    }
    Ok(states.dot(weight) + bias)
}

pub fn project_on_tape(t: &mut Tape, states: Var, weight: Var, bias: Var) -> Var {
    let y = t.matmul(states, weight);
    t.add_row(y, bias)
}

/// Encodes a document and projects it with the stored projection parameters.
pub fn encode(
    doc: &Document,
    backend: &EncoderBackend,
    params: &ParamStore,
    max_len: usize,
) -> Result<EncodedDocument> {
    let mut t = Tape::new();
    let states = backend.encode_on_tape(&mut t, params, doc, max_len)?;
    let states = t.value(states).clone();
    if states.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite encoder state in {}", doc.doc_id)));
    }
    let weight = params
        .get(PROJECT_WEIGHT)
        .ok_or_else(|| Error::Config("missing projection weight".into()))?;
    let bias = params
        .get(PROJECT_BIAS)
        .ok_or_else(|| Error::Config("missing projection bias".into()))?;
    let projected = project(&states, weight, bias)?;
    Ok(EncodedDocument { states, projected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::doc_with_mentions;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sentences(lengths: &[usize]) -> Vec<Vec<String>> {
        lengths.iter().map(|&n| vec!["w".to_string(); n]).collect()
    }

    #[test]
    fn greedy_packing_of_three_sentences() {
        let segs = chunk_document(&sentences(&[10, 10, 10]), 25).unwrap();
        let lens: Vec<_> = segs.iter().map(|s| s.words.len()).collect();
        assert_eq!(lens, vec![20, 10]);
        assert_eq!(segs[1].sentences, 2..3);
    }

    #[test]
    fn short_document_is_one_segment() {
        assert_eq!(chunk_document(&sentences(&[3, 4]), 512).unwrap().len(), 1);
    }

    #[test]
    fn overlong_sentence_is_a_config_error() {
        assert!(matches!(
            chunk_document(&sentences(&[3, 30]), 25),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sub_token_rows_are_averaged() {
        let enc = SubtokenEncoding {
            rows: array![[1.0, 2.0], [3.0, 6.0], [5.0, 5.0]],
            word_pieces: vec![0..2, 2..3],
        };
        assert_eq!(pool_subtokens(&enc).unwrap(), array![[2.0, 4.0], [5.0, 5.0]]);
    }

    fn toy_setup(width: usize) -> (Document, EncoderBackend, ParamStore) {
        let doc = doc_with_mentions(&[3, 5, 2], &[(0, 0, 0, 1)], 1, &[]);
        let vocab = ToyVocabulary::build([&doc], 1);
        let backend = EncoderBackend::Toy { vocab, width };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut specs = backend.param_specs();
        specs.push(ParamSpec::weight(PROJECT_WEIGHT, width, 3));
        specs.push(ParamSpec::zeros(PROJECT_BIAS, 1, 3));
        let params = ParamStore::initialize(&specs, crate::params::InitMode::Scaled, &mut rng);
        (doc, backend, params)
    }

    #[test]
    fn zero_embedding_table_gives_zero_states() {
        let (doc, backend, mut params) = toy_setup(4);
        params.zero_prefix(EMBEDDING);
        let enc = encode(&doc, &backend, &params, 512).unwrap();
        assert_eq!(enc.states.dim(), (10, 4));
        assert!(enc.states.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn toy_encoding_is_invariant_to_segment_length() {
        let (doc, backend, params) = toy_setup(4);
        let full = encode(&doc, &backend, &params, 512).unwrap();
        for max_len in [5, 7, 8, 10] {
            assert_eq!(encode(&doc, &backend, &params, max_len).unwrap(), full);
        }
    }

    #[test]
    fn precomputed_rows_load_unchanged() {
        let (doc, _, _) = toy_setup(4);
        let m = Matrix::from_shape_fn((10, 4), |(i, j)| (i * 4 + j) as f64 * 0.25);
        let dir = tempfile::tempdir().unwrap();
        PrecomputedEmbeddings::write(dir.path(), &BTreeMap::from([(doc.doc_id.clone(), m.clone())]))
            .unwrap();
        let store = PrecomputedEmbeddings::open(dir.path()).unwrap();
        let backend = EncoderBackend::Precomputed { store, width: 4 };
        let mut t = Tape::new();
        let v = backend.encode_on_tape(&mut t, &ParamStore::new(), &doc, 512).unwrap();
        assert_eq!(t.value(v), &m);

        let mut other = doc.clone();
        other.doc_id = "missing".into();
        let err = backend.encode_on_tape(&mut t, &ParamStore::new(), &other, 512).unwrap_err();
        assert_eq!(err.doc_id(), Some("missing"));

        let narrow = EncoderBackend::Precomputed {
            store: PrecomputedEmbeddings::open(dir.path()).unwrap(),
            width: 8,
        };
        assert!(matches!(
            narrow.encode_on_tape(&mut t, &ParamStore::new(), &doc, 512),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn contextual_backend_yields_one_row_per_word() {
        let (doc, _, _) = toy_setup(4);
        let backend = EncoderBackend::Contextual {
            encoder: Box::new(HashedSubwordEncoder {
                width: 6,
                piece_len: 2,
            }),
            max_len: 512,
        };
        let mut t = Tape::new();
        let v = backend.encode_on_tape(&mut t, &ParamStore::new(), &doc, 512).unwrap();
        assert_eq!(t.shape(v), (10, 6));
    }

    #[test]
    fn projection_special_cases() {
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let zero = project(&x, &Matrix::zeros((2, 2)), &Matrix::zeros((1, 2))).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let id = project(&x, &Matrix::eye(2), &Matrix::zeros((1, 2))).unwrap();
        assert_eq!(id, x);
        assert!(project(&x, &Matrix::zeros((3, 2)), &Matrix::zeros((1, 2))).is_err());
    }

    #[test]
    fn projection_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut draw = |r, c| Matrix::from_shape_simple_fn((r, c), || StandardNormal.sample(&mut rng));
        let (x, w, b) = (draw(4, 6), draw(6, 3), draw(1, 3));
        let got = project(&x, &w, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = b[[0, j]];
                for k in 0..6 {
                    acc += x[[i, k]] * w[[k, j]];
                }
                assert!((got[[i, j]] - acc).abs() < 1e-10);
            }
        }
    }
}
