//! Contextual vectors for question tokens (`Q`) and headers (`H`).
//!
//! Two sources are supported. The trainable path embeds the question tokens
//! and every header's words, runs one shared bidirectional LSTM over
//! `[question, <sep>, header-1 words, <sep>, header-2 words, ...]`, keeps the
//! per-token outputs of the question segment and mean-pools each header
//! segment. The precomputed path reads frozen vectors from an NLQE file.
//! Either way each row is then extended by its knowledge bit.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BiLstm, Graph, ParamBuilder, ParamId, ParamStore, Tensor, Var};

pub const UNK: usize = 0;
pub const SEP: usize = 1;
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderSource {
    Trainable,
    /// Frozen vectors of width `dim` read from an embedding file.
    Precomputed {
        dim: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub source: EncoderSource,
}

impl EncoderConfig {
    pub fn trainable(vocab_size: usize, embed_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            embed_dim,
            hidden_dim,
            seed,
            source: EncoderSource::Trainable,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err("encoder dimensions must be at least 1".into());
        }
        match self.source {
            EncoderSource::Trainable if self.vocab_size < 2 => {
                Err("vocabulary must hold at least the reserved ids".into())
            }
            EncoderSource::Precomputed { dim: 0 } => Err("embedding width must be at least 1".into()),
            _ => Ok(()),
        }
    }

    /// Row width of [`EncoderOutput`], knowledge bit included.
    pub fn output_dim(&self) -> usize {
        match self.source {
            EncoderSource::Trainable => 2 * self.hidden_dim + 1,
            EncoderSource::Precomputed { dim } => dim + 1,
        }
    }

    /// Closed-form scalar count of the trainable encoder.
    pub fn num_scalars(&self) -> usize {
        match self.source {
            EncoderSource::Trainable => {
                self.vocab_size * self.embed_dim + BiLstm::num_scalars(self.embed_dim, self.hidden_dim)
            }
            EncoderSource::Precomputed { .. } => 0,
        }
    }
}

/// Corpus-built word list; ids 0 and 1 are `<unk>` and `<sep>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        Self::from_words(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// Every distinct token (frequency cutoff 1), sorted for determinism.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: Vec<String> = tokens.into_iter().map(str::to_string).collect();
        set.sort();
        set.dedup();
        let mut words = vec!["<unk>".to_string(), "<sep>".to_string()];
        words.extend(set.into_iter().filter(|w| w != "<unk>" && w != "<sep>"));
        Self::from_words(words)
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EncoderParams {
    pub embedding: ParamId,
    pub rnn: BiLstm,
}

impl EncoderParams {
    pub fn declare(config: &EncoderConfig, pb: &mut ParamBuilder) -> Self {
        Self {
            embedding: pb.uniform("encoder.embedding", config.vocab_size, config.embed_dim),
            rnn: BiLstm::new(pb, "encoder.rnn", config.embed_dim, config.hidden_dim),
        }
    }
}

/// Fresh trainable encoder parameters, uniform on [-0.1, 0.1] from `seed`.
/// Panics if `config` is not a valid trainable configuration.
pub fn init(config: &EncoderConfig, seed: u64) -> (EncoderParams, ParamStore) {
    config.validate().expect("valid encoder config");
    assert_eq!(config.source, EncoderSource::Trainable, "init needs a trainable config");
    let mut pb = ParamBuilder::new(seed, INIT_SCALE);
    let enc = EncoderParams::declare(config, &mut pb);
    (enc, pb.finish())
}

/// Vocabulary ids for one question and its headers plus knowledge bits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderInput {
    pub question_ids: Vec<usize>,
    /// Word ids of each header (a header always contributes at least one id).
    pub header_ids: Vec<Vec<usize>>,
    pub qmv: Vec<u8>,
    pub hmv: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderOutput {
    /// `n_q x d`.
    pub q_vectors: Tensor,
    /// `n_h x d`.
    pub h_vectors: Tensor,
}

fn bits_column(bits: &[u8]) -> Tensor {
    Tensor::column_vector(bits.iter().map(|&b| f64::from(b)).collect())
}

/// Appends the knowledge bit column to raw `q`/`h` rows on the tape.
pub(crate) fn augment(g: &mut Graph, q: Var, h: Var, input: &EncoderInput) -> (Var, Var) {
    let qb = g.input(bits_column(&input.qmv));
    let hb = g.input(bits_column(&input.hmv));
    let q = g.concat_cols(vec![q, qb]);
    let h = g.concat_cols(vec![h, hb]);
    (q, h)
}

/// Trainable encoder on the tape. Panics on an empty question or schema.
pub(crate) fn encode_graph(g: &mut Graph, enc: &EncoderParams, input: &EncoderInput) -> (Var, Var) {
    assert!(!input.question_ids.is_empty(), "cannot encode an empty question");
    assert!(!input.header_ids.is_empty(), "cannot encode a table without headers");
    assert_eq!(input.qmv.len(), input.question_ids.len());
    assert_eq!(input.hmv.len(), input.header_ids.len());

    let mut seq = input.question_ids.clone();
    let mut segments = Vec::with_capacity(input.header_ids.len());
    for words in &input.header_ids {
        seq.push(SEP);
        let start = seq.len();
        seq.extend_from_slice(words);
        segments.push((start, words.len()));
    }
    let table = g.param(enc.embedding);
    let x = g.gather_rows(table, seq);
    let out = enc.rnn.forward(g, x);

    let n_q = input.question_ids.len();
    let q = g.slice_rows(out, 0, n_q);
    let pooled: Vec<Var> = segments
        .into_iter()
        .map(|(start, len)| {
            let seg = g.slice_rows(out, start, len);
            g.mean_rows(seg)
        })
        .collect();
    let h = g.concat_rows(pooled);
    augment(g, q, h, input)
}

/// Frozen vectors on the tape.
pub(crate) fn precomputed_graph(g: &mut Graph, rec: &EmbeddingRecord, input: &EncoderInput) -> (Var, Var) {
    assert_eq!(
        rec.q_vectors.rows,
        input.qmv.len(),
        "question length differs from embedding rows"
    );
    assert_eq!(
        rec.h_vectors.rows,
        input.hmv.len(),
        "header count differs from embedding rows"
    );
    let q = g.input(rec.q_vectors.clone());
    let h = g.input(rec.h_vectors.clone());
    augment(g, q, h, input)
}

/// Runs the trainable encoder outside of training.
pub fn encode(input: &EncoderInput, enc: &EncoderParams, params: &ParamStore) -> EncoderOutput {
    let mut g = Graph::new(params);
    let (q, h) = encode_graph(&mut g, enc, input);
    EncoderOutput {
        q_vectors: g.value(q).clone(),
        h_vectors: g.value(h).clone(),
    }
}

/// Vectors for one example before knowledge augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub q_vectors: Tensor,
    pub h_vectors: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrecomputedEmbeddings {
    pub dim: usize,
    /// File order.
    pub ids: Vec<String>,
    records: HashMap<String, EmbeddingRecord>,
}

pub const NLQE_MAGIC: &[u8; 4] = b"NLQE";
pub const NLQE_VERSION: u8 = 1;

impl PrecomputedEmbeddings {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Self::default() }
    }

    pub fn insert(&mut self, id: impl Into<String>, rec: EmbeddingRecord) {
        assert_eq!(rec.q_vectors.cols, self.dim);
        assert_eq!(rec.h_vectors.cols, self.dim);
        let id = id.into();
        if self.records.insert(id.clone(), rec).is_none() {
            self.ids.push(id);
        }
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.records.get(id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Encoder output for one example with knowledge bits appended.
    pub fn encode(&self, id: &str, input: &EncoderInput) -> Result<EncoderOutput> {
        let rec = self.get(id).ok_or_else(|| Error::MissingEmbeddings(id.to_string()))?;
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let (q, h) = precomputed_graph(&mut g, rec, input);
        Ok(EncoderOutput {
            q_vectors: g.value(q).clone(),
            h_vectors: g.value(h).clone(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(NLQE_MAGIC);
        out.push(NLQE_VERSION);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        for id in &self.ids {
            let rec = &self.records[id];
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.extend_from_slice(&(rec.q_vectors.rows as u32).to_le_bytes());
            out.extend_from_slice(&(rec.h_vectors.rows as u32).to_le_bytes());
            for v in rec.q_vectors.data.iter().chain(&rec.h_vectors.data) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != NLQE_MAGIC {
            return Err(r.error_at(0, format!("bad magic {magic:?}")));
        }
        let version = r.take(1, "version")?[0];
        if version != NLQE_VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let dim = r.u32("dimension")? as usize;
        if dim == 0 {
            return Err(r.error_at(5, "dimension must be at least 1".into()));
        }
        let count = r.u32("example count")? as usize;
        let mut out = Self::new(dim);
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32("id length")? as usize;
            let id = std::str::from_utf8(r.take(len, "id")?)
                .map_err(|_| r.error_at(at + 4, "id is not UTF-8".into()))?
                .to_string();
            let n_q = r.u32("question length")? as usize;
            let n_h = r.u32("header count")? as usize;
            let q = r.floats(n_q, dim)?;
            let h = r.floats(n_h, dim)?;
            if out.records.contains_key(&id) {
                return Err(r.error_at(at, format!("duplicate example id `{id}`")));
            }
            out.insert(
                id,
                EmbeddingRecord {
                    q_vectors: q,
                    h_vectors: h,
                },
            );
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<PrecomputedEmbeddings> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    PrecomputedEmbeddings::from_bytes(&bytes)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn error_at(&self, offset: usize, message: String) -> Error {
        Error::EmbeddingFormat { offset, message }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn floats(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| self.error_at(self.pos, "vector block size overflows".into()))?;
        let b = self.take(n, "vector payload")?;
        let data = b
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Ok(Tensor::from_vec(rows, cols, data))
    }
}
