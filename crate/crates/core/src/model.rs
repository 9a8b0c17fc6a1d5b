//! Encoder plus heads as one unit: feature preparation, prediction, checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, SchemaStore, TableSchema};
use crate::decode::{self, Decoder};
use crate::encoder::{
    encode_graph, precomputed_graph, EncoderConfig, EncoderInput, EncoderOutput, EncoderParams, EncoderSource,
    PrecomputedEmbeddings, Vocab, INIT_SCALE, UNK,
};
use crate::error::{Error, Result};
use crate::heads::{self, Conditioning, GoldTargets, HeadLayers, SlotDistributions, ValuePairs};
use crate::knowledge;
use crate::nn::{Graph, ParamBuilder, ParamStore, Tensor, Var};
use crate::sketch::SqlQuery;
use crate::tokenize::{tokenize, Token};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NLQC";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Per-direction LSTM width inside every head.
    pub head_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.encoder.validate()?;
        if self.head_hidden == 0 {
            return Err("head hidden size must be at least 1".into());
        }
        Ok(())
    }
}

/// A question with its schema turned into encoder input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prepared {
    pub id: String,
    pub question: String,
    pub tokens: Vec<Token>,
    pub input: EncoderInput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainItem {
    pub prepared: Prepared,
    pub gold: GoldTargets,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    encoder: Option<EncoderParams>,
    heads: HeadLayers,
}

/// Vocabulary over all question tokens and header words of `examples`.
pub fn vocab_from_corpus(examples: &[Example], schemas: &SchemaStore) -> Vocab {
    let mut words: Vec<String> = Vec::new();
    for ex in examples {
        words.extend(tokenize(&ex.question).into_iter().map(|t| t.text));
        if let Some(s) = schemas.get(&ex.table_id) {
            for h in &s.headers {
                words.extend(tokenize(h).into_iter().map(|t| t.text));
            }
        }
    }
    Vocab::build(words.iter().map(String::as_str))
}

fn declare(config: &ModelConfig, pb: &mut ParamBuilder) -> (Option<EncoderParams>, HeadLayers) {
    let encoder = match config.encoder.source {
        EncoderSource::Trainable => Some(EncoderParams::declare(&config.encoder, pb)),
        EncoderSource::Precomputed { .. } => None,
    };
    let heads = HeadLayers::declare(pb, config.encoder.output_dim(), config.head_hidden);
    (encoder, heads)
}

impl Model {
    /// Fresh parameters, uniform on [-0.1, 0.1] from the encoder seed.
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate().map_err(Error::DimensionMismatch)?;
        if config.encoder.source == EncoderSource::Trainable && config.encoder.vocab_size != vocab.len() {
            return Err(Error::DimensionMismatch(format!(
                "config vocabulary size {} but vocabulary holds {} words",
                config.encoder.vocab_size,
                vocab.len()
            )));
        }
        let mut pb = ParamBuilder::new(config.encoder.seed, INIT_SCALE);
        let (encoder, heads) = declare(&config, &mut pb);
        Ok(Self {
            config,
            vocab,
            params: pb.finish(),
            encoder,
            heads,
        })
    }

    pub fn prepare(&self, question: &str, schema: &TableSchema) -> Prepared {
        let tokens = tokenize(question);
        let texts: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
        let kv = knowledge::build(&texts, &schema.headers);
        let header_ids = schema
            .headers
            .iter()
            .map(|h| {
                let ids: Vec<usize> = tokenize(h).iter().map(|t| self.vocab.id(&t.text)).collect();
                if ids.is_empty() {
                    vec![UNK]
                } else {
                    ids
                }
            })
            .collect();
        Prepared {
            id: crate::corpus::example_id(&schema.table_id, question),
            question: question.to_string(),
            input: EncoderInput {
                question_ids: texts.iter().map(|w| self.vocab.id(w)).collect(),
                header_ids,
                qmv: kv.qmv,
                hmv: kv.hmv,
            },
            tokens,
        }
    }

    /// Prepared input plus supervision. Fails if the example's table is unknown
    /// or its question has no tokens.
    pub fn train_item(&self, example: &Example, schemas: &SchemaStore) -> Result<TrainItem> {
        let schema = schemas.get(&example.table_id).ok_or_else(|| Error::Annotation {
            line: 0,
            message: format!("unknown table `{}`", example.table_id),
        })?;
        let prepared = self.prepare(&example.question, schema);
        if prepared.tokens.is_empty() {
            return Err(Error::Annotation {
                line: 0,
                message: format!("example `{}` has an empty question", example.id),
            });
        }
        let gold = GoldTargets::from_query(&example.gold, &prepared.tokens);
        Ok(TrainItem { prepared, gold })
    }

    pub(crate) fn heads(&self) -> &HeadLayers {
        &self.heads
    }

    /// Checks that precomputed embeddings fit this model.
    pub fn check_embeddings(&self, emb: Option<&PrecomputedEmbeddings>) -> Result<()> {
        match (self.config.encoder.source, emb) {
            (EncoderSource::Precomputed { dim }, Some(e)) if e.dim != dim => Err(Error::DimensionMismatch(format!(
                "checkpoint expects {dim}-wide embeddings, file holds {}-wide vectors",
                e.dim
            ))),
            (EncoderSource::Precomputed { .. }, None) => {
                Err(Error::MissingEmbeddings("model needs an embeddings file".into()))
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn encode_vars(
        &self,
        g: &mut Graph,
        prepared: &Prepared,
        emb: Option<&PrecomputedEmbeddings>,
    ) -> Result<(Var, Var)> {
        match (self.config.encoder.source, &self.encoder) {
            (EncoderSource::Trainable, Some(enc)) => Ok(encode_graph(g, enc, &prepared.input)),
            _ => {
                self.check_embeddings(emb)?;
                let emb = emb.expect("checked above");
                let rec = emb
                    .get(&prepared.id)
                    .ok_or_else(|| Error::MissingEmbeddings(prepared.id.clone()))?;
                let (nq, nh) = (prepared.input.qmv.len(), prepared.input.hmv.len());
                if rec.q_vectors.rows != nq || rec.h_vectors.rows != nh {
                    return Err(Error::DimensionMismatch(format!(
                        "example `{}`: embeddings hold {}x{} rows, input has {nq} tokens and {nh} headers",
                        prepared.id, rec.q_vectors.rows, rec.h_vectors.rows
                    )));
                }
                Ok(precomputed_graph(g, rec, &prepared.input))
            }
        }
    }

    pub fn encode(&self, prepared: &Prepared, emb: Option<&PrecomputedEmbeddings>) -> Result<EncoderOutput> {
        let mut g = Graph::new(&self.params);
        let (q, h) = self.encode_vars(&mut g, prepared, emb)?;
        Ok(EncoderOutput {
            q_vectors: g.value(q).clone(),
            h_vectors: g.value(h).clone(),
        })
    }

    /// Slot distributions at inference time (where-number conditioned on its own argmax).
    pub fn distributions(&self, prepared: &Prepared, emb: Option<&PrecomputedEmbeddings>) -> Result<SlotDistributions> {
        self.distributions_with(prepared, emb, Conditioning::Predicted)
    }

    pub fn distributions_with(
        &self,
        prepared: &Prepared,
        emb: Option<&PrecomputedEmbeddings>,
        cond: Conditioning,
    ) -> Result<SlotDistributions> {
        let mut g = Graph::new(&self.params);
        let (q, h) = self.encode_vars(&mut g, prepared, emb)?;
        let vars = heads::heads_graph(&mut g, &self.heads, q, h, cond, ValuePairs::All);
        Ok(heads::distributions_from(&g, &vars))
    }

    pub fn predict(
        &self,
        prepared: &Prepared,
        emb: Option<&PrecomputedEmbeddings>,
        decoder: &Decoder,
    ) -> Result<(SqlQuery, SlotDistributions)> {
        let dists = self.distributions(prepared, emb)?;
        let query = decode::decode(decoder, &dists, &prepared.question, &prepared.tokens);
        Ok((query, dists))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            config: self.config,
            vocab: self.vocab.words().to_vec(),
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.to_string(),
                    rows: t.rows,
                    cols: t.cols,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(9 + json.len() + 4 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 9 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", bytes[4])));
        }
        let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(9..9 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let mut model = Model::new(manifest.config, Vocab::from_words(manifest.vocab))?;

        if manifest.params.len() != model.params.len() {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint lists {} parameters, configuration declares {}",
                manifest.params.len(),
                model.params.len()
            )));
        }
        for (entry, id) in manifest.params.iter().zip(model.params.ids().collect::<Vec<_>>()) {
            let t = model.params.get(id);
            if entry.name != model.params.name(id) || (entry.rows, entry.cols) != t.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "parameter `{}` is {}x{} in checkpoint, configuration expects `{}` {}x{}",
                    entry.name,
                    entry.rows,
                    entry.cols,
                    model.params.name(id),
                    t.rows,
                    t.cols
                )));
            }
        }
        let payload = &bytes[9 + len..];
        let expected = 4 * model.params.num_scalars();
        if payload.len() != expected {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, manifest requires {expected}",
                payload.len()
            )));
        }
        let mut chunks = payload.chunks_exact(4);
        for id in model.params.ids().collect::<Vec<_>>() {
            let t: &mut Tensor = model.params.get_mut(id);
            for v in &mut t.data {
                let c = chunks.next().expect("length checked");
                *v = f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")));
            }
        }
        if !model.params.all_finite() {
            return Err(bad("non-finite parameter value"));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    vocab: Vec<String>,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ColumnType;
    use crate::encoder::EmbeddingRecord;

    fn schema() -> TableSchema {
        TableSchema::new(
            "1-10015132-11",
            vec![
                "Player".into(),
                "No.".into(),
                "Nationality".into(),
                "Years in Toronto".into(),
            ],
            vec![ColumnType::Text, ColumnType::Text, ColumnType::Text, ColumnType::Text],
        )
        .unwrap()
    }

    fn model(source: EncoderSource) -> Model {
        let vocab = Vocab::build(["what", "is", "the", "nationality", "player"]);
        let mut encoder = EncoderConfig::trainable(vocab.len(), 6, 5, 3);
        encoder.source = source;
        Model::new(
            ModelConfig {
                encoder,
                head_hidden: 4,
            },
            vocab,
        )
        .unwrap()
    }

    #[test]
    fn prepare_builds_ids_and_knowledge() {
        let m = model(EncoderSource::Trainable);
        let p = m.prepare("What is the nationality of Marcus Camby?", &schema());
        assert_eq!(p.tokens.len(), 8);
        assert_eq!(p.input.qmv, vec![0, 0, 0, 1, 0, 0, 0, 0]);
        assert_eq!(p.input.hmv, vec![0, 0, 1, 0]);
        assert_eq!(p.input.question_ids[0], m.vocab.id("what"));
        assert_eq!(p.input.question_ids[5], UNK);
        assert_eq!(p.input.header_ids[3].len(), 3);
    }

    #[test]
    fn checkpoint_round_trip_is_exact_after_f32_rounding() {
        let m = model(EncoderSource::Trainable);
        let bytes = m.to_bytes();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.vocab.words(), m.vocab.words());
        assert_eq!(back.to_bytes(), bytes);
        for (a, b) in back.params.flat().iter().zip(m.params.flat()) {
            assert_eq!(*a, f64::from(b as f32));
        }
    }

    #[test]
    fn checkpoint_rejects_damage() {
        let bytes = model(EncoderSource::Trainable).to_bytes();
        assert!(matches!(
            Model::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Checkpoint(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Model::from_bytes(&extra), Err(Error::Checkpoint(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Model::from_bytes(&magic), Err(Error::Checkpoint(_))));
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(Model::from_bytes(&version), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn checkpoint_with_wrong_shapes_names_the_mismatch() {
        let m = model(EncoderSource::Trainable);
        let bytes = m.to_bytes();
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[9..9 + len]).unwrap();
        let mut manifest: serde_json::Value = serde_json::from_str(json).unwrap();
        manifest["params"][0]["cols"] = serde_json::json!(7);
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut forged = bytes[..5].to_vec();
        forged.extend_from_slice(&(json.len() as u32).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(&bytes[9 + len..]);
        let err = Model::from_bytes(&forged).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
        assert!(err.to_string().contains("encoder.embedding"), "{err}");
    }

    #[test]
    fn precomputed_model_checks_embeddings() {
        let m = model(EncoderSource::Precomputed { dim: 3 });
        let p = m.prepare("what is the nationality", &schema());
        assert!(matches!(m.distributions(&p, None), Err(Error::MissingEmbeddings(_))));

        let wrong = PrecomputedEmbeddings::new(4);
        let err = m.distributions(&p, Some(&wrong)).unwrap_err();
        assert!(err.to_string().contains("3-wide"), "{err}");

        let mut emb = PrecomputedEmbeddings::new(3);
        assert!(matches!(
            m.distributions(&p, Some(&emb)),
            Err(Error::MissingEmbeddings(_))
        ));
        emb.insert(
            p.id.clone(),
            EmbeddingRecord {
                q_vectors: Tensor::zeros(4, 3),
                h_vectors: Tensor::zeros(4, 3),
            },
        );
        let d = m.distributions(&p, Some(&emb)).unwrap();
        assert_eq!(d.p_sc.len(), 4);
        assert_eq!(m.encode(&p, Some(&emb)).unwrap().q_vectors.shape(), (4, 4));
    }

    #[test]
    fn vocab_size_must_match_config() {
        let vocab = Vocab::build(["a"]);
        let cfg = ModelConfig {
            encoder: EncoderConfig::trainable(10, 4, 4, 0),
            head_hidden: 4,
        };
        assert!(matches!(Model::new(cfg, vocab), Err(Error::DimensionMismatch(_))));
    }
}
