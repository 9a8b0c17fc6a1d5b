use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nlsql::decode::{self, BeamConfig, Decoder};
use nlsql::encoder::{load_embedding_file, EmbeddingRecord, EncoderConfig, EncoderSource, PrecomputedEmbeddings};
use nlsql::heads::{self, TrainConfig};
use nlsql::model::{vocab_from_corpus, Model, ModelConfig};
use nlsql::nn::Tensor;
use nlsql::synth;
use nlsql::Error;

fn demo_model(seed: u64, dim: usize) -> Model {
    let schemas = synth::demo_schemas();
    let examples = synth::demo_examples(16, 0);
    let vocab = vocab_from_corpus(&examples, &schemas);
    Model::new(
        ModelConfig {
            encoder: EncoderConfig::trainable(vocab.len(), dim, dim, seed),
            head_hidden: dim,
        },
        vocab,
    )
    .unwrap()
}

fn short_training(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 0.1,
        batch_size: 4,
        momentum: 0.9,
        seed: 0,
    }
}

#[test]
fn saved_model_predicts_like_the_original() {
    let schemas = synth::demo_schemas();
    let examples = synth::demo_examples(16, 0);
    let mut model = demo_model(1, 8);
    let items: Vec<_> = examples
        .iter()
        .map(|e| model.train_item(e, &schemas).unwrap())
        .collect();
    heads::train(&mut model, &items, None, &short_training(5), |_, _| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());

    // Parameters are stored as f32: distributions agree closely, and a
    // reloaded model survives a second round trip unchanged.
    let again = Model::from_bytes(&loaded.to_bytes()).unwrap();
    let decoder = Decoder::Beam(BeamConfig::new(4));
    for item in &items {
        let da = model.distributions(&item.prepared, None).unwrap();
        let db = loaded.distributions(&item.prepared, None).unwrap();
        let pairs = da
            .p_sa
            .iter()
            .zip(&db.p_sa)
            .chain(da.p_sc.iter().zip(&db.p_sc))
            .chain(da.p_wn.iter().zip(&db.p_wn))
            .chain(da.p_wc.iter().zip(&db.p_wc));
        for (x, y) in pairs {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
        assert_eq!(
            loaded.predict(&item.prepared, None, &decoder).unwrap().0,
            again.predict(&item.prepared, None, &decoder).unwrap().0
        );
    }
}

fn random_embeddings(model: &Model, dim: usize, seed: u64) -> PrecomputedEmbeddings {
    let schemas = synth::demo_schemas();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut emb = PrecomputedEmbeddings::new(dim);
    for e in synth::demo_examples(16, 0) {
        let p = model.prepare(&e.question, &schemas[&e.table_id]);
        let mut t =
            |rows: usize| Tensor::from_vec(rows, dim, (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let rec = EmbeddingRecord {
            q_vectors: t(p.tokens.len()),
            h_vectors: t(p.input.hmv.len()),
        };
        emb.insert(p.id, rec);
    }
    emb
}

#[test]
fn precomputed_embeddings_train_and_reload() {
    let schemas = synth::demo_schemas();
    let examples = synth::demo_examples(16, 0);
    let vocab = vocab_from_corpus(&examples, &schemas);
    let mut encoder = EncoderConfig::trainable(vocab.len(), 1, 1, 2);
    encoder.source = EncoderSource::Precomputed { dim: 6 };
    let mut model = Model::new(
        ModelConfig {
            encoder,
            head_hidden: 8,
        },
        vocab,
    )
    .unwrap();
    let emb = random_embeddings(&model, 6, 9);

    let dir = tempfile::tempdir().unwrap();
    let emb_path = dir.path().join("e.nlqe");
    emb.write(&emb_path).unwrap();
    let emb = load_embedding_file(&emb_path).unwrap();
    assert_eq!(emb.len(), 16);

    let items: Vec<_> = examples
        .iter()
        .map(|e| model.train_item(e, &schemas).unwrap())
        .collect();
    let report = heads::train(&mut model, &items, Some(&emb), &short_training(20), |_, _| {}).unwrap();
    assert!(
        report.loss_curve.last().unwrap() < &report.loss_curve[0],
        "{:?}",
        report.loss_curve
    );

    let g = heads::grad_check(&model, &items[0], Some(&emb), 1e-4).unwrap();
    assert!(g.max_relative_error < 1e-4, "{g:?}");

    assert!(matches!(
        model.predict(&items[0].prepared, None, &Decoder::Greedy),
        Err(Error::MissingEmbeddings(_))
    ));
    let narrow = random_embeddings(&model, 5, 9);
    assert!(matches!(
        model.check_embeddings(Some(&narrow)),
        Err(Error::DimensionMismatch(_))
    ));
    assert!(matches!(
        model.predict(&items[0].prepared, Some(&narrow), &Decoder::Greedy),
        Err(Error::DimensionMismatch(_))
    ));
    let other = model.prepare("a question never embedded", &schemas["demo-films"]);
    assert!(matches!(
        model.predict(&other, Some(&emb), &Decoder::Greedy),
        Err(Error::MissingEmbeddings(_))
    ));
}

#[test]
fn gradient_check_holds_at_half_step_and_other_seeds() {
    for (seed, step) in [(0, 5e-5), (3, 1e-4), (3, 5e-5)] {
        let (model, item) = heads::tiny_grad_check_case(seed);
        let r = heads::grad_check(&model, &item, None, step).unwrap();
        assert!(r.max_relative_error < 1e-4, "seed {seed} step {step}: {r:?}");
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn distributions_are_valid(seed in 0u64..1000, pick in 0usize..64, words in proptest::collection::vec("[a-z]{1,6}", 0..4)) {
        let schemas = synth::demo_schemas();
        let examples = synth::demo_examples(64, 1);
        let model = demo_model(seed, 6);
        let e = &examples[pick];
        let question = format!("{} {}", e.question, words.join(" "));
        let p = model.prepare(&question, &schemas[&e.table_id]);
        let d = model.distributions(&p, None).unwrap();
        let n_h = p.input.hmv.len();
        let n_t = p.tokens.len();

        prop_assert_eq!(d.p_sa.len(), 6);
        prop_assert_eq!(d.p_sc.len(), n_h);
        prop_assert_eq!(d.p_wn.len(), heads::N_WN);
        for dist in [&d.p_sa, &d.p_sc, &d.p_wn] {
            prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(dist.iter().all(|&x| x > 0.0 && x.is_finite()));
        }
        prop_assert_eq!(d.p_wc.len(), n_h);
        prop_assert!(d.p_wc.iter().all(|&x| x > 0.0 && x < 1.0));
        for c in 0..n_h {
            prop_assert!((d.p_wo[c].iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for o in 0..heads::N_OP {
                prop_assert_eq!(d.wv_start[c][o].len(), n_t);
                prop_assert!(log_sum_exp(&d.wv_start[c][o]).abs() < 1e-9);
                prop_assert!(log_sum_exp(&d.wv_end[c][o]).abs() < 1e-9);
            }
        }
        let top = d.p_wn.iter().copied().fold(0.0, f64::max);
        prop_assert_eq!(d.p_wn[d.wn_used], top);

        let q = decode::greedy(&d, &p.question, &p.tokens);
        prop_assert!(q.sel < n_h);
        prop_assert!(q.conds.len() <= 4.min(n_h));
        prop_assert!(q.conds.iter().all(|c| c.col < n_h && !c.value.is_empty()));
    }
}
