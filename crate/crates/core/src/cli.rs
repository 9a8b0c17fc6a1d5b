//! Command-line front end.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::corpus::{
    build_zero_shot_split, load_examples, load_examples_for_schemas, load_schemas, load_tables, split_counts,
    write_examples, write_tables, Example, SchemaStore,
};
use crate::decode::{self, BeamConfig, Decoder, DEFAULT_BEAM_WIDTH};
use crate::encoder::{load_embedding_file, EncoderConfig, EncoderSource, PrecomputedEmbeddings};
use crate::evaluate::{evaluate, EvalReport};
use crate::heads::{self, TrainConfig};
use crate::model::{vocab_from_corpus, Model, ModelConfig};
use crate::sketch::{serialize, Aggregate, ValueMode};
use crate::synth;

#[derive(Debug, Parser)]
#[command(name = "nlsql", version, about = "Sketch-based natural language to SQL")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on annotated questions.
    Eval(EvalArgs),
    /// Translate questions read from standard input, one per line.
    Predict(PredictArgs),
    /// Keep only the test questions whose tables never occur in training.
    SplitZeroShot(SplitArgs),
    /// Compare back-propagated and finite-difference gradients on a tiny model.
    GradCheck(GradCheckArgs),
    /// Write the bundled synthetic tables and questions.
    ExportDemoCorpus(ExportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub tables: PathBuf,
    #[arg(long)]
    pub examples: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Precomputed embeddings; the toy encoder is trained when absent.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 16)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub head_hidden: usize,
    /// Per-epoch loss log (tab separated).
    #[arg(long)]
    pub report_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub tables: PathBuf,
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long, required_unless_present = "gold_self_test")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// 0 decodes greedily.
    #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
    pub beam_width: usize,
    /// Compare condition values byte-exactly instead of normalized.
    #[arg(long)]
    pub strict_values: bool,
    /// Score the gold queries against themselves.
    #[arg(long)]
    pub gold_self_test: bool,
    /// Training questions; restricts evaluation to unseen tables and labels the report zero-shot.
    #[arg(long)]
    pub split_against: Option<PathBuf>,
    /// Writes the report as JSON here and as key: value text next to it (`.txt`).
    #[arg(long)]
    pub report_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Tables file; only schemas are read.
    #[arg(long)]
    pub tables: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Needed when the tables file holds more than one table.
    #[arg(long)]
    pub table_id: Option<String>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
    pub beam_width: usize,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub tables: PathBuf,
    #[arg(long)]
    pub train_examples: PathBuf,
    /// Test questions to filter.
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Output tables file.
    #[arg(long)]
    pub tables: PathBuf,
    /// Output questions file.
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Predict(a) => cmd_predict(&a, input, out),
        Command::SplitZeroShot(a) => cmd_split_zero_shot(&a, out),
        Command::GradCheck(a) => cmd_grad_check(&a, out),
        Command::ExportDemoCorpus(a) => cmd_export(&a, out),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("cannot read {}: no such file", path.display());
    }
    Ok(())
}

fn decoder(width: usize) -> Decoder {
    if width == 0 {
        Decoder::Greedy
    } else {
        Decoder::Beam(BeamConfig::new(width))
    }
}

fn load_embeddings(path: Option<&Path>) -> Result<Option<PrecomputedEmbeddings>> {
    path.map(|p| load_embedding_file(p).with_context(|| format!("loading embeddings {}", p.display())))
        .transpose()
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    require_file(&a.tables)?;
    require_file(&a.examples)?;
    let schemas = load_schemas(&a.tables)?;
    let loaded = load_examples_for_schemas(&a.examples, &schemas)?;
    if loaded.examples.is_empty() {
        bail!("no training questions reference a known table");
    }
    let emb = load_embeddings(a.embeddings.as_deref())?;
    let vocab = vocab_from_corpus(&loaded.examples, &schemas);
    let mut encoder = EncoderConfig::trainable(vocab.len(), a.embed_dim, a.hidden_dim, a.seed);
    if let Some(e) = &emb {
        encoder.source = EncoderSource::Precomputed { dim: e.dim };
    }
    let mut model = Model::new(
        ModelConfig {
            encoder,
            head_hidden: a.head_hidden,
        },
        vocab,
    )?;
    model.check_embeddings(emb.as_ref())?;
    let items = loaded
        .examples
        .iter()
        .map(|e| model.train_item(e, &schemas))
        .collect::<crate::error::Result<Vec<_>>>()?;
    let config = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        momentum: a.momentum,
        seed: a.seed,
    };
    writeln!(
        out,
        "training on {} questions ({} skipped for unknown tables), {} parameters",
        items.len(),
        loaded.stats.skipped_unknown_table,
        model.params.num_scalars()
    )?;
    let mut log = String::from("epoch\tloss\n");
    let report = heads::train(&mut model, &items, emb.as_ref(), &config, |e, l| {
        let _ = writeln!(out, "epoch {}\tloss {l:.6}", e + 1);
        log.push_str(&format!("{}\t{l}\n", e + 1));
    })?;
    writeln!(
        out,
        "condition values without a question span: {}",
        report.skipped_spans
    )?;
    model.save(&a.checkpoint)?;
    writeln!(out, "checkpoint written to {}", a.checkpoint.display())?;
    if let Some(p) = &a.report_out {
        fs::write(p, log).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    require_file(&a.tables)?;
    require_file(&a.examples)?;
    let tables = load_tables(&a.tables)?;
    let mut examples = load_examples(&a.examples, &tables)?.examples;
    let mut label = String::from("dev");
    if let Some(train) = &a.split_against {
        require_file(train)?;
        let train = load_examples(train, &tables)?.examples;
        let kept = build_zero_shot_split(&train, &examples);
        let counts = split_counts(&examples, &kept);
        writeln!(
            out,
            "zero-shot split: {} questions on {} tables kept, {} questions on {} tables dropped",
            counts.retained_queries, counts.retained_tables, counts.dropped_queries, counts.dropped_tables
        )?;
        examples = kept;
        label = String::from("zero-shot");
    }
    let mode = if a.strict_values {
        ValueMode::Strict
    } else {
        ValueMode::Normalized
    };

    let report = if a.gold_self_test {
        let preds: Vec<_> = examples.iter().map(|e| e.gold.clone()).collect();
        evaluate(&preds, &examples, &tables, mode, &format!("{label} (gold self-test)"))
    } else {
        let ckpt = a.checkpoint.as_deref().expect("clap requires a checkpoint");
        require_file(ckpt)?;
        let model = Model::load(ckpt)?;
        let emb = load_embeddings(a.embeddings.as_deref())?;
        model.check_embeddings(emb.as_ref())?;
        let dec = decoder(a.beam_width);
        let mut preds = Vec::with_capacity(examples.len());
        let mut greedy_preds = Vec::with_capacity(examples.len());
        for ex in &examples {
            let schema = tables.schema(&ex.table_id).expect("loaded against these tables");
            let p = model.prepare(&ex.question, schema);
            let dists = model.distributions(&p, emb.as_ref())?;
            greedy_preds.push(decode::greedy(&dists, &p.question, &p.tokens));
            preds.push(decode::decode(&dec, &dists, &p.question, &p.tokens));
        }
        if a.beam_width > 0 {
            let g = evaluate(&greedy_preds, &examples, &tables, mode, "greedy");
            let b = evaluate(&preds, &examples, &tables, mode, "beam");
            writeln!(
                out,
                "greedy Acc_lf {:.4}, beam (width {}) Acc_lf {:.4}, delta {:+.4}",
                g.acc_lf,
                a.beam_width,
                b.acc_lf,
                b.acc_lf - g.acc_lf
            )?;
        }
        evaluate(&preds, &examples, &tables, mode, &label)
    };
    writeln!(out, "{report}")?;
    if let Some(p) = &a.report_out {
        write_report(p, &report)?;
    }
    Ok(())
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    let mut txt = path.as_os_str().to_owned();
    txt.push(".txt");
    let txt = PathBuf::from(txt);
    fs::write(&txt, report.to_text()).with_context(|| format!("writing {}", txt.display()))?;
    Ok(())
}

fn pick_schema(schemas: &SchemaStore, table_id: Option<&str>) -> Result<crate::corpus::TableSchema> {
    match table_id {
        Some(id) => schemas
            .get(id)
            .cloned()
            .with_context(|| format!("table `{id}` not found in schema file")),
        None if schemas.len() == 1 => Ok(schemas.values().next().expect("one").clone()),
        None => bail!("schema file holds {} tables; choose one with --table-id", schemas.len()),
    }
}

pub fn cmd_predict(a: &PredictArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    require_file(&a.tables)?;
    require_file(&a.checkpoint)?;
    let schemas = load_schemas(&a.tables)?;
    let schema = pick_schema(&schemas, a.table_id.as_deref())?;
    let model = Model::load(&a.checkpoint)?;
    let emb = load_embeddings(a.embeddings.as_deref())?;
    model.check_embeddings(emb.as_ref())?;
    let dec = decoder(a.beam_width);

    writeln!(out, "table {} ({})", schema.table_id, schema.headers.join(" | "))?;
    let mut line = String::new();
    loop {
        write!(out, "> ")?;
        out.flush()?;
        line.clear();
        if input.read_line(&mut line)? == 0 {
            writeln!(out)?;
            return Ok(());
        }
        let question = line.trim();
        let p = model.prepare(question, &schema);
        if p.tokens.is_empty() {
            writeln!(out, "please type a question")?;
            continue;
        }
        let (query, d) = match model.predict(&p, emb.as_ref(), &dec) {
            Ok(r) => r,
            Err(e) => {
                writeln!(out, "error: {e}")?;
                continue;
            }
        };
        writeln!(out, "{}", serialize(&query, &schema))?;
        let sa = heads::argmax(&d.p_sa);
        let sc = heads::argmax(&d.p_sc);
        let wn = heads::argmax(&d.p_wn);
        writeln!(out, "  sa: {} ({:.3})", agg_name(Aggregate::ALL[sa]), d.p_sa[sa])?;
        writeln!(out, "  sc: {} ({:.3})", schema.headers[sc], d.p_sc[sc])?;
        writeln!(out, "  wn: {wn} ({:.3})", d.p_wn[wn])?;
        for c in &query.conds {
            let op = c.op.id();
            writeln!(
                out,
                "  wc: {} ({:.3})  wo: {} ({:.3})  wv: {:?}",
                schema.headers[c.col],
                d.p_wc[c.col],
                c.op.symbol(),
                d.p_wo[c.col][op],
                c.value
            )?;
        }
    }
}

fn agg_name(a: Aggregate) -> &'static str {
    match a {
        Aggregate::None => "(none)",
        other => other.keyword(),
    }
}

pub fn cmd_split_zero_shot(a: &SplitArgs, out: &mut dyn Write) -> Result<()> {
    require_file(&a.tables)?;
    require_file(&a.train_examples)?;
    require_file(&a.examples)?;
    let schemas = load_schemas(&a.tables)?;
    let train = load_examples_for_schemas(&a.train_examples, &schemas)?.examples;
    let test = load_examples_for_schemas(&a.examples, &schemas)?.examples;
    let kept = build_zero_shot_split(&train, &test);
    let train_tables: BTreeSet<&str> = train.iter().map(|e| e.table_id.as_str()).collect();
    assert!(kept.iter().all(|e| !train_tables.contains(e.table_id.as_str())));
    write_examples(&a.out, &kept)?;
    let c = split_counts(&test, &kept);
    writeln!(
        out,
        "retained {} questions on {} tables; dropped {} questions on {} tables",
        c.retained_queries, c.retained_tables, c.dropped_queries, c.dropped_tables
    )?;
    Ok(())
}

pub fn cmd_grad_check(a: &GradCheckArgs, out: &mut dyn Write) -> Result<()> {
    let (model, item) = heads::tiny_grad_check_case(a.seed);
    let r = heads::grad_check(&model, &item, None, a.step)?;
    writeln!(out, "checked {} scalars with step {}", r.checked, a.step)?;
    writeln!(
        out,
        "max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
        r.max_relative_error, r.worst_param, r.worst_index, r.analytic, r.numeric
    )?;
    if r.max_relative_error >= a.tolerance {
        bail!(
            "gradient check failed: {:.3e} >= {:.1e}",
            r.max_relative_error,
            a.tolerance
        );
    }
    writeln!(out, "ok")?;
    Ok(())
}

pub fn cmd_export(a: &ExportArgs, out: &mut dyn Write) -> Result<()> {
    let examples: Vec<Example> = synth::demo_examples(a.count, a.seed);
    write_tables(&a.tables, &synth::demo_tables())?;
    write_examples(&a.examples, &examples)?;
    writeln!(
        out,
        "wrote {} tables to {} and {} questions to {}",
        synth::demo_tables().len(),
        a.tables.display(),
        examples.len(),
        a.examples.display()
    )?;
    Ok(())
}
