use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde_json::{json, Value};

use taser_core::bm25::InvertedIndex;
use taser_core::data::{
    load_corpus, load_dataset, make_synthetic_task, write_corpus, write_dataset, CorpusRecord,
    DatasetRecord,
};
use taser_core::dense::{embed_corpus, DenseIndex};
use taser_core::encoder::{
    count_bi_encoder_params, count_params, load_checkpoint, save_checkpoint,
};
use taser_core::hybrid::{hybrid_run, tune_alpha};
use taser_core::metrics::{
    aggregate, ndcg_at_k, recall_at_k, Aggregation, AnswerMatcher, MetricsReport, QrelSet,
};
use taser_core::pipeline::{
    answer_set, attach_bm25_negatives, attach_mined_negatives, bm25_run, build_vocab, dense_run,
    mining_queries, passage_texts, tokenize_corpus, tokenize_questions, train_examples,
    train_fresh, train_from, DevEvaluator,
};
use taser_core::train::{mine_hard_negatives, write_log, TrainReport};
use taser_core::{EncoderConfig, Error, Result, RoutingKind, Run, RunConfig, TaserEncoder, Vocab};

use crate::{
    CheckpointArgs, Command, EvalArgs, MineArgs, ParamsArgs, Preset, SearchArgs, SearchMode, Split,
    TrainArgs, TuneArgs,
};

pub fn run(command: &Command, config: RunConfig) -> Result<()> {
    match command {
        Command::Params(a) => params(a, &config),
        other => {
            let ws = Workspace::open(&config)?;
            match other {
                Command::Params(_) => unreachable!("handled above"),
                Command::MakeTask => make_task(&ws, config),
                Command::Train(a) => train(&ws, &config, a),
                Command::Mine(a) => mine(&ws, &config, a),
                Command::Embed(a) => embed(&ws, &config, a),
                Command::Search(a) => search(&ws, &config, a),
                Command::Eval(a) => eval(&ws, &config, a),
                Command::TuneAlpha(a) => tune(&ws, &config, a),
            }
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Directory receiving every artifact.
struct Workspace {
    dir: PathBuf,
}

impl Workspace {
    fn open(config: &RunConfig) -> Result<Self> {
        let dir = config.paths.workspace.clone().ok_or_else(|| {
            Error::Parameter("missing path: paths.workspace (or pass --workspace)".into())
        })?;
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(Self { dir })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn checkpoint(&self, args: &CheckpointArgs) -> PathBuf {
        args.checkpoint
            .clone()
            .unwrap_or_else(|| self.file("model.json"))
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Dev => "dev",
    }
}

/// Corpus and datasets named by the config, validated against each other.
struct Data {
    corpus: Vec<CorpusRecord>,
    texts: Vec<String>,
}

impl Data {
    fn load(config: &RunConfig) -> Result<Self> {
        let corpus = load_corpus(RunConfig::require_path(
            "paths.corpus",
            &config.paths.corpus,
        )?)?;
        let texts = passage_texts(&corpus);
        Ok(Self { corpus, texts })
    }

    fn dataset(&self, config: &RunConfig, split: Split) -> Result<Vec<DatasetRecord>> {
        let (field, path) = match split {
            Split::Train => ("paths.train", &config.paths.train),
            Split::Dev => ("paths.dev", &config.paths.dev),
        };
        load_dataset(RunConfig::require_path(field, path)?, self.corpus.len())
    }
}

fn load_model(path: &Path) -> Result<(TaserEncoder, Vocab)> {
    if !path.exists() {
        return Err(Error::Input(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    let (encoder, vocab) = load_checkpoint(path)?;
    let vocab =
        vocab.ok_or_else(|| Error::Input(format!("{} carries no vocabulary", path.display())))?;
    Ok((encoder, vocab))
}

// ----------------------------------------------------------------- params

fn params(args: &ParamsArgs, config: &RunConfig) -> Result<()> {
    let base = |routing: RoutingKind, experts: usize| -> Result<EncoderConfig> {
        match args.preset {
            Preset::BertBase => Ok(EncoderConfig::bert_base(routing, experts)),
            Preset::Config => {
                let mut m = config.model.clone();
                m.routing = routing;
                m.num_experts = Some(experts);
                m.encoder_config(args.vocab_size)
            }
        }
    };
    let shared = base(RoutingKind::Shared, 1)?;
    let rows = [
        ("shared", count_params(&shared)),
        ("det-r I=2", count_params(&base(RoutingKind::Det, 2)?)),
        ("seq-r I=2", count_params(&base(RoutingKind::Seq, 2)?)),
        ("seq-r I=4", count_params(&base(RoutingKind::Seq, 4)?)),
        ("tok-r I=2", count_params(&base(RoutingKind::Tok, 2)?)),
        ("tok-r I=4", count_params(&base(RoutingKind::Tok, 4)?)),
        ("bi-encoder", count_bi_encoder_params(&shared)),
    ];
    let bi = rows[rows.len() - 1].1 as f64;
    if args.json {
        let list: Vec<Value> = rows
            .iter()
            .map(|(name, n)| json!({ "model": name, "params": n, "ratio_to_bi_encoder": *n as f64 / bi }))
            .collect();
        println!("{}", serde_json::to_string_pretty(&list)?);
    } else {
        println!("{:<12} {:>14} {:>8} {:>9}", "model", "params", "M", "vs bi");
        for (name, n) in rows {
            println!(
                "{name:<12} {n:>14} {:>7}M {:>9.3}",
                n / 1_000_000,
                n as f64 / bi
            );
        }
    }
    Ok(())
}

// -------------------------------------------------------------- make-task

fn make_task(ws: &Workspace, mut config: RunConfig) -> Result<()> {
    let seed = config.require_seed()?;
    config.synthetic.seed = seed;
    let task = make_synthetic_task(&config.synthetic)?;
    let (corpus, train, dev) = (
        ws.file("corpus.jsonl"),
        ws.file("train.jsonl"),
        ws.file("dev.jsonl"),
    );
    write_corpus(&corpus, &task.corpus)?;
    write_dataset(&train, &task.train)?;
    write_dataset(&dev, &task.dev)?;
    config.paths.corpus = Some(corpus);
    config.paths.train = Some(train);
    config.paths.dev = Some(dev);
    config.save(&ws.file("config.json"))?;
    println!(
        "{}",
        json!({
            "passages": task.corpus.len(),
            "train": task.train.len(),
            "dev": task.dev.len(),
            "config": ws.file("config.json"),
        })
    );
    Ok(())
}

// ------------------------------------------------------------------ train

fn with_bm25_negatives(
    records: Vec<DatasetRecord>,
    index: &InvertedIndex,
    matcher: &AnswerMatcher,
    count: usize,
) -> Vec<DatasetRecord> {
    if count == 0 {
        return records;
    }
    let (has, lacks): (Vec<_>, Vec<_>) = records
        .iter()
        .partition(|r| r.negative_passage_ids.is_some());
    if lacks.is_empty() {
        return records;
    }
    info!(
        "adding {count} BM25 negative(s) to {} of {} questions",
        lacks.len(),
        has.len() + lacks.len()
    );
    let filled = attach_bm25_negatives(&records, index, matcher, count);
    records
        .into_iter()
        .zip(filled)
        .map(|(r, f)| {
            if r.negative_passage_ids.is_some() {
                r
            } else {
                f
            }
        })
        .collect()
}

fn train(ws: &Workspace, config: &RunConfig, args: &TrainArgs) -> Result<()> {
    let mut train_config = config.train.clone();
    train_config.seed = config.require_seed()?;
    let data = Data::load(config)?;
    let train_set = data.dataset(config, Split::Train)?;
    let dev_set = data.dataset(config, Split::Dev)?;
    let matcher = AnswerMatcher::new(&data.texts);

    let init = args.init.as_deref().map(load_model).transpose()?;
    let vocab = match &init {
        Some((_, v)) => v.clone(),
        None => build_vocab(&data.corpus, &[&train_set, &dev_set]),
    };
    let encoder_config = match &init {
        Some((e, _)) => e.config().clone(),
        None => config.model.encoder_config(vocab.len())?,
    };
    let max_len = encoder_config.max_positions;
    let passages = tokenize_corpus(&vocab, &data.corpus, max_len);

    let bm25 = InvertedIndex::build(&data.texts, config.retrieval.bm25)?;
    let records = with_bm25_negatives(train_set, &bm25, &matcher, args.bm25_negatives);
    let examples = train_examples(&records, &vocab, max_len);
    let dev = DevEvaluator::new(
        &passages,
        &dev_set,
        &vocab,
        max_len,
        &matcher,
        train_config.eval_k,
    );

    let (encoder, report): (TaserEncoder, TrainReport) = match &init {
        Some((start, _)) => train_from(start, &examples, &passages, &train_config, &dev)?,
        None => train_fresh(&encoder_config, &examples, &passages, &train_config, &dev)?,
    };
    let out = args.out.clone().unwrap_or_else(|| ws.file("model.json"));
    save_checkpoint(&out, &encoder, Some(&vocab))?;
    write_log(&ws.file("train_log.jsonl"), &report.log)?;
    let summary = json!({
        "checkpoint": out,
        "routing": encoder.config().routing,
        "epochs_run": report.log.len(),
        "best_epoch": report.best_epoch,
        "best_dev_recall": report.best_dev,
        "eval_k": train_config.eval_k,
    });
    write_json(&ws.file("train_report.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

// ------------------------------------------------------------------- mine

fn mine(ws: &Workspace, config: &RunConfig, args: &MineArgs) -> Result<()> {
    config.require_seed()?;
    let data = Data::load(config)?;
    let train_set = data.dataset(config, Split::Train)?;
    let (encoder, vocab) = load_model(&ws.checkpoint(&args.model))?;
    let max_len = encoder.config().max_positions;
    let passages = tokenize_corpus(&vocab, &data.corpus, max_len);
    let index = embed_corpus(&encoder, &passages, config.retrieval.workers)?;

    let matcher = AnswerMatcher::new(&data.texts);
    let bm25 = InvertedIndex::build(&data.texts, config.retrieval.bm25)?;
    let records = with_bm25_negatives(train_set, &bm25, &matcher, args.bm25_negatives);
    let questions = tokenize_questions(&records, &vocab, max_len);
    let mined = mine_hard_negatives(
        &encoder,
        &index,
        &mining_queries(&records, &questions),
        config.train.top_n,
    )?;
    let out_records = attach_mined_negatives(&records, &mined, config.train.combine_negatives);
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| ws.file("train_mined.jsonl"));
    write_dataset(&out, &out_records)?;
    let mined_count = mined.iter().filter(|m| m.is_some()).count();
    println!(
        "{}",
        json!({ "dataset": out, "questions": out_records.len(), "mined": mined_count })
    );
    Ok(())
}

// ------------------------------------------------------------------ embed

fn embed(ws: &Workspace, config: &RunConfig, args: &CheckpointArgs) -> Result<()> {
    let data = Data::load(config)?;
    let (encoder, vocab) = load_model(&ws.checkpoint(args))?;
    let passages = tokenize_corpus(&vocab, &data.corpus, encoder.config().max_positions);
    let index = embed_corpus(&encoder, &passages, config.retrieval.workers)?;
    index.save(&ws.file("dense.idx"))?;
    let bm25 = InvertedIndex::build(&data.texts, config.retrieval.bm25)?;
    bm25.save(&ws.file("bm25.idx"))?;
    println!(
        "{}",
        json!({ "passages": index.len(), "dim": index.dim(), "fingerprint": index.fingerprint() })
    );
    Ok(())
}

// ----------------------------------------------------------------- search

/// Dense and sparse candidate runs at depth `candidates`.
struct Candidates {
    dense: Run,
    sparse: Run,
}

fn candidates(
    ws: &Workspace,
    config: &RunConfig,
    ckpt: &CheckpointArgs,
    records: &[DatasetRecord],
) -> Result<Candidates> {
    let (encoder, vocab) = load_model(&ws.checkpoint(ckpt))?;
    let dense_index = DenseIndex::load(&ws.file("dense.idx"))?;
    dense_index.check_fingerprint(&encoder)?;
    let bm25 = InvertedIndex::load(&ws.file("bm25.idx"))?;
    let questions = tokenize_questions(records, &vocab, encoder.config().max_positions);
    let depth = config.retrieval.candidates;
    Ok(Candidates {
        dense: dense_run(&encoder, &dense_index, records, &questions, depth)?,
        sparse: bm25_run(&bm25, records, depth),
    })
}

fn stored_alpha(ws: &Workspace) -> Result<Option<f64>> {
    let path = ws.file("alpha.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let v: Value = serde_json::from_str(&text)?;
    v.get("alpha")
        .and_then(Value::as_f64)
        .map(Some)
        .ok_or_else(|| Error::Input(format!("{}: no numeric `alpha`", path.display())))
}

fn truncated(run: &Run, k: usize) -> Run {
    let mut out = run.clone();
    for list in out.lists.values_mut() {
        list.truncate(k);
    }
    out
}

fn search(ws: &Workspace, config: &RunConfig, args: &SearchArgs) -> Result<()> {
    let data = Data::load(config)?;
    let records = data.dataset(config, args.split)?;
    let alpha = match args.alpha.or(config.retrieval.alpha) {
        Some(a) => Some(a),
        None => stored_alpha(ws)?,
    };
    let mode = args.mode.unwrap_or(if alpha.is_some() {
        SearchMode::Hybrid
    } else {
        SearchMode::Dense
    });
    let k = config.retrieval.k;
    let run = match mode {
        SearchMode::Bm25 => {
            let bm25 = InvertedIndex::load(&ws.file("bm25.idx"))?;
            bm25_run(&bm25, &records, k)
        }
        SearchMode::Dense => truncated(&candidates(ws, config, &args.model, &records)?.dense, k),
        SearchMode::Hybrid => {
            let alpha = alpha.ok_or_else(|| {
                Error::Parameter(
                    "hybrid search needs --alpha, retrieval.alpha or a tune-alpha result".into(),
                )
            })?;
            let c = candidates(ws, config, &args.model, &records)?;
            hybrid_run(&c.dense, &c.sparse, alpha, k)
        }
    };
    let split = split_name(args.split);
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| ws.file(&format!("run.{split}.trec")));
    let tag = match mode {
        SearchMode::Dense => "taser-dense".to_string(),
        SearchMode::Bm25 => "bm25".to_string(),
        SearchMode::Hybrid => format!("taser-hybrid-{}", alpha.unwrap_or_default()),
    };
    run.write_trec(&out, &tag)?;
    println!(
        "{}",
        json!({ "run": out, "queries": run.len(), "k": k, "mode": tag })
    );
    Ok(())
}

// ------------------------------------------------------------------- eval

fn eval(ws: &Workspace, config: &RunConfig, args: &EvalArgs) -> Result<()> {
    let data = Data::load(config)?;
    let records = data.dataset(config, args.split)?;
    let split = split_name(args.split);
    let run_path = args
        .run
        .clone()
        .unwrap_or_else(|| ws.file(&format!("run.{split}.trec")));
    let run = Run::read_trec(&run_path)?;
    let matcher = AnswerMatcher::new(&data.texts);
    let answers = answer_set(&records);
    let groups: std::collections::BTreeMap<String, String> = records
        .iter()
        .filter_map(|r| r.group.clone().map(|g| (r.id.clone(), g)))
        .collect();
    let grouped = groups.len() == records.len() && !groups.is_empty();

    let mut report = MetricsReport {
        queries: records.len(),
        ..Default::default()
    };
    for &k in &config.retrieval.recall_ks {
        let per = recall_at_k(&run, &answers, &matcher, k);
        report
            .metrics
            .insert(format!("R@{k}"), aggregate(&per, None, Aggregation::Micro)?);
        if grouped {
            report.macro_metrics.insert(
                format!("R@{k}"),
                aggregate(&per, Some(&groups), Aggregation::Macro)?,
            );
        }
    }
    if let Some(path) = &args.qrels {
        let qrels = QrelSet::read(path)?;
        let k = config.retrieval.ndcg_k;
        let per = ndcg_at_k(&run, &qrels, k);
        report.metrics.insert(
            format!("nDCG@{k}"),
            aggregate(&per, None, Aggregation::Micro)?,
        );
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| ws.file(&format!("metrics.{split}.json")));
    let value = serde_json::to_value(&report)?;
    write_json(&out, &value)?;
    println!("{value}");
    Ok(())
}

// ------------------------------------------------------------- tune-alpha

fn tune(ws: &Workspace, config: &RunConfig, args: &TuneArgs) -> Result<()> {
    if args.metric_k == 0 {
        return Err(Error::Parameter("--metric-k must be at least 1".into()));
    }
    let data = Data::load(config)?;
    let records = data.dataset(config, Split::Dev)?;
    let c = candidates(ws, config, &args.model, &records)?;
    let matcher = AnswerMatcher::new(&data.texts);
    let answers = answer_set(&records);
    let k = args.metric_k;
    let metric = |run: &Run| {
        aggregate(
            &recall_at_k(run, &answers, &matcher, k),
            None,
            Aggregation::Micro,
        )
        .expect("micro never fails")
    };
    let search = tune_alpha(&c.dense, &c.sparse, config.retrieval.candidates, metric);
    let value = json!({
        "alpha": search.alpha,
        "metric": format!("R@{k}"),
        "dev": search.metric,
        "dense_dev": metric(&c.dense),
        "bm25_dev": metric(&c.sparse),
        "grid": search.grid.iter().map(|(a, m)| json!([a, m])).collect::<Vec<_>>(),
    });
    write_json(&ws.file("alpha.json"), &value)?;
    println!("{value}");
    Ok(())
}
