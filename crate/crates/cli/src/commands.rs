//! Subcommand bodies. Each builds its settings map, hands the task-relevant
//! keys to the factory, and does its own file I/O.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use lmforge::chat_service::Server;
use lmforge::config::FlatConfig;
use lmforge::factory::{Embedder, Searcher, TaskFactory, TaskHandle, TaskKind};
use lmforge::labeller::write_labels_csv;
use lmforge::providers::connect;
use lmforge::reranker::RerankRequest;
use lmforge::tokenizer::{mask_batch, MaskingConfig, TokenizerModel};
use lmforge::trainers::{classify, load_dataset, load_model, save_model, TrainedModel};
use lmforge::vector_search::{IndexedDocument, MetaValue, Metadata, MetadataFilter, SharedIndex, VectorIndex, VectorStore};
use serde_json::{json, Map, Value};

use crate::inputs::{read_id_sequences, read_lines, read_rows, read_texts};
use crate::settings::Settings;
use crate::*;

pub async fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    let json = cli.json;
    match cli.command {
        Command::Serve(a) => serve(settings, a, json).await,
        Command::Label(a) => label(settings, a, json).await,
        Command::Embed(a) => embed(settings, a, json).await,
        Command::Index(a) => index(settings, a, json).await,
        Command::Search(a) => search(settings, a, json).await,
        Command::Rerank(a) => rerank(settings, a, json).await,
        Command::TrainTokenizer(a) => train_tokenizer(settings, a, json),
        Command::Mask(a) => mask(settings, a, json),
        Command::TrainClassifier(a) => train_classifier(settings, a, json).await,
        Command::Classify(a) => classify_cmd(settings, a, json).await,
        Command::Distill(a) => distill(settings, a, json).await,
    }
}

fn emit(json: bool, value: &Value, human: impl FnOnce() -> String) -> Result<()> {
    let mut out = std::io::stdout().lock();
    if json {
        serde_json::to_writer(&mut out, value)?;
        writeln!(out)?;
    } else {
        writeln!(out, "{}", human())?;
    }
    Ok(())
}

fn create(kind: TaskKind, map: Map<String, Value>) -> Result<TaskHandle> {
    TaskFactory::create_kind(kind, map).with_context(|| format!("invalid {kind} configuration"))
}

fn create_embedder(map: Map<String, Value>) -> Result<Embedder> {
    match create(TaskKind::Embedder, map)? {
        TaskHandle::Embedder(e) => Ok(e),
        _ => unreachable!("factory returned the requested kind"),
    }
}

/// Move `keys` (first spelling wins) out of `map`.
fn split_off(map: &mut Map<String, Value>, keys: &[&str]) -> Map<String, Value> {
    keys.iter().filter_map(|k| map.remove(*k).map(|v| (k.to_string(), v))).collect()
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

async fn serve(mut s: Settings, a: ServeArgs, json: bool) -> Result<()> {
    s.set("host", a.host)
        .set("port", a.port)
        .set("auth_token_env", a.auth_token_env)
        .set("memory_journal", a.memory_journal.map(|p| p.display().to_string()))
        .provider(&a.provider);
    let mut map = s.into_map();
    let mut own = FlatConfig::new(split_off(&mut map, &["host", "port"]));
    let host = own.take_str(&["host"])?.unwrap_or_else(|| "127.0.0.1".into());
    let port = own.take_u64(&["port"])?.unwrap_or(8000);
    let port = u16::try_from(port).map_err(|_| anyhow!("port {port} is out of range"))?;
    let TaskHandle::Generator(g) = create(TaskKind::Generator, map)? else { unreachable!() };

    let server = Server::bind(&host, port).await?;
    let addr = server.local_addr()?;
    emit(json, &json!({"listening": format!("http://{addr}")}), || format!("listening on http://{addr}"))?;
    std::io::stdout().flush()?;
    server
        .run(g.state.clone(), async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn label(mut s: Settings, a: LabelArgs, json: bool) -> Result<()> {
    let schema = std::fs::read_to_string(&a.schema).with_context(|| format!("reading {}", a.schema.display()))?;
    let schema = lmforge::config::parse_config_document(&schema).with_context(|| format!("in {}", a.schema.display()))?;
    s.provider(&a.provider).set("concurrency", a.concurrency).set("multi_label", a.multi_label.then_some(true));
    let mut map = s.into_map();
    // the schema file wins over labels from --config
    if schema.keys().any(|k| k == "labels" || k.starts_with("labels.")) {
        map.retain(|k, _| k != "labels" && !k.starts_with("labels."));
    }
    for (k, v) in schema {
        map.entry(k).or_insert(v);
    }
    let TaskHandle::Labeller(task) = create(TaskKind::Labeller, map)? else { unreachable!() };

    let texts = read_texts(&a.input, &a.text_col)?;
    let results = task.labeller.label_batch(&texts, task.concurrency).await?;
    write_labels_csv(create_file(&a.output)?, &texts, &results)?;
    let failed = results.iter().filter(|r| r.is_err()).count();
    for (text, r) in texts.iter().zip(&results) {
        if let Err(e) = r {
            tracing::warn!(text = %text, "labelling failed: {e}");
        }
    }
    let summary = json!({"rows": texts.len(), "failed": failed, "out": a.output});
    emit(json, &summary, || format!("labelled {} rows ({failed} failed) -> {}", texts.len(), a.output.display()))
}

fn row_docs(rows: Vec<crate::inputs::Row>) -> Result<Vec<(u64, String, Metadata)>> {
    rows.into_iter()
        .enumerate()
        .map(|(n, r)| {
            let id = match &r.id {
                Some(s) => s.trim().parse::<u64>().with_context(|| format!("row {}: document id {s:?} is not an integer", n + 2))?,
                None => n as u64,
            };
            let meta = r.extra.iter().map(|(k, v)| (k.clone(), MetaValue::from(v.as_str()))).collect();
            Ok((id, r.text, meta))
        })
        .collect()
}

async fn embed_docs(e: &Embedder, docs: Vec<(u64, String, Metadata)>) -> Result<Vec<IndexedDocument>> {
    let texts: Vec<String> = docs.iter().map(|(_, t, _)| t.clone()).collect();
    let vectors = e.embed(&texts).await?;
    Ok(docs
        .into_iter()
        .zip(vectors)
        .map(|((id, text, meta), v)| {
            let mut d = IndexedDocument::new(id, text, v);
            d.metadata = meta;
            d
        })
        .collect())
}

async fn embed(mut s: Settings, a: EmbedArgs, json: bool) -> Result<()> {
    s.provider(&a.provider).set("batch_size", a.batch_size);
    let embedder = create_embedder(s.into_map())?;
    let docs = embed_docs(&embedder, row_docs(read_rows(&a.input, &a.text_col, None)?)?).await?;
    let dim = docs[0].vector.dim();
    let mut index = VectorIndex::flat(dim)?;
    let n = docs.len();
    for d in docs {
        index.add(d)?;
    }
    index.save(&a.output).with_context(|| format!("writing {}", a.output.display()))?;
    emit(json, &json!({"vectors": n, "dim": dim, "out": a.output}), || {
        format!("embedded {n} texts (dim {dim}) -> {}", a.output.display())
    })
}

async fn index(mut s: Settings, a: IndexArgs, json: bool) -> Result<()> {
    s.provider(&a.provider)
        .set("batch_size", a.batch_size)
        .set("index_type", a.backend)
        .set("m", a.m)
        .set("ef_construction", a.ef_construction)
        .set("ef_search", a.ef_search)
        .set("seed", a.seed);
    let mut map = s.into_map();
    let mut index_keys = split_off(&mut map, &["index_type", "m", "ef_construction", "ef_search", "seed"]);
    let embedder = create_embedder(map)?;
    let docs = embed_docs(&embedder, row_docs(read_rows(&a.input, &a.text_col, a.id_col.as_deref())?)?).await?;
    let dim = docs[0].vector.dim();
    index_keys.insert("dim".into(), json!(dim));
    let TaskHandle::Searcher(searcher) = create(TaskKind::Searcher, index_keys)? else { unreachable!() };
    let n = docs.len();
    for d in docs {
        let id = d.doc_id;
        searcher.index.add(d).with_context(|| format!("adding document {id}"))?;
    }
    searcher.index.save(&a.output).with_context(|| format!("writing {}", a.output.display()))?;
    let backend = searcher.index.backend().name();
    emit(json, &json!({"documents": n, "dim": dim, "backend": backend, "out": a.output}), || {
        format!("indexed {n} documents ({backend}, dim {dim}) -> {}", a.output.display())
    })
}

async fn search(mut s: Settings, a: SearchArgs, json: bool) -> Result<()> {
    if a.k == 0 {
        bail!("--k must be at least 1");
    }
    let filters = a
        .filter
        .iter()
        .map(|f| MetadataFilter::parse(f).map_err(|e| anyhow!("--filter {f:?}: {e}")))
        .collect::<Result<Vec<_>>>()?;
    s.provider(&a.provider);
    let embedder = create_embedder(s.into_map())?;
    let mut index = VectorIndex::load(&a.index).with_context(|| format!("loading {}", a.index.display()))?;
    if let Some(ef) = a.ef_search {
        index.set_ef_search(ef as usize)?;
    }
    let searcher = Searcher { index: SharedIndex::new(index), embedder: Some(embedder) };
    let pred = |m: &Metadata| filters.iter().all(|f| f.matches(m));
    let filter: Option<lmforge::vector_search::Filter<'_>> = if filters.is_empty() { None } else { Some(&pred) };
    let hits = searcher.query(&a.query, a.k, filter).await?;
    emit(json, &serde_json::to_value(&hits)?, || {
        hits.iter().map(|h| format!("{}\t{:.6}\t{}", h.doc_id, h.score, h.text)).collect::<Vec<_>>().join("\n")
    })
}

async fn rerank(mut s: Settings, a: RerankArgs, json: bool) -> Result<()> {
    s.set("backend", a.backend).set("scorer_url", a.scorer_url).set("concurrency", a.concurrency);
    let http = s.get_str("backend").as_deref() == Some("http-scorer");
    if http {
        // the scorer has its own URL; only explicit provider flags are passed on
        s.provider_flags(&a.provider);
    } else {
        s.provider(&a.provider);
    }
    let TaskHandle::Reranker(r) = create(TaskKind::Reranker, s.into_map())? else { unreachable!() };
    let docs = read_lines(&a.docs)?;
    let mut request = RerankRequest::new(a.query, docs);
    if let Some(n) = a.top_n {
        request = request.top_n(n);
    }
    let result = r.rerank(&request).await?;
    emit(json, &serde_json::to_value(&result)?, || {
        result.ranking.iter().map(|d| format!("{}\t{:.6}\t{}", d.index, d.score, d.text)).collect::<Vec<_>>().join("\n")
    })
}

fn train_tokenizer(mut s: Settings, a: TrainTokenizerArgs, json: bool) -> Result<()> {
    s.set("vocab_size", a.vocab_size).set("min_frequency", a.min_frequency).set("max_length", a.max_length);
    let TaskHandle::TokenizerTrainer(t) = create(TaskKind::TokenizerTrainer, s.into_map())? else { unreachable!() };
    let corpus = read_lines(&a.corpus)?;
    if corpus.is_empty() {
        bail!("{}: corpus is empty", a.corpus.display());
    }
    let model = t.train(&corpus)?;
    model.save(&a.output).with_context(|| format!("writing {}", a.output.display()))?;
    let merges = model.merge_ids().len();
    let vocab = model.vocab_size();
    emit(json, &json!({"vocab_size": vocab, "merges": merges, "out": a.output}), || {
        format!("trained tokenizer: {vocab} tokens, {merges} merges -> {}", a.output.display())
    })
}

fn mask(mut s: Settings, a: MaskArgs, json: bool) -> Result<()> {
    s.set("mlm_probability", a.mlm_probability).set("seed", a.seed).set("vocab_size", a.vocab_size);
    let mut cfg = s.into_flat();
    let p = cfg.take_f64(&["mlm_probability"])?.unwrap_or(lmforge::config::TrainingConfig::DEFAULT_MLM_PROBABILITY);
    let seed = cfg.take_u64(&["seed"])?.unwrap_or(42);
    let mut vocab = cfg.take_u64(&["vocab_size"])?.map(|v| v as usize);
    cfg.finish()?;
    if let Some(dir) = &a.tokenizer {
        let tok = TokenizerModel::load(dir).with_context(|| format!("loading tokenizer {}", dir.display()))?;
        vocab.get_or_insert(tok.vocab_size());
    }
    let vocab = vocab.ok_or_else(|| anyhow!("either --vocab-size or --tokenizer is required"))?;
    let batch = read_id_sequences(&a.input)?;
    if let Some(bad) = batch.iter().flatten().find(|&&id| id as usize >= vocab) {
        bail!("token id {bad} is outside the vocabulary of {vocab}");
    }
    let masked = mask_batch(&batch, &MaskingConfig::new(p, vocab, seed))?;
    let mut out: Box<dyn Write> = match &a.output {
        Some(path) => Box::new(create_file(path)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for m in &masked {
        serde_json::to_writer(&mut out, m)?;
        writeln!(out)?;
    }
    out.flush()?;
    if let Some(path) = &a.output {
        let targets: usize = masked.iter().map(|m| m.labels.iter().filter(|&&l| l >= 0).count()).sum();
        emit(json, &json!({"sequences": masked.len(), "masked_positions": targets, "out": path}), || {
            format!("masked {} sequences ({targets} targets) -> {}", masked.len(), path.display())
        })?;
    }
    Ok(())
}

async fn train_classifier(mut s: Settings, a: TrainClassifierArgs, json: bool) -> Result<()> {
    s.provider(&a.provider).training(&a.training);
    let TaskHandle::Classifier(task) = create(TaskKind::Classifier, s.into_map())? else { unreachable!() };
    let data = load_dataset(&a.csv, &a.text_col, &a.label_col).with_context(|| format!("reading {}", a.csv.display()))?;
    if data.dropped > 0 {
        tracing::warn!("skipped {} rows with an empty text or label", data.dropped);
    }
    let (head, report) = task.train(&data.texts, &data.labels).await?;
    save_model(&TrainedModel::from(head), &a.output).with_context(|| format!("writing {}", a.output.display()))?;
    let mut v = serde_json::to_value(&report)?;
    v["out"] = json!(a.output);
    emit(json, &v, || {
        let eval = report.eval_accuracy.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        format!(
            "trained classifier on {} rows, {} classes: loss {:.4} -> {:.4}, train acc {:.4}, eval acc {eval} -> {}",
            report.train_size,
            report.classes.len(),
            report.initial_loss,
            report.final_loss,
            report.train_accuracy,
            a.output.display()
        )
    })
}

async fn classify_cmd(s: Settings, a: ClassifyArgs, json: bool) -> Result<()> {
    let TrainedModel::Classifier(head) = load_model(&a.model_file).with_context(|| format!("loading {}", a.model_file.display()))?
    else {
        bail!("{} is a distilled student, not a classifier", a.model_file.display());
    };
    let mut map = s.into_map();
    map.retain(|k, _| !k.starts_with("provider") && k != "model");
    map.insert("provider_url".into(), json!(a.provider_url.unwrap_or_else(|| head.provider.url.clone())));
    map.insert("model".into(), json!(a.provider_model.unwrap_or_else(|| head.provider.model.clone())));
    let endpoint = {
        let mut cfg = FlatConfig::new(map);
        let ep = cfg.take_endpoint()?.expect("provider_url was set");
        cfg.finish()?;
        ep
    };
    let provider = connect(endpoint)?;
    let texts = read_texts(&a.input, &a.text_col)?;
    let result = classify(&head, &texts, provider.as_ref()).await?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let classes = head.encoder.classes();
    if json {
        let rows: Vec<Value> = texts
            .iter()
            .zip(&result.predictions)
            .map(|(t, p)| json!({"text": t, "label": p.label, "probabilities": p.probabilities}))
            .collect();
        let v = json!({"classes": classes, "predictions": rows, "warnings": result.warnings});
        return emit(true, &v, String::new);
    }
    let out: Box<dyn Write> = match &a.output {
        Some(path) => Box::new(create_file(path)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["text".to_string(), "label".to_string()];
    header.extend(classes.iter().map(|c| format!("p_{c}")));
    w.write_record(&header)?;
    for (t, p) in texts.iter().zip(&result.predictions) {
        let mut rec = vec![t.clone(), p.label.clone()];
        rec.extend(p.probabilities.iter().map(|x| format!("{x:.6}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

async fn distill(mut s: Settings, a: DistillArgs, json: bool) -> Result<()> {
    let teacher = ProviderArgs { provider_url: a.teacher_url, model: a.teacher_model, ..Default::default() };
    s.provider(&teacher)
        .training(&a.training)
        .set("student", a.student)
        .set("in_dim", a.in_dim)
        .set("hidden", a.hidden)
        .set("featurizer_seed", a.featurizer_seed);
    let TaskHandle::Mimicker(task) = create(TaskKind::Mimicker, s.into_map())? else { unreachable!() };
    let texts = read_texts(&a.input, &a.text_col)?;
    let (student, report) = task.train(&texts).await?;
    let kind = TrainedModel::from(student);
    save_model(&kind, &a.output).with_context(|| format!("writing {}", a.output.display()))?;
    let mut v = serde_json::to_value(&report)?;
    v["student"] = json!(kind.kind_name());
    v["out"] = json!(a.output);
    emit(json, &v, || {
        let cos = report.heldout_mean_cosine.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        format!(
            "distilled {} student on {} texts: loss {:.4} -> {:.4}, held-out cosine {cos} -> {}",
            kind.kind_name(),
            report.train_size + report.heldout_size,
            report.initial_loss,
            report.final_loss,
            a.output.display()
        )
    })
}
