use std::path::Path;

use styleknn::base_lm::{perplexity, LanguageModel, LmConfig, LmParameters};
use styleknn::corpus::{
    generate_synthetic_corpus, ingest_jsonl, save_documents, tokenize_records, LocalityDescriptor,
    Split, SplitPolicy, StyleTaxonomy, Vocabulary,
};
use styleknn::datastore::{build_ivf, Datastore, DistanceKind, IvfIndex};
use styleknn::evaluation::{
    compare_models, default_lambda_grid, evaluate_perplexity, grid_search_lambda,
    prompts_from_documents, run_ablation, style_match_score, AblationInputs, AblationSpec,
    EvalReport, PerplexityEntry, PerplexityResult, WeightSource,
};
use styleknn::io::{write_atomic, write_atomic_with};
use styleknn::knn_lm::{
    Decode, GenerationRecord, GenerationRequest, KnnLm, KnnLmConfig, Retrieval,
};
use styleknn::locality::{
    force_style_restriction, train_locality_weights, AnnotatedSample, Feature, LocalityFeatureSet,
    LocalityHyper, LocalityWeights,
};
use styleknn::{Error, Result};

use crate::args::*;
use crate::run::{check_paths, sidecar, write_json, DataDir, RunLog};

pub fn dispatch(cli: &Cli) -> Result<()> {
    let config = serde_json::to_value(cli)?;
    match &cli.command {
        Command::SynthCorpus(a) => synth_corpus(a, cli.seed, &config),
        Command::Ingest(a) => ingest(a, &config),
        Command::TrainLm(a) => train_lm(a, cli.seed, &config),
        Command::BuildDatastore(a) => build_datastore(a, &config),
        Command::BuildIvf(a) => build_ivf_cmd(a, cli.seed, &config),
        Command::TrainLocality(a) => train_locality(a, cli.seed, &config),
        Command::EvalPpl(a) => eval_ppl(a, &config),
        Command::Ablate(a) => ablate(a, cli.seed, &config),
        Command::Heatmap(a) => heatmap(a, &config),
        Command::Generate(a) => generate(a, cli.seed, &config),
        Command::Compare(a) => compare(a, cli.seed, &config),
    }
}

fn record_config(out: &Path, config: &serde_json::Value) -> Result<()> {
    write_json(&sidecar(out, ".run.json"), config)
}

fn synth_corpus(a: &SynthArgs, seed: u64, config: &serde_json::Value) -> Result<()> {
    if a.categories == 0 || a.styles_per_category == 0 || a.sources == 0 || a.docs_per_style == 0 {
        return Err(Error::Config("corpus dimensions must be positive".into()));
    }
    let mut log = RunLog::new();
    let taxonomy = StyleTaxonomy::synthetic(a.categories, a.styles_per_category, a.sources);
    let records = generate_synthetic_corpus(&taxonomy, a.docs_per_style, seed);
    write_atomic_with(&a.out, |w| {
        styleknn::corpus::write_jsonl(w, &records, &taxonomy)
    })?;
    write_atomic(&a.taxonomy_out, taxonomy.to_config_string().as_bytes())?;
    log.stage("generate");
    record_config(&a.out, config)?;
    log.finish(&sidecar(&a.out, ".log"))
}

fn ingest(a: &IngestArgs, config: &serde_json::Value) -> Result<()> {
    let mut inputs = vec![a.corpus.as_path()];
    inputs.extend(a.taxonomy.as_deref());
    let files = DataDir::files(&a.out);
    check_paths(
        &inputs,
        &files.iter().map(|p| p.as_path()).collect::<Vec<_>>(),
    )?;
    let mut log = RunLog::new();
    let taxonomy = match &a.taxonomy {
        Some(p) => StyleTaxonomy::load(p)?,
        None => StyleTaxonomy::reference(),
    };
    let policy = if a.auto_split {
        SplitPolicy::HashByIndex
    } else {
        SplitPolicy::DefaultTrain
    };
    let records = ingest_jsonl(&a.corpus, &taxonomy, policy)?;
    let vocab = Vocabulary::build(&records, a.min_count)?;
    let docs = tokenize_records(&records, &vocab);
    log.stage("tokenize");
    std::fs::create_dir_all(&a.out).map_err(Error::Io)?;
    let [v, d, t] = files;
    vocab.save(&v)?;
    save_documents(&d, &docs)?;
    write_atomic(&t, taxonomy.to_config_string().as_bytes())?;
    log.note(&format!(
        "records: {}, vocabulary: {}",
        records.len(),
        vocab.len()
    ));
    log.stage("write");
    write_json(&a.out.join("run.json"), config)?;
    log.finish(&a.out.join("run.log"))
}

fn train_lm(a: &TrainLmArgs, seed: u64, config: &serde_json::Value) -> Result<()> {
    check_paths(&[&a.data], &[&a.out])?;
    let mut log = RunLog::new();
    let data = DataDir::load(&a.data)?;
    let cfg = LmConfig {
        context_window: a.context_window,
        embedding_dim: a.embedding_dim,
        hidden_dim: a.dim,
        vocab_size: data.vocab.len(),
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed,
    };
    let out =
        styleknn::base_lm::train_lm(cfg, &data.split(Split::Train), &data.split(Split::Valid))?;
    log.stage("train");
    for e in &out.trace {
        log.note(&format!(
            "epoch {}: train {} valid {:?}",
            e.epoch, e.train_loss, e.valid_loss
        ));
    }
    out.params.save(&a.out)?;
    record_config(&a.out, config)?;
    log.finish(&sidecar(&a.out, ".log"))
}

fn build_datastore(a: &BuildDatastoreArgs, config: &serde_json::Value) -> Result<()> {
    check_paths(&[&a.data, &a.model], &[&a.out])?;
    let mut log = RunLog::new();
    let data = DataDir::load(&a.data)?;
    let params = data.load_model(&a.model)?;
    let distance = match a.distance {
        DistanceArg::SquaredL2 => DistanceKind::SquaredL2,
        DistanceArg::L2 => DistanceKind::L2,
    };
    let header = styleknn::datastore::build_datastore(
        &params,
        &data.docs,
        &data.taxonomy,
        distance,
        &a.out,
    )?;
    log.note(&format!(
        "entries: {}, key dim: {}",
        header.count, header.key_dim
    ));
    log.stage("build");
    record_config(&a.out, config)?;
    log.finish(&sidecar(&a.out, ".log"))
}

fn build_ivf_cmd(a: &BuildIvfArgs, seed: u64, config: &serde_json::Value) -> Result<()> {
    check_paths(&[&a.datastore], &[&a.out])?;
    let mut log = RunLog::new();
    let store = Datastore::open(&a.datastore)?;
    let index = build_ivf(&store, a.n_clusters, seed)?;
    log.stage("kmeans");
    index.save(&a.out)?;
    record_config(&a.out, config)?;
    log.finish(&sidecar(&a.out, ".log"))
}

fn train_locality(a: &TrainLocalityArgs, seed: u64, config: &serde_json::Value) -> Result<()> {
    check_paths(&[&a.data, &a.model, &a.datastore], &[&a.out])?;
    let features: LocalityFeatureSet = a.features.parse()?;
    if a.restrict_style && !features.style {
        return Err(Error::Config(
            "--restrict-style needs the style feature".into(),
        ));
    }
    let mut log = RunLog::new();
    let data = DataDir::load(&a.data)?;
    let params = data.load_model(&a.model)?;
    let store = Datastore::open(&a.datastore)?;
    store.ensure_taxonomy(&data.taxonomy)?;
    let train = data.split(Split::Train);
    let sample = AnnotatedSample::from_documents(&train, a.sample_size, seed);
    let hyper = LocalityHyper {
        learning_rate: a.learning_rate,
        epochs: a.epochs,
    };
    let out = train_locality_weights(
        &store,
        &params,
        &sample,
        features,
        a.k,
        store.header().distance,
        hyper,
    )?;
    log.stage("train");
    log.note(&format!(
        "samples: {}, skipped: {}, loss: {} -> {}",
        sample.len(),
        out.skipped,
        out.initial_loss,
        out.trace.last().copied().unwrap_or(out.initial_loss)
    ));
    let weights = if a.restrict_style {
        force_style_restriction(&out.weights)?
    } else {
        out.weights
    };
    weights.save(&a.out)?;
    record_config(&a.out, config)?;
    log.finish(&sidecar(&a.out, ".log"))
}

fn retrieval_of(r: &RetrievalArgs, ivf: Option<&IvfIndex>) -> Retrieval {
    match ivf {
        Some(index) => Retrieval::Ivf {
            n_probe: r.n_probe.unwrap_or(index.default_probe()),
        },
        None => Retrieval::Exact,
    }
}

fn load_ivf(r: &RetrievalArgs) -> Result<Option<IvfIndex>> {
    r.ivf.as_deref().map(IvfIndex::load).transpose()
}

fn load_weights(path: Option<&Path>) -> Result<LocalityWeights> {
    match path {
        Some(p) => LocalityWeights::load(p),
        None => Ok(LocalityWeights::identity(LocalityFeatureSet::NONE)),
    }
}

fn eval_ppl(a: &EvalPplArgs, config: &serde_json::Value) -> Result<()> {
    let mut inputs = vec![a.data.as_path(), a.model.as_path()];
    inputs.extend(a.datastore.as_deref());
    inputs.extend(a.weights.as_deref());
    inputs.extend(a.retrieval.ivf.as_deref());
    check_paths(&inputs, &[&a.out])?;
    let split: Split = a.split.parse()?;
    let mut log = RunLog::new();
    let data = DataDir::load(&a.data)?;
    let params = data.load_model(&a.model)?;
    let docs = data.split(split);
    let mut report = EvalReport::new(config.clone());

    let entry = match &a.datastore {
        None => {
            let ppl = perplexity(&params, &docs)?;
            let (nll, tokens) = docs.iter().try_fold((0.0, 0), |(n, c), d| {
                styleknn::base_lm::document_nll(&params, d).map(|(dn, dc)| (n + dn, c + dc))
            })?;
            PerplexityEntry {
                label: "lm".into(),
                split,
                lambda: None,
                lambda_search: None,
                result: PerplexityResult {
                    perplexity: ppl,
                    nll,
                    tokens,
                    fallbacks: 0,
                },
            }
        }
        Some(ds) => {
            let store = Datastore::open(ds)?;
            let ivf = load_ivf(&a.retrieval)?;
            let weights = load_weights(a.weights.as_deref())?;
            let mut knn_config = KnnLmConfig {
                k: a.retrieval.k,
                lambda: a.lambda.unwrap_or(0.0),
                distance: store.header().distance,
                retrieval: retrieval_of(&a.retrieval, ivf.as_ref()),
                style_restriction: None,
            };
            let label = format!("knn-lm[{}]", weights.features());
            let mut search = None;
            if a.lambda.is_none() {
                let grid = a.grid.clone().unwrap_or_else(default_lambda_grid);
                let model = KnnLm::new(
                    knn_config.clone(),
                    &store,
                    ivf.as_ref(),
                    &params,
                    &weights,
                    &data.taxonomy,
                )?;
                let s = grid_search_lambda(&model, &data.split(Split::Valid), &grid)?;
                knn_config.lambda = s.best_lambda;
                search = Some(s);
                log.stage("lambda search");
            }
            let lambda = knn_config.lambda;
            let result = if a.restrict_style {
                restricted_perplexity(
                    &knn_config,
                    &store,
                    ivf.as_ref(),
                    &params,
                    &weights,
                    &data,
                    &docs,
                )?
            } else {
                let model = KnnLm::new(
                    knn_config,
                    &store,
                    ivf.as_ref(),
                    &params,
                    &weights,
                    &data.taxonomy,
                )?;
                evaluate_perplexity(&model, &docs)?
            };
            PerplexityEntry {
                label,
                split,
                lambda: Some(lambda),
                lambda_search: search,
                result,
            }
        }
    };
    log.stage("evaluate");
    log.note(&format!("perplexity: {}", entry.result.perplexity));
    report.evaluations.push(entry);
    report.save(&a.out)?;
    log.finish(&sidecar(&a.out, ".log"))
}

/// Each document retrieves only from its own style.
fn restricted_perplexity(
    knn_config: &KnnLmConfig,
    store: &Datastore,
    ivf: Option<&IvfIndex>,
    params: &LmParameters,
    weights: &LocalityWeights,
    data: &DataDir,
    docs: &[styleknn::corpus::Document],
) -> Result<PerplexityResult> {
    let mut nll = 0.0;
    let mut tokens = 0;
    let mut fallbacks = 0;
    for doc in docs {
        let cfg = KnnLmConfig {
            style_restriction: Some(doc.locality.style),
            ..knn_config.clone()
        };
        let model = KnnLm::new(cfg, store, ivf, params, weights, &data.taxonomy)?;
        let r = model.sequence_nll(&doc.tokens, &doc.locality)?;
        nll += r.nll;
        tokens += r.tokens;
        fallbacks += r.fallbacks;
    }
    if tokens == 0 {
        return Err(Error::Data("no evaluation tokens".into()));
    }
    Ok(PerplexityResult {
        perplexity: (nll / tokens as f64).exp(),
        nll,
        tokens,
        fallbacks,
    })
}

fn ablate(a: &AblateArgs, seed: u64, config: &serde_json::Value) -> Result<()> {
    let mut inputs = vec![a.data.as_path(), a.model.as_path(), a.datastore.as_path()];
    inputs.extend(a.weights.iter().map(|p| p.as_path()));
    inputs.extend(a.retrieval.ivf.as_deref());
    check_paths(&inputs, &[&a.out])?;
    let spec = match &a.rows {
        Some(rows) => AblationSpec {
            rows: rows.iter().map(|r| r.parse()).collect::<Result<_>>()?,
        },
        None => AblationSpec::default(),
    };
    let mut log = RunLog::new();
    let data = DataDir::load(&a.data)?;
    let params = data.load_model(&a.model)?;
    let store = Datastore::open(&a.datastore)?;
    let ivf = load_ivf(&a.retrieval)?;
    let provided: Vec<LocalityWeights> = a
        .weights
        .iter()
        .map(|p| LocalityWeights::load(p))
        .collect::<Result<_>>()?;
    let train = data.split(Split::Train);
    let sample = AnnotatedSample::from_documents(&train, a.sample_size, seed);
    let grid = a.grid.clone().unwrap_or_else(default_lambda_grid);
    let inputs = AblationInputs {
        store: &store,
        ivf: ivf.as_ref(),
        model: &params,
        taxonomy: &data.taxonomy,
        valid: &data.split(Split::Valid),
        test: &data.split(Split::Test),
        k: a.retrieval.k,
        distance: store.header().distance,
        retrieval: retrieval_of(&a.retrieval, ivf.as_ref()),
        lambda_grid: &grid,
        weights: if provided.is_empty() {
            WeightSource::Train {
                sample: &sample,
                hyper: LocalityHyper {
                    learning_rate: a.learning_rate,
                    epochs: a.epochs,
                },
            }
        } else {
            WeightSource::Provided(&provided)
        },
    };
    let mut report = EvalReport::new(config.clone());
    report.rows = run_ablation(&spec, &inputs)?;
    log.stage("ablation");
    for r in &report.rows {
        log.note(&format!(
            "{}: lambda {} test perplexity {}",
            r.features, r.lambda, r.test.perplexity
        ));
    }
    report.save(&a.out)?;
    log.finish(&sidecar(&a.out, ".log"))
}

fn heatmap(a: &HeatmapArgs, config: &serde_json::Value) -> Result<()> {
    let mut outputs = vec![a.out.as_path()];
    outputs.extend(a.json.as_deref());
    check_paths(&[&a.data, &a.model], &outputs)?;
    let mut log = RunLog::new();
    let data = DataDir::load(&a.data)?;
    let params = data.load_model(&a.model)?;
    let matrix =
        styleknn::evaluation::style_similarity_heatmap(&params, &data.docs, &data.taxonomy)?;
    log.stage("heatmap");
    matrix.save_csv(&a.out)?;
    if let Some(j) = &a.json {
        write_json(j, &matrix)?;
    }
    record_config(&a.out, config)?;
    log.finish(&sidecar(&a.out, ".log"))
}

fn decode_of(d: &DecodeArgs) -> Decode {
    match d.temperature {
        Some(temperature) => Decode::Sample {
            temperature,
            top_k_tokens: d.top_k_tokens,
        },
        None => Decode::Greedy,
    }
}

fn target_locality(
    taxonomy: &StyleTaxonomy,
    style: &str,
    source: Option<&str>,
) -> Result<LocalityDescriptor> {
    let s = taxonomy
        .style_id(style)
        .ok_or_else(|| Error::Config(format!("unknown style `{style}`")))?;
    let src = match source {
        Some(name) => taxonomy
            .source_id(name)
            .ok_or_else(|| Error::Config(format!("unknown source `{name}`")))?,
        None => 0,
    };
    taxonomy.descriptor(s, src)
}

fn generate(a: &GenerateArgs, seed: u64, config: &serde_json::Value) -> Result<()> {
    let mut inputs = vec![a.data.as_path(), a.model.as_path(), a.datastore.as_path()];
    inputs.extend(a.weights.as_deref());
    inputs.extend(a.prompts_file.as_deref());
    inputs.extend(a.retrieval.ivf.as_deref());
    check_paths(&inputs, &[&a.out])?;
    let mut log = RunLog::new();
    let data = DataDir::load(&a.data)?;
    let params = data.load_model(&a.model)?;
    let store = Datastore::open(&a.datastore)?;
    let ivf = load_ivf(&a.retrieval)?;
    let weights = load_weights(a.weights.as_deref())?;
    let target = target_locality(&data.taxonomy, &a.style, a.source.as_deref())?;
    let cfg = KnnLmConfig {
        k: a.retrieval.k,
        lambda: a.lambda,
        distance: store.header().distance,
        retrieval: retrieval_of(&a.retrieval, ivf.as_ref()),
        style_restriction: a.restrict_style.then_some(target.style),
    };
    let model = KnnLm::new(cfg, &store, ivf.as_ref(), &params, &weights, &data.taxonomy)?;
    let mut prompts = a.prompt.clone();
    if let Some(p) = &a.prompts_file {
        let text = std::fs::read_to_string(p).map_err(Error::Io)?;
        prompts.extend(
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string),
        );
    }
    let mut records = Vec::with_capacity(prompts.len());
    for (i, text) in prompts.iter().enumerate() {
        let request = GenerationRequest {
            prompt: data.vocab.tokenize(text),
            target,
            max_new_tokens: a.decode.max_new_tokens,
            decode: decode_of(&a.decode),
            seed: seed.wrapping_add(i as u64),
        };
        let generation = model.generate(&request)?;
        log.note(&format!(
            "prompt {i}: style match {}",
            style_match_score(&generation.steps)?
        ));
        records.push(GenerationRecord::new(
            &request,
            &generation,
            &data.vocab,
            &data.taxonomy,
        ));
    }
    log.stage("generate");
    write_jsonl(&a.out, &records)?;
    record_config(&a.out, config)?;
    log.finish(&sidecar(&a.out, ".log"))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic_with(path, |w| {
        for r in rows {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

/// A restricted model keeps only neighbors sharing the prompt's style.
fn restricted_if(on: bool, w: LocalityWeights) -> Result<LocalityWeights> {
    if !on {
        return Ok(w);
    }
    if w.features().style {
        force_style_restriction(&w)
    } else {
        force_style_restriction(&LocalityWeights::identity(LocalityFeatureSet::of(&[
            Feature::Style,
        ])))
    }
}

fn compare(a: &CompareArgs, seed: u64, config: &serde_json::Value) -> Result<()> {
    let mut inputs = vec![a.data.as_path(), a.model.as_path(), a.datastore.as_path()];
    for p in [
        &a.model_b,
        &a.datastore_b,
        &a.reference_model,
        &a.weights_a,
        &a.weights_b,
    ] {
        inputs.extend(p.as_deref());
    }
    inputs.extend(a.retrieval.ivf.as_deref());
    let mut outputs = vec![a.out.as_path()];
    outputs.extend(a.summary.as_deref());
    check_paths(&inputs, &outputs)?;
    if a.datastore_b.is_some() && a.retrieval.ivf.is_some() {
        return Err(Error::Config(
            "--ivf cannot be shared by two datastores".into(),
        ));
    }
    let mut log = RunLog::new();
    let data = DataDir::load(&a.data)?;
    let params_a = data.load_model(&a.model)?;
    let params_b = a
        .model_b
        .as_deref()
        .map(|p| data.load_model(p))
        .transpose()?;
    let reference = a
        .reference_model
        .as_deref()
        .map(|p| data.load_model(p))
        .transpose()?;
    let store_a = Datastore::open(&a.datastore)?;
    let store_b = a.datastore_b.as_deref().map(Datastore::open).transpose()?;
    let ivf = load_ivf(&a.retrieval)?;
    let weights_a = load_weights(a.weights_a.as_deref())?;
    let weights_b = load_weights(a.weights_b.as_deref())?;
    let weights_a = restricted_if(a.restrict_a, weights_a)?;
    let weights_b = restricted_if(a.restrict_b, weights_b)?;
    let store_b_ref = store_b.as_ref().unwrap_or(&store_a);
    let cfg = |lambda: f64, store: &Datastore| KnnLmConfig {
        k: a.retrieval.k,
        lambda,
        distance: store.header().distance,
        retrieval: retrieval_of(&a.retrieval, ivf.as_ref()),
        style_restriction: None,
    };
    let model_a = KnnLm::new(
        cfg(a.lambda_a, &store_a),
        &store_a,
        ivf.as_ref(),
        &params_a,
        &weights_a,
        &data.taxonomy,
    )?;
    let model_b = KnnLm::new(
        cfg(a.lambda_b, store_b_ref),
        store_b_ref,
        if store_b.is_some() {
            None
        } else {
            ivf.as_ref()
        },
        params_b.as_ref().unwrap_or(&params_a),
        &weights_b,
        &data.taxonomy,
    )?;
    let reference: &dyn LanguageModel = reference.as_ref().unwrap_or(&params_a);
    let prompts = prompts_from_documents(&data.split(Split::Test), a.prompts, seed);
    let (rows, summary) = compare_models(
        &model_a,
        &model_b,
        reference,
        &data.vocab,
        &prompts,
        a.decode.max_new_tokens,
        decode_of(&a.decode),
        seed,
    )?;
    log.stage("compare");
    write_jsonl(&a.out, &rows)?;
    record_config(&a.out, config)?;
    if let Some(path) = &a.summary {
        let mut report = EvalReport::new(config.clone());
        for name in data.taxonomy.styles() {
            let scores: Vec<f64> = rows
                .iter()
                .filter(|r| &r.target_style == name)
                .map(|r| r.style_match_a)
                .collect();
            if !scores.is_empty() {
                report.style_match.insert(
                    name.clone(),
                    scores.iter().sum::<f64>() / scores.len() as f64,
                );
            }
        }
        report.comparison = Some(summary);
        report.save(path)?;
    }
    log.finish(&sidecar(&a.out, ".log"))
}
