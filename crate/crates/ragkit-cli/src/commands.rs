//! Subcommand implementations. Every command is deterministic given
//! (inputs, config, seed); output files round-trip through their loaders.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use ragkit_core::diagnostics::{self, ProbeConfig};
use ragkit_core::embed::{self, EmbeddingMatrix, LabelTable};
use ragkit_core::orchestrator::{
    decode_report, save_trace, DecodePolicy, DecodeScript, ScriptedGenerator,
};
use ragkit_core::retrieval::{
    jaccard_at_k, upper_bound_at_k, HashEmbedder, Modality, RetrievalConfig, Strategy,
    Text2TextRetriever, TwoStageRetriever,
};
use ragkit_core::sentencedb::{
    self, build_database, db_stats, load_database, Organ, OrganFindingMap, Space,
};
use ragkit_core::synth::{gen_synthetic_corpus, write_corpus, PlantedSignalMode, SynthConfig};
use ragkit_core::trainprep::{self, TrainPrepConfig};
use ragkit_core::util::par_map;

use crate::cli::*;
use crate::CliError;

fn jsonl_writer(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(|e| {
        CliError::new(format!("cannot create {}: {e}", path.display()))
    })?))
}

fn write_jsonl_record<T: Serialize>(
    out: &mut BufWriter<File>,
    record: &T,
    path: &Path,
) -> Result<(), CliError> {
    let line = serde_json::to_string(record)
        .map_err(|e| CliError::new(format!("serialize failure: {e}")))?;
    writeln!(out, "{line}").map_err(|e| CliError::new(format!("write {}: {e}", path.display())))
}

pub fn run_gen_synthetic(args: &GenSyntheticArgs, seed: u64) -> Result<(), CliError> {
    let mode = match args.mode.as_str() {
        "none" => PlantedSignalMode::None,
        "tail-dim" => PlantedSignalMode::TailDim,
        "isotropic" => PlantedSignalMode::Isotropic,
        other => return Err(CliError::new(format!("unknown mode {other:?}"))),
    };
    let cfg = SynthConfig {
        seed,
        n_studies: args.studies,
        embed_dim_image: args.image_dim,
        embed_dim_text: args.text_dim,
        cluster_spread: args.spread,
        finding_prevalence: args.prevalence,
        planted_signal_mode: mode,
        ..SynthConfig::default()
    };
    let corpus = gen_synthetic_corpus(&cfg).map_err(CliError::from_display)?;
    write_corpus(&corpus, &args.out).map_err(CliError::from_display)?;
    println!(
        "wrote synthetic corpus: {} studies, {} sentences ({} excluded as other) -> {}",
        corpus.manifest.n_studies,
        corpus.manifest.db_stats.total_sentences,
        corpus.manifest.db_stats.excluded_other,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SpectrumRecord<'a> {
    name: String,
    total_dim: usize,
    #[serde(flatten)]
    report: &'a diagnostics::SpectrumReport,
}

pub fn run_diagnose(args: &DiagnoseArgs) -> Result<(), CliError> {
    let mut out = match &args.out {
        Some(path) => Some(jsonl_writer(path)?),
        None => None,
    };
    println!(
        "{:<28} {:>9} {:>6} {:>6} {:>8}",
        "embedding", "total dim", "dim90", "dim95", "PR"
    );
    for path in &args.embeddings {
        let m = embed::load_embeddings(path).map_err(CliError::from_display)?;
        let report = diagnostics::pca_spectrum(&m).map_err(CliError::from_display)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        println!(
            "{:<28} {:>9} {:>6} {:>6} {:>8.1}",
            name,
            m.dim(),
            report.dim90,
            report.dim95,
            report.participation_ratio
        );
        if let (Some(out), Some(path_out)) = (out.as_mut(), args.out.as_ref()) {
            let record = SpectrumRecord {
                name,
                total_dim: m.dim(),
                report: &report,
            };
            write_jsonl_record(out, &record, path_out)?;
        }
    }
    Ok(())
}

/// Label column aligned to an embedding matrix's row order.
fn aligned_column(
    labels: &LabelTable,
    matrix: &EmbeddingMatrix,
    finding: &str,
) -> Result<Vec<bool>, CliError> {
    let col = labels
        .column(finding)
        .ok_or_else(|| CliError::new(format!("finding {finding:?} not in label table")))?;
    let pos: std::collections::HashMap<&str, usize> = labels
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    matrix
        .ids()
        .iter()
        .map(|id| {
            pos.get(id.as_str())
                .map(|&i| col[i])
                .ok_or_else(|| CliError::new(format!("id {id:?} missing from label table")))
        })
        .collect()
}

pub fn run_probe(args: &ProbeArgs, threads: usize) -> Result<(), CliError> {
    let train = embed::load_embeddings(&args.train_emb).map_err(CliError::from_display)?;
    let eval = embed::load_embeddings(&args.eval_emb).map_err(CliError::from_display)?;
    let train_labels = embed::load_labels(&args.train_labels).map_err(CliError::from_display)?;
    let eval_labels = embed::load_labels(&args.eval_labels).map_err(CliError::from_display)?;

    let findings: Vec<String> = if args.finding.is_empty() {
        train_labels
            .findings()
            .iter()
            .filter(|f| eval_labels.findings().contains(f))
            .cloned()
            .collect()
    } else {
        args.finding.clone()
    };
    if findings.is_empty() {
        return Err(CliError::new("no findings to probe"));
    }

    let cfg = ProbeConfig {
        l2_strength: args.l2,
        max_iterations: args.max_iter,
        class_balanced: !args.no_class_balance,
        ..ProbeConfig::default()
    };

    // Probes are independent per finding; results keep input order.
    let results = par_map(&findings, threads, |finding| {
        let train_y = aligned_column(&train_labels, &train, finding)?;
        let eval_y = aligned_column(&eval_labels, &eval, finding)?;
        diagnostics::train_linear_probe(&train, &train_y, &eval, &eval_y, finding, &cfg)
            .map_err(CliError::from_display)
    });

    let mut out = match &args.out {
        Some(path) => Some(jsonl_writer(path)?),
        None => None,
    };
    println!("{:<40} {:>7} {:>10}", "finding", "AUC", "converged");
    let mut sum = 0.0;
    let mut count = 0usize;
    for result in results {
        let r = result?;
        println!("{:<40} {:>7.3} {:>10}", r.finding, r.auc, r.converged);
        sum += r.auc;
        count += 1;
        if let (Some(out), Some(path_out)) = (out.as_mut(), args.out.as_ref()) {
            write_jsonl_record(out, &r, path_out)?;
        }
    }
    println!("{:<40} {:>7.3}", "macro avg", sum / count as f64);
    Ok(())
}

pub fn run_project_test(args: &ProjectTestArgs) -> Result<(), CliError> {
    let train = embed::load_embeddings(&args.train_emb).map_err(CliError::from_display)?;
    let eval = embed::load_embeddings(&args.eval_emb).map_err(CliError::from_display)?;
    let train_labels = embed::load_labels(&args.train_labels).map_err(CliError::from_display)?;
    let eval_labels = embed::load_labels(&args.eval_labels).map_err(CliError::from_display)?;
    let train_y = aligned_column(&train_labels, &train, &args.finding)?;
    let eval_y = aligned_column(&eval_labels, &eval, &args.finding)?;

    let cfg = ProbeConfig::default();
    let r = diagnostics::projection_test(&train, &train_y, &eval, &eval_y, args.k, &cfg)
        .map_err(CliError::from_display)?;
    println!(
        "{:<40} top{:<2} {:>7.3}  tail {:>7.3}  delta {:>+7.3}",
        args.finding, r.k, r.top_k_auc, r.tail_auc, r.delta
    );
    if let Some(path) = &args.out {
        let mut out = jsonl_writer(path)?;
        write_jsonl_record(&mut out, &r, path)?;
    }
    Ok(())
}

pub fn run_build_db(args: &BuildDbArgs) -> Result<(), CliError> {
    let paragraphs =
        sentencedb::load_paragraphs(&args.paragraphs).map_err(CliError::from_display)?;
    let sentence_embeddings =
        embed::load_embeddings(&args.sent_emb).map_err(CliError::from_display)?;
    let image_embeddings =
        sentencedb::load_image_embeddings(&args.img_emb).map_err(CliError::from_display)?;
    let labels = embed::load_labels(&args.labels).map_err(CliError::from_display)?;
    let finding_map = match &args.finding_map {
        Some(path) => OrganFindingMap::load(path).map_err(CliError::from_display)?,
        None => OrganFindingMap::chest_ct_default(),
    };

    let db = build_database(
        &paragraphs,
        &sentence_embeddings,
        &image_embeddings,
        &labels,
        finding_map,
    )
    .map_err(CliError::from_display)?;
    sentencedb::save_database(&db, &args.out).map_err(CliError::from_display)?;

    let stats = db_stats(&db);
    println!(
        "{:<12} {:>10} {:>9} {:>12} {:>12}",
        "organ", "sentences", "studies", "sents/study", "words/sent"
    );
    for (organ, s) in &stats.per_organ {
        println!(
            "{:<12} {:>10} {:>9} {:>12.2} {:>12.1}",
            organ.name(),
            s.sentences,
            s.unique_studies,
            s.avg_sentences_per_study,
            s.avg_words_per_sentence
        );
    }
    println!(
        "{:<12} {:>10}   ({} excluded as other)",
        "total", stats.total_sentences, stats.excluded_other
    );
    Ok(())
}

#[derive(Serialize)]
struct HitRecord<'a> {
    rank: usize,
    id: &'a str,
    score: f64,
}

fn parse_strategy(name: &str) -> Result<Strategy, CliError> {
    match name {
        "twostage" => Ok(Strategy::TwoStage),
        "text2text" => Ok(Strategy::Text2Text),
        other => Err(CliError::new(format!("unknown strategy {other:?}"))),
    }
}

pub fn run_retrieve(args: &RetrieveArgs, cfg: &crate::config::ConfigFile) -> Result<(), CliError> {
    let db = load_database(&args.db).map_err(CliError::from_display)?;
    let organ: Organ = args.organ.parse().map_err(CliError::from_display)?;
    let k = args.k.or(cfg.k).unwrap_or(10);
    let space = match args.space.as_str() {
        "text" => Space::Text,
        "image" => Space::Image,
        other => return Err(CliError::new(format!("unknown space {other:?}"))),
    };
    let index = match space {
        Space::Text => db.text_index(organ),
        Space::Image => db.image_index(organ),
    }
    .ok_or_else(|| CliError::new(format!("no {} index for {organ}", args.space)))?;
    let query = index
        .vector(&args.query_id)
        .ok_or_else(|| {
            CliError::new(format!(
                "query id {:?} not found in the {} {} index",
                args.query_id, organ, args.space
            ))
        })?
        .to_vec();
    let exclude = args.exclude_study.as_deref();
    let hits = db
        .knn(organ, space, &query, k, exclude)
        .map_err(CliError::from_display)?;

    let mut out = match &args.out {
        Some(path) => Some(jsonl_writer(path)?),
        None => None,
    };
    for (rank, (id, score)) in hits.iter().enumerate() {
        println!("{:>3}  {:<40} {:.6}", rank + 1, id, score);
        if let (Some(out), Some(path_out)) = (out.as_mut(), args.out.as_ref()) {
            write_jsonl_record(
                out,
                &HitRecord {
                    rank: rank + 1,
                    id,
                    score: *score,
                },
                path_out,
            )?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord {
    organ: String,
    modality: String,
    k: usize,
    mean_jaccard: f64,
    n_queries: usize,
    n_skipped: usize,
}

#[derive(Serialize)]
struct PerQueryRecord<'a> {
    query_id: &'a str,
    jaccard: f64,
}

pub fn run_eval_retrieval(
    args: &EvalRetrievalArgs,
    cfg: &crate::config::ConfigFile,
    threads: usize,
) -> Result<(), CliError> {
    let db = load_database(&args.db).map_err(CliError::from_display)?;
    let labels = embed::load_labels(&args.labels).map_err(CliError::from_display)?;
    let organ: Organ = args.organ.parse().map_err(CliError::from_display)?;
    let exclude_self = !args.include_self;
    let k = args.k.or(cfg.k).unwrap_or(10);

    let queries: Vec<String> = db.study_ids().into_iter().collect();
    let modality = match args.modality.as_str() {
        "img2img" => Some(Modality::Img2Img),
        "img2txt" => Some(Modality::Img2Txt),
        "txt2txt" => Some(Modality::Txt2Txt),
        "upper" => None,
        other => return Err(CliError::new(format!("unknown modality {other:?}"))),
    };

    let results = par_map(&queries, threads, |query| match modality {
        Some(m) => jaccard_at_k(&db, &labels, query, organ, m, k, exclude_self),
        None => upper_bound_at_k(&db, &labels, query, organ, k, exclude_self),
    });

    let mut per_query: Vec<(String, f64)> = Vec::new();
    let mut skipped = 0usize;
    for (query, result) in queries.iter().zip(results) {
        match result {
            Ok(j) => per_query.push((query.clone(), j)),
            Err(_) => skipped += 1,
        }
    }
    if per_query.is_empty() {
        return Err(CliError::new("every query was skipped"));
    }
    let mean = per_query.iter().map(|(_, j)| j).sum::<f64>() / per_query.len() as f64;

    println!(
        "{:<12} {:<8} Jaccard@{} = {:.3}   (queries={}, skipped={})",
        organ.name(),
        args.modality,
        k,
        mean,
        per_query.len(),
        skipped
    );
    if let Some(path) = &args.out {
        let mut out = jsonl_writer(path)?;
        write_jsonl_record(
            &mut out,
            &EvalRecord {
                organ: organ.name().to_string(),
                modality: args.modality.clone(),
                k,
                mean_jaccard: mean,
                n_queries: per_query.len(),
                n_skipped: skipped,
            },
            path,
        )?;
        if args.per_query {
            for (query_id, jaccard) in &per_query {
                write_jsonl_record(
                    &mut out,
                    &PerQueryRecord {
                        query_id,
                        jaccard: *jaccard,
                    },
                    path,
                )?;
            }
        }
    }
    Ok(())
}

fn retrieval_config(
    strategy: Strategy,
    cfg: &crate::config::ConfigFile,
) -> RetrievalConfig {
    let defaults = RetrievalConfig::default();
    RetrievalConfig {
        k_coarse: cfg.k_coarse.unwrap_or(defaults.k_coarse),
        k_fine: cfg.k_fine.unwrap_or(defaults.k_fine),
        lambda: cfg.lambda.unwrap_or(defaults.lambda),
        strategy,
        text_pool_depth: cfg.text_pool_depth.unwrap_or(defaults.text_pool_depth),
    }
}

pub fn run_decode(
    args: &DecodeArgs,
    cfg: &crate::config::ConfigFile,
    seed: u64,
) -> Result<(), CliError> {
    let db = load_database(&args.db).map_err(CliError::from_display)?;
    let script = DecodeScript::load(&args.script).map_err(CliError::from_display)?;
    let policy: DecodePolicy = args.policy.parse().map_err(CliError::new)?;
    let strategy = match &args.strategy {
        Some(name) => parse_strategy(name)?,
        None => cfg.strategy.unwrap_or(Strategy::Text2Text),
    };
    let text_dim = db
        .text_dim()
        .ok_or_else(|| CliError::new("database has no text index"))?;
    let embedder = HashEmbedder::new(text_dim, seed);
    let rcfg = retrieval_config(strategy, cfg);
    let study = args
        .query_study
        .clone()
        .or_else(|| script.study_id.clone());

    let mut gen = ScriptedGenerator::from_script(&script);
    let (report, trace) = match strategy {
        Strategy::TwoStage => {
            let study = study.ok_or_else(|| {
                CliError::new("twostage decoding needs --query-study or a study_id in the script")
            })?;
            let retriever =
                TwoStageRetriever::for_study(&db, rcfg, Box::new(embedder), &study);
            decode_report(&mut gen, policy, &retriever, &script.organ_plan)
        }
        Strategy::Text2Text => {
            let retriever = Text2TextRetriever::new(&db, rcfg, Box::new(embedder), study);
            decode_report(&mut gen, policy, &retriever, &script.organ_plan)
        }
    }
    .map_err(CliError::from_display)?;

    save_trace(&trace, &args.trace_out).map_err(CliError::from_display)?;
    println!("{report}");
    eprintln!(
        "decode complete: {} events, {} triggers -> {}",
        trace.events.len(),
        trace.trigger_count,
        args.trace_out.display()
    );
    Ok(())
}

pub fn run_prep_train(
    args: &PrepTrainArgs,
    cfg: &crate::config::ConfigFile,
    seed: u64,
    threads: usize,
) -> Result<(), CliError> {
    let db = load_database(&args.db).map_err(CliError::from_display)?;
    let reports = trainprep::load_reports(&args.reports).map_err(CliError::from_display)?;
    let perplexities =
        trainprep::load_perplexities(&args.perplexities).map_err(CliError::from_display)?;
    let scope = match &args.scope {
        Some(name) => match name.as_str() {
            "per-report" => trainprep::PercentileScope::PerReport,
            "corpus-wide" => trainprep::PercentileScope::CorpusWide,
            other => return Err(CliError::new(format!("unknown scope {other:?}"))),
        },
        None => cfg
            .percentile_scope
            .unwrap_or(trainprep::PercentileScope::PerReport),
    };
    let defaults = TrainPrepConfig::default();
    let prep_cfg = TrainPrepConfig {
        percentile: args.percentile.or(cfg.percentile).unwrap_or(defaults.percentile),
        p_oracle: args.p_oracle.or(cfg.p_oracle).unwrap_or(defaults.p_oracle),
        k_rag_max: args.k_rag.or(cfg.k_rag_max).unwrap_or(defaults.k_rag_max),
        seed,
        percentile_scope: scope,
        ..defaults
    };
    prep_cfg.validate().map_err(CliError::from_display)?;
    let strategy = match &args.strategy {
        Some(name) => parse_strategy(name)?,
        None => cfg.strategy.unwrap_or(Strategy::TwoStage),
    };
    let text_dim = db
        .text_dim()
        .ok_or_else(|| CliError::new("database has no text index"))?;
    let rcfg = retrieval_config(strategy, cfg);

    let (samples, logs) = match strategy {
        Strategy::TwoStage => trainprep::prep_corpus(
            &reports,
            &perplexities,
            |study: &str| {
                TwoStageRetriever::for_study(
                    &db,
                    rcfg.clone(),
                    Box::new(HashEmbedder::new(text_dim, seed)),
                    study,
                )
            },
            &prep_cfg,
            threads,
        ),
        Strategy::Text2Text => trainprep::prep_corpus(
            &reports,
            &perplexities,
            |study: &str| {
                Text2TextRetriever::new(
                    &db,
                    rcfg.clone(),
                    Box::new(HashEmbedder::new(text_dim, seed)),
                    Some(study.to_string()),
                )
            },
            &prep_cfg,
            threads,
        ),
    }
    .map_err(CliError::from_display)?;

    let count = trainprep::serialize_samples(&samples, &args.out).map_err(CliError::from_display)?;
    if let Some(log_path) = &args.log_out {
        let mut out = jsonl_writer(log_path)?;
        for log in &logs {
            write_jsonl_record(&mut out, log, log_path)?;
        }
    }
    let injected: usize = samples.iter().map(|s| s.rag_positions.len()).sum();
    let oracle: usize = samples
        .iter()
        .flat_map(|s| &s.oracle_flags)
        .filter(|&&f| f)
        .count();
    println!(
        "wrote {count} samples with {injected} injections ({oracle} oracle) -> {}",
        args.out.display()
    );
    Ok(())
}
