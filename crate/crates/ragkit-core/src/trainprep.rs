//! Oracle-mixed training-sample construction: perplexity-percentile
//! trigger-target marking, oracle vs retrieved context assembly, and
//! loss-mask span annotation.
//!
//! Spans are character offsets into the joined sentence sequence, not
//! token offsets: downstream tokenizers differ and character spans stay
//! tokenizer-agnostic.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::{payload_matches_grammar, wrap_context};
use crate::retrieval::SentenceRetriever;
use crate::sentencedb::Organ;
use crate::util;

#[derive(Debug, Error)]
pub enum TrainPrepError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("no perplexities supplied for study {0}")]
    MissingPerplexities(String),
    #[error("study {study}: {perplexities} perplexities for {sentences} sentences")]
    LengthMismatch {
        study: String,
        perplexities: usize,
        sentences: usize,
    },
    #[error("target index {index} out of range for report of {len} sentences")]
    TargetOutOfRange { index: usize, len: usize },
    #[error("context spans overlap at {0}")]
    OverlappingSpans(usize),
    #[error("sample validation failed: {0}")]
    Invalid(String),
    #[error("empty perplexity list")]
    Empty,
}

fn io_err(path: &Path, source: std::io::Error) -> TrainPrepError {
    TrainPrepError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path, source: serde_json::Error) -> TrainPrepError {
    TrainPrepError::Json {
        path: path.to_path_buf(),
        source,
    }
}

/// Whether the marking threshold comes from each report's own perplexities
/// or from the pooled corpus distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PercentileScope {
    PerReport,
    CorpusWide,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainPrepConfig {
    /// Percentile threshold in (0,100) for marking retrieval targets.
    pub percentile: f64,
    /// Probability of injecting oracle (ground-truth) context.
    pub p_oracle: f64,
    /// Cap on marked targets per sample; the highest-perplexity targets
    /// are kept.
    pub k_rag_max: usize,
    /// Oracle context draws this many later sentences, uniform in
    /// [min, max].
    pub oracle_context_min: usize,
    pub oracle_context_max: usize,
    pub seed: u64,
    pub percentile_scope: PercentileScope,
}

impl Default for TrainPrepConfig {
    fn default() -> Self {
        Self {
            percentile: 80.0,
            p_oracle: 0.7,
            k_rag_max: 4,
            oracle_context_min: 1,
            oracle_context_max: 2,
            seed: 0,
            percentile_scope: PercentileScope::PerReport,
        }
    }
}

impl TrainPrepConfig {
    pub fn validate(&self) -> Result<(), TrainPrepError> {
        if !(0.0 < self.percentile && self.percentile < 100.0) {
            return Err(TrainPrepError::BadConfig(format!(
                "percentile must lie in (0,100), got {}",
                self.percentile
            )));
        }
        if !(0.0..=1.0).contains(&self.p_oracle) {
            return Err(TrainPrepError::BadConfig(format!(
                "p_oracle must lie in [0,1], got {}",
                self.p_oracle
            )));
        }
        if !(1 <= self.oracle_context_min
            && self.oracle_context_min <= self.oracle_context_max
            && self.oracle_context_max <= 2)
        {
            return Err(TrainPrepError::BadConfig(format!(
                "oracle context count range [{}, {}] must sit inside [1,2]",
                self.oracle_context_min, self.oracle_context_max
            )));
        }
        Ok(())
    }
}

/// Half-open character span [start, end) into the joined sentence
/// sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

/// One serialized supervision record: the sentence sequence with injected
/// context blocks, marker positions, and span annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub study_id: String,
    /// Report sentences interleaved with delimited context blocks; each
    /// block immediately precedes its target sentence.
    pub sentence_sequence: Vec<String>,
    /// Indices (into `sentence_sequence`) of the sentences preceded by a
    /// `[RAG]` marker and its context block.
    pub rag_positions: Vec<usize>,
    pub context_spans: Vec<Span>,
    pub mask_spans: Vec<Span>,
    pub oracle_flags: Vec<bool>,
}

impl TrainingSample {
    /// Canonical serialization the spans index into.
    pub fn full_text(&self) -> String {
        self.sentence_sequence.join(" ")
    }

    /// Check every structural invariant: spans sorted, disjoint, in range,
    /// payloads matching the delimiter grammar, one context block directly
    /// before each rag position, and mask spans (when set) equal to
    /// context spans.
    pub fn validate(&self) -> Result<(), TrainPrepError> {
        if self.rag_positions.len() != self.context_spans.len()
            || self.rag_positions.len() != self.oracle_flags.len()
        {
            return Err(TrainPrepError::Invalid(format!(
                "{}: rag_positions/context_spans/oracle_flags lengths disagree",
                self.study_id
            )));
        }
        let full: Vec<char> = self.full_text().chars().collect();
        let mut prev_end = 0usize;
        for (i, span) in self.context_spans.iter().enumerate() {
            if span.start >= span.end || span.end > full.len() {
                return Err(TrainPrepError::Invalid(format!(
                    "{}: span {i} out of range",
                    self.study_id
                )));
            }
            if span.start < prev_end {
                return Err(TrainPrepError::OverlappingSpans(span.start));
            }
            prev_end = span.end;
            let payload: String = full[span.start..span.end].iter().collect();
            if !payload_matches_grammar(&payload) {
                return Err(TrainPrepError::Invalid(format!(
                    "{}: span {i} payload does not match the delimiter grammar",
                    self.study_id
                )));
            }
        }
        for (&pos, span) in self.rag_positions.iter().zip(&self.context_spans) {
            if pos == 0 || pos >= self.sentence_sequence.len() {
                return Err(TrainPrepError::Invalid(format!(
                    "{}: rag position {pos} has no room for a context block",
                    self.study_id
                )));
            }
            let block = &self.sentence_sequence[pos - 1];
            if !payload_matches_grammar(block) {
                return Err(TrainPrepError::Invalid(format!(
                    "{}: element before rag position {pos} is not a context block",
                    self.study_id
                )));
            }
            let payload: String = full[span.start..span.end].iter().collect();
            if &payload != block {
                return Err(TrainPrepError::Invalid(format!(
                    "{}: span does not cover the block before rag position {pos}",
                    self.study_id
                )));
            }
        }
        if !self.mask_spans.is_empty() && self.mask_spans != self.context_spans {
            return Err(TrainPrepError::Invalid(format!(
                "{}: mask spans differ from context spans",
                self.study_id
            )));
        }
        Ok(())
    }
}

/// One organ-tagged report sentence, in report order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSentence {
    pub organ: Organ,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSentences {
    pub study_id: String,
    pub sentences: Vec<ReportSentence>,
}

/// Per-report assembly bookkeeping, kept outside the sample so the
/// serialized record matches the supervision schema exactly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssemblyLog {
    pub study_id: String,
    /// Original sentence indices of the oracle context drawn for each
    /// oracle-injected target.
    pub oracle_sources: BTreeMap<usize, Vec<usize>>,
    /// Targets where an oracle draw had no later sentence to use and fell
    /// back to retrieved context.
    pub fallback_targets: Vec<usize>,
    /// Targets dropped because retrieval failed or returned nothing.
    pub dropped_targets: Vec<usize>,
}

/// Percentile with linear interpolation over the sorted values
/// (position p/100 * (n-1)).
pub fn percentile_linear(values: &[f64], p: f64) -> Result<f64, TrainPrepError> {
    if values.is_empty() {
        return Err(TrainPrepError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        return Ok(sorted[lo]);
    }
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Mark the sentences whose perplexity strictly exceeds the report's own
/// percentile threshold. Ties with the threshold are never marked, so the
/// all-equal case yields no targets.
pub fn mark_rag_targets(
    perplexities: &[f64],
    percentile: f64,
) -> Result<BTreeSet<usize>, TrainPrepError> {
    let threshold = percentile_linear(perplexities, percentile)?;
    Ok(mark_targets_above(perplexities, threshold))
}

/// Mark sentences strictly above an externally computed threshold
/// (corpus-wide scope).
pub fn mark_targets_above(perplexities: &[f64], threshold: f64) -> BTreeSet<usize> {
    perplexities
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Keep at most `k_rag_max` targets, preferring higher perplexity; equal
/// perplexities keep the earlier sentence.
pub fn cap_targets(
    targets: &BTreeSet<usize>,
    perplexities: &[f64],
    k_rag_max: usize,
) -> BTreeSet<usize> {
    if targets.len() <= k_rag_max {
        return targets.clone();
    }
    let mut ranked: Vec<usize> = targets.iter().copied().collect();
    ranked.sort_by(|&a, &b| {
        perplexities[b]
            .partial_cmp(&perplexities[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    ranked.truncate(k_rag_max);
    ranked.into_iter().collect()
}

/// Assemble one oracle-mixed training sample.
///
/// Per target, in ascending sentence order: draw u ~ Uniform(0,1); with
/// u < p_oracle inject 1-2 ground-truth sentences drawn from strictly
/// later in the same report, otherwise inject real retrieval output for
/// the target sentence as query. A target whose oracle draw finds no later
/// sentence falls back to retrieved context; a target whose retrieval
/// fails or comes back empty is dropped. Every decision comes from an RNG
/// stream derived from (seed, study_id), so assembly is bit-deterministic
/// and parallel-safe.
pub fn assemble_oracle_mixed(
    report: &ReportSentences,
    perplexities: &[f64],
    targets: &BTreeSet<usize>,
    retriever: &dyn SentenceRetriever,
    cfg: &TrainPrepConfig,
) -> Result<(TrainingSample, AssemblyLog), TrainPrepError> {
    cfg.validate()?;
    let n = report.sentences.len();
    if perplexities.len() != n {
        return Err(TrainPrepError::LengthMismatch {
            study: report.study_id.clone(),
            perplexities: perplexities.len(),
            sentences: n,
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
        return Err(TrainPrepError::TargetOutOfRange { index: bad, len: n });
    }
    let targets = cap_targets(targets, perplexities, cfg.k_rag_max);

    let mut rng = ChaCha8Rng::seed_from_u64(util::derive_seed(cfg.seed, &report.study_id));
    let mut log = AssemblyLog {
        study_id: report.study_id.clone(),
        ..AssemblyLog::default()
    };

    let mut sequence: Vec<String> = Vec::with_capacity(n + targets.len());
    let mut block_positions: Vec<usize> = Vec::new();
    let mut rag_positions: Vec<usize> = Vec::new();
    let mut oracle_flags: Vec<bool> = Vec::new();

    for (i, sentence) in report.sentences.iter().enumerate() {
        if targets.contains(&i) {
            let u: f64 = rng.gen();
            let wants_oracle = u < cfg.p_oracle;
            let mut oracle_texts: Option<Vec<String>> = None;
            if wants_oracle {
                let later: Vec<usize> = (i + 1..n).collect();
                if later.is_empty() {
                    log.fallback_targets.push(i);
                } else {
                    let count = rng
                        .gen_range(cfg.oracle_context_min..=cfg.oracle_context_max)
                        .min(later.len());
                    let mut picks =
                        rand::seq::index::sample(&mut rng, later.len(), count).into_vec();
                    picks.sort_unstable();
                    let sources: Vec<usize> = picks.iter().map(|&p| later[p]).collect();
                    oracle_texts = Some(
                        sources
                            .iter()
                            .map(|&s| report.sentences[s].text.clone())
                            .collect(),
                    );
                    log.oracle_sources.insert(i, sources);
                }
            }

            let (texts, is_oracle) = match oracle_texts {
                Some(texts) => (texts, true),
                None => {
                    match retriever.retrieve(sentence.organ, &sentence.text) {
                        Ok(r) if !r.selected.is_empty() => (r.selected_texts(), false),
                        _ => {
                            // Nothing to inject; the target is dropped.
                            log.dropped_targets.push(i);
                            sequence.push(sentence.text.clone());
                            continue;
                        }
                    }
                }
            };

            block_positions.push(sequence.len());
            sequence.push(wrap_context(&texts));
            rag_positions.push(sequence.len());
            sequence.push(sentence.text.clone());
            oracle_flags.push(is_oracle);
        } else {
            sequence.push(sentence.text.clone());
        }
    }

    // Character offsets of the context blocks within the joined text.
    let mut context_spans = Vec::with_capacity(block_positions.len());
    let mut offset = 0usize;
    let mut block_iter = block_positions.iter().peekable();
    for (idx, element) in sequence.iter().enumerate() {
        let len = element.chars().count();
        if block_iter.peek() == Some(&&idx) {
            context_spans.push(Span {
                start: offset,
                end: offset + len,
            });
            block_iter.next();
        }
        offset += len + 1; // the joining space
    }

    let sample = TrainingSample {
        study_id: report.study_id.clone(),
        sentence_sequence: sequence,
        rag_positions,
        context_spans,
        mask_spans: Vec::new(),
        oracle_flags,
    };
    sample.validate()?;
    Ok((sample, log))
}

/// Set the loss-mask spans equal to the context spans (delimiters
/// included). Idempotent; overlapping context spans are a validation
/// error.
pub fn mask_context_spans(sample: &TrainingSample) -> Result<TrainingSample, TrainPrepError> {
    let mut prev_end = 0usize;
    for span in &sample.context_spans {
        if span.start < prev_end {
            return Err(TrainPrepError::OverlappingSpans(span.start));
        }
        prev_end = span.end;
    }
    let mut out = sample.clone();
    out.mask_spans = out.context_spans.clone();
    Ok(out)
}

/// Write samples as line-delimited JSON records; returns the number
/// written.
pub fn serialize_samples(samples: &[TrainingSample], path: &Path) -> Result<usize, TrainPrepError> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| json_err(path, e))?;
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))?;
    Ok(samples.len())
}

/// Load and re-validate serialized samples.
pub fn load_samples(path: &Path) -> Result<Vec<TrainingSample>, TrainPrepError> {
    let file = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut samples = Vec::new();
    for line in file.lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.is_empty() {
            continue;
        }
        let s: TrainingSample = serde_json::from_str(&line).map_err(|e| json_err(path, e))?;
        s.validate()?;
        samples.push(s);
    }
    Ok(samples)
}

pub fn save_reports(reports: &[ReportSentences], path: &Path) -> Result<(), TrainPrepError> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for r in reports {
        let line = serde_json::to_string(r).map_err(|e| json_err(path, e))?;
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

pub fn load_reports(path: &Path) -> Result<Vec<ReportSentences>, TrainPrepError> {
    let file = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut reports = Vec::new();
    for line in file.lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        if !line.is_empty() {
            reports.push(serde_json::from_str(&line).map_err(|e| json_err(path, e))?);
        }
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityRecord {
    pub study_id: String,
    pub perplexities: Vec<f64>,
}

pub fn save_perplexities(
    records: &[PerplexityRecord],
    path: &Path,
) -> Result<(), TrainPrepError> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| json_err(path, e))?;
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

pub fn load_perplexities(path: &Path) -> Result<BTreeMap<String, Vec<f64>>, TrainPrepError> {
    let file = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut map = BTreeMap::new();
    for line in file.lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        if !line.is_empty() {
            let r: PerplexityRecord =
                serde_json::from_str(&line).map_err(|e| json_err(path, e))?;
            map.insert(r.study_id, r.perplexities);
        }
    }
    Ok(map)
}

/// Run the whole prep pipeline over a corpus: threshold per the configured
/// scope, mark, cap, assemble, and mask. `make_retriever` builds one
/// retriever per study so two-stage retrieval can use that study's own
/// image embeddings as queries with leave-one-out exclusion. Reports are
/// processed with per-report RNG streams, so the output is independent of
/// parallelism.
pub fn prep_corpus<R, F>(
    reports: &[ReportSentences],
    perplexities: &BTreeMap<String, Vec<f64>>,
    make_retriever: F,
    cfg: &TrainPrepConfig,
    threads: usize,
) -> Result<(Vec<TrainingSample>, Vec<AssemblyLog>), TrainPrepError>
where
    R: SentenceRetriever,
    F: Fn(&str) -> R + Sync,
{
    cfg.validate()?;
    for r in reports {
        let p = perplexities
            .get(&r.study_id)
            .ok_or_else(|| TrainPrepError::MissingPerplexities(r.study_id.clone()))?;
        if p.len() != r.sentences.len() {
            return Err(TrainPrepError::LengthMismatch {
                study: r.study_id.clone(),
                perplexities: p.len(),
                sentences: r.sentences.len(),
            });
        }
    }

    let corpus_threshold = match cfg.percentile_scope {
        PercentileScope::PerReport => None,
        PercentileScope::CorpusWide => {
            let all: Vec<f64> = reports
                .iter()
                .flat_map(|r| perplexities[&r.study_id].iter().copied())
                .collect();
            Some(percentile_linear(&all, cfg.percentile)?)
        }
    };

    let results = crate::util::par_map(reports, threads, |report| {
        let ppl = &perplexities[&report.study_id];
        let targets = match corpus_threshold {
            Some(t) => Ok(mark_targets_above(ppl, t)),
            None => mark_rag_targets(ppl, cfg.percentile),
        }?;
        let retriever = make_retriever(&report.study_id);
        let (sample, log) = assemble_oracle_mixed(report, ppl, &targets, &retriever, cfg)?;
        let sample = mask_context_spans(&sample)?;
        Ok::<_, TrainPrepError>((sample, log))
    });

    let mut samples = Vec::with_capacity(reports.len());
    let mut logs = Vec::with_capacity(reports.len());
    for r in results {
        let (sample, log) = r?;
        samples.push(sample);
        logs.push(log);
    }
    Ok((samples, logs))
}
