//! The adaptive decoding loop: consumes a generator through an abstract
//! interface, detects retrieval triggers (or applies baseline injection
//! policies), performs retrieve → rollback → inject → regenerate, and logs
//! a trace sufficient to replay the decode.
//!
//! The generation unit here is the sentence: the trigger flag on a step
//! models the `[RAG]` token preceding that sentence, which preserves the
//! protocol's control flow without a token-level model in the loop. Each
//! trigger causes exactly one regeneration; regenerated sentences never
//! re-trigger.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::SentenceRetriever;
use crate::sentencedb::Organ;

/// Context-injection delimiters, fixed bit-exact.
pub const RET_START: &str = "<|ret_start|>";
pub const RET_END: &str = "<|ret_end|>";

#[derive(Debug, Error)]
#[error("generator failure: {0}")]
pub struct GeneratorError(pub String);

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("organ plan must not be empty")]
    EmptyOrganPlan,
    #[error("generator aborted mid-decode: {message}")]
    Generator {
        message: String,
        /// Everything decoded before the failure.
        partial: Box<DecodeTrace>,
    },
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
}

/// One unit of generator output. Empty `text` signals end of report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenStep {
    pub text: String,
    pub emits_rag: bool,
    pub perplexity: f64,
}

/// Items visible to the generator, in order: the visual stub, generated
/// sentences, and injected context blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextItem {
    VisualStub { payload: String },
    GeneratedSentence { payload: String },
    InjectedContext { payload: String },
}

/// Abstract stand-in for the sentence generator. Implementations must be
/// deterministic given the context and their own seed.
pub trait ReportGenerator {
    fn next_sentence(&mut self, context: &[ContextItem]) -> Result<GenStep, GeneratorError>;
}

/// Context-injection policy for one decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum DecodePolicy {
    NoRag,
    /// Inject before sentences at 1-indexed positions n, 2n, 3n, …
    FixedInterval { n: usize },
    /// Trigger-driven injection, capped at `k_rag_max` triggers per report.
    Adaptive { k_rag_max: usize },
}

impl DecodePolicy {
    pub const DEFAULT_K_RAG_MAX: usize = 4;
}

impl FromStr for DecodePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None => match s {
                "norag" => Ok(DecodePolicy::NoRag),
                "adaptive" => Ok(DecodePolicy::Adaptive {
                    k_rag_max: Self::DEFAULT_K_RAG_MAX,
                }),
                other => Err(format!(
                    "unknown policy {other:?}; expected norag, fixed:N, or adaptive:K"
                )),
            },
            Some(("fixed", n)) => {
                let n: usize = n.parse().map_err(|_| format!("bad interval {n:?}"))?;
                if n == 0 {
                    return Err("fixed interval must be >= 1".into());
                }
                Ok(DecodePolicy::FixedInterval { n })
            }
            Some(("adaptive", k)) => {
                let k_rag_max: usize = k.parse().map_err(|_| format!("bad trigger cap {k:?}"))?;
                Ok(DecodePolicy::Adaptive { k_rag_max })
            }
            Some((other, _)) => Err(format!("unknown policy {other:?}")),
        }
    }
}

/// Replayable decode log. `RetrievalFailed` extends the event vocabulary
/// so graceful degradation (continue without injection) stays visible in
/// the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    SentenceEmitted {
        index: usize,
        text: String,
        perplexity: f64,
    },
    TriggerFired {
        sentence_index: usize,
    },
    QueryDrafted {
        text: String,
    },
    Retrieved {
        sentence_ids: Vec<String>,
        strategy: String,
    },
    RolledBack {
        sentence_index: usize,
    },
    ContextInjected {
        delimited_text: String,
    },
    Regenerated {
        index: usize,
        text: String,
    },
    RetrievalFailed {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub events: Vec<TraceEvent>,
    pub final_report: String,
    pub trigger_count: usize,
}

/// Wrap retrieved sentences in the exact injection delimiters, sentences
/// joined by single spaces.
pub fn wrap_context(sentences: &[String]) -> String {
    format!("{RET_START} {} {RET_END}", sentences.join(" "))
}

/// True when a payload matches the delimiter grammar exactly:
/// `<|ret_start|> <nonempty text> <|ret_end|>`.
pub fn payload_matches_grammar(payload: &str) -> bool {
    let Some(rest) = payload.strip_prefix(RET_START) else {
        return false;
    };
    let Some(inner) = rest.strip_suffix(RET_END) else {
        return false;
    };
    inner.len() >= 2
        && inner.starts_with(' ')
        && inner.ends_with(' ')
        && !inner.trim().is_empty()
        && !inner.contains(RET_START)
        && !inner.contains(RET_END)
}

/// Append one injected-context item wrapping the retrieved sentences.
/// An empty retrieval is a no-op (the caller logs it).
pub fn inject_context(context: &[ContextItem], sentences: &[String]) -> Vec<ContextItem> {
    let mut out = context.to_vec();
    if !sentences.is_empty() {
        out.push(ContextItem::InjectedContext {
            payload: wrap_context(sentences),
        });
    }
    out
}

/// 1-indexed injection positions {n, 2n, …} not exceeding
/// `total_sentences`.
pub fn fixed_interval_positions(total_sentences: usize, n: usize) -> Vec<usize> {
    assert!(n >= 1, "interval must be >= 1");
    (1..=total_sentences / n).map(|i| i * n).collect()
}

/// Run one decode. Sentences are generated in organ-plan order: plan entry
/// i names the retrieval organ for the i-th sentence, and the final entry
/// stays current if the report runs longer than the plan.
pub fn decode_report(
    gen: &mut dyn ReportGenerator,
    policy: DecodePolicy,
    retriever: &dyn SentenceRetriever,
    organ_plan: &[Organ],
) -> Result<(String, DecodeTrace), DecodeError> {
    if organ_plan.is_empty() {
        return Err(DecodeError::EmptyOrganPlan);
    }
    let organ_at = |idx: usize| organ_plan[idx.min(organ_plan.len() - 1)];

    let mut context = vec![ContextItem::VisualStub {
        payload: String::new(),
    }];
    let mut events: Vec<TraceEvent> = Vec::new();
    let mut sentences: Vec<String> = Vec::new();
    let mut trigger_count = 0usize;

    let partial =
        |events: &[TraceEvent], sentences: &[String], trigger_count: usize| DecodeTrace {
            events: events.to_vec(),
            final_report: sentences.join(" "),
            trigger_count,
        };

    let mut index = 0usize;
    loop {
        // Fixed-interval injection happens before generating the sentence
        // at 1-indexed position n, 2n, …, querying with the previous
        // sentence. Position 1 with interval 1 has nothing to query with,
        // so it passes through.
        if let DecodePolicy::FixedInterval { n } = policy {
            if (index + 1).is_multiple_of(n) {
                if let Some(prev) = sentences.last() {
                    match retriever.retrieve(organ_at(index), prev) {
                        Ok(r) if !r.selected.is_empty() => {
                            events.push(TraceEvent::Retrieved {
                                sentence_ids: r.selected_ids(),
                                strategy: retriever.strategy_name().to_string(),
                            });
                            let texts = r.selected_texts();
                            context = inject_context(&context, &texts);
                            events.push(TraceEvent::ContextInjected {
                                delimited_text: wrap_context(&texts),
                            });
                        }
                        Ok(_) => events.push(TraceEvent::Retrieved {
                            sentence_ids: Vec::new(),
                            strategy: retriever.strategy_name().to_string(),
                        }),
                        Err(e) => events.push(TraceEvent::RetrievalFailed {
                            reason: e.to_string(),
                        }),
                    }
                }
            }
        }

        let step = match gen.next_sentence(&context) {
            Ok(step) => step,
            Err(e) => {
                return Err(DecodeError::Generator {
                    message: e.to_string(),
                    partial: Box::new(partial(&events, &sentences, trigger_count)),
                })
            }
        };
        if step.text.is_empty() {
            break;
        }

        let cap = match policy {
            DecodePolicy::Adaptive { k_rag_max } => k_rag_max,
            _ => 0,
        };
        let fires = matches!(policy, DecodePolicy::Adaptive { .. })
            && step.emits_rag
            && trigger_count < cap;

        if fires {
            trigger_count += 1;
            events.push(TraceEvent::TriggerFired {
                sentence_index: index,
            });
            events.push(TraceEvent::QueryDrafted {
                text: step.text.clone(),
            });
            match retriever.retrieve(organ_at(index), &step.text) {
                Ok(r) if !r.selected.is_empty() => {
                    events.push(TraceEvent::Retrieved {
                        sentence_ids: r.selected_ids(),
                        strategy: retriever.strategy_name().to_string(),
                    });
                    events.push(TraceEvent::RolledBack {
                        sentence_index: index,
                    });
                    let texts = r.selected_texts();
                    context = inject_context(&context, &texts);
                    events.push(TraceEvent::ContextInjected {
                        delimited_text: wrap_context(&texts),
                    });
                    let regen = match gen.next_sentence(&context) {
                        Ok(step) => step,
                        Err(e) => {
                            return Err(DecodeError::Generator {
                                message: e.to_string(),
                                partial: Box::new(partial(&events, &sentences, trigger_count)),
                            })
                        }
                    };
                    events.push(TraceEvent::Regenerated {
                        index,
                        text: regen.text.clone(),
                    });
                    if regen.text.is_empty() {
                        break;
                    }
                    context.push(ContextItem::GeneratedSentence {
                        payload: regen.text.clone(),
                    });
                    sentences.push(regen.text);
                }
                outcome => {
                    // Retrieval came back empty or failed: keep the draft
                    // as the emitted sentence and move on.
                    match outcome {
                        Ok(_) => events.push(TraceEvent::Retrieved {
                            sentence_ids: Vec::new(),
                            strategy: retriever.strategy_name().to_string(),
                        }),
                        Err(e) => events.push(TraceEvent::RetrievalFailed {
                            reason: e.to_string(),
                        }),
                    }
                    events.push(TraceEvent::SentenceEmitted {
                        index,
                        text: step.text.clone(),
                        perplexity: step.perplexity,
                    });
                    context.push(ContextItem::GeneratedSentence {
                        payload: step.text.clone(),
                    });
                    sentences.push(step.text);
                }
            }
        } else {
            events.push(TraceEvent::SentenceEmitted {
                index,
                text: step.text.clone(),
                perplexity: step.perplexity,
            });
            context.push(ContextItem::GeneratedSentence {
                payload: step.text.clone(),
            });
            sentences.push(step.text);
        }
        index += 1;
    }

    let final_report = sentences.join(" ");
    let trace = DecodeTrace {
        events,
        final_report: final_report.clone(),
        trigger_count,
    };
    Ok((final_report, trace))
}

/// Reconstruct the final report from trace events alone: emitted and
/// regenerated sentence texts in event order, joined by single spaces.
pub fn replay_final_report(events: &[TraceEvent]) -> String {
    let texts: Vec<&str> = events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::SentenceEmitted { text, .. } | TraceEvent::Regenerated { text, .. }
                if !text.is_empty() =>
            {
                Some(text.as_str())
            }
            _ => None,
        })
        .collect();
    texts.join(" ")
}

/// One scripted generator step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub text: String,
    pub emits_rag: bool,
    pub perplexity: f64,
}

/// Serializable decode script: the mock's step list, post-injection
/// regeneration overrides keyed by sentence index, the organ plan, and
/// optionally the study whose image embeddings drive two-stage retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeScript {
    #[serde(default)]
    pub study_id: Option<String>,
    pub organ_plan: Vec<Organ>,
    pub steps: Vec<ScriptStep>,
    #[serde(default)]
    pub overrides: BTreeMap<usize, String>,
}

impl DecodeScript {
    pub fn save(&self, path: &Path) -> Result<(), DecodeError> {
        let file = BufWriter::new(File::create(path).map_err(|e| DecodeError::Io {
            path: path.to_path_buf(),
            source: e,
        })?);
        serde_json::to_writer_pretty(file, self).map_err(|e| DecodeError::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DecodeError> {
        let file = BufReader::new(File::open(path).map_err(|e| DecodeError::Io {
            path: path.to_path_buf(),
            source: e,
        })?);
        serde_json::from_reader(file).map_err(|e| DecodeError::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Test double for the out-of-scope language model: replays a fixed step
/// list. When the most recent context item is freshly injected context and
/// the last served step drafted with a trigger, the call is a regeneration
/// request: the override for that sentence index is returned (the draft
/// text if no override exists) without consuming a new step. A script that
/// runs out of steps signals end of report.
pub struct ScriptedGenerator {
    steps: Vec<ScriptStep>,
    overrides: BTreeMap<usize, String>,
    cursor: usize,
    pending_regen: Option<usize>,
}

/// Build the scripted test generator.
pub fn scripted_mock_generator(
    steps: Vec<ScriptStep>,
    overrides: BTreeMap<usize, String>,
) -> ScriptedGenerator {
    ScriptedGenerator {
        steps,
        overrides,
        cursor: 0,
        pending_regen: None,
    }
}

impl ScriptedGenerator {
    pub fn from_script(script: &DecodeScript) -> Self {
        scripted_mock_generator(script.steps.clone(), script.overrides.clone())
    }
}

impl ReportGenerator for ScriptedGenerator {
    fn next_sentence(&mut self, context: &[ContextItem]) -> Result<GenStep, GeneratorError> {
        let injected_last = matches!(context.last(), Some(ContextItem::InjectedContext { .. }));
        if injected_last {
            if let Some(idx) = self.pending_regen.take() {
                let text = self
                    .overrides
                    .get(&idx)
                    .cloned()
                    .unwrap_or_else(|| self.steps[idx].text.clone());
                return Ok(GenStep {
                    text,
                    emits_rag: false,
                    perplexity: self.steps[idx].perplexity,
                });
            }
        }
        self.pending_regen = None;
        let Some(step) = self.steps.get(self.cursor) else {
            return Ok(GenStep {
                text: String::new(),
                emits_rag: false,
                perplexity: 0.0,
            });
        };
        if step.emits_rag {
            self.pending_regen = Some(self.cursor);
        }
        let out = GenStep {
            text: step.text.clone(),
            emits_rag: step.emits_rag,
            perplexity: step.perplexity,
        };
        self.cursor += 1;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerStats {
    pub mean_triggers: f64,
    pub median_triggers: f64,
    pub histogram: BTreeMap<usize, usize>,
}

/// Aggregate trigger counts across traces. An empty input yields zeros.
pub fn trigger_stats(traces: &[DecodeTrace]) -> TriggerStats {
    if traces.is_empty() {
        return TriggerStats {
            mean_triggers: 0.0,
            median_triggers: 0.0,
            histogram: BTreeMap::new(),
        };
    }
    let mut counts: Vec<usize> = traces.iter().map(|t| t.trigger_count).collect();
    counts.sort_unstable();
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    let mid = counts.len() / 2;
    let median = if counts.len() % 2 == 1 {
        counts[mid] as f64
    } else {
        (counts[mid - 1] + counts[mid]) as f64 / 2.0
    };
    let mut histogram = BTreeMap::new();
    for c in counts {
        *histogram.entry(c).or_insert(0) += 1;
    }
    TriggerStats {
        mean_triggers: mean,
        median_triggers: median,
        histogram,
    }
}

/// Write a trace as line-delimited event records followed by one summary
/// record.
pub fn save_trace(trace: &DecodeTrace, path: &Path) -> Result<(), DecodeError> {
    let io = |e| DecodeError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let js = |e| DecodeError::Json {
        path: path.to_path_buf(),
        source: e,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for event in &trace.events {
        let line = serde_json::to_string(event).map_err(js)?;
        writeln!(out, "{line}").map_err(io)?;
    }
    let summary = serde_json::json!({
        "kind": "final",
        "final_report": trace.final_report,
        "trigger_count": trace.trigger_count,
    });
    writeln!(out, "{summary}").map_err(io)?;
    out.flush().map_err(io)
}

pub fn load_trace(path: &Path) -> Result<DecodeTrace, DecodeError> {
    let io = |e| DecodeError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let js = |e| DecodeError::Json {
        path: path.to_path_buf(),
        source: e,
    };
    let file = BufReader::new(File::open(path).map_err(io)?);
    let mut events = Vec::new();
    let mut final_report = String::new();
    let mut trigger_count = 0;
    for line in file.lines() {
        let line = line.map_err(io)?;
        if line.is_empty() {
            continue;
        }
        // The summary record is the only line whose kind is "final".
        let value: serde_json::Value = serde_json::from_str(&line).map_err(js)?;
        if value.get("kind").and_then(|k| k.as_str()) == Some("final") {
            final_report = value
                .get("final_report")
                .and_then(|v| v.as_str())
                .unwrap_or_default()
                .to_string();
            trigger_count = value
                .get("trigger_count")
                .and_then(|v| v.as_u64())
                .unwrap_or(0) as usize;
        } else {
            events.push(serde_json::from_value(value).map_err(js)?);
        }
    }
    Ok(DecodeTrace {
        events,
        final_report,
        trigger_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{RetrievalError, RetrievalResult, SelectedSentence};

    /// Retriever double returning a fixed sentence list.
    struct StubRetriever {
        texts: Vec<String>,
    }

    impl SentenceRetriever for StubRetriever {
        fn retrieve(&self, _: Organ, _: &str) -> Result<RetrievalResult, RetrievalError> {
            Ok(RetrievalResult {
                selected: self
                    .texts
                    .iter()
                    .enumerate()
                    .map(|(i, t)| SelectedSentence {
                        sentence_id: format!("stub:{i}"),
                        study_id: "stub".into(),
                        text: t.clone(),
                    })
                    .collect(),
                mmr_scores: vec![0.0; self.texts.len()],
                candidate_pool_size: self.texts.len(),
                stage_timings: Default::default(),
            })
        }

        fn strategy_name(&self) -> &'static str {
            "stub"
        }
    }

    struct FailingRetriever;

    impl SentenceRetriever for FailingRetriever {
        fn retrieve(&self, organ: Organ, _: &str) -> Result<RetrievalResult, RetrievalError> {
            Err(RetrievalError::MissingImageQuery(organ))
        }

        fn strategy_name(&self) -> &'static str {
            "failing"
        }
    }

    fn step(text: &str, emits_rag: bool, perplexity: f64) -> ScriptStep {
        ScriptStep {
            text: text.into(),
            emits_rag,
            perplexity,
        }
    }

    fn plain_script(n: usize) -> Vec<ScriptStep> {
        (0..n)
            .map(|i| step(&format!("Sentence number {i}."), false, 1.0 + i as f64))
            .collect()
    }

    #[test]
    fn fixed_interval_position_arithmetic() {
        assert_eq!(fixed_interval_positions(10, 5), vec![5, 10]);
        assert_eq!(fixed_interval_positions(4, 5), Vec::<usize>::new());
        assert_eq!(fixed_interval_positions(3, 1), vec![1, 2, 3]);
    }

    #[test]
    fn inject_context_golden_format() {
        let ctx = vec![ContextItem::VisualStub {
            payload: String::new(),
        }];
        let out = inject_context(&ctx, &["s1".to_string()]);
        assert_eq!(out.len(), 2);
        match &out[1] {
            ContextItem::InjectedContext { payload } => {
                assert_eq!(payload, "<|ret_start|> s1 <|ret_end|>");
                assert!(payload_matches_grammar(payload));
            }
            other => panic!("expected injected context, got {other:?}"),
        }

        // Empty retrieval is a no-op.
        assert_eq!(inject_context(&ctx, &[]), ctx);

        // Two sentences share a single delimited block.
        let out = inject_context(&ctx, &["s1".to_string(), "s2".to_string()]);
        match &out[1] {
            ContextItem::InjectedContext { payload } => {
                assert_eq!(payload, "<|ret_start|> s1 s2 <|ret_end|>");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn norag_is_byte_identical_passthrough() {
        let script = plain_script(5);
        let expected = script
            .iter()
            .map(|s| s.text.clone())
            .collect::<Vec<_>>()
            .join(" ");
        let mut gen = scripted_mock_generator(script, BTreeMap::new());
        let (report, trace) = decode_report(
            &mut gen,
            DecodePolicy::NoRag,
            &StubRetriever { texts: vec![] },
            &[Organ::Lung],
        )
        .unwrap();
        assert_eq!(report, expected);
        assert_eq!(trace.trigger_count, 0);
        assert!(trace
            .events
            .iter()
            .all(|e| matches!(e, TraceEvent::SentenceEmitted { .. })));
    }

    #[test]
    fn adaptive_trigger_block_has_exact_event_order() {
        let steps = vec![
            step("Lungs are clear.", false, 1.0),
            step("Drafted query about nodules.", true, 9.0),
            step("Heart size is normal.", false, 1.5),
        ];
        let mut overrides = BTreeMap::new();
        overrides.insert(1usize, "A 4 mm nodule is present.".to_string());
        let mut gen = scripted_mock_generator(steps, overrides);
        let retriever = StubRetriever {
            texts: vec!["Similar case had a nodule.".into()],
        };
        let (report, trace) = decode_report(
            &mut gen,
            DecodePolicy::Adaptive { k_rag_max: 4 },
            &retriever,
            &[Organ::Lung],
        )
        .unwrap();

        assert!(report.contains("A 4 mm nodule is present."));
        assert!(!report.contains("Drafted query about nodules."));
        assert_eq!(trace.trigger_count, 1);

        let kinds: Vec<&'static str> = trace
            .events
            .iter()
            .map(|e| match e {
                TraceEvent::SentenceEmitted { .. } => "emit",
                TraceEvent::TriggerFired { .. } => "trigger",
                TraceEvent::QueryDrafted { .. } => "draft",
                TraceEvent::Retrieved { .. } => "retrieve",
                TraceEvent::RolledBack { .. } => "rollback",
                TraceEvent::ContextInjected { .. } => "inject",
                TraceEvent::Regenerated { .. } => "regen",
                TraceEvent::RetrievalFailed { .. } => "fail",
            })
            .collect();
        assert_eq!(
            kinds,
            vec!["emit", "trigger", "draft", "retrieve", "rollback", "inject", "regen", "emit"]
        );
    }

    #[test]
    fn trigger_cap_ignores_later_triggers() {
        let steps: Vec<ScriptStep> = (0..6)
            .map(|i| step(&format!("Trigger sentence {i}."), true, 5.0))
            .collect();
        let mut gen = scripted_mock_generator(steps, BTreeMap::new());
        let retriever = StubRetriever {
            texts: vec!["Context.".into()],
        };
        let (_, trace) = decode_report(
            &mut gen,
            DecodePolicy::Adaptive { k_rag_max: 4 },
            &retriever,
            &[Organ::Lung],
        )
        .unwrap();
        assert_eq!(trace.trigger_count, 4);
        let retrievals = trace
            .events
            .iter()
            .filter(|e| matches!(e, TraceEvent::Retrieved { .. }))
            .count();
        assert_eq!(retrievals, 4);
        // Six sentences still come out.
        assert_eq!(
            replay_final_report(&trace.events),
            trace.final_report
        );
    }

    #[test]
    fn retrieval_failure_keeps_draft_and_continues() {
        let steps = vec![step("First.", false, 1.0), step("Query draft.", true, 8.0)];
        let mut gen = scripted_mock_generator(steps, BTreeMap::new());
        let (report, trace) = decode_report(
            &mut gen,
            DecodePolicy::Adaptive { k_rag_max: 4 },
            &FailingRetriever,
            &[Organ::Lung],
        )
        .unwrap();
        assert_eq!(report, "First. Query draft.");
        assert!(trace
            .events
            .iter()
            .any(|e| matches!(e, TraceEvent::RetrievalFailed { .. })));
        assert!(!trace
            .events
            .iter()
            .any(|e| matches!(e, TraceEvent::ContextInjected { .. })));
    }

    #[test]
    fn empty_retrieval_keeps_draft() {
        let steps = vec![step("Query draft.", true, 8.0)];
        let mut gen = scripted_mock_generator(steps, BTreeMap::new());
        let (report, trace) = decode_report(
            &mut gen,
            DecodePolicy::Adaptive { k_rag_max: 4 },
            &StubRetriever { texts: vec![] },
            &[Organ::Lung],
        )
        .unwrap();
        assert_eq!(report, "Query draft.");
        assert!(trace.events.iter().any(
            |e| matches!(e, TraceEvent::Retrieved { sentence_ids, .. } if sentence_ids.is_empty())
        ));
    }

    #[test]
    fn fixed_interval_injects_with_previous_sentence_as_query() {
        let script = plain_script(6);
        let mut gen = scripted_mock_generator(script, BTreeMap::new());
        let retriever = StubRetriever {
            texts: vec!["Reference.".into()],
        };
        let (_, trace) = decode_report(
            &mut gen,
            DecodePolicy::FixedInterval { n: 3 },
            &retriever,
            &[Organ::Lung],
        )
        .unwrap();
        let injections = trace
            .events
            .iter()
            .filter(|e| matches!(e, TraceEvent::ContextInjected { .. }))
            .count();
        // Positions 3 and 6.
        assert_eq!(injections, 2);
        assert_eq!(trace.trigger_count, 0);
    }

    #[test]
    fn perplexities_surface_in_trace() {
        let steps = vec![step("A.", false, 1.25), step("B.", false, 2.5)];
        let mut gen = scripted_mock_generator(steps.clone(), BTreeMap::new());
        let (_, trace) = decode_report(
            &mut gen,
            DecodePolicy::NoRag,
            &StubRetriever { texts: vec![] },
            &[Organ::Heart],
        )
        .unwrap();
        let ppls: Vec<f64> = trace
            .events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::SentenceEmitted { perplexity, .. } => Some(*perplexity),
                _ => None,
            })
            .collect();
        assert_eq!(ppls, vec![1.25, 2.5]);
    }

    #[test]
    fn generator_failure_aborts_with_partial_trace() {
        struct FlakyGen {
            calls: usize,
        }
        impl ReportGenerator for FlakyGen {
            fn next_sentence(&mut self, _: &[ContextItem]) -> Result<GenStep, GeneratorError> {
                self.calls += 1;
                if self.calls > 2 {
                    Err(GeneratorError("backend went away".into()))
                } else {
                    Ok(GenStep {
                        text: format!("Sentence {}.", self.calls),
                        emits_rag: false,
                        perplexity: 1.0,
                    })
                }
            }
        }
        let mut gen = FlakyGen { calls: 0 };
        match decode_report(
            &mut gen,
            DecodePolicy::NoRag,
            &StubRetriever { texts: vec![] },
            &[Organ::Lung],
        ) {
            Err(DecodeError::Generator { partial, .. }) => {
                assert_eq!(partial.final_report, "Sentence 1. Sentence 2.");
            }
            other => panic!("expected generator error, got {other:?}"),
        }
    }

    #[test]
    fn trigger_stats_examples() {
        let mk = |n: usize| DecodeTrace {
            events: vec![],
            final_report: String::new(),
            trigger_count: n,
        };
        let stats = trigger_stats(&[mk(0), mk(1), mk(2), mk(3)]);
        assert_eq!(stats.mean_triggers, 1.5);
        assert_eq!(stats.median_triggers, 1.5);

        let zeros = trigger_stats(&[]);
        assert_eq!(zeros.mean_triggers, 0.0);
        assert!(zeros.histogram.is_empty());

        let single = trigger_stats(&[mk(4)]);
        assert_eq!(single.histogram.get(&4), Some(&1));
        assert_eq!(single.median_triggers, 4.0);
    }

    #[test]
    fn trace_round_trips_through_file() {
        let steps = vec![step("One.", false, 1.0), step("Two.", true, 3.0)];
        let mut overrides = BTreeMap::new();
        overrides.insert(1usize, "Two revised.".to_string());
        let mut gen = scripted_mock_generator(steps, overrides);
        let retriever = StubRetriever {
            texts: vec!["Ctx.".into()],
        };
        let (_, trace) = decode_report(
            &mut gen,
            DecodePolicy::Adaptive { k_rag_max: 1 },
            &retriever,
            &[Organ::Lung, Organ::Heart],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        save_trace(&trace, &path).unwrap();
        let loaded = load_trace(&path).unwrap();
        assert_eq!(loaded, trace);
        assert_eq!(replay_final_report(&loaded.events), trace.final_report);
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("norag".parse::<DecodePolicy>().unwrap(), DecodePolicy::NoRag);
        assert_eq!(
            "fixed:3".parse::<DecodePolicy>().unwrap(),
            DecodePolicy::FixedInterval { n: 3 }
        );
        assert_eq!(
            "adaptive:2".parse::<DecodePolicy>().unwrap(),
            DecodePolicy::Adaptive { k_rag_max: 2 }
        );
        assert_eq!(
            "adaptive".parse::<DecodePolicy>().unwrap(),
            DecodePolicy::Adaptive { k_rag_max: 4 }
        );
        assert!("fixed:0".parse::<DecodePolicy>().is_err());
        assert!("bogus".parse::<DecodePolicy>().is_err());
    }
}
