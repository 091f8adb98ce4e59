//! Deterministic synthetic corpus generation.
//!
//! Every other module's tests and demos consume these fixtures: studies
//! receive random finding sets, each present finding emits a templated
//! sentence, and sentence/image embeddings are finding-cluster centroids
//! plus noise so that label similarity correlates with embedding
//! similarity. The manifest records every count and assignment and serves
//! as a complete oracle for database statistics and index sizes.
//!
//! Sentence templates are fixed per finding with a slot-filled severity
//! word, so BLEU-2 between same-finding sentences is high and between
//! different findings low, which gives the MMR diversity term real work.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, EmbeddingMatrix, LabelTable};
use crate::orchestrator::{DecodeError, DecodeScript, ScriptStep};
use crate::sentencedb::{
    self, DatabaseStats, DbError, Organ, OrganFindingMap, OrganParagraphs, OrganStats,
    StudyParagraph,
};
use crate::trainprep::{PerplexityRecord, ReportSentence, ReportSentences, TrainPrepError};
use crate::util;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    BadConfig(String),
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
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error(transparent)]
    Report(#[from] TrainPrepError),
    #[error(transparent)]
    Script(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantedSignalMode {
    /// Plain cluster construction.
    None,
    /// The probe label is encoded only in the lowest-variance coordinate
    /// of the probe organ's image space (projection-test fixtures).
    TailDim,
    /// A weak probe-label mean shift spread evenly over all coordinates,
    /// buried below the sample-noise eigenvalue bulk.
    Isotropic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_studies: usize,
    pub organs: Vec<Organ>,
    pub finding_map: OrganFindingMap,
    pub embed_dim_image: usize,
    pub embed_dim_text: usize,
    /// Noise scale around finding centroids. Embedding-similarity
    /// monotonicity (same-finding pairs beating disjoint pairs on mean
    /// cosine) holds comfortably up to about 0.5.
    pub cluster_spread: f64,
    pub finding_prevalence: f64,
    pub planted_signal_mode: PlantedSignalMode,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_studies: 100,
            organs: Organ::RETRIEVAL.to_vec(),
            finding_map: OrganFindingMap::chest_ct_default(),
            embed_dim_image: 16,
            embed_dim_text: 16,
            cluster_spread: 0.25,
            finding_prevalence: 0.3,
            planted_signal_mode: PlantedSignalMode::None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_studies < 2 {
            return Err(SynthError::BadConfig("n_studies must be >= 2".into()));
        }
        if self.embed_dim_image < 2 || self.embed_dim_text < 2 {
            return Err(SynthError::BadConfig("embedding dims must be >= 2".into()));
        }
        if self.organs.is_empty() || self.organs.contains(&Organ::Other) {
            return Err(SynthError::BadConfig(
                "organs must be a nonempty subset of the retrieval organs".into(),
            ));
        }
        if !(0.0 < self.finding_prevalence && self.finding_prevalence < 1.0) {
            return Err(SynthError::BadConfig(
                "finding_prevalence must lie in (0,1)".into(),
            ));
        }
        Ok(())
    }

    fn probe_organ(&self) -> Organ {
        self.organs[0]
    }

    fn probe_finding(&self) -> Option<String> {
        self.finding_map
            .findings_for(self.probe_organ())
            .first()
            .cloned()
    }
}

/// Ground-truth record of everything the generator decided. Database
/// statistics, label tables, and index sizes computed downstream must
/// match these values exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_studies: usize,
    pub db_stats: DatabaseStats,
    /// Embedded (hence indexed) sentence count per retrieval organ.
    pub text_index_sizes: BTreeMap<Organ, usize>,
    pub image_index_sizes: BTreeMap<Organ, usize>,
    pub study_findings: BTreeMap<String, Vec<String>>,
    pub probe_organ: Organ,
    pub probe_finding: String,
    pub planted_signal_mode: PlantedSignalMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub paragraphs: OrganParagraphs,
    pub sentence_embeddings: EmbeddingMatrix,
    pub image_embeddings: BTreeMap<Organ, EmbeddingMatrix>,
    pub labels: LabelTable,
    pub reports: Vec<ReportSentences>,
    pub perplexities: Vec<PerplexityRecord>,
    pub finding_map: OrganFindingMap,
    pub decode_script: DecodeScript,
    pub manifest: Manifest,
}

const SEVERITIES: [&str; 5] = ["Mild", "Moderate", "Severe", "Trace", "Extensive"];
const TAIL_SIGNAL: f64 = 0.2;
const TAIL_NOISE: f64 = 0.02;
const ISO_SHIFT: f64 = 0.05;

fn organ_location(organ: Organ) -> &'static str {
    match organ {
        Organ::Lung => "lungs",
        Organ::Heart => "heart",
        Organ::Esophagus => "esophagus",
        Organ::Aorta => "aorta",
        Organ::Other => "study",
    }
}

fn finding_sentence(rng: &mut ChaCha8Rng, finding: &str, organ: Organ) -> String {
    let severity = SEVERITIES[rng.gen_range(0..SEVERITIES.len())];
    format!(
        "{severity} {} is noted in the {}.",
        finding.replace('_', " "),
        organ_location(organ)
    )
}

fn negative_sentence(organ: Organ) -> String {
    format!(
        "No significant abnormality is seen in the {}.",
        organ_location(organ)
    )
}

fn gauss_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            // Box-Muller on two uniform draws.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v = gauss_vec(rng, dim);
    crate::embed::normalize_in_place(&mut v);
    v
}

struct Centroids {
    text: BTreeMap<String, Vec<f64>>,
    image: BTreeMap<String, Vec<f64>>,
    iso_signs: Vec<f64>,
}

fn draw_centroids(cfg: &SynthConfig) -> Centroids {
    let mut rng = ChaCha8Rng::seed_from_u64(util::derive_seed(cfg.seed, "centroids"));
    let mut text = BTreeMap::new();
    let mut image = BTreeMap::new();
    for (organ, findings) in &cfg.finding_map.groups {
        for f in findings {
            text.insert(f.clone(), unit_vec(&mut rng, cfg.embed_dim_text));
            image.insert(f.clone(), unit_vec(&mut rng, cfg.embed_dim_image));
        }
        let key = format!("normal:{organ}");
        text.insert(key.clone(), unit_vec(&mut rng, cfg.embed_dim_text));
        image.insert(key, unit_vec(&mut rng, cfg.embed_dim_image));
    }
    let iso_signs = (0..cfg.embed_dim_image)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Centroids {
        text,
        image,
        iso_signs,
    }
}

/// Generate a full corpus: paragraphs, sentence and image embeddings,
/// labels, reports with perplexities, a decode script, and the
/// ground-truth manifest. Bit-identical for equal configs; per-study RNG
/// streams derive from (seed, study_id).
pub fn gen_synthetic_corpus(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let probe_finding = cfg.probe_finding().ok_or_else(|| {
        SynthError::BadConfig(format!(
            "finding map has no findings for probe organ {}",
            cfg.probe_organ()
        ))
    })?;
    let probe_organ = cfg.probe_organ();
    let centroids = draw_centroids(cfg);
    let planted = cfg.planted_signal_mode;

    let all_findings = cfg.finding_map.all_findings();
    let mut paragraphs = OrganParagraphs::new();
    let mut reports = Vec::with_capacity(cfg.n_studies);
    let mut perplexities = Vec::with_capacity(cfg.n_studies);
    let mut study_findings: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut label_rows: Vec<u8> = Vec::with_capacity(cfg.n_studies * all_findings.len());
    let mut study_ids = Vec::with_capacity(cfg.n_studies);

    let mut sent_ids = Vec::new();
    let mut sent_data: Vec<f64> = Vec::new();
    let mut image_data: BTreeMap<Organ, Vec<f64>> = cfg
        .organs
        .iter()
        .map(|&organ| (organ, Vec::new()))
        .collect();

    // Manifest tallies, kept independent of the database builder.
    let mut organ_sentences: BTreeMap<Organ, usize> = BTreeMap::new();
    let mut organ_words: BTreeMap<Organ, usize> = BTreeMap::new();
    let mut organ_studies: BTreeMap<Organ, usize> = BTreeMap::new();
    let mut excluded_other = 0usize;

    for i in 0..cfg.n_studies {
        let study_id = format!("study{i:04}");
        let mut rng = ChaCha8Rng::seed_from_u64(util::derive_seed(cfg.seed, &study_id));

        // 1. Finding assignment, in finding-map order.
        let mut present: Vec<String> = Vec::new();
        for (organ, findings) in &cfg.finding_map.groups {
            let _ = organ;
            for f in findings {
                let p = if planted != PlantedSignalMode::None && *f == probe_finding {
                    0.5
                } else {
                    cfg.finding_prevalence
                };
                if rng.gen::<f64>() < p {
                    present.push(f.clone());
                }
            }
        }
        let has_probe = present.contains(&probe_finding);
        study_findings.insert(study_id.clone(), present.clone());
        for f in &all_findings {
            label_rows.push(if present.contains(f) { 1 } else { 0 });
        }
        study_ids.push(study_id.clone());

        // 2. Sentences and their text embeddings, organ by organ.
        let mut report_sentences: Vec<ReportSentence> = Vec::new();
        let mut emit_organ = |organ: Organ,
                              rng: &mut ChaCha8Rng,
                              report_sentences: &mut Vec<ReportSentence>|
         -> Vec<String> {
            let organ_present: Vec<&String> = cfg
                .finding_map
                .findings_for(organ)
                .iter()
                .filter(|f| present.contains(*f))
                .collect();
            let mut texts = Vec::new();
            if organ_present.is_empty() {
                texts.push(negative_sentence(organ));
            } else {
                for f in &organ_present {
                    texts.push(finding_sentence(rng, f, organ));
                }
            }
            for (pos, text) in texts.iter().enumerate() {
                sent_ids.push(sentencedb::sentence_id(&study_id, organ, pos));
                let centroid_key = if organ_present.is_empty() {
                    format!("normal:{organ}")
                } else {
                    organ_present[pos.min(organ_present.len() - 1)].clone()
                };
                let centroid = &centroids.text[&centroid_key];
                let noise = gauss_vec(rng, cfg.embed_dim_text);
                let mut v: Vec<f64> = centroid
                    .iter()
                    .zip(&noise)
                    .map(|(c, n)| c + cfg.cluster_spread * n)
                    .collect();
                crate::embed::normalize_in_place(&mut v);
                sent_data.extend(v);
                report_sentences.push(ReportSentence {
                    organ,
                    text: text.clone(),
                });
            }
            texts
        };

        for &organ in &cfg.organs {
            let texts = emit_organ(organ, &mut rng, &mut report_sentences);
            *organ_sentences.entry(organ).or_insert(0) += texts.len();
            *organ_words.entry(organ).or_insert(0) += texts
                .iter()
                .map(|t| t.split_whitespace().count())
                .sum::<usize>();
            *organ_studies.entry(organ).or_insert(0) += 1;
            paragraphs
                .entry(organ)
                .or_default()
                .push(StudyParagraph {
                    study_id: study_id.clone(),
                    text: texts.join(" "),
                });
        }
        // Sentences for findings outside the retrieval organs go to the
        // excluded "other" section; only emitted when such findings are
        // present.
        let other_present: Vec<&String> = cfg
            .finding_map
            .findings_for(Organ::Other)
            .iter()
            .filter(|f| present.contains(*f))
            .collect();
        if !other_present.is_empty() {
            let texts = emit_organ(Organ::Other, &mut rng, &mut report_sentences);
            excluded_other += texts.len();
            paragraphs
                .entry(Organ::Other)
                .or_default()
                .push(StudyParagraph {
                    study_id: study_id.clone(),
                    text: texts.join(" "),
                });
        }

        // 3. Per-organ image embeddings.
        for &organ in &cfg.organs {
            let data = image_data.get_mut(&organ).expect("organ pre-registered");
            if planted != PlantedSignalMode::None && organ == probe_organ {
                let d = cfg.embed_dim_image;
                let y = if has_probe { 1.0 } else { -1.0 };
                match planted {
                    PlantedSignalMode::TailDim => {
                        // Label lives only in the last, lowest-variance
                        // coordinate; the rest is a variance ladder of
                        // pure noise.
                        let noise = gauss_vec(&mut rng, d);
                        for (j, n) in noise.iter().enumerate().take(d - 1) {
                            let scale = 1.0 + j as f64 / (d - 1) as f64;
                            data.push(scale * n);
                        }
                        data.push(TAIL_SIGNAL * y + TAIL_NOISE * noise[d - 1]);
                    }
                    PlantedSignalMode::Isotropic => {
                        let noise = gauss_vec(&mut rng, d);
                        for (j, n) in noise.iter().enumerate() {
                            data.push(n + ISO_SHIFT * y * centroids.iso_signs[j]);
                        }
                    }
                    PlantedSignalMode::None => unreachable!(),
                }
            } else {
                let organ_present: Vec<&String> = cfg
                    .finding_map
                    .findings_for(organ)
                    .iter()
                    .filter(|f| present.contains(*f))
                    .collect();
                let d = cfg.embed_dim_image;
                let mut mean = vec![0.0; d];
                if organ_present.is_empty() {
                    mean.copy_from_slice(&centroids.image[&format!("normal:{organ}")]);
                } else {
                    for f in &organ_present {
                        for (m, c) in mean.iter_mut().zip(&centroids.image[*f]) {
                            *m += c;
                        }
                    }
                    mean.iter_mut()
                        .for_each(|m| *m /= organ_present.len() as f64);
                }
                let noise = gauss_vec(&mut rng, d);
                let mut v: Vec<f64> = mean
                    .iter()
                    .zip(&noise)
                    .map(|(m, n)| m + cfg.cluster_spread * n)
                    .collect();
                crate::embed::normalize_in_place(&mut v);
                data.extend(v);
            }
        }

        // 4. Per-sentence perplexities.
        let ppl: Vec<f64> = (0..report_sentences.len())
            .map(|_| {
                let g = gauss_vec(&mut rng, 1)[0];
                (0.4 * g).exp() * 2.0
            })
            .collect();
        perplexities.push(PerplexityRecord {
            study_id: study_id.clone(),
            perplexities: ppl,
        });
        reports.push(ReportSentences {
            study_id,
            sentences: report_sentences,
        });
    }

    let sentence_embeddings =
        EmbeddingMatrix::new(sent_ids, cfg.embed_dim_text, sent_data)?;
    let mut image_embeddings = BTreeMap::new();
    for (&organ, data) in &image_data {
        image_embeddings.insert(
            organ,
            EmbeddingMatrix::new(study_ids.clone(), cfg.embed_dim_image, data.clone())?,
        );
    }
    let labels = LabelTable::new(study_ids.clone(), all_findings, label_rows)?;

    // Decode script from study 0: every third sentence drafts a trigger.
    let first = &reports[0];
    let mut steps: Vec<ScriptStep> = first
        .sentences
        .iter()
        .zip(&perplexities[0].perplexities)
        .map(|(s, &p)| ScriptStep {
            text: s.text.clone(),
            emits_rag: false,
            perplexity: p,
        })
        .collect();
    let mut overrides = BTreeMap::new();
    for (i, step) in steps.iter_mut().enumerate() {
        if i % 3 == 2 {
            step.emits_rag = true;
            let mut revised = step.text.clone();
            if let Some(c) = revised.get_mut(0..1) {
                c.make_ascii_lowercase();
            }
            overrides.insert(i, format!("On review, {revised}"));
        }
    }
    let decode_script = DecodeScript {
        study_id: Some(first.study_id.clone()),
        organ_plan: first.sentences.iter().map(|s| s.organ).collect(),
        steps,
        overrides,
    };

    // Manifest stats mirror the db_stats definition from independent
    // tallies.
    let mut per_organ = BTreeMap::new();
    let mut total = 0usize;
    for &organ in &Organ::RETRIEVAL {
        let sentences = organ_sentences.get(&organ).copied().unwrap_or(0);
        let words = organ_words.get(&organ).copied().unwrap_or(0);
        let unique_studies = organ_studies.get(&organ).copied().unwrap_or(0);
        total += sentences;
        per_organ.insert(
            organ,
            OrganStats {
                sentences,
                unique_studies,
                avg_sentences_per_study: if unique_studies == 0 {
                    0.0
                } else {
                    sentences as f64 / unique_studies as f64
                },
                avg_words_per_sentence: if sentences == 0 {
                    0.0
                } else {
                    words as f64 / sentences as f64
                },
            },
        );
    }
    let text_index_sizes = Organ::RETRIEVAL
        .iter()
        .map(|&o| (o, organ_sentences.get(&o).copied().unwrap_or(0)))
        .collect();
    let image_index_sizes = cfg.organs.iter().map(|&o| (o, cfg.n_studies)).collect();
    let manifest = Manifest {
        seed: cfg.seed,
        n_studies: cfg.n_studies,
        db_stats: DatabaseStats {
            per_organ,
            total_sentences: total + excluded_other,
            excluded_other,
        },
        text_index_sizes,
        image_index_sizes,
        study_findings,
        probe_organ,
        probe_finding,
        planted_signal_mode: planted,
    };

    Ok(SynthCorpus {
        paragraphs,
        sentence_embeddings,
        image_embeddings,
        labels,
        reports,
        perplexities,
        finding_map: cfg.finding_map.clone(),
        decode_script,
        manifest,
    })
}

/// Two Gaussian clusters with unit noise and the given mean separation in
/// sigma units, interleaved by class. Probe-sanity fixtures.
pub fn gen_gaussian_clusters(
    seed: u64,
    n_per_class: usize,
    dim: usize,
    separation_sigmas: f64,
) -> (EmbeddingMatrix, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = unit_vec(&mut rng, dim);
    let mut ids = Vec::with_capacity(2 * n_per_class);
    let mut data = Vec::with_capacity(2 * n_per_class * dim);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let y = i % 2 == 0;
        let sign = if y { 1.0 } else { -1.0 };
        let noise = gauss_vec(&mut rng, dim);
        for (j, n) in noise.iter().enumerate() {
            data.push(sign * separation_sigmas / 2.0 * direction[j] + n);
        }
        ids.push(format!("point{i:05}"));
        labels.push(y);
    }
    (
        EmbeddingMatrix::new(ids, dim, data).expect("generated data is finite"),
        labels,
    )
}

/// Matched train/eval splits of the two-cluster construction: one class
/// axis, independent samples, so both splits share a distribution.
pub fn gen_probe_split(
    seed: u64,
    n_per_class: usize,
    dim: usize,
    separation_sigmas: f64,
) -> (EmbeddingMatrix, Vec<bool>, EmbeddingMatrix, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = unit_vec(&mut rng, dim);
    let mut sample = |prefix: &str| {
        let mut ids = Vec::with_capacity(2 * n_per_class);
        let mut data = Vec::with_capacity(2 * n_per_class * dim);
        let mut labels = Vec::with_capacity(2 * n_per_class);
        for i in 0..2 * n_per_class {
            let y = i % 2 == 0;
            let sign = if y { 1.0 } else { -1.0 };
            let noise = gauss_vec(&mut rng, dim);
            for (j, n) in noise.iter().enumerate() {
                data.push(sign * separation_sigmas / 2.0 * direction[j] + n);
            }
            ids.push(format!("{prefix}{i:05}"));
            labels.push(y);
        }
        (
            EmbeddingMatrix::new(ids, dim, data).expect("generated data is finite"),
            labels,
        )
    };
    let (train, train_y) = sample("train");
    let (eval, eval_y) = sample("eval");
    (train, train_y, eval, eval_y)
}

/// Write every corpus artifact under one directory, in the formats the
/// CLI subcommands consume.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<(), SynthError> {
    let io = |path: &Path, e: std::io::Error| SynthError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;

    sentencedb::save_paragraphs(&corpus.paragraphs, &dir.join("paragraphs"))?;
    crate::embed::save_embeddings(&corpus.sentence_embeddings, &dir.join("sentences.aemb"))?;
    sentencedb::save_image_embeddings(&corpus.image_embeddings, &dir.join("images"))?;
    crate::embed::save_labels(&corpus.labels, &dir.join("labels.tsv"))?;
    corpus.finding_map.save(&dir.join("finding_map.json"))?;
    crate::trainprep::save_reports(&corpus.reports, &dir.join("reports.jsonl"))?;
    crate::trainprep::save_perplexities(&corpus.perplexities, &dir.join("perplexities.jsonl"))?;
    corpus.decode_script.save(&dir.join("decode_script.json"))?;

    let manifest_path = dir.join("manifest.json");
    let file = BufWriter::new(File::create(&manifest_path).map_err(|e| io(&manifest_path, e))?);
    serde_json::to_writer_pretty(file, &corpus.manifest).map_err(|e| SynthError::Json {
        path: manifest_path,
        source: e,
    })?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Manifest, SynthError> {
    let file = BufReader::new(File::open(path).map_err(|e| SynthError::Io {
        path: path.to_path_buf(),
        source: e,
    })?);
    serde_json::from_reader(file).map_err(|e| SynthError::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::cosine_sim;
    use crate::sentencedb::{build_database, db_stats};

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig {
            n_studies: 12,
            ..SynthConfig::default()
        };
        let a = gen_synthetic_corpus(&cfg).unwrap();
        let b = gen_synthetic_corpus(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seed_differs() {
        let a = gen_synthetic_corpus(&SynthConfig {
            n_studies: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        let b = gen_synthetic_corpus(&SynthConfig {
            n_studies: 8,
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_ne!(
            a.sentence_embeddings.data(),
            b.sentence_embeddings.data()
        );
    }

    #[test]
    fn manifest_matches_built_database_exactly() {
        let cfg = SynthConfig {
            n_studies: 20,
            seed: 5,
            ..SynthConfig::default()
        };
        let corpus = gen_synthetic_corpus(&cfg).unwrap();
        let db = build_database(
            &corpus.paragraphs,
            &corpus.sentence_embeddings,
            &corpus.image_embeddings,
            &corpus.labels,
            corpus.finding_map.clone(),
        )
        .unwrap();
        assert_eq!(db_stats(&db), corpus.manifest.db_stats);
        for &organ in &Organ::RETRIEVAL {
            assert_eq!(
                db.text_index(organ).unwrap().len(),
                corpus.manifest.text_index_sizes[&organ],
                "{organ}"
            );
            assert_eq!(
                db.image_index(organ).unwrap().len(),
                corpus.manifest.image_index_sizes[&organ],
                "{organ}"
            );
        }
        // Labels agree with the manifest's assignment record.
        for (study, findings) in &corpus.manifest.study_findings {
            assert_eq!(
                &corpus.labels.positive_findings(study).unwrap(),
                findings
            );
        }
    }

    #[test]
    fn two_study_manifest_self_consistency() {
        let cfg = SynthConfig {
            n_studies: 2,
            seed: 77,
            ..SynthConfig::default()
        };
        let corpus = gen_synthetic_corpus(&cfg).unwrap();
        assert_eq!(corpus.manifest.n_studies, 2);
        let db = build_database(
            &corpus.paragraphs,
            &corpus.sentence_embeddings,
            &corpus.image_embeddings,
            &corpus.labels,
            corpus.finding_map.clone(),
        )
        .unwrap();
        assert_eq!(db_stats(&db), corpus.manifest.db_stats);
    }

    #[test]
    fn embedding_similarity_tracks_shared_findings() {
        let cfg = SynthConfig {
            n_studies: 60,
            seed: 11,
            ..SynthConfig::default()
        };
        let corpus = gen_synthetic_corpus(&cfg).unwrap();
        let lung = &corpus.image_embeddings[&Organ::Lung];
        let sets: Vec<std::collections::BTreeSet<String>> = corpus
            .manifest
            .study_findings
            .values()
            .map(|f| f.iter().cloned().collect())
            .collect();
        let mut same = (0.0, 0usize);
        let mut disjoint = (0.0, 0usize);
        for i in 0..lung.n_rows() {
            for j in (i + 1)..lung.n_rows() {
                let c = cosine_sim(lung.row(i), lung.row(j)).unwrap();
                if sets[i].intersection(&sets[j]).next().is_some() {
                    same = (same.0 + c, same.1 + 1);
                } else if !sets[i].is_empty() && !sets[j].is_empty() {
                    disjoint = (disjoint.0 + c, disjoint.1 + 1);
                }
            }
        }
        assert!(same.1 > 0 && disjoint.1 > 0);
        assert!(
            same.0 / same.1 as f64 > disjoint.0 / disjoint.1 as f64,
            "same-finding mean cosine should exceed disjoint mean cosine"
        );
    }

    #[test]
    fn generated_paragraphs_resplit_into_generated_sentences() {
        let cfg = SynthConfig {
            n_studies: 10,
            seed: 3,
            ..SynthConfig::default()
        };
        let corpus = gen_synthetic_corpus(&cfg).unwrap();
        for (organ, studies) in &corpus.paragraphs {
            for p in studies {
                let fragments = crate::sentencedb::split_sentences(&p.text);
                for (pos, _) in fragments.iter().enumerate() {
                    let id = crate::sentencedb::sentence_id(&p.study_id, *organ, pos);
                    if *organ != Organ::Other {
                        assert!(
                            corpus.sentence_embeddings.row_by_id(&id).is_some(),
                            "missing embedding for {id}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn write_corpus_round_trips() {
        let cfg = SynthConfig {
            n_studies: 6,
            seed: 9,
            ..SynthConfig::default()
        };
        let corpus = gen_synthetic_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&corpus, dir.path()).unwrap();

        let paragraphs = sentencedb::load_paragraphs(&dir.path().join("paragraphs")).unwrap();
        assert_eq!(paragraphs, corpus.paragraphs);
        let manifest = load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(manifest, corpus.manifest);
        let reports = crate::trainprep::load_reports(&dir.path().join("reports.jsonl")).unwrap();
        assert_eq!(reports, corpus.reports);
        let script = DecodeScript::load(&dir.path().join("decode_script.json")).unwrap();
        assert_eq!(script, corpus.decode_script);
    }

    #[test]
    fn gaussian_clusters_have_stated_margin() {
        let (m, y) = gen_gaussian_clusters(1, 300, 6, 4.0);
        assert_eq!(m.n_rows(), 600);
        assert_eq!(y.len(), 600);
        // Mean separation along the class axis is close to 4 sigmas.
        let mut pos = vec![0.0; 6];
        let mut neg = vec![0.0; 6];
        for (i, &label) in y.iter().enumerate() {
            let target = if label { &mut pos } else { &mut neg };
            for (t, v) in target.iter_mut().zip(m.row(i)) {
                *t += v;
            }
        }
        let gap: f64 = pos
            .iter()
            .zip(&neg)
            .map(|(p, n)| (p / 300.0 - n / 300.0).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((gap - 4.0).abs() < 0.3, "gap = {gap}");
    }
}
