//! The organ-indexed sentence database: sentence splitting, organ and
//! finding labeling, per-organ exact-cosine indices, and database stats.
//!
//! Approximate indexing is deliberately absent: at desk scale (up to
//! ~1M sentences) an exact flat scan is fast enough and stays testable
//! against a brute-force oracle. Index vectors are stored pre-normalized
//! so cosine similarity reduces to a dot product.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{self, EmbedError, EmbeddingMatrix, LabelTable};

#[derive(Debug, Error)]
pub enum DbError {
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
    #[error("unknown organ {0:?}")]
    UnknownOrgan(String),
    #[error("{kind} ids do not resolve: {offenders:?}")]
    DanglingIds {
        kind: &'static str,
        offenders: Vec<String>,
    },
    #[error("query dimension {query} does not match index dimension {index}")]
    DimMismatch { query: usize, index: usize },
    #[error("zero-norm query vector")]
    ZeroQuery,
    #[error("no {space} index for organ {organ}")]
    MissingIndex { organ: Organ, space: &'static str },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

fn io_err(path: &Path, source: std::io::Error) -> DbError {
    DbError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn json_err(path: &Path, source: serde_json::Error) -> DbError {
    DbError::Json {
        path: path.to_path_buf(),
        source,
    }
}

/// Closed organ vocabulary. `Other` collects sentences that do not map to
/// the four retrieval organs; such records are kept in the database but
/// never indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Organ {
    Lung,
    Heart,
    Esophagus,
    Aorta,
    Other,
}

impl Organ {
    pub const RETRIEVAL: [Organ; 4] = [Organ::Lung, Organ::Heart, Organ::Esophagus, Organ::Aorta];

    pub fn name(&self) -> &'static str {
        match self {
            Organ::Lung => "lung",
            Organ::Heart => "heart",
            Organ::Esophagus => "esophagus",
            Organ::Aorta => "aorta",
            Organ::Other => "other",
        }
    }
}

impl fmt::Display for Organ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Organ {
    type Err = DbError;

    fn from_str(s: &str) -> Result<Self, DbError> {
        match s {
            "lung" => Ok(Organ::Lung),
            "heart" => Ok(Organ::Heart),
            "esophagus" => Ok(Organ::Esophagus),
            "aorta" => Ok(Organ::Aorta),
            "other" => Ok(Organ::Other),
            other => Err(DbError::UnknownOrgan(other.to_string())),
        }
    }
}

/// Which finding names belong to which organ; study-level labels are
/// projected through this map onto organ-restricted sentence label sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganFindingMap {
    pub groups: BTreeMap<Organ, Vec<String>>,
}

impl OrganFindingMap {
    /// The standard 18-finding chest-CT grouping: 11 lung, 2 heart,
    /// 2 aorta, 1 esophagus, 2 other.
    pub fn chest_ct_default() -> Self {
        let mut groups = BTreeMap::new();
        groups.insert(
            Organ::Lung,
            vec![
                "lung_nodule".to_string(),
                "mosaic_attenuation".to_string(),
                "peribronchial_thickening".to_string(),
                "consolidation".to_string(),
                "bronchiectasis".to_string(),
                "interlobular_septal_thickening".to_string(),
                "emphysema".to_string(),
                "atelectasis".to_string(),
                "lung_opacity".to_string(),
                "pulmonary_fibrotic_sequela".to_string(),
                "pleural_effusion".to_string(),
            ],
        );
        groups.insert(
            Organ::Heart,
            vec!["cardiomegaly".to_string(), "pericardial_effusion".to_string()],
        );
        groups.insert(
            Organ::Aorta,
            vec![
                "arterial_wall_calcification".to_string(),
                "coronary_artery_wall_calcification".to_string(),
            ],
        );
        groups.insert(Organ::Esophagus, vec!["hiatal_hernia".to_string()]);
        groups.insert(
            Organ::Other,
            vec!["lymphadenopathy".to_string(), "medical_material".to_string()],
        );
        Self { groups }
    }

    pub fn findings_for(&self, organ: Organ) -> &[String] {
        self.groups.get(&organ).map(Vec::as_slice).unwrap_or(&[])
    }

    /// All finding names in organ order, the canonical column order for
    /// label tables built against this map.
    pub fn all_findings(&self) -> Vec<String> {
        self.groups.values().flatten().cloned().collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), DbError> {
        let file = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
        serde_json::to_writer_pretty(file, self).map_err(|e| json_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DbError> {
        let file = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
        serde_json::from_reader(file).map_err(|e| json_err(path, e))
    }
}

/// One organ-labeled, finding-labeled report sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub sentence_id: String,
    pub study_id: String,
    pub organ: Organ,
    pub text: String,
    pub findings: Vec<String>,
    pub has_embedding: bool,
}

/// Frozen exact-cosine flat index. Vectors are pre-normalized so the
/// similarity score is a plain dot product.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineIndex {
    dim: usize,
    ids: Vec<String>,
    study_ids: Vec<String>,
    data: Vec<f64>,
    by_id: HashMap<String, usize>,
}

impl CosineIndex {
    fn build(dim: usize, entries: Vec<(String, String, Vec<f64>)>) -> Self {
        let mut ids = Vec::with_capacity(entries.len());
        let mut study_ids = Vec::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * dim);
        let mut by_id = HashMap::with_capacity(entries.len());
        for (id, study, mut vec) in entries {
            embed::normalize_in_place(&mut vec);
            by_id.insert(id.clone(), ids.len());
            ids.push(id);
            study_ids.push(study);
            data.extend(vec);
        }
        Self {
            dim,
            ids,
            study_ids,
            data,
            by_id,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn entry(&self, i: usize) -> (&str, &str, &[f64]) {
        (
            &self.ids[i],
            &self.study_ids[i],
            &self.data[i * self.dim..(i + 1) * self.dim],
        )
    }

    /// Pre-normalized vector for one id.
    pub fn vector(&self, id: &str) -> Option<&[f64]> {
        self.by_id
            .get(id)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn study_of(&self, id: &str) -> Option<&str> {
        self.by_id.get(id).map(|&i| self.study_ids[i].as_str())
    }

    /// Exact top-k by cosine: scores non-increasing, ties broken by
    /// ascending id. Entries from `exclude_study` are dropped before
    /// ranking.
    pub fn knn(
        &self,
        query: &[f64],
        k: usize,
        exclude_study: Option<&str>,
    ) -> Result<Vec<(String, f64)>, DbError> {
        if query.len() != self.dim {
            return Err(DbError::DimMismatch {
                query: query.len(),
                index: self.dim,
            });
        }
        let mut q = query.to_vec();
        if !embed::normalize_in_place(&mut q) {
            return Err(DbError::ZeroQuery);
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .filter(|&i| exclude_study != Some(self.study_ids[i].as_str()))
            .map(|i| (i, embed::dot(&q, &self.data[i * self.dim..(i + 1) * self.dim])))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| self.ids[a.0].cmp(&self.ids[b.0]))
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(i, s)| (self.ids[i].clone(), s))
            .collect())
    }
}

/// Retrieval space selector for [`SentenceDB::knn`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Text,
    Image,
}

/// Per-organ aggregates over the database content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganStats {
    pub sentences: usize,
    pub unique_studies: usize,
    pub avg_sentences_per_study: f64,
    pub avg_words_per_sentence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseStats {
    pub per_organ: BTreeMap<Organ, OrganStats>,
    pub total_sentences: usize,
    pub excluded_other: usize,
}

/// The frozen database: all sentence records, per-organ text and image
/// cosine indices, and the study/organ to sentence-id map.
///
/// Immutable after build; queries may run concurrently without locks.
#[derive(Debug, Clone)]
pub struct SentenceDB {
    records: Vec<SentenceRecord>,
    text_index: BTreeMap<Organ, CosineIndex>,
    image_index: BTreeMap<Organ, CosineIndex>,
    study_to_sentences: BTreeMap<(String, Organ), Vec<String>>,
    finding_map: OrganFindingMap,
    by_sentence_id: HashMap<String, usize>,
}

/// One study's already-organ-split paragraph text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyParagraph {
    pub study_id: String,
    pub text: String,
}

pub type OrganParagraphs = BTreeMap<Organ, Vec<StudyParagraph>>;

/// Split report text into sentence fragments at full stops and semicolons
/// followed by whitespace. Fragments keep their trailing punctuation;
/// fragments with no alphanumeric content are discarded.
pub fn split_sentences(paragraph: &str) -> Vec<String> {
    let chars: Vec<char> = paragraph.chars().collect();
    let mut fragments = Vec::new();
    let mut start = 0;
    for i in 0..chars.len() {
        let is_break = (chars[i] == '.' || chars[i] == ';')
            && chars.get(i + 1).is_some_and(|c| c.is_whitespace());
        if is_break {
            fragments.push(chars[start..=i].iter().collect::<String>());
            start = i + 1;
        }
    }
    if start < chars.len() {
        fragments.push(chars[start..].iter().collect::<String>());
    }
    fragments
        .into_iter()
        .map(|f| f.trim().to_string())
        .filter(|f| f.chars().any(|c| c.is_alphanumeric()))
        .collect()
}

/// Canonical sentence id: `<study_id>:<organ>:<position>` where position
/// is the 0-based index within that study-organ paragraph after splitting.
pub fn sentence_id(study_id: &str, organ: Organ, position: usize) -> String {
    format!("{study_id}:{organ}:{position}")
}

/// Build the frozen database. Every sentence inherits its study's positive
/// findings restricted to its organ's finding group; studies absent from
/// the label table get empty finding sets. Embedding ids that resolve to
/// no sentence (or image ids to no study) are a build error listing the
/// offenders.
pub fn build_database(
    paragraphs: &OrganParagraphs,
    sentence_embeddings: &EmbeddingMatrix,
    image_embeddings: &BTreeMap<Organ, EmbeddingMatrix>,
    labels: &LabelTable,
    finding_map: OrganFindingMap,
) -> Result<SentenceDB, DbError> {
    let mut records = Vec::new();
    let mut study_to_sentences: BTreeMap<(String, Organ), Vec<String>> = BTreeMap::new();
    let mut known_sentence_ids = HashSet::new();
    let mut known_studies = HashSet::new();

    for (&organ, studies) in paragraphs {
        for p in studies {
            known_studies.insert(p.study_id.clone());
            let positives: HashSet<String> = labels
                .positive_findings(&p.study_id)
                .unwrap_or_default()
                .into_iter()
                .collect();
            let organ_findings: Vec<String> = finding_map
                .findings_for(organ)
                .iter()
                .filter(|f| positives.contains(*f))
                .cloned()
                .collect();
            for (pos, text) in split_sentences(&p.text).into_iter().enumerate() {
                let id = sentence_id(&p.study_id, organ, pos);
                known_sentence_ids.insert(id.clone());
                study_to_sentences
                    .entry((p.study_id.clone(), organ))
                    .or_default()
                    .push(id.clone());
                records.push(SentenceRecord {
                    sentence_id: id,
                    study_id: p.study_id.clone(),
                    organ,
                    text,
                    findings: organ_findings.clone(),
                    has_embedding: false,
                });
            }
        }
    }

    // Reject embedding ids that do not resolve.
    let mut offenders: Vec<String> = sentence_embeddings
        .ids()
        .iter()
        .filter(|id| !known_sentence_ids.contains(*id))
        .cloned()
        .collect();
    if !offenders.is_empty() {
        offenders.sort();
        return Err(DbError::DanglingIds {
            kind: "sentence embedding",
            offenders,
        });
    }
    let mut image_offenders: Vec<String> = image_embeddings
        .values()
        .flat_map(|m| m.ids())
        .filter(|id| !known_studies.contains(*id))
        .cloned()
        .collect();
    if !image_offenders.is_empty() {
        image_offenders.sort();
        image_offenders.dedup();
        return Err(DbError::DanglingIds {
            kind: "image embedding",
            offenders: image_offenders,
        });
    }

    let embedded: HashSet<&str> = sentence_embeddings.ids().iter().map(String::as_str).collect();
    for r in &mut records {
        r.has_embedding = embedded.contains(r.sentence_id.as_str());
    }

    // Freeze per-organ text indices over embedded, non-other records.
    let mut text_index = BTreeMap::new();
    for &organ in &Organ::RETRIEVAL {
        let entries: Vec<(String, String, Vec<f64>)> = records
            .iter()
            .filter(|r| r.organ == organ && r.has_embedding)
            .map(|r| {
                let vec = sentence_embeddings
                    .row_by_id(&r.sentence_id)
                    .expect("has_embedding implies presence")
                    .to_vec();
                (r.sentence_id.clone(), r.study_id.clone(), vec)
            })
            .collect();
        text_index.insert(organ, CosineIndex::build(sentence_embeddings.dim(), entries));
    }

    let mut image_index = BTreeMap::new();
    for (&organ, matrix) in image_embeddings {
        if organ == Organ::Other {
            continue;
        }
        let entries: Vec<(String, String, Vec<f64>)> = matrix
            .iter_rows()
            .map(|(id, row)| (id.to_string(), id.to_string(), row.to_vec()))
            .collect();
        image_index.insert(organ, CosineIndex::build(matrix.dim(), entries));
    }

    let by_sentence_id = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.sentence_id.clone(), i))
        .collect();

    Ok(SentenceDB {
        records,
        text_index,
        image_index,
        study_to_sentences,
        finding_map,
        by_sentence_id,
    })
}

impl SentenceDB {
    pub fn records(&self) -> &[SentenceRecord] {
        &self.records
    }

    pub fn record(&self, sentence_id: &str) -> Option<&SentenceRecord> {
        self.by_sentence_id.get(sentence_id).map(|&i| &self.records[i])
    }

    pub fn finding_map(&self) -> &OrganFindingMap {
        &self.finding_map
    }

    pub fn text_index(&self, organ: Organ) -> Option<&CosineIndex> {
        self.text_index.get(&organ)
    }

    pub fn image_index(&self, organ: Organ) -> Option<&CosineIndex> {
        self.image_index.get(&organ)
    }

    /// Dimension of the text embedding space, if any text index exists.
    pub fn text_dim(&self) -> Option<usize> {
        self.text_index.values().next().map(CosineIndex::dim)
    }

    pub fn image_dim(&self) -> Option<usize> {
        self.image_index.values().next().map(CosineIndex::dim)
    }

    /// Sentence ids of one study-organ section, in report order.
    pub fn sentences_of(&self, study_id: &str, organ: Organ) -> &[String] {
        self.study_to_sentences
            .get(&(study_id.to_string(), organ))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn study_ids(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.study_id.clone()).collect()
    }

    /// A study's organ-restricted positive label set per the database's
    /// finding map.
    pub fn study_label_set(
        &self,
        labels: &LabelTable,
        study_id: &str,
        organ: Organ,
    ) -> BTreeSet<String> {
        let positives: HashSet<String> = labels
            .positive_findings(study_id)
            .unwrap_or_default()
            .into_iter()
            .collect();
        self.finding_map
            .findings_for(organ)
            .iter()
            .filter(|f| positives.contains(*f))
            .cloned()
            .collect()
    }

    pub fn knn(
        &self,
        organ: Organ,
        space: Space,
        query: &[f64],
        k: usize,
        exclude_study: Option<&str>,
    ) -> Result<Vec<(String, f64)>, DbError> {
        let index = match space {
            Space::Text => self.text_index.get(&organ).ok_or(DbError::MissingIndex {
                organ,
                space: "text",
            })?,
            Space::Image => self.image_index.get(&organ).ok_or(DbError::MissingIndex {
                organ,
                space: "image",
            })?,
        };
        index.knn(query, k, exclude_study)
    }
}

/// Per-organ aggregates. Sentence and word counts cover every record of
/// that organ; `excluded_other` counts the records kept out of the
/// retrieval indices.
pub fn db_stats(db: &SentenceDB) -> DatabaseStats {
    let mut per_organ = BTreeMap::new();
    let mut total = 0usize;
    let mut excluded_other = 0usize;
    for &organ in &Organ::RETRIEVAL {
        let mut sentences = 0usize;
        let mut words = 0usize;
        let mut studies = BTreeSet::new();
        for r in db.records.iter().filter(|r| r.organ == organ) {
            sentences += 1;
            words += r.text.split_whitespace().count();
            studies.insert(r.study_id.as_str());
        }
        total += sentences;
        let unique_studies = studies.len();
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
    excluded_other += db
        .records
        .iter()
        .filter(|r| r.organ == Organ::Other)
        .count();
    DatabaseStats {
        per_organ,
        total_sentences: total + excluded_other,
        excluded_other,
    }
}

/// Write a database directory: `sentences.jsonl`, per-organ AEMB index
/// files under `text/` and `image/`, the finding map, and stats.
pub fn save_database(db: &SentenceDB, dir: &Path) -> Result<(), DbError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let sentences_path = dir.join("sentences.jsonl");
    let mut out = BufWriter::new(File::create(&sentences_path).map_err(|e| io_err(&sentences_path, e))?);
    for r in &db.records {
        let line = serde_json::to_string(r).map_err(|e| json_err(&sentences_path, e))?;
        writeln!(out, "{line}").map_err(|e| io_err(&sentences_path, e))?;
    }
    out.flush().map_err(|e| io_err(&sentences_path, e))?;

    for (sub, indices) in [("text", &db.text_index), ("image", &db.image_index)] {
        let subdir = dir.join(sub);
        std::fs::create_dir_all(&subdir).map_err(|e| io_err(&subdir, e))?;
        for (organ, index) in indices {
            let path = subdir.join(format!("{organ}.aemb"));
            let m = EmbeddingMatrix::new(index.ids.to_vec(), index.dim, index.data.clone())?;
            embed::save_embeddings(&m, &path)?;
            // Text entries need their study mapping; image entries are
            // keyed by study id already.
            if sub == "text" {
                let map_path = subdir.join(format!("{organ}.studies"));
                let mut f = BufWriter::new(File::create(&map_path).map_err(|e| io_err(&map_path, e))?);
                for s in &index.study_ids {
                    writeln!(f, "{s}").map_err(|e| io_err(&map_path, e))?;
                }
                f.flush().map_err(|e| io_err(&map_path, e))?;
            }
        }
    }

    db.finding_map.save(&dir.join("finding_map.json"))?;
    let stats_path = dir.join("stats.json");
    let file = BufWriter::new(File::create(&stats_path).map_err(|e| io_err(&stats_path, e))?);
    serde_json::to_writer_pretty(file, &db_stats(db)).map_err(|e| json_err(&stats_path, e))?;
    Ok(())
}

/// Write per-organ paragraph files: `<dir>/<organ>.jsonl`, one
/// `{study_id, text}` record per line.
pub fn save_paragraphs(paragraphs: &OrganParagraphs, dir: &Path) -> Result<(), DbError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (organ, studies) in paragraphs {
        let path = dir.join(format!("{organ}.jsonl"));
        let mut out = BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
        for p in studies {
            let line = serde_json::to_string(p).map_err(|e| json_err(&path, e))?;
            writeln!(out, "{line}").map_err(|e| io_err(&path, e))?;
        }
        out.flush().map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Load every `<organ>.jsonl` present in a paragraphs directory.
pub fn load_paragraphs(dir: &Path) -> Result<OrganParagraphs, DbError> {
    let mut paragraphs = OrganParagraphs::new();
    for organ in [
        Organ::Lung,
        Organ::Heart,
        Organ::Esophagus,
        Organ::Aorta,
        Organ::Other,
    ] {
        let path = dir.join(format!("{organ}.jsonl"));
        if !path.exists() {
            continue;
        }
        let file = BufReader::new(File::open(&path).map_err(|e| io_err(&path, e))?);
        let mut studies = Vec::new();
        for line in file.lines() {
            let line = line.map_err(|e| io_err(&path, e))?;
            if !line.is_empty() {
                studies.push(serde_json::from_str(&line).map_err(|e| json_err(&path, e))?);
            }
        }
        paragraphs.insert(organ, studies);
    }
    Ok(paragraphs)
}

/// Write per-organ image embedding files `<dir>/<organ>.aemb`.
pub fn save_image_embeddings(
    images: &BTreeMap<Organ, EmbeddingMatrix>,
    dir: &Path,
) -> Result<(), DbError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (organ, matrix) in images {
        embed::save_embeddings(matrix, &dir.join(format!("{organ}.aemb")))?;
    }
    Ok(())
}

/// Load every per-organ image embedding file present in a directory.
pub fn load_image_embeddings(dir: &Path) -> Result<BTreeMap<Organ, EmbeddingMatrix>, DbError> {
    let mut images = BTreeMap::new();
    for &organ in &Organ::RETRIEVAL {
        let path = dir.join(format!("{organ}.aemb"));
        if path.exists() {
            images.insert(organ, embed::load_embeddings(&path)?);
        }
    }
    Ok(images)
}

/// Load a database directory written by [`save_database`]. Index vectors
/// are used exactly as stored (they were normalized before saving).
pub fn load_database(dir: &Path) -> Result<SentenceDB, DbError> {
    let sentences_path = dir.join("sentences.jsonl");
    let file = BufReader::new(File::open(&sentences_path).map_err(|e| io_err(&sentences_path, e))?);
    let mut records = Vec::new();
    for line in file.lines() {
        let line = line.map_err(|e| io_err(&sentences_path, e))?;
        if line.is_empty() {
            continue;
        }
        let r: SentenceRecord =
            serde_json::from_str(&line).map_err(|e| json_err(&sentences_path, e))?;
        records.push(r);
    }

    let mut study_to_sentences: BTreeMap<(String, Organ), Vec<String>> = BTreeMap::new();
    for r in &records {
        study_to_sentences
            .entry((r.study_id.clone(), r.organ))
            .or_default()
            .push(r.sentence_id.clone());
    }

    let load_index = |sub: &str, organ: Organ| -> Result<Option<CosineIndex>, DbError> {
        let path = dir.join(sub).join(format!("{organ}.aemb"));
        if !path.exists() {
            return Ok(None);
        }
        let m = embed::load_embeddings(&path)?;
        let study_ids: Vec<String> = if sub == "text" {
            let map_path = dir.join(sub).join(format!("{organ}.studies"));
            let f = BufReader::new(File::open(&map_path).map_err(|e| io_err(&map_path, e))?);
            f.lines()
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| io_err(&map_path, e))?
                .into_iter()
                .filter(|l| !l.is_empty())
                .collect()
        } else {
            m.ids().to_vec()
        };
        if study_ids.len() != m.n_rows() {
            return Err(DbError::DanglingIds {
                kind: "index study mapping",
                offenders: vec![format!("{sub}/{organ}")],
            });
        }
        let by_id = m
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(Some(CosineIndex {
            dim: m.dim(),
            ids: m.ids().to_vec(),
            study_ids,
            data: m.data().to_vec(),
            by_id,
        }))
    };

    let mut text_index = BTreeMap::new();
    let mut image_index = BTreeMap::new();
    for &organ in &Organ::RETRIEVAL {
        if let Some(ix) = load_index("text", organ)? {
            text_index.insert(organ, ix);
        }
        if let Some(ix) = load_index("image", organ)? {
            image_index.insert(organ, ix);
        }
    }

    let finding_map = OrganFindingMap::load(&dir.join("finding_map.json"))?;
    let by_sentence_id = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.sentence_id.clone(), i))
        .collect();

    Ok(SentenceDB {
        records,
        text_index,
        image_index,
        study_to_sentences,
        finding_map,
        by_sentence_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_keeps_trailing_punctuation() {
        assert_eq!(
            split_sentences("No effusion. Heart normal; aorta calcified."),
            vec!["No effusion.", "Heart normal;", "aorta calcified."]
        );
    }

    #[test]
    fn split_empty_and_punctuation_only() {
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("...").is_empty());
        assert!(split_sentences(". ; .").is_empty());
    }

    #[test]
    fn split_without_trailing_whitespace_keeps_fragment_whole() {
        // "3.5" has no whitespace after the dot, so it must not split.
        assert_eq!(split_sentences("Nodule measures 3.5 cm."), vec!["Nodule measures 3.5 cm."]);
    }

    fn tiny_corpus() -> (
        OrganParagraphs,
        EmbeddingMatrix,
        BTreeMap<Organ, EmbeddingMatrix>,
        LabelTable,
    ) {
        let mut paragraphs = OrganParagraphs::new();
        paragraphs.insert(
            Organ::Lung,
            vec![StudyParagraph {
                study_id: "s1".into(),
                text: "Severe lung opacity seen.".into(),
            }],
        );
        let sent = EmbeddingMatrix::new(
            vec![sentence_id("s1", Organ::Lung, 0)],
            3,
            vec![1.0, 0.0, 0.0],
        )
        .unwrap();
        let mut images = BTreeMap::new();
        images.insert(
            Organ::Lung,
            EmbeddingMatrix::new(vec!["s1".into()], 3, vec![0.0, 1.0, 0.0]).unwrap(),
        );
        let labels = LabelTable::new(
            vec!["s1".into()],
            vec!["lung_opacity".into(), "cardiomegaly".into()],
            vec![1, 0],
        )
        .unwrap();
        (paragraphs, sent, images, labels)
    }

    #[test]
    fn minimal_build_has_one_lung_entry() {
        let (p, s, i, l) = tiny_corpus();
        let db = build_database(&p, &s, &i, &l, OrganFindingMap::chest_ct_default()).unwrap();
        assert_eq!(db.text_index(Organ::Lung).unwrap().len(), 1);
        assert!(db.text_index(Organ::Heart).unwrap().is_empty());
        assert!(db.text_index(Organ::Aorta).unwrap().is_empty());
        let r = &db.records()[0];
        assert_eq!(r.findings, vec!["lung_opacity"]);
        assert!(r.has_embedding);
    }

    #[test]
    fn dangling_sentence_embedding_is_a_build_error() {
        let (p, _, i, l) = tiny_corpus();
        let bad = EmbeddingMatrix::new(vec!["s1:lung:7".into()], 3, vec![1.0, 0.0, 0.0]).unwrap();
        match build_database(&p, &bad, &i, &l, OrganFindingMap::chest_ct_default()) {
            Err(DbError::DanglingIds { offenders, .. }) => {
                assert_eq!(offenders, vec!["s1:lung:7"]);
            }
            other => panic!("expected DanglingIds, got {other:?}"),
        }
    }

    #[test]
    fn other_organ_records_are_never_indexed() {
        let mut paragraphs = OrganParagraphs::new();
        paragraphs.insert(
            Organ::Other,
            vec![StudyParagraph {
                study_id: "s1".into(),
                text: "Lymphadenopathy noted.".into(),
            }],
        );
        let sent = EmbeddingMatrix::new(
            vec![sentence_id("s1", Organ::Other, 0)],
            2,
            vec![1.0, 0.0],
        )
        .unwrap();
        let db = build_database(
            &paragraphs,
            &sent,
            &BTreeMap::new(),
            &LabelTable::new(vec!["s1".into()], vec![], vec![]).unwrap(),
            OrganFindingMap::chest_ct_default(),
        )
        .unwrap();
        assert_eq!(db.records().len(), 1);
        for &organ in &Organ::RETRIEVAL {
            assert!(db.text_index(organ).unwrap().is_empty());
        }
        let stats = db_stats(&db);
        assert_eq!(stats.excluded_other, 1);
        assert_eq!(stats.total_sentences, 1);
    }

    #[test]
    fn stats_of_empty_db_are_all_zeros() {
        let db = build_database(
            &OrganParagraphs::new(),
            &EmbeddingMatrix::new(vec![], 2, vec![]).unwrap(),
            &BTreeMap::new(),
            &LabelTable::new(vec![], vec![], vec![]).unwrap(),
            OrganFindingMap::chest_ct_default(),
        )
        .unwrap();
        let stats = db_stats(&db);
        assert_eq!(stats.total_sentences, 0);
        assert_eq!(stats.excluded_other, 0);
        for s in stats.per_organ.values() {
            assert_eq!(s.sentences, 0);
            assert_eq!(s.unique_studies, 0);
            assert_eq!(s.avg_sentences_per_study, 0.0);
            assert_eq!(s.avg_words_per_sentence, 0.0);
        }
    }

    #[test]
    fn stats_two_studies_three_sentences_each() {
        let mut paragraphs = OrganParagraphs::new();
        paragraphs.insert(
            Organ::Lung,
            vec![
                StudyParagraph {
                    study_id: "s1".into(),
                    text: "One a. Two b. Three c.".into(),
                },
                StudyParagraph {
                    study_id: "s2".into(),
                    text: "Four d. Five e. Six f.".into(),
                },
            ],
        );
        let db = build_database(
            &paragraphs,
            &EmbeddingMatrix::new(vec![], 2, vec![]).unwrap(),
            &BTreeMap::new(),
            &LabelTable::new(vec![], vec![], vec![]).unwrap(),
            OrganFindingMap::chest_ct_default(),
        )
        .unwrap();
        let stats = db_stats(&db);
        let lung = &stats.per_organ[&Organ::Lung];
        assert_eq!(lung.sentences, 6);
        assert_eq!(lung.unique_studies, 2);
        assert_eq!(lung.avg_sentences_per_study, 3.0);
        assert_eq!(lung.avg_words_per_sentence, 2.0);
    }

    fn random_index_db(n: usize, dim: usize, seed: u64) -> SentenceDB {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut paragraphs = OrganParagraphs::new();
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let studies: Vec<StudyParagraph> = (0..n)
            .map(|i| {
                let study = format!("s{i:03}");
                ids.push(sentence_id(&study, Organ::Lung, 0));
                for _ in 0..dim {
                    data.push(rng.gen_range(-1.0..1.0));
                }
                StudyParagraph {
                    study_id: study,
                    text: "One sentence here.".into(),
                }
            })
            .collect();
        paragraphs.insert(Organ::Lung, studies);
        let sent = EmbeddingMatrix::new(ids, dim, data).unwrap();
        build_database(
            &paragraphs,
            &sent,
            &BTreeMap::new(),
            &LabelTable::new(vec![], vec![], vec![]).unwrap(),
            OrganFindingMap::chest_ct_default(),
        )
        .unwrap()
    }

    #[test]
    fn knn_identity_query_ranks_itself_first() {
        let db = random_index_db(50, 8, 3);
        let index = db.text_index(Organ::Lung).unwrap();
        let target = index.ids()[17].clone();
        let q = index.vector(&target).unwrap().to_vec();
        let hits = db.knn(Organ::Lung, Space::Text, &q, 5, None).unwrap();
        assert_eq!(hits[0].0, target);
        assert!((hits[0].1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn knn_matches_brute_force_scan() {
        let db = random_index_db(100, 6, 9);
        let index = db.text_index(Organ::Lung).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let mut q: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hits = db.knn(Organ::Lung, Space::Text, &q, 10, None).unwrap();
            // Oracle: normalize, score every entry, sort.
            embed::normalize_in_place(&mut q);
            let mut all: Vec<(String, f64)> = (0..index.len())
                .map(|i| {
                    let (id, _, v) = index.entry(i);
                    (id.to_string(), embed::dot(&q, v))
                })
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            all.truncate(10);
            assert_eq!(hits, all);
        }
    }

    #[test]
    fn knn_saturates_and_excludes() {
        let db = random_index_db(5, 4, 21);
        let q = vec![1.0, 0.0, 0.0, 0.0];
        let hits = db.knn(Organ::Lung, Space::Text, &q, 100, None).unwrap();
        assert_eq!(hits.len(), 5);
        let excluded = db
            .knn(Organ::Lung, Space::Text, &q, 100, Some("s002"))
            .unwrap();
        assert_eq!(excluded.len(), 4);
        assert!(excluded.iter().all(|(id, _)| !id.starts_with("s002")));
    }

    #[test]
    fn knn_tie_break_is_ascending_id() {
        let mut paragraphs = OrganParagraphs::new();
        paragraphs.insert(
            Organ::Heart,
            vec![
                StudyParagraph {
                    study_id: "a".into(),
                    text: "Heart normal.".into(),
                },
                StudyParagraph {
                    study_id: "b".into(),
                    text: "Heart enlarged.".into(),
                },
            ],
        );
        let sent = EmbeddingMatrix::new(
            vec![
                sentence_id("b", Organ::Heart, 0),
                sentence_id("a", Organ::Heart, 0),
            ],
            2,
            vec![1.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let db = build_database(
            &paragraphs,
            &sent,
            &BTreeMap::new(),
            &LabelTable::new(vec![], vec![], vec![]).unwrap(),
            OrganFindingMap::chest_ct_default(),
        )
        .unwrap();
        let hits = db
            .knn(Organ::Heart, Space::Text, &[1.0, 0.0], 2, None)
            .unwrap();
        assert_eq!(hits[0].0, "a:heart:0");
        assert_eq!(hits[1].0, "b:heart:0");
    }

    #[test]
    fn save_load_round_trip_preserves_everything() {
        let db = random_index_db(20, 5, 31);
        let dir = tempfile::tempdir().unwrap();
        save_database(&db, dir.path()).unwrap();
        let loaded = load_database(dir.path()).unwrap();
        assert_eq!(loaded.records(), db.records());
        assert_eq!(db_stats(&loaded), db_stats(&db));
        assert_eq!(
            loaded.text_index(Organ::Lung).unwrap().ids(),
            db.text_index(Organ::Lung).unwrap().ids()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn knn_full_size_returns_permutation(seed in any::<u64>()) {
            let db = random_index_db(30, 4, seed);
            let index = db.text_index(Organ::Lung).unwrap();
            let q = vec![0.3, -0.2, 0.9, 0.1];
            let hits = db.knn(Organ::Lung, Space::Text, &q, 30, None).unwrap();
            let mut got: Vec<&str> = hits.iter().map(|(id, _)| id.as_str()).collect();
            got.sort();
            let mut want: Vec<&str> = index.ids().iter().map(String::as_str).collect();
            want.sort();
            prop_assert_eq!(got, want);
            for w in hits.windows(2) {
                prop_assert!(w[0].1 >= w[1].1);
            }
        }

        #[test]
        fn rebuild_is_bit_deterministic(seed in any::<u64>()) {
            let a = random_index_db(15, 4, seed);
            let b = random_index_db(15, 4, seed);
            prop_assert_eq!(a.records(), b.records());
            prop_assert_eq!(
                a.text_index(Organ::Lung).unwrap(),
                b.text_index(Organ::Lung).unwrap()
            );
        }

        #[test]
        fn indexed_sentences_match_their_organ(seed in any::<u64>()) {
            let db = random_index_db(10, 3, seed);
            for &organ in &Organ::RETRIEVAL {
                let index = db.text_index(organ).unwrap();
                for id in index.ids() {
                    let rec = db.record(id).unwrap();
                    prop_assert_eq!(rec.organ, organ);
                    prop_assert!(rec.organ != Organ::Other);
                }
            }
        }
    }
}
