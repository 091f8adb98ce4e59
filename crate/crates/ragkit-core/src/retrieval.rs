//! Re-ranking and retrieval strategies: BLEU-2 overlap, greedy MMR
//! selection, two-stage and text-to-text retrieval pipelines, and
//! retrieval-quality evaluation (Jaccard@k plus its label-oracle upper
//! bound).

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{self, LabelTable};
use crate::sentencedb::{DbError, Organ, SentenceDB, Space};
use crate::util;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Db(#[from] DbError),
    #[error("no {space} embedding for {id}")]
    MissingEmbedding { id: String, space: &'static str },
    #[error("no eligible neighbours for query {0}")]
    EmptyNeighborhood(String),
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error("no image query vector configured for organ {0}")]
    MissingImageQuery(Organ),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    TwoStage,
    Text2Text,
}

/// Retrieval hyperparameters. `k_coarse` bounds the image-ranked study
/// pool for two-stage retrieval; `k_fine` is the MMR selection size;
/// `text_pool_depth` caps the text-to-text candidate pool (running MMR
/// over an entire organ index would be wasted work).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k_coarse: usize,
    pub k_fine: usize,
    pub lambda: f64,
    pub strategy: Strategy,
    pub text_pool_depth: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_coarse: 20,
            k_fine: 3,
            lambda: 0.7,
            strategy: Strategy::TwoStage,
            text_pool_depth: 50,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(RetrievalError::InvalidConfig(format!(
                "lambda must lie in [0,1], got {}",
                self.lambda
            )));
        }
        if self.k_fine == 0 {
            return Err(RetrievalError::InvalidConfig("k_fine must be >= 1".into()));
        }
        if self.strategy == Strategy::TwoStage && self.k_fine > self.k_coarse {
            return Err(RetrievalError::InvalidConfig(format!(
                "k_fine ({}) must not exceed k_coarse ({})",
                self.k_fine, self.k_coarse
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSentence {
    pub sentence_id: String,
    pub study_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StageTimings {
    pub coarse: Duration,
    pub fine: Duration,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub selected: Vec<SelectedSentence>,
    pub mmr_scores: Vec<f64>,
    pub candidate_pool_size: usize,
    /// In-memory only: wall-clock timings would break byte-stable outputs.
    #[serde(skip)]
    pub stage_timings: StageTimings,
}

impl RetrievalResult {
    fn empty() -> Self {
        Self {
            selected: Vec::new(),
            mmr_scores: Vec::new(),
            candidate_pool_size: 0,
            stage_timings: StageTimings::default(),
        }
    }

    pub fn selected_texts(&self) -> Vec<String> {
        self.selected.iter().map(|s| s.text.clone()).collect()
    }

    pub fn selected_ids(&self) -> Vec<String> {
        self.selected.iter().map(|s| s.sentence_id.clone()).collect()
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn modified_precision(candidate: &[String], reference: &[String], n: usize) -> f64 {
    if candidate.len() < n {
        return 0.0;
    }
    let mut ref_counts: std::collections::HashMap<&[String], usize> = std::collections::HashMap::new();
    if reference.len() >= n {
        for gram in reference.windows(n) {
            *ref_counts.entry(gram).or_insert(0) += 1;
        }
    }
    let mut cand_counts: std::collections::HashMap<&[String], usize> = std::collections::HashMap::new();
    for gram in candidate.windows(n) {
        *cand_counts.entry(gram).or_insert(0) += 1;
    }
    let total = candidate.len() - n + 1;
    let clipped: usize = cand_counts
        .iter()
        .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    clipped as f64 / total as f64
}

/// BLEU-2: geometric mean of modified 1-gram and 2-gram precisions times
/// the brevity penalty, after lowercasing and whitespace tokenization.
///
/// No smoothing: a zero n-gram precision zeroes the score, so fully novel
/// sentences count as maximally diverse in the MMR penalty. Single-token
/// candidates are scored on the 1-gram order alone (they have no bigrams
/// to assert).
pub fn bleu2(candidate: &str, reference: &str) -> f64 {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() {
        return 0.0;
    }
    let max_order = cand.len().min(2);
    let mut log_sum = 0.0;
    for n in 1..=max_order {
        let p = modified_precision(&cand, &refr, n);
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let geo_mean = (log_sum / max_order as f64).exp();
    let bp = if cand.len() > refr.len() {
        1.0
    } else {
        (1.0 - refr.len() as f64 / cand.len() as f64).exp()
    };
    geo_mean * bp
}

/// Greedy maximal-marginal-relevance selection.
///
/// The first pick is the plain similarity argmax; every later pick
/// maximizes `lambda * sim(d) - (1 - lambda) * max_{s in S} bleu2(d, s)`
/// over the unselected pool. All ties break toward the lower candidate
/// index. Returns `(candidate_index, mmr_score_at_selection)` pairs, at
/// most `min(k, len)` of them.
pub fn mmr_select<S: AsRef<str>>(
    candidates: &[S],
    sim_scores: &[f64],
    lambda: f64,
    k: usize,
) -> Vec<(usize, f64)> {
    assert_eq!(
        candidates.len(),
        sim_scores.len(),
        "sim_scores must align with candidates"
    );
    let n = candidates.len();
    if n == 0 || k == 0 {
        return Vec::new();
    }

    let mut selected: Vec<(usize, f64)> = Vec::with_capacity(k.min(n));
    let mut remaining: Vec<usize> = (0..n).collect();
    // Running max BLEU-2 of each candidate against the selected set.
    let mut max_penalty = vec![0.0f64; n];

    while selected.len() < k && !remaining.is_empty() {
        let mut best_slot = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (slot, &i) in remaining.iter().enumerate() {
            let score = if selected.is_empty() {
                // First pick ranks by similarity alone.
                sim_scores[i]
            } else {
                lambda * sim_scores[i] - (1.0 - lambda) * max_penalty[i]
            };
            if score > best_score {
                best_score = score;
                best_slot = slot;
            }
        }
        let chosen = remaining.remove(best_slot);
        let recorded = lambda * sim_scores[chosen] - (1.0 - lambda) * max_penalty[chosen];
        selected.push((chosen, recorded));
        for &i in &remaining {
            let b = bleu2(candidates[i].as_ref(), candidates[chosen].as_ref());
            if b > max_penalty[i] {
                max_penalty[i] = b;
            }
        }
    }
    selected
}

/// Two-stage retrieval: rank studies by image cosine, pool all their
/// same-organ sentences, score the pool against the text query embedding,
/// and MMR-select `k_fine`.
///
/// Pool order is deterministic: image-ranking order, then sentence
/// position within each study section.
pub fn two_stage_retrieve(
    db: &SentenceDB,
    organ: Organ,
    image_query: &[f64],
    text_query_emb: &[f64],
    cfg: &RetrievalConfig,
    exclude_study: Option<&str>,
) -> Result<RetrievalResult, RetrievalError> {
    if cfg.strategy != Strategy::TwoStage {
        return Err(RetrievalError::InvalidConfig(
            "two_stage_retrieve requires the TwoStage strategy".into(),
        ));
    }
    cfg.validate()?;

    let coarse_start = Instant::now();
    let nearest = db.knn(organ, Space::Image, image_query, cfg.k_coarse, exclude_study)?;
    let text_index = db
        .text_index(organ)
        .ok_or(DbError::MissingIndex {
            organ,
            space: "text",
        })?;
    let mut query = text_query_emb.to_vec();
    if !embed::normalize_in_place(&mut query) {
        return Err(DbError::ZeroQuery.into());
    }

    let mut pool: Vec<(String, String, f64)> = Vec::new();
    for (study_id, _) in &nearest {
        for sid in db.sentences_of(study_id, organ) {
            if let Some(vec) = text_index.vector(sid) {
                pool.push((sid.clone(), study_id.clone(), embed::dot(&query, vec)));
            }
        }
    }
    let coarse = coarse_start.elapsed();
    if pool.is_empty() {
        return Ok(RetrievalResult::empty());
    }

    let fine_start = Instant::now();
    let texts: Vec<&str> = pool
        .iter()
        .map(|(sid, _, _)| db.record(sid).expect("pooled id resolves").text.as_str())
        .collect();
    let sims: Vec<f64> = pool.iter().map(|(_, _, s)| *s).collect();
    let picks = mmr_select(&texts, &sims, cfg.lambda, cfg.k_fine);
    let fine = fine_start.elapsed();

    Ok(RetrievalResult {
        selected: picks
            .iter()
            .map(|&(i, _)| SelectedSentence {
                sentence_id: pool[i].0.clone(),
                study_id: pool[i].1.clone(),
                text: texts[i].to_string(),
            })
            .collect(),
        mmr_scores: picks.iter().map(|&(_, s)| s).collect(),
        candidate_pool_size: pool.len(),
        stage_timings: StageTimings { coarse, fine },
    })
}

/// Text-to-text retrieval: take the deepest of `k_coarse` and
/// `text_pool_depth` nearest sentences over the full organ index, then
/// MMR-select `k_fine`.
pub fn text2text_retrieve(
    db: &SentenceDB,
    organ: Organ,
    text_query_emb: &[f64],
    cfg: &RetrievalConfig,
    exclude_study: Option<&str>,
) -> Result<RetrievalResult, RetrievalError> {
    if cfg.strategy != Strategy::Text2Text {
        return Err(RetrievalError::InvalidConfig(
            "text2text_retrieve requires the Text2Text strategy".into(),
        ));
    }
    cfg.validate()?;

    let coarse_start = Instant::now();
    let depth = cfg.k_coarse.max(cfg.text_pool_depth);
    let hits = db.knn(organ, Space::Text, text_query_emb, depth, exclude_study)?;
    let coarse = coarse_start.elapsed();
    if hits.is_empty() {
        return Ok(RetrievalResult::empty());
    }

    let fine_start = Instant::now();
    let records: Vec<_> = hits
        .iter()
        .map(|(sid, _)| db.record(sid).expect("indexed id resolves"))
        .collect();
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let sims: Vec<f64> = hits.iter().map(|(_, s)| *s).collect();
    let picks = mmr_select(&texts, &sims, cfg.lambda, cfg.k_fine);
    let fine = fine_start.elapsed();

    Ok(RetrievalResult {
        selected: picks
            .iter()
            .map(|&(i, _)| SelectedSentence {
                sentence_id: records[i].sentence_id.clone(),
                study_id: records[i].study_id.clone(),
                text: texts[i].to_string(),
            })
            .collect(),
        mmr_scores: picks.iter().map(|&(_, s)| s).collect(),
        candidate_pool_size: hits.len(),
        stage_timings: StageTimings { coarse, fine },
    })
}

/// Intersection over union of two label sets. Two empty sets score 1.0:
/// a pair of finding-free studies is a perfect pathology match.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Img2Img,
    Img2Txt,
    Txt2Txt,
}

impl Modality {
    pub fn name(&self) -> &'static str {
        match self {
            Modality::Img2Img => "img2img",
            Modality::Img2Txt => "img2txt",
            Modality::Txt2Txt => "txt2txt",
        }
    }
}

/// Study-level text query: the normalized mean of the study's embedded
/// organ sentences.
fn study_text_query(db: &SentenceDB, study_id: &str, organ: Organ) -> Option<Vec<f64>> {
    let index = db.text_index(organ)?;
    let mut acc: Option<Vec<f64>> = None;
    let mut count = 0usize;
    for sid in db.sentences_of(study_id, organ) {
        if let Some(vec) = index.vector(sid) {
            match &mut acc {
                Some(a) => a.iter_mut().zip(vec).for_each(|(x, v)| *x += v),
                None => acc = Some(vec.to_vec()),
            }
            count += 1;
        }
    }
    let mut acc = acc?;
    acc.iter_mut().for_each(|x| *x /= count as f64);
    Some(acc)
}

/// Mean Jaccard between one query's organ-restricted label set and the
/// label sets of its top-k neighbours in the given cosine space. The
/// query's own study is excluded by default (leave-one-out).
pub fn jaccard_at_k(
    db: &SentenceDB,
    labels: &LabelTable,
    query_id: &str,
    organ: Organ,
    modality: Modality,
    k: usize,
    exclude_self: bool,
) -> Result<f64, RetrievalError> {
    let query_set = db.study_label_set(labels, query_id, organ);
    let exclude = if exclude_self { Some(query_id) } else { None };

    let neighbour_sets: Vec<BTreeSet<String>> = match modality {
        Modality::Img2Img => {
            let index = db.image_index(organ).ok_or(DbError::MissingIndex {
                organ,
                space: "image",
            })?;
            let q = index
                .vector(query_id)
                .ok_or_else(|| RetrievalError::MissingEmbedding {
                    id: query_id.to_string(),
                    space: "image",
                })?
                .to_vec();
            db.knn(organ, Space::Image, &q, k, exclude)?
                .into_iter()
                .map(|(study, _)| db.study_label_set(labels, &study, organ))
                .collect()
        }
        Modality::Img2Txt => {
            let index = db.image_index(organ).ok_or(DbError::MissingIndex {
                organ,
                space: "image",
            })?;
            let q = index
                .vector(query_id)
                .ok_or_else(|| RetrievalError::MissingEmbedding {
                    id: query_id.to_string(),
                    space: "image",
                })?
                .to_vec();
            db.knn(organ, Space::Text, &q, k, exclude)?
                .into_iter()
                .map(|(sid, _)| sentence_label_set(db, &sid))
                .collect()
        }
        Modality::Txt2Txt => {
            let q = study_text_query(db, query_id, organ).ok_or_else(|| {
                RetrievalError::MissingEmbedding {
                    id: query_id.to_string(),
                    space: "text",
                }
            })?;
            db.knn(organ, Space::Text, &q, k, exclude)?
                .into_iter()
                .map(|(sid, _)| sentence_label_set(db, &sid))
                .collect()
        }
    };

    if neighbour_sets.is_empty() {
        return Err(RetrievalError::EmptyNeighborhood(query_id.to_string()));
    }
    let sum: f64 = neighbour_sets.iter().map(|s| jaccard(&query_set, s)).sum();
    Ok(sum / neighbour_sets.len() as f64)
}

fn sentence_label_set(db: &SentenceDB, sentence_id: &str) -> BTreeSet<String> {
    db.record(sentence_id)
        .map(|r| r.findings.iter().cloned().collect())
        .unwrap_or_default()
}

/// Oracle retrieval quality: rank every retrievable candidate (indexed
/// studies and indexed sentences alike) by ground-truth label overlap with
/// the query, ties by id ascending, and average the top-k. By construction
/// this bounds the observed Jaccard@k of every modality over the same
/// database.
pub fn upper_bound_at_k(
    db: &SentenceDB,
    labels: &LabelTable,
    query_id: &str,
    organ: Organ,
    k: usize,
    exclude_self: bool,
) -> Result<f64, RetrievalError> {
    let query_set = db.study_label_set(labels, query_id, organ);
    let mut pool: Vec<(String, f64)> = Vec::new();

    if let Some(index) = db.image_index(organ) {
        for study in index.ids() {
            if exclude_self && study == query_id {
                continue;
            }
            let j = jaccard(&query_set, &db.study_label_set(labels, study, organ));
            pool.push((study.clone(), j));
        }
    }
    if let Some(index) = db.text_index(organ) {
        for sid in index.ids() {
            if exclude_self && index.study_of(sid) == Some(query_id) {
                continue;
            }
            pool.push((sid.clone(), jaccard(&query_set, &sentence_label_set(db, sid))));
        }
    }

    if pool.is_empty() {
        return Err(RetrievalError::EmptyNeighborhood(query_id.to_string()));
    }
    pool.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    pool.truncate(k);
    Ok(pool.iter().map(|(_, j)| j).sum::<f64>() / pool.len() as f64)
}

/// Maps drafted query text to a query embedding. Decoding and training
/// prep consume text queries; how those become vectors is pluggable since
/// text encoders are inputs to this toolkit, not part of it.
pub trait QueryEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Deterministic feature-hashing embedder: each lowercased token hashes to
/// a signed bucket. Token overlap then correlates with cosine similarity,
/// which is all the synthetic pipelines need.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl QueryEmbedder for HashEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for tok in text.to_lowercase().split_whitespace() {
            let h = util::derive_seed(self.seed, tok);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h & (1 << 63) == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        embed::normalize_in_place(&mut v);
        v
    }
}

/// A configured retrieval strategy the decode loop and training prep can
/// call with nothing but an organ and a drafted query sentence.
pub trait SentenceRetriever {
    fn retrieve(&self, organ: Organ, query_text: &str) -> Result<RetrievalResult, RetrievalError>;
    fn strategy_name(&self) -> &'static str;
}

/// Two-stage strategy bound to a database, per-organ image query vectors,
/// and a query embedder.
pub struct TwoStageRetriever<'a> {
    db: &'a SentenceDB,
    cfg: RetrievalConfig,
    embedder: Box<dyn QueryEmbedder>,
    image_queries: std::collections::BTreeMap<Organ, Vec<f64>>,
    exclude_study: Option<String>,
}

impl<'a> TwoStageRetriever<'a> {
    pub fn new(
        db: &'a SentenceDB,
        cfg: RetrievalConfig,
        embedder: Box<dyn QueryEmbedder>,
        image_queries: std::collections::BTreeMap<Organ, Vec<f64>>,
        exclude_study: Option<String>,
    ) -> Self {
        Self {
            db,
            cfg,
            embedder,
            image_queries,
            exclude_study,
        }
    }

    /// Use one study's own per-organ image embeddings as queries and
    /// exclude that study from results (leave-one-out over the training
    /// corpus).
    pub fn for_study(
        db: &'a SentenceDB,
        cfg: RetrievalConfig,
        embedder: Box<dyn QueryEmbedder>,
        study_id: &str,
    ) -> Self {
        let mut image_queries = std::collections::BTreeMap::new();
        for &organ in &Organ::RETRIEVAL {
            if let Some(index) = db.image_index(organ) {
                if let Some(vec) = index.vector(study_id) {
                    image_queries.insert(organ, vec.to_vec());
                }
            }
        }
        Self::new(db, cfg, embedder, image_queries, Some(study_id.to_string()))
    }
}

impl SentenceRetriever for TwoStageRetriever<'_> {
    fn retrieve(&self, organ: Organ, query_text: &str) -> Result<RetrievalResult, RetrievalError> {
        let image_query = self
            .image_queries
            .get(&organ)
            .ok_or(RetrievalError::MissingImageQuery(organ))?;
        let text_query = self.embedder.embed(query_text);
        two_stage_retrieve(
            self.db,
            organ,
            image_query,
            &text_query,
            &self.cfg,
            self.exclude_study.as_deref(),
        )
    }

    fn strategy_name(&self) -> &'static str {
        "twostage"
    }
}

/// Text-to-text strategy bound to a database and a query embedder.
pub struct Text2TextRetriever<'a> {
    db: &'a SentenceDB,
    cfg: RetrievalConfig,
    embedder: Box<dyn QueryEmbedder>,
    exclude_study: Option<String>,
}

impl<'a> Text2TextRetriever<'a> {
    pub fn new(
        db: &'a SentenceDB,
        cfg: RetrievalConfig,
        embedder: Box<dyn QueryEmbedder>,
        exclude_study: Option<String>,
    ) -> Self {
        Self {
            db,
            cfg,
            embedder,
            exclude_study,
        }
    }
}

impl SentenceRetriever for Text2TextRetriever<'_> {
    fn retrieve(&self, organ: Organ, query_text: &str) -> Result<RetrievalResult, RetrievalError> {
        let text_query = self.embedder.embed(query_text);
        text2text_retrieve(
            self.db,
            organ,
            &text_query,
            &self.cfg,
            self.exclude_study.as_deref(),
        )
    }

    fn strategy_name(&self) -> &'static str {
        "text2text"
    }
}
