//! Ranked retrieval over embeddings and the P@K / AP@K / mAP family.
//!
//! Queries are unseen-class sketches. The gallery holds unseen-class photos
//! (zero-shot) or every photo (generalized). Rankings sort by ascending
//! squared L2 distance, ties broken by ascending gallery id.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetItem, Domain, SplitSpec};
use crate::error::{Error, Result};
use crate::ndcore::{sq_euclidean, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    class_ids: Vec<usize>,
    domains: Vec<Domain>,
    embeddings: Matrix,
}

impl EmbeddingSet {
    pub fn new(
        ids: Vec<String>,
        class_ids: Vec<usize>,
        domains: Vec<Domain>,
        embeddings: Matrix,
    ) -> Result<Self> {
        let n = ids.len();
        if class_ids.len() != n || domains.len() != n || embeddings.rows() != n {
            return Err(Error::Shape(format!(
                "embedding set with {n} ids, {} classes, {} domains, {} rows",
                class_ids.len(),
                domains.len(),
                embeddings.rows()
            )));
        }
        Ok(EmbeddingSet {
            ids,
            class_ids,
            domains,
            embeddings,
        })
    }

    /// Embeds every item with `embed`.
    pub fn from_items<F>(items: &[DatasetItem], mut embed: F) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let rows = items
            .iter()
            .map(|i| embed(&i.features))
            .collect::<Result<Vec<_>>>()?;
        let embeddings = if rows.is_empty() {
            Matrix::zeros(0, 0)
        } else {
            Matrix::from_rows(&rows)?
        };
        Self::new(
            items.iter().map(|i| i.id.clone()).collect(),
            items.iter().map(|i| i.class_id).collect(),
            items.iter().map(|i| i.domain).collect(),
            embeddings,
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn class_id(&self, i: usize) -> usize {
        self.class_ids[i]
    }

    pub fn domain(&self, i: usize) -> Domain {
        self.domains[i]
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn filter(&self, mut keep: impl FnMut(usize) -> bool) -> EmbeddingSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        let data: Vec<f64> = idx.iter().flat_map(|&i| self.embedding(i).to_vec()).collect();
        EmbeddingSet {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            class_ids: idx.iter().map(|&i| self.class_ids[i]).collect(),
            domains: idx.iter().map(|&i| self.domains[i]).collect(),
            embeddings: Matrix::new(idx.len(), self.dim(), data).expect("rows copied whole"),
        }
    }

    /// Applies `f` to every embedding row (e.g. a rotation).
    pub fn map_embeddings(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<EmbeddingSet> {
        let rows: Vec<Vec<f64>> = (0..self.len()).map(|i| f(self.embedding(i))).collect();
        let embeddings = if rows.is_empty() {
            Matrix::zeros(0, 0)
        } else {
            Matrix::from_rows(&rows)?
        };
        Self::new(
            self.ids.clone(),
            self.class_ids.clone(),
            self.domains.clone(),
            embeddings,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GalleryMode {
    ZeroShot,
    Generalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApNormalizer {
    /// Divide by every relevant item in the gallery.
    TotalRelevant,
    /// Divide by `min(N, K)`.
    MinKRelevant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cutoff {
    All,
    At(usize),
}

impl Cutoff {
    fn limit(self, len: usize) -> usize {
        match self {
            Cutoff::All => len,
            Cutoff::At(k) => k.min(len),
        }
    }

    fn label(self) -> String {
        match self {
            Cutoff::All => "all".into(),
            Cutoff::At(k) => k.to_string(),
        }
    }
}

/// Photos the queries are matched against.
pub fn build_gallery(set: &EmbeddingSet, split: &SplitSpec, mode: GalleryMode) -> Result<EmbeddingSet> {
    let gallery = set.filter(|i| {
        set.domain(i) == Domain::Photo
            && match mode {
                GalleryMode::ZeroShot => split.is_unseen(set.class_id(i)),
                GalleryMode::Generalized => true,
            }
    });
    if gallery.is_empty() {
        return Err(Error::Config(format!("{mode:?} gallery is empty")));
    }
    Ok(gallery)
}

/// Unseen-class sketches.
pub fn query_set(set: &EmbeddingSet, split: &SplitSpec) -> Result<EmbeddingSet> {
    let queries = set.filter(|i| set.domain(i) == Domain::Sketch && split.is_unseen(set.class_id(i)));
    if queries.is_empty() {
        return Err(Error::Config("no unseen-class sketches to query with".into()));
    }
    Ok(queries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedRetrieval {
    pub query_id: String,
    pub gallery_ids: Vec<String>,
    pub relevance: Vec<bool>,
    pub total_relevant: usize,
}

/// Full ranking of the gallery for one query.
pub fn rank(
    query_id: &str,
    query_class: usize,
    query: &[f64],
    gallery: &EmbeddingSet,
) -> Result<RankedRetrieval> {
    if !gallery.is_empty() && query.len() != gallery.dim() {
        return Err(Error::Shape(format!(
            "query has dim {}, gallery has {}",
            query.len(),
            gallery.dim()
        )));
    }
    let mut scored = (0..gallery.len())
        .map(|i| Ok((sq_euclidean(query, gallery.embedding(i))?, i)))
        .collect::<Result<Vec<(f64, usize)>>>()?;
    scored.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| gallery.id(a.1).cmp(gallery.id(b.1)))
    });
    let relevance: Vec<bool> = scored
        .iter()
        .map(|&(_, i)| gallery.class_id(i) == query_class)
        .collect();
    Ok(RankedRetrieval {
        query_id: query_id.to_string(),
        gallery_ids: scored.iter().map(|&(_, i)| gallery.id(i).to_string()).collect(),
        total_relevant: relevance.iter().filter(|&&r| r).count(),
        relevance,
    })
}

pub fn rank_all(queries: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<Vec<RankedRetrieval>> {
    (0..queries.len())
        .map(|q| rank(queries.id(q), queries.class_id(q), queries.embedding(q), gallery))
        .collect()
}

/// Relevant items in the top `k`, divided by `k`.
pub fn precision_at_k(r: &RankedRetrieval, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Argument("precision cutoff must be >= 1".into()));
    }
    let hits = r.relevance.iter().take(k).filter(|&&g| g).count();
    Ok(hits as f64 / k as f64)
}

/// `Σ_{i≤K} P@i·γ(i) / norm`; `None` when the normaliser is zero (no
/// relevant items), so callers can exclude the query.
pub fn average_precision(r: &RankedRetrieval, cutoff: Cutoff, normalizer: ApNormalizer) -> Option<f64> {
    let limit = cutoff.limit(r.relevance.len());
    let norm = match normalizer {
        ApNormalizer::TotalRelevant => r.total_relevant,
        ApNormalizer::MinKRelevant => r.total_relevant.min(match cutoff {
            Cutoff::All => r.relevance.len(),
            Cutoff::At(k) => k,
        }),
    };
    if norm == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in r.relevance[..limit].iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / norm as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAp {
    pub query_id: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub mean: f64,
    pub per_query: Vec<QueryAp>,
    /// Queries without any relevant gallery item.
    pub excluded: Vec<String>,
}

/// mAP over precomputed rankings, reduced in query order.
pub fn map_from_rankings(
    rankings: &[RankedRetrieval],
    cutoff: Cutoff,
    normalizer: ApNormalizer,
    score_empty_as_zero: bool,
) -> Result<MapReport> {
    let mut per_query = Vec::new();
    let mut excluded = Vec::new();
    for r in rankings {
        match average_precision(r, cutoff, normalizer) {
            Some(ap) => per_query.push(QueryAp {
                query_id: r.query_id.clone(),
                ap,
            }),
            None if score_empty_as_zero => per_query.push(QueryAp {
                query_id: r.query_id.clone(),
                ap: 0.0,
            }),
            None => excluded.push(r.query_id.clone()),
        }
    }
    if per_query.is_empty() {
        return Err(Error::Evaluation(
            "every query lacks relevant gallery items".into(),
        ));
    }
    let mean = per_query.iter().map(|q| q.ap).sum::<f64>() / per_query.len() as f64;
    Ok(MapReport {
        mean,
        per_query,
        excluded,
    })
}

pub fn mean_ap(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    cutoff: Cutoff,
    normalizer: ApNormalizer,
) -> Result<MapReport> {
    map_from_rankings(&rank_all(queries, gallery)?, cutoff, normalizer, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub k_values: Vec<usize>,
    /// Cutoff of the per-query AP list in the report; mAP@all and mAP@k for
    /// every k are always reported.
    pub map_mode: Cutoff,
    pub ap_normalizer: ApNormalizer,
    pub gallery_mode: GalleryMode,
    pub score_empty_as_zero: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            k_values: vec![100, 200],
            map_mode: Cutoff::All,
            ap_normalizer: ApNormalizer::TotalRelevant,
            gallery_mode: GalleryMode::ZeroShot,
            score_empty_as_zero: false,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.contains(&0) || matches!(self.map_mode, Cutoff::At(0)) {
            return Err(Error::Config("metric cutoffs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub gallery_mode: GalleryMode,
    pub ap_normalizer: ApNormalizer,
    pub gallery_size: usize,
    pub query_count: usize,
    /// `mAP@all`, `mAP@k`, `P@k`.
    pub metrics: BTreeMap<String, f64>,
    pub per_query_ap: Vec<QueryAp>,
    pub excluded: Vec<String>,
}

pub fn report_from_rankings(
    rankings: &[RankedRetrieval],
    gallery_size: usize,
    cfg: &MetricConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut metrics = BTreeMap::new();
    let map = |cutoff| map_from_rankings(rankings, cutoff, cfg.ap_normalizer, cfg.score_empty_as_zero);
    metrics.insert("mAP@all".to_string(), map(Cutoff::All)?.mean);
    for &k in &cfg.k_values {
        metrics.insert(format!("mAP@{k}"), map(Cutoff::At(k))?.mean);
        let p = rankings
            .iter()
            .map(|r| precision_at_k(r, k))
            .sum::<Result<f64>>()?
            / rankings.len() as f64;
        metrics.insert(format!("P@{k}"), p);
    }
    let listed = map(cfg.map_mode)?;
    metrics.insert(format!("mAP@{}", cfg.map_mode.label()), listed.mean);
    Ok(EvalReport {
        gallery_mode: cfg.gallery_mode,
        ap_normalizer: cfg.ap_normalizer,
        gallery_size,
        query_count: rankings.len(),
        metrics,
        per_query_ap: listed.per_query,
        excluded: listed.excluded,
    })
}

/// Builds queries and gallery from `set` per `split`/`cfg` and scores them.
pub fn evaluate(set: &EmbeddingSet, split: &SplitSpec, cfg: &MetricConfig) -> Result<EvalReport> {
    let queries = query_set(set, split)?;
    let gallery = build_gallery(set, split, cfg.gallery_mode)?;
    let rankings = rank_all(&queries, &gallery)?;
    report_from_rankings(&rankings, gallery.len(), cfg)
}

/// `query_id<TAB>rank<TAB>gallery_id<TAB>relevant` for the top `k` of each
/// query, ranks starting at 1.
pub fn top_k_lines(rankings: &[RankedRetrieval], k: usize) -> String {
    let mut out = String::new();
    for r in rankings {
        for (i, (id, rel)) in r.gallery_ids.iter().zip(&r.relevance).take(k).enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.query_id,
                i + 1,
                id,
                u8::from(*rel)
            ));
        }
    }
    out
}

/// Exhaustive re-implementation used for cross-checking: ranks by pairwise
/// counting instead of sorting and accumulates precision by recounting.
pub mod brute_force {
    use super::*;

    fn before(d: &[f64], ids: &[&str], a: usize, b: usize) -> bool {
        d[a] < d[b] || (d[a] == d[b] && ids[a] < ids[b])
    }

    /// Relevance flags in rank order plus the number of relevant items.
    pub fn relevance(query: &[f64], query_class: usize, gallery: &EmbeddingSet) -> (Vec<bool>, usize) {
        let n = gallery.len();
        let d: Vec<f64> = (0..n)
            .map(|i| {
                query
                    .iter()
                    .zip(gallery.embedding(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect();
        let ids: Vec<&str> = (0..n).map(|i| gallery.id(i)).collect();
        let mut flags = vec![false; n];
        for i in 0..n {
            let position = (0..n).filter(|&j| j != i && before(&d, &ids, j, i)).count();
            flags[position] = gallery.class_id(i) == query_class;
        }
        let total = flags.iter().filter(|&&f| f).count();
        (flags, total)
    }

    pub fn precision(flags: &[bool], k: usize) -> f64 {
        (0..k.min(flags.len())).filter(|&i| flags[i]).count() as f64 / k as f64
    }

    pub fn average_precision(
        flags: &[bool],
        total: usize,
        k: Option<usize>,
        normalizer: ApNormalizer,
    ) -> Option<f64> {
        let limit = k.unwrap_or(flags.len()).min(flags.len());
        let norm = match normalizer {
            ApNormalizer::TotalRelevant => total,
            ApNormalizer::MinKRelevant => total.min(k.unwrap_or(flags.len())),
        };
        if norm == 0 {
            return None;
        }
        let mut sum = 0.0;
        for i in 1..=limit {
            if flags[i - 1] {
                sum += precision(flags, i);
            }
        }
        Some(sum / norm as f64)
    }

    /// Mean AP over every query with at least one relevant item.
    pub fn mean_ap(
        queries: &EmbeddingSet,
        gallery: &EmbeddingSet,
        k: Option<usize>,
        normalizer: ApNormalizer,
    ) -> Option<f64> {
        let aps: Vec<f64> = (0..queries.len())
            .filter_map(|q| {
                let (flags, total) = relevance(queries.embedding(q), queries.class_id(q), gallery);
                average_precision(&flags, total, k, normalizer)
            })
            .collect();
        if aps.is_empty() {
            None
        } else {
            Some(aps.iter().sum::<f64>() / aps.len() as f64)
        }
    }
}
