//! Retrieval evaluation: full-gallery ranking, Rank-k and mAP.
//!
//! Ranking scores are cosine similarities between the global text and image
//! features; ties break by gallery id so results are deterministic. An
//! optional second stage re-ranks the top candidates with the match head.
//! All model calls run inside an eval-mode guard and the API offers no way
//! to pass a mask.

use crate::corpus::{Caption, SyntheticImage, TestQuery};
use crate::encoder::{self, EncoderParams};
use crate::masking::EvalModeGuard;
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("query identity {0} has no gallery image; mAP undefined")]
    NoRelevant(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Full descending-similarity permutation of the gallery for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub query_id: usize,
    pub ordered_gallery_ids: Vec<usize>,
    pub relevant_set: BTreeSet<usize>,
}

/// Sorts gallery ids by descending score, ties broken by ascending id.
pub fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    ids
}

/// Ranks the whole gallery for one query caption.
pub fn rank_gallery(
    params: &EncoderParams,
    query_id: usize,
    query: &Caption,
    query_identity: usize,
    gallery: &[SyntheticImage],
    rerank_top_k: Option<usize>,
) -> Result<RankingResult, EvalError> {
    if gallery.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    let _guard = EvalModeGuard::enter();
    let f_t = encoder::text_cls_feature(params, query);
    let scores: Vec<f64> = gallery
        .iter()
        .map(|img| encoder::cosine(&f_t, &encoder::image_cls_feature(params, img)))
        .collect();
    let mut ordered = order_by_score(&scores);
    if let Some(k) = rerank_top_k {
        rerank_with_match_head(params, query, gallery, &mut ordered, k);
    }
    let relevant_set: BTreeSet<usize> = gallery
        .iter()
        .enumerate()
        .filter(|(_, img)| img.identity_id == query_identity)
        .map(|(i, _)| i)
        .collect();
    if relevant_set.is_empty() {
        return Err(EvalError::NoRelevant(query_identity));
    }
    Ok(RankingResult {
        query_id,
        ordered_gallery_ids: ordered,
        relevant_set,
    })
}

fn rerank_with_match_head(
    params: &EncoderParams,
    query: &Caption,
    gallery: &[SyntheticImage],
    ordered: &mut [usize],
    k: usize,
) {
    let k = k.min(ordered.len());
    let mut head: Vec<(usize, f64)> = ordered[..k]
        .iter()
        .map(|&gid| {
            (
                gid,
                encoder::itm_match_probability(params, query, &gallery[gid]),
            )
        })
        .collect();
    head.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
    for (slot, (gid, _)) in head.into_iter().enumerate() {
        ordered[slot] = gid;
    }
}

/// Fraction of queries with a relevant item in the top k. A k beyond the
/// gallery size is clamped with a warning.
pub fn rank_k(results: &[RankingResult], k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    if results.is_empty() {
        return 0.0;
    }
    if let Some(smallest) = results.iter().map(|r| r.ordered_gallery_ids.len()).min() {
        if k > smallest {
            log::warn!("rank_k: k = {k} exceeds gallery size {smallest}; clamping");
        }
    }
    let hits = results
        .iter()
        .filter(|r| {
            let k = k.min(r.ordered_gallery_ids.len());
            r.ordered_gallery_ids[..k].iter().any(|g| r.relevant_set.contains(g))
        })
        .count();
    hits as f64 / results.len() as f64
}

/// Mean over queries of the average of precisions at each relevant item's
/// rank.
pub fn mean_ap(results: &[RankingResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for r in results {
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank0, gid) in r.ordered_gallery_ids.iter().enumerate() {
            if r.relevant_set.contains(gid) {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
            }
        }
        total += ap / r.relevant_set.len() as f64;
    }
    total / results.len() as f64
}

/// Metric table from one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub queries: usize,
    pub gallery: usize,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("metric,k,value\n");
        out.push_str(&format!("rank,1,{}\n", self.rank1));
        out.push_str(&format!("rank,5,{}\n", self.rank5));
        out.push_str(&format!("rank,10,{}\n", self.rank10));
        out.push_str(&format!("map,,{}\n", self.map));
        out
    }

    pub fn text(&self) -> String {
        format!(
            "queries: {}  gallery: {}\nR-1  {:.4}\nR-5  {:.4}\nR-10 {:.4}\nmAP  {:.4}\n",
            self.queries, self.gallery, self.rank1, self.rank5, self.rank10, self.map
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.csv().as_bytes())?;
        Ok(())
    }
}

/// Evaluates a model over queries and a gallery. Gallery features are
/// computed once; queries are independent.
pub fn evaluate(
    params: &EncoderParams,
    queries: &[TestQuery],
    gallery: &[SyntheticImage],
    rerank_top_k: Option<usize>,
) -> Result<EvalReport, EvalError> {
    if gallery.is_empty() {
        return Err(EvalError::EmptyGallery);
    }
    let _guard = EvalModeGuard::enter();
    let gallery_feats: Vec<Vec<f64>> = gallery
        .iter()
        .map(|img| encoder::image_cls_feature(params, img))
        .collect();

    let mut results = Vec::with_capacity(queries.len());
    for (qid, q) in queries.iter().enumerate() {
        let f_t = encoder::text_cls_feature(params, &q.caption);
        let scores: Vec<f64> = gallery_feats
            .iter()
            .map(|f_v| encoder::cosine(&f_t, f_v))
            .collect();
        let mut ordered = order_by_score(&scores);
        if let Some(k) = rerank_top_k {
            rerank_with_match_head(params, &q.caption, gallery, &mut ordered, k);
        }
        let relevant_set: BTreeSet<usize> = gallery
            .iter()
            .enumerate()
            .filter(|(_, img)| img.identity_id == q.identity_id)
            .map(|(i, _)| i)
            .collect();
        if relevant_set.is_empty() {
            return Err(EvalError::NoRelevant(q.identity_id));
        }
        results.push(RankingResult {
            query_id: qid,
            ordered_gallery_ids: ordered,
            relevant_set,
        });
    }
    Ok(EvalReport {
        queries: queries.len(),
        gallery: gallery.len(),
        rank1: rank_k(&results, 1),
        rank5: rank_k(&results, 5),
        rank10: rank_k(&results, 10),
        map: mean_ap(&results),
    })
}
