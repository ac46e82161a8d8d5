//! Re-identification evaluation: query-vs-gallery ranking, per-query average
//! precision, mAP, and the CMC curve, with the VeRi gallery-filter protocol.
//!
//! AP is the non-interpolated form: the mean of precision measured at each
//! correct hit over the full (filtered) ranking. Ties in distance break by
//! gallery index, so reports are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Feature vectors plus the per-sample metadata the protocols need.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub vectors: Matrix,
    pub sample_ids: Vec<String>,
    pub identities: Vec<String>,
    pub cameras: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(
        vectors: Matrix,
        sample_ids: Vec<String>,
        identities: Vec<String>,
        cameras: Vec<String>,
    ) -> Result<Self> {
        let n = vectors.rows();
        if sample_ids.len() != n || identities.len() != n || cameras.len() != n {
            return Err(Error::shape(format!(
                "metadata lengths ({}, {}, {}) disagree with {n} vectors",
                sample_ids.len(),
                identities.len(),
                cameras.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &sample_ids {
            if !seen.insert(id) {
                return Err(Error::config(format!("duplicate sample_id {id}")));
            }
        }
        Ok(EmbeddingSet {
            vectors,
            sample_ids,
            identities,
            cameras,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Gallery filtering applied per query before ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Rank the full gallery.
    Plain,
    /// Drop gallery entries that share BOTH the query's identity and camera.
    Veri,
}

/// Per-query APs plus the aggregate mAP and CMC curve.
///
/// `cmc[k]` is the fraction of valid queries with a correct match somewhere
/// in the top k; `cmc[0]` is 0 by construction so `cmc[1]` is the rank-1
/// score.
#[derive(Debug, Clone)]
pub struct RankingReport {
    pub per_query_ap: Vec<f64>,
    pub map: f64,
    pub cmc: Vec<f64>,
    pub num_valid_queries: usize,
    /// Queries left without any positive after protocol filtering.
    pub num_skipped_queries: usize,
}

impl RankingReport {
    pub fn rank_k(&self, k: usize) -> f64 {
        if self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[k.min(self.cmc.len() - 1)]
    }

    pub fn rank1(&self) -> f64 {
        self.rank_k(1)
    }

    pub fn rank5(&self) -> f64 {
        self.rank_k(5)
    }
}

/// Euclidean distances between two embedding sets: one row per query.
pub fn distance_matrix(query: &Matrix, gallery: &Matrix) -> Result<Matrix> {
    if query.cols() != gallery.cols() {
        return Err(Error::shape(format!(
            "query dim {} != gallery dim {}",
            query.cols(),
            gallery.cols()
        )));
    }
    let mut out = Matrix::zeros(query.rows(), gallery.rows());
    for qi in 0..query.rows() {
        let q = query.row(qi);
        let q_norm: f64 = q.iter().map(|v| v * v).sum();
        for gi in 0..gallery.rows() {
            let g = gallery.row(gi);
            let g_norm: f64 = g.iter().map(|v| v * v).sum();
            let dot: f64 = q.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            out.set(qi, gi, (q_norm + g_norm - 2.0 * dot).max(0.0).sqrt());
        }
    }
    Ok(out)
}

/// Rank the gallery for every query and aggregate AP/CMC.
///
/// Queries with no positives after filtering are excluded from the mAP and
/// counted in `num_skipped_queries`.
pub fn rank(query: &EmbeddingSet, gallery: &EmbeddingSet, protocol: Protocol) -> Result<RankingReport> {
    rank_with_threads(query, gallery, protocol, 1)
}

/// Per-query work for one ranking: AP and the rank of the first hit, or
/// `None` when filtering leaves the query without positives.
fn rank_one(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    dist: &Matrix,
    protocol: Protocol,
    qi: usize,
) -> Option<(f64, usize)> {
    // protocol filter, then sort by (distance, gallery index)
    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&gi| match protocol {
            Protocol::Plain => true,
            Protocol::Veri => {
                !(gallery.identities[gi] == query.identities[qi]
                    && gallery.cameras[gi] == query.cameras[qi])
            }
        })
        .collect();
    order.sort_by(|&a, &b| dist.get(qi, a).total_cmp(&dist.get(qi, b)).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first_hit = None;
    for (pos, &gi) in order.iter().enumerate() {
        if gallery.identities[gi] == query.identities[qi] {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            if first_hit.is_none() {
                first_hit = Some(pos + 1);
            }
        }
    }
    first_hit.map(|rank| (precision_sum / hits as f64, rank))
}

/// As [`rank`], with per-query work spread over up to `threads` OS threads.
/// Queries are independent and results are merged in query order, so the
/// report is identical for every thread count.
pub fn rank_with_threads(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    protocol: Protocol,
    threads: usize,
) -> Result<RankingReport> {
    if query.dim() != gallery.dim() {
        return Err(Error::shape(format!(
            "query dim {} != gallery dim {}",
            query.dim(),
            gallery.dim()
        )));
    }
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::shape("rank needs non-empty query and gallery sets"));
    }
    let dist = distance_matrix(&query.vectors, &gallery.vectors)?;
    let max_rank = gallery.len();
    let threads = threads.max(1).min(query.len());
    let results: Vec<Option<(f64, usize)>> = if threads == 1 {
        (0..query.len())
            .map(|qi| rank_one(query, gallery, &dist, protocol, qi))
            .collect()
    } else {
        let mut results = vec![None; query.len()];
        let chunk = query.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (t, slot) in results.chunks_mut(chunk).enumerate() {
                let dist = &dist;
                handles.push(scope.spawn(move || {
                    for (offset, out) in slot.iter_mut().enumerate() {
                        *out = rank_one(query, gallery, dist, protocol, t * chunk + offset);
                    }
                }));
            }
            for handle in handles {
                handle.join().expect("ranking worker panicked");
            }
        });
        results
    };
    let mut per_query_ap = Vec::new();
    let mut first_hit_ranks: Vec<usize> = Vec::new();
    let mut num_skipped_queries = 0usize;
    for outcome in results {
        match outcome {
            Some((ap, first_hit)) => {
                per_query_ap.push(ap);
                first_hit_ranks.push(first_hit);
            }
            None => num_skipped_queries += 1,
        }
    }
    let num_valid_queries = per_query_ap.len();
    let map = if num_valid_queries == 0 {
        0.0
    } else {
        per_query_ap.iter().sum::<f64>() / num_valid_queries as f64
    };
    let mut cmc = vec![0.0; max_rank + 1];
    if num_valid_queries > 0 {
        for k in 1..=max_rank {
            let matched = first_hit_ranks.iter().filter(|&&r| r <= k).count();
            cmc[k] = matched as f64 / num_valid_queries as f64;
        }
    }
    Ok(RankingReport {
        per_query_ap,
        map,
        cmc,
        num_valid_queries,
        num_skipped_queries,
    })
}
