//! Retrieval ranking and its metrics: CMC, average precision, mAP, and the
//! clustering agreement scores (ARI/NMI) used to grade pseudo-labels against
//! ground truth.

use std::collections::BTreeMap;

use crate::embedding::{pairwise_distances, EmbeddingMatrix, Metric, SampleMeta, UNKNOWN_LABEL};
use crate::error::{Error, Result};
use crate::parallel::{for_each_row, Par};

/// Per-query ranked gallery with relevance bits and the protocol mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    /// Ordered valid-gallery indices per query (ascending distance, ties by
    /// gallery index).
    order: Vec<Vec<u32>>,
    /// Relevance bit per ranked position, aligned with `order`.
    relevance: Vec<Vec<bool>>,
    /// Per-query validity mask over the full gallery.
    valid: Vec<Vec<bool>>,
    /// Queries with at least one relevant valid gallery item.
    evaluable: Vec<bool>,
}

impl RankingResult {
    pub fn num_queries(&self) -> usize {
        self.order.len()
    }

    /// Queries excluded for lacking any valid relevant item.
    pub fn num_excluded(&self) -> usize {
        self.evaluable.iter().filter(|&&e| !e).count()
    }

    pub fn is_evaluable(&self, q: usize) -> bool {
        self.evaluable[q]
    }

    pub fn order(&self, q: usize) -> &[u32] {
        &self.order[q]
    }

    pub fn relevance(&self, q: usize) -> &[bool] {
        &self.relevance[q]
    }

    pub fn valid_mask(&self, q: usize) -> &[bool] {
        &self.valid[q]
    }
}

/// Protocol options for [`rank_gallery`].
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RankOptions {
    /// Mask gallery items sharing both identity and camera with the query
    /// (standard cross-camera protocol). Disable for single-camera data.
    pub cross_camera_filter: bool,
    /// Keep only the best `top_k` positions per query (`None` = full list).
    pub top_k: Option<usize>,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self { cross_camera_filter: true, top_k: None }
    }
}

struct PerQuery {
    order: Vec<u32>,
    relevance: Vec<bool>,
    valid: Vec<bool>,
    evaluable: bool,
}

fn rank_one_query(
    dist_row: impl Fn(usize) -> f64,
    q_label: i64,
    q_cam: u32,
    gm: &SampleMeta,
    opts: &RankOptions,
) -> PerQuery {
    let ng = gm.len();
    let mut valid = vec![true; ng];
    if opts.cross_camera_filter {
        for (g, v) in valid.iter_mut().enumerate() {
            if gm.label(g) != UNKNOWN_LABEL && gm.label(g) == q_label && gm.camera(g) == q_cam {
                *v = false;
            }
        }
    }
    let mut order: Vec<u32> = (0..ng as u32).filter(|&g| valid[g as usize]).collect();
    order.sort_by(|&a, &b| {
        dist_row(a as usize)
            .partial_cmp(&dist_row(b as usize))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    if let Some(k) = opts.top_k {
        order.truncate(k);
    }
    let relevance: Vec<bool> = order
        .iter()
        .map(|&g| q_label != UNKNOWN_LABEL && gm.label(g as usize) == q_label)
        .collect();
    let evaluable = relevance.iter().any(|&r| r);
    PerQuery { order, relevance, valid, evaluable }
}

fn collect(slots: Vec<Option<PerQuery>>) -> RankingResult {
    let mut order = Vec::with_capacity(slots.len());
    let mut relevance = Vec::with_capacity(slots.len());
    let mut valid = Vec::with_capacity(slots.len());
    let mut evaluable = Vec::with_capacity(slots.len());
    for slot in slots {
        let p = slot.expect("every query filled");
        order.push(p.order);
        relevance.push(p.relevance);
        valid.push(p.valid);
        evaluable.push(p.evaluable);
    }
    RankingResult { order, relevance, valid, evaluable }
}

fn rank_impl(
    queries: (&EmbeddingMatrix, &SampleMeta),
    gallery: (&EmbeddingMatrix, &SampleMeta),
    metric: Metric,
    opts: &RankOptions,
    mode: Par,
) -> Result<RankingResult> {
    let (qe, qm) = queries;
    let (ge, gm) = gallery;
    if qe.dim() != ge.dim() {
        return Err(Error::DimMismatch { left: qe.dim(), right: ge.dim() });
    }
    if ge.n() == 0 {
        return Err(Error::EmptyGallery);
    }
    let dist = if mode == Par::Never {
        crate::embedding::pairwise_distances_seq(qe, ge, metric)?
    } else {
        pairwise_distances(qe, ge, metric)?
    };
    let mut slots: Vec<Option<PerQuery>> = Vec::new();
    slots.resize_with(qe.n(), || None);
    for_each_row(mode, &mut slots, 1, |q, slot| {
        slot[0] = Some(rank_one_query(
            |g| dist.get(q, g),
            qm.label(q),
            qm.camera(q),
            gm,
            opts,
        ));
    });
    Ok(collect(slots))
}

/// Ranks the gallery for every query: ascending distance, ties broken by
/// gallery index, with the standard same-identity/same-camera protocol mask.
pub fn rank_gallery(
    queries: (&EmbeddingMatrix, &SampleMeta),
    gallery: (&EmbeddingMatrix, &SampleMeta),
    metric: Metric,
    opts: &RankOptions,
) -> Result<RankingResult> {
    rank_impl(queries, gallery, metric, opts, Par::Auto)
}

/// Sequential twin of [`rank_gallery`]; bit-identical output.
pub fn rank_gallery_seq(
    queries: (&EmbeddingMatrix, &SampleMeta),
    gallery: (&EmbeddingMatrix, &SampleMeta),
    metric: Metric,
    opts: &RankOptions,
) -> Result<RankingResult> {
    rank_impl(queries, gallery, metric, opts, Par::Never)
}

/// Ranks pre-computed query×gallery distances under the same protocol rules.
pub fn rank_distances(
    dist: &crate::embedding::DistanceMatrix,
    qm: &SampleMeta,
    gm: &SampleMeta,
    opts: &RankOptions,
) -> Result<RankingResult> {
    if dist.cols() == 0 {
        return Err(Error::EmptyGallery);
    }
    let mut slots: Vec<Option<PerQuery>> = Vec::new();
    slots.resize_with(dist.rows(), || None);
    for_each_row(Par::Auto, &mut slots, 1, |q, slot| {
        slot[0] = Some(rank_one_query(
            |g| dist.get(q, g),
            qm.label(q),
            qm.camera(q),
            gm,
            opts,
        ));
    });
    Ok(collect(slots))
}

/// CMC at rank `n`: the fraction of evaluable queries whose first relevant
/// item appears within the top `n` positions.
pub fn cmc_at(r: &RankingResult, n: usize) -> f64 {
    assert!(n >= 1);
    let mut hits = 0usize;
    let mut total = 0usize;
    for q in 0..r.num_queries() {
        if !r.evaluable[q] {
            continue;
        }
        total += 1;
        if r.relevance[q].iter().take(n).any(|&b| b) {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Average precision of one ranked relevance list:
/// `AP = (1/m_q) Σ_k P(k)·rel(k)`.
pub fn average_precision(relevance: &[bool], m_q: usize) -> Result<f64> {
    let set_bits = relevance.iter().filter(|&&b| b).count();
    if m_q == 0 || set_bits == 0 {
        return Err(Error::NoRelevant);
    }
    assert_eq!(m_q, set_bits, "m_q must equal the number of relevant bits");
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            ap += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(ap / m_q as f64)
}

/// Mean of per-query average precision over the evaluable queries.
pub fn mean_ap(r: &RankingResult) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for q in 0..r.num_queries() {
        if !r.evaluable[q] {
            continue;
        }
        let m_q = r.relevance[q].iter().filter(|&&b| b).count();
        total += average_precision(&r.relevance[q], m_q)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoEvaluableQueries);
    }
    Ok(total / count as f64)
}

/// Summary block emitted by the evaluation pipelines.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricSummary {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub num_queries: usize,
    pub num_excluded: usize,
}

impl MetricSummary {
    pub fn from_ranking(r: &RankingResult) -> Result<Self> {
        Ok(Self {
            map: mean_ap(r)?,
            rank1: cmc_at(r, 1),
            rank5: cmc_at(r, 5),
            rank10: cmc_at(r, 10),
            num_queries: r.num_queries(),
            num_excluded: r.num_excluded(),
        })
    }

    /// `name<TAB>value` records, one metric per line.
    pub fn tsv(&self) -> String {
        format!(
            "mAP\t{}\nrank1\t{}\nrank5\t{}\nrank10\t{}\nnum_queries\t{}\nnum_excluded\t{}\n",
            self.map, self.rank1, self.rank5, self.rank10, self.num_queries, self.num_excluded
        )
    }
}

type Contingency = (
    BTreeMap<(i64, i64), usize>,
    BTreeMap<i64, usize>,
    BTreeMap<i64, usize>,
);

fn contingency(a: &[i64], b: &[i64]) -> Contingency {
    let mut joint = BTreeMap::new();
    let mut ma = BTreeMap::new();
    let mut mb = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b.iter()) {
        *joint.entry((x, y)).or_insert(0) += 1;
        *ma.entry(x).or_insert(0) += 1;
        *mb.entry(y).or_insert(0) += 1;
    }
    (joint, ma, mb)
}

fn comb2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same samples.
pub fn adjusted_rand_index(a: &[i64], b: &[i64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let (joint, ma, mb) = contingency(a, b);
    let sum_joint: f64 = joint.values().map(|&c| comb2(c)).sum();
    let sum_a: f64 = ma.values().map(|&c| comb2(c)).sum();
    let sum_b: f64 = mb.values().map(|&c| comb2(c)).sum();
    let total = comb2(n);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-15 {
        return 1.0;
    }
    (sum_joint - expected) / (max - expected)
}

/// Normalized mutual information (arithmetic normalization).
pub fn normalized_mutual_information(a: &[i64], b: &[i64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.is_empty() {
        return 1.0;
    }
    let (joint, ma, mb) = contingency(a, b);
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        let px = ma[&x] as f64 / n;
        let py = mb[&y] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    let entropy = |m: &BTreeMap<i64, usize>| -> f64 {
        -m.values()
            .map(|&c| {
                let p = c as f64 / n;
                p * p.ln()
            })
            .sum::<f64>()
    };
    let denom = 0.5 * (entropy(&ma) + entropy(&mb));
    if denom < 1e-15 {
        1.0
    } else {
        mi / denom
    }
}

/// Flattens a cluster assignment for agreement scoring: cluster ids map to
/// themselves; each noise sample becomes its own singleton cluster.
pub fn assignment_labels_with_noise_singletons(
    assignment: &crate::cluster::ClusterAssignment,
) -> Vec<i64> {
    let mut next = assignment.num_clusters() as i64;
    assignment
        .ids()
        .iter()
        .map(|id| match id {
            Some(c) => *c as i64,
            None => {
                let v = next;
                next += 1;
                v
            }
        })
        .collect()
}
