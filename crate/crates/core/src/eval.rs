//! Cross-camera single-query retrieval evaluation: gallery filtering, ranking,
//! average precision and CMC.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{FeatureMatrix, SampleRecord};
use crate::metric::MetricModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalProtocol {
    pub single_query: bool,
    pub exclude_same_camera_same_id: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            single_query: true,
            exclude_same_camera_same_id: true,
        }
    }
}

/// Gallery positions a query may be ranked against: everything except
/// entries sharing both its identity and its camera.
pub fn apply_protocol(query: &SampleRecord, gallery: &[SampleRecord]) -> Vec<usize> {
    gallery
        .iter()
        .enumerate()
        .filter(|(_, g)| !(g.identity == query.identity && g.camera == query.camera))
        .map(|(i, _)| i)
        .collect()
}

/// Ranked gallery for one query. `order`, `distances` and `relevant` are
/// parallel; excluded gallery items are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct RankList {
    pub query: usize,
    pub order: Vec<usize>,
    pub distances: Vec<f64>,
    pub relevant: Vec<bool>,
}

impl RankList {
    /// 1-based rank of the first relevant item.
    pub fn first_hit(&self) -> Option<usize> {
        self.relevant.iter().position(|&r| r).map(|p| p + 1)
    }

    pub fn num_relevant(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }
}

/// Sorts `eligible` by ascending distance to `qfeat`, ties by gallery index.
/// `relevant` is indexed by gallery position.
pub fn rank_gallery(
    query: usize,
    qfeat: &[f64],
    gallery: &[Vec<f64>],
    model: &MetricModel,
    eligible: &[usize],
    relevant: &[bool],
) -> Result<RankList> {
    if relevant.len() != gallery.len() {
        return Err(Error::DimMismatch {
            expected: gallery.len(),
            actual: relevant.len(),
        });
    }
    let mut scored = Vec::with_capacity(eligible.len());
    for &g in eligible {
        let row = gallery
            .get(g)
            .ok_or_else(|| Error::Argument(format!("gallery index {g} out of range")))?;
        scored.push((model.distance(qfeat, row)?, g));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(RankList {
        query,
        relevant: scored.iter().map(|&(_, g)| relevant[g]).collect(),
        order: scored.iter().map(|&(_, g)| g).collect(),
        distances: scored.into_iter().map(|(d, _)| d).collect(),
    })
}

/// Mean over relevant positions `k` of the precision of the top `k`.
pub fn average_precision(rl: &RankList) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in rl.relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Validation(format!("query {} has no relevant item", rl.query)));
    }
    Ok(sum / hits as f64)
}

/// `values[n - 1]` is the fraction of queries whose first hit is within the
/// top `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct CmcCurve {
    pub values: Vec<f64>,
}

impl CmcCurve {
    /// Value at a 1-based rank; ranks past the end hold the last value.
    pub fn at(&self, rank: usize) -> f64 {
        match self.values.len() {
            0 => 0.0,
            n => self.values[rank.clamp(1, n) - 1],
        }
    }
}

/// CMC over ranks `1..=max_rank`. Lists without a relevant item count as
/// misses at every rank.
pub fn cmc_curve(rank_lists: &[RankList], max_rank: usize) -> CmcCurve {
    let mut counts = vec![0usize; max_rank];
    for rl in rank_lists {
        if let Some(r) = rl.first_hit() {
            if r <= max_rank {
                counts[r - 1] += 1;
            }
        }
    }
    let total = rank_lists.len().max(1) as f64;
    let mut acc = 0usize;
    let values = counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / total
        })
        .collect();
    CmcCurve { values }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub cmc: CmcCurve,
    pub map: f64,
    /// `(query index, AP)` for every evaluated query, in query order.
    pub per_query_ap: Vec<(usize, f64)>,
    /// Queries without a cross-camera match, in query order.
    pub skipped: Vec<usize>,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.at(1)
    }
}

fn to_f64_rows(m: &FeatureMatrix) -> Vec<Vec<f64>> {
    m.rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Evaluates every query against the gallery. Queries run in parallel; the
/// results are merged in query order.
pub fn evaluate(
    queries: &[SampleRecord],
    query_feats: &FeatureMatrix,
    gallery: &[SampleRecord],
    gallery_feats: &FeatureMatrix,
    model: &MetricModel,
) -> Result<EvalReport> {
    if queries.len() != query_feats.n() || gallery.len() != gallery_feats.n() {
        return Err(Error::Shape(format!(
            "{} query records vs {} query features, {} gallery records vs {} gallery features",
            queries.len(),
            query_feats.n(),
            gallery.len(),
            gallery_feats.n()
        )));
    }
    if gallery.is_empty() {
        return Err(Error::Argument("gallery is empty".into()));
    }
    for dim in [query_feats.dim(), gallery_feats.dim()] {
        if dim != model.dim() {
            return Err(Error::DimMismatch {
                expected: model.dim(),
                actual: dim,
            });
        }
    }
    let q_rows = to_f64_rows(query_feats);
    let g_rows = to_f64_rows(gallery_feats);

    let outcomes: Vec<Option<(RankList, f64)>> = queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let eligible = apply_protocol(q, gallery);
            let relevant: Vec<bool> = gallery
                .iter()
                .map(|g| g.identity == q.identity && g.camera != q.camera)
                .collect();
            if !eligible.iter().any(|&g| relevant[g]) {
                return Ok(None);
            }
            let rl = rank_gallery(qi, &q_rows[qi], &g_rows, model, &eligible, &relevant)?;
            let ap = average_precision(&rl)?;
            Ok(Some((rl, ap)))
        })
        .collect::<Result<_>>()?;

    let mut lists = Vec::new();
    let mut per_query_ap = Vec::new();
    let mut skipped = Vec::new();
    for (qi, o) in outcomes.into_iter().enumerate() {
        match o {
            Some((rl, ap)) => {
                per_query_ap.push((qi, ap));
                lists.push(rl);
            }
            None => skipped.push(qi),
        }
    }
    if lists.is_empty() {
        return Err(Error::Validation("no query has a cross-camera gallery match".into()));
    }
    let map = per_query_ap.iter().map(|(_, ap)| ap).sum::<f64>() / per_query_ap.len() as f64;
    Ok(EvalReport {
        protocol: EvalProtocol::default(),
        cmc: cmc_curve(&lists, gallery.len()),
        map,
        per_query_ap,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Split;
    use proptest::prelude::*;

    fn rec(id: u32, cam: u32, split: Split) -> SampleRecord {
        SampleRecord {
            image_path: format!("{id}_{cam}.png"),
            identity: id,
            camera: cam,
            split,
        }
    }

    fn list(relevant: &[bool]) -> RankList {
        RankList {
            query: 0,
            order: (0..relevant.len()).collect(),
            distances: (0..relevant.len()).map(|i| i as f64).collect(),
            relevant: relevant.to_vec(),
        }
    }

    #[test]
    fn protocol_excludes_same_id_same_camera() {
        let q = rec(5, 1, Split::Query);
        let g = [rec(5, 1, Split::Gallery), rec(5, 2, Split::Gallery), rec(6, 1, Split::Gallery)];
        assert_eq!(apply_protocol(&q, &g), vec![1, 2]);
    }

    #[test]
    fn query_without_cross_camera_match_is_skipped() {
        let queries = [rec(1, 0, Split::Query), rec(2, 0, Split::Query)];
        let gallery = [rec(1, 1, Split::Gallery), rec(2, 0, Split::Gallery)];
        let qf = FeatureMatrix::from_rows(1, &[vec![0.0], vec![1.0]]).unwrap();
        let gf = FeatureMatrix::from_rows(1, &[vec![0.0], vec![1.0]]).unwrap();
        let r = evaluate(&queries, &qf, &gallery, &gf, &MetricModel::euclidean(1)).unwrap();
        assert_eq!(r.skipped, vec![1]);
        assert_eq!(r.per_query_ap, vec![(0, 1.0)]);
    }

    #[test]
    fn ranking_examples() {
        let m = MetricModel::euclidean(2);
        let g = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let rl = rank_gallery(0, &[1.0, 0.0], &g, &m, &[0, 1], &[false, true]).unwrap();
        assert_eq!(rl.order, vec![1, 0]);
        assert_eq!(rl.first_hit(), Some(1));

        let same = vec![vec![0.3, 0.3]; 4];
        let rl = rank_gallery(0, &[1.0, 0.0], &same, &m, &[3, 0, 2, 1], &[false; 4]).unwrap();
        assert_eq!(rl.order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&list(&[true, true, false, false, false])).unwrap(), 1.0);
        assert!((average_precision(&list(&[false, true, false, true])).unwrap() - 0.5).abs() < 1e-15);
        for r in 1..6 {
            let mut rel = vec![false; 6];
            rel[r - 1] = true;
            assert!((average_precision(&list(&rel)).unwrap() - 1.0 / r as f64).abs() < 1e-15);
        }
        assert!(average_precision(&list(&[false, false])).is_err());
    }

    #[test]
    fn cmc_examples() {
        let c = cmc_curve(&[list(&[false, false, true, false])], 4);
        assert_eq!(c.values, vec![0.0, 0.0, 1.0, 1.0]);
        let c = cmc_curve(&[list(&[true, false]), list(&[false, true])], 3);
        assert_eq!(c.values, vec![0.5, 1.0, 1.0]);
        let c = cmc_curve(&[list(&[true]), list(&[true, false])], 3);
        assert!(c.values.iter().all(|&v| v == 1.0));
    }

    fn brute_force_order(q: &[f64], g: &[Vec<f64>]) -> Vec<usize> {
        let d: Vec<f64> = g
            .iter()
            .map(|r| r.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect();
        // position of i = number of items strictly before it
        let mut out = vec![0; g.len()];
        for i in 0..g.len() {
            let pos = (0..g.len())
                .filter(|&j| d[j] < d[i] || (d[j] == d[i] && j < i))
                .count();
            out[pos] = i;
        }
        out
    }

    proptest! {
        #[test]
        fn ranking_matches_brute_force(
            q in proptest::collection::vec(-1.0f64..1.0, 3),
            g in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 5),
        ) {
            let all: Vec<usize> = (0..g.len()).collect();
            let rl = rank_gallery(0, &q, &g, &MetricModel::euclidean(3), &all, &[false; 5]).unwrap();
            prop_assert_eq!(rl.order, brute_force_order(&q, &g));
        }

        #[test]
        fn cmc_is_monotone_and_bounded(
            lists in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 1..12), 1..10),
        ) {
            let rls: Vec<RankList> = lists.iter().map(|l| list(l)).collect();
            let c = cmc_curve(&rls, 12);
            prop_assert!(c.values.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(c.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            if rls.iter().all(|r| r.first_hit().is_some()) {
                prop_assert_eq!(c.at(12), 1.0);
            }
        }

        #[test]
        fn ap_is_one_iff_relevant_items_lead(rel in proptest::collection::vec(any::<bool>(), 1..15)) {
            prop_assume!(rel.iter().any(|&r| r));
            let ap = average_precision(&list(&rel)).unwrap();
            let k = rel.iter().filter(|&&r| r).count();
            prop_assert!(ap > 0.0 && ap <= 1.0);
            prop_assert_eq!(ap == 1.0, rel[..k].iter().all(|&r| r));
        }

        #[test]
        fn identity_mahalanobis_ranks_like_euclidean(
            q in proptest::collection::vec(-1.0f64..1.0, 3),
            g in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 1..10),
        ) {
            let all: Vec<usize> = (0..g.len()).collect();
            let rel = vec![false; g.len()];
            let eu = rank_gallery(0, &q, &g, &MetricModel::euclidean(3), &all, &rel).unwrap();
            let id = MetricModel::kissme(nalgebra::DMatrix::identity(3, 3)).unwrap();
            let sq = rank_gallery(0, &q, &g, &id, &all, &rel).unwrap();
            prop_assert_eq!(eu.order, sq.order);
        }
    }
}
