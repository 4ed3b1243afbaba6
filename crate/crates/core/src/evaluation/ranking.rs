//! CMC and mAP from a distance matrix.

use serde::{Deserialize, Serialize};

use super::DistanceMatrix;
use crate::data::ImageLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Single query: every query image is ranked on its own.
    Sq,
    /// Multi query: rows of one identity and camera are min-max rescaled
    /// and averaged before ranking.
    Mq,
}

impl std::str::FromStr for Protocol {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sq" => Ok(Protocol::Sq),
            "mq" => Ok(Protocol::Mq),
            other => Err(crate::Error::InvalidArgument(format!(
                "unknown protocol {other:?} (sq or mq)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    /// `cmc[k]` is the fraction of evaluated queries whose first correct
    /// match has rank `≤ k + 1`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
    /// Queries with at least one valid match.
    pub n_queries: usize,
    /// Queries skipped for lack of a valid match.
    pub n_excluded: usize,
}

impl RankingResult {
    /// CMC at 1-based rank `k`, saturating at the gallery size.
    pub fn rank(&self, k: usize) -> f64 {
        match self.cmc.len() {
            0 => 0.0,
            n => self.cmc[k.clamp(1, n) - 1],
        }
    }

    pub fn summary(&self) -> ResultsSummary {
        ResultsSummary {
            rank1: self.rank(1),
            rank5: self.rank(5),
            rank10: self.rank(10),
            map: self.map,
            n_queries: self.n_queries,
            n_excluded: self.n_excluded,
        }
    }
}

/// The results document written by evaluation runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsSummary {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub n_queries: usize,
    pub n_excluded: usize,
}

/// First-match rank (0-based) and average precision of one row, or `None`
/// when the row has no valid match. Gallery entries of the query's identity
/// and camera are skipped; ties keep gallery order.
fn rank_row(row: &[f64], query: ImageLabel, gallery: &[ImageLabel]) -> Option<(usize, f64)> {
    let mut order: Vec<usize> = (0..row.len())
        .filter(|&j| !(gallery[j].identity == query.identity && gallery[j].camera == query.camera))
        .collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    let mut first = None;
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (rank, &j) in order.iter().enumerate() {
        if gallery[j].identity == query.identity {
            hits += 1;
            precision_sum += hits as f64 / (rank + 1) as f64;
            first.get_or_insert(rank);
        }
    }
    first.map(|f| (f, precision_sum / hits as f64))
}

fn min_max(row: &[f64]) -> Vec<f64> {
    let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        row.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; row.len()]
    }
}

/// Groups query rows by (identity, camera) in order of first appearance,
/// fusing each group into one min-max rescaled average row. Single-row
/// groups are passed through unscaled.
pub fn fuse_multi_query(dm: &DistanceMatrix) -> (Vec<Vec<f64>>, Vec<ImageLabel>) {
    let mut keys: Vec<ImageLabel> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, q) in dm.query.iter().enumerate() {
        match keys.iter().position(|k| k == q) {
            Some(g) => members[g].push(i),
            None => {
                keys.push(*q);
                members.push(vec![i]);
            }
        }
    }
    let rows = members
        .iter()
        .map(|m| {
            if m.len() == 1 {
                return dm.row(m[0]).to_vec();
            }
            let mut acc = vec![0.0; dm.cols];
            for &i in m {
                for (a, v) in acc.iter_mut().zip(min_max(dm.row(i))) {
                    *a += v;
                }
            }
            acc.iter().map(|a| a / m.len() as f64).collect()
        })
        .collect();
    (rows, keys)
}

pub fn cmc_map(dm: &DistanceMatrix, protocol: Protocol) -> RankingResult {
    let (rows, labels): (Vec<Vec<f64>>, Vec<ImageLabel>) = match protocol {
        Protocol::Sq => ((0..dm.rows).map(|i| dm.row(i).to_vec()).collect(), dm.query.clone()),
        Protocol::Mq => fuse_multi_query(dm),
    };
    let mut counts = vec![0usize; dm.cols];
    let mut per_query_ap = Vec::new();
    let mut excluded = 0;
    for (row, q) in rows.iter().zip(&labels) {
        match rank_row(row, *q, &dm.gallery) {
            Some((first, ap)) => {
                counts[first] += 1;
                per_query_ap.push(ap);
            }
            None => excluded += 1,
        }
    }
    let n = per_query_ap.len();
    if excluded > 0 {
        log::warn!("{excluded} queries have no valid gallery match and were excluded");
    }
    let mut cmc = Vec::with_capacity(dm.cols);
    let mut running = 0usize;
    for c in counts {
        running += c;
        cmc.push(if n == 0 { 0.0 } else { running as f64 / n as f64 });
    }
    let map = if n == 0 {
        0.0
    } else {
        per_query_ap.iter().sum::<f64>() / n as f64
    };
    RankingResult {
        cmc,
        map,
        per_query_ap,
        n_queries: n,
        n_excluded: excluded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(identity: u64, camera: u64) -> ImageLabel {
        ImageLabel { identity, camera }
    }

    fn dm(values: Vec<f64>, query: Vec<ImageLabel>, gallery: Vec<ImageLabel>) -> DistanceMatrix {
        DistanceMatrix::new(values, query, gallery).unwrap()
    }

    #[test]
    fn positive_first() {
        let m = dm(vec![0.1, 0.9], vec![label(1, 0)], vec![label(1, 1), label(2, 1)]);
        let r = cmc_map(&m, Protocol::Sq);
        assert_eq!(r.cmc, vec![1.0, 1.0]);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn hand_evaluated_average_precision() {
        let m = dm(
            vec![0.1, 0.2, 0.3],
            vec![label(1, 0)],
            vec![label(2, 1), label(1, 1), label(1, 1)],
        );
        let r = cmc_map(&m, Protocol::Sq);
        assert_eq!(r.cmc, vec![0.0, 1.0, 1.0]);
        assert!((r.map - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn same_camera_matches_are_skipped() {
        let m = dm(vec![0.0, 0.5], vec![label(1, 0)], vec![label(1, 0), label(1, 1)]);
        let r = cmc_map(&m, Protocol::Sq);
        assert_eq!(r.cmc[0], 1.0);
        let none = dm(vec![0.0], vec![label(1, 0)], vec![label(1, 0)]);
        let r = cmc_map(&none, Protocol::Sq);
        assert_eq!((r.n_queries, r.n_excluded), (0, 1));
    }

    #[test]
    fn ties_keep_gallery_order() {
        let m = dm(vec![0.5, 0.5], vec![label(1, 0)], vec![label(2, 1), label(1, 1)]);
        assert_eq!(cmc_map(&m, Protocol::Sq).cmc[0], 0.0);
    }

    #[test]
    fn multi_query_fuses_rescaled_rows() {
        // rows rank the gallery differently until rescaled and averaged
        let m = dm(
            vec![0.0, 10.0, 4.0, 0.9, 1.0, 0.0],
            vec![label(1, 0), label(1, 0)],
            vec![label(1, 1), label(2, 1), label(3, 1)],
        );
        let (rows, keys) = fuse_multi_query(&m);
        assert_eq!(keys, vec![label(1, 0)]);
        assert_eq!(rows[0], vec![0.45, 1.0, 0.2]);
        let r = cmc_map(&m, Protocol::Mq);
        assert_eq!(r.cmc, vec![0.0, 1.0, 1.0]);
        let flat = dm(
            vec![3.0, 3.0, 1.0, 2.0],
            vec![label(1, 0), label(1, 0)],
            vec![label(1, 1), label(2, 1)],
        );
        assert_eq!(fuse_multi_query(&flat).0[0], vec![0.0, 0.5]);
    }
}
