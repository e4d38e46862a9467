use std::collections::BTreeMap;

use crate::episodic::bank::Label;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Euclidean k-nearest-neighbour vote.
///
/// Neighbours are ranked by (distance, label). Among the `min(k, n)` nearest,
/// the most frequent label wins; ties go to the smallest summed distance,
/// then to the smallest label.
pub fn knn_classify(features: &Matrix, labels: &[Label], query: &[f64], k: usize) -> Result<Label> {
    if features.rows() != labels.len() {
        return Err(Error::dim("knn_classify (labels)", features.shape(), (labels.len(), 1)));
    }
    if features.rows() == 0 {
        return Err(Error::Degenerate("kNN over an empty support set".into()));
    }
    if query.len() != features.cols() {
        return Err(Error::dim("knn_classify (query)", (1, query.len()), (1, features.cols())));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut ranked: Vec<(f64, Label)> = features
        .iter_rows()
        .zip(labels)
        .map(|(row, &l)| (euclidean(row, query), l))
        .collect();
    let k = k.min(ranked.len());
    let by_rank = |a: &(f64, Label), b: &(f64, Label)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k - 1, by_rank);
    }
    let mut votes: BTreeMap<Label, (usize, f64)> = BTreeMap::new();
    for &(d, l) in &ranked[..k] {
        let e = votes.entry(l).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += d;
    }
    // BTreeMap iterates in label order, so strict comparisons keep the
    // smallest label on a full tie
    let mut best: Option<(Label, usize, f64)> = None;
    for (l, (count, dist)) in votes {
        let better = match best {
            None => true,
            Some((_, bc, bd)) => count > bc || (count == bc && dist < bd),
        };
        if better {
            best = Some((l, count, dist));
        }
    }
    Ok(best.expect("k ≥ 1").0)
}

/// Classifies every row of `queries`.
pub fn knn_classify_all(features: &Matrix, labels: &[Label], queries: &Matrix, k: usize) -> Result<Vec<Label>> {
    queries.iter_rows().map(|q| knn_classify(features, labels, q, k)).collect()
}
