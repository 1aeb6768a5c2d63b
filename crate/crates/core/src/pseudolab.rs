//! Prototype-rectified pseudo-labels and their scheduled expansion.
//!
//! Weights are a softmax over negative feature-to-prototype distances. The
//! rectified label is the argmax of `w·p`; pixels of the unlabeled area are
//! ranked by `max_k w·p` and the top `N` join the label map, with `N` growing
//! as `log(m/M + 1)` times the number of pixels whose raw and rectified
//! labels agree.

use std::cmp::Ordering;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::protobank::PrototypeBank;
use crate::segmodel::argmax;
use crate::synthdomain::{LabelMask, IGNORE};

#[derive(Clone, Debug, PartialEq)]
pub struct RectificationMaps {
    /// N×K prototype weights.
    pub weights: Tensor,
    pub raw_label: Vec<u16>,
    pub rect_label: Vec<u16>,
    pub consistent: Vec<bool>,
    /// `max_k w^(i,k)·p^(i,k)`.
    pub score: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpansionResult {
    /// Selected pixel indices in rank order.
    pub selected: Vec<usize>,
    pub expanded_mask: LabelMask,
    pub count: usize,
    /// How far the requested `N` exceeded the candidate pool.
    pub clamped_by: usize,
}

/// Which unlabeled pixels may be promoted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ExpandCandidates {
    #[default]
    All,
    Consistent,
}

impl FromStr for ExpandCandidates {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "consistent" => Ok(Self::Consistent),
            o => Err(Error::Config(format!("expand_candidates must be all|consistent, got {o}"))),
        }
    }
}

impl ExpandCandidates {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::Consistent => "consistent",
        }
    }
}

/// `w[i][k] = exp(−‖f_i − c_k‖) / Σ_q exp(−‖f_i − c_q‖)` over valid prototypes `c`;
/// invalid classes get weight zero.
pub fn compute_weights(features: &Tensor, bank: &PrototypeBank) -> Result<Tensor> {
    if !bank.any_valid() {
        return Err(Error::NoValidPrototypes);
    }
    let d = bank.feature_dim();
    if features.last_dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "features have dim {}, prototypes {d}",
            features.last_dim()
        )));
    }
    let k = bank.num_classes();
    let n = features.rows();
    let mut out = vec![0.0; n * k];
    let mut neg_dist = vec![0.0; k];
    for i in 0..n {
        let f = features.row(i);
        let mut max = f64::NEG_INFINITY;
        for q in 0..k {
            neg_dist[q] = match bank.centroid(q) {
                Some(eta) => {
                    let d2: f64 = f.iter().zip(eta).map(|(a, b)| (a - b) * (a - b)).sum();
                    -d2.sqrt()
                }
                None => f64::NEG_INFINITY,
            };
            max = max.max(neg_dist[q]);
        }
        let row = &mut out[i * k..(i + 1) * k];
        let mut sum = 0.0;
        for q in 0..k {
            if bank.valid[q] {
                row[q] = (neg_dist[q] - max).exp();
                sum += row[q];
            }
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::from_raw(vec![n, k], out)
}

pub fn rectify(probs: &Tensor, weights: &Tensor) -> Result<RectificationMaps> {
    if probs.shape() != weights.shape() {
        return Err(Error::ShapeMismatch(format!(
            "probs {:?} vs weights {:?}",
            probs.shape(),
            weights.shape()
        )));
    }
    let n = probs.rows();
    let k = probs.last_dim();
    let mut raw_label = Vec::with_capacity(n);
    let mut rect_label = Vec::with_capacity(n);
    let mut consistent = Vec::with_capacity(n);
    let mut score = Vec::with_capacity(n);
    let mut wp = vec![0.0; k];
    for i in 0..n {
        let p = probs.row(i);
        for ((o, a), b) in wp.iter_mut().zip(p).zip(weights.row(i)) {
            *o = a * b;
        }
        let raw = argmax(p);
        let rect = argmax(&wp);
        raw_label.push(raw as u16);
        rect_label.push(rect as u16);
        consistent.push(raw == rect);
        score.push(wp[rect]);
    }
    Ok(RectificationMaps { weights: weights.clone(), raw_label, rect_label, consistent, score })
}

/// Number of unlabeled pixels whose raw and rectified labels agree.
pub fn consistent_unlabeled(rect: &RectificationMaps, sparse: &LabelMask) -> usize {
    sparse
        .classes
        .iter()
        .zip(&rect.consistent)
        .filter(|(&c, &ok)| c == IGNORE && ok)
        .count()
}

/// The schedule multiplier `log_base(m/M + 1)`.
pub fn expansion_multiplier(m: usize, total: usize, log_base: f64) -> Result<f64> {
    if total == 0 || m == 0 || m > total {
        return Err(Error::InvalidArgument(format!("epoch {m} outside 1..={total}")));
    }
    Ok((m as f64 / total as f64 + 1.0).ln() / log_base.ln())
}

/// `N = floor(log(m/M + 1) · consistent)`; `log_base` is `e` by default.
pub fn expansion_count(m: usize, total: usize, consistent: usize, log_base: f64) -> Result<usize> {
    let mult = expansion_multiplier(m, total, log_base)?;
    Ok((mult * consistent as f64).floor() as usize)
}

/// Promote the top-`n` unlabeled pixels by score (ties by pixel index) to
/// their rectified labels. Ground-truth pixels are never touched; a request
/// larger than the candidate pool is clamped and reported.
pub fn expand(
    rect: &RectificationMaps,
    sparse: &LabelMask,
    n: usize,
    candidates: ExpandCandidates,
) -> Result<ExpansionResult> {
    if rect.score.len() != sparse.num_pixels() {
        return Err(Error::ShapeMismatch(format!(
            "{} rectified pixels vs {}-pixel mask",
            rect.score.len(),
            sparse.num_pixels()
        )));
    }
    let mut pool: Vec<usize> = (0..sparse.num_pixels())
        .filter(|&i| sparse.classes[i] == IGNORE)
        .filter(|&i| candidates == ExpandCandidates::All || rect.consistent[i])
        .collect();
    let clamped_by = n.saturating_sub(pool.len());
    if clamped_by > 0 {
        log::warn!("expansion request {n} exceeds {} candidates; clamping", pool.len());
    }
    let take = n.min(pool.len());
    let by_rank = |a: &usize, b: &usize| -> Ordering {
        rect.score[*b].total_cmp(&rect.score[*a]).then(a.cmp(b))
    };
    if take < pool.len() && take > 0 {
        pool.select_nth_unstable_by(take - 1, by_rank);
    }
    pool.truncate(take);
    pool.sort_unstable_by(by_rank);
    let mut expanded = sparse.clone();
    for &i in &pool {
        expanded.classes[i] = rect.rect_label[i];
    }
    Ok(ExpansionResult { count: pool.len(), selected: pool, expanded_mask: expanded, clamped_by })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bank(rows: &[&[f64]], valid: &[bool]) -> PrototypeBank {
        let d = rows[0].len();
        PrototypeBank {
            centroids: Tensor::new(vec![rows.len(), d], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap(),
            valid: valid.to_vec(),
            momentum: 0.999,
        }
    }

    #[test]
    fn weights_examples() {
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]], &[true; 3]);
        let f = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let w = compute_weights(&f, &b).unwrap();
        for v in w.data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }

        let b = bank(&[&[0.0], &[1.0]], &[true, true]);
        let w = compute_weights(&Tensor::new(vec![1, 1], vec![0.0]).unwrap(), &b).unwrap();
        let e = (-1.0f64).exp();
        assert_abs_diff_eq!(w.data()[0], 1.0 / (1.0 + e), epsilon = 1e-15);
        assert_abs_diff_eq!(w.data()[1], e / (1.0 + e), epsilon = 1e-15);
        assert_abs_diff_eq!(w.data()[0], 0.7311, epsilon = 1e-4);

        let b = bank(&[&[0.0], &[1.0], &[0.0]], &[true, true, false]);
        let w = compute_weights(&Tensor::new(vec![1, 1], vec![0.0]).unwrap(), &b).unwrap();
        assert_eq!(w.data()[2], 0.0);
        assert_abs_diff_eq!(w.data()[0], 1.0 / (1.0 + e), epsilon = 1e-15);

        let none = bank(&[&[0.0]], &[false]);
        assert!(matches!(compute_weights(&Tensor::zeros(&[1, 1]), &none), Err(Error::NoValidPrototypes)));
    }

    #[test]
    fn rectify_examples() {
        let p = Tensor::new(vec![1, 2], vec![0.6, 0.4]).unwrap();
        let uniform = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let r = rectify(&p, &uniform).unwrap();
        assert_eq!(r.raw_label, r.rect_label);

        let w = Tensor::new(vec![1, 2], vec![0.3, 0.7]).unwrap();
        let r = rectify(&p, &w).unwrap();
        assert_eq!((r.raw_label[0], r.rect_label[0]), (0, 1));
        assert!(!r.consistent[0]);
        assert_abs_diff_eq!(r.score[0], 0.28, epsilon = 1e-15);

        let one = Tensor::new(vec![3, 1], vec![1.0; 3]).unwrap();
        let r = rectify(&one, &one).unwrap();
        assert!(r.rect_label.iter().all(|&c| c == 0));
    }

    #[test]
    fn expansion_count_examples() {
        let e = std::f64::consts::E;
        assert_eq!(expansion_count(5, 10, 0, e).unwrap(), 0);
        assert_eq!(expansion_count(100, 100, 1000, e).unwrap(), 693);
        assert_eq!(expansion_count(50, 100, 1000, e).unwrap(), 405);
        assert_eq!(expansion_count(1, 100, 10_000, e).unwrap(), 99);
        assert!(expansion_count(0, 100, 10, e).is_err());
        assert!(expansion_count(101, 100, 10, e).is_err());
    }

    fn toy_rect(scores: &[f64], labels: &[u16], consistent: &[bool]) -> RectificationMaps {
        RectificationMaps {
            weights: Tensor::zeros(&[scores.len(), 1]),
            raw_label: labels.to_vec(),
            rect_label: labels.to_vec(),
            consistent: consistent.to_vec(),
            score: scores.to_vec(),
        }
    }

    #[test]
    fn expand_examples() {
        let sparse = LabelMask::new(1, 5, vec![IGNORE, 2, IGNORE, IGNORE, IGNORE]).unwrap();
        let rect = toy_rect(&[0.5, 0.9, 0.7, 0.7, 0.1], &[1, 1, 0, 3, 1], &[true, true, false, true, true]);

        let r = expand(&rect, &sparse, 0, ExpandCandidates::All).unwrap();
        assert_eq!(r.expanded_mask, sparse);

        let r = expand(&rect, &sparse, 2, ExpandCandidates::All).unwrap();
        assert_eq!(r.selected, vec![2, 3]);
        assert_eq!(r.expanded_mask.classes, vec![IGNORE, 2, 0, 3, IGNORE]);

        let r = expand(&rect, &sparse, 2, ExpandCandidates::Consistent).unwrap();
        assert_eq!(r.selected, vec![3, 0]);

        let r = expand(&rect, &sparse, 4, ExpandCandidates::All).unwrap();
        assert_eq!(r.expanded_mask.classes, vec![1, 2, 0, 3, 1]);
        assert_eq!(r.clamped_by, 0);

        let r = expand(&rect, &sparse, 9, ExpandCandidates::All).unwrap();
        assert_eq!((r.count, r.clamped_by), (4, 5));
        assert_eq!(r.expanded_mask.classes[1], 2);
    }
}
