//! Cross-domain loss stack with analytic gradients w.r.t. logits.
//!
//! Every function works on a mini-batch given as parallel slices of
//! per-image probability maps and label masks. Class proportions and pixel
//! counts are pooled over the whole batch.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numcore::{softmax_backward_row, Tensor};
use crate::synthdomain::{LabelMask, IGNORE};

/// Per-mini-batch class statistics over labeled pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBalance {
    pub counts: Vec<usize>,
    /// Labeled fraction of each class.
    pub mu: Vec<f64>,
    /// `1/ln(freq_k + 1)` for present classes, zero otherwise.
    pub weights: Vec<f64>,
}

pub fn class_balance_weights(masks: &[&LabelMask], k: usize) -> Result<ClassBalance> {
    let mut counts = vec![0usize; k];
    for m in masks {
        m.check_classes(k)?;
        for (c, n) in counts.iter_mut().zip(m.histogram(k)) {
            *c += n;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::NoLabels("class balance over an all-IGNORE batch".into()));
    }
    let mu: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
    let weights = mu.iter().map(|&m| if m > 0.0 { 1.0 / (m + 1.0).ln() } else { 0.0 }).collect();
    Ok(ClassBalance { counts, mu, weights })
}

/// Scalar loss plus `dL/dlogits` for every image of the batch.
#[derive(Clone, Debug)]
pub struct BranchLoss {
    pub value: f64,
    pub dlogits: Vec<Tensor>,
}

impl BranchLoss {
    fn zero(probs: &[&Tensor]) -> Self {
        Self { value: 0.0, dlogits: probs.iter().map(|p| Tensor::zeros(p.shape())).collect() }
    }
}

fn check_batch(probs: &[&Tensor], masks: &[&LabelMask]) -> Result<()> {
    if probs.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!("{} prob maps vs {} masks", probs.len(), masks.len())));
    }
    for (p, m) in probs.iter().zip(masks) {
        if p.rows() != m.num_pixels() {
            return Err(Error::ShapeMismatch(format!("probs {:?} vs mask {}x{}", p.shape(), m.height, m.width)));
        }
    }
    Ok(())
}

/// How class-balanced cross-entropy is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CeReduction {
    /// `(1/N) Σ_i w_{y_i} (−ln p_i,y_i)` over all `N` labeled pixels.
    #[default]
    PixelMean,
    /// `Σ_k w_k · mean_{i∈k}(−ln p_ik)`.
    ClassMean,
}

impl FromStr for CeReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel_mean" => Ok(Self::PixelMean),
            "class_mean" => Ok(Self::ClassMean),
            o => Err(Error::Config(format!("ce_reduction must be pixel_mean|class_mean, got {o}"))),
        }
    }
}

impl CeReduction {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PixelMean => "pixel_mean",
            Self::ClassMean => "class_mean",
        }
    }
}

/// Class-weighted cross-entropy with weights from
/// [`class_balance_weights`]. Without `class_balance` both reductions give
/// the plain mean cross-entropy over labeled pixels.
pub fn balanced_ce(
    probs: &[&Tensor],
    masks: &[&LabelMask],
    class_balance: bool,
    reduction: CeReduction,
) -> Result<(BranchLoss, ClassBalance)> {
    check_batch(probs, masks)?;
    let k = probs.first().map(|p| p.last_dim()).unwrap_or(0);
    let cb = class_balance_weights(masks, k)?;
    let total: usize = cb.counts.iter().sum();
    // per-pixel coefficient for each class
    let coef: Vec<f64> = (0..k)
        .map(|c| match (class_balance, reduction, cb.counts[c]) {
            (_, _, 0) => 0.0,
            (false, _, _) => 1.0 / total as f64,
            (true, CeReduction::PixelMean, _) => cb.weights[c] / total as f64,
            (true, CeReduction::ClassMean, n) => cb.weights[c] / n as f64,
        })
        .collect();
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(probs.len());
    for (p, m) in probs.iter().zip(masks) {
        let mut g = Tensor::zeros(p.shape());
        for (i, &c) in m.classes.iter().enumerate() {
            if c == IGNORE {
                continue;
            }
            let c = c as usize;
            let row = p.row(i);
            value -= coef[c] * row[c].ln();
            let gr = g.row_mut(i);
            for (q, (gv, &pv)) in gr.iter_mut().zip(row).enumerate() {
                *gv = coef[c] * (pv - if q == c { 1.0 } else { 0.0 });
            }
        }
        grads.push(g);
    }
    Ok((BranchLoss { value, dlogits: grads }, cb))
}

/// Mean of `Σ_k |p_ik − w_ik p_ik|` over the unlabeled pixels `i` of the
/// sparse masks, with `w` held constant. Zero when no pixel is unlabeled.
pub fn rectification_loss(probs: &[&Tensor], weights: &[&Tensor], sparse: &[&LabelMask]) -> Result<BranchLoss> {
    check_batch(probs, sparse)?;
    if weights.len() != probs.len() || probs.iter().zip(weights).any(|(p, w)| p.shape() != w.shape()) {
        return Err(Error::ShapeMismatch("weights do not match probability maps".into()));
    }
    let n_u: usize = sparse.iter().map(|m| m.num_pixels() - m.labeled_count()).sum();
    if n_u == 0 {
        return Ok(BranchLoss::zero(probs));
    }
    let scale = 1.0 / n_u as f64;
    let k = probs[0].last_dim();
    let mut dp = vec![0.0; k];
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(probs.len());
    for ((p, w), m) in probs.iter().zip(weights).zip(sparse) {
        let mut g = Tensor::zeros(p.shape());
        for (i, &c) in m.classes.iter().enumerate() {
            if c != IGNORE {
                continue;
            }
            let (prow, wrow) = (p.row(i), w.row(i));
            for q in 0..k {
                value += scale * (prow[q] - wrow[q] * prow[q]).abs();
                dp[q] = scale * (1.0 - wrow[q]);
            }
            softmax_backward_row(prow, &dp, g.row_mut(i));
        }
        grads.push(g);
    }
    Ok(BranchLoss { value, dlogits: grads })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossToggles {
    pub source_seg: bool,
    pub target_seg: bool,
    pub class_balance: bool,
    pub rectification: bool,
    pub ce_reduction: CeReduction,
}

impl LossToggles {
    pub const ALL: LossToggles =
        LossToggles {
            source_seg: true,
            target_seg: true,
            class_balance: true,
            rectification: true,
            ce_reduction: CeReduction::PixelMean,
        };
    pub const NONE: LossToggles =
        LossToggles {
            source_seg: false,
            target_seg: false,
            class_balance: false,
            rectification: false,
            ce_reduction: CeReduction::PixelMean,
        };
}

pub struct SourceBatch<'a> {
    pub probs: &'a [&'a Tensor],
    pub labels: &'a [&'a LabelMask],
}

pub struct TargetBatch<'a> {
    pub probs: &'a [&'a Tensor],
    /// Ground truth plus promoted pseudo-labels.
    pub expanded: &'a [&'a LabelMask],
    /// Ground truth only; its IGNORE pixels form the unlabeled area.
    pub sparse: &'a [&'a LabelMask],
    pub weights: &'a [&'a Tensor],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub source_seg: f64,
    pub target_seg: f64,
    pub rectification: f64,
    pub total: f64,
    /// Class proportions of the target segmentation term (empty if off).
    pub mu_target: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub breakdown: LossBreakdown,
    pub source_dlogits: Vec<Tensor>,
    pub target_dlogits: Vec<Tensor>,
}

/// Sum of source segmentation, target segmentation and rectification losses, each switchable.
pub fn total_loss(source: Option<&SourceBatch>, target: Option<&TargetBatch>, toggles: LossToggles) -> Result<TotalLoss> {
    let mut source_dlogits: Vec<Tensor> = source.map(|s| BranchLoss::zero(s.probs).dlogits).unwrap_or_default();
    let mut target_dlogits: Vec<Tensor> = target.map(|t| BranchLoss::zero(t.probs).dlogits).unwrap_or_default();
    let mut bd = LossBreakdown { source_seg: 0.0, target_seg: 0.0, rectification: 0.0, total: 0.0, mu_target: Vec::new() };

    if let (Some(s), true) = (source, toggles.source_seg) {
        let (l, _) = balanced_ce(s.probs, s.labels, toggles.class_balance, toggles.ce_reduction)?;
        bd.source_seg = l.value;
        source_dlogits = l.dlogits;
    }
    if let Some(t) = target {
        if toggles.target_seg {
            let (l, cb) = balanced_ce(t.probs, t.expanded, toggles.class_balance, toggles.ce_reduction)?;
            bd.target_seg = l.value;
            bd.mu_target = cb.mu;
            for (acc, g) in target_dlogits.iter_mut().zip(&l.dlogits) {
                acc.add_assign(g)?;
            }
        }
        if toggles.rectification {
            let l = rectification_loss(t.probs, t.weights, t.sparse)?;
            bd.rectification = l.value;
            for (acc, g) in target_dlogits.iter_mut().zip(&l.dlogits) {
                acc.add_assign(g)?;
            }
        }
    }
    bd.total = bd.source_seg + bd.target_seg + bd.rectification;
    Ok(TotalLoss { breakdown: bd, source_dlogits, target_dlogits })
}
