//! Brute-force reference implementations, written without reusing any
//! library arithmetic. Shared by the acceptance harness and integration tests.

#![allow(dead_code)]

use pre_core::synthdomain::IGNORE;

/// Dense row-major matrix helper for the reference model.
pub struct RefLayer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Reference per-pixel MLP over clamp-to-edge windows.
pub struct RefModel {
    pub bands: usize,
    pub radius: usize,
    pub layers: Vec<RefLayer>,
}

impl RefModel {
    /// Unpack a flat parameter vector laid out as `W0, b0, W1, b1, ...`.
    pub fn from_flat(bands: usize, radius: usize, widths: &[usize], theta: &[f64]) -> Self {
        let mut layers = Vec::new();
        let mut off = 0;
        for pair in widths.windows(2) {
            let (fi, fo) = (pair[0], pair[1]);
            let w = theta[off..off + fi * fo].to_vec();
            off += fi * fo;
            let b = theta[off..off + fo].to_vec();
            off += fo;
            layers.push(RefLayer { fan_in: fi, fan_out: fo, w, b });
        }
        assert_eq!(off, theta.len());
        Self { bands, radius, layers }
    }

    fn window(&self, values: &[f32], h: usize, w: usize, row: usize, col: usize) -> Vec<f64> {
        let r = self.radius as isize;
        let mut x = Vec::new();
        for dr in -r..=r {
            for dc in -r..=r {
                let rr = (row as isize + dr).max(0).min(h as isize - 1) as usize;
                let cc = (col as isize + dc).max(0).min(w as isize - 1) as usize;
                for b in 0..self.bands {
                    x.push(values[(rr * w + cc) * self.bands + b] as f64);
                }
            }
        }
        x
    }

    /// Per-pixel `(features, probabilities, min |pre-activation|)`.
    pub fn pixel(&self, values: &[f32], h: usize, w: usize, row: usize, col: usize) -> (Vec<f64>, Vec<f64>, f64) {
        let mut x = self.window(values, h, w, row, col);
        let mut margin = f64::INFINITY;
        let last = self.layers.len() - 1;
        let mut feats = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            let mut y = vec![0.0; l.fan_out];
            for o in 0..l.fan_out {
                let mut s = l.b[o];
                for i in 0..l.fan_in {
                    s += x[i] * l.w[i * l.fan_out + o];
                }
                y[o] = s;
            }
            if li < last {
                for v in y.iter_mut() {
                    margin = margin.min(v.abs());
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                feats = y.clone();
            }
            x = y;
        }
        (feats, naive_softmax(&x), margin)
    }

    pub fn probs(&self, values: &[f32], h: usize, w: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                out.push(self.pixel(values, h, w, r, c).1);
            }
        }
        out
    }
}

pub fn naive_softmax(z: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 0..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// `(counts, freq, 1/ln(1+freq))` over every labeled pixel of every mask.
pub fn ref_class_balance(masks: &[&[u16]], k: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut counts = vec![0usize; k];
    for m in masks {
        for &c in m.iter() {
            if c != IGNORE {
                counts[c as usize] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let mu: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
    let w = mu.iter().map(|&m| if m > 0.0 { 1.0 / (1.0 + m).ln() } else { 0.0 }).collect();
    (counts, mu, w)
}

/// Class-balanced cross-entropy over a batch. `class_mean` selects
/// `Σ_k w_k·mean_k CE`; otherwise `(1/N) Σ_i w_{y_i} CE_i`.
pub fn ref_ce(probs: &[Vec<Vec<f64>>], masks: &[&[u16]], k: usize, balance: bool, class_mean: bool) -> f64 {
    let (counts, _, w) = ref_class_balance(masks, k);
    let total: usize = counts.iter().sum();
    let mut per_class = vec![0.0; k];
    for (p, m) in probs.iter().zip(masks) {
        for (i, &c) in m.iter().enumerate() {
            if c != IGNORE {
                per_class[c as usize] += -p[i][c as usize].ln();
            }
        }
    }
    let mut loss = 0.0;
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let wc = if balance { w[c] } else { 1.0 };
        let denom = if balance && class_mean { counts[c] as f64 } else { total as f64 };
        loss += wc * per_class[c] / denom;
    }
    loss
}

/// Mean over unlabeled pixels of `Σ_k |p − w·p|`, pooled over the batch.
pub fn ref_rect_loss(probs: &[Vec<Vec<f64>>], weights: &[Vec<Vec<f64>>], sparse: &[&[u16]]) -> f64 {
    let mut n_u = 0usize;
    let mut s = 0.0;
    for ((p, w), m) in probs.iter().zip(weights).zip(sparse) {
        for (i, &c) in m.iter().enumerate() {
            if c == IGNORE {
                n_u += 1;
                for q in 0..p[i].len() {
                    s += (p[i][q] - w[i][q] * p[i][q]).abs();
                }
            }
        }
    }
    if n_u == 0 {
        0.0
    } else {
        s / n_u as f64
    }
}

/// Prototype weights: softmax of negative Euclidean distances over valid
/// classes, computed without max-subtraction.
pub fn ref_weights(f: &[f64], protos: &[Vec<f64>], valid: &[bool]) -> Vec<f64> {
    let e: Vec<f64> = protos
        .iter()
        .zip(valid)
        .map(|(eta, &ok)| {
            if !ok {
                return 0.0;
            }
            let d: f64 = f.iter().zip(eta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            (-d).exp()
        })
        .collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Top-`n` unlabeled pixels by `max_k w·p` via a full stable sort.
pub fn ref_expand(score: &[f64], sparse: &[u16], n: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..sparse.len()).filter(|&i| sparse[i] == IGNORE).collect();
    pool.sort_by(|&a, &b| score[b].partial_cmp(&score[a]).unwrap());
    pool.truncate(n);
    pool
}

/// Per-class `(f1, iou, pa)` plus OA from a `truth × pred` count table;
/// classes without truth pixels give `None`.
pub struct RefReport {
    pub oa: f64,
    pub f1: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
    pub pa: Vec<Option<f64>>,
    pub mf1: f64,
    pub miou: f64,
}

pub fn ref_report(cm: &[Vec<u64>]) -> RefReport {
    let k = cm.len();
    let total: u64 = cm.iter().flatten().sum();
    let diag: u64 = (0..k).map(|i| cm[i][i]).sum();
    let mut f1 = Vec::new();
    let mut iou = Vec::new();
    let mut pa = Vec::new();
    for c in 0..k {
        let tp = cm[c][c] as f64;
        let truth: u64 = cm[c].iter().sum();
        let pred: u64 = (0..k).map(|r| cm[r][c]).sum();
        if truth == 0 {
            f1.push(None);
            iou.push(None);
            pa.push(None);
            continue;
        }
        let fp = pred as f64 - tp;
        let fn_ = truth as f64 - tp;
        f1.push(Some(2.0 * tp / (2.0 * tp + fp + fn_)));
        iou.push(Some(tp / (tp + fp + fn_)));
        pa.push(Some(tp / truth as f64));
    }
    let mean = |v: &[Option<f64>]| {
        let xs: Vec<f64> = v.iter().flatten().copied().collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    RefReport { oa: diag as f64 / total as f64, mf1: mean(&f1), miou: mean(&iou), f1, iou, pa }
}
