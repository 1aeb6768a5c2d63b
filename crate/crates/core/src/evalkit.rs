//! Confusion-matrix metrics, sparse/dense evaluation, and PPM class maps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::segmodel::ModelState;
use crate::synthdomain::{DomainSample, LabelMask, Window, IGNORE};
use crate::util::atomic_write;

/// Rows are truth, columns are prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add_pixel(&mut self, truth: u16, pred: u16) -> Result<()> {
        if truth == IGNORE {
            return Ok(());
        }
        let (t, p) = (truth as usize, pred as usize);
        if t >= self.k || p >= self.k {
            return Err(Error::InvalidArgument(format!("class pair ({t}, {p}) out of range for K={}", self.k)));
        }
        self.counts[t * self.k + p] += 1;
        Ok(())
    }

    /// Tally every non-IGNORE truth pixel.
    pub fn accumulate(&mut self, truth: &LabelMask, pred: &LabelMask) -> Result<()> {
        if truth.height != pred.height || truth.width != pred.width {
            return Err(Error::ShapeMismatch("truth and prediction grids differ".into()));
        }
        for (&t, &p) in truth.classes.iter().zip(&pred.classes) {
            self.add_pixel(t, p)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::ShapeMismatch("confusion matrices of different K".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MetricReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::NoLabels("empty confusion matrix".into()));
        }
        let k = self.k;
        let diag: Vec<u64> = (0..k).map(|c| self.get(c, c)).collect();
        let row: Vec<u64> = (0..k).map(|t| (0..k).map(|p| self.get(t, p)).sum()).collect();
        let col: Vec<u64> = (0..k).map(|p| (0..k).map(|t| self.get(t, p)).sum()).collect();
        let mut f1 = vec![None; k];
        let mut iou = vec![None; k];
        let mut pa = vec![None; k];
        for c in 0..k {
            if row[c] == 0 {
                continue;
            }
            let (d, r, p) = (diag[c] as f64, row[c] as f64, col[c] as f64);
            pa[c] = Some(d / r);
            f1[c] = Some(2.0 * d / (r + p));
            iou[c] = Some(d / (r + p - d));
        }
        let mean = |v: &[Option<f64>]| {
            let defined: Vec<f64> = v.iter().flatten().copied().collect();
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        Ok(MetricReport {
            oa: diag.iter().sum::<u64>() as f64 / total as f64,
            mf1: mean(&f1),
            miou: mean(&iou),
            f1,
            iou,
            pa,
            pixels: row,
        })
    }
}

/// Per-class entries are `None` for classes with no truth pixels; those are
/// left out of the means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub oa: f64,
    pub mf1: f64,
    pub miou: f64,
    pub f1: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
    pub pa: Vec<Option<f64>>,
    pub pixels: Vec<u64>,
}

impl MetricReport {
    /// `class,f1,iou,pa,pixels` rows, then `OA`, `mF1`, `mIoU` summary rows.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".to_string());
        let mut s = String::from("class,f1,iou,pa,pixels\n");
        for c in 0..self.pixels.len() {
            writeln!(s, "{c},{},{},{},{}", fmt(self.f1[c]), fmt(self.iou[c]), fmt(self.pa[c]), self.pixels[c]).unwrap();
        }
        writeln!(s, "OA,{:.6}", self.oa).unwrap();
        writeln!(s, "mF1,{:.6}", self.mf1).unwrap();
        writeln!(s, "mIoU,{:.6}", self.miou).unwrap();
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_csv().as_bytes())
    }
}

/// Argmax class map of the model over a sample.
pub fn predict(model: &ModelState, sample: &DomainSample) -> Result<LabelMask> {
    let maps = model.forward(&sample.raster, false)?;
    LabelMask::new(maps.height, maps.width, maps.predicted_classes())
}

/// Truth for sparse scoring: labeled pixels outside the dense window.
pub fn sparse_truth(sample: &DomainSample) -> LabelMask {
    let mut t = sample.labels.clone();
    if let Some(w) = sample.dense_eval_window {
        blank_window(&mut t, &w);
    }
    t
}

fn blank_window(mask: &mut LabelMask, w: &Window) {
    for r in w.y..w.y + w.h {
        mask.classes[r * mask.width + w.x..r * mask.width + w.x + w.w].fill(IGNORE);
    }
}

/// Window truth and the matching crop of a prediction.
pub fn dense_pair(sample: &DomainSample, pred: &LabelMask) -> Result<(LabelMask, LabelMask)> {
    let w = sample
        .dense_eval_window
        .ok_or_else(|| Error::InvalidArgument("sample has no dense evaluation window".into()))?;
    let truth = sample.labels.crop(&w);
    if truth.labeled_count() != truth.num_pixels() {
        return Err(Error::InvalidArgument("dense window is not fully labeled".into()));
    }
    Ok((truth, pred.crop(&w)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Sparse,
    Dense,
}

/// Confusion matrix of `preds` against `samples` under a protocol.
pub fn confusion(samples: &[DomainSample], preds: &[LabelMask], k: usize, protocol: Protocol) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(k);
    for (s, p) in samples.iter().zip(preds) {
        match protocol {
            Protocol::Sparse => cm.accumulate(&sparse_truth(s), p)?,
            Protocol::Dense => {
                let (t, pc) = dense_pair(s, p)?;
                cm.accumulate(&t, &pc)?;
            }
        }
    }
    Ok(cm)
}

pub fn evaluate_sparse(model: &ModelState, samples: &[DomainSample]) -> Result<MetricReport> {
    let preds = samples.iter().map(|s| predict(model, s)).collect::<Result<Vec<_>>>()?;
    confusion(samples, &preds, model.config.num_classes, Protocol::Sparse)?.report()
}

pub fn evaluate_dense(model: &ModelState, samples: &[DomainSample]) -> Result<MetricReport> {
    let preds = samples.iter().map(|s| predict(model, s)).collect::<Result<Vec<_>>>()?;
    confusion(samples, &preds, model.config.num_classes, Protocol::Dense)?.report()
}

pub type Palette = Vec<[u8; 3]>;

/// Evenly spaced hues, distinct for up to a few dozen classes.
pub fn default_palette(k: usize) -> Palette {
    (0..k)
        .map(|i| {
            let h = i as f64 / k.max(1) as f64 * 6.0;
            let x = 1.0 - ((h % 2.0) - 1.0).abs();
            let (r, g, b) = match h as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            let v = if i % 2 == 0 { 255.0 } else { 170.0 };
            [(r * v) as u8, (g * v) as u8, (b * v) as u8]
        })
        .collect()
}

/// Palette file: one `r g b` triple per line, class order.
pub fn parse_palette(text: &str) -> Result<Palette> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(ln, l)| {
            let v: Vec<u8> = l
                .split_whitespace()
                .map(|t| t.parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse { line: ln + 1, msg: e.to_string() })?;
            match v.as_slice() {
                [r, g, b] => Ok([*r, *g, *b]),
                _ => Err(Error::Parse { line: ln + 1, msg: "expected `r g b`".into() }),
            }
        })
        .collect()
}

/// Binary PPM (P6) of a class map; IGNORE renders black.
pub fn render_ppm(mask: &LabelMask, palette: &Palette) -> Result<Vec<u8>> {
    if let Some(&c) = mask.classes.iter().find(|&&c| c != IGNORE && c as usize >= palette.len()) {
        return Err(Error::InvalidArgument(format!("class {c} has no palette entry ({} colors)", palette.len())));
    }
    let mut out = format!("P6\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.reserve(mask.classes.len() * 3);
    for &c in &mask.classes {
        out.extend_from_slice(if c == IGNORE { &[0, 0, 0] } else { &palette[c as usize] });
    }
    Ok(out)
}

pub fn render_map(mask: &LabelMask, palette: &Palette, path: &Path) -> Result<()> {
    atomic_write(path, &render_ppm(mask, palette)?)
}

/// Recover a class map from a PPM rendered with an injective palette; black
/// pixels not in the palette become IGNORE.
pub fn invert_ppm(bytes: &[u8], palette: &Palette) -> Result<LabelMask> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Truncated("PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::InvalidArgument("not an 8-bit P6 PPM".into()));
    }
    let dim = |s: &str| s.parse::<usize>().map_err(|_| Error::InvalidArgument(format!("bad PPM extent {s}")));
    let (w, h) = (dim(&fields[1])?, dim(&fields[2])?);
    let payload = bytes.get(pos..).filter(|p| p.len() == w * h * 3).ok_or_else(|| Error::Truncated("PPM payload".into()))?;
    let classes = payload
        .chunks_exact(3)
        .map(|px| {
            palette
                .iter()
                .position(|c| c == px)
                .map(|i| i as u16)
                .or_else(|| (px == [0, 0, 0]).then_some(IGNORE))
                .ok_or_else(|| Error::InvalidArgument(format!("color {px:?} not in palette")))
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMask::new(h, w, classes)
}

pub fn read_palette(path: &Path) -> Result<Palette> {
    parse_palette(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cm_from(rows: &[&[u64]]) -> ConfusionMatrix {
        let k = rows.len();
        ConfusionMatrix { k, counts: rows.iter().flat_map(|r| r.iter().copied()).collect() }
    }

    #[test]
    fn perfect_prediction() {
        let m = LabelMask::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&m, &m).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                if t != p {
                    assert_eq!(cm.get(t, p), 0);
                }
            }
        }
        let r = cm.report().unwrap();
        assert_eq!((r.oa, r.mf1, r.miou), (1.0, 1.0, 1.0));
        assert!(r.pa.iter().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn ignore_truth_is_skipped() {
        let t = LabelMask::filled(2, 2, IGNORE);
        let p = LabelMask::filled(2, 2, 1);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&t, &p).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2));
        assert!(cm.report().is_err());
        let bad = LabelMask::filled(2, 2, 5);
        assert!(cm.accumulate(&bad, &p).is_err());
    }

    #[test]
    fn two_class_hand_oracle() {
        let r = cm_from(&[&[3, 1], &[2, 4]]).report().unwrap();
        assert_abs_diff_eq!(r.oa, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(r.pa[0].unwrap(), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(r.pa[1].unwrap(), 4.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.iou[0].unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.iou[1].unwrap(), 4.0 / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.f1[0].unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.f1[1].unwrap(), 8.0 / 11.0, epsilon = 1e-12);
    }

    #[test]
    fn classes_without_truth_excluded() {
        let r = cm_from(&[&[5, 0, 1], &[0, 0, 0], &[0, 2, 2]]).report().unwrap();
        assert!(r.f1[1].is_none() && r.iou[1].is_none());
        let expect = (r.iou[0].unwrap() + r.iou[2].unwrap()) / 2.0;
        assert_abs_diff_eq!(r.miou, expect, epsilon = 1e-15);
        assert!(r.to_csv().contains("\n1,-,-,-,0\n"));
        assert!(r.to_csv().ends_with(&format!("mIoU,{:.6}\n", r.miou)));
    }

    #[test]
    fn ppm_examples() {
        let m = LabelMask::filled(1, 1, 0);
        let pal = vec![[255, 0, 0]];
        let b = render_ppm(&m, &pal).unwrap();
        // the "P6\n1 1\n255\n" header is 11 bytes
        assert_eq!(&b[..11], b"P6\n1 1\n255\n");
        assert_eq!(&b[11..], &[255, 0, 0]);
        assert_eq!(b.len(), 11 + 3);

        let m = LabelMask::new(2, 3, vec![0, IGNORE, 2, 1, 1, 0]).unwrap();
        let pal = default_palette(3);
        let b = render_ppm(&m, &pal).unwrap();
        assert_eq!(invert_ppm(&b, &pal).unwrap(), m);
        assert!(render_ppm(&LabelMask::filled(1, 1, 7), &pal).is_err());
    }

    #[test]
    fn palette_text() {
        assert_eq!(parse_palette("255 0 0\n0 255 0\n").unwrap(), vec![[255, 0, 0], [0, 255, 0]]);
        assert!(parse_palette("1 2\n").is_err());
        assert!(parse_palette("1 2 300\n").is_err());
        let p = default_palette(8);
        let mut uniq = p.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 8);
        assert!(!p.contains(&[0, 0, 0]));
    }
}
