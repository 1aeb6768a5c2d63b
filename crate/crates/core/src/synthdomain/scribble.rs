//! Weak-label simulation: annotators mark small single-class blocks spread
//! over the image and leave everything else unlabeled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabelMask, Window, IGNORE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SparsifyConfig {
    pub blocks_per_class: usize,
    /// Inclusive side-length range for square-ish blocks.
    pub block_size_range: (usize, usize),
    /// Minimum chessboard distance from any pixel of another class.
    pub boundary_margin: usize,
    /// Class annotated with 1-pixel-tall line blocks (road-like).
    pub line_class: Option<u16>,
    /// Placement attempts per block before giving up on it.
    pub max_attempts: usize,
}

impl Default for SparsifyConfig {
    fn default() -> Self {
        Self {
            blocks_per_class: 4,
            block_size_range: (4, 10),
            boundary_margin: 2,
            line_class: None,
            max_attempts: 64,
        }
    }
}

/// Chessboard distance from each pixel to the nearest pixel of a different
/// class; `usize::MAX` when the mask is a single class.
fn boundary_distance(dense: &LabelMask) -> Vec<usize> {
    let (h, w) = (dense.height, dense.width);
    let inf = usize::MAX / 2;
    let mut d = vec![inf; h * w];
    let at = |r: usize, c: usize| dense.classes[r * w + c];
    for r in 0..h {
        for c in 0..w {
            let me = at(r, c);
            let mut edge = false;
            'n: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w && at(rr as usize, cc as usize) != me {
                        edge = true;
                        break 'n;
                    }
                }
            }
            if edge {
                d[r * w + c] = 1;
            }
        }
    }
    // two-pass chamfer with unit weights gives the exact chessboard metric
    for r in 0..h {
        for c in 0..w {
            let mut v = d[r * w + c];
            if r > 0 {
                v = v.min(d[(r - 1) * w + c] + 1);
                if c > 0 {
                    v = v.min(d[(r - 1) * w + c - 1] + 1);
                }
                if c + 1 < w {
                    v = v.min(d[(r - 1) * w + c + 1] + 1);
                }
            }
            if c > 0 {
                v = v.min(d[r * w + c - 1] + 1);
            }
            d[r * w + c] = v;
        }
    }
    for r in (0..h).rev() {
        for c in (0..w).rev() {
            let mut v = d[r * w + c];
            if r + 1 < h {
                v = v.min(d[(r + 1) * w + c] + 1);
                if c > 0 {
                    v = v.min(d[(r + 1) * w + c - 1] + 1);
                }
                if c + 1 < w {
                    v = v.min(d[(r + 1) * w + c + 1] + 1);
                }
            }
            if c + 1 < w {
                v = v.min(d[r * w + c + 1] + 1);
            }
            d[r * w + c] = v;
        }
    }
    d.into_iter().map(|v| if v >= inf { usize::MAX } else { v }).collect()
}

/// Turn a dense mask into sparse single-class blocks.
///
/// A pixel `i` of class `k` is eligible when its distance to the nearest
/// other-class pixel exceeds `boundary_margin`; a block is kept only if every
/// pixel is eligible, of class `k`, and not already labeled.
pub fn sparsify(dense: &LabelMask, seed: u64, cfg: &SparsifyConfig) -> Result<LabelMask> {
    if dense.classes.contains(&IGNORE) {
        return Err(Error::InvalidArgument("dense mask contains IGNORE pixels".into()));
    }
    let (lo, hi) = cfg.block_size_range;
    if lo == 0 || lo > hi {
        return Err(Error::InvalidArgument(format!("block size range {lo}..={hi}")));
    }
    let (h, w) = (dense.height, dense.width);
    let dist = boundary_distance(dense);
    let mut out = LabelMask::filled(h, w, IGNORE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let max_class = dense.classes.iter().copied().max().unwrap_or(0) as usize;
    let mut eligible: Vec<Vec<usize>> = vec![Vec::new(); max_class + 1];
    for (i, &c) in dense.classes.iter().enumerate() {
        if dist[i] > cfg.boundary_margin {
            eligible[c as usize].push(i);
        }
    }

    for (class, cands) in eligible.iter().enumerate() {
        if cands.is_empty() {
            continue;
        }
        for _ in 0..cfg.blocks_per_class {
            let (bh, bw) = if cfg.line_class == Some(class as u16) {
                (1, rng.gen_range(lo..=hi) * 2)
            } else {
                (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi))
            };
            for _ in 0..cfg.max_attempts {
                let anchor = cands[rng.gen_range(0..cands.len())];
                let (ar, ac) = (anchor / w, anchor % w);
                // center the block on the anchor
                let (top, left) = (ar.saturating_sub(bh / 2), ac.saturating_sub(bw / 2));
                if top + bh > h || left + bw > w {
                    continue;
                }
                let ok = (top..top + bh).all(|r| {
                    (left..left + bw).all(|c| {
                        let i = r * w + c;
                        dense.classes[i] as usize == class
                            && dist[i] > cfg.boundary_margin
                            && out.classes[i] == IGNORE
                    })
                });
                if ok {
                    for r in top..top + bh {
                        out.classes[r * w + left..r * w + left + bw].fill(class as u16);
                    }
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// Sparse labels everywhere plus dense truth inside `window`.
pub fn overlay_window(sparse: &LabelMask, dense: &LabelMask, window: &Window) -> Result<LabelMask> {
    if sparse.height != dense.height || sparse.width != dense.width {
        return Err(Error::ShapeMismatch("sparse and dense masks differ in size".into()));
    }
    if !window.fits(dense.height, dense.width) {
        return Err(Error::InvalidArgument(format!("window {window:?} outside mask")));
    }
    let mut out = sparse.clone();
    for r in window.y..window.y + window.h {
        let row = r * dense.width;
        out.classes[row + window.x..row + window.x + window.w]
            .copy_from_slice(&dense.classes[row + window.x..row + window.x + window.w]);
    }
    Ok(out)
}
