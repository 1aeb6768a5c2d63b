//! Class prototypes: per-class mean target features over the sparse ground
//! truth, initialized once over the whole target set and then tracked with a
//! per-iteration exponential moving average.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::segmodel::ModelState;
use crate::synthdomain::{DomainSample, LabelMask, IGNORE};
use crate::util::{atomic_write, checked_extent, Reader};

pub const PROTO_MAGIC: [u8; 4] = *b"PREP";
const PROTO_VERSION: u32 = 1;
pub const DEFAULT_EMA_MOMENTUM: f64 = 0.999;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    /// K×D centroids; rows of invalid classes are zero and never read.
    pub centroids: Tensor,
    pub valid: Vec<bool>,
    pub momentum: f64,
}

/// Per-class feature means over one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchCentroids {
    pub centroids: Tensor,
    /// Labeled pixel count per class; zero means the class is absent.
    pub counts: Vec<usize>,
}

impl BatchCentroids {
    pub fn present(&self, k: usize) -> bool {
        self.counts[k] > 0
    }
}

/// Per-class sums and counts of features over labeled pixels.
fn accumulate(pairs: &[(&Tensor, &LabelMask)], k: usize) -> Result<(Vec<f64>, Vec<usize>, usize)> {
    let d = match pairs.first() {
        Some((f, _)) => f.last_dim(),
        None => return Ok((Vec::new(), vec![0; k], 0)),
    };
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (feats, mask) in pairs {
        if feats.rows() != mask.num_pixels() || feats.last_dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "features {:?} vs mask {}x{}",
                feats.shape(),
                mask.height,
                mask.width
            )));
        }
        for (i, &c) in mask.classes.iter().enumerate() {
            if c == IGNORE {
                continue;
            }
            let c = c as usize;
            if c >= k {
                return Err(Error::InvalidArgument(format!("label {c} >= K={k}")));
            }
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(feats.row(i)) {
                *s += v;
            }
        }
    }
    Ok((sums, counts, d))
}

fn means(sums: Vec<f64>, counts: &[usize], d: usize) -> Tensor {
    let k = counts.len();
    let mut out = sums;
    for (c, &n) in counts.iter().enumerate() {
        let row = &mut out[c * d..(c + 1) * d];
        if n == 0 {
            row.fill(0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    Tensor::from_raw(vec![k, d], out).expect("k×d payload")
}

pub fn batch_centroids(pairs: &[(&Tensor, &LabelMask)], k: usize) -> Result<BatchCentroids> {
    let (sums, counts, d) = accumulate(pairs, k)?;
    let d = d.max(1);
    let sums = if sums.is_empty() { vec![0.0; k * d] } else { sums };
    Ok(BatchCentroids { centroids: means(sums, &counts, d), counts })
}

impl PrototypeBank {
    /// Dataset-wide class means of features over labeled pixels.
    pub fn from_features(pairs: &[(&Tensor, &LabelMask)], k: usize, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("EMA momentum {momentum} not in [0,1)")));
        }
        let (sums, counts, d) = accumulate(pairs, k)?;
        if counts.iter().all(|&n| n == 0) {
            return Err(Error::NoLabels("no labeled target pixels for prototype initialization".into()));
        }
        Ok(Self {
            centroids: means(sums, &counts, d),
            valid: counts.iter().map(|&n| n > 0).collect(),
            momentum,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.valid.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.centroids.last_dim()
    }

    pub fn any_valid(&self) -> bool {
        self.valid.iter().any(|&v| v)
    }

    pub fn centroid(&self, k: usize) -> Option<&[f64]> {
        self.valid[k].then(|| self.centroids.row(k))
    }

    /// `c ← m·c + (1−m)·b` with momentum `m` and batch centroid `b`, for
    /// classes present in the batch; a class seen for the first time adopts `b`.
    pub fn ema_update(&mut self, batch: &BatchCentroids) -> Result<()> {
        if batch.centroids.shape() != self.centroids.shape() {
            return Err(Error::ShapeMismatch(format!(
                "batch centroids {:?} vs bank {:?}",
                batch.centroids.shape(),
                self.centroids.shape()
            )));
        }
        let lambda = self.momentum;
        for k in 0..self.num_classes() {
            if !batch.present(k) {
                continue;
            }
            let new = batch.centroids.row(k);
            let row = self.centroids.row_mut(k);
            if self.valid[k] {
                for (e, n) in row.iter_mut().zip(new) {
                    *e = lambda * *e + (1.0 - lambda) * n;
                }
            } else {
                row.copy_from_slice(new);
                self.valid[k] = true;
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let k = u32::try_from(self.num_classes()).map_err(|_| Error::DimensionOverflow("K".into()))?;
        let d = u32::try_from(self.feature_dim()).map_err(|_| Error::DimensionOverflow("D".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(&PROTO_MAGIC);
        out.extend_from_slice(&PROTO_VERSION.to_le_bytes());
        out.extend_from_slice(&k.to_le_bytes());
        out.extend_from_slice(&d.to_le_bytes());
        out.extend(self.valid.iter().map(|&v| v as u8));
        for v in self.centroids.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// The momentum is not stored; decoded banks use `momentum`.
    pub fn decode(bytes: &[u8], momentum: f64) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        rd.magic(&PROTO_MAGIC)?;
        let version = rd.u32("version")?;
        if version != PROTO_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let (k, d) = (rd.u32("K")?, rd.u32("D")?);
        let n = checked_extent(&[k, d], "prototypes")?;
        let valid = rd
            .take(k as usize, "validity flags")?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                x => Err(Error::InvalidArgument(format!("validity byte {x}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let nbytes = n.checked_mul(8).ok_or_else(|| Error::DimensionOverflow("prototype payload".into()))?;
        let data = rd
            .take(nbytes, "centroids")?
            .chunks_exact(8)
            .map(|b| {
                let mut a = [0u8; 8];
                a.copy_from_slice(b);
                f64::from_le_bytes(a)
            })
            .collect();
        rd.finish("prototype checkpoint")?;
        Ok(Self { centroids: Tensor::from_raw(vec![k as usize, d as usize], data)?, valid, momentum })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode()?)
    }

    pub fn load(path: &Path, momentum: f64) -> Result<Self> {
        Self::decode(&fs::read(path)?, momentum)
    }
}

/// Initialize prototypes from the model's features over every labeled
/// target pixel.
pub fn init_prototypes(model: &ModelState, target: &[DomainSample], momentum: f64) -> Result<PrototypeBank> {
    let maps = target
        .iter()
        .map(|s| model.forward(&s.raster, false))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&Tensor, &LabelMask)> = maps.iter().zip(target).map(|(m, s)| (&m.features, &s.labels)).collect();
    PrototypeBank::from_features(&pairs, model.config.num_classes, momentum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feats(rows: &[[f64; 2]]) -> Tensor {
        Tensor::new(vec![rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn single_and_pair_means() {
        let f = feats(&[[1.0, 2.0], [3.0, 4.0], [5.0, -6.0]]);
        let m = LabelMask::new(1, 3, vec![IGNORE, 0, IGNORE]).unwrap();
        let bank = PrototypeBank::from_features(&[(&f, &m)], 2, 0.999).unwrap();
        assert_eq!(bank.centroid(0).unwrap(), &[3.0, 4.0]);
        assert!(bank.centroid(1).is_none());

        let m = LabelMask::new(1, 3, vec![1, IGNORE, 1]).unwrap();
        let bank = PrototypeBank::from_features(&[(&f, &m)], 2, 0.999).unwrap();
        assert_eq!(bank.centroid(1).unwrap(), &[3.0, -2.0]);
    }

    #[test]
    fn no_labels_is_an_error() {
        let f = feats(&[[1.0, 2.0]]);
        let m = LabelMask::filled(1, 1, IGNORE);
        assert!(matches!(PrototypeBank::from_features(&[(&f, &m)], 2, 0.999), Err(Error::NoLabels(_))));
    }

    #[test]
    fn batch_absent_flags_and_same_set_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::new(vec![64, 3], (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let m = LabelMask::new(8, 8, (0..64).map(|i| if i % 3 == 0 { IGNORE } else { (i % 2) as u16 }).collect()).unwrap();
        let b = batch_centroids(&[(&f, &m)], 3).unwrap();
        assert!(!b.present(2));
        let bank = PrototypeBank::from_features(&[(&f, &m)], 3, 0.999).unwrap();
        for k in 0..2 {
            assert_eq!(b.centroids.row(k), bank.centroids.row(k));
        }
    }

    #[test]
    fn ema_scalar_and_fixed_point() {
        let f = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let m = LabelMask::filled(1, 1, 0);
        let mut bank = PrototypeBank::from_features(&[(&f, &m)], 1, DEFAULT_EMA_MOMENTUM).unwrap();
        let one = BatchCentroids { centroids: Tensor::new(vec![1, 1], vec![1.0]).unwrap(), counts: vec![1] };
        bank.ema_update(&one).unwrap();
        assert!((bank.centroids.data()[0] - 0.001).abs() < 1e-15);

        let before = bank.clone();
        let same = BatchCentroids { centroids: bank.centroids.clone(), counts: vec![3] };
        bank.ema_update(&same).unwrap();
        assert!(bank.centroids.max_abs_diff(&before.centroids) < 1e-15);
    }

    #[test]
    fn ema_adopts_new_class_and_skips_absent() {
        let f = feats(&[[1.0, 1.0]]);
        let m = LabelMask::filled(1, 1, 0);
        let mut bank = PrototypeBank::from_features(&[(&f, &m)], 3, 0.9).unwrap();
        let upd = BatchCentroids {
            centroids: Tensor::new(vec![3, 2], vec![9.0, 9.0, 0.0, 0.0, 2.0, -2.0]).unwrap(),
            counts: vec![0, 0, 5],
        };
        bank.ema_update(&upd).unwrap();
        assert_eq!(bank.centroid(0).unwrap(), &[1.0, 1.0]);
        assert!(bank.centroid(1).is_none());
        assert_eq!(bank.centroid(2).unwrap(), &[2.0, -2.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let f = feats(&[[0.1, -0.3], [2.5, 1e-17]]);
        let m = LabelMask::new(1, 2, vec![0, 2]).unwrap();
        let bank = PrototypeBank::from_features(&[(&f, &m)], 3, 0.999).unwrap();
        let bytes = bank.encode().unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 8 + 3 + 3 * 2 * 8);
        assert_eq!(PrototypeBank::decode(&bytes, 0.999).unwrap(), bank);
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(matches!(PrototypeBank::decode(&bad, 0.999), Err(Error::BadMagic { .. })));
    }
}
