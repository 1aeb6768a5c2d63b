//! Canned two-domain scenarios.
//!
//! * `aligned`: both domains share class signatures and frequencies.
//! * `shifted`: same categories, per-class signature drift, a sensor
//!   gain/offset, and tilted class frequencies in the target.
//! * `remapped`: `shifted` plus a different category system. The source has
//!   `K+1` classes: class `K-1` merges into target class 1, class `K` is
//!   dropped, and target class `K-1` has no source counterpart at all.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::scribble::{overlay_window, sparsify, SparsifyConfig};
use super::world::{generate_world, WorldSpec};
use super::{ClassSpec, Dataset, DomainShift, DomainTag, RemapTable, Window};
use crate::error::{Error, Result};
use crate::util::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Aligned,
    Shifted,
    Remapped,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aligned" => Ok(Preset::Aligned),
            "shifted" => Ok(Preset::Shifted),
            "remapped" => Ok(Preset::Remapped),
            other => Err(Error::InvalidArgument(format!("unknown preset {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PresetOptions {
    pub num_classes: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub sparsify: SparsifyConfig,
    pub noise_sigma: f64,
    pub region_jitter: f64,
    /// Std of the per-class, per-band signature drift between domains.
    pub class_drift: f64,
}

impl Default for PresetOptions {
    fn default() -> Self {
        Self {
            num_classes: 8,
            bands: 4,
            height: 256,
            width: 256,
            train_per_domain: 8,
            test_per_domain: 2,
            sparsify: SparsifyConfig::default(),
            noise_sigma: 0.05,
            region_jitter: 0.03,
            class_drift: 0.06,
        }
    }
}

impl PresetOptions {
    /// Dense evaluation window: the centered half-size rectangle.
    pub fn eval_window(&self) -> Window {
        Window { x: self.width / 4, y: self.height / 4, w: self.width / 2, h: self.height / 2 }
    }
}

const STREAM_SPEC: u64 = 0x5EC;
const STREAM_SAMPLES: u64 = 1 << 32;

fn random_signatures(rng: &mut ChaCha8Rng, n: usize, bands: usize) -> Vec<Vec<f64>> {
    let min_sep = 0.2 * (bands as f64).sqrt() / 2.0;
    let mut sigs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut tries = 0;
    while sigs.len() < n {
        let cand: Vec<f64> = (0..bands).map(|_| rng.gen_range(0.1..0.9)).collect();
        tries += 1;
        let ok = sigs.iter().all(|s| {
            s.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= min_sep
        });
        if ok || tries > 10_000 {
            sigs.push(cand);
        }
    }
    sigs
}

fn class_specs(sigs: &[Vec<f64>], scales: &[f64], opts: &PresetOptions) -> Vec<ClassSpec> {
    sigs.iter()
        .zip(scales)
        .enumerate()
        .map(|(k, (sig, &scale))| ClassSpec {
            class_id: k as u16,
            signature: sig.clone(),
            noise_sigma: vec![opts.noise_sigma; opts.bands],
            patch_scale: scale,
            region_jitter: opts.region_jitter,
        })
        .collect()
}

struct DomainPlan {
    spec: WorldSpec,
    shift: Option<DomainShift>,
    sparsify: SparsifyConfig,
}

pub fn build_preset(preset: Preset, seed: u64, opts: &PresetOptions) -> Result<Dataset> {
    let k = opts.num_classes;
    let min_k = if preset == Preset::Remapped { 4 } else { 2 };
    if k < min_k {
        return Err(Error::InvalidArgument(format!("preset {preset:?} needs K >= {min_k}")));
    }
    let c = opts.bands;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SPEC));

    let k_src = if preset == Preset::Remapped { k + 1 } else { k };
    let src_sigs = random_signatures(&mut rng, k_src, c);
    let src_scales: Vec<f64> = (0..k_src).map(|_| rng.gen_range(28.0..56.0)).collect();
    let source = WorldSpec {
        bands: c,
        height: opts.height,
        width: opts.width,
        classes: class_specs(&src_sigs, &src_scales, opts),
    };

    let (tgt_sigs, tgt_scales, shift) = match preset {
        Preset::Aligned => (src_sigs.clone(), src_scales.clone(), DomainShift::identity(c, k)),
        Preset::Shifted | Preset::Remapped => {
            let mut sigs: Vec<Vec<f64>> = src_sigs[..k].to_vec();
            if preset == Preset::Remapped {
                // the novel class gets a signature of its own
                let extra = random_signatures(&mut rng, k_src + 1, c).pop().unwrap();
                sigs[k - 1] = extra;
            }
            for sig in sigs.iter_mut() {
                for v in sig.iter_mut() {
                    *v += opts.class_drift * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let mut shift = DomainShift::identity(c, k);
            for b in 0..c {
                shift.band_gain[b] = rng.gen_range(0.85..1.15);
                shift.band_offset[b] = rng.gen_range(-0.05..0.05);
            }
            for t in shift.class_frequency_tilt.iter_mut() {
                *t = rng.gen_range(0.3..2.0);
            }
            if preset == Preset::Remapped {
                let mut targets: Vec<Option<u16>> = (0..k as u16 - 1).map(Some).collect();
                targets.push(Some(1));
                targets.push(None);
                shift.remap = Some(RemapTable::new(targets, k)?);
            }
            let scales = src_scales[..k].to_vec();
            (sigs, scales, shift)
        }
    };
    let target = WorldSpec {
        bands: c,
        height: opts.height,
        width: opts.width,
        classes: class_specs(&tgt_sigs, &tgt_scales, opts),
    };

    let mut tgt_sparse = opts.sparsify.clone();
    if tgt_sparse.line_class.is_none() && k >= 3 {
        tgt_sparse.line_class = Some(k as u16 - 2);
    }
    let remap = shift.remap.clone();
    let src_plan = DomainPlan { spec: source, shift: None, sparsify: opts.sparsify.clone() };
    let tgt_plan = DomainPlan { spec: target, shift: Some(shift), sparsify: tgt_sparse };

    let window = opts.eval_window();
    let mut ds = Dataset {
        num_classes: k,
        source_train: Vec::new(),
        source_test: Vec::new(),
        target_train: Vec::new(),
        target_test: Vec::new(),
        remap,
    };
    for (di, plan) in [(0u64, &src_plan), (1u64, &tgt_plan)] {
        let tag = if di == 0 { DomainTag::Source } else { DomainTag::Target };
        for (ri, n) in [(0u64, opts.train_per_domain), (1u64, opts.test_per_domain)] {
            for i in 0..n as u64 {
                let sample_seed = derive_seed(seed, STREAM_SAMPLES + (di << 24) + (ri << 20) + i);
                let mut s = generate_world(sample_seed, &plan.spec, plan.shift.as_ref())?;
                s.domain = tag;
                match (tag, ri) {
                    (DomainTag::Source, 0) => ds.source_train.push(s),
                    (DomainTag::Source, _) => {
                        s.dense_eval_window = Some(window);
                        ds.source_test.push(s);
                    }
                    (DomainTag::Target, _) => {
                        let sparse = sparsify(&s.labels, derive_seed(sample_seed, 1), &plan.sparsify)?;
                        if ri == 0 {
                            s.labels = sparse;
                            ds.target_train.push(s);
                        } else {
                            s.labels = overlay_window(&sparse, &s.labels, &window)?;
                            s.dense_eval_window = Some(window);
                            ds.target_test.push(s);
                        }
                    }
                }
            }
        }
    }
    Ok(ds)
}
