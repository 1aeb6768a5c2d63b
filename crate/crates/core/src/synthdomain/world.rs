use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ClassSpec, DomainSample, DomainShift, DomainTag, LabelMask, Raster};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    /// One entry per class; `classes[k].class_id == k`.
    pub classes: Vec<ClassSpec>,
}

impl WorldSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidArgument("need K >= 2 classes".into()));
        }
        if self.bands < 1 {
            return Err(Error::InvalidArgument("need C >= 1 bands".into()));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::InvalidArgument(format!(
                "world {}x{} smaller than 32x32",
                self.height, self.width
            )));
        }
        for (k, c) in self.classes.iter().enumerate() {
            if c.class_id as usize != k {
                return Err(Error::InvalidArgument(format!("class spec {k} has id {}", c.class_id)));
            }
            c.validate(self.bands)?;
        }
        Ok(())
    }
}

struct Site {
    row: f64,
    col: f64,
    class: usize,
    inv_scale: f64,
    offset: Vec<f64>,
}

/// Paint a weighted-Voronoi class map and fill it with noisy class
/// signatures; the optional shift tilts class frequencies and applies a
/// per-band `gain·v + offset` on top.
///
/// The RNG draw sequence does not depend on gain/offset, so changing only
/// those reproduces the unshifted world transformed pointwise.
pub fn generate_world(seed: u64, spec: &WorldSpec, shift: Option<&DomainShift>) -> Result<DomainSample> {
    spec.validate()?;
    let k = spec.num_classes();
    let c = spec.bands;
    if let Some(s) = shift {
        s.validate(c, k)?;
    }
    let freq: Vec<f64> = match shift {
        Some(s) => s.class_frequency_tilt.clone(),
        None => vec![1.0; k],
    };
    let total: f64 = freq.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all class frequencies are zero".into()));
    }
    let picker = WeightedIndex::new(&freq).map_err(|e| Error::Degenerate(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let mean_scale = spec.classes.iter().zip(&freq).map(|(cs, f)| cs.patch_scale * f).sum::<f64>() / total;
    let region_area = std::f64::consts::FRAC_PI_4 * mean_scale * mean_scale;
    let n_sites = ((h * w) as f64 / region_area).ceil().max(k as f64) as usize;

    let sites: Vec<Site> = (0..n_sites)
        .map(|_| {
            let class = picker.sample(&mut rng);
            let cs = &spec.classes[class];
            let offset = (0..c)
                .map(|_| cs.region_jitter * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Site {
                row: rng.gen_range(0.0..h as f64),
                col: rng.gen_range(0.0..w as f64),
                class,
                inv_scale: 1.0 / cs.patch_scale,
                offset,
            }
        })
        .collect();

    let mut labels = Vec::with_capacity(h * w);
    let mut owner = Vec::with_capacity(h * w);
    for r in 0..h {
        for col in 0..w {
            let (pr, pc) = (r as f64 + 0.5, col as f64 + 0.5);
            let mut best = (f64::INFINITY, 0usize);
            for (si, s) in sites.iter().enumerate() {
                let d2 = ((pr - s.row).powi(2) + (pc - s.col).powi(2)) * s.inv_scale * s.inv_scale;
                if d2 < best.0 {
                    best = (d2, si);
                }
            }
            owner.push(best.1);
            labels.push(sites[best.1].class as u16);
        }
    }

    let identity = DomainShift::identity(c, k);
    let sh = shift.unwrap_or(&identity);
    let mut values = Vec::with_capacity(h * w * c);
    for &si in &owner {
        let site = &sites[si];
        let cs = &spec.classes[site.class];
        for b in 0..c {
            let noise: f64 = rng.sample(StandardNormal);
            let v = cs.signature[b] + site.offset[b] + cs.noise_sigma[b] * noise;
            values.push((sh.band_gain[b] * v + sh.band_offset[b]) as f32);
        }
    }

    let domain = if shift.is_some() { DomainTag::Target } else { DomainTag::Source };
    DomainSample::new(
        Raster::new(h, w, c, values)?,
        LabelMask::new(h, w, labels)?,
        domain,
        None,
    )
}
