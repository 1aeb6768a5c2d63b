//! Synthetic two-domain raster worlds, block-scribble weak labels, category
//! remapping, and the binary/text file formats for all of them.

mod dataset;
mod io;
mod presets;
mod remap;
mod scribble;
mod world;

pub use dataset::{load_dataset, load_target_dataset, write_dataset, Dataset, Manifest, ManifestEntry, Role};
pub use io::{
    decode_mask, decode_raster, encode_mask, encode_raster, read_mask, read_raster, write_mask,
    write_raster, MASK_MAGIC, RASTER_MAGIC,
};
pub use presets::{build_preset, Preset, PresetOptions};
pub use remap::{apply_remap, read_remap, write_remap, RemapTable};
pub use scribble::{overlay_window, sparsify, SparsifyConfig};
pub use world::{generate_world, WorldSpec};

use crate::error::{Error, Result};

/// Class value marking an unlabeled pixel.
pub const IGNORE: u16 = 0xFFFF;

/// H×W×C band-interleaved image. Values are stored at file precision so
/// that write/read round trips are exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub values: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if height * width * bands != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "raster {height}x{width}x{bands} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("raster value".into()));
        }
        Ok(Self { height, width, bands, values })
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.bands;
        &self.values[i..i + self.bands]
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }
}

/// H×W grid of class indices with [`IGNORE`] for unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u16>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, classes: Vec<u16>) -> Result<Self> {
        if height * width != classes.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask {height}x{width} with {} values",
                classes.len()
            )));
        }
        Ok(Self { height, width, classes })
    }

    pub fn filled(height: usize, width: usize, value: u16) -> Self {
        Self { height, width, classes: vec![value; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.classes[row * self.width + col]
    }

    pub fn num_pixels(&self) -> usize {
        self.classes.len()
    }

    pub fn labeled_count(&self) -> usize {
        self.classes.iter().filter(|&&c| c != IGNORE).count()
    }

    pub fn labeled_fraction(&self) -> f64 {
        self.labeled_count() as f64 / self.num_pixels().max(1) as f64
    }

    /// Pixel counts for classes `0..k`; IGNORE is skipped.
    pub fn histogram(&self, k: usize) -> Vec<usize> {
        let mut h = vec![0usize; k];
        for &c in &self.classes {
            if (c as usize) < k {
                h[c as usize] += 1;
            }
        }
        h
    }

    /// Fail if any labeled value is `>= k`.
    pub fn check_classes(&self, k: usize) -> Result<()> {
        match self.classes.iter().find(|&&c| c != IGNORE && c as usize >= k) {
            Some(c) => Err(Error::InvalidArgument(format!("class {c} out of range for K={k}"))),
            None => Ok(()),
        }
    }

    /// Copy of the window region as its own mask.
    pub fn crop(&self, w: &Window) -> LabelMask {
        let mut out = Vec::with_capacity(w.w * w.h);
        for r in w.y..w.y + w.h {
            out.extend_from_slice(&self.classes[r * self.width + w.x..r * self.width + w.x + w.w]);
        }
        LabelMask { height: w.h, width: w.w, classes: out }
    }
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Window {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.y && row < self.y + self.h && col >= self.x && col < self.x + self.w
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        }
    }
}

/// Spectral description of one land-cover class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub class_id: u16,
    /// Per-band mean value.
    pub signature: Vec<f64>,
    /// Per-band pixel noise standard deviation.
    pub noise_sigma: Vec<f64>,
    /// Mean region diameter in pixels.
    pub patch_scale: f64,
    /// Per-band std of a signature offset drawn once per region.
    pub region_jitter: f64,
}

impl ClassSpec {
    pub fn validate(&self, bands: usize) -> Result<()> {
        if self.signature.len() != bands || self.noise_sigma.len() != bands {
            return Err(Error::ShapeMismatch(format!(
                "class {} spec has {} signature / {} sigma entries for {bands} bands",
                self.class_id,
                self.signature.len(),
                self.noise_sigma.len()
            )));
        }
        if self.noise_sigma.iter().any(|&s| !(s >= 0.0)) || !(self.region_jitter >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "class {}: noise must be nonnegative",
                self.class_id
            )));
        }
        if !(self.patch_scale >= 2.0) {
            return Err(Error::InvalidArgument(format!(
                "class {}: patch_scale {} < 2",
                self.class_id, self.patch_scale
            )));
        }
        Ok(())
    }
}

/// Sensor (gain/offset), geography (class-frequency tilt), and category
/// system (remap) differences between domains.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainShift {
    pub band_gain: Vec<f64>,
    pub band_offset: Vec<f64>,
    pub class_frequency_tilt: Vec<f64>,
    /// Maps source classes into this domain's category system.
    pub remap: Option<RemapTable>,
}

impl DomainShift {
    pub fn identity(bands: usize, k: usize) -> Self {
        Self {
            band_gain: vec![1.0; bands],
            band_offset: vec![0.0; bands],
            class_frequency_tilt: vec![1.0; k],
            remap: None,
        }
    }

    pub fn validate(&self, bands: usize, k: usize) -> Result<()> {
        if self.band_gain.len() != bands || self.band_offset.len() != bands {
            return Err(Error::ShapeMismatch("shift band vectors".into()));
        }
        if self.class_frequency_tilt.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "frequency tilt has {} entries for K={k}",
                self.class_frequency_tilt.len()
            )));
        }
        if self.band_gain.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::InvalidArgument("band gain must be strictly positive".into()));
        }
        if self.class_frequency_tilt.iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::InvalidArgument("frequency tilt must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    pub raster: Raster,
    pub labels: LabelMask,
    pub domain: DomainTag,
    pub dense_eval_window: Option<Window>,
}

impl DomainSample {
    pub fn new(
        raster: Raster,
        labels: LabelMask,
        domain: DomainTag,
        dense_eval_window: Option<Window>,
    ) -> Result<Self> {
        if raster.height != labels.height || raster.width != labels.width {
            return Err(Error::ShapeMismatch(format!(
                "raster {}x{} vs mask {}x{}",
                raster.height, raster.width, labels.height, labels.width
            )));
        }
        if let Some(w) = dense_eval_window {
            if !w.fits(raster.height, raster.width) {
                return Err(Error::InvalidArgument(format!("window {w:?} outside image")));
            }
        }
        Ok(Self { raster, labels, domain, dense_eval_window })
    }
}
