//! Dataset directories: a `manifest.txt` listing samples plus the raster,
//! mask, and remap files it references.
//!
//! Sample lines are `<train|test> <source|target> <raster> <mask> [x y w h]`.
//! Two directive lines are also understood: `classes K` fixes the target
//! category count and `remap PATH` names the source→target remap table.
//! Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::io::{read_mask, read_raster, write_mask, write_raster};
use super::remap::{apply_remap, read_remap, write_remap};
use super::{DomainSample, DomainTag, RemapTable, Window};
use crate::error::{Error, Result};
use crate::util::atomic_write;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Train,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub role: Role,
    pub domain: DomainTag,
    pub raster: PathBuf,
    pub mask: PathBuf,
    pub window: Option<Window>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub num_classes: Option<usize>,
    pub remap: Option<PathBuf>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { line: ln + 1, msg };
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.as_slice() {
                ["classes", k] => {
                    m.num_classes = Some(k.parse().map_err(|_| err(format!("bad class count {k}")))?)
                }
                ["remap", p] => m.remap = Some(PathBuf::from(p)),
                [role, domain, raster, mask, rest @ ..] => {
                    let role = match *role {
                        "train" => Role::Train,
                        "test" => Role::Test,
                        r => return Err(err(format!("unknown role {r}"))),
                    };
                    let domain = match *domain {
                        "source" => DomainTag::Source,
                        "target" => DomainTag::Target,
                        d => return Err(err(format!("unknown domain {d}"))),
                    };
                    let rest = match rest {
                        ["dense-window", tail @ ..] => tail,
                        r => r,
                    };
                    let window = match rest {
                        [] => None,
                        [x, y, w, h] => {
                            let p = |s: &str| s.parse::<usize>().map_err(|_| err(format!("bad window value {s}")));
                            Some(Window { x: p(x)?, y: p(y)?, w: p(w)?, h: p(h)? })
                        }
                        _ => return Err(err("window needs x y w h".into())),
                    };
                    m.entries.push(ManifestEntry {
                        role,
                        domain,
                        raster: PathBuf::from(raster),
                        mask: PathBuf::from(mask),
                        window,
                    });
                }
                _ => return Err(err(format!("unrecognized line `{line}`"))),
            }
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(k) = self.num_classes {
            writeln!(s, "classes {k}").unwrap();
        }
        if let Some(r) = &self.remap {
            writeln!(s, "remap {}", r.display()).unwrap();
        }
        for e in &self.entries {
            write!(
                s,
                "{} {} {} {}",
                e.role.as_str(),
                e.domain.as_str(),
                e.raster.display(),
                e.mask.display()
            )
            .unwrap();
            if let Some(w) = e.window {
                write!(s, " {} {} {} {}", w.x, w.y, w.w, w.h).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// All samples of a two-domain dataset. Source labels stay in the source
/// category system; [`Dataset::aligned_source`] maps them through `remap`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub source_train: Vec<DomainSample>,
    pub source_test: Vec<DomainSample>,
    pub target_train: Vec<DomainSample>,
    pub target_test: Vec<DomainSample>,
    pub remap: Option<RemapTable>,
}

impl Dataset {
    /// Source samples with labels expressed in the target category system.
    pub fn aligned_source(&self, role: Role) -> Result<Vec<DomainSample>> {
        let set = match role {
            Role::Train => &self.source_train,
            Role::Test => &self.source_test,
        };
        set.iter()
            .map(|s| {
                let mut s = s.clone();
                if let Some(t) = &self.remap {
                    s.labels = apply_remap(&s.labels, t)?;
                }
                s.labels.check_classes(self.num_classes)?;
                Ok(s)
            })
            .collect()
    }

    pub fn bands(&self) -> Option<usize> {
        self.target_train
            .first()
            .or(self.source_train.first())
            .map(|s| s.raster.bands)
    }
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest { num_classes: Some(ds.num_classes), ..Default::default() };
    if let Some(t) = &ds.remap {
        let rel = PathBuf::from("remap.txt");
        write_remap(&dir.join(&rel), t)?;
        manifest.remap = Some(rel);
    }
    let groups = [
        (Role::Train, DomainTag::Source, &ds.source_train),
        (Role::Test, DomainTag::Source, &ds.source_test),
        (Role::Train, DomainTag::Target, &ds.target_train),
        (Role::Test, DomainTag::Target, &ds.target_test),
    ];
    for (role, domain, samples) in groups {
        for (i, s) in samples.iter().enumerate() {
            let stem = format!("{}/{}_{i:03}", domain.as_str(), role.as_str());
            let raster = PathBuf::from(format!("{stem}.prer"));
            let mask = PathBuf::from(format!("{stem}.prel"));
            write_raster(&dir.join(&raster), &s.raster)?;
            write_mask(&dir.join(&mask), &s.labels)?;
            manifest.entries.push(ManifestEntry { role, domain, raster, mask, window: s.dense_eval_window });
        }
    }
    atomic_write(&dir.join("manifest.txt"), manifest.to_text().as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    load_entries(dir, true)
}

/// Like [`load_dataset`] but skips source entries, so the source files need
/// not exist.
pub fn load_target_dataset(dir: &Path) -> Result<Dataset> {
    load_entries(dir, false)
}

fn load_entries(dir: &Path, with_source: bool) -> Result<Dataset> {
    let manifest = Manifest::parse(&fs::read_to_string(dir.join("manifest.txt"))?)?;
    let mut ds = Dataset {
        num_classes: 0,
        source_train: Vec::new(),
        source_test: Vec::new(),
        target_train: Vec::new(),
        target_test: Vec::new(),
        remap: None,
    };
    for e in manifest.entries.iter().filter(|e| with_source || e.domain == DomainTag::Target) {
        let sample = DomainSample::new(
            read_raster(&dir.join(&e.raster))?,
            read_mask(&dir.join(&e.mask))?,
            e.domain,
            e.window,
        )?;
        match (e.role, e.domain) {
            (Role::Train, DomainTag::Source) => ds.source_train.push(sample),
            (Role::Test, DomainTag::Source) => ds.source_test.push(sample),
            (Role::Train, DomainTag::Target) => ds.target_train.push(sample),
            (Role::Test, DomainTag::Target) => ds.target_test.push(sample),
        }
    }
    ds.num_classes = match manifest.num_classes {
        Some(k) => k,
        None => {
            let max = ds
                .target_train
                .iter()
                .chain(&ds.target_test)
                .flat_map(|s| s.labels.classes.iter())
                .filter(|&&c| c != super::IGNORE)
                .max()
                .copied()
                .ok_or_else(|| Error::NoLabels("cannot infer class count from target masks".into()))?;
            max as usize + 1
        }
    };
    if let Some(p) = &manifest.remap {
        ds.remap = Some(read_remap(&dir.join(p), Some(ds.num_classes))?);
    }
    for s in ds.target_train.iter().chain(&ds.target_test) {
        s.labels.check_classes(ds.num_classes)?;
    }
    Ok(ds)
}
