use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{LabelMask, IGNORE};
use crate::error::{Error, Result};
use crate::util::atomic_write;

/// Total map from an old category system `0..len` onto `0..num_out`.
/// `None` drops the class (its pixels become IGNORE).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemapTable {
    targets: Vec<Option<u16>>,
    num_out: usize,
}

impl RemapTable {
    pub fn new(targets: Vec<Option<u16>>, num_out: usize) -> Result<Self> {
        if let Some(bad) = targets.iter().flatten().find(|&&t| t as usize >= num_out) {
            return Err(Error::InvalidArgument(format!(
                "remap target {bad} out of range for {num_out} classes"
            )));
        }
        Ok(Self { targets, num_out })
    }

    pub fn identity(k: usize) -> Self {
        Self { targets: (0..k as u16).map(Some).collect(), num_out: k }
    }

    pub fn num_in(&self) -> usize {
        self.targets.len()
    }

    pub fn num_out(&self) -> usize {
        self.num_out
    }

    pub fn target(&self, old: u16) -> Option<u16> {
        self.targets.get(old as usize).copied().flatten()
    }

    /// Output classes receiving two or more input classes.
    pub fn merged_classes(&self) -> Vec<u16> {
        let mut counts = vec![0usize; self.num_out];
        for t in self.targets.iter().flatten() {
            counts[*t as usize] += 1;
        }
        (0..self.num_out as u16).filter(|&c| counts[c as usize] > 1).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (old, t) in self.targets.iter().enumerate() {
            match t {
                Some(n) => writeln!(s, "{old} {n}").unwrap(),
                None => writeln!(s, "{old} ignore").unwrap(),
            }
        }
        s
    }

    /// Parse `old new` lines. `old` must cover `0..n` exactly once; `new`
    /// may be `ignore` to drop the class. `num_out` is one past the largest
    /// target unless given.
    pub fn parse(text: &str, num_out: Option<usize>) -> Result<Self> {
        let mut pairs: Vec<(usize, Option<u16>)> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse { line: ln + 1, msg: msg.to_string() };
            let mut it = line.split_whitespace();
            let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                return Err(parse_err("expected `old new`"));
            };
            let old: usize = a.parse().map_err(|_| parse_err("bad old class"))?;
            let new = if b == "ignore" {
                None
            } else {
                Some(b.parse::<u16>().ok().filter(|&v| v != IGNORE).ok_or_else(|| parse_err("bad new class"))?)
            };
            pairs.push((old, new));
        }
        let n = pairs.len();
        let mut targets = vec![None; n];
        let mut seen = vec![false; n];
        for (old, new) in pairs {
            if old >= n || seen[old] {
                return Err(Error::InvalidArgument(format!(
                    "remap table is not total over 0..{n} (entry {old})"
                )));
            }
            seen[old] = true;
            targets[old] = new;
        }
        let inferred = targets.iter().flatten().map(|&t| t as usize + 1).max().unwrap_or(0);
        Self::new(targets, num_out.unwrap_or(inferred))
    }
}

pub fn apply_remap(mask: &LabelMask, table: &RemapTable) -> Result<LabelMask> {
    let mut out = Vec::with_capacity(mask.classes.len());
    for &c in &mask.classes {
        if c == IGNORE {
            out.push(IGNORE);
            continue;
        }
        if c as usize >= table.num_in() {
            return Err(Error::InvalidArgument(format!(
                "mask class {c} not covered by remap table of {} entries",
                table.num_in()
            )));
        }
        out.push(table.target(c).unwrap_or(IGNORE));
    }
    LabelMask::new(mask.height, mask.width, out)
}

pub fn write_remap(path: &Path, table: &RemapTable) -> Result<()> {
    atomic_write(path, table.to_text().as_bytes())
}

pub fn read_remap(path: &Path, num_out: Option<usize>) -> Result<RemapTable> {
    RemapTable::parse(&fs::read_to_string(path)?, num_out)
}
