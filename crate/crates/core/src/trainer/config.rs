//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lossfns::{CeReduction, LossToggles};
use crate::protobank::DEFAULT_EMA_MOMENTUM;
use crate::pseudolab::ExpandCandidates;
use crate::segmodel::ModelConfig;

/// Which data take part in adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Pretrained model, continued training on source only.
    SOnly,
    /// Fresh model trained on sparse target labels only.
    TOnly,
    /// Pretrained model adapted with the target branch only.
    TPre,
    /// Pretrained model adapted with both branches.
    StPre,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::SOnly, Mode::TOnly, Mode::TPre, Mode::StPre];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SOnly => "s_only",
            Mode::TOnly => "t_only",
            Mode::TPre => "t_pre",
            Mode::StPre => "st_pre",
        }
    }

    pub fn uses_source(self) -> bool {
        matches!(self, Mode::SOnly | Mode::StPre)
    }

    pub fn uses_prototypes(self) -> bool {
        matches!(self, Mode::TPre | Mode::StPre)
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s_only" => Ok(Mode::SOnly),
            "t_only" => Ok(Mode::TOnly),
            "t_pre" => Ok(Mode::TPre),
            "st_pre" => Ok(Mode::StPre),
            o => Err(Error::Config(format!("unknown mode {o}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub ema_lambda: f64,
    pub mode: Mode,
    pub target_seg: bool,
    pub class_balance: bool,
    pub rectification: bool,
    pub ce_reduction: CeReduction,
    pub expand_candidates: ExpandCandidates,
    pub log_base: f64,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
    pub window_radius: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 12,
            base_lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            ema_lambda: DEFAULT_EMA_MOMENTUM,
            mode: Mode::StPre,
            target_seg: true,
            class_balance: true,
            rectification: true,
            ce_reduction: CeReduction::PixelMean,
            expand_candidates: ExpandCandidates::All,
            log_base: std::f64::consts::E,
            seed: 0,
            pretrain_epochs: 20,
            pretrain_lr: 0.005,
            pretrain_batch_size: 12,
            window_radius: 1,
            hidden_dims: vec![16],
            feature_dim: 8,
        }
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        o => Err(Error::Config(format!("expected a boolean, got {o}"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs < 1 {
            return fail("epochs must be >= 1");
        }
        if self.batch_size < 1 || self.pretrain_batch_size < 1 {
            return fail("batch sizes must be >= 1");
        }
        if !(0.0..1.0).contains(&self.ema_lambda) {
            return fail("ema_lambda must lie in [0, 1)");
        }
        if !(self.base_lr >= 0.0 && self.pretrain_lr >= 0.0) {
            return fail("learning rates must be nonnegative");
        }
        if !(self.log_base > 1.0) {
            return fail("log_base must exceed 1");
        }
        if self.feature_dim < 2 {
            return fail("feature_dim must be >= 2");
        }
        Ok(())
    }

    /// Loss terms active under the configured mode and toggles.
    pub fn toggles(&self) -> LossToggles {
        let base = LossToggles {
            class_balance: self.class_balance,
            ce_reduction: self.ce_reduction,
            ..LossToggles::NONE
        };
        match self.mode {
            Mode::SOnly => LossToggles { source_seg: true, ..base },
            Mode::TOnly => LossToggles { target_seg: true, ..base },
            Mode::TPre => LossToggles { target_seg: self.target_seg, rectification: self.rectification, ..base },
            Mode::StPre => {
                LossToggles { source_seg: true, target_seg: self.target_seg, rectification: self.rectification, ..base }
            }
        }
    }

    pub fn model_config(&self, bands: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            bands,
            window_radius: self.window_radius,
            hidden_dims: self.hidden_dims.clone(),
            feature_dim: self.feature_dim,
            num_classes,
        }
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "base_lr" => self.base_lr = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "poly_power" => self.poly_power = parse_num(key, value)?,
            "ema_lambda" => self.ema_lambda = parse_num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "target_seg" => self.target_seg = parse_bool(value)?,
            "class_balance" => self.class_balance = parse_bool(value)?,
            "rectification" => self.rectification = parse_bool(value)?,
            "ce_reduction" => self.ce_reduction = value.parse()?,
            "expand_candidates" => self.expand_candidates = value.parse()?,
            "log_base" => {
                self.log_base = if value == "e" { std::f64::consts::E } else { parse_num(key, value)? }
            }
            "seed" => self.seed = parse_num(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_num(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse_num(key, value)?,
            "pretrain_batch_size" => self.pretrain_batch_size = parse_num(key, value)?,
            "window_radius" => self.window_radius = parse_num(key, value)?,
            "hidden_dims" => {
                self.hidden_dims = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|v| parse_num(key, v.trim())).collect::<Result<_>>()?
                }
            }
            "feature_dim" => self.feature_dim = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Overlay a config file onto `self`. Blank lines and `#` comments are
    /// skipped; unknown keys are rejected.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", ln + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", ln + 1)))?;
        }
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let hidden: Vec<String> = self.hidden_dims.iter().map(|d| d.to_string()).collect();
        let log_base = if self.log_base == std::f64::consts::E { "e".to_string() } else { self.log_base.to_string() };
        let rows: [(&str, String); 21] = [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("poly_power", self.poly_power.to_string()),
            ("ema_lambda", self.ema_lambda.to_string()),
            ("mode", self.mode.as_str().to_string()),
            ("target_seg", self.target_seg.to_string()),
            ("class_balance", self.class_balance.to_string()),
            ("rectification", self.rectification.to_string()),
            ("ce_reduction", self.ce_reduction.as_str().to_string()),
            ("expand_candidates", self.expand_candidates.as_str().to_string()),
            ("log_base", log_base),
            ("seed", self.seed.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("pretrain_batch_size", self.pretrain_batch_size.to_string()),
            ("window_radius", self.window_radius.to_string()),
            ("hidden_dims", hidden.join(",")),
            ("feature_dim", self.feature_dim.to_string()),
        ];
        for (k, v) in rows.iter() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}
