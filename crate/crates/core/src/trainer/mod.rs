//! Source pretraining and the adaptation loop.
//!
//! One adaptation iteration: forward the target and source batches, rectify
//! and expand target labels against the prototype snapshot, take one SGD
//! step on the total loss, then refresh the prototypes from a forward pass
//! of the updated model over the same target batch.

mod config;

pub use config::{Mode, TrainConfig};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evalkit::{confusion, predict, MetricReport, Protocol};
use crate::lossfns::{total_loss, LossBreakdown, LossToggles, SourceBatch, TargetBatch};
use crate::numcore::Tensor;
use crate::protobank::{batch_centroids, PrototypeBank};
use crate::pseudolab::{compute_weights, consistent_unlabeled, expand, expansion_count, rectify, ExpansionResult, RectificationMaps};
use crate::segmodel::{poly_lr, ForwardMaps, ModelState};
use crate::synthdomain::{DomainSample, LabelMask};
use crate::util::{atomic_write, derive_seed};

const INIT_STREAM: u64 = 0x11;
const TARGET_INIT_STREAM: u64 = 0x12;
const PRETRAIN_STREAM: u64 = 0x21;
const ADAPT_STREAM: u64 = 0x22;

/// Indexed read access to a set of samples.
pub trait SampleSet: Sync {
    fn len(&self) -> usize;
    fn sample(&self, i: usize) -> &DomainSample;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSet for [DomainSample] {
    fn len(&self) -> usize {
        <[DomainSample]>::len(self)
    }

    fn sample(&self, i: usize) -> &DomainSample {
        &self[i]
    }
}

impl SampleSet for Vec<DomainSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, i: usize) -> &DomainSample {
        &self[i]
    }
}

/// Wraps a sample set and counts every sample read.
pub struct CountingSet<'a> {
    inner: &'a dyn SampleSet,
    reads: AtomicUsize,
}

impl<'a> CountingSet<'a> {
    pub fn new(inner: &'a dyn SampleSet) -> Self {
        Self { inner, reads: AtomicUsize::new(0) }
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

impl SampleSet for CountingSet<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn sample(&self, i: usize) -> &DomainSample {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.inner.sample(i)
    }
}

/// Averages over one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub source_seg: f64,
    pub target_seg: f64,
    pub rectification: f64,
    pub total: f64,
    /// Mean promoted pixels per target image.
    pub expanded_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub sparse: MetricReport,
    pub dense: Option<MetricReport>,
}

/// Everything known about one target image's label expansion.
pub struct ExpansionEvent<'a> {
    pub epoch: usize,
    pub total_epochs: usize,
    pub iteration: usize,
    pub image: usize,
    pub sparse: &'a LabelMask,
    pub rect: &'a RectificationMaps,
    pub consistent: usize,
    pub requested: usize,
    pub result: &'a ExpansionResult,
}

/// Context of a batch whose loss went non-finite.
pub struct AbortReport<'a> {
    pub epoch: usize,
    pub iteration: usize,
    pub target_images: &'a [usize],
    pub source_images: &'a [usize],
    pub breakdown: &'a LossBreakdown,
}

/// Hooks into the adaptation loop. All methods default to no-ops.
pub trait TrainObserver {
    fn on_expansion(&mut self, _event: &ExpansionEvent<'_>) {}
    fn on_epoch(&mut self, _log: &EpochLog) {}
    fn on_abort(&mut self, _report: &AbortReport<'_>) {}
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

pub struct AdaptOutcome {
    pub model: ModelState,
    pub prototypes: Option<PrototypeBank>,
    pub losses: Vec<EpochLog>,
    pub metrics: Vec<EpochMetrics>,
}

/// Paths written by [`write_run`].
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub model: PathBuf,
    pub prototypes: Option<PathBuf>,
    pub losses: PathBuf,
    pub metrics: PathBuf,
    pub config: PathBuf,
}

fn forward_batch(model: &ModelState, set: &dyn SampleSet, idx: &[usize], keep_cache: bool) -> Result<Vec<ForwardMaps>> {
    idx.par_iter().map(|&i| model.forward(&set.sample(i).raster, keep_cache)).collect()
}

fn iterations_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn check_sets(set: &dyn SampleSet, k: usize, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Config(format!("{what} set is empty")));
    }
    let bands = set.sample(0).raster.bands;
    for i in 0..set.len() {
        let s = set.sample(i);
        s.labels.check_classes(k)?;
        if s.raster.bands != bands {
            return Err(Error::ShapeMismatch(format!("{what} sample {i} has {} bands", s.raster.bands)));
        }
    }
    Ok(())
}

fn finite_or_abort(
    bd: &LossBreakdown,
    observer: &mut dyn TrainObserver,
    epoch: usize,
    iteration: usize,
    target_images: &[usize],
    source_images: &[usize],
) -> Result<()> {
    if bd.total.is_finite() {
        return Ok(());
    }
    observer.on_abort(&AbortReport { epoch, iteration, target_images, source_images, breakdown: bd });
    Err(Error::NumericalAbort(format!(
        "loss {bd:?} at epoch {epoch}, iteration {iteration}, target images {target_images:?}, source images {source_images:?}"
    )))
}

/// Per-image expansion counts for epoch `m` of `total`.
pub fn epoch_schedule(m: usize, total: usize, consistent_counts: &[usize], log_base: f64) -> Result<Vec<usize>> {
    consistent_counts.iter().map(|&c| expansion_count(m, total, c, log_base)).collect()
}

/// A model with fresh weights for `cfg` over `bands` input bands.
pub fn init_model(cfg: &TrainConfig, bands: usize, num_classes: usize) -> Result<ModelState> {
    ModelState::init(cfg.model_config(bands, num_classes), derive_seed(cfg.seed, INIT_STREAM))
}

/// Supervised training on `source` (labels already in the target category
/// system) for `pretrain_epochs`. Returns the model and per-epoch losses.
pub fn pretrain_source(cfg: &TrainConfig, source: &dyn SampleSet, num_classes: usize) -> Result<(ModelState, Vec<EpochLog>)> {
    cfg.validate()?;
    check_sets(source, num_classes, "source")?;
    let mut model = init_model(cfg, source.sample(0).raster.bands, num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, PRETRAIN_STREAM));
    let per_epoch = iterations_per_epoch(source.len(), cfg.pretrain_batch_size);
    let max_iter = cfg.pretrain_epochs * per_epoch;
    let toggles = LossToggles { source_seg: true, target_seg: false, rectification: false, ..cfg.toggles() };
    let mut logs = Vec::with_capacity(cfg.pretrain_epochs);
    let mut iter = 0;
    for epoch in 1..=cfg.pretrain_epochs {
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let lr0 = poly_lr(cfg.pretrain_lr, iter, max_iter, cfg.poly_power)?;
        for chunk in order.chunks(cfg.pretrain_batch_size) {
            let maps = forward_batch(&model, source, chunk, true)?;
            let probs: Vec<&Tensor> = maps.iter().map(|m| &m.probs).collect();
            let labels: Vec<&LabelMask> = chunk.iter().map(|&i| &source.sample(i).labels).collect();
            let tl = total_loss(Some(&SourceBatch { probs: &probs, labels: &labels }), None, toggles)?;
            finite_or_abort(&tl.breakdown, &mut NoObserver, epoch, iter, &[], chunk)?;
            for (m, g) in maps.iter().zip(&tl.source_dlogits) {
                model.backward(m, g, None)?;
            }
            model.sgd_step(poly_lr(cfg.pretrain_lr, iter, max_iter, cfg.poly_power)?, cfg.momentum, cfg.weight_decay);
            sum += tl.breakdown.total;
            iter += 1;
        }
        let mean = sum / per_epoch as f64;
        log::info!("pretrain epoch {epoch}/{}: loss {mean:.5}", cfg.pretrain_epochs);
        logs.push(EpochLog {
            epoch,
            lr: lr0,
            source_seg: mean,
            target_seg: 0.0,
            rectification: 0.0,
            total: mean,
            expanded_mean: 0.0,
        });
    }
    Ok((model, logs))
}

/// Initial prototypes from `model` over every labeled target pixel.
pub fn initial_prototypes(model: &ModelState, target: &dyn SampleSet, momentum: f64) -> Result<PrototypeBank> {
    let idx: Vec<usize> = (0..target.len()).collect();
    let maps = forward_batch(model, target, &idx, false)?;
    let pairs: Vec<(&Tensor, &LabelMask)> =
        maps.iter().zip(&idx).map(|(m, &i)| (&m.features, &target.sample(i).labels)).collect();
    PrototypeBank::from_features(&pairs, model.config.num_classes, momentum)
}

fn evaluate_epoch(model: &ModelState, eval: &[DomainSample], epoch: usize) -> Result<EpochMetrics> {
    let preds = eval.par_iter().map(|s| predict(model, s)).collect::<Result<Vec<_>>>()?;
    let k = model.config.num_classes;
    let sparse = confusion(eval, &preds, k, Protocol::Sparse)?.report()?;
    let dense = if eval.iter().all(|s| s.dense_eval_window.is_some()) {
        Some(confusion(eval, &preds, k, Protocol::Dense)?.report()?)
    } else {
        None
    };
    Ok(EpochMetrics { epoch, sparse, dense })
}

/// Run adaptation under `cfg.mode`.
///
/// `pretrained` seeds every mode except `TOnly`, which starts from fresh
/// weights. `source` must already be in the target category system; it is
/// never read unless the mode uses it. `eval`, when given, is scored after
/// every epoch.
pub fn adapt(
    cfg: &TrainConfig,
    pretrained: &ModelState,
    source: Option<&dyn SampleSet>,
    target: &dyn SampleSet,
    eval: Option<&[DomainSample]>,
    observer: &mut dyn TrainObserver,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let k = pretrained.config.num_classes;
    let toggles = cfg.toggles();
    let source = if cfg.mode.uses_source() {
        let s = source.ok_or_else(|| Error::Config(format!("mode {} needs a source set", cfg.mode.as_str())))?;
        check_sets(s, k, "source")?;
        Some(s)
    } else {
        None
    };
    if target.is_empty() {
        return Err(Error::Config("target set is empty".into()));
    }
    let target_active = toggles.target_seg || toggles.rectification;
    if target_active {
        check_sets(target, k, "target")?;
    }

    let mut model = match cfg.mode {
        Mode::TOnly => ModelState::init(pretrained.config.clone(), derive_seed(cfg.seed, TARGET_INIT_STREAM))?,
        _ => pretrained.clone(),
    };
    let mut bank = if cfg.mode.uses_prototypes() {
        Some(initial_prototypes(&model, target, cfg.ema_lambda)?)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, ADAPT_STREAM));
    let n_target = target.len();
    let per_epoch = iterations_per_epoch(n_target, cfg.batch_size);
    let max_iter = cfg.epochs * per_epoch;
    let mut iter = 0;
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut metrics = Vec::new();

    for epoch in 1..=cfg.epochs {
        let mut target_order: Vec<usize> = (0..n_target).collect();
        target_order.shuffle(&mut rng);
        // fresh source subset of the target set's size
        let source_order: Vec<usize> = match source {
            Some(s) => {
                let mut pool: Vec<usize> = Vec::with_capacity(n_target);
                while pool.len() < n_target {
                    let mut perm: Vec<usize> = (0..s.len()).collect();
                    perm.shuffle(&mut rng);
                    pool.extend(perm.into_iter().take(n_target - pool.len()));
                }
                pool
            }
            None => Vec::new(),
        };

        let lr0 = poly_lr(cfg.base_lr, iter, max_iter, cfg.poly_power)?;
        let mut sums = [0.0f64; 4];
        let mut expanded_total = 0usize;
        for (b, t_idx) in target_order.chunks(cfg.batch_size).enumerate() {
            let s_idx: &[usize] = if source.is_some() {
                &source_order[b * cfg.batch_size..(b * cfg.batch_size + t_idx.len())]
            } else {
                &[]
            };
            let lr = poly_lr(cfg.base_lr, iter, max_iter, cfg.poly_power)?;

            let t_maps = if target_active { forward_batch(&model, target, t_idx, true)? } else { Vec::new() };
            let s_maps = match source {
                Some(s) => forward_batch(&model, s, s_idx, true)?,
                None => Vec::new(),
            };

            let mut weights: Vec<Tensor> = Vec::new();
            let mut expanded: Vec<LabelMask> = Vec::new();
            if target_active {
                for (&ti, maps) in t_idx.iter().zip(&t_maps) {
                    let sparse = &target.sample(ti).labels;
                    match &bank {
                        Some(bank) => {
                            let w = compute_weights(&maps.features, bank)?;
                            let rect = rectify(&maps.probs, &w)?;
                            let consistent = consistent_unlabeled(&rect, sparse);
                            let requested = expansion_count(epoch, cfg.epochs, consistent, cfg.log_base)?;
                            let result = expand(&rect, sparse, requested, cfg.expand_candidates)?;
                            expanded_total += result.count;
                            observer.on_expansion(&ExpansionEvent {
                                epoch,
                                total_epochs: cfg.epochs,
                                iteration: iter,
                                image: ti,
                                sparse,
                                rect: &rect,
                                consistent,
                                requested,
                                result: &result,
                            });
                            expanded.push(result.expanded_mask);
                            weights.push(rect.weights);
                        }
                        None => expanded.push(sparse.clone()),
                    }
                }
            }

            let s_probs: Vec<&Tensor> = s_maps.iter().map(|m| &m.probs).collect();
            let s_labels: Vec<&LabelMask> = match source {
                Some(s) => s_idx.iter().map(|&i| &s.sample(i).labels).collect(),
                None => Vec::new(),
            };
            let t_probs: Vec<&Tensor> = t_maps.iter().map(|m| &m.probs).collect();
            let t_expanded: Vec<&LabelMask> = expanded.iter().collect();
            let t_sparse: Vec<&LabelMask> = if target_active {
                t_idx.iter().map(|&i| &target.sample(i).labels).collect()
            } else {
                Vec::new()
            };
            let t_weights: Vec<&Tensor> = weights.iter().collect();
            let sb = SourceBatch { probs: &s_probs, labels: &s_labels };
            let tb = TargetBatch { probs: &t_probs, expanded: &t_expanded, sparse: &t_sparse, weights: &t_weights };
            let tl = total_loss(
                source.is_some().then_some(&sb),
                target_active.then_some(&tb),
                toggles,
            )?;
            finite_or_abort(&tl.breakdown, observer, epoch, iter, t_idx, s_idx)?;

            for (m, g) in s_maps.iter().zip(&tl.source_dlogits) {
                model.backward(m, g, None)?;
            }
            for (m, g) in t_maps.iter().zip(&tl.target_dlogits) {
                model.backward(m, g, None)?;
            }
            drop(t_maps);
            drop(s_maps);
            model.sgd_step(lr, cfg.momentum, cfg.weight_decay);

            if let Some(bank) = bank.as_mut() {
                let post = forward_batch(&model, target, t_idx, false)?;
                let pairs: Vec<(&Tensor, &LabelMask)> =
                    post.iter().zip(t_idx).map(|(m, &i)| (&m.features, &target.sample(i).labels)).collect();
                bank.ema_update(&batch_centroids(&pairs, k)?)?;
            }

            let bd = &tl.breakdown;
            for (acc, v) in sums.iter_mut().zip([bd.source_seg, bd.target_seg, bd.rectification, bd.total]) {
                *acc += v;
            }
            iter += 1;
        }

        let n = per_epoch as f64;
        let log = EpochLog {
            epoch,
            lr: lr0,
            source_seg: sums[0] / n,
            target_seg: sums[1] / n,
            rectification: sums[2] / n,
            total: sums[3] / n,
            expanded_mean: expanded_total as f64 / n_target as f64,
        };
        log::info!(
            "{} epoch {epoch}/{}: total {:.5} (src {:.5}, tgt {:.5}, rect {:.5}), expanded {:.1}",
            cfg.mode.as_str(),
            cfg.epochs,
            log.total,
            log.source_seg,
            log.target_seg,
            log.rectification,
            log.expanded_mean
        );
        observer.on_epoch(&log);
        losses.push(log);
        if let Some(eval) = eval {
            metrics.push(evaluate_epoch(&model, eval, epoch)?);
        }
    }
    Ok(AdaptOutcome { model, prototypes: bank, losses, metrics })
}

pub fn losses_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,loss_source,loss_target_seg,loss_rect,loss_total,expanded_mean\n");
    for l in logs {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            l.epoch, l.lr, l.source_seg, l.target_seg, l.rectification, l.total, l.expanded_mean
        )
        .unwrap();
    }
    s
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,sparse_oa,sparse_mf1,sparse_miou,dense_oa,dense_mf1,dense_miou\n");
    for r in rows {
        let dense = r
            .dense
            .as_ref()
            .map(|d| format!("{:.6},{:.6},{:.6}", d.oa, d.mf1, d.miou))
            .unwrap_or_else(|| "-,-,-".to_string());
        writeln!(s, "{},{:.6},{:.6},{:.6},{dense}", r.epoch, r.sparse.oa, r.sparse.mf1, r.sparse.miou).unwrap();
    }
    s
}

/// Write checkpoints, logs and the resolved config under `dir`.
pub fn write_run(dir: &Path, cfg: &TrainConfig, outcome: &AdaptOutcome) -> Result<RunArtifacts> {
    let art = RunArtifacts {
        model: dir.join("model.prem"),
        prototypes: outcome.prototypes.as_ref().map(|_| dir.join("prototypes.prep")),
        losses: dir.join("losses.csv"),
        metrics: dir.join("metrics_by_epoch.csv"),
        config: dir.join("config.txt"),
    };
    outcome.model.save(&art.model)?;
    if let (Some(bank), Some(p)) = (&outcome.prototypes, &art.prototypes) {
        bank.save(p)?;
    }
    atomic_write(&art.losses, losses_csv(&outcome.losses).as_bytes())?;
    atomic_write(&art.metrics, metrics_csv(&outcome.metrics).as_bytes())?;
    atomic_write(&art.config, cfg.to_text().as_bytes())?;
    Ok(art)
}
