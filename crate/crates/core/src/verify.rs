//! Built-in self-check: gradient, equation and format properties run on
//! small random instances in 64-bit arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evalkit::ConfusionMatrix;
use crate::lossfns::{class_balance_weights, total_loss, LossToggles, SourceBatch, TargetBatch};
use crate::numcore::{fd_check, FdReport, Tensor};
use crate::protobank::{batch_centroids, PrototypeBank};
use crate::pseudolab::{compute_weights, expand, expansion_count, rectify, ExpandCandidates};
use crate::segmodel::{ModelConfig, ModelState};
use crate::synthdomain::{decode_mask, decode_raster, encode_mask, encode_raster, LabelMask, Raster, IGNORE};
use crate::util::derive_seed;

const FD_STEP: f64 = 1e-6;
const FD_TOLERANCE: f64 = 1e-4;
const MIN_RELU_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Corrupt analytic gradients to exercise the FD checks.
    pub inject_gradient_bug: bool,
    /// Random instances per gradient property.
    pub fd_instances: usize,
}

#[derive(Clone, Debug)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// A random two-branch mini-batch over 4×4 images.
pub struct FdInstance {
    pub model: ModelState,
    pub source_rasters: Vec<Raster>,
    pub source_labels: Vec<LabelMask>,
    pub target_rasters: Vec<Raster>,
    pub target_sparse: Vec<LabelMask>,
    pub target_expanded: Vec<LabelMask>,
    /// Prototype weights, fixed for the whole check.
    pub target_weights: Vec<Tensor>,
}

fn random_raster(rng: &mut ChaCha8Rng, bands: usize) -> Raster {
    Raster::new(4, 4, bands, (0..16 * bands).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, k: usize, p_label: f64) -> LabelMask {
    loop {
        let classes: Vec<u16> =
            (0..16).map(|_| if rng.gen_bool(p_label) { rng.gen_range(0..k as u16) } else { IGNORE }).collect();
        let m = LabelMask::new(4, 4, classes).unwrap();
        if m.labeled_count() > 0 {
            return m;
        }
    }
}

impl FdInstance {
    /// Draw an instance whose hidden units all sit at least
    /// `MIN_RELU_MARGIN` away from the ReLU kink.
    pub fn sample(seed: u64) -> Result<Self> {
        let config = ModelConfig { bands: 2, window_radius: 1, hidden_dims: vec![5], feature_dim: 4, num_classes: 3 };
        let k = config.num_classes;
        for attempt in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, attempt));
            let mut model = ModelState::init(config.clone(), rng.gen())?;
            let mut theta = model.params_flat();
            for t in theta.iter_mut() {
                *t += rng.gen_range(-0.2..0.2);
            }
            model.set_params_flat(&theta)?;
            let source_rasters: Vec<Raster> = (0..2).map(|_| random_raster(&mut rng, 2)).collect();
            let target_rasters: Vec<Raster> = (0..2).map(|_| random_raster(&mut rng, 2)).collect();
            let mut margin = f64::INFINITY;
            for r in source_rasters.iter().chain(&target_rasters) {
                margin = margin.min(model.relu_margin(r)?);
            }
            if margin < MIN_RELU_MARGIN {
                continue;
            }
            let source_labels: Vec<LabelMask> = (0..2).map(|_| random_mask(&mut rng, k, 0.9)).collect();
            let target_sparse: Vec<LabelMask> = (0..2).map(|_| random_mask(&mut rng, k, 0.3)).collect();
            let bank = PrototypeBank {
                centroids: Tensor::new(vec![k, 4], (0..4 * k).map(|_| rng.gen_range(0.0..1.5)).collect())?,
                valid: vec![true; k],
                momentum: 0.999,
            };
            let mut target_weights = Vec::new();
            let mut target_expanded = Vec::new();
            for (r, s) in target_rasters.iter().zip(&target_sparse) {
                let maps = model.forward(r, false)?;
                let w = compute_weights(&maps.features, &bank)?;
                let rect = rectify(&maps.probs, &w)?;
                let n = rng.gen_range(0..=16 - s.labeled_count());
                target_expanded.push(expand(&rect, s, n, ExpandCandidates::All)?.expanded_mask);
                target_weights.push(w);
            }
            return Ok(Self {
                model,
                source_rasters,
                source_labels,
                target_rasters,
                target_sparse,
                target_expanded,
                target_weights,
            });
        }
        Err(Error::Degenerate("no instance clear of ReLU kinks".into()))
    }

    /// Loss value, and optionally accumulate its parameter gradient into
    /// `model`'s gradient buffers.
    pub fn loss(&self, model: &mut ModelState, toggles: LossToggles, with_grad: bool) -> Result<f64> {
        let s_maps = self
            .source_rasters
            .iter()
            .map(|r| model.forward(r, with_grad))
            .collect::<Result<Vec<_>>>()?;
        let t_maps = self
            .target_rasters
            .iter()
            .map(|r| model.forward(r, with_grad))
            .collect::<Result<Vec<_>>>()?;
        let sp: Vec<&Tensor> = s_maps.iter().map(|m| &m.probs).collect();
        let sl: Vec<&LabelMask> = self.source_labels.iter().collect();
        let tp: Vec<&Tensor> = t_maps.iter().map(|m| &m.probs).collect();
        let te: Vec<&LabelMask> = self.target_expanded.iter().collect();
        let ts: Vec<&LabelMask> = self.target_sparse.iter().collect();
        let tw: Vec<&Tensor> = self.target_weights.iter().collect();
        let tl = total_loss(
            Some(&SourceBatch { probs: &sp, labels: &sl }),
            Some(&TargetBatch { probs: &tp, expanded: &te, sparse: &ts, weights: &tw }),
            toggles,
        )?;
        if with_grad {
            for (m, g) in s_maps.iter().zip(&tl.source_dlogits) {
                model.backward(m, g, None)?;
            }
            for (m, g) in t_maps.iter().zip(&tl.target_dlogits) {
                model.backward(m, g, None)?;
            }
        }
        Ok(tl.breakdown.total)
    }

    /// Analytic parameter gradient of the toggled loss.
    pub fn gradient(&self, toggles: LossToggles) -> Result<Vec<f64>> {
        let mut m = self.model.clone();
        m.zero_grad();
        self.loss(&mut m, toggles, true)?;
        Ok(m.grads_flat())
    }

    /// Compare the analytic gradient with central differences.
    pub fn check(&self, toggles: LossToggles, inject_bug: bool) -> Result<FdReport> {
        let mut analytic = self.gradient(toggles)?;
        if inject_bug {
            // skew one hidden-bias gradient entry
            let n_w = self.model.layers[0].weight.value.len();
            analytic[n_w] *= 1.5;
            analytic[n_w] += 1e-2;
        }
        let theta = self.model.params_flat();
        let mut probe = self.model.clone();
        fd_check(
            |t| {
                probe.set_params_flat(t).expect("parameter count");
                self.loss(&mut probe, toggles, false).expect("loss evaluation")
            },
            &analytic,
            &theta,
            FD_STEP,
        )
    }
}

/// Toggle sets that isolate each loss term, then the full sum.
pub fn fd_toggle_sets() -> [(&'static str, LossToggles); 4] {
    let none = LossToggles::NONE;
    [
        ("source_seg", LossToggles { source_seg: true, class_balance: true, ..none }),
        ("target_seg", LossToggles { target_seg: true, class_balance: true, ..none }),
        ("rectification", LossToggles { rectification: true, ..none }),
        ("total", LossToggles::ALL),
    ]
}

fn prop(name: &'static str, f: impl FnOnce() -> Result<Option<String>>) -> PropertyResult {
    match f() {
        Ok(None) => PropertyResult { name, passed: true, detail: String::new() },
        Ok(Some(why)) => PropertyResult { name, passed: false, detail: why },
        Err(e) => PropertyResult { name, passed: false, detail: e.to_string() },
    }
}

fn fd_property(name: &'static str, toggles: LossToggles, opts: VerifyOptions) -> PropertyResult {
    prop(name, || {
        let mut worst = 0.0f64;
        for i in 0..opts.fd_instances.max(1) {
            let inst = FdInstance::sample(derive_seed(0xFD, i as u64))?;
            let r = inst.check(toggles, opts.inject_gradient_bug)?;
            worst = worst.max(r.max_rel_err);
            if r.max_rel_err >= FD_TOLERANCE {
                return Ok(Some(format!(
                    "instance {i}: relative error {:.3e} at parameter {}",
                    r.max_rel_err, r.worst_index
                )));
            }
        }
        log::debug!("{name}: worst relative error {worst:.3e}");
        Ok(None)
    })
}

fn check_close(what: &str, got: f64, want: f64, tol: f64) -> Option<String> {
    ((got - want).abs() > tol).then(|| format!("{what}: got {got}, want {want}"))
}

/// Run every property and return one result per property.
pub fn run_all(opts: VerifyOptions) -> Vec<PropertyResult> {
    let opts = VerifyOptions { fd_instances: if opts.fd_instances == 0 { 50 } else { opts.fd_instances }, ..opts };
    let mut out = Vec::new();
    let names = ["gradient.source_seg", "gradient.target_seg", "gradient.rectification", "gradient.total"];
    for ((_, toggles), name) in fd_toggle_sets().into_iter().zip(names) {
        out.push(fd_property(name, toggles, opts));
    }

    out.push(prop("gradient.branch_additivity", || {
        let inst = FdInstance::sample(7)?;
        let none = LossToggles::NONE;
        let parts = [
            LossToggles { source_seg: true, class_balance: true, ..none },
            LossToggles { target_seg: true, class_balance: true, ..none },
            LossToggles { rectification: true, ..none },
        ];
        let total = inst.gradient(LossToggles::ALL)?;
        let mut sum = vec![0.0; total.len()];
        for t in parts {
            for (s, g) in sum.iter_mut().zip(inst.gradient(t)?) {
                *s += g;
            }
        }
        let err = total.iter().zip(&sum).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        Ok((err > 1e-12).then(|| format!("branch sum differs by {err:.3e}")))
    }));

    out.push(prop("pseudolab.weights_two_prototypes", || {
        let bank = PrototypeBank {
            centroids: Tensor::new(vec![2, 1], vec![0.0, 1.0])?,
            valid: vec![true, true],
            momentum: 0.999,
        };
        let w = compute_weights(&Tensor::new(vec![1, 1], vec![0.0])?, &bank)?;
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        Ok(check_close("w0", w.data()[0], want, 1e-12))
    }));

    out.push(prop("pseudolab.expansion_count", || {
        let e = std::f64::consts::E;
        let got = [
            expansion_count(100, 100, 1000, e)?,
            expansion_count(1, 100, 10_000, e)?,
            expansion_count(50, 100, 1000, e)?,
        ];
        Ok((got != [693, 99, 405]).then(|| format!("got {got:?}, want [693, 99, 405]")))
    }));

    out.push(prop("lossfns.class_balance_weights", || {
        let m = LabelMask::new(1, 4, vec![0, 0, 1, 0])?;
        let cb = class_balance_weights(&[&m], 2)?;
        Ok(check_close("w0", cb.weights[0], 1.0 / 1.75f64.ln(), 1e-12)
            .or_else(|| check_close("w1", cb.weights[1], 1.0 / 1.25f64.ln(), 1e-12)))
    }));

    out.push(prop("protobank.ema_contraction", || {
        let mut bank = PrototypeBank {
            centroids: Tensor::new(vec![1, 2], vec![3.0, -1.0])?,
            valid: vec![true],
            momentum: 0.999,
        };
        let target = [0.5, 2.0];
        let feats = Tensor::new(vec![1, 2], target.to_vec())?;
        let mask = LabelMask::new(1, 1, vec![0])?;
        let batch = batch_centroids(&[(&feats, &mask)], 1)?;
        let d0 = ((3.0f64 - 0.5).powi(2) + 9.0).sqrt();
        for t in 1..=100 {
            bank.ema_update(&batch)?;
            let c = bank.centroid(0).unwrap();
            let d = ((c[0] - target[0]).powi(2) + (c[1] - target[1]).powi(2)).sqrt();
            if let Some(msg) = check_close(&format!("step {t}"), d, 0.999f64.powi(t) * d0, 1e-9) {
                return Ok(Some(msg));
            }
        }
        Ok(None)
    }));

    out.push(prop("evalkit.report_example", || {
        let mut cm = ConfusionMatrix::new(2);
        for (t, p, n) in [(0u16, 0u16, 3), (0, 1, 1), (1, 0, 2), (1, 1, 4)] {
            for _ in 0..n {
                cm.add_pixel(t, p)?;
            }
        }
        let r = cm.report()?;
        Ok(check_close("OA", r.oa, 0.7, 1e-12)
            .or_else(|| check_close("IoU0", r.iou[0].unwrap(), 0.5, 1e-12))
            .or_else(|| check_close("IoU1", r.iou[1].unwrap(), 4.0 / 7.0, 1e-12))
            .or_else(|| check_close("F1_1", r.f1[1].unwrap(), 8.0 / 11.0, 1e-12)))
    }));

    out.push(prop("evalkit.iou_f1_identity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut cm = ConfusionMatrix::new(4);
            for _ in 0..64 {
                cm.add_pixel(rng.gen_range(0..4), rng.gen_range(0..4))?;
            }
            let r = cm.report()?;
            for (f1, iou) in r.f1.iter().zip(&r.iou) {
                if let (Some(f1), Some(iou)) = (f1, iou) {
                    if let Some(m) = check_close("IoU", *iou, f1 / (2.0 - f1), 1e-12) {
                        return Ok(Some(m));
                    }
                }
            }
        }
        Ok(None)
    }));

    out.push(prop("format.raster_mask_roundtrip", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_raster(&mut rng, 3);
        let m = random_mask(&mut rng, 5, 0.5);
        let ok = decode_raster(&encode_raster(&r)?)? == r && decode_mask(&encode_mask(&m)?)? == m;
        Ok((!ok).then(|| "round trip changed the data".to_string()))
    }));

    out.push(prop("format.checkpoint_roundtrip", || {
        let mut inst = FdInstance::sample(5)?.model;
        inst.quantize_to_checkpoint();
        let bytes = inst.encode()?;
        let back = ModelState::decode(&bytes)?;
        let ok = back.params_flat() == inst.params_flat() && back.encode()? == bytes;
        Ok((!ok).then(|| "model checkpoint not bit-exact".to_string()))
    }));

    out.push(prop("format.bad_magic_rejected", || {
        let r = Raster::new(1, 1, 1, vec![0.5])?;
        let mut bytes = encode_raster(&r)?;
        bytes[0] = b'X';
        Ok(match decode_raster(&bytes) {
            Err(Error::BadMagic { .. }) => None,
            other => Some(format!("expected BadMagic, got {other:?}")),
        })
    }));

    out
}
