use pre_core::evalkit::ConfusionMatrix;
use pre_core::lossfns::{balanced_ce, class_balance_weights, rectification_loss, CeReduction};
use pre_core::numcore::{matmul, softmax, Tensor};
use pre_core::protobank::{batch_centroids, PrototypeBank};
use pre_core::pseudolab::{compute_weights, expand, expansion_count, rectify, ExpandCandidates};
use pre_core::segmodel::{ModelConfig, ModelState};
use pre_core::synthdomain::{
    apply_remap, generate_world, sparsify, ClassSpec, LabelMask, Raster, RemapTable, SparsifyConfig, WorldSpec,
    IGNORE,
};
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn prob_rows(logits: &[f64], k: usize) -> Tensor {
    softmax(&tensor(logits.len() / k, k, logits.to_vec()))
}

fn mask_strategy(n: usize, k: u16) -> impl Strategy<Value = Vec<u16>> {
    proptest::collection::vec(prop_oneof![3 => 0..k, 1 => Just(IGNORE)], n)
}

fn small_world(seed: u64, k: usize) -> WorldSpec {
    let classes = (0..k)
        .map(|c| ClassSpec {
            class_id: c as u16,
            signature: vec![c as f64 / k as f64, 1.0 - c as f64 / k as f64],
            noise_sigma: vec![0.02; 2],
            patch_scale: 8.0 + (seed % 5) as f64,
            region_jitter: 0.01,
        })
        .collect();
    WorldSpec { bands: 2, height: 32, width: 40, classes }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_sum_to_one(logits in proptest::collection::vec(-50.0f64..50.0, 4 * 5)) {
        let p = prob_rows(&logits, 5);
        for i in 0..p.rows() {
            let s: f64 = p.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(i).iter().all(|&v| v >= 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn matmul_associative_with_identity(
        a in proptest::collection::vec(-3.0f64..3.0, 16),
        b in proptest::collection::vec(-3.0f64..3.0, 16),
        c in proptest::collection::vec(-3.0f64..3.0, 16),
    ) {
        let (a, b, c) = (tensor(4, 4, a), tensor(4, 4, b), tensor(4, 4, c));
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
        let i = Tensor::identity(4);
        prop_assert!(matmul(&i, &a).unwrap().max_abs_diff(&a) < 1e-15);
        prop_assert!(matmul(&a, &i).unwrap().max_abs_diff(&a) < 1e-15);
    }

    #[test]
    fn sparse_labels_agree_with_dense(seed in 0u64..10_000, k in 2usize..5, blocks in 1usize..6) {
        let spec = small_world(seed, k);
        let s = generate_world(seed, &spec, None).unwrap();
        let cfg = SparsifyConfig {
            blocks_per_class: blocks,
            block_size_range: (2, 5),
            boundary_margin: 1,
            line_class: Some(0),
            ..Default::default()
        };
        let sparse = sparsify(&s.labels, seed ^ 0x55, &cfg).unwrap();
        for (sp, d) in sparse.classes.iter().zip(&s.labels.classes) {
            prop_assert!(*sp == IGNORE || sp == d);
        }
        // every labeled pixel sits at least `boundary_margin` away from other classes
        for r in 0..sparse.height {
            for c in 0..sparse.width {
                let v = sparse.get(r, c);
                if v == IGNORE {
                    continue;
                }
                for rr in r.saturating_sub(1)..(r + 2).min(sparse.height) {
                    for cc in c.saturating_sub(1)..(c + 2).min(sparse.width) {
                        prop_assert_eq!(s.labels.get(rr, cc), v);
                    }
                }
            }
        }
    }

    #[test]
    fn world_generation_is_deterministic(seed in 0u64..10_000) {
        let spec = small_world(seed, 3);
        let a = generate_world(seed, &spec, None).unwrap();
        let b = generate_world(seed, &spec, None).unwrap();
        let bits = |r: &Raster| r.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.raster), bits(&b.raster));
        prop_assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn remap_preserves_labeled_count_without_drops(
        targets in proptest::collection::vec(0u16..3, 5),
        cells in mask_strategy(30, 5),
    ) {
        let table = RemapTable::new(targets.into_iter().map(Some).collect(), 3).unwrap();
        let m = LabelMask::new(5, 6, cells).unwrap();
        let out = apply_remap(&m, &table).unwrap();
        prop_assert_eq!(out.labeled_count(), m.labeled_count());
    }

    #[test]
    fn weights_are_distributions_and_monotone_in_distance(
        protos in proptest::collection::vec(-2.0f64..2.0, 4 * 3),
        f in proptest::collection::vec(-2.0f64..2.0, 3),
        pick in 0usize..4,
        shrink in 0.05f64..0.95,
    ) {
        let bank = PrototypeBank { centroids: tensor(4, 3, protos.clone()), valid: vec![true; 4], momentum: 0.999 };
        let w = compute_weights(&tensor(1, 3, f.clone()), &bank).unwrap();
        prop_assert!((w.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // move prototype `pick` toward f, leaving the others in place
        let mut moved = protos.clone();
        for j in 0..3 {
            moved[pick * 3 + j] = f[j] + shrink * (protos[pick * 3 + j] - f[j]);
        }
        let dist: f64 = (0..3).map(|j| (protos[pick * 3 + j] - f[j]).powi(2)).sum::<f64>().sqrt();
        prop_assume!(dist > 1e-6);
        let bank2 = PrototypeBank { centroids: tensor(4, 3, moved), valid: vec![true; 4], momentum: 0.999 };
        let w2 = compute_weights(&tensor(1, 3, f), &bank2).unwrap();
        prop_assert!(w2.data()[pick] > w.data()[pick]);
    }

    #[test]
    fn rectified_label_invariant_to_row_scaling(
        logits in proptest::collection::vec(-4.0f64..4.0, 6 * 3),
        wl in proptest::collection::vec(-4.0f64..4.0, 6 * 3),
        scales in proptest::collection::vec(0.01f64..100.0, 6),
    ) {
        let p = prob_rows(&logits, 3);
        let w = prob_rows(&wl, 3);
        let mut ws = w.clone();
        for (i, s) in scales.iter().enumerate() {
            ws.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        prop_assert_eq!(rectify(&p, &w).unwrap().rect_label, rectify(&p, &ws).unwrap().rect_label);
    }

    #[test]
    fn expansion_count_schedule(total in 1usize..300, consistent in 0usize..100_000) {
        let mut prev = 0;
        for m in 1..=total {
            let n = expansion_count(m, total, consistent, std::f64::consts::E).unwrap();
            prop_assert!(n >= prev);
            prop_assert!(n as f64 <= std::f64::consts::LN_2 * consistent as f64);
            prev = n;
        }
    }

    #[test]
    fn expansion_respects_ground_truth(
        logits in proptest::collection::vec(-4.0f64..4.0, 20 * 3),
        wl in proptest::collection::vec(-4.0f64..4.0, 20 * 3),
        cells in mask_strategy(20, 3),
        n in 0usize..30,
        consistent_only in any::<bool>(),
    ) {
        let rect = rectify(&prob_rows(&logits, 3), &prob_rows(&wl, 3)).unwrap();
        let sparse = LabelMask::new(4, 5, cells).unwrap();
        let cand = if consistent_only { ExpandCandidates::Consistent } else { ExpandCandidates::All };
        let out = expand(&rect, &sparse, n, cand).unwrap();
        let pool: Vec<usize> = (0..20)
            .filter(|&i| sparse.classes[i] == IGNORE && (!consistent_only || rect.consistent[i]))
            .collect();
        prop_assert_eq!(out.count, n.min(pool.len()));
        for i in 0..20 {
            if sparse.classes[i] != IGNORE {
                prop_assert_eq!(out.expanded_mask.classes[i], sparse.classes[i]);
            }
        }
        for &i in &out.selected {
            prop_assert!(pool.contains(&i));
            prop_assert_eq!(out.expanded_mask.classes[i], rect.rect_label[i]);
        }
        // every selected score dominates every unselected candidate score
        let min_sel = out.selected.iter().map(|&i| rect.score[i]).fold(f64::INFINITY, f64::min);
        for i in pool.iter().filter(|i| !out.selected.contains(i)) {
            prop_assert!(rect.score[*i] <= min_sel);
        }
    }

    #[test]
    fn class_proportions_sum_to_one(cells in mask_strategy(40, 6)) {
        let m = LabelMask::new(5, 8, cells).unwrap();
        prop_assume!(m.labeled_count() > 0);
        let cb = class_balance_weights(&[&m], 6).unwrap();
        prop_assert!((cb.mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unbalanced_ce_is_mean_ce(logits in proptest::collection::vec(-4.0f64..4.0, 12 * 4), cells in mask_strategy(12, 4)) {
        let m = LabelMask::new(3, 4, cells).unwrap();
        prop_assume!(m.labeled_count() > 0);
        let p = prob_rows(&logits, 4);
        let mut sum = 0.0;
        for (i, &c) in m.classes.iter().enumerate() {
            if c != IGNORE {
                sum -= p.row(i)[c as usize].ln();
            }
        }
        let mean = sum / m.labeled_count() as f64;
        for red in [CeReduction::PixelMean, CeReduction::ClassMean] {
            let (l, _) = balanced_ce(&[&p], &[&m], false, red).unwrap();
            prop_assert!((l.value - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn rectification_loss_vanishes_at_aligned_one_hots(labels in proptest::collection::vec(0usize..3, 8), sharp in 20.0f64..40.0) {
        let logits: Vec<f64> = labels.iter().flat_map(|&c| (0..3).map(move |q| if q == c { sharp } else { 0.0 })).collect();
        let p = prob_rows(&logits, 3);
        let w = tensor(8, 3, labels.iter().flat_map(|&c| (0..3).map(move |q| if q == c { 1.0 } else { 0.0 })).collect());
        let m = LabelMask::filled(2, 4, IGNORE);
        let l = rectification_loss(&[&p], &[&w], &[&m]).unwrap();
        prop_assert!(l.value < 3.0 * (-sharp).exp());
    }

    #[test]
    fn ema_update_is_componentwise_convex(
        old in proptest::collection::vec(-5.0f64..5.0, 2 * 3),
        new in proptest::collection::vec(-5.0f64..5.0, 2 * 3),
        lambda in 0.0f64..0.9999,
    ) {
        let mut bank = PrototypeBank { centroids: tensor(2, 3, old.clone()), valid: vec![true; 2], momentum: lambda };
        let batch = pre_core::protobank::BatchCentroids { centroids: tensor(2, 3, new.clone()), counts: vec![1, 1] };
        bank.ema_update(&batch).unwrap();
        for ((&o, &n), &u) in old.iter().zip(&new).zip(bank.centroids.data()) {
            prop_assert!(u >= o.min(n) - 1e-12 && u <= o.max(n) + 1e-12);
            prop_assert!((u - (lambda * o + (1.0 - lambda) * n)).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_means_are_count_weighted_batch_means(
        feats in proptest::collection::vec(-3.0f64..3.0, 4 * 6 * 2),
        cells in proptest::collection::vec(mask_strategy(6, 3), 4),
    ) {
        let ft: Vec<Tensor> = feats.chunks(12).map(|c| tensor(6, 2, c.to_vec())).collect();
        let ms: Vec<LabelMask> = cells.into_iter().map(|c| LabelMask::new(2, 3, c).unwrap()).collect();
        prop_assume!(ms.iter().any(|m| m.labeled_count() > 0));
        let all: Vec<(&Tensor, &LabelMask)> = ft.iter().zip(&ms).collect();
        let bank = PrototypeBank::from_features(&all, 3, 0.999).unwrap();
        let parts = [batch_centroids(&all[..1], 3).unwrap(), batch_centroids(&all[1..], 3).unwrap()];
        for k in 0..3 {
            let n: usize = parts.iter().map(|p| p.counts[k]).sum();
            prop_assert_eq!(bank.valid[k], n > 0);
            if n == 0 {
                continue;
            }
            for j in 0..2 {
                let v: f64 = parts.iter().map(|p| p.counts[k] as f64 * p.centroids.row(k)[j]).sum::<f64>() / n as f64;
                prop_assert!((bank.centroids.row(k)[j] - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn metric_identities(pairs in proptest::collection::vec((0u16..4, 0u16..4), 1..200), split in 0usize..200) {
        let cm_of = |ps: &[(u16, u16)]| {
            let mut cm = ConfusionMatrix::new(4);
            for &(t, p) in ps {
                cm.add_pixel(t, p).unwrap();
            }
            cm
        };
        let whole = cm_of(&pairs);
        let s = split.min(pairs.len());
        let mut merged = cm_of(&pairs[..s]);
        merged.merge(&cm_of(&pairs[s..])).unwrap();
        prop_assert_eq!(&merged, &whole);

        let r = whole.report().unwrap();
        for (f1, iou) in r.f1.iter().zip(&r.iou) {
            if let (Some(f1), Some(iou)) = (f1, iou) {
                prop_assert!((iou - f1 / (2.0 - f1)).abs() < 1e-12);
            }
        }
        let perm = [2u16, 0, 3, 1];
        let permuted: Vec<(u16, u16)> = pairs.iter().map(|&(t, p)| (perm[t as usize], perm[p as usize])).collect();
        prop_assert!((cm_of(&permuted).report().unwrap().oa - r.oa).abs() < 1e-15);
    }
}

#[test]
fn two_branch_gradients_accumulate_into_one_buffer() {
    let cfg = ModelConfig { bands: 2, window_radius: 1, hidden_dims: vec![5], feature_dim: 4, num_classes: 3 };
    let model = ModelState::init(cfg, 9).unwrap();
    let raster = |seed: u32| {
        Raster::new(4, 4, 2, (0..32).map(|i| ((i * 37 + seed * 11) % 17) as f32 / 17.0 - 0.5).collect()).unwrap()
    };
    let (src, tgt) = (raster(1), raster(2));
    let dl = |seed: usize| tensor(16, 3, (0..48).map(|i| ((i * 7 + seed) % 13) as f64 / 13.0 - 0.5).collect());
    let (ds, dt) = (dl(3), dl(5));

    let mut joint = model.clone();
    let ms = joint.forward(&src, true).unwrap();
    let mt = joint.forward(&tgt, true).unwrap();
    joint.backward(&ms, &ds, None).unwrap();
    joint.backward(&mt, &dt, None).unwrap();

    let mut a = model.clone();
    let m = a.forward(&src, true).unwrap();
    a.backward(&m, &ds, None).unwrap();
    let mut b = model.clone();
    let m = b.forward(&tgt, true).unwrap();
    b.backward(&m, &dt, None).unwrap();
    for ((j, x), y) in joint.grads_flat().iter().zip(a.grads_flat()).zip(b.grads_flat()) {
        assert!((j - (x + y)).abs() < 1e-12);
    }

    joint.sgd_step(0.1, 0.9, 1e-4);
    let mut summed = model.clone();
    let m = summed.forward(&src, true).unwrap();
    summed.backward(&m, &ds, None).unwrap();
    let m = summed.forward(&tgt, true).unwrap();
    summed.backward(&m, &dt, None).unwrap();
    summed.sgd_step(0.1, 0.9, 1e-4);
    assert_eq!(joint.params_flat(), summed.params_flat());
}
