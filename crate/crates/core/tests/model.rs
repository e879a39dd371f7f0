//! Model-level behavior: shape contracts, weight sharing, determinism,
//! persistence, and training sanity on small fixtures.

use ctx3d_core::ct::SliceGroup;
use ctx3d_core::det::{AnchorConfig, BBox};
use ctx3d_core::model::*;
use ctx3d_core::tape::Tape;
use ctx3d_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Synthetic slice group: flat background with one bright square per image
/// centered at (cx, cy) with the given half-side, all slices identical.
fn square_group(m: usize, h: usize, w: usize, cx: usize, cy: usize, half: usize) -> SliceGroup {
    let mut data = vec![60.0f32; m * 3 * h * w];
    for c in 0..m * 3 {
        for y in cy.saturating_sub(half)..(cy + half).min(h) {
            for x in cx.saturating_sub(half)..(cx + half).min(w) {
                data[c * h * w + y * w + x] = 180.0;
            }
        }
    }
    SliceGroup::new(m, h, w, 0, (2.0, 0.8, 0.8), data).unwrap()
}

fn small_cfg(m: usize) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(m);
    cfg.anchors = AnchorConfig { scales: vec![8.0, 12.0, 16.0], ratios: vec![0.5, 1.0, 2.0], stride: 8 };
    cfg.fc7_width = 64;
    cfg
}

#[test]
fn fused_map_shape_follows_s2dm() {
    for m in [1usize, 3] {
        let cfg = ModelConfig::tiny(m);
        let model = build_model(&cfg, 1).unwrap();
        let plan = model.plan();
        let group = square_group(m, 32, 32, 16, 16, 4);
        let mut tape: Tape<f32> = Tape::new();
        let p = leaf_params(&mut tape, &model.params, false);
        let mut maps = Vec::new();
        for i in 0..m {
            let img = tape.constant(normalized_image::<f32>(&group, i));
            let c5 = backbone_forward(&mut tape, &p, &plan, img).unwrap();
            maps.push(conv6_forward(&mut tape, &p, c5).unwrap());
        }
        let fused = tape.concat_channels(&maps).unwrap();
        assert_eq!(tape.value(fused).shape(), &[1, 49 * 10 * m, 4, 4]);
        let pooled = ctx3d_core::det::psroi_pool(&mut tape, fused, &[BBox::new(4.0, 4.0, 28.0, 28.0)], cfg.s, 8).unwrap();
        assert_eq!(tape.value(pooled).shape(), &[1, 10 * m, 7, 7]);
    }
}

#[test]
fn tiny_backbone_produces_stride8_map() {
    let cfg = ModelConfig::tiny(1);
    let model = build_model(&cfg, 1).unwrap();
    let plan = model.plan();
    let mut tape: Tape<f32> = Tape::new();
    let p = leaf_params(&mut tape, &model.params, false);
    let img = tape.constant(Tensor::zeros(&[1, 3, 128, 128]));
    let c5 = backbone_forward(&mut tape, &p, &plan, img).unwrap();
    assert_eq!(tape.value(c5).shape(), &[1, 64, 16, 16]);
}

#[test]
fn rejects_input_not_divisible_by_stride() {
    let cfg = ModelConfig::tiny(1);
    let model = build_model(&cfg, 1).unwrap();
    let plan = model.plan();
    let mut tape: Tape<f32> = Tape::new();
    let p = leaf_params(&mut tape, &model.params, false);
    let img = tape.constant(Tensor::zeros(&[1, 3, 36, 40]));
    assert!(backbone_forward(&mut tape, &p, &plan, img).is_err());
}

#[test]
fn weight_sharing_accumulates_gradients_across_images() {
    // gradient of sum(fused) w.r.t. shared conv weights equals the sum of
    // per-image runs on the same sample
    let cfg = small_cfg(3);
    let model = build_model(&cfg, 3).unwrap();
    let plan = model.plan();
    let store64 = model.params.to_f64();
    let group = square_group(3, 32, 32, 12, 20, 5);

    let sum_loss = |tape: &mut Tape<f64>, map: ctx3d_core::TensorId| -> ctx3d_core::TensorId {
        // collapse a [1,C,H,W] map to a scalar with constant weights
        let sh = tape.value(map).shape().to_vec();
        let numel: usize = sh.iter().product();
        let flat = tape.reshape(map, vec![1, numel]).unwrap();
        let w = tape.constant(Tensor::filled(&[numel, 1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        tape.fully_connected(flat, w, b).unwrap()
    };

    // full fused graph
    let mut tape: Tape<f64> = Tape::new();
    let p = leaf_params(&mut tape, &store64, true);
    let mut maps = Vec::new();
    for i in 0..3 {
        let img = tape.constant(normalized_image::<f64>(&group, i));
        let c5 = backbone_forward(&mut tape, &p, &plan, img).unwrap();
        maps.push(conv6_forward(&mut tape, &p, c5).unwrap());
    }
    let fused = tape.concat_channels(&maps).unwrap();
    let loss = sum_loss(&mut tape, fused);
    tape.backward(loss).unwrap();
    let full_grad: Vec<f64> = tape.grad(p.id("backbone.conv1.weight")).unwrap().to_vec();

    // manual sum over per-image runs
    let mut acc = vec![0.0f64; full_grad.len()];
    for i in 0..3 {
        let mut t: Tape<f64> = Tape::new();
        let p1 = leaf_params(&mut t, &store64, true);
        let img = t.constant(normalized_image::<f64>(&group, i));
        let c5 = backbone_forward(&mut t, &p1, &plan, img).unwrap();
        let c6 = conv6_forward(&mut t, &p1, c5).unwrap();
        let l = sum_loss(&mut t, c6);
        t.backward(l).unwrap();
        for (a, g) in acc.iter_mut().zip(t.grad(p1.id("backbone.conv1.weight")).unwrap()) {
            *a += g;
        }
    }
    let max_rel = full_grad
        .iter()
        .zip(&acc)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-9))
        .fold(0.0f64, f64::max);
    assert!(max_rel < 1e-5, "shared-weight gradient mismatch {max_rel}");
}

#[test]
fn m1_model_equals_manual_single_image_pipeline() {
    let cfg = small_cfg(1);
    let model = build_model(&cfg, 7).unwrap();
    let plan = model.plan();
    let group = square_group(1, 32, 32, 16, 16, 5);
    let rois = [BBox::new(8.0, 8.0, 26.0, 26.0), BBox::new(2.0, 3.0, 20.0, 29.0)];

    // model path: fused map is the concat of one conv6 map
    let mut tape: Tape<f32> = Tape::new();
    let p = leaf_params(&mut tape, &model.params, false);
    let img = tape.constant(normalized_image::<f32>(&group, 0));
    let c5 = backbone_forward(&mut tape, &p, &plan, img).unwrap();
    let c6 = conv6_forward(&mut tape, &p, c5).unwrap();
    let fused = tape.concat_channels(&[c6]).unwrap();
    let (cls_a, reg_a) = head_forward(&mut tape, &p, &cfg, fused, &rois).unwrap();

    // manual single-image path: no concat at all
    let (cls_b, reg_b) = head_forward(&mut tape, &p, &cfg, c6, &rois).unwrap();

    assert_eq!(tape.value(cls_a).data(), tape.value(cls_b).data());
    assert_eq!(tape.value(reg_a).data(), tape.value(reg_b).data());
}

#[test]
fn forward_train_losses_match_closed_form_recomputation() {
    let cfg = small_cfg(3);
    let model = build_model(&cfg, 11).unwrap();
    let plan = model.plan();
    let group = square_group(3, 64, 64, 30, 26, 6);
    let gt = vec![BBox::new(24.0, 20.0, 36.0, 32.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let mut tape: Tape<f32> = Tape::new();
    let p = leaf_params(&mut tape, &model.params, true);
    let (losses, targets) = forward_train_sample(&mut tape, &p, &plan, &cfg, &group, &gt, &mut rng).unwrap();

    for id in [losses.rpn_cls, losses.rpn_reg, losses.head_cls, losses.head_reg] {
        let v = tape.value(id).item();
        assert!(v.is_finite() && v >= 0.0);
    }

    // rebuild with the same targets and compare bit-for-bit
    let mut tape2: Tape<f32> = Tape::new();
    let p2 = leaf_params(&mut tape2, &model.params, true);
    let losses2 = forward_train_with_targets(&mut tape2, &p2, &plan, &cfg, &group, &targets).unwrap();
    assert_eq!(tape.value(losses.rpn_cls).item(), tape2.value(losses2.rpn_cls).item());
    assert_eq!(tape.value(losses.head_reg).item(), tape2.value(losses2.head_reg).item());

    // recompute the two classification losses outside the graph
    let stage = run_backbone_rpn(&mut tape2, &p2, &plan, &cfg, &group).unwrap();
    let logits = tape2.value(stage.rpn.cls_rows);
    let mut expect = 0.0f64;
    let mut counted = 0usize;
    for (r, &lb) in targets.rpn.labels.iter().enumerate() {
        if lb < 0 {
            continue;
        }
        let row = [logits.data()[r * 2] as f64, logits.data()[r * 2 + 1] as f64];
        let max = row[0].max(row[1]);
        let lse = ((row[0] - max).exp() + (row[1] - max).exp()).ln() + max;
        expect += lse - row[lb as usize];
        counted += 1;
    }
    expect /= counted as f64;
    let got = tape.value(losses.rpn_cls).item() as f64;
    assert!((got - expect).abs() < 1e-5, "rpn_cls {got} vs closed-form {expect}");

    // smooth-L1 head regression recomputed from the same rois
    let mut conv6_maps = Vec::new();
    for &c5 in &stage.conv5_maps {
        conv6_maps.push(conv6_forward(&mut tape2, &p2, c5).unwrap());
    }
    let fused = tape2.concat_channels(&conv6_maps).unwrap();
    let (_, reg) = head_forward(&mut tape2, &p2, &cfg, fused, &targets.rois.rois).unwrap();
    let pred = tape2.value(reg);
    let mut num = 0.0f64;
    let mut cnt = 0usize;
    for i in 0..targets.rois.rois.len() {
        for k in 0..4 {
            let m = targets.rois.bbox_inside[i][k] as f64;
            if m != 0.0 {
                cnt += 1;
                let d = pred.data()[i * 4 + k] as f64 - targets.rois.bbox_targets[i][k] as f64;
                num += m * if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
            }
        }
    }
    let expect_reg = if cnt > 0 { num / cnt as f64 } else { 0.0 };
    let got_reg = tape.value(losses.head_reg).item() as f64;
    assert!((got_reg - expect_reg).abs() < 1e-5, "head_reg {got_reg} vs closed-form {expect_reg}");
}

#[test]
fn reg_weight_zero_drops_the_fourth_term() {
    let cfg = small_cfg(3);
    let model = build_model(&cfg, 2).unwrap();
    let plan = model.plan();
    let group = square_group(3, 32, 32, 16, 16, 5);
    let gt = vec![BBox::new(11.0, 11.0, 21.0, 21.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape: Tape<f32> = Tape::new();
    let p = leaf_params(&mut tape, &model.params, true);
    let (losses, _) = forward_train_sample(&mut tape, &p, &plan, &cfg, &group, &gt, &mut rng).unwrap();
    let samples = [losses];
    let (_, with_w) = combine_losses(&mut tape, &samples, 10.0).unwrap();
    let (_, without) = combine_losses(&mut tape, &samples, 0.0).unwrap();
    let three_terms = without.rpn_cls + without.rpn_reg + without.head_cls;
    assert!((without.total - three_terms).abs() < 1e-6);
    assert!((with_w.total - (three_terms + 10.0 * with_w.head_reg)).abs() < 1e-5);
}

#[test]
fn zeroed_head_scores_uniform_half_and_inference_is_deterministic() {
    let cfg = small_cfg(3);
    let mut model = build_model(&cfg, 21).unwrap();
    for name in ["head.cls.weight", "head.cls.bias"] {
        let t = model.params.get_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let group = square_group(3, 64, 64, 20, 40, 6);
    let dets = forward_infer(&model, &group).unwrap();
    assert!(!dets.is_empty());
    for d in &dets {
        assert_eq!(d.score, 0.5);
    }
    let dets2 = forward_infer(&model, &group).unwrap();
    assert_eq!(dets.len(), dets2.len());
    for (a, b) in dets.iter().zip(&dets2) {
        assert_eq!(a.bbox, b.bbox);
        assert_eq!(a.score, b.score);
    }
}

#[test]
fn checkpoint_roundtrip_reproduces_inference_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(3);
    let model = build_model(&cfg, 33).unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path, &cfg).unwrap();
    for ((na, ta), (nb, tb)) in model.params.iter().zip(loaded.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data(), "parameter {na} differs after roundtrip");
    }
    let group = square_group(3, 64, 64, 33, 17, 5);
    let a = forward_infer(&model, &group).unwrap();
    let b = forward_infer(&loaded, &group).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.bbox, y.bbox);
        assert_eq!(x.score, y.score);
    }
}

#[test]
fn checkpoint_rejects_truncation_and_config_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(3);
    let model = build_model(&cfg, 4).unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &path).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    let trunc = dir.path().join("trunc.ckpt");
    std::fs::write(&trunc, &bytes[..bytes.len() - 5]).unwrap();
    assert!(load_checkpoint(&trunc, &cfg).is_err());

    let other = small_cfg(1);
    let err = load_checkpoint(&path, &other).unwrap_err();
    assert!(matches!(err, ctx3d_core::Error::FingerprintMismatch { .. }), "got {err}");
}
