use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::*;
use crate::tensor::{backward, sum_all, GradTape};
use crate::Mode;

fn micro_config(classes: usize, branches: &str) -> ModelConfig {
    let mut cfg = ModelConfig::new(classes);
    cfg.branches = BranchSet::parse(branches).unwrap();
    cfg.backbone = TinyBackboneConfig {
        trunk_channels: vec![2, 2, 2, 4],
        embed_channels: 8,
    };
    cfg
}

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn random_batch(rng: &mut ChaCha12Rng, n: usize) -> Tensor {
    let len = n * 3 * Model::INPUT_H * Model::INPUT_W;
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, &[n, 3, Model::INPUT_H, Model::INPUT_W]).unwrap()
}

fn random_tail(rng: &mut ChaCha12Rng, n: usize, e: usize) -> Tensor {
    let len = n * e * 24 * 8;
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, &[n, e, 24, 8]).unwrap()
}

// ---------------------------------------------------------------------------
// build_model

#[test]
fn full_model_exposes_seven_heads_three_ranking() {
    let model = build_model(&micro_config(4, "G+C+P"), &mut rng(1)).unwrap();
    assert_eq!(model.head_names(), vec!["g", "g_drop", "p1", "p2", "p_g", "c1", "c2"]);
    assert_eq!(model.ranking_head_names(), vec!["g", "g_drop", "p_g"]);
}

#[test]
fn channel_off_leaves_five_heads() {
    let model = build_model(&micro_config(4, "G+P"), &mut rng(2)).unwrap();
    assert_eq!(model.head_names().len(), 5);
    assert_eq!(model.ranking_head_names(), vec!["g", "g_drop", "p_g"]);
}

#[test]
fn part_only_keeps_pg_in_ranking_set() {
    let model = build_model(&micro_config(4, "P"), &mut rng(3)).unwrap();
    assert_eq!(model.head_names(), vec!["p1", "p2", "p_g"]);
    assert_eq!(model.ranking_head_names(), vec!["p_g"]);
}

#[test]
fn zero_branches_is_a_config_error() {
    assert!(BranchSet::parse("").is_err());
    let mut cfg = micro_config(4, "G");
    cfg.branches = BranchSet {
        global: false,
        channel: false,
        part: false,
    };
    assert!(matches!(
        build_model(&cfg, &mut rng(4)),
        Err(ModelError::Config(_))
    ));
}

// ---------------------------------------------------------------------------
// forward

#[test]
fn forward_shapes_and_inference_width() {
    let cfg = micro_config(5, "G+C+P");
    let model = build_model(&cfg, &mut rng(5)).unwrap();
    let batch = random_batch(&mut rng(6), 3);
    let mut tape = GradTape::disabled();
    let bundle = model.forward(&mut tape, &batch, Mode::Train).unwrap();
    assert_eq!(bundle.num_identity_heads(), 7);
    assert_eq!(bundle.num_ranking_heads(), 3);
    for head in bundle.heads() {
        assert_eq!(head.logits.shape(), &[3, 5]);
        assert_eq!(head.pre.shape(), &[3, 8]);
        assert_eq!(head.post.shape(), &[3, 8]);
    }
    assert_eq!(bundle.inference_embedding().shape(), &[3, 7 * 8]);
    assert_eq!(model.inference_width(), 56);
}

#[test]
fn forward_rejects_wrong_spatial_size() {
    let model = build_model(&micro_config(4, "G"), &mut rng(7)).unwrap();
    let bad = Tensor::zeros(&[2, 3, 128, 128]);
    let mut tape = GradTape::disabled();
    assert!(matches!(
        model.forward(&mut tape, &bad, Mode::Infer),
        Err(ModelError::InputShape { .. })
    ));
}

#[test]
fn constant_tail_makes_equal_part_and_channel_halves() {
    let model = build_model(&micro_config(4, "G+C+P"), &mut rng(8)).unwrap();
    let tail = Tensor::full(&[2, 8, 24, 8], 0.37);
    let mut tape = GradTape::disabled();

    let parts = model
        .branch_embeddings(&mut tape, Branch::Part, &tail, Mode::Infer)
        .unwrap();
    let p1 = &parts[0].1;
    let p2 = &parts[1].1;
    assert_eq!(p1.data(), p2.data());

    let chans = model
        .branch_embeddings(&mut tape, Branch::Channel, &tail, Mode::Infer)
        .unwrap();
    assert_eq!(chans[0].1.data(), chans[1].1.data());
}

#[test]
fn infer_mode_forward_is_deterministic() {
    let model = build_model(&micro_config(4, "G+C+P"), &mut rng(9)).unwrap();
    let batch = random_batch(&mut rng(10), 2);
    let a = model.infer_embeddings(&batch).unwrap();
    let b = model.infer_embeddings(&batch).unwrap();
    assert_eq!(a.data(), b.data());

    // two identical input images produce identical rows
    let one = random_batch(&mut rng(11), 1);
    let mut doubled = one.data().to_vec();
    doubled.extend_from_slice(one.data());
    let pair = Tensor::from_vec(doubled, &[2, 3, Model::INPUT_H, Model::INPUT_W]).unwrap();
    let emb = model.infer_embeddings(&pair).unwrap();
    let w = emb.shape()[1];
    assert_eq!(emb.data()[..w], emb.data()[w..]);
}

#[test]
fn infer_mode_drop_block_is_identity_for_g_drop() {
    let mut cfg = micro_config(4, "G");
    cfg.drop_ratio = 0.5;
    let model = build_model(&cfg, &mut rng(12)).unwrap();
    let tail = random_tail(&mut rng(13), 2, 8);
    let mut tape = GradTape::disabled();
    let heads = model
        .branch_embeddings(&mut tape, Branch::Global, &tail, Mode::Infer)
        .unwrap();
    // g_drop must equal the max pool of the untouched volume
    let plain = crate::tensor::pool2d(&mut tape, &tail, (24, 8), crate::tensor::PoolMode::Max).unwrap();
    let plain = crate::tensor::reshape(&mut tape, &plain, &[2, 8]).unwrap();
    assert_eq!(heads[1].1.data(), plain.data());
}

// ---------------------------------------------------------------------------
// drop_block

#[test]
fn drop_block_zero_ratio_is_identity() {
    let x = random_tail(&mut rng(14), 1, 8);
    let mut tape = GradTape::disabled();
    let y = drop_block(&mut tape, &x, 0.0, Mode::Train).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn drop_block_band_placement_around_peak_row() {
    // activation concentrated in row 5 of a 24-row map: the 8-row band
    // clamps to rows 1..=8
    let (n, c, h, w) = (1, 4, 24, 8);
    let mut data = vec![0.01; n * c * h * w];
    for ci in 0..c {
        for col in 0..w {
            data[(ci * h + 5) * w + col] = 10.0;
        }
    }
    let x = Tensor::from_vec(data, &[n, c, h, w]).unwrap();
    let mut tape = GradTape::disabled();
    let y = drop_block(&mut tape, &x, 1.0 / 3.0, Mode::Train).unwrap();
    for ci in 0..c {
        for row in 0..h {
            let base = (ci * h + row) * w;
            let zeroed = y.data()[base..base + w].iter().all(|&v| v == 0.0);
            let expect_zero = (1..=8).contains(&row);
            assert_eq!(zeroed, expect_zero, "channel {ci} row {row}");
            if !expect_zero {
                assert_eq!(&y.data()[base..base + w], &x.data()[base..base + w]);
            }
        }
    }
    assert_eq!(band_bounds(5, 24, 1.0 / 3.0), (1, 8));
}

#[test]
fn drop_block_infer_mode_is_identity() {
    let x = random_tail(&mut rng(15), 2, 8);
    let mut tape = GradTape::disabled();
    let y = drop_block(&mut tape, &x, 0.9, Mode::Infer).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn drop_block_zero_count_and_band_contains_argmax() {
    let mut r = rng(16);
    for _ in 0..50 {
        let (n, c, h, w) = (2, 3, 24, 8);
        let data: Vec<f64> = (0..n * c * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(data, &[n, c, h, w]).unwrap();
        let mut tape = GradTape::disabled();
        let y = drop_block(&mut tape, &x, 1.0 / 3.0, Mode::Train).unwrap();
        for s in 0..n {
            // exactly ceil(24/3)·8·3 zeroed entries per sample
            let sample = &y.data()[s * c * h * w..(s + 1) * c * h * w];
            let zeros = sample.iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeros, 8 * w * c);
            // the zeroed band contains the argmax row of |x| activation
            let mut act = vec![0.0; h];
            for ci in 0..c {
                for (row, a) in act.iter_mut().enumerate() {
                    let base = ((s * c + ci) * h + row) * w;
                    *a += x.data()[base..base + w].iter().map(|v| v.abs()).sum::<f64>();
                }
            }
            let peak = act
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let peak_row_zero = (0..w)
                .all(|col| y.data()[((s * c) * h + peak) * w + col] == 0.0);
            assert!(peak_row_zero, "band misses argmax row {peak}");
        }
    }
}

// ---------------------------------------------------------------------------
// bnneck

#[test]
fn bnneck_post_has_zero_feature_means_in_train() {
    let mut r = rng(17);
    let neck = BnNeck::new(8, 4, &mut r);
    let e = Tensor::from_vec((0..48).map(|_| r.random_range(-2.0..2.0)).collect(), &[6, 8]).unwrap();
    let mut tape = GradTape::disabled();
    let (pre, post, logits) = neck.forward(&mut tape, &e, Mode::Train).unwrap();
    assert_eq!(pre.data(), e.data());
    assert_eq!(logits.shape(), &[6, 4]);
    for f in 0..8 {
        let mean: f64 = (0..6).map(|i| post.data()[i * 8 + f]).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-10);
    }
}

#[test]
fn bnneck_zero_fc_gives_uniform_softmax() {
    let mut r = rng(18);
    let mut neck = BnNeck::new(8, 5, &mut r);
    neck.fc.weight = Tensor::zeros(&[5, 8]).requiring_grad();
    let e = Tensor::from_vec((0..16).map(|v| v as f64 * 0.1).collect(), &[2, 8]).unwrap();
    let mut tape = GradTape::disabled();
    let (_, _, logits) = neck.forward(&mut tape, &e, Mode::Train).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

// ---------------------------------------------------------------------------
// tiny_backbone

#[test]
fn tiny_backbone_honors_stride_16_contract() {
    let mut r = rng(19);
    let cfg = TinyBackboneConfig::default();
    let bb = TinyBackbone::new(&cfg, &[Branch::Global, Branch::Part, Branch::Channel], &mut r).unwrap();
    assert_eq!(bb.trunk_channels(), 64);
    let x = random_batch(&mut r, 1);
    let mut tape = GradTape::disabled();
    let t = bb.trunk(&mut tape, &x, Mode::Infer).unwrap();
    assert_eq!(t.shape(), &[1, 64, 24, 8]);
    for branch in [Branch::Global, Branch::Part, Branch::Channel] {
        let tail = bb.tail(&mut tape, branch, &t, Mode::Infer).unwrap();
        assert_eq!(tail.shape(), &[1, 512, 24, 8]);
    }
}

#[test]
fn tiny_backbone_tails_have_distinct_parameters() {
    let mut r = rng(20);
    let cfg = TinyBackboneConfig::default();
    let bb = TinyBackbone::new(&cfg, &[Branch::Global, Branch::Part, Branch::Channel], &mut r).unwrap();
    let params = bb.named_params();
    let tail_weights: Vec<&Tensor> = params
        .iter()
        .filter(|(n, _)| n.starts_with("tail.") && n.ends_with("conv.weight"))
        .map(|(_, t)| t)
        .collect();
    assert_eq!(tail_weights.len(), 3);
    assert_ne!(tail_weights[0].data(), tail_weights[1].data());
    assert_ne!(tail_weights[1].data(), tail_weights[2].data());
}

#[test]
fn default_model_param_count_under_five_million() {
    let cfg = ModelConfig::new(100);
    let model = build_model(&cfg, &mut rng(21)).unwrap();
    let count = model.param_count();
    assert!(count < 5_000_000, "param count {count}");
}

// ---------------------------------------------------------------------------
// channel branch weight sharing

#[test]
fn swapping_channel_halves_swaps_outputs() {
    let model = build_model(&micro_config(4, "C"), &mut rng(22)).unwrap();
    let tail = random_tail(&mut rng(23), 2, 8);
    // swap the two channel halves of the volume
    let (n, e, h, w) = (2, 8, 24, 8);
    let mut swapped = vec![0.0; n * e * h * w];
    for s in 0..n {
        for c in 0..e {
            let dst = (c + e / 2) % e;
            let src_base = (s * e + c) * h * w;
            let dst_base = (s * e + dst) * h * w;
            swapped[dst_base..dst_base + h * w]
                .copy_from_slice(&tail.data()[src_base..src_base + h * w]);
        }
    }
    let swapped = Tensor::from_vec(swapped, &[n, e, h, w]).unwrap();

    let mut tape = GradTape::disabled();
    let orig = model
        .branch_embeddings(&mut tape, Branch::Channel, &tail, Mode::Infer)
        .unwrap();
    let perm = model
        .branch_embeddings(&mut tape, Branch::Channel, &swapped, Mode::Infer)
        .unwrap();
    for (a, b) in orig[0].1.data().iter().zip(perm[1].1.data()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
    for (a, b) in orig[1].1.data().iter().zip(perm[0].1.data()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

// ---------------------------------------------------------------------------
// gradient flow

#[test]
fn gradients_reach_all_three_tails() {
    let model = build_model(&micro_config(4, "G+C+P"), &mut rng(24)).unwrap();
    let batch = random_batch(&mut rng(25), 2);
    let mut tape = GradTape::recording();
    let bundle = model.forward(&mut tape, &batch, Mode::Train).unwrap();
    let mut loss: Option<Tensor> = None;
    for head in bundle.heads() {
        let s = sum_all(&mut tape, &head.logits).unwrap();
        loss = Some(match loss {
            Some(acc) => crate::tensor::add(&mut tape, &acc, &s).unwrap(),
            None => s,
        });
    }
    backward(&loss.unwrap(), &tape).unwrap();
    for (name, t) in model.named_params() {
        if name.starts_with("tail.") && name.ends_with("conv.weight") {
            let g = t.grad().expect("tail got a gradient");
            let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 0.0, "{name} gradient norm is zero");
        }
    }
}

// ---------------------------------------------------------------------------
// checkpoint

#[test]
fn checkpoint_roundtrip_preserves_f32_cast_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.lmbn");
    let cfg = micro_config(4, "G+C+P");
    let model = build_model(&cfg, &mut rng(26)).unwrap();
    save_checkpoint(&model, &path).unwrap();

    let mut other = build_model(&cfg, &mut rng(27)).unwrap();
    load_checkpoint(&mut other, &path).unwrap();
    for ((na, a), (nb, b)) in model.named_params().iter().zip(other.named_params().iter()) {
        assert_eq!(na, nb);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x as f32, *y as f32, "{na}");
        }
    }
}

#[test]
fn checkpoint_shape_mismatch_reports_offenders() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.lmbn");
    let model = build_model(&micro_config(4, "G+C+P"), &mut rng(28)).unwrap();
    save_checkpoint(&model, &path).unwrap();

    // different class count changes every fc shape
    let mut other = build_model(&micro_config(6, "G+C+P"), &mut rng(29)).unwrap();
    let err = load_checkpoint(&mut other, &path).unwrap_err();
    match err {
        ModelError::Checkpoint(report) => {
            assert!(report.contains("shape mismatch"), "report:\n{report}");
            assert!(report.contains("fc.weight"), "report:\n{report}");
        }
        other => panic!("expected Checkpoint error, got {other:?}"),
    }
}
